//! Acquisition geometry, image grids and the data containers shared by every
//! reconstruction method.
//!
//! Conventions:
//! - All lengths are meters, times seconds. The ring is centered at the origin.
//! - Element `i` of an `N`-element ring sits at angle `2πi/N`.
//! - Images are stored row-major as `ny × nx` arrays; row `iy` increases with +y.
//! - Sinograms are stored as `num_elements × num_samples` arrays.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const ORIGIN: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Self::new(radius * angle.cos(), radius * angle.sin())
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    /// Rotate counter-clockwise about the origin.
    pub fn rotated(self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Uniform circular transducer array centered at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct RingGeometry {
    radius_m: f64,
    element_angles: Vec<f64>,
}

impl RingGeometry {
    pub fn new(radius_m: f64, num_elements: usize) -> Result<Self> {
        if !(radius_m.is_finite() && radius_m > 0.0) {
            return Err(invalid(
                "radius_m",
                format!("must be positive, got {radius_m}"),
            ));
        }
        if num_elements == 0 {
            return Err(invalid("num_elements", "must be at least 1"));
        }
        let element_angles = (0..num_elements)
            .map(|i| 2.0 * PI * i as f64 / num_elements as f64)
            .collect();
        Ok(Self {
            radius_m,
            element_angles,
        })
    }

    pub fn radius_m(&self) -> f64 {
        self.radius_m
    }

    pub fn num_elements(&self) -> usize {
        self.element_angles.len()
    }

    pub fn element_angles(&self) -> &[f64] {
        &self.element_angles
    }

    pub fn element_angle(&self, element: usize) -> f64 {
        self.element_angles[element]
    }

    pub fn element_position(&self, element: usize) -> Point2 {
        Point2::from_polar(self.radius_m, self.element_angles[element])
    }

    /// Unit vector pointing from the element toward the ring center.
    pub fn inward_normal(&self, element: usize) -> Point2 {
        Point2::from_polar(1.0, self.element_angles[element] + PI)
    }

    /// Angular spacing between neighbouring elements.
    pub fn angular_pitch(&self) -> f64 {
        2.0 * PI / self.num_elements() as f64
    }
}

/// Homogeneous acoustic medium.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Medium {
    pub sos_mps: f64,
    #[serde(default = "default_grueneisen")]
    pub grueneisen: f64,
}

fn default_grueneisen() -> f64 {
    1.0
}

impl Medium {
    pub fn new(sos_mps: f64) -> Result<Self> {
        Self::with_grueneisen(sos_mps, 1.0)
    }

    pub fn with_grueneisen(sos_mps: f64, grueneisen: f64) -> Result<Self> {
        let m = Self {
            sos_mps,
            grueneisen,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sos_mps.is_finite() && self.sos_mps > 0.0) {
            return Err(invalid(
                "sos_mps",
                format!("must be positive, got {}", self.sos_mps),
            ));
        }
        if !(self.grueneisen.is_finite() && self.grueneisen > 0.0) {
            return Err(invalid(
                "grueneisen",
                format!("must be positive, got {}", self.grueneisen),
            ));
        }
        Ok(())
    }
}

/// Temporal sampling of the recorded traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub sample_rate_hz: f64,
    pub num_samples: usize,
    #[serde(default)]
    pub t_start_s: f64,
}

impl Acquisition {
    pub fn new(sample_rate_hz: f64, num_samples: usize) -> Result<Self> {
        let a = Self {
            sample_rate_hz,
            num_samples,
            t_start_s: 0.0,
        };
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz.is_finite() && self.sample_rate_hz > 0.0) {
            return Err(invalid(
                "sample_rate_hz",
                format!("must be positive, got {}", self.sample_rate_hz),
            ));
        }
        if self.num_samples < 3 {
            return Err(invalid(
                "num_samples",
                format!("need at least 3 samples, got {}", self.num_samples),
            ));
        }
        if !self.t_start_s.is_finite() {
            return Err(invalid("t_start_s", "must be finite"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }

    pub fn time(&self, sample: usize) -> f64 {
        self.t_start_s + sample as f64 / self.sample_rate_hz
    }
}

/// Square-pixel reconstruction grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageGrid {
    pub nx: usize,
    pub ny: usize,
    pub pixel_size_m: f64,
    /// Physical center of the grid; pixel centers are laid out symmetrically around it.
    #[serde(default)]
    pub center: Point2,
}

impl ImageGrid {
    /// Grid centered on the ring center.
    pub fn centered(nx: usize, ny: usize, pixel_size_m: f64) -> Result<Self> {
        let g = Self {
            nx,
            ny,
            pixel_size_m,
            center: Point2::ORIGIN,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(invalid(
                "grid",
                format!("empty grid {}x{}", self.nx, self.ny),
            ));
        }
        if !(self.pixel_size_m.is_finite() && self.pixel_size_m > 0.0) {
            return Err(invalid(
                "pixel_size_m",
                format!("must be positive, got {}", self.pixel_size_m),
            ));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.nx * self.ny
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    /// Center of pixel (0, 0).
    pub fn origin(&self) -> Point2 {
        let h = self.pixel_size_m;
        Point2::new(
            self.center.x - 0.5 * (self.nx as f64 - 1.0) * h,
            self.center.y - 0.5 * (self.ny as f64 - 1.0) * h,
        )
    }

    pub fn width_m(&self) -> f64 {
        self.nx as f64 * self.pixel_size_m
    }

    pub fn height_m(&self) -> f64 {
        self.ny as f64 * self.pixel_size_m
    }

    /// Lower-left corner of the physical extent (pixel edges, not centers).
    pub fn min_corner(&self) -> Point2 {
        Point2::new(
            self.center.x - 0.5 * self.width_m(),
            self.center.y - 0.5 * self.height_m(),
        )
    }

    /// Half-diagonal of the physical extent: the radius of the circle that
    /// circumscribes the square ROI.
    pub fn roi_radius_m(&self) -> f64 {
        0.5 * self.width_m().hypot(self.height_m())
    }

    pub fn pixel_center(&self, ix: usize, iy: usize) -> Result<Point2> {
        if ix >= self.nx || iy >= self.ny {
            return Err(Error::IndexOutOfRange {
                ix,
                iy,
                nx: self.nx,
                ny: self.ny,
            });
        }
        Ok(self.pixel_center_unchecked(ix, iy))
    }

    pub(crate) fn pixel_center_unchecked(&self, ix: usize, iy: usize) -> Point2 {
        let o = self.origin();
        Point2::new(
            o.x + ix as f64 * self.pixel_size_m,
            o.y + iy as f64 * self.pixel_size_m,
        )
    }

    /// Pixel whose cell contains `p`, or `None` when `p` lies outside the grid.
    pub fn nearest_pixel(&self, p: Point2) -> Option<(usize, usize)> {
        let o = self.origin();
        let u = ((p.x - o.x) / self.pixel_size_m).round();
        let v = ((p.y - o.y) / self.pixel_size_m).round();
        if u < 0.0 || v < 0.0 || u >= self.nx as f64 || v >= self.ny as f64 {
            return None;
        }
        Some((u as usize, v as usize))
    }

    /// Whether `p` lies inside the physical extent of the grid.
    pub fn contains(&self, p: Point2) -> bool {
        let lo = self.min_corner();
        p.x >= lo.x && p.y >= lo.y && p.x <= lo.x + self.width_m() && p.y <= lo.y + self.height_m()
    }

    /// Check that every grid corner lies strictly inside the ring.
    pub fn check_inside_ring(&self, ring: &RingGeometry) -> Result<()> {
        let lo = self.min_corner();
        let corners = [
            lo,
            Point2::new(lo.x + self.width_m(), lo.y),
            Point2::new(lo.x, lo.y + self.height_m()),
            Point2::new(lo.x + self.width_m(), lo.y + self.height_m()),
        ];
        let far = corners.iter().map(|c| c.norm()).fold(0.0, f64::max);
        if far >= ring.radius_m() {
            return Err(Error::Geometry(format!(
                "grid corner at {:.4} mm from the ring center is not inside the {:.4} mm ring",
                far * 1e3,
                ring.radius_m() * 1e3
            )));
        }
        Ok(())
    }
}

/// Recorded (or simulated) pressure traces for one ring acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Sinogram {
    pub geometry: RingGeometry,
    pub acquisition: Acquisition,
    /// `num_elements × num_samples`.
    pub data: Array2<f64>,
}

impl Sinogram {
    pub fn new(
        geometry: RingGeometry,
        acquisition: Acquisition,
        data: Array2<f64>,
    ) -> Result<Self> {
        acquisition.validate()?;
        if data.dim() != (geometry.num_elements(), acquisition.num_samples) {
            return Err(Error::ShapeMismatch(format!(
                "sinogram data is {:?}, geometry/acquisition expect ({}, {})",
                data.dim(),
                geometry.num_elements(),
                acquisition.num_samples
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sinogram data".into()));
        }
        Ok(Self {
            geometry,
            acquisition,
            data,
        })
    }

    pub fn zeros(geometry: RingGeometry, acquisition: Acquisition) -> Self {
        let data = Array2::zeros((geometry.num_elements(), acquisition.num_samples));
        Self {
            geometry,
            acquisition,
            data,
        }
    }

    pub fn num_elements(&self) -> usize {
        self.geometry.num_elements()
    }

    pub fn num_samples(&self) -> usize {
        self.acquisition.num_samples
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Keep `k` equally spaced elements starting at element 0.
pub fn subsample_projections(sino: &Sinogram, k: usize) -> Result<Sinogram> {
    let n = sino.num_elements();
    if k == 0 || k > n {
        return Err(invalid("k", format!("need 1 <= k <= {n}, got {k}")));
    }
    if !n.is_multiple_of(k) {
        return Err(invalid(
            "k",
            format!("{k} projections do not evenly divide {n} elements"),
        ));
    }
    let stride = n / k;
    let rows: Vec<usize> = (0..k).map(|i| i * stride).collect();
    let data = sino.data.select(Axis(0), &rows);
    Ok(Sinogram {
        geometry: RingGeometry::new(sino.geometry.radius_m(), k)?,
        acquisition: sino.acquisition,
        data,
    })
}

/// Initial-heat (initial-pressure) image on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatImage {
    pub grid: ImageGrid,
    /// `ny × nx`, row `iy`.
    pub values: Array2<f64>,
}

impl HeatImage {
    pub fn new(grid: ImageGrid, values: Array2<f64>) -> Result<Self> {
        if values.dim() != grid.shape() {
            return Err(Error::ShapeMismatch(format!(
                "image values are {:?}, grid is {:?}",
                values.dim(),
                grid.shape()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: ImageGrid) -> Self {
        Self {
            grid,
            values: Array2::zeros(grid.shape()),
        }
    }

    pub fn from_fn(grid: ImageGrid, mut f: impl FnMut(Point2) -> f64) -> Self {
        let values = Array2::from_shape_fn(grid.shape(), |(iy, ix)| {
            f(grid.pixel_center_unchecked(ix, iy))
        });
        Self { grid, values }
    }

    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("image arrays are always standard layout")
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Pixel (ix, iy) with the largest value.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((iy, ix), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (ix, iy);
            }
        }
        best
    }

    /// Min-max normalize to [0, 1]; a constant image maps to all zeros.
    pub fn normalized(&self) -> HeatImage {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        let values = if span > 0.0 {
            self.values.mapv(|v| (v - lo) / span)
        } else {
            Array2::zeros(self.values.dim())
        };
        HeatImage {
            grid: self.grid,
            values,
        }
    }
}
