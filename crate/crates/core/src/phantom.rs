//! Synthetic initial-heat phantoms and simulated acquisitions.
//!
//! A phantom is a list of [`Structure`]s (discs and tapered capsules), each
//! with an amplitude in (0, 1]. Rasterization takes the maximum amplitude of
//! the structures covering each pixel center.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::ForwardOperator;
use crate::geometry::{Acquisition, HeatImage, ImageGrid, Medium, Point2, RingGeometry, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Disc {
        center: Point2,
        radius_m: f64,
    },
    /// Segment with a radius that varies linearly from `start` to `end`.
    Capsule {
        start: Point2,
        end: Point2,
        start_radius_m: f64,
        end_radius_m: f64,
    },
}

impl Shape {
    pub fn contains(&self, p: Point2) -> bool {
        match *self {
            Shape::Disc { center, radius_m } => p.distance(center) <= radius_m,
            Shape::Capsule {
                start,
                end,
                start_radius_m,
                end_radius_m,
            } => {
                let d = end - start;
                let len2 = d.dot(d);
                let s = if len2 > 0.0 {
                    ((p - start).dot(d) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let r = start_radius_m + s * (end_radius_m - start_radius_m);
                p.distance(start + d * s) <= r
            }
        }
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point2, Point2) {
        match *self {
            Shape::Disc { center, radius_m } => (
                Point2::new(center.x - radius_m, center.y - radius_m),
                Point2::new(center.x + radius_m, center.y + radius_m),
            ),
            Shape::Capsule {
                start,
                end,
                start_radius_m,
                end_radius_m,
            } => {
                let r = start_radius_m.max(end_radius_m);
                (
                    Point2::new(start.x.min(end.x) - r, start.y.min(end.y) - r),
                    Point2::new(start.x.max(end.x) + r, start.y.max(end.y) + r),
                )
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    #[serde(flatten)]
    pub shape: Shape,
    pub amplitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Point2,
    pub radius_m: f64,
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn unit() -> f64 {
    1.0
}

/// Procedural branching vessel tree: a random binary tree of tapered segments
/// grown upward from near the bottom of a square of half-size `extent_m`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VesselParams {
    pub seed: u64,
    /// Half-size of the centered square the tree must stay inside.
    pub extent_m: f64,
    /// Diameter of the trunk.
    pub trunk_width_m: f64,
    /// Levels of branching below the trunk.
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "unit")]
    pub amplitude: f64,
}

fn default_depth() -> usize {
    4
}

impl VesselParams {
    /// Default tree scaled to a grid: fills most of the grid, trunk three pixels wide.
    pub fn for_grid(grid: &ImageGrid, seed: u64) -> Self {
        let half = 0.5 * grid.width_m().min(grid.height_m());
        Self {
            seed,
            extent_m: 0.85 * half,
            trunk_width_m: 3.0 * grid.pixel_size_m,
            depth: default_depth(),
            amplitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PhantomSpec {
    VesselBranches(VesselParams),
    Spheres {
        spheres: Vec<Sphere>,
    },
    WirePolyline {
        vertices: Vec<Point2>,
        width_m: f64,
        #[serde(default = "unit")]
        amplitude: f64,
    },
}

impl PhantomSpec {
    pub fn structures(&self) -> Vec<Structure> {
        match self {
            PhantomSpec::VesselBranches(p) => vessel_tree(p),
            PhantomSpec::Spheres { spheres } => spheres
                .iter()
                .map(|s| Structure {
                    shape: Shape::Disc {
                        center: s.center,
                        radius_m: s.radius_m,
                    },
                    amplitude: s.amplitude,
                })
                .collect(),
            PhantomSpec::WirePolyline {
                vertices,
                width_m,
                amplitude,
            } => vertices
                .windows(2)
                .map(|w| Structure {
                    shape: Shape::Capsule {
                        start: w[0],
                        end: w[1],
                        start_radius_m: 0.5 * width_m,
                        end_radius_m: 0.5 * width_m,
                    },
                    amplitude: *amplitude,
                })
                .collect(),
        }
    }
}

fn vessel_tree(p: &VesselParams) -> Vec<Structure> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut out = Vec::new();
    let start = Point2::new(rng.gen_range(-0.2..0.2) * p.extent_m, -0.95 * p.extent_m);
    let angle = std::f64::consts::FRAC_PI_2 + rng.gen_range(-0.15..0.15);
    grow(
        &mut rng,
        p,
        start,
        angle,
        0.75 * p.extent_m,
        0.5 * p.trunk_width_m,
        p.depth,
        &mut out,
    );
    out
}

#[allow(clippy::too_many_arguments)]
fn grow(
    rng: &mut ChaCha8Rng,
    p: &VesselParams,
    start: Point2,
    angle: f64,
    length: f64,
    radius: f64,
    depth: usize,
    out: &mut Vec<Structure>,
) {
    let end_radius = 0.8 * radius;
    // shorten the segment until the capsule stays inside the square
    let margin = p.extent_m - radius;
    let mut len = length;
    let mut end = start + Point2::from_polar(len, angle);
    while (end.x.abs() > margin || end.y.abs() > margin) && len > radius {
        len *= 0.8;
        end = start + Point2::from_polar(len, angle);
    }
    if end.x.abs() > margin || end.y.abs() > margin {
        return;
    }
    out.push(Structure {
        shape: Shape::Capsule {
            start,
            end,
            start_radius_m: radius,
            end_radius_m: end_radius,
        },
        amplitude: p.amplitude,
    });
    if depth == 0 {
        return;
    }
    for side in [-1.0, 1.0] {
        let turn = side * rng.gen_range(0.35..0.75);
        let shrink = rng.gen_range(0.6..0.8);
        grow(
            rng,
            p,
            end,
            angle + turn,
            length * shrink,
            0.75 * end_radius,
            depth - 1,
            out,
        );
    }
}

/// Rasterize `spec` at the pixel centers of `grid`.
pub fn rasterize(spec: &PhantomSpec, grid: &ImageGrid) -> Result<HeatImage> {
    let structures = spec.structures();
    let lo = grid.min_corner();
    let hi = Point2::new(lo.x + grid.width_m(), lo.y + grid.height_m());
    for (i, s) in structures.iter().enumerate() {
        if !(s.amplitude > 0.0 && s.amplitude <= 1.0) {
            return Err(invalid(
                "amplitude",
                format!("structure {i} has amplitude {} outside (0, 1]", s.amplitude),
            ));
        }
        let (a, b) = s.shape.bounds();
        if a.x < lo.x || a.y < lo.y || b.x > hi.x || b.y > hi.y {
            return Err(Error::Geometry(format!(
                "structure {i} ({:?}) leaves the ROI",
                s.shape
            )));
        }
    }
    Ok(HeatImage::from_fn(*grid, |p| {
        structures
            .iter()
            .filter(|s| s.shape.contains(p))
            .map(|s| s.amplitude)
            .fold(0.0, f64::max)
    }))
}

/// Additive white Gaussian noise at a given SNR over the whole sinogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Noise {
    pub snr_db: f64,
    pub seed: u64,
}

/// Simulate a ring acquisition of `img`.
pub fn synthesize_sinogram(
    img: &HeatImage,
    geometry: &RingGeometry,
    medium: &Medium,
    acquisition: &Acquisition,
    noise: Option<Noise>,
) -> Result<Sinogram> {
    let op = ForwardOperator::new(geometry.clone(), *medium, *acquisition, img.grid)?;
    synthesize_with(&op, img, noise)
}

/// Simulate with an existing operator.
pub fn synthesize_with(
    op: &ForwardOperator,
    img: &HeatImage,
    noise: Option<Noise>,
) -> Result<Sinogram> {
    let mut sino = op.apply(img)?;
    if let Some(n) = noise {
        add_noise(&mut sino, n)?;
    }
    Ok(sino)
}

fn add_noise(sino: &mut Sinogram, noise: Noise) -> Result<()> {
    if !noise.snr_db.is_finite() {
        return Err(invalid("noise_snr_db", "must be finite"));
    }
    let power = sino.data.iter().map(|v| v * v).sum::<f64>() / sino.data.len() as f64;
    if power == 0.0 {
        return Ok(());
    }
    let sigma = (power / 10f64.powf(noise.snr_db / 10.0)).sqrt();
    let normal = Normal::new(0.0, sigma).map_err(|e| invalid("noise_snr_db", e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    for v in sino.data.iter_mut() {
        *v += normal.sample(&mut rng);
    }
    Ok(())
}
