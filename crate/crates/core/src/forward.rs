//! Discretized photoacoustic forward model for a ring array.
//!
//! For element `r` and sample time `t`, the shell integral
//! `I(t) = ∫ H(r') / |r - r'| dL'(t)` is evaluated on an arc of radius `c·t`
//! centered on the element. The arc is sampled at `M` points spread uniformly
//! over the opening angle `α = 2·asin(R_i / R_t)` of the sector that covers
//! the ROI, and the integral uses trapezoid weights. The pressure trace is the
//! central difference
//!
//! ```text
//! p(t_i) = Γ / (4πc) · [I(t_{i+1}) - I(t_{i-1})] / (2Δt)
//! ```
//!
//! with the first and last samples set to zero. The resulting linear map
//! `p = A·H` is available matrix-free or as an assembled CSR matrix; both
//! share the same arc sampling code and have exact adjoints.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Acquisition, HeatImage, ImageGrid, Medium, Point2, RingGeometry, Sinogram};

/// Elements folded into one partial image by the adjoint before the ordered
/// reduction. Fixed so the summation order never depends on the thread count.
const ADJOINT_CHUNK: usize = 8;

/// Default memory budget for [`ForwardOperator::assemble`].
pub const DEFAULT_ASSEMBLY_BUDGET: u64 = 1 << 30;

/// Opening angle of the sector, seen from an element on a ring of radius
/// `ring_radius`, that covers a centered circular ROI of radius `roi_radius`.
pub fn opening_angle(roi_radius: f64, ring_radius: f64) -> Result<f64> {
    if !(roi_radius > 0.0) {
        return Err(invalid(
            "roi_radius",
            format!("must be positive, got {roi_radius}"),
        ));
    }
    if !(roi_radius < ring_radius) {
        return Err(Error::Geometry(format!(
            "ROI radius {roi_radius} m must be smaller than the ring radius {ring_radius} m"
        )));
    }
    Ok(2.0 * (roi_radius / ring_radius).asin())
}

/// The `m` arc points at distance `c·t` from `element_pos`, spread over
/// `alpha` and centered on the ray from the element toward the ring center.
pub fn arc_points(
    element_pos: Point2,
    t: f64,
    alpha: f64,
    m: usize,
    sos_mps: f64,
) -> Result<Vec<Point2>> {
    if !(t > 0.0) {
        return Err(invalid("t", format!("arc time must be positive, got {t}")));
    }
    if m < 2 {
        return Err(invalid(
            "num_arc_points",
            format!("need at least 2, got {m}"),
        ));
    }
    let radius = sos_mps * t;
    let toward_center = (-element_pos.y).atan2(-element_pos.x);
    let beta0 = toward_center - 0.5 * alpha;
    let step = alpha / (m - 1) as f64;
    Ok((0..m)
        .map(|j| element_pos + Point2::from_polar(radius, beta0 + j as f64 * step))
        .collect())
}

/// Segment lengths `d_{l,l+1}` for `l = 0..=m`: zero at both ends and
/// `α·c·t/(m-1)` in between.
pub fn segment_lengths(alpha: f64, m: usize, t: f64, sos_mps: f64) -> Result<Vec<f64>> {
    if m < 3 {
        return Err(invalid(
            "num_arc_points",
            format!("need at least 3, got {m}"),
        ));
    }
    let d = alpha * sos_mps * t / (m - 1) as f64;
    let mut seg = vec![d; m + 1];
    seg[0] = 0.0;
    seg[m] = 0.0;
    Ok(seg)
}

/// Per-point trapezoid weights `(d_{l-1,l} + d_{l,l+1}) / 2`.
pub fn arc_weights(alpha: f64, m: usize, t: f64, sos_mps: f64) -> Result<Vec<f64>> {
    let seg = segment_lengths(alpha, m, t, sos_mps)?;
    Ok(seg.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect())
}

/// Number of points sampled on each arc.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArcSamplingConfig {
    pub num_arc_points: usize,
}

impl ArcSamplingConfig {
    pub fn new(num_arc_points: usize) -> Result<Self> {
        if num_arc_points < 3 {
            return Err(invalid(
                "num_arc_points",
                format!("need at least 3, got {num_arc_points}"),
            ));
        }
        Ok(Self { num_arc_points })
    }

    /// Smallest `M` whose arc-point spacing at the largest arc radius that can
    /// still reach the grid does not exceed the pixel size.
    pub fn for_grid(
        grid: &ImageGrid,
        ring: &RingGeometry,
        acq: &Acquisition,
        medium: &Medium,
    ) -> Result<Self> {
        let roi = grid.roi_radius_m();
        let alpha = opening_angle(roi, ring.radius_m())?;
        let t_max = acq.time(acq.num_samples - 1);
        let rho_max = (medium.sos_mps * t_max).min(ring.radius_m() + roi).max(0.0);
        let m = (alpha * rho_max / grid.pixel_size_m).ceil() as usize + 1;
        Self::new(m.max(3))
    }
}

/// Anything that can report an initial-heat value at a physical point.
pub trait HeatSampler {
    fn sample(&self, p: Point2) -> f64;
}

impl<F: Fn(Point2) -> f64> HeatSampler for F {
    fn sample(&self, p: Point2) -> f64 {
        self(p)
    }
}

/// Bilinear sampling of a gridded image; zero outside the grid extent.
pub struct GridSampler<'a> {
    pub image: &'a HeatImage,
}

impl HeatSampler for GridSampler<'_> {
    fn sample(&self, p: Point2) -> f64 {
        let Some(stencil) = bilinear_stencil(&self.image.grid, p) else {
            return 0.0;
        };
        let v = self.image.as_slice();
        stencil.iter().map(|&(k, w)| w * v[k]).sum()
    }
}

/// Flat pixel indices and weights of the bilinear interpolant at `p`.
///
/// Inside the physical extent the sample coordinates are clamped to the
/// outermost pixel centers (edge replication); outside it there is no stencil.
pub fn bilinear_stencil(grid: &ImageGrid, p: Point2) -> Option<[(usize, f64); 4]> {
    if !grid.contains(p) {
        return None;
    }
    let o = grid.origin();
    let h = grid.pixel_size_m;
    let (i0, i1, fu) = axis_stencil((p.x - o.x) / h, grid.nx);
    let (j0, j1, fv) = axis_stencil((p.y - o.y) / h, grid.ny);
    let nx = grid.nx;
    Some([
        (j0 * nx + i0, (1.0 - fu) * (1.0 - fv)),
        (j0 * nx + i1, fu * (1.0 - fv)),
        (j1 * nx + i0, (1.0 - fu) * fv),
        (j1 * nx + i1, fu * fv),
    ])
}

fn axis_stencil(u: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let u = u.clamp(0.0, (n - 1) as f64);
    let i0 = (u.floor() as usize).min(n - 2);
    (i0, i0 + 1, u - i0 as f64)
}

/// One measured amplitude: an element and an interior time-sample index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Ray {
    pub element: usize,
    pub sample: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    MatrixFree,
    AssembledSparse,
}

/// Row-compressed sparse matrix, one row per (element, sample).
#[derive(Debug, Clone)]
struct CsrMatrix {
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
}

/// The linear map from a heat image to ring-array pressure traces.
#[derive(Debug, Clone)]
pub struct ForwardOperator {
    geometry: RingGeometry,
    medium: Medium,
    acquisition: Acquisition,
    grid: ImageGrid,
    arc: ArcSamplingConfig,
    alpha: f64,
    /// Unit directions of the arc points, per element.
    directions: Vec<Vec<Point2>>,
    assembled: Option<CsrMatrix>,
}

impl ForwardOperator {
    /// Matrix-free operator with the default arc sampling density.
    pub fn new(
        geometry: RingGeometry,
        medium: Medium,
        acquisition: Acquisition,
        grid: ImageGrid,
    ) -> Result<Self> {
        let arc = ArcSamplingConfig::for_grid(&grid, &geometry, &acquisition, &medium)?;
        Self::with_arc_sampling(geometry, medium, acquisition, grid, arc)
    }

    pub fn with_arc_sampling(
        geometry: RingGeometry,
        medium: Medium,
        acquisition: Acquisition,
        grid: ImageGrid,
        arc: ArcSamplingConfig,
    ) -> Result<Self> {
        medium.validate()?;
        acquisition.validate()?;
        grid.validate()?;
        grid.check_inside_ring(&geometry)?;
        if arc.num_arc_points < 3 {
            return Err(invalid("num_arc_points", "need at least 3"));
        }
        let alpha = opening_angle(grid.roi_radius_m(), geometry.radius_m())?;
        let m = arc.num_arc_points;
        let step = alpha / (m - 1) as f64;
        let directions = (0..geometry.num_elements())
            .map(|e| {
                let beta0 = geometry.element_angle(e) + PI - 0.5 * alpha;
                (0..m)
                    .map(|j| Point2::from_polar(1.0, beta0 + j as f64 * step))
                    .collect()
            })
            .collect();
        Ok(Self {
            geometry,
            medium,
            acquisition,
            grid,
            arc,
            alpha,
            directions,
            assembled: None,
        })
    }

    pub fn geometry(&self) -> &RingGeometry {
        &self.geometry
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn acquisition(&self) -> &Acquisition {
        &self.acquisition
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn arc_sampling(&self) -> ArcSamplingConfig {
        self.arc
    }

    pub fn opening_angle(&self) -> f64 {
        self.alpha
    }

    pub fn representation(&self) -> Representation {
        if self.assembled.is_some() {
            Representation::AssembledSparse
        } else {
            Representation::MatrixFree
        }
    }

    /// Same operator on a different (typically subsampled) ring.
    pub fn for_geometry(&self, geometry: RingGeometry) -> Result<Self> {
        Self::with_arc_sampling(geometry, self.medium, self.acquisition, self.grid, self.arc)
    }

    /// Factor turning `I(t_{i+1}) - I(t_{i-1})` into a pressure amplitude.
    pub fn difference_scale(&self) -> f64 {
        self.medium.grueneisen / (4.0 * PI * self.medium.sos_mps) * self.acquisition.sample_rate_hz
            / 2.0
    }

    /// Whether the arc for `sample` can reach the grid at all.
    fn arc_active(&self, sample: usize) -> bool {
        let t = self.acquisition.time(sample);
        if t <= 0.0 {
            return false;
        }
        let rho = self.medium.sos_mps * t;
        (rho - self.geometry.radius_m()).abs() <= self.grid.roi_radius_m()
    }

    /// Visit the in-grid points of the arc for (`element`, `sample`) together
    /// with their quadrature weight (trapezoid weight divided by `c·t`).
    pub fn visit_arc(&self, element: usize, sample: usize, mut f: impl FnMut(Point2, f64)) {
        if !self.arc_active(sample) {
            return;
        }
        let rho = self.medium.sos_mps * self.acquisition.time(sample);
        let pos = self.geometry.element_position(element);
        let m = self.arc.num_arc_points;
        let interior = self.alpha / (m - 1) as f64;
        for (j, dir) in self.directions[element].iter().enumerate() {
            let p = pos + *dir * rho;
            if !self.grid.contains(p) {
                continue;
            }
            let w = if j == 0 || j == m - 1 {
                0.5 * interior
            } else {
                interior
            };
            f(p, w);
        }
    }

    /// `I(t)` for one element, sampling `sampler` on the arc.
    pub fn shell_integral<S: HeatSampler + ?Sized>(
        &self,
        sampler: &S,
        element: usize,
        t: f64,
    ) -> Result<f64> {
        if !(t > 0.0) {
            return Err(invalid("t", format!("must be positive, got {t}")));
        }
        if element >= self.geometry.num_elements() {
            return Err(invalid("element", format!("{element} out of range")));
        }
        let pos = self.geometry.element_position(element);
        let points = arc_points(
            pos,
            t,
            self.alpha,
            self.arc.num_arc_points,
            self.medium.sos_mps,
        )?;
        let weights = arc_weights(self.alpha, self.arc.num_arc_points, t, self.medium.sos_mps)?;
        let dist = self.medium.sos_mps * t;
        Ok(points
            .iter()
            .zip(&weights)
            .filter(|(p, _)| self.grid.contains(**p))
            .map(|(p, w)| sampler.sample(*p) * w / dist)
            .sum())
    }

    /// Shell integrals `I(t_j)` for every sample of one element on a grid image.
    fn element_integrals(&self, element: usize, values: &[f64]) -> Vec<f64> {
        let n = self.acquisition.num_samples;
        let mut integrals = vec![0.0; n];
        for (j, slot) in integrals.iter_mut().enumerate() {
            let mut acc = 0.0;
            self.visit_arc(element, j, |p, w| {
                if let Some(st) = bilinear_stencil(&self.grid, p) {
                    let v: f64 = st.iter().map(|&(k, b)| b * values[k]).sum();
                    acc += w * v;
                }
            });
            *slot = acc;
        }
        integrals
    }

    fn check_image(&self, img: &HeatImage) -> Result<()> {
        if img.grid != self.grid {
            return Err(Error::ShapeMismatch(format!(
                "image grid {:?} does not match operator grid {:?}",
                img.grid, self.grid
            )));
        }
        Ok(())
    }

    fn check_sinogram(&self, sino: &Sinogram) -> Result<()> {
        if sino.data.dim() != (self.geometry.num_elements(), self.acquisition.num_samples) {
            return Err(Error::ShapeMismatch(format!(
                "sinogram is {:?}, operator expects ({}, {})",
                sino.data.dim(),
                self.geometry.num_elements(),
                self.acquisition.num_samples
            )));
        }
        Ok(())
    }

    pub fn apply(&self, img: &HeatImage) -> Result<Sinogram> {
        self.check_image(img)?;
        let data = self.apply_values(img.as_slice());
        Ok(Sinogram {
            geometry: self.geometry.clone(),
            acquisition: self.acquisition,
            data,
        })
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<HeatImage> {
        self.check_sinogram(sino)?;
        let values = self.adjoint_values(sino.data.view());
        Ok(HeatImage {
            grid: self.grid,
            values: Array2::from_shape_vec(self.grid.shape(), values)
                .expect("adjoint output matches the grid"),
        })
    }

    /// `A·h` for a flat row-major image.
    pub fn apply_values(&self, h: &[f64]) -> Array2<f64> {
        assert_eq!(h.len(), self.grid.num_pixels());
        let (ne, ns) = (self.geometry.num_elements(), self.acquisition.num_samples);
        let mut out = Array2::zeros((ne, ns));
        match &self.assembled {
            Some(csr) => {
                out.as_slice_mut()
                    .expect("fresh array is contiguous")
                    .par_iter_mut()
                    .enumerate()
                    .for_each(|(r, o)| {
                        let (a, b) = (csr.row_ptr[r], csr.row_ptr[r + 1]);
                        *o = csr.cols[a..b]
                            .iter()
                            .zip(&csr.vals[a..b])
                            .map(|(&c, &v)| v * h[c as usize])
                            .sum();
                    });
            }
            None => {
                let scale = self.difference_scale();
                out.as_slice_mut()
                    .expect("fresh array is contiguous")
                    .par_chunks_mut(ns)
                    .enumerate()
                    .for_each(|(e, row)| {
                        let integrals = self.element_integrals(e, h);
                        for i in 1..ns - 1 {
                            row[i] = scale * (integrals[i + 1] - integrals[i - 1]);
                        }
                    });
            }
        }
        out
    }

    /// `Aᵀ·y` returned as a flat row-major image.
    pub fn adjoint_values(&self, y: ArrayView2<f64>) -> Vec<f64> {
        let (ne, ns) = (self.geometry.num_elements(), self.acquisition.num_samples);
        assert_eq!(y.dim(), (ne, ns));
        let npix = self.grid.num_pixels();
        let chunks: Vec<(usize, usize)> = (0..ne)
            .step_by(ADJOINT_CHUNK)
            .map(|s| (s, (s + ADJOINT_CHUNK).min(ne)))
            .collect();
        let partials: Vec<Vec<f64>> = chunks
            .par_iter()
            .map(|&(lo, hi)| {
                let mut acc = vec![0.0; npix];
                for e in lo..hi {
                    let trace = y.row(e);
                    match &self.assembled {
                        Some(csr) => {
                            for i in 0..ns {
                                let r = e * ns + i;
                                let yi = trace[i];
                                if yi == 0.0 {
                                    continue;
                                }
                                for k in csr.row_ptr[r]..csr.row_ptr[r + 1] {
                                    acc[csr.cols[k] as usize] += csr.vals[k] * yi;
                                }
                            }
                        }
                        None => self.scatter_element(e, |i| trace[i], &mut acc),
                    }
                }
                acc
            })
            .collect();
        let mut out = vec![0.0; npix];
        for part in &partials {
            for (o, p) in out.iter_mut().zip(part) {
                *o += p;
            }
        }
        out
    }

    /// Matrix-free transpose for one element: the central difference is
    /// transposed first, then each arc scatters its weight into the image.
    fn scatter_element(&self, e: usize, trace: impl Fn(usize) -> f64, acc: &mut [f64]) {
        let ns = self.acquisition.num_samples;
        let scale = self.difference_scale();
        for j in 0..ns {
            // p_i = s·(I_{i+1} - I_{i-1}) for 1 <= i <= ns-2
            let mut g = 0.0;
            if j >= 2 {
                g += trace(j - 1);
            }
            if j + 2 < ns {
                g -= trace(j + 1);
            }
            if g == 0.0 {
                continue;
            }
            let g = g * scale;
            self.visit_arc(e, j, |p, w| {
                if let Some(st) = bilinear_stencil(&self.grid, p) {
                    for (k, b) in st {
                        acc[k] += g * w * b;
                    }
                }
            });
        }
    }

    /// Rough upper bound on the bytes an assembled copy would need.
    pub fn assembly_estimate_bytes(&self) -> u64 {
        let ns = self.acquisition.num_samples;
        let per_entry = (std::mem::size_of::<u32>() + std::mem::size_of::<f64>()) as u64;
        let mut entries = 0u64;
        for e in 0..self.geometry.num_elements() {
            let mut inside = vec![0u64; ns];
            for (j, c) in inside.iter_mut().enumerate() {
                self.visit_arc(e, j, |_, _| *c += 1);
            }
            for i in 1..ns - 1 {
                entries += 4 * (inside[i - 1] + inside[i + 1]);
            }
        }
        let rows = (self.geometry.num_elements() * ns + 1) as u64;
        entries * per_entry + rows * std::mem::size_of::<usize>() as u64
    }

    /// Copy of this operator backed by an assembled sparse matrix.
    pub fn assemble(&self, budget_bytes: u64) -> Result<Self> {
        let required = self.assembly_estimate_bytes();
        if required > budget_bytes {
            return Err(Error::MemoryBudget {
                required,
                budget: budget_bytes,
            });
        }
        let ns = self.acquisition.num_samples;
        let scale = self.difference_scale();
        let per_element: Vec<Vec<Vec<(u32, f64)>>> = (0..self.geometry.num_elements())
            .into_par_iter()
            .map(|e| {
                let arcs: Vec<Vec<(u32, f64)>> = (0..ns).map(|j| self.arc_row(e, j)).collect();
                (0..ns)
                    .map(|i| {
                        if i == 0 || i == ns - 1 {
                            Vec::new()
                        } else {
                            merge_difference(&arcs[i + 1], &arcs[i - 1], scale)
                        }
                    })
                    .collect()
            })
            .collect();
        let mut row_ptr = Vec::with_capacity(self.geometry.num_elements() * ns + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for rows in per_element {
            for row in rows {
                for (c, v) in row {
                    cols.push(c);
                    vals.push(v);
                }
                row_ptr.push(cols.len());
            }
        }
        let mut op = self.clone();
        op.assembled = Some(CsrMatrix {
            row_ptr,
            cols,
            vals,
        });
        Ok(op)
    }

    /// Sparse shell-integral row for one arc, sorted by column with
    /// duplicates merged.
    fn arc_row(&self, e: usize, j: usize) -> Vec<(u32, f64)> {
        let mut entries = Vec::new();
        self.visit_arc(e, j, |p, w| {
            if let Some(st) = bilinear_stencil(&self.grid, p) {
                for (k, b) in st {
                    if b != 0.0 {
                        entries.push((k as u32, w * b));
                    }
                }
            }
        });
        entries.sort_by_key(|&(c, _)| c);
        let mut merged: Vec<(u32, f64)> = Vec::with_capacity(entries.len());
        for (c, v) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == c => last.1 += v,
                _ => merged.push((c, v)),
            }
        }
        merged
    }

    /// Nonzeros per row of the assembled matrix, if assembled.
    pub fn row_nnz(&self, element: usize, sample: usize) -> Option<usize> {
        let csr = self.assembled.as_ref()?;
        let r = element * self.acquisition.num_samples + sample;
        Some(csr.row_ptr[r + 1] - csr.row_ptr[r])
    }

    pub fn nnz(&self) -> Option<usize> {
        self.assembled.as_ref().map(|c| c.vals.len())
    }

    /// All interior rays `(element, 1..ns-1)`.
    pub fn interior_rays(&self) -> Vec<Ray> {
        let ns = self.acquisition.num_samples;
        (0..self.geometry.num_elements())
            .flat_map(|element| (1..ns - 1).map(move |sample| Ray { element, sample }))
            .collect()
    }
}

/// `scale·(plus - minus)` for two column-sorted sparse rows.
fn merge_difference(plus: &[(u32, f64)], minus: &[(u32, f64)], scale: f64) -> Vec<(u32, f64)> {
    let mut out = Vec::with_capacity(plus.len() + minus.len());
    let (mut a, mut b) = (0, 0);
    while a < plus.len() || b < minus.len() {
        let ca = plus.get(a).map(|e| e.0).unwrap_or(u32::MAX);
        let cb = minus.get(b).map(|e| e.0).unwrap_or(u32::MAX);
        if ca == cb {
            out.push((ca, scale * (plus[a].1 - minus[b].1)));
            a += 1;
            b += 1;
        } else if ca < cb {
            out.push((ca, scale * plus[a].1));
            a += 1;
        } else {
            out.push((cb, -scale * minus[b].1));
            b += 1;
        }
    }
    out
}
