//! Universal back-projection.
//!
//! Each pixel accumulates, over elements, the back-projection term
//! `b(t) = 2p(t) - 2t·∂p/∂t` at the time of flight `t = |r_k - r'|/c`,
//! weighted by `cos θ₀ / |r_k - r'|²` and the element's share of the ring
//! circumference, and the sum is divided by the solid angle `Ω₀`.

use std::f64::consts::PI;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{HeatImage, ImageGrid, Medium, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UbpConfig {
    /// Zero out negative pixels after back-projection.
    pub clamp_negatives: bool,
    /// Ω₀; 4π for a ring array with cylindrical geometry.
    pub solid_angle: f64,
}

impl Default for UbpConfig {
    fn default() -> Self {
        Self {
            clamp_negatives: true,
            solid_angle: 4.0 * PI,
        }
    }
}

/// Time derivative of a trace: central differences inside, one-sided at the ends.
fn trace_derivative(trace: &[f64], fs: f64) -> Vec<f64> {
    let n = trace.len();
    (0..n)
        .map(|i| {
            if i == 0 {
                (trace[1] - trace[0]) * fs
            } else if i == n - 1 {
                (trace[n - 1] - trace[n - 2]) * fs
            } else {
                0.5 * (trace[i + 1] - trace[i - 1]) * fs
            }
        })
        .collect()
}

fn lerp(values: &[f64], i0: usize, frac: f64) -> f64 {
    if frac == 0.0 || i0 + 1 >= values.len() {
        values[i0]
    } else {
        values[i0] * (1.0 - frac) + values[i0 + 1] * frac
    }
}

pub fn ubp_reconstruct(
    sino: &Sinogram,
    grid: &ImageGrid,
    medium: &Medium,
    cfg: &UbpConfig,
) -> Result<HeatImage> {
    if !(cfg.solid_angle > 0.0) {
        return Err(invalid(
            "solid_angle",
            format!("must be positive, got {}", cfg.solid_angle),
        ));
    }
    medium.validate()?;
    sino.acquisition.validate()?;
    grid.validate()?;
    grid.check_inside_ring(&sino.geometry)?;

    let ring = &sino.geometry;
    let acq = sino.acquisition;
    let ns = acq.num_samples;
    let fs = acq.sample_rate_hz;
    let c = medium.sos_mps;
    let element_area = 2.0 * PI * ring.radius_m() / ring.num_elements() as f64;

    let traces: Vec<Vec<f64>> = sino.data.rows().into_iter().map(|r| r.to_vec()).collect();
    let derivs: Vec<Vec<f64>> = traces.iter().map(|t| trace_derivative(t, fs)).collect();
    let elements: Vec<_> = (0..ring.num_elements())
        .map(|e| (ring.element_position(e), ring.inward_normal(e)))
        .collect();

    let mut values = Array2::zeros(grid.shape());
    values
        .as_slice_mut()
        .expect("fresh array is contiguous")
        .par_chunks_mut(grid.nx)
        .enumerate()
        .for_each(|(iy, row)| {
            for (ix, out) in row.iter_mut().enumerate() {
                let r = grid.pixel_center_unchecked(ix, iy);
                let mut acc = 0.0;
                for (e, (pos, normal)) in elements.iter().enumerate() {
                    let to_element = *pos - r;
                    let d = to_element.norm();
                    let t = d / c;
                    let s = (t - acq.t_start_s) * fs;
                    if !(s >= 0.0 && s <= (ns - 1) as f64) {
                        continue;
                    }
                    let i0 = s.floor() as usize;
                    let frac = s - i0 as f64;
                    let p = lerp(&traces[e], i0, frac);
                    let dp = lerp(&derivs[e], i0, frac);
                    let b = 2.0 * p - 2.0 * t * dp;
                    // θ₀: angle between the inward normal and the element→source direction
                    let cos_theta = -(to_element * (1.0 / d)).dot(*normal);
                    acc += b * cos_theta / (d * d) * element_area;
                }
                let v = acc / cfg.solid_angle;
                *out = if cfg.clamp_negatives { v.max(0.0) } else { v };
            }
        });
    HeatImage::new(*grid, values)
}
