//! Model-based inversion: non-negative least squares with a smoothed total
//! variation prior,
//!
//! ```text
//! min_{H ≥ 0} ‖p_m - A·H‖² + λ·TV(H)
//! ```
//!
//! solved by projected gradient descent from `H₀ = 0`.

use ndarray::Array2;
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::forward::ForwardOperator;
use crate::geometry::{HeatImage, Sinogram};

/// Smoothed isotropic TV of a row-major `nx × ny` image:
/// `Σ sqrt(∂x² + ∂y² + ε²) - ε` with forward differences and replicated
/// boundaries (the difference across the last row/column is zero).
pub fn tv_value_slice<T: Float>(values: &[T], nx: usize, ny: usize, eps: T) -> T {
    let mut total = T::zero();
    for iy in 0..ny {
        for ix in 0..nx {
            let (dx, dy) = forward_diffs(values, nx, ny, ix, iy);
            total = total + ((dx * dx + dy * dy + eps * eps).sqrt() - eps);
        }
    }
    total
}

/// Gradient of [`tv_value_slice`], accumulated into `grad` scaled by `weight`.
pub fn tv_gradient_accumulate<T: Float>(
    values: &[T],
    nx: usize,
    ny: usize,
    eps: T,
    weight: T,
    grad: &mut [T],
) {
    for iy in 0..ny {
        for ix in 0..nx {
            let (dx, dy) = forward_diffs(values, nx, ny, ix, iy);
            let mag = (dx * dx + dy * dy + eps * eps).sqrt();
            let (gx, gy) = (weight * dx / mag, weight * dy / mag);
            let k = iy * nx + ix;
            grad[k] = grad[k] - gx - gy;
            if ix + 1 < nx {
                grad[k + 1] = grad[k + 1] + gx;
            }
            if iy + 1 < ny {
                grad[k + nx] = grad[k + nx] + gy;
            }
        }
    }
}

#[inline]
fn forward_diffs<T: Float>(v: &[T], nx: usize, ny: usize, ix: usize, iy: usize) -> (T, T) {
    let k = iy * nx + ix;
    let dx = if ix + 1 < nx {
        v[k + 1] - v[k]
    } else {
        T::zero()
    };
    let dy = if iy + 1 < ny {
        v[k + nx] - v[k]
    } else {
        T::zero()
    };
    (dx, dy)
}

pub fn tv_value(img: &HeatImage, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(tv_value_slice(
        img.as_slice(),
        img.grid.nx,
        img.grid.ny,
        eps,
    ))
}

pub fn tv_gradient(img: &HeatImage, eps: f64) -> Result<HeatImage> {
    check_eps(eps)?;
    let mut g = vec![0.0; img.grid.num_pixels()];
    tv_gradient_accumulate(img.as_slice(), img.grid.nx, img.grid.ny, eps, 1.0, &mut g);
    HeatImage::new(
        img.grid,
        Array2::from_shape_vec(img.grid.shape(), g).expect("gradient matches the grid"),
    )
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(invalid(
            "tv_epsilon",
            format!("must be positive, got {eps}"),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StepRule {
    Fixed {
        step: f64,
    },
    /// Armijo-type backtracking on the projected step. Each iteration starts
    /// from the previous accepted step times `grow` and multiplies by
    /// `shrink` until the sufficient-decrease test passes.
    Backtracking {
        #[serde(default = "default_shrink")]
        shrink: f64,
        #[serde(default = "default_grow")]
        grow: f64,
        #[serde(default = "default_max_backtracks")]
        max_backtracks: usize,
    },
}

fn default_shrink() -> f64 {
    0.5
}
fn default_grow() -> f64 {
    2.0
}
fn default_max_backtracks() -> usize {
    40
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule::Backtracking {
            shrink: default_shrink(),
            grow: default_grow(),
            max_backtracks: default_max_backtracks(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MbConfig {
    pub lambda: f64,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_tv_eps")]
    pub tv_epsilon: f64,
    #[serde(default)]
    pub step_rule: StepRule,
    /// FISTA momentum. Gives up the monotone objective guarantee.
    #[serde(default)]
    pub accelerate: bool,
}

fn default_iters() -> usize {
    50
}
fn default_tv_eps() -> f64 {
    1e-6
}

impl Default for MbConfig {
    fn default() -> Self {
        Self {
            lambda: 0.01,
            max_iters: default_iters(),
            tv_epsilon: default_tv_eps(),
            step_rule: StepRule::default(),
            accelerate: false,
        }
    }
}

impl MbConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid(
                "lambda",
                format!("must be >= 0, got {}", self.lambda),
            ));
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        check_eps(self.tv_epsilon)?;
        match self.step_rule {
            StepRule::Fixed { step } if !(step > 0.0) => {
                return Err(invalid("step", format!("must be positive, got {step}")))
            }
            StepRule::Backtracking { shrink, grow, .. }
                if !(shrink > 0.0 && shrink < 1.0 && grow >= 1.0) =>
            {
                return Err(invalid(
                    "step_rule",
                    format!("need 0 < shrink < 1 and grow >= 1, got {shrink}, {grow}"),
                ))
            }
            _ => {}
        }
        Ok(())
    }
}

/// One iteration of the solver log. `objective = data_term + tv_term`, where
/// `tv_term` already includes `λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub data_term: f64,
    pub tv_term: f64,
    pub objective: f64,
    pub step: f64,
}

#[derive(Debug, Clone)]
pub struct MbResult {
    /// Reconstruction in the units of the normalized data model (see
    /// [`mb_reconstruct`]).
    pub image: HeatImage,
    pub history: Vec<IterRecord>,
}

/// Objective pieces for a normalized problem.
struct Problem<'a> {
    op: &'a ForwardOperator,
    measured: Array2<f64>,
    scale: f64,
    cfg: MbConfig,
    nx: usize,
    ny: usize,
}

impl Problem<'_> {
    /// Residual `A·h/s - p_m/s`.
    fn residual(&self, h: &[f64]) -> Array2<f64> {
        let mut r = self.op.apply_values(h);
        r.mapv_inplace(|v| v / self.scale);
        r - &self.measured
    }

    fn terms(&self, h: &[f64], residual: &Array2<f64>) -> (f64, f64) {
        let data = residual.iter().map(|v| v * v).sum::<f64>();
        let tv = if self.cfg.lambda > 0.0 {
            self.cfg.lambda * tv_value_slice(h, self.nx, self.ny, self.cfg.tv_epsilon)
        } else {
            0.0
        };
        (data, tv)
    }

    fn gradient(&self, h: &[f64], residual: &Array2<f64>) -> Vec<f64> {
        let mut g = self.op.adjoint_values(residual.view());
        let k = 2.0 / self.scale;
        g.iter_mut().for_each(|v| *v *= k);
        if self.cfg.lambda > 0.0 {
            tv_gradient_accumulate(
                h,
                self.nx,
                self.ny,
                self.cfg.tv_epsilon,
                self.cfg.lambda,
                &mut g,
            );
        }
        g
    }

    /// Largest eigenvalue of the data-term Hessian `2·AᵀA/s²` by power iteration.
    fn lipschitz(&self) -> f64 {
        let n = self.nx * self.ny;
        let mut v = vec![1.0 / (n as f64).sqrt(); n];
        let mut est = 0.0;
        for _ in 0..20 {
            let av = self.op.apply_values(&v);
            let mut w = self.op.adjoint_values(av.view());
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            est = norm;
            w.iter_mut().for_each(|x| *x /= norm);
            v = w;
        }
        2.0 * est / (self.scale * self.scale)
    }
}

fn project_step(base: &[f64], grad: &[f64], step: f64) -> Vec<f64> {
    base.iter()
        .zip(grad)
        .map(|(h, g)| (h - step * g).max(0.0))
        .collect()
}

/// Reconstruct with projected gradient descent.
///
/// The measured sinogram and the operator are both divided by `max|p_m|`, so
/// the returned image is in the same units as the phantom that generated the
/// data (noiseless data from a phantom with peak 1 reconstructs to peak ≈ 1)
/// and `λ` has a scale-free meaning.
pub fn mb_reconstruct(sino: &Sinogram, op: &ForwardOperator, cfg: &MbConfig) -> Result<MbResult> {
    cfg.validate()?;
    if sino.data.dim() != (op.geometry().num_elements(), op.acquisition().num_samples) {
        return Err(Error::ShapeMismatch(format!(
            "sinogram {:?} does not match operator ({}, {})",
            sino.data.dim(),
            op.geometry().num_elements(),
            op.acquisition().num_samples
        )));
    }
    let grid = *op.grid();
    let n = grid.num_pixels();
    let scale = sino.max_abs();
    if scale == 0.0 {
        let history = (0..cfg.max_iters)
            .map(|iter| IterRecord {
                iter,
                data_term: 0.0,
                tv_term: 0.0,
                objective: 0.0,
                step: 0.0,
            })
            .collect();
        return Ok(MbResult {
            image: HeatImage::zeros(grid),
            history,
        });
    }
    let problem = Problem {
        op,
        measured: sino.data.mapv(|v| v / scale),
        scale,
        cfg: *cfg,
        nx: grid.nx,
        ny: grid.ny,
    };

    let mut step = match cfg.step_rule {
        StepRule::Fixed { step } => step,
        StepRule::Backtracking { .. } => {
            let l = problem.lipschitz();
            if l > 0.0 {
                1.0 / l
            } else {
                1.0
            }
        }
    };

    let mut h = vec![0.0; n];
    let mut residual = problem.residual(&h);
    let (mut data, mut tv) = problem.terms(&h, &residual);
    // FISTA extrapolation point and momentum
    let mut y = h.clone();
    let mut y_residual = residual.clone();
    let (mut y_data, mut y_tv) = (data, tv);
    let mut momentum = 1.0f64;
    let mut history = Vec::with_capacity(cfg.max_iters);

    for iter in 0..cfg.max_iters {
        let grad = problem.gradient(&y, &y_residual);
        let base_obj = y_data + y_tv;
        let (next, next_res, next_data, next_tv) = match cfg.step_rule {
            StepRule::Fixed { .. } => {
                let next = project_step(&y, &grad, step);
                let r = problem.residual(&next);
                let (d, t) = problem.terms(&next, &r);
                (next, r, d, t)
            }
            StepRule::Backtracking {
                shrink,
                grow,
                max_backtracks,
            } => {
                step *= grow;
                let mut tries = 0;
                loop {
                    let next = project_step(&y, &grad, step);
                    let r = problem.residual(&next);
                    let (d, t) = problem.terms(&next, &r);
                    let mut lin = 0.0;
                    let mut quad = 0.0;
                    for ((a, b), g) in next.iter().zip(&y).zip(&grad) {
                        let delta = a - b;
                        lin += g * delta;
                        quad += delta * delta;
                    }
                    let bound = base_obj + lin + quad / (2.0 * step);
                    if d + t <= bound && d + t <= base_obj {
                        break (next, r, d, t);
                    }
                    tries += 1;
                    if tries > max_backtracks {
                        // no acceptable step: stay put
                        break (y.clone(), y_residual.clone(), y_data, y_tv);
                    }
                    step *= shrink;
                }
            }
        };
        let objective = next_data + next_tv;
        if !objective.is_finite() {
            return Err(Error::NonFinite(format!(
                "MB objective became {objective} at iteration {iter}"
            )));
        }

        if cfg.accelerate {
            let next_momentum = 0.5 * (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt());
            let beta = (momentum - 1.0) / next_momentum;
            y = next
                .iter()
                .zip(&h)
                .map(|(a, b)| (a + beta * (a - b)).max(0.0))
                .collect();
            momentum = next_momentum;
            y_residual = problem.residual(&y);
            (y_data, y_tv) = problem.terms(&y, &y_residual);
        } else {
            y = next.clone();
            y_residual = next_res.clone();
            (y_data, y_tv) = (next_data, next_tv);
        }
        h = next;
        residual = next_res;
        data = next_data;
        tv = next_tv;
        log::debug!("mb iter {iter}: data {data:.6e} tv {tv:.6e} step {step:.3e}");
        history.push(IterRecord {
            iter,
            data_term: data,
            tv_term: tv,
            objective,
            step,
        });
    }
    let _ = residual;

    Ok(MbResult {
        image: HeatImage::new(
            grid,
            Array2::from_shape_vec(grid.shape(), h).expect("solution matches the grid"),
        )?,
        history,
    })
}
