use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::field::NeuralField;
use super::loss::{loss_and_gradients, TvPrior};
use super::Real;
use crate::error::{invalid, Error, Result};
use crate::forward::{ForwardOperator, Ray};
use crate::geometry::{ImageGrid, Sinogram};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub loss_stop_threshold: f64,
    pub max_epochs: usize,
    /// TV weight η.
    pub eta: f64,
    pub rays_per_batch: usize,
    /// Consecutive time samples of one element kept together when shuffling,
    /// so neighbouring rays share their arcs within a batch.
    pub ray_block: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Side of the square grid the TV term is rendered on.
    pub tv_resolution: usize,
    pub tv_epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_decay_every: 20,
            lr_decay_factor: 0.5,
            loss_stop_threshold: 1e-4,
            max_epochs: 100,
            eta: 0.0,
            rays_per_batch: 4096,
            ray_block: 16,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            tv_resolution: 128,
            tv_epsilon: 1e-6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("initial_lr", self.initial_lr),
            ("loss_stop_threshold", self.loss_stop_threshold),
            ("adam_epsilon", self.adam_epsilon),
            ("tv_epsilon", self.tv_epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("must be positive, got {v}")));
            }
        }
        let counts = [
            ("lr_decay_every", self.lr_decay_every),
            ("max_epochs", self.max_epochs),
            ("rays_per_batch", self.rays_per_batch),
            ("ray_block", self.ray_block),
            ("tv_resolution", self.tv_resolution),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(invalid(name, "must be positive"));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(invalid("lr_decay_factor", "must lie in (0, 1)"));
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", "must be non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, "must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Learning rate used during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr
            * self
                .lr_decay_factor
                .powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Ray-weighted mean of the batch losses.
    pub loss: f64,
    pub data_loss: f64,
    pub tv_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub field: NeuralField<T>,
    pub history: Vec<EpochRecord>,
    /// Whether the loss threshold stopped training before `max_epochs`.
    pub converged: bool,
}

struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    step: i32,
}

impl<T: Real> Adam<T> {
    fn new(n: usize) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [T], grad: &[T], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        let (b1, b2) = (
            T::from_f64(cfg.beta1).unwrap(),
            T::from_f64(cfg.beta2).unwrap(),
        );
        let (ob1, ob2) = (T::one() - b1, T::one() - b2);
        let inv_c1 = T::from_f64(1.0 / c1).unwrap();
        let inv_c2 = T::from_f64(1.0 / c2).unwrap();
        let lr = T::from_f64(lr).unwrap();
        let eps = T::from_f64(cfg.adam_epsilon).unwrap();
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + ob1 * *g;
            *v = b2 * *v + ob2 * *g * *g;
            let m_hat = *m * inv_c1;
            let v_hat = *v * inv_c2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Square grid of side `n` covering the field's domain.
pub fn tv_grid_for(nf: &NeuralField<impl Real>, n: usize) -> Result<ImageGrid> {
    let d = nf.domain();
    let side = d.width_m.max(d.height_m);
    let mut grid = ImageGrid::centered(n, n, side / n as f64)?;
    grid.center =
        crate::geometry::Point2::new(d.min.x + 0.5 * d.width_m, d.min.y + 0.5 * d.height_m);
    Ok(grid)
}

/// Interior rays grouped in runs of `block` consecutive samples per element.
fn ray_blocks(op: &ForwardOperator, block: usize) -> Vec<Vec<Ray>> {
    let ns = op.acquisition().num_samples;
    let samples: Vec<usize> = (1..ns - 1).collect();
    (0..op.geometry().num_elements())
        .flat_map(|element| {
            samples
                .chunks(block)
                .map(move |c| c.iter().map(|&sample| Ray { element, sample }).collect())
                .collect::<Vec<_>>()
        })
        .collect()
}

/// Fit `nf` to `sino` through `op` (which must describe the same ring and
/// acquisition as `sino`).
pub fn train<T: Real>(
    nf: NeuralField<T>,
    sino: &Sinogram,
    op: &ForwardOperator,
    cfg: &TrainConfig,
) -> Result<TrainResult<T>> {
    train_with(nf, sino, op, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Real>(
    mut nf: NeuralField<T>,
    sino: &Sinogram,
    op: &ForwardOperator,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainResult<T>> {
    cfg.validate()?;
    nf.check_finite()?;
    if op.geometry() != &sino.geometry || op.acquisition() != &sino.acquisition {
        return Err(Error::ShapeMismatch(
            "operator ring/acquisition differ from the sinogram's".into(),
        ));
    }
    let norm = sino.max_abs();
    if !(norm > 0.0) {
        return Err(invalid("sinogram", "all-zero data, nothing to fit"));
    }
    let scale = op.difference_scale() / norm;
    let prior = TvPrior {
        eta: cfg.eta,
        grid: tv_grid_for(&nf, cfg.tv_resolution)?,
        epsilon: cfg.tv_epsilon,
    };

    let mut blocks = ray_blocks(op, cfg.ray_block);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(nf.num_params());
    let mut history = Vec::new();
    let mut initial = None;
    let mut above = 0;
    let mut converged = false;

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.lr_at(epoch);
        blocks.shuffle(&mut rng);
        let rays: Vec<Ray> = blocks.iter().flatten().copied().collect();
        let (mut loss, mut data, mut tv) = (0.0, 0.0, 0.0);
        for batch in rays.chunks(cfg.rays_per_batch) {
            let measured: Vec<T> = batch
                .iter()
                .map(|r| T::from_f64(sino.data[[r.element, r.sample]] / norm).unwrap())
                .collect();
            let (parts, grad) = loss_and_gradients(&nf, op, batch, &measured, scale, Some(&prior))
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}: {msg}")),
                    other => other,
                })?;
            adam.update(nf.params_mut(), &grad, lr, cfg);
            let w = batch.len() as f64 / rays.len() as f64;
            loss += w * parts.total;
            data += w * parts.data;
            tv += w * parts.tv;
        }
        nf.check_finite()
            .map_err(|e| Error::NonFinite(format!("epoch {epoch}: {e}")))?;
        let rec = EpochRecord {
            epoch,
            loss,
            data_loss: data,
            tv_loss: tv,
            lr,
        };
        log::debug!("epoch {epoch}: loss {loss:.3e} (data {data:.3e}, tv {tv:.3e}), lr {lr:.1e}");
        on_epoch(&rec);
        history.push(rec);

        let first = *initial.get_or_insert(loss);
        if loss > 10.0 * first {
            above += 1;
            if above >= 5 {
                return Err(Error::Diverged(format!(
                    "loss {loss:.3e} above 10× the initial {first:.3e} for 5 epochs (epoch {epoch})"
                )));
            }
        } else {
            above = 0;
        }
        if loss < cfg.loss_stop_threshold {
            converged = true;
            break;
        }
    }
    Ok(TrainResult {
        field: nf,
        history,
        converged,
    })
}
