use super::field::NeuralField;
use super::Real;
use crate::error::{invalid, Error, Result};
use crate::forward::{ForwardOperator, Ray};
use crate::geometry::ImageGrid;
use crate::mb::{tv_gradient_accumulate, tv_value_slice};

/// Arc points of the rays' neighbouring time samples, deduplicated.
struct ArcBatch<T> {
    /// `(element, sample)` of each arc, sorted.
    keys: Vec<(usize, usize)>,
    /// Point range of arc `a` is `starts[a]..starts[a + 1]`.
    starts: Vec<usize>,
    uv: Vec<[T; 2]>,
    weights: Vec<T>,
}

impl<T: Real> ArcBatch<T> {
    fn new(nf: &NeuralField<T>, op: &ForwardOperator, rays: &[Ray]) -> Self {
        let mut keys: Vec<(usize, usize)> = rays
            .iter()
            .flat_map(|r| [(r.element, r.sample - 1), (r.element, r.sample + 1)])
            .collect();
        keys.sort_unstable();
        keys.dedup();
        let mut starts = Vec::with_capacity(keys.len() + 1);
        let mut uv = Vec::new();
        let mut weights = Vec::new();
        let domain = *nf.domain();
        for &(e, s) in &keys {
            starts.push(uv.len());
            op.visit_arc(e, s, |p, w| {
                uv.push(domain.to_unit(p));
                weights.push(T::from_f64(w).unwrap());
            });
        }
        starts.push(uv.len());
        Self {
            keys,
            starts,
            uv,
            weights,
        }
    }

    fn arc(&self, element: usize, sample: usize) -> usize {
        self.keys.binary_search(&(element, sample)).unwrap()
    }

    /// `I` of every arc given field values at the arc points.
    fn integrals(&self, values: &[T]) -> Vec<T> {
        self.starts
            .windows(2)
            .map(|r| {
                let (w, v) = (&self.weights[r[0]..r[1]], &values[r[0]..r[1]]);
                w.iter().zip(v).fold(T::zero(), |acc, (&w, &v)| acc + w * v)
            })
            .collect()
    }

    /// `scale·(I(t+Δt) - I(t-Δt))` per ray.
    fn predictions(&self, integrals: &[T], rays: &[Ray], scale: T) -> Vec<T> {
        rays.iter()
            .map(|r| {
                let plus = integrals[self.arc(r.element, r.sample + 1)];
                let minus = integrals[self.arc(r.element, r.sample - 1)];
                scale * (plus - minus)
            })
            .collect()
    }
}

fn check_rays(op: &ForwardOperator, rays: &[Ray]) -> Result<()> {
    let ns = op.acquisition().num_samples;
    let ne = op.geometry().num_elements();
    match rays
        .iter()
        .find(|r| r.element >= ne || r.sample == 0 || r.sample + 1 >= ns)
    {
        Some(r) => Err(invalid(
            "rays",
            format!("ray {r:?} is not interior to {ne} elements × {ns} samples"),
        )),
        None => Ok(()),
    }
}

/// Pressure amplitudes the field predicts for `rays`, computed with the same
/// arcs, quadrature and central difference as [`ForwardOperator::apply`].
pub fn predict_signals<T: Real>(
    nf: &NeuralField<T>,
    op: &ForwardOperator,
    rays: &[Ray],
) -> Result<Vec<T>> {
    predict_signals_scaled(nf, op, rays, op.difference_scale())
}

/// [`predict_signals`] with an explicit difference prefactor.
pub fn predict_signals_scaled<T: Real>(
    nf: &NeuralField<T>,
    op: &ForwardOperator,
    rays: &[Ray],
    scale: f64,
) -> Result<Vec<T>> {
    check_rays(op, rays)?;
    nf.check_finite()?;
    if rays.is_empty() {
        return Ok(Vec::new());
    }
    let batch = ArcBatch::new(nf, op, rays);
    let values = nf.eval_unit(&batch.uv);
    let integrals = batch.integrals(&values);
    Ok(batch.predictions(&integrals, rays, T::from_f64(scale).unwrap()))
}

/// Smoothness prior of the training loss: `η·TV(render on grid)/num_pixels`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TvPrior {
    pub eta: f64,
    pub grid: ImageGrid,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// Mean squared residual over the batch rays.
    pub data: f64,
    /// `TV(render)/num_pixels`, before the η weight.
    pub tv: f64,
    /// `data + η·tv`.
    pub total: f64,
}

/// Batch loss and its gradient with respect to every field parameter.
///
/// `measured` holds the normalized amplitudes of `rays` and `scale` turns
/// arc-integral differences into the same normalized units.
pub fn loss_and_gradients<T: Real>(
    nf: &NeuralField<T>,
    op: &ForwardOperator,
    rays: &[Ray],
    measured: &[T],
    scale: f64,
    prior: Option<&TvPrior>,
) -> Result<(LossParts, Vec<T>)> {
    check_rays(op, rays)?;
    if measured.len() != rays.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} measurements for {} rays",
            measured.len(),
            rays.len()
        )));
    }
    if rays.is_empty() {
        return Err(invalid("rays", "empty batch"));
    }
    if let Some(p) = prior {
        if !(p.eta >= 0.0 && p.epsilon > 0.0) {
            return Err(invalid("tv prior", "needs eta ≥ 0 and epsilon > 0"));
        }
        p.grid.validate()?;
    }
    nf.check_finite()?;

    let batch = ArcBatch::new(nf, op, rays);
    let n_data = batch.uv.len();
    let mut uv = batch.uv.clone();
    let prior = prior.filter(|p| p.eta > 0.0);
    if let Some(p) = prior {
        uv.extend(nf.grid_coords(&p.grid));
    }
    let scale_t = T::from_f64(scale).unwrap();
    let n_rays = rays.len() as f64;

    let mut grad = vec![T::zero(); nf.num_params()];
    let parts = nf.backprop(
        &uv,
        |values| {
            let (data_vals, tv_vals) = values.split_at(n_data);
            let integrals = batch.integrals(data_vals);
            let pred = batch.predictions(&integrals, rays, scale_t);
            let mut d_integral = vec![T::zero(); integrals.len()];
            let mut data = 0.0;
            for ((r, p), m) in rays.iter().zip(&pred).zip(measured) {
                let res = *p - *m;
                data += res.to_f64().unwrap().powi(2);
                let d = T::from_f64(2.0 / n_rays).unwrap() * res * scale_t;
                let plus = batch.arc(r.element, r.sample + 1);
                let minus = batch.arc(r.element, r.sample - 1);
                d_integral[plus] = d_integral[plus] + d;
                d_integral[minus] = d_integral[minus] - d;
            }
            data /= n_rays;
            let mut d_values = vec![T::zero(); values.len()];
            for (a, r) in batch.starts.windows(2).enumerate() {
                for (dv, &w) in d_values[r[0]..r[1]]
                    .iter_mut()
                    .zip(&batch.weights[r[0]..r[1]])
                {
                    *dv = d_integral[a] * w;
                }
            }
            let mut tv = 0.0;
            let mut total = data;
            if let Some(p) = prior {
                let (nx, ny) = (p.grid.nx, p.grid.ny);
                let npix = (nx * ny) as f64;
                let eps = T::from_f64(p.epsilon).unwrap();
                tv = tv_value_slice(tv_vals, nx, ny, eps).to_f64().unwrap() / npix;
                total += p.eta * tv;
                tv_gradient_accumulate(
                    tv_vals,
                    nx,
                    ny,
                    eps,
                    T::from_f64(p.eta / npix).unwrap(),
                    &mut d_values[n_data..],
                );
            }
            if !total.is_finite() {
                return Err(Error::NonFinite(format!(
                    "batch loss is {total} (data {data}, tv {tv})"
                )));
            }
            Ok((d_values, LossParts { data, tv, total }))
        },
        &mut grad,
    )?;
    Ok((parts, grad))
}
