use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::encoding::{HashEncoding, HashEncodingConfig, Stencil};
use super::Real;
use crate::error::{invalid, Error, Result};
use crate::geometry::{HeatImage, ImageGrid, Point2};

/// Points per evaluation chunk. Chunk boundaries fix the reduction order of
/// gradients, so results do not depend on the number of worker threads.
pub(crate) const CHUNK: usize = 2048;
/// Chunks evaluated concurrently before their gradients are reduced.
const GROUP: usize = 8;
/// Above this many points the backward pass recomputes activations instead
/// of keeping them for the whole batch.
const CACHE_POINTS: usize = 1 << 18;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub encoding: HashEncodingConfig,
    /// Hidden layer widths of the MLP.
    pub hidden: Vec<usize>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            encoding: HashEncodingConfig::default(),
            hidden: vec![128, 128],
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(invalid(
                "hidden",
                "need at least one non-empty hidden layer",
            ));
        }
        Ok(())
    }
}

/// Rectangle of the plane mapped onto `[0,1]²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FieldDomain {
    pub min: Point2,
    pub width_m: f64,
    pub height_m: f64,
}

impl FieldDomain {
    /// The physical extent of `grid`.
    pub fn for_grid(grid: &ImageGrid) -> Self {
        Self {
            min: grid.min_corner(),
            width_m: grid.width_m(),
            height_m: grid.height_m(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_m > 0.0 && self.height_m > 0.0)
            || !self.min.x.is_finite()
            || !self.min.y.is_finite()
        {
            return Err(invalid("domain", "needs a finite corner and positive size"));
        }
        Ok(())
    }

    #[inline]
    pub fn to_unit<T: Real>(&self, p: Point2) -> [T; 2] {
        [
            T::from_f64((p.x - self.min.x) / self.width_m).unwrap(),
            T::from_f64((p.y - self.min.y) / self.height_m).unwrap(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weights: usize,
    bias: usize,
}

/// Hash-encoded coordinate network `(x, y) ↦ sigmoid(MLP(encode(x, y)))`.
///
/// All trainable scalars live in one flat vector: encoding tables first, then
/// for each layer its row-major `fan_out × fan_in` weights followed by the
/// biases.
#[derive(Debug, Clone)]
pub struct NeuralField<T> {
    config: FieldConfig,
    domain: FieldDomain,
    encoding: HashEncoding,
    layers: Vec<Layer>,
    params: Vec<T>,
}

/// Activations kept for the backward pass of one chunk.
pub(crate) struct ChunkCache<T> {
    stencils: Vec<Stencil<T>>,
    /// Layer inputs: the encoding, then each hidden layer after ReLU.
    acts: Vec<Array2<T>>,
    outputs: Vec<T>,
}

/// Gradient contribution of one chunk, before reduction.
pub(crate) struct ChunkGrad<T> {
    mlp: Vec<T>,
    d_input: Array2<T>,
    stencils: Vec<Stencil<T>>,
}

fn layout(cfg: &FieldConfig, table_len: usize) -> (Vec<Layer>, usize) {
    let mut widths = vec![cfg.encoding.output_dim()];
    widths.extend(&cfg.hidden);
    widths.push(1);
    let mut offset = table_len;
    let layers = widths
        .windows(2)
        .map(|w| {
            let l = Layer {
                fan_in: w[0],
                fan_out: w[1],
                weights: offset,
                bias: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            l
        })
        .collect();
    (layers, offset)
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<T: Real> NeuralField<T> {
    /// Randomly initialized field: tables uniform in ±1e-4, weights uniform
    /// in ±sqrt(6/fan_in), biases zero.
    pub fn new(config: FieldConfig, domain: FieldDomain, seed: u64) -> Result<Self> {
        let mut nf = Self::zeros(config, domain)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table_len = nf.encoding.table_len();
        for p in &mut nf.params[..table_len] {
            *p = T::from_f64(rng.gen_range(-1e-4..1e-4)).unwrap();
        }
        for l in nf.layers.clone() {
            let bound = (6.0 / l.fan_in as f64).sqrt();
            for p in &mut nf.params[l.weights..l.bias] {
                *p = T::from_f64(rng.gen_range(-bound..bound)).unwrap();
            }
        }
        Ok(nf)
    }

    /// Field with every parameter zero (output ≡ 0.5).
    pub fn zeros(config: FieldConfig, domain: FieldDomain) -> Result<Self> {
        config.validate()?;
        domain.validate()?;
        let encoding = HashEncoding::new(config.encoding)?;
        let (layers, n) = layout(&config, encoding.table_len());
        Ok(Self {
            config,
            domain,
            encoding,
            layers,
            params: vec![T::zero(); n],
        })
    }

    pub fn from_params(config: FieldConfig, domain: FieldDomain, params: Vec<T>) -> Result<Self> {
        let mut nf = Self::zeros(config, domain)?;
        if params.len() != nf.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, field has {}",
                params.len(),
                nf.params.len()
            )));
        }
        nf.params = params;
        Ok(nf)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn domain(&self) -> &FieldDomain {
        &self.domain
    }

    pub fn encoding(&self) -> &HashEncoding {
        &self.encoding
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Number of leading parameters that belong to the encoding tables.
    pub fn table_len(&self) -> usize {
        self.encoding.table_len()
    }

    /// `(offset, fan_out, fan_in)` of each layer's weight matrix; the biases
    /// follow the weights.
    pub fn layer_shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers
            .iter()
            .map(|l| (l.weights, l.fan_out, l.fan_in))
            .collect()
    }

    /// Set the output-layer bias (with zero output weights this makes the
    /// field constant).
    pub fn set_output_bias(&mut self, bias: T) {
        let last = *self.layers.last().unwrap();
        self.params[last.bias] = bias;
    }

    /// Same field in another precision.
    pub fn cast<U: Real>(&self) -> NeuralField<U> {
        NeuralField {
            config: self.config.clone(),
            domain: self.domain,
            encoding: self.encoding.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| U::from(*p).unwrap()).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().position(|p| !p.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "field parameter {i} is {:?}",
                self.params[i]
            ))),
            None => Ok(()),
        }
    }

    fn weight_view(&self, l: &Layer) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((l.fan_out, l.fan_in), &self.params[l.weights..l.bias]).unwrap()
    }

    /// Forward pass over unit-square coordinates.
    pub(crate) fn forward_chunk(&self, uv: &[[T; 2]]) -> ChunkCache<T> {
        let n = uv.len();
        let levels = self.config.encoding.num_levels;
        let tables = &self.params[..self.encoding.table_len()];
        let mut x = Array2::zeros((n, self.encoding.output_dim()));
        let mut stencils = vec![
            Stencil {
                slots: [0; 4],
                weights: [T::zero(); 4]
            };
            n * levels
        ];
        for (i, (row, st)) in x
            .axis_iter_mut(Axis(0))
            .zip(stencils.chunks_mut(levels))
            .enumerate()
        {
            let [u, v] = uv[i];
            self.encoding
                .encode_into(tables, u, v, row.into_slice().unwrap(), Some(st));
        }
        let mut acts = vec![x];
        let mut outputs = Vec::new();
        for (li, l) in self.layers.iter().enumerate() {
            let mut z = acts[li].dot(&self.weight_view(l).t());
            let bias = &self.params[l.bias..l.bias + l.fan_out];
            for mut row in z.axis_iter_mut(Axis(0)) {
                for (v, b) in row.iter_mut().zip(bias) {
                    *v = *v + *b;
                }
            }
            if li + 1 < self.layers.len() {
                z.mapv_inplace(|v| v.max(T::zero()));
                acts.push(z);
            } else {
                outputs = z.iter().map(|&v| sigmoid(v)).collect();
            }
        }
        ChunkCache {
            stencils,
            acts,
            outputs,
        }
    }

    /// Backward pass of one chunk given `∂L/∂output` per point.
    pub(crate) fn backward_chunk(&self, cache: ChunkCache<T>, d_out: &[T]) -> ChunkGrad<T> {
        let n = d_out.len();
        let mlp_start = self.encoding.table_len();
        let mut mlp = vec![T::zero(); self.params.len() - mlp_start];
        let mut dz = Array2::from_shape_fn((n, 1), |(i, _)| {
            let s = cache.outputs[i];
            d_out[i] * s * (T::one() - s)
        });
        let mut d_input = None;
        for (li, l) in self.layers.iter().enumerate().rev() {
            let a_prev = &cache.acts[li];
            {
                let dw = &mut mlp[l.weights - mlp_start..l.bias - mlp_start];
                let mut dw = ArrayViewMut2::from_shape((l.fan_out, l.fan_in), dw).unwrap();
                general_mat_mul(T::one(), &dz.t(), a_prev, T::one(), &mut dw);
            }
            let db = &mut mlp[l.bias - mlp_start..l.bias - mlp_start + l.fan_out];
            for row in dz.axis_iter(Axis(0)) {
                for (g, v) in db.iter_mut().zip(row) {
                    *g = *g + *v;
                }
            }
            let mut da = dz.dot(&self.weight_view(l));
            if li > 0 {
                da.zip_mut_with(a_prev, |g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
                dz = da;
            } else {
                d_input = Some(da);
            }
        }
        ChunkGrad {
            mlp,
            d_input: d_input.unwrap(),
            stencils: cache.stencils,
        }
    }

    /// Add one chunk's contribution into the full gradient.
    pub(crate) fn reduce_chunk(&self, g: ChunkGrad<T>, grad: &mut [T]) {
        let mlp_start = self.encoding.table_len();
        for (d, s) in grad[mlp_start..].iter_mut().zip(&g.mlp) {
            *d = *d + *s;
        }
        let levels = self.config.encoding.num_levels;
        for (row, st) in g.d_input.axis_iter(Axis(0)).zip(g.stencils.chunks(levels)) {
            self.encoding
                .backward(st, row.as_slice().unwrap(), &mut grad[..mlp_start]);
        }
    }

    /// Field values at unit-square coordinates, chunked and in parallel.
    pub(crate) fn eval_unit(&self, uv: &[[T; 2]]) -> Vec<T> {
        let parts: Vec<Vec<T>> = uv
            .par_chunks(CHUNK)
            .map(|c| self.forward_chunk(c).outputs)
            .collect();
        parts.concat()
    }

    /// Evaluate at `uv`, obtain `∂L/∂value` from `seed`, and accumulate the
    /// parameter gradient into `grad`. Returns whatever `seed` returns.
    pub(crate) fn backprop<R>(
        &self,
        uv: &[[T; 2]],
        seed: impl FnOnce(&[T]) -> Result<(Vec<T>, R)>,
        grad: &mut [T],
    ) -> Result<R> {
        if uv.len() <= CACHE_POINTS {
            let caches: Vec<ChunkCache<T>> = uv
                .par_chunks(CHUNK)
                .map(|c| self.forward_chunk(c))
                .collect();
            let values: Vec<T> = caches
                .iter()
                .flat_map(|c| c.outputs.iter().copied())
                .collect();
            let (d, r) = seed(&values)?;
            let mut caches = caches.into_iter();
            let mut offset = 0;
            loop {
                let group: Vec<ChunkCache<T>> = caches.by_ref().take(GROUP).collect();
                if group.is_empty() {
                    break;
                }
                let jobs: Vec<(ChunkCache<T>, &[T])> = group
                    .into_iter()
                    .map(|c| {
                        let n = c.outputs.len();
                        let s = &d[offset..offset + n];
                        offset += n;
                        (c, s)
                    })
                    .collect();
                let grads: Vec<ChunkGrad<T>> = jobs
                    .into_par_iter()
                    .map(|(c, s)| self.backward_chunk(c, s))
                    .collect();
                for g in grads {
                    self.reduce_chunk(g, grad);
                }
            }
            Ok(r)
        } else {
            let values = self.eval_unit(uv);
            let (d, r) = seed(&values)?;
            let chunks: Vec<(&[[T; 2]], &[T])> = uv.chunks(CHUNK).zip(d.chunks(CHUNK)).collect();
            for group in chunks.chunks(GROUP) {
                let grads: Vec<ChunkGrad<T>> = group
                    .par_iter()
                    .map(|(p, s)| self.backward_chunk(self.forward_chunk(p), s))
                    .collect();
                for g in grads {
                    self.reduce_chunk(g, grad);
                }
            }
            Ok(r)
        }
    }

    /// `sigmoid(MLP(encode(p)))` at physical points.
    pub fn field_eval(&self, pts: &[Point2]) -> Result<Vec<T>> {
        self.check_finite()?;
        if let Some(p) = pts.iter().find(|p| !(p.x.is_finite() && p.y.is_finite())) {
            return Err(Error::NonFinite(format!("evaluation point {p:?}")));
        }
        let uv: Vec<[T; 2]> = pts.iter().map(|&p| self.domain.to_unit(p)).collect();
        Ok(self.eval_unit(&uv))
    }

    /// Unit-square coordinates of the pixel centers of `grid`, row-major.
    pub(crate) fn grid_coords(&self, grid: &ImageGrid) -> Vec<[T; 2]> {
        let mut uv = Vec::with_capacity(grid.num_pixels());
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                uv.push(self.domain.to_unit(grid.pixel_center_unchecked(ix, iy)));
            }
        }
        uv
    }

    /// The field sampled at every pixel center of `grid`.
    pub fn render_grid(&self, grid: &ImageGrid) -> Result<HeatImage> {
        grid.validate()?;
        self.check_finite()?;
        let values = self.eval_unit(&self.grid_coords(grid));
        let values = Array2::from_shape_vec(
            grid.shape(),
            values.into_iter().map(|v| v.to_f64().unwrap()).collect(),
        )
        .unwrap();
        HeatImage::new(*grid, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldConfig {
        FieldConfig {
            encoding: HashEncodingConfig {
                num_levels: 4,
                features_per_level: 2,
                table_size_log2: 8,
                base_resolution: 4,
                finest_resolution: 32,
            },
            hidden: vec![8, 8],
        }
    }

    fn domain() -> FieldDomain {
        FieldDomain {
            min: Point2::new(-1.0, -1.0),
            width_m: 2.0,
            height_m: 2.0,
        }
    }

    #[test]
    fn layout_counts() {
        let nf = NeuralField::<f32>::zeros(tiny(), domain()).unwrap();
        let tables = nf.table_len();
        assert_eq!(
            nf.num_params(),
            tables + (8 * 8 + 8) + (8 * 8 + 8) + (8 + 1)
        );
    }

    #[test]
    fn zero_last_layer_gives_sigmoid_of_bias() {
        let mut nf = NeuralField::<f64>::new(tiny(), domain(), 3).unwrap();
        let (w, out, fan_in) = *nf.layer_shapes().last().unwrap();
        nf.params_mut()[w..w + out * fan_in].fill(0.0);
        nf.set_output_bias(0.7);
        let v = nf
            .field_eval(&[Point2::new(0.3, -0.2), Point2::new(-0.9, 0.9)])
            .unwrap();
        let expect = 1.0 / (1.0 + (-0.7f64).exp());
        assert!(v.iter().all(|&x| x == expect));
    }

    #[test]
    fn batch_equals_pointwise() {
        let mut nf = NeuralField::<f32>::new(tiny(), domain(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for p in nf.params_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let pts: Vec<Point2> = (0..300)
            .map(|_| Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        let batch = nf.field_eval(&pts).unwrap();
        for (p, b) in pts.iter().zip(&batch) {
            assert_eq!(nf.field_eval(&[*p]).unwrap()[0], *b);
        }
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let mut nf = NeuralField::<f32>::new(tiny(), domain(), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in nf.params_mut() {
            *p = rng.gen_range(-0.5..0.5);
        }
        let pts: Vec<Point2> = (0..10_000)
            .map(|_| Point2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        assert!(nf
            .field_eval(&pts)
            .unwrap()
            .iter()
            .all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn non_finite_rejected() {
        let mut nf = NeuralField::<f64>::new(tiny(), domain(), 0).unwrap();
        assert!(nf.field_eval(&[Point2::new(f64::NAN, 0.0)]).is_err());
        nf.params_mut()[3] = f64::INFINITY;
        assert!(nf.field_eval(&[Point2::new(0.0, 0.0)]).is_err());
    }

    #[test]
    fn render_is_deterministic() {
        let nf = NeuralField::<f32>::new(tiny(), domain(), 4).unwrap();
        let grid = ImageGrid::centered(16, 16, 0.1).unwrap();
        let a = nf.render_grid(&grid).unwrap();
        let b = nf.render_grid(&grid).unwrap();
        assert_eq!(a.values, b.values);
    }
}
