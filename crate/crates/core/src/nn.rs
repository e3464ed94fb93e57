//! The trainable network with hand-written reverse-mode gradients.
//!
//! ```text
//! features (T×n_mels) ─► per-frame MLP ─► self-attentive pooling ─► y (rep_dim)
//! y ─► Linear ─► BN ─► ReLU ─► Linear ─► BN ─► ReLU ─► Linear ─► z (proj_dim)
//! ```
//!
//! `y` is the representation used for verification; `z` is the embedding
//! seen only by training objectives. Both views of a training pair go
//! through the same [`Model`], so weight sharing holds by construction.
//!
//! Parameters are exposed as an ordered list of tensors (see
//! [`Model::param_names`]); gradients use the same order.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, ArrayD, ArrayViewD, ArrayViewMutD, Axis};
use rand::{Rng, SeedableRng};
use thiserror::Error;

use crate::features::FeatureMatrix;
use crate::scalar::{cast, count, to_f64, Scalar};

pub type Tensor2<T> = Array2<T>;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch statistics need at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("cache was produced by a different parameter state; rerun the forward pass")]
    StaleCache,
    #[error("row {0} has zero norm and cannot be normalized")]
    ZeroRow(usize),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint stream is truncated")]
    Truncated,
}

fn shape_err(msg: impl Into<String>) -> NnError {
    NnError::Shape(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_mels: usize,
    /// Hidden widths of the per-frame encoder MLP (ReLU after each).
    pub encoder_hidden: Vec<usize>,
    pub rep_dim: usize,
    pub proj_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            encoder_hidden: vec![128, 128],
            rep_dim: 64,
            proj_dim: 2048,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.n_mels == 0 || self.rep_dim == 0 || self.proj_dim == 0 || self.encoder_hidden.contains(&0) {
            return Err(NnError::Config("all layer widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) || !(self.bn_eps > 0.0) {
            return Err(NnError::Config("bn_momentum must lie in [0, 1] and bn_eps be positive".into()));
        }
        Ok(())
    }

    /// Number of trainable scalars:
    ///
    /// ```text
    /// Σ_encoder (in·out + out)            per-frame MLP, widths n_mels → hidden… → rep
    /// + r·r + 2r                          attention projection, bias, context (r = rep_dim)
    /// + (r·p + p) + (p·p + p) + (p·p + p) projector linears (p = proj_dim)
    /// + 2·2p                              batch-norm scale and shift
    /// ```
    pub fn num_params(&self) -> usize {
        let widths = self.encoder_widths();
        let encoder: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        let r = self.rep_dim;
        let p = self.proj_dim;
        encoder + r * r + 2 * r + (r * p + p) + 2 * (p * p + p) + 4 * p
    }

    fn encoder_widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_mels];
        w.extend(&self.encoder_hidden);
        w.push(self.rep_dim);
        w
    }
}

/// Fully-connected layer `y = x·Wᵀ + b` with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| cast(rng.random_range(-limit..=limit))),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight.t()) + &self.bias
    }

    /// Returns `dx` and accumulates `dW`, `db`.
    pub(crate) fn backward(&self, x: &Array2<T>, dy: &Array2<T>, dw: &mut ArrayD<T>, db: &mut ArrayD<T>, need_dx: bool) -> Option<Array2<T>> {
        *dw += &dy.t().dot(x).into_dyn();
        *db += &dy.sum_axis(Axis(0)).into_dyn();
        need_dx.then(|| dy.dot(&self.weight))
    }
}

/// Batch normalization over the rows of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub running_mean: Array1<T>,
    pub running_var: Array1<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
    mode: Mode,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum,
            eps,
        }
    }

    pub(crate) fn forward(&mut self, x: &Array2<T>, mode: Mode) -> Result<(Array2<T>, BnCache<T>), NnError> {
        let eps: T = cast(self.eps);
        let (mean, var) = match mode {
            Mode::Train => {
                let n = x.nrows();
                if n < 2 {
                    return Err(NnError::BatchTooSmall(n));
                }
                let mean = x.sum_axis(Axis(0)) / count::<T>(n);
                let var = (x - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / count::<T>(n);
                // Running variance is tracked unbiased.
                let m: T = cast(self.momentum);
                let unbiased = &var * (count::<T>(n) / count::<T>(n - 1));
                self.running_mean = &self.running_mean * (T::one() - m) + &mean * m;
                self.running_var = &self.running_var * (T::one() - m) + unbiased * m;
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| T::one() / (v + eps).sqrt());
        let xhat = (x - &mean) * &inv_std;
        let y = &xhat * &self.gamma + &self.beta;
        Ok((y, BnCache { xhat, inv_std, mode }))
    }

    pub(crate) fn backward(&self, cache: &BnCache<T>, dy: &Array2<T>, dgamma: &mut ArrayD<T>, dbeta: &mut ArrayD<T>) -> Array2<T> {
        *dgamma += &(dy * &cache.xhat).sum_axis(Axis(0)).into_dyn();
        *dbeta += &dy.sum_axis(Axis(0)).into_dyn();
        let dxhat = dy * &self.gamma;
        match cache.mode {
            Mode::Eval => dxhat * &cache.inv_std,
            Mode::Train => {
                let n: T = count(dy.nrows());
                let sum_d = dxhat.sum_axis(Axis(0));
                let sum_dx = (&dxhat * &cache.xhat).sum_axis(Axis(0));
                let inner = dxhat * n - &sum_d - &cache.xhat * &sum_dx;
                inner * &cache.inv_std / n
            }
        }
    }
}

/// Self-attentive pooling: `e_t = c · tanh(W·h_t + b)`, `a = softmax(e)`,
/// output `Σ_t a_t·h_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct SapLayer<T> {
    pub attn_weight: Array2<T>,
    pub attn_bias: Array1<T>,
    pub context: Array1<T>,
}

impl<T: Scalar> SapLayer<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let proj = Linear::<T>::new(dim, hidden, rng);
        let limit = (6.0 / (hidden + 1) as f64).sqrt();
        Self {
            attn_weight: proj.weight,
            attn_bias: proj.bias,
            context: Array1::from_shape_fn(hidden, |_| cast(rng.random_range(-limit..=limit))),
        }
    }

    /// Pools one utterance's `T×dim` frame matrix. Returns the pooled vector
    /// and the attention weights.
    pub fn forward(&self, h: &Array2<T>) -> Result<(Array1<T>, Array1<T>), NnError> {
        if h.nrows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if h.ncols() != self.attn_weight.ncols() {
            return Err(shape_err(format!("SAP expects {} features, got {}", self.attn_weight.ncols(), h.ncols())));
        }
        let (pooled, cache) = self.pool_segments(h, h.nrows());
        Ok((pooled.row(0).to_owned(), cache.weights))
    }

    /// Pools consecutive runs of `frames` rows of `h` (one run per utterance).
    pub fn pool_segments(&self, h: &Array2<T>, frames: usize) -> (Array2<T>, SapCache<T>) {
        let n = h.nrows() / frames;
        let hidden = (h.dot(&self.attn_weight.t()) + &self.attn_bias).mapv(|v| v.tanh());
        let scores = hidden.dot(&self.context);
        let mut weights = Array1::<T>::zeros(h.nrows());
        let mut pooled = Array2::<T>::zeros((n, h.ncols()));
        for i in 0..n {
            let rows = i * frames..(i + 1) * frames;
            let a = softmax(scores.slice(ndarray::s![rows.clone()]));
            pooled.row_mut(i).assign(&a.dot(&h.slice(ndarray::s![rows.clone(), ..])));
            weights.slice_mut(ndarray::s![rows]).assign(&a);
        }
        (pooled, SapCache { frames, hidden, weights })
    }

    /// Backward of [`SapLayer::pool_segments`]: accumulates parameter
    /// gradients into `(d_weight, d_bias, d_context)` and returns `dL/dh`.
    pub fn backward_segments(
        &self,
        h: &Array2<T>,
        cache: &SapCache<T>,
        grad_pooled: &Array2<T>,
        grads: (&mut ArrayD<T>, &mut ArrayD<T>, &mut ArrayD<T>),
    ) -> Array2<T> {
        let frames = cache.frames;
        let mut dh = Array2::<T>::zeros(h.raw_dim());
        let mut de = Array1::<T>::zeros(h.nrows());
        for (i, gy) in grad_pooled.rows().into_iter().enumerate() {
            let rows = i * frames..(i + 1) * frames;
            let a = cache.weights.slice(ndarray::s![rows.clone()]);
            let da = h.slice(ndarray::s![rows.clone(), ..]).dot(&gy);
            let mean_da = a.dot(&da);
            de.slice_mut(ndarray::s![rows.clone()]).assign(&(&a * &(da - mean_da)));
            let mut dhi = dh.slice_mut(ndarray::s![rows, ..]);
            for (t, mut row) in dhi.axis_iter_mut(Axis(0)).enumerate() {
                row.scaled_add(a[t], &gy);
            }
        }
        let (dw, db, dctx) = grads;
        *dctx += &cache.hidden.t().dot(&de).into_dyn();
        let outer = de.view().insert_axis(Axis(1)).dot(&self.context.view().insert_axis(Axis(0)));
        let dpre = outer * cache.hidden.mapv(|p| T::one() - p * p);
        *dw += &dpre.t().dot(h).into_dyn();
        *db += &dpre.sum_axis(Axis(0)).into_dyn();
        dh + dpre.dot(&self.attn_weight)
    }
}

/// Saved activations of [`SapLayer::pool_segments`].
#[derive(Debug, Clone)]
pub struct SapCache<T> {
    frames: usize,
    hidden: Array2<T>,
    weights: Array1<T>,
}

fn softmax<T: Scalar>(x: ndarray::ArrayView1<T>) -> Array1<T> {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let e = x.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}

/// Encoder, attentive pooling and projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub encoder: Vec<Linear<T>>,
    pub pool: SapLayer<T>,
    pub projector: [Linear<T>; 3],
    pub norms: [BatchNorm<T>; 2],
    generation: u64,
}

/// Saved activations of [`Model::encoder_forward`].
#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    generation: u64,
    batch: usize,
    frames: usize,
    /// Input of every encoder layer, all frames stacked (N·T rows).
    layer_inputs: Vec<Array2<T>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Array2<T>>,
    frames_out: Array2<T>,
    pool: SapCache<T>,
}

impl<T: Scalar> EncoderCache<T> {
    /// Attention weights of utterance `i` over its frames.
    pub fn attention(&self, i: usize) -> ndarray::ArrayView1<'_, T> {
        self.pool.weights.slice(ndarray::s![i * self.frames..(i + 1) * self.frames])
    }

    /// ReLU on/off pattern, used to detect kink crossings in gradient checks.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.hidden_pre.iter().flat_map(|p| p.iter().map(|&v| v > T::zero())).collect()
    }
}

/// Saved activations of [`Model::projector_forward`].
#[derive(Debug, Clone)]
pub struct ProjectorCache<T> {
    generation: u64,
    input: Array2<T>,
    bn: [BnCache<T>; 2],
    /// Post-BN, pre-ReLU activations.
    normalized: [Array2<T>; 2],
    relu_out: [Array2<T>; 2],
}

impl<T: Scalar> ProjectorCache<T> {
    /// Post-BN activations of the two hidden layers (before ReLU).
    pub fn normalized(&self, layer: usize) -> &Array2<T> {
        &self.normalized[layer]
    }

    pub fn activation_pattern(&self) -> Vec<bool> {
        self.normalized.iter().flat_map(|p| p.iter().map(|&v| v > T::zero())).collect()
    }
}

/// Gradients in [`Model::param_names`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub tensors: Vec<ArrayD<T>>,
}

impl<T: Scalar> ModelGrads<T> {
    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            *a += b;
        }
    }

    pub fn max_abs(&self) -> T {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar> Model<T> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self, NnError> {
        config.validate()?;
        let widths = config.encoder_widths();
        let encoder = widths.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let r = config.rep_dim;
        let p = config.proj_dim;
        let pool = SapLayer::new(r, r, rng);
        let projector = [Linear::new(r, p, rng), Linear::new(p, p, rng), Linear::new(p, p, rng)];
        let norms = [
            BatchNorm::new(p, config.bn_momentum, config.bn_eps),
            BatchNorm::new(p, config.bn_momentum, config.bn_eps),
        ];
        Ok(Self {
            config,
            encoder,
            pool,
            projector,
            norms,
            generation: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn rep_dim(&self) -> usize {
        self.config.rep_dim
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim
    }

    /// Index of the first projector tensor in parameter order.
    pub fn projector_offset(&self) -> usize {
        2 * self.encoder.len() + 3
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.encoder.len() {
            names.push(format!("encoder.{i}.weight"));
            names.push(format!("encoder.{i}.bias"));
        }
        names.extend(["pool.attn_weight", "pool.attn_bias", "pool.context"].map(String::from));
        for i in 0..3 {
            names.push(format!("projector.{i}.weight"));
            names.push(format!("projector.{i}.bias"));
            if i < 2 {
                names.push(format!("projector.bn{i}.gamma"));
                names.push(format!("projector.bn{i}.beta"));
            }
        }
        names
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, T>> {
        let mut v = Vec::new();
        for l in &self.encoder {
            v.push(l.weight.view().into_dyn());
            v.push(l.bias.view().into_dyn());
        }
        v.push(self.pool.attn_weight.view().into_dyn());
        v.push(self.pool.attn_bias.view().into_dyn());
        v.push(self.pool.context.view().into_dyn());
        for i in 0..3 {
            v.push(self.projector[i].weight.view().into_dyn());
            v.push(self.projector[i].bias.view().into_dyn());
            if i < 2 {
                v.push(self.norms[i].gamma.view().into_dyn());
                v.push(self.norms[i].beta.view().into_dyn());
            }
        }
        v
    }

    /// Mutable parameter views. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.generation += 1;
        let mut v = Vec::new();
        for l in &mut self.encoder {
            v.push(l.weight.view_mut().into_dyn());
            v.push(l.bias.view_mut().into_dyn());
        }
        v.push(self.pool.attn_weight.view_mut().into_dyn());
        v.push(self.pool.attn_bias.view_mut().into_dyn());
        v.push(self.pool.context.view_mut().into_dyn());
        let [p0, p1, p2] = &mut self.projector;
        let [n0, n1] = &mut self.norms;
        v.push(p0.weight.view_mut().into_dyn());
        v.push(p0.bias.view_mut().into_dyn());
        v.push(n0.gamma.view_mut().into_dyn());
        v.push(n0.beta.view_mut().into_dyn());
        v.push(p1.weight.view_mut().into_dyn());
        v.push(p1.bias.view_mut().into_dyn());
        v.push(n1.gamma.view_mut().into_dyn());
        v.push(n1.beta.view_mut().into_dyn());
        v.push(p2.weight.view_mut().into_dyn());
        v.push(p2.bias.view_mut().into_dyn());
        v
    }

    /// Batch-norm running statistics (not trained, but checkpointed).
    pub fn buffers(&self) -> Vec<ArrayViewD<'_, T>> {
        self.norms
            .iter()
            .flat_map(|n| [n.running_mean.view().into_dyn(), n.running_var.view().into_dyn()])
            .collect()
    }

    fn buffers_mut(&mut self) -> Vec<ArrayViewMutD<'_, T>> {
        self.norms
            .iter_mut()
            .flat_map(|n| [n.running_mean.view_mut().into_dyn(), n.running_var.view_mut().into_dyn()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            tensors: self.params().iter().map(|p| ArrayD::zeros(p.raw_dim())).collect(),
        }
    }

    /// Encodes a batch of equally-shaped feature matrices into `N×rep_dim`
    /// representations.
    pub fn encoder_forward(&self, batch: &[FeatureMatrix<T>]) -> Result<(Array2<T>, EncoderCache<T>), NnError> {
        let first = batch.first().ok_or(NnError::EmptyBatch)?;
        let (frames, bins) = first.values.dim();
        if frames == 0 {
            return Err(shape_err("feature matrices have no frames"));
        }
        if bins != self.config.n_mels {
            return Err(shape_err(format!("model expects {} mel bins, features have {bins}", self.config.n_mels)));
        }
        if let Some(i) = batch.iter().position(|f| f.values.dim() != (frames, bins)) {
            return Err(shape_err(format!(
                "item {i} has shape {:?}, expected {:?}",
                batch[i].values.dim(),
                (frames, bins)
            )));
        }
        let n = batch.len();
        let mut x = Array2::<T>::zeros((n * frames, bins));
        for (i, f) in batch.iter().enumerate() {
            x.slice_mut(ndarray::s![i * frames..(i + 1) * frames, ..]).assign(&f.values);
        }

        let last = self.encoder.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.encoder.len());
        let mut hidden_pre = Vec::with_capacity(last);
        let mut h = x;
        for (li, layer) in self.encoder.iter().enumerate() {
            let pre = layer.forward(&h);
            layer_inputs.push(h);
            if li < last {
                h = pre.mapv(|v| v.max(T::zero()));
                hidden_pre.push(pre);
            } else {
                h = pre;
            }
        }

        let (y, pool) = self.pool.pool_segments(&h, frames);

        let cache = EncoderCache {
            generation: self.generation,
            batch: n,
            frames,
            layer_inputs,
            hidden_pre,
            frames_out: h,
            pool,
        };
        Ok((y, cache))
    }

    /// Accumulates encoder and pooling gradients for an upstream `dL/dY`.
    pub fn encoder_backward(&self, cache: &EncoderCache<T>, grad_y: &Array2<T>, grads: &mut ModelGrads<T>) -> Result<(), NnError> {
        if cache.generation != self.generation {
            return Err(NnError::StaleCache);
        }
        if grad_y.dim() != (cache.batch, self.config.rep_dim) {
            return Err(shape_err(format!(
                "grad_y is {:?}, expected {:?}",
                grad_y.dim(),
                (cache.batch, self.config.rep_dim)
            )));
        }
        let enc_n = 2 * self.encoder.len();
        let dh = {
            let [dw, db, dctx] = &mut grads.tensors[enc_n..enc_n + 3] else { unreachable!() };
            self.pool.backward_segments(&cache.frames_out, &cache.pool, grad_y, (dw, db, dctx))
        };

        let last = self.encoder.len() - 1;
        let mut g = dh;
        for li in (0..self.encoder.len()).rev() {
            if li < last {
                relu_backward(&mut g, &cache.hidden_pre[li]);
            }
            let (gw, gb) = grads.tensors[2 * li..2 * li + 2].split_at_mut(1);
            let dx = self.encoder[li].backward(&cache.layer_inputs[li], &g, &mut gw[0], &mut gb[0], li > 0);
            if let Some(dx) = dx {
                g = dx;
            }
        }
        Ok(())
    }

    /// Maps representations to embeddings. Train mode uses (and updates)
    /// batch statistics; eval mode uses the running statistics.
    pub fn projector_forward(&mut self, y: &Array2<T>, mode: Mode) -> Result<(Array2<T>, ProjectorCache<T>), NnError> {
        if y.ncols() != self.config.rep_dim {
            return Err(shape_err(format!("projector expects {} features, got {}", self.config.rep_dim, y.ncols())));
        }
        if y.nrows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if mode == Mode::Train && y.nrows() < 2 {
            return Err(NnError::BatchTooSmall(y.nrows()));
        }
        let a0 = self.projector[0].forward(y);
        let (n0, c0) = self.norms[0].forward(&a0, mode)?;
        let r0 = n0.mapv(|v| v.max(T::zero()));
        let a1 = self.projector[1].forward(&r0);
        let (n1, c1) = self.norms[1].forward(&a1, mode)?;
        let r1 = n1.mapv(|v| v.max(T::zero()));
        let z = self.projector[2].forward(&r1);
        let cache = ProjectorCache {
            generation: self.generation,
            input: y.clone(),
            bn: [c0, c1],
            normalized: [n0, n1],
            relu_out: [r0, r1],
        };
        Ok((z, cache))
    }

    /// Accumulates projector gradients and returns `dL/dY`.
    pub fn projector_backward(&self, cache: &ProjectorCache<T>, grad_z: &Array2<T>, grads: &mut ModelGrads<T>) -> Result<Array2<T>, NnError> {
        if cache.generation != self.generation {
            return Err(NnError::StaleCache);
        }
        if grad_z.dim() != (cache.input.nrows(), self.config.proj_dim) {
            return Err(shape_err(format!(
                "grad_z is {:?}, expected {:?}",
                grad_z.dim(),
                (cache.input.nrows(), self.config.proj_dim)
            )));
        }
        let o = self.projector_offset();
        let t = &mut grads.tensors[o..];
        let relu_back = |mut g: Array2<T>, pre: &Array2<T>| {
            relu_backward(&mut g, pre);
            g
        };

        let (w2, rest) = t[8..10].split_at_mut(1);
        let d = self.projector[2].backward(&cache.relu_out[1], grad_z, &mut w2[0], &mut rest[0], true).unwrap();
        let d = relu_back(d, &cache.normalized[1]);
        let (g1, b1) = t[6..8].split_at_mut(1);
        let d = self.norms[1].backward(&cache.bn[1], &d, &mut g1[0], &mut b1[0]);
        let (w1, bb1) = t[4..6].split_at_mut(1);
        let d = self.projector[1].backward(&cache.relu_out[0], &d, &mut w1[0], &mut bb1[0], true).unwrap();
        let d = relu_back(d, &cache.normalized[0]);
        let (g0, b0) = t[2..4].split_at_mut(1);
        let d = self.norms[0].backward(&cache.bn[0], &d, &mut g0[0], &mut b0[0]);
        let (w0, bb0) = t[0..2].split_at_mut(1);
        Ok(self.projector[0].backward(&cache.input, &d, &mut w0[0], &mut bb0[0], true).unwrap())
    }

    /// Eval-mode representations for a batch.
    pub fn represent(&self, batch: &[FeatureMatrix<T>]) -> Result<Array2<T>, NnError> {
        self.encoder_forward(batch).map(|(y, _)| y)
    }

    pub const MAGIC: [u8; 8] = *b"SSLSVNN\0";
    pub const FORMAT_VERSION: u32 = 1;

    /// Writes the checkpoint: magic, version, config, then every parameter
    /// tensor in [`Model::param_names`] order followed by the batch-norm
    /// running statistics, each as `ndim, dims…, values` (u32 / f64, LE).
    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(&Self::MAGIC)?;
        w.write_u32::<LittleEndian>(Self::FORMAT_VERSION)?;
        let c = &self.config;
        w.write_u32::<LittleEndian>(c.n_mels as u32)?;
        w.write_u32::<LittleEndian>(c.encoder_hidden.len() as u32)?;
        for &h in &c.encoder_hidden {
            w.write_u32::<LittleEndian>(h as u32)?;
        }
        w.write_u32::<LittleEndian>(c.rep_dim as u32)?;
        w.write_u32::<LittleEndian>(c.proj_dim as u32)?;
        w.write_f64::<LittleEndian>(c.bn_momentum)?;
        w.write_f64::<LittleEndian>(c.bn_eps)?;
        for t in self.params().into_iter().chain(self.buffers()) {
            w.write_u32::<LittleEndian>(t.ndim() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.iter() {
                w.write_f64::<LittleEndian>(to_f64(v))?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, NnError> {
        let eof = |e: std::io::Error| {
            if e.kind() == std::io::ErrorKind::UnexpectedEof {
                NnError::Truncated
            } else {
                NnError::Format(e.to_string())
            }
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if magic != Self::MAGIC {
            return Err(NnError::Format("bad magic bytes; not a model checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != Self::FORMAT_VERSION {
            return Err(NnError::Version {
                found: version,
                expected: Self::FORMAT_VERSION,
            });
        }
        let n_mels = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let n_hidden = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        if n_hidden > 64 {
            return Err(NnError::Format(format!("implausible encoder depth {n_hidden}")));
        }
        let encoder_hidden = (0..n_hidden)
            .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(eof)?;
        let rep_dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let proj_dim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
        let bn_momentum = r.read_f64::<LittleEndian>().map_err(eof)?;
        let bn_eps = r.read_f64::<LittleEndian>().map_err(eof)?;
        let config = ModelConfig {
            n_mels,
            encoder_hidden,
            rep_dim,
            proj_dim,
            bn_momentum,
            bn_eps,
        };
        config.validate().map_err(|e| NnError::Format(e.to_string()))?;
        // Shapes come from the config; the stored dims are cross-checked.
        let mut model = Self::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
        let mut read_tensor = |mut t: ArrayViewMutD<'_, T>, name: &str| -> Result<(), NnError> {
            let ndim = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let dims = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|v| v as usize))
                .collect::<Result<Vec<_>, _>>()
                .map_err(eof)?;
            if dims != t.shape() {
                return Err(shape_err(format!("{name}: stored shape {dims:?}, config implies {:?}", t.shape())));
            }
            for v in t.iter_mut() {
                *v = cast(r.read_f64::<LittleEndian>().map_err(eof)?);
            }
            Ok(())
        };
        let names = model.param_names();
        for (t, name) in model.params_mut().into_iter().zip(&names) {
            read_tensor(t, name)?;
        }
        for (i, t) in model.buffers_mut().into_iter().enumerate() {
            read_tensor(t, &format!("buffer.{i}"))?;
        }
        model.generation = 0;
        Ok(model)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cursor = bytes;
        Self::read_from(&mut cursor)
    }

    /// Loads a checkpoint and requires it to match `expected` exactly.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelConfig) -> Result<Self, NnError> {
        let model = Self::from_bytes(bytes)?;
        if model.config != *expected {
            return Err(shape_err(format!(
                "checkpoint config {:?} does not match expected {:?}",
                model.config, expected
            )));
        }
        Ok(model)
    }
}

/// Mean softmax cross-entropy over rows. Returns the loss and `dL/dlogits`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>), NnError> {
    if logits.nrows() != labels.len() || logits.nrows() == 0 {
        return Err(shape_err(format!("{} logit rows for {} labels", logits.nrows(), labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.ncols()) {
        return Err(shape_err(format!("label {bad} out of range for {} classes", logits.ncols())));
    }
    let n: T = count(labels.len());
    let mut grad = logits.clone();
    let mut loss = T::zero();
    for (mut row, &label) in grad.axis_iter_mut(Axis(0)).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, b| a + b).ln();
        loss += lse - row[label];
        row.mapv_inplace(|v| (v - lse).exp() / n);
        row[label] -= T::one() / n;
    }
    Ok((loss / n, grad))
}

/// Zeroes `grad` wherever `pre` is not positive (ReLU backward).
pub fn relu_backward<T: Scalar>(grad: &mut Array2<T>, pre: &Array2<T>) {
    grad.zip_mut_with(pre, |d, &p| {
        if p <= T::zero() {
            *d = T::zero();
        }
    });
}

/// Scales every row to unit Euclidean norm. Returns the normalized rows
/// and the original norms (needed by [`l2_normalize_backward`]).
pub fn l2_normalize<T: Scalar>(v: &Array2<T>) -> Result<(Array2<T>, Array1<T>), NnError> {
    let norms: Array1<T> = v.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|n| n.is_zero()) {
        return Err(NnError::ZeroRow(i));
    }
    let out = v / &norms.view().insert_axis(Axis(1));
    Ok((out, norms))
}

/// Gradient through [`l2_normalize`]: `(g − u·(u·g)) / ‖v‖` per row.
pub fn l2_normalize_backward<T: Scalar>(normalized: &Array2<T>, norms: &Array1<T>, grad: &Array2<T>) -> Array2<T> {
    let mut out = grad.clone();
    for ((mut o, u), &n) in out.axis_iter_mut(Axis(0)).zip(normalized.axis_iter(Axis(0))).zip(norms) {
        let proj = u.dot(&o);
        o.scaled_add(-proj, &u);
        o.mapv_inplace(|x| x / n);
    }
    out
}
