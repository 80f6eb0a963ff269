//! The trainable text-side projection head: stacked blocks of
//! fully-connected -> dropout -> ReLU -> l2-norm, with the l2-norm omitted
//! on the last block so outputs live in the raw image-feature space.
//!
//! Forward, backward, and the optimizer are written out by hand. All
//! reductions run in ascending index order, so identical inputs produce
//! bit-identical outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{dot, Mat};

/// Denominator guard for l2 normalization; zero vectors pass through as zero.
pub const EPS_NORM: f64 = 1e-12;

/// Architecture of the projection head.
///
/// All four per-block lists must have equal length. The last entry of
/// `block_dims` is the output width and must match the image embedding
/// dimension at train time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub input_dim: usize,
    pub block_dims: Vec<usize>,
    pub dropout_rates: Vec<f64>,
    pub l2norm_flags: Vec<bool>,
    pub relu_flags: Vec<bool>,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        ProjectionConfig {
            input_dim: 512,
            block_dims: vec![1024, 2048, 2048],
            dropout_rates: vec![0.2, 0.1, 0.0],
            l2norm_flags: vec![true, true, false],
            relu_flags: vec![true, true, true],
        }
    }
}

impl ProjectionConfig {
    /// Standard flag layout for a given stack: ReLU everywhere, l2-norm on
    /// every block except the last.
    pub fn new(input_dim: usize, block_dims: Vec<usize>, dropout_rates: Vec<f64>) -> Result<Self> {
        let n = block_dims.len();
        let mut l2norm_flags = vec![true; n];
        if let Some(last) = l2norm_flags.last_mut() {
            *last = false;
        }
        let cfg = ProjectionConfig {
            input_dim,
            block_dims,
            dropout_rates,
            l2norm_flags,
            relu_flags: vec![true; n],
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n_blocks(&self) -> usize {
        self.block_dims.len()
    }

    pub fn output_dim(&self) -> usize {
        *self.block_dims.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.block_dims.len();
        if n == 0 {
            return Err(Error::Config("at least one block is required".into()));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if self.dropout_rates.len() != n || self.l2norm_flags.len() != n || self.relu_flags.len() != n
        {
            return Err(Error::Config(format!(
                "per-block lists must all have length {n} (dims {}, dropout {}, l2norm {}, relu {})",
                n,
                self.dropout_rates.len(),
                self.l2norm_flags.len(),
                self.relu_flags.len()
            )));
        }
        if self.block_dims.contains(&0) {
            return Err(Error::Config("block dims must be positive".into()));
        }
        if self.dropout_rates.iter().any(|&p| !(0.0..1.0).contains(&p)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Input width of block `k` (the previous block's output, or `input_dim`).
    pub fn block_in_dim(&self, k: usize) -> usize {
        if k == 0 {
            self.input_dim
        } else {
            self.block_dims[k - 1]
        }
    }
}

/// One fully-connected layer: weight is out_dim x in_dim, row-major.
/// Also reused as the gradient container (same shapes).
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weight: Mat::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// All trainable parameters of the head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub layers: Vec<Layer>,
}

impl NetworkWeights {
    pub fn zeros_like(&self) -> Vec<Layer> {
        self.layers
            .iter()
            .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
            .collect()
    }

    pub fn matches_config(&self, cfg: &ProjectionConfig) -> Result<()> {
        if self.layers.len() != cfg.n_blocks() {
            return Err(Error::Shape(format!(
                "weights have {} layers, config has {} blocks",
                self.layers.len(),
                cfg.n_blocks()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if layer.out_dim() != cfg.block_dims[k] || layer.in_dim() != cfg.block_in_dim(k) {
                return Err(Error::Shape(format!(
                    "layer {k} is {}x{}, config expects {}x{}",
                    layer.out_dim(),
                    layer.in_dim(),
                    cfg.block_dims[k],
                    cfg.block_in_dim(k)
                )));
            }
        }
        Ok(())
    }
}

/// Seeded fan-in uniform initialization: weights from
/// [-sqrt(6/fan_in), +sqrt(6/fan_in)], biases zero. Entries are drawn
/// block by block, row-major, from a ChaCha8 stream.
pub fn init_weights(cfg: &ProjectionConfig, seed: u64) -> Result<NetworkWeights> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(cfg.n_blocks());
    for k in 0..cfg.n_blocks() {
        let (out_dim, in_dim) = (cfg.block_dims[k], cfg.block_in_dim(k));
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut weight = Mat::zeros(out_dim, in_dim);
        for w in weight.as_mut_slice() {
            *w = (rng.random::<f64>() * 2.0 - 1.0) * bound;
        }
        layers.push(Layer {
            weight,
            bias: vec![0.0; out_dim],
        });
    }
    Ok(NetworkWeights { layers })
}

/// v / (||v|| + 1e-12). The zero vector maps to the zero vector.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = dot(v, v).sqrt();
    let denom = norm + EPS_NORM;
    v.iter().map(|&x| x / denom).collect()
}

/// Everything `backward` needs to reproduce exact analytic gradients:
/// per-block inputs, pre-activations, dropout masks, the value entering
/// the l2-norm (the post-ReLU value), and its row norms.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[k] is the input to block k; inputs[n_blocks] is the final output.
    pub inputs: Vec<Mat>,
    pub preacts: Vec<Mat>,
    /// Keep/drop indicator per entry (1.0 = kept). None when the block has
    /// no active dropout.
    pub masks: Vec<Option<Mat>>,
    /// Value entering the l2-norm step (post dropout and ReLU).
    pub prenorms: Vec<Mat>,
    /// Row norms of `prenorms[k]` when block k applies l2-norm.
    pub norms: Vec<Option<Vec<f64>>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Mat {
        self.inputs.last().expect("cache holds at least the input")
    }
}

/// Draw inverted-dropout masks for a train-mode forward pass. Blocks with
/// rate zero consume no randomness and get None. Entries are drawn block by
/// block, row-major.
pub fn sample_dropout_masks<R: Rng>(
    cfg: &ProjectionConfig,
    batch_rows: usize,
    rng: &mut R,
) -> Vec<Option<Mat>> {
    cfg.dropout_rates
        .iter()
        .zip(&cfg.block_dims)
        .map(|(&rate, &out_dim)| {
            if rate > 0.0 {
                let mut mask = Mat::zeros(batch_rows, out_dim);
                for m in mask.as_mut_slice() {
                    *m = if rng.random::<f64>() >= rate { 1.0 } else { 0.0 };
                }
                Some(mask)
            } else {
                None
            }
        })
        .collect()
}

/// Forward pass with explicit dropout masks (None = identity). This is the
/// single implementation behind both train and eval mode; masks recorded in
/// the cache can be replayed for gradient checks.
pub fn forward_masked(
    weights: &NetworkWeights,
    cfg: &ProjectionConfig,
    batch: &Mat,
    masks: &[Option<Mat>],
) -> Result<ForwardCache> {
    cfg.validate()?;
    weights.matches_config(cfg)?;
    if batch.cols() != cfg.input_dim {
        return Err(Error::Shape(format!(
            "batch width {} != input_dim {}",
            batch.cols(),
            cfg.input_dim
        )));
    }
    if masks.len() != cfg.n_blocks() {
        return Err(Error::Shape(format!(
            "{} masks for {} blocks",
            masks.len(),
            cfg.n_blocks()
        )));
    }

    let n_rows = batch.rows();
    let mut inputs = vec![batch.clone()];
    let mut preacts = Vec::with_capacity(cfg.n_blocks());
    let mut cache_masks = Vec::with_capacity(cfg.n_blocks());
    let mut prenorms = Vec::with_capacity(cfg.n_blocks());
    let mut norms = Vec::with_capacity(cfg.n_blocks());

    for k in 0..cfg.n_blocks() {
        let layer = &weights.layers[k];
        let x = &inputs[k];
        let out_dim = layer.out_dim();

        let mut z = Mat::zeros(n_rows, out_dim);
        for i in 0..n_rows {
            let xi = x.row(i);
            let zi = z.row_mut(i);
            for (o, zv) in zi.iter_mut().enumerate() {
                *zv = dot(xi, layer.weight.row(o)) + layer.bias[o];
            }
        }
        preacts.push(z.clone());

        // inverted dropout: kept activations are divided by the keep probability
        let mut h = z;
        if let Some(mask) = &masks[k] {
            if mask.rows() != n_rows || mask.cols() != out_dim {
                return Err(Error::Shape(format!(
                    "mask {k} is {}x{}, expected {}x{}",
                    mask.rows(),
                    mask.cols(),
                    n_rows,
                    out_dim
                )));
            }
            let keep = 1.0 - cfg.dropout_rates[k];
            for (v, m) in h.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v = *v * m / keep;
            }
        }
        cache_masks.push(masks[k].clone());

        if cfg.relu_flags[k] {
            for v in h.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        prenorms.push(h.clone());

        if cfg.l2norm_flags[k] {
            let mut row_norms = Vec::with_capacity(n_rows);
            for i in 0..n_rows {
                let r = h.row_mut(i);
                let norm = dot(r, r).sqrt();
                let denom = norm + EPS_NORM;
                for v in r.iter_mut() {
                    *v /= denom;
                }
                row_norms.push(norm);
            }
            norms.push(Some(row_norms));
        } else {
            norms.push(None);
        }

        inputs.push(h);
    }

    Ok(ForwardCache {
        inputs,
        preacts,
        masks: cache_masks,
        prenorms,
        norms,
    })
}

/// Train-mode forward: draws fresh dropout masks from `rng`.
pub fn forward_train<R: Rng>(
    weights: &NetworkWeights,
    cfg: &ProjectionConfig,
    batch: &Mat,
    rng: &mut R,
) -> Result<ForwardCache> {
    let masks = sample_dropout_masks(cfg, batch.rows(), rng);
    forward_masked(weights, cfg, batch, &masks)
}

/// Eval-mode forward: dropout disabled, a pure function of (weights, batch).
pub fn forward_eval(weights: &NetworkWeights, cfg: &ProjectionConfig, batch: &Mat) -> Result<ForwardCache> {
    let masks = vec![None; cfg.n_blocks()];
    forward_masked(weights, cfg, batch, &masks)
}

/// Exact analytic gradients of the forward map. Returns per-layer parameter
/// gradients and the gradient with respect to the input batch.
///
/// ReLU derivative at exactly zero is 0; the l2-norm Jacobian is
/// (I - y y^T) / (||r|| + eps) applied row-wise.
pub fn backward(
    weights: &NetworkWeights,
    cfg: &ProjectionConfig,
    cache: &ForwardCache,
    output_grad: &Mat,
) -> Result<(Vec<Layer>, Mat)> {
    weights.matches_config(cfg)?;
    let n_blocks = cfg.n_blocks();
    if cache.inputs.len() != n_blocks + 1 || cache.prenorms.len() != n_blocks {
        return Err(Error::Shape("cache does not match config".into()));
    }
    let out = cache.output();
    if output_grad.rows() != out.rows() || output_grad.cols() != out.cols() {
        return Err(Error::Shape(format!(
            "output_grad is {}x{}, expected {}x{}",
            output_grad.rows(),
            output_grad.cols(),
            out.rows(),
            out.cols()
        )));
    }

    let n_rows = output_grad.rows();
    let mut grads = weights.zeros_like();
    let mut g = output_grad.clone();

    for k in (0..n_blocks).rev() {
        let layer = &weights.layers[k];
        let out_dim = layer.out_dim();
        if cache.prenorms[k].rows() != n_rows || cache.prenorms[k].cols() != out_dim {
            return Err(Error::Shape(format!("cache block {k} does not match weights")));
        }

        // l2-norm backward
        if cfg.l2norm_flags[k] {
            let row_norms = cache.norms[k]
                .as_ref()
                .ok_or_else(|| Error::Shape(format!("cache block {k} is missing row norms")))?;
            let y = &cache.inputs[k + 1];
            for (i, norm) in row_norms.iter().enumerate() {
                let denom = norm + EPS_NORM;
                let yi = y.row(i);
                let gi = g.row_mut(i);
                let proj = dot(gi, yi);
                for (gv, yv) in gi.iter_mut().zip(yi) {
                    *gv = (*gv - proj * yv) / denom;
                }
            }
        }

        // ReLU backward (prenorm > 0 iff the pre-ReLU value was > 0)
        if cfg.relu_flags[k] {
            let r = &cache.prenorms[k];
            for (gv, rv) in g.as_mut_slice().iter_mut().zip(r.as_slice()) {
                if *rv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }

        // dropout backward
        if let Some(mask) = &cache.masks[k] {
            let keep = 1.0 - cfg.dropout_rates[k];
            for (gv, m) in g.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *gv = *gv * m / keep;
            }
        }

        // fully-connected backward
        let x = &cache.inputs[k];
        let grad_layer = &mut grads[k];
        for i in 0..n_rows {
            let gi = g.row(i);
            let xi = x.row(i);
            for (o, &go) in gi.iter().enumerate() {
                if go != 0.0 {
                    let wrow = grad_layer.weight.row_mut(o);
                    for (wv, xv) in wrow.iter_mut().zip(xi) {
                        *wv += go * xv;
                    }
                }
                grad_layer.bias[o] += go;
            }
        }

        let mut g_in = Mat::zeros(n_rows, layer.in_dim());
        for i in 0..n_rows {
            let gi = g.row(i);
            let gin = g_in.row_mut(i);
            for (o, &go) in gi.iter().enumerate() {
                if go != 0.0 {
                    let wrow = layer.weight.row(o);
                    for (gv, wv) in gin.iter_mut().zip(wrow) {
                        *gv += go * wv;
                    }
                }
            }
        }
        g = g_in;
    }

    Ok((grads, g))
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            lr: 0.001,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment estimates plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Layer>,
    pub v: Vec<Layer>,
    pub t: u64,
    pub params: AdamParams,
}

impl AdamState {
    pub fn new(weights: &NetworkWeights, params: AdamParams) -> Self {
        AdamState {
            m: weights.zeros_like(),
            v: weights.zeros_like(),
            t: 0,
            params,
        }
    }
}

fn adam_update(p: &AdamParams, bc1: f64, bc2: f64, w: &mut f64, m: &mut f64, v: &mut f64, g: f64) {
    *m = p.beta1 * *m + (1.0 - p.beta1) * g;
    *v = p.beta2 * *v + (1.0 - p.beta2) * g * g;
    let m_hat = *m / bc1;
    let v_hat = *v / bc2;
    *w -= p.lr * m_hat / (v_hat.sqrt() + p.eps);
}

/// One Adam step with bias correction; increments `state.t` first.
pub fn adam_step(state: &mut AdamState, weights: &mut NetworkWeights, grads: &[Layer]) -> Result<()> {
    if grads.len() != weights.layers.len() || state.m.len() != weights.layers.len() {
        return Err(Error::Shape("optimizer state does not match weights".into()));
    }
    for ((layer, grad), (m, v)) in weights
        .layers
        .iter()
        .zip(grads)
        .zip(state.m.iter().zip(&state.v))
    {
        if layer.weight.rows() != grad.weight.rows()
            || layer.weight.cols() != grad.weight.cols()
            || layer.bias.len() != grad.bias.len()
            || m.weight.rows() != layer.weight.rows()
            || v.weight.rows() != layer.weight.rows()
        {
            return Err(Error::Shape("gradient shapes do not match weights".into()));
        }
    }

    state.t += 1;
    let p = state.params;
    let t = i32::try_from(state.t).map_err(|_| Error::Config("step counter overflow".into()))?;
    let bc1 = 1.0 - p.beta1.powi(t);
    let bc2 = 1.0 - p.beta2.powi(t);

    for (k, grad) in grads.iter().enumerate() {
        let layer = &mut weights.layers[k];
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        for ((w, mw), (vw, g)) in layer
            .weight
            .as_mut_slice()
            .iter_mut()
            .zip(m.weight.as_mut_slice())
            .zip(v.weight.as_mut_slice().iter_mut().zip(grad.weight.as_slice()))
        {
            adam_update(&p, bc1, bc2, w, mw, vw, *g);
        }
        for ((w, mw), (vw, g)) in layer
            .bias
            .iter_mut()
            .zip(m.bias.iter_mut())
            .zip(v.bias.iter_mut().zip(&grad.bias))
        {
            adam_update(&p, bc1, bc2, w, mw, vw, *g);
        }
    }
    Ok(())
}
