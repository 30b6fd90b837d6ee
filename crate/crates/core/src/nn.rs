//! From-scratch fully connected network kernel sized for the bottleneck
//! autoencoder: forward, reverse-mode backward, inverted dropout, SGD with
//! momentum and weight decay, a reduce-on-plateau scheduler, and a binary
//! checkpoint format.
//!
//! The architecture is fixed at six linear layers N -> 4N -> 2N -> 6 -> 2N
//! -> 4N -> N with N = 3n for a grid of n wavelengths. ReLU follows every
//! layer except the bottleneck and the output. Dropout (as a *retention*
//! probability by default) applies after layers 1 (p=0.2), 2 (p=0.5) and
//! 5 (p=0.5) during training only.

use crate::rng::SplitMix64;
use thiserror::Error;

pub const LAYER_COUNT: usize = 6;
pub const BOTTLENECK: usize = 6;

/// ReLU applies after all but the bottleneck (index 2) and output (index 5).
const RELU: [bool; LAYER_COUNT] = [true, true, false, true, true, false];

/// Dropout probabilities by layer, as printed in the architecture table.
const DROPOUT_P: [Option<f64>; LAYER_COUNT] =
    [Some(0.2), Some(0.5), None, None, Some(0.5), None];

/// Whether the tabled dropout probability is the retention probability (as
/// captioned) or the drop probability (the common framework convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DropoutSemantics {
    #[default]
    Retention,
    DropProbability,
}

impl DropoutSemantics {
    fn keep_prob(&self, p: f64) -> f64 {
        match self {
            DropoutSemantics::Retention => p,
            DropoutSemantics::DropProbability => 1.0 - p,
        }
    }
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("cache does not match the weights (stale cache)")]
    StaleCache,
    #[error("input length {got} does not match the network input {expected}")]
    BadInput { expected: usize, got: usize },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("checkpoint format version {0} is not supported")]
    VersionMismatch(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint layer dimensions do not form the expected architecture")]
    DimensionMismatch,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major `outputs x inputs`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Layer {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: vec![0.0; inputs * outputs], bias: vec![0.0; outputs], inputs, outputs }
    }
}

/// The six-layer autoencoder weights for a grid of `grid_n` wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderWeights {
    grid_n: usize,
    layers: Vec<Layer>,
}

impl AutoencoderWeights {
    pub fn layer_dims(grid_n: usize) -> [(usize, usize); LAYER_COUNT] {
        let n = 3 * grid_n;
        [(n, 4 * n), (4 * n, 2 * n), (2 * n, BOTTLENECK), (BOTTLENECK, 2 * n), (2 * n, 4 * n), (4 * n, n)]
    }

    pub fn zeros(grid_n: usize) -> Self {
        let layers = Self::layer_dims(grid_n)
            .iter()
            .map(|&(i, o)| Layer::zeros(i, o))
            .collect();
        Self { grid_n, layers }
    }

    /// Uniform fan-in initialization: each weight and bias drawn from
    /// [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    pub fn init(grid_n: usize, rng: &mut SplitMix64) -> Self {
        let mut w = Self::zeros(grid_n);
        for layer in &mut w.layers {
            let bound = 1.0 / (layer.inputs as f64).sqrt();
            for v in layer.weight.iter_mut() {
                *v = rng.uniform(-bound, bound);
            }
            for v in layer.bias.iter_mut() {
                *v = rng.uniform(-bound, bound);
            }
        }
        w
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn input_len(&self) -> usize {
        3 * self.grid_n
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }
}

/// Forward mode: training draws dropout masks from the supplied generator,
/// eval applies no dropout and is deterministic.
pub enum Mode<'a> {
    Train { rng: &'a mut SplitMix64, semantics: DropoutSemantics },
    Eval,
}

/// Per-layer state captured during a forward pass, sufficient for exact
/// reverse-mode differentiation through the same masks.
pub struct AeCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    /// Effective post-linear multiplier per unit (ReLU gate times dropout
    /// scale); `None` for layers with neither.
    mult: Vec<Option<Vec<f64>>>,
    grid_n: usize,
}

/// Gradients with the same shapes as [`AutoencoderWeights`].
#[derive(Debug, Clone)]
pub struct AeGradients {
    pub layers: Vec<Layer>,
}

impl AeGradients {
    pub fn zeros_like(w: &AutoencoderWeights) -> Self {
        Self {
            layers: w
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }
}

mod kernels {
    /// Dot product with eight accumulators; `mul_add` compiles to FMA on
    /// targets that have it (see the workspace cargo config).
    #[inline]
    pub fn dot(a: &[f64], b: &[f64]) -> f64 {
        debug_assert_eq!(a.len(), b.len());
        let mut acc = [0.0f64; 8];
        let chunks = a.len() / 8;
        for c in 0..chunks {
            let x = &a[c * 8..c * 8 + 8];
            let y = &b[c * 8..c * 8 + 8];
            for k in 0..8 {
                acc[k] = x[k].mul_add(y[k], acc[k]);
            }
        }
        let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
        for k in chunks * 8..a.len() {
            s = a[k].mul_add(b[k], s);
        }
        s
    }

    /// y += a * x
    #[inline]
    pub fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
        debug_assert_eq!(y.len(), x.len());
        for (yi, xi) in y.iter_mut().zip(x) {
            *yi = a.mul_add(*xi, *yi);
        }
    }
}

pub(crate) use kernels::{axpy, dot};

fn forward_impl(
    w: &AutoencoderWeights,
    x: &[f64],
    mode: Mode,
    use_relu: bool,
) -> Result<(Vec<f64>, AeCache), NnError> {
    if x.len() != w.input_len() {
        return Err(NnError::BadInput { expected: w.input_len(), got: x.len() });
    }
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(LAYER_COUNT);
    let mut mult: Vec<Option<Vec<f64>>> = Vec::with_capacity(LAYER_COUNT);
    let mut cur = x.to_vec();
    let mut mode = mode;
    for (l, layer) in w.layers.iter().enumerate() {
        inputs.push(cur.clone());
        let mut out = vec![0.0; layer.outputs];
        for (o, out_v) in out.iter_mut().enumerate() {
            *out_v = dot(&cur, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs])
                + layer.bias[o];
        }
        let relu = use_relu && RELU[l];
        let drop = match (&mut mode, DROPOUT_P[l]) {
            (Mode::Train { rng, semantics }, Some(p)) => {
                let keep = semantics.keep_prob(p);
                Some(
                    (0..layer.outputs)
                        .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            }
            _ => None,
        };
        if relu || drop.is_some() {
            let mut m = vec![0.0; layer.outputs];
            for o in 0..layer.outputs {
                let gate = if relu && out[o] <= 0.0 { 0.0 } else { 1.0 };
                let scale = drop.as_ref().map_or(1.0, |d| d[o]);
                m[o] = gate * scale;
                out[o] = if relu { out[o].max(0.0) } else { out[o] } * scale;
            }
            mult.push(Some(m));
        } else {
            mult.push(None);
        }
        cur = out;
    }
    Ok((cur, AeCache { inputs, mult, grid_n: w.grid_n }))
}

/// Runs the autoencoder on a flattened curve (length 3n, channel blocks in
/// r, g, b order). Returns the reconstruction and the cache for backward.
pub fn ae_forward(
    w: &AutoencoderWeights,
    x: &[f64],
    mode: Mode,
) -> Result<(Vec<f64>, AeCache), NnError> {
    forward_impl(w, x, mode, true)
}

#[cfg(test)]
pub(crate) fn ae_forward_linear(
    w: &AutoencoderWeights,
    x: &[f64],
    mode: Mode,
) -> Result<(Vec<f64>, AeCache), NnError> {
    forward_impl(w, x, mode, false)
}

/// Exact reverse-mode gradients through a cached forward pass, including the
/// dropout masks used there. Returns per-layer weight/bias gradients and the
/// gradient with respect to the network input.
pub fn ae_backward(
    w: &AutoencoderWeights,
    cache: &AeCache,
    upstream: &[f64],
) -> Result<(AeGradients, Vec<f64>), NnError> {
    if cache.grid_n != w.grid_n
        || cache.inputs.len() != LAYER_COUNT
        || upstream.len() != w.input_len()
        || cache
            .inputs
            .iter()
            .zip(&w.layers)
            .any(|(x, l)| x.len() != l.inputs)
    {
        return Err(NnError::StaleCache);
    }
    let mut grads = AeGradients::zeros_like(w);
    let mut dy = upstream.to_vec();
    for l in (0..LAYER_COUNT).rev() {
        let layer = &w.layers[l];
        // dz = dy (elementwise) mult
        let dz: Vec<f64> = match &cache.mult[l] {
            Some(m) => dy.iter().zip(m).map(|(g, m)| g * m).collect(),
            None => dy.clone(),
        };
        let g = &mut grads.layers[l];
        let x = &cache.inputs[l];
        for o in 0..layer.outputs {
            let v = dz[o];
            if v != 0.0 {
                axpy(&mut g.weight[o * layer.inputs..(o + 1) * layer.inputs], v, x);
                g.bias[o] += v;
            }
        }
        let mut dx = vec![0.0; layer.inputs];
        for o in 0..layer.outputs {
            let v = dz[o];
            if v != 0.0 {
                axpy(&mut dx, v, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs]);
            }
        }
        dy = dx;
    }
    Ok((grads, dy))
}

/// Gradient with respect to the input only (skips weight gradients); used by
/// the estimation objective where the weights are frozen.
pub fn ae_backward_input(
    w: &AutoencoderWeights,
    cache: &AeCache,
    upstream: &[f64],
) -> Result<Vec<f64>, NnError> {
    if cache.grid_n != w.grid_n || upstream.len() != w.input_len() {
        return Err(NnError::StaleCache);
    }
    let mut dy = upstream.to_vec();
    for l in (0..LAYER_COUNT).rev() {
        let layer = &w.layers[l];
        let dz: Vec<f64> = match &cache.mult[l] {
            Some(m) => dy.iter().zip(m).map(|(g, m)| g * m).collect(),
            None => dy.clone(),
        };
        let mut dx = vec![0.0; layer.inputs];
        for o in 0..layer.outputs {
            let v = dz[o];
            if v != 0.0 {
                axpy(&mut dx, v, &layer.weight[o * layer.inputs..(o + 1) * layer.inputs]);
            }
        }
        dy = dx;
    }
    Ok(dy)
}

// ---------------------------------------------------------------------------
// Optimizer and scheduler
// ---------------------------------------------------------------------------

/// Reduce-on-plateau state: an observation improves on the best loss when it
/// is below `best * (1 - 1e-4)`; after more than `patience` consecutive
/// non-improving observations the caller's learning rate is decayed.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub best_loss: f64,
    pub patience_counter: usize,
    pub decay: f64,
    pub patience: usize,
}

/// Relative improvement threshold for the plateau scheduler.
pub const PLATEAU_REL_THRESHOLD: f64 = 1e-4;

impl PlateauScheduler {
    pub fn new(decay: f64, patience: usize) -> Self {
        Self { best_loss: f64::INFINITY, patience_counter: 0, decay, patience }
    }

    /// Observes one loss value; returns true when the learning rate should
    /// decay now (the counter resets either way).
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best_loss * (1.0 - PLATEAU_REL_THRESHOLD) {
            self.best_loss = loss;
            self.patience_counter = 0;
            return false;
        }
        self.patience_counter += 1;
        if self.patience_counter > self.patience {
            self.patience_counter = 0;
            return true;
        }
        false
    }
}

/// Mutable training state: weights, momentum buffers, learning rate, and the
/// plateau scheduler.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub weights: AutoencoderWeights,
    pub velocity: Vec<Layer>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub scheduler: PlateauScheduler,
}

impl TrainState {
    pub fn new(
        weights: AutoencoderWeights,
        lr: f64,
        momentum: f64,
        weight_decay: f64,
        scheduler: PlateauScheduler,
    ) -> Self {
        let velocity = weights
            .layers
            .iter()
            .map(|l| Layer::zeros(l.inputs, l.outputs))
            .collect();
        Self { weights, velocity, lr, momentum, weight_decay, scheduler }
    }
}

#[inline]
fn sgd_update_slice(w: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, momentum: f64, wd: f64) {
    for i in 0..w.len() {
        let grad = wd.mul_add(w[i], g[i]);
        v[i] = momentum.mul_add(v[i], grad);
        w[i] -= lr * v[i];
    }
}

/// One SGD step: `g <- grad + wd*w; v <- momentum*v + g; w <- w - lr*v`.
pub fn sgd_step(state: &mut TrainState, grads: &AeGradients) {
    let (lr, momentum, wd) = (state.lr, state.momentum, state.weight_decay);
    for (l, g) in state.weights.layers.iter_mut().zip(&grads.layers).enumerate() {
        let (layer, grad) = g;
        let vel = &mut state.velocity[l];
        sgd_update_slice(&mut layer.weight, &mut vel.weight, &grad.weight, lr, momentum, wd);
        sgd_update_slice(&mut layer.bias, &mut vel.bias, &grad.bias, lr, momentum, wd);
    }
}

/// Feeds one loss observation to the scheduler, decaying the learning rate
/// on a plateau.
pub fn scheduler_update(state: &mut TrainState, loss: f64) {
    if state.scheduler.observe(loss) {
        state.lr *= state.scheduler.decay;
    }
}

// ---------------------------------------------------------------------------
// Checkpoint format
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"SSAE";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes weights: magic "SSAE", version, grid n, layer count, then per
/// layer: out, in, weight (row-major f64), bias; all little-endian.
pub fn checkpoint_to_bytes(w: &AutoencoderWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.grid_n as u32).to_le_bytes());
    out.extend_from_slice(&(w.layers.len() as u32).to_le_bytes());
    for l in &w.layers {
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        for v in &l.weight {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &l.bias {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<AutoencoderWeights, NnError> {
    struct Cursor<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
            let end = self.pos.checked_add(n).ok_or(NnError::Truncated)?;
            let s = self.bytes.get(self.pos..end).ok_or(NnError::Truncated)?;
            self.pos = end;
            Ok(s)
        }
        fn u32(&mut self) -> Result<u32, NnError> {
            let b = self.take(4)?;
            Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        }
        fn f64(&mut self) -> Result<f64, NnError> {
            let b = self.take(8)?;
            Ok(f64::from_le_bytes(b.try_into().unwrap()))
        }
    }
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(NnError::BadMagic);
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::VersionMismatch(version));
    }
    let grid_n = c.u32()? as usize;
    let layer_count = c.u32()? as usize;
    if layer_count != LAYER_COUNT || grid_n == 0 {
        return Err(NnError::DimensionMismatch);
    }
    let expected = AutoencoderWeights::layer_dims(grid_n);
    let mut layers = Vec::with_capacity(LAYER_COUNT);
    for dims in expected {
        let outputs = c.u32()? as usize;
        let inputs = c.u32()? as usize;
        if (inputs, outputs) != dims {
            return Err(NnError::DimensionMismatch);
        }
        let mut layer = Layer::zeros(inputs, outputs);
        for v in layer.weight.iter_mut() {
            *v = c.f64()?;
        }
        for v in layer.bias.iter_mut() {
            *v = c.f64()?;
        }
        layers.push(layer);
    }
    Ok(AutoencoderWeights { grid_n, layers })
}

pub fn save_checkpoint(w: &AutoencoderWeights, path: &std::path::Path) -> Result<(), NnError> {
    Ok(std::fs::write(path, checkpoint_to_bytes(w))?)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<AutoencoderWeights, NnError> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Batched training path
// ---------------------------------------------------------------------------

/// Scratch buffers and kernels for full-batch training steps. The numbers
/// produced are identical to running the single-sample forward/backward per
/// sample; the batched path exists so the dropout sparsity can be skipped
/// over instead of multiplied through.
pub(crate) struct BatchTrainer {
    batch: usize,
    dims: [(usize, usize); LAYER_COUNT],
    /// Network input, batch x N.
    pub x0: Vec<f64>,
    /// Post-activation outputs per layer, batch x out.
    acts: Vec<Vec<f64>>,
    /// Effective multiplier (ReLU gate x dropout scale) per layer where
    /// applicable, batch x out.
    emult: Vec<Vec<f64>>,
    /// Upstream loss gradient (batch x N), filled by the caller between
    /// forward and backward.
    pub dy: Vec<f64>,
    dz: Vec<Vec<f64>>,
    dx: Vec<Vec<f64>>,
    /// Transposed weights for the layers walked input-side (1 and 5).
    wt1: Vec<f64>,
    wt5: Vec<f64>,
    gw: Vec<f64>,
    gb: Vec<f64>,
}

impl BatchTrainer {
    pub fn new(grid_n: usize, batch: usize) -> Self {
        let dims = AutoencoderWeights::layer_dims(grid_n);
        let acts = dims.iter().map(|&(_, o)| vec![0.0; batch * o]).collect();
        let emult = dims.iter().map(|&(_, o)| vec![0.0; batch * o]).collect();
        let dz = dims.iter().map(|&(_, o)| vec![0.0; batch * o]).collect();
        let dx = dims.iter().map(|&(i, _)| vec![0.0; batch * i]).collect();
        let max_w = dims.iter().map(|&(i, o)| i * o).max().unwrap();
        let max_o = dims.iter().map(|&(_, o)| o).max().unwrap();
        Self {
            batch,
            dims,
            x0: vec![0.0; batch * dims[0].0],
            acts,
            emult,
            dy: vec![0.0; batch * dims[5].1],
            dz,
            dx,
            wt1: vec![0.0; dims[1].0 * dims[1].1],
            wt5: vec![0.0; dims[5].0 * dims[5].1],
            gw: vec![0.0; max_w],
            gb: vec![0.0; max_o],
        }
    }

    #[cfg(test)]
    pub fn output(&self) -> &[f64] {
        &self.acts[5]
    }

    /// Split borrow of (input batch, final output, upstream-gradient buffer)
    /// for loss code that reads the first two while filling the third.
    pub fn loss_io(&mut self) -> (&[f64], &[f64], &mut [f64]) {
        (&self.x0, &self.acts[5], &mut self.dy)
    }

    fn refresh_transpose(dst: &mut [f64], layer: &Layer) {
        for o in 0..layer.outputs {
            for i in 0..layer.inputs {
                dst[i * layer.outputs + o] = layer.weight[o * layer.inputs + i];
            }
        }
    }

    pub fn sync_transposes(&mut self, w: &AutoencoderWeights) {
        Self::refresh_transpose(&mut self.wt1, &w.layers[1]);
        Self::refresh_transpose(&mut self.wt5, &w.layers[5]);
    }

    /// Forward pass in train mode over the whole batch. Dropout masks are
    /// drawn per layer in (sample, unit) order from `rng`.
    pub fn forward_train(
        &mut self,
        w: &AutoencoderWeights,
        rng: &mut SplitMix64,
        semantics: DropoutSemantics,
    ) {
        let b = self.batch;
        for l in 0..LAYER_COUNT {
            let (n_in, n_out) = self.dims[l];
            let layer = &w.layers[l];
            // draw the dropout scales first so dropped outputs are skipped
            let keep = DROPOUT_P[l].map(|p| semantics.keep_prob(p));
            if let Some(k) = keep {
                let m = &mut self.emult[l];
                for v in m[..b * n_out].iter_mut() {
                    *v = if rng.next_f64() < k { 1.0 / k } else { 0.0 };
                }
            }
            let (head, tail) = self.acts.split_at_mut(l);
            let x_all: &[f64] = if l == 0 { &self.x0 } else { &head[l - 1] };
            let out_all: &mut [f64] = &mut tail[0];
            match l {
                // input-side walk with transposed weights: big input sparsity
                1 | 5 => {
                    let wt = if l == 1 { &self.wt1 } else { &self.wt5 };
                    for bi in 0..b {
                        let x = &x_all[bi * n_in..(bi + 1) * n_in];
                        let out = &mut out_all[bi * n_out..(bi + 1) * n_out];
                        out.copy_from_slice(&layer.bias);
                        for (i, &xv) in x.iter().enumerate() {
                            if xv != 0.0 {
                                axpy(out, xv, &wt[i * n_out..(i + 1) * n_out]);
                            }
                        }
                    }
                }
                // output-side walk: dots, skipping dropped outputs
                _ => {
                    for bi in 0..b {
                        let x = &x_all[bi * n_in..(bi + 1) * n_in];
                        let out = &mut out_all[bi * n_out..(bi + 1) * n_out];
                        if keep.is_some() {
                            let m = &self.emult[l][bi * n_out..(bi + 1) * n_out];
                            for o in 0..n_out {
                                out[o] = if m[o] != 0.0 {
                                    dot(x, &layer.weight[o * n_in..(o + 1) * n_in])
                                        + layer.bias[o]
                                } else {
                                    0.0
                                };
                            }
                        } else {
                            for o in 0..n_out {
                                out[o] = dot(x, &layer.weight[o * n_in..(o + 1) * n_in])
                                    + layer.bias[o];
                            }
                        }
                    }
                }
            }
            // activation + dropout scaling, recording the effective multiplier
            let relu = RELU[l];
            let m_all = &mut self.emult[l];
            let out_all = &mut self.acts[l];
            match (relu, keep.is_some()) {
                (true, true) => {
                    for (v, m) in out_all[..b * n_out].iter_mut().zip(m_all[..b * n_out].iter_mut()) {
                        if *m != 0.0 && *v > 0.0 {
                            *v *= *m;
                        } else {
                            *v = 0.0;
                            *m = 0.0;
                        }
                    }
                }
                (true, false) => {
                    for (v, m) in out_all[..b * n_out].iter_mut().zip(m_all[..b * n_out].iter_mut()) {
                        if *v > 0.0 {
                            *m = 1.0;
                        } else {
                            *v = 0.0;
                            *m = 0.0;
                        }
                    }
                }
                (false, true) => {
                    for (v, m) in out_all[..b * n_out].iter_mut().zip(m_all[..b * n_out].iter()) {
                        *v *= *m;
                    }
                }
                (false, false) => {}
            }
        }
    }

    /// Backward pass from `self.dy` with a fused SGD update per layer. The
    /// scheduler is not touched; the caller observes the loss separately.
    pub fn backward_and_update(&mut self, state: &mut TrainState) {
        let b = self.batch;
        let (lr, momentum, wd) = (state.lr, state.momentum, state.weight_decay);
        for l in (0..LAYER_COUNT).rev() {
            let (n_in, n_out) = self.dims[l];
            let layer = &state.weights.layers[l];
            // dz = upstream (dy for l = 5, dx of l+1 otherwise) times emult
            {
                let upstream: &[f64] = if l == 5 { &self.dy } else { &self.dx[l + 1] };
                let dz = &mut self.dz[l];
                let has_mult = RELU[l] || DROPOUT_P[l].is_some();
                if has_mult {
                    let m = &self.emult[l];
                    for i in 0..b * n_out {
                        dz[i] = upstream[i] * m[i];
                    }
                } else {
                    dz[..b * n_out].copy_from_slice(&upstream[..b * n_out]);
                }
            }
            // weight and bias gradients
            let gw = &mut self.gw[..n_in * n_out];
            let gb = &mut self.gb[..n_out];
            gw.fill(0.0);
            gb.fill(0.0);
            {
                let x_all: &[f64] = if l == 0 { &self.x0 } else { &self.acts[l - 1] };
                let dz = &self.dz[l];
                for bi in 0..b {
                    let x = &x_all[bi * n_in..(bi + 1) * n_in];
                    let dzr = &dz[bi * n_out..(bi + 1) * n_out];
                    for (o, &v) in dzr.iter().enumerate() {
                        if v != 0.0 {
                            axpy(&mut gw[o * n_in..(o + 1) * n_in], v, x);
                            gb[o] += v;
                        }
                    }
                }
            }
            // input gradient (skipped for layer 0)
            if l > 0 {
                let dz = &self.dz[l];
                let dx = &mut self.dx[l];
                match l {
                    // input-side dots through the transposed weights,
                    // computing only inputs that were active
                    1 | 5 => {
                        let wt = if l == 1 { &self.wt1 } else { &self.wt5 };
                        let prev_m = &self.emult[l - 1];
                        for bi in 0..b {
                            let dzr = &dz[bi * n_out..(bi + 1) * n_out];
                            let dxr = &mut dx[bi * n_in..(bi + 1) * n_in];
                            let pm = &prev_m[bi * n_in..(bi + 1) * n_in];
                            for i in 0..n_in {
                                dxr[i] = if pm[i] != 0.0 {
                                    dot(dzr, &wt[i * n_out..(i + 1) * n_out])
                                } else {
                                    0.0
                                };
                            }
                        }
                    }
                    _ => {
                        for bi in 0..b {
                            let dzr = &dz[bi * n_out..(bi + 1) * n_out];
                            let dxr = &mut dx[bi * n_in..(bi + 1) * n_in];
                            dxr.fill(0.0);
                            for (o, &v) in dzr.iter().enumerate() {
                                if v != 0.0 {
                                    axpy(dxr, v, &layer.weight[o * n_in..(o + 1) * n_in]);
                                }
                            }
                        }
                    }
                }
            }
            // fused SGD update for this layer
            let layer = &mut state.weights.layers[l];
            let vel = &mut state.velocity[l];
            sgd_update_slice(&mut layer.weight, &mut vel.weight, gw, lr, momentum, wd);
            sgd_update_slice(&mut layer.bias, &mut vel.bias, gb, lr, momentum, wd);
            if l == 1 {
                Self::refresh_transpose(&mut self.wt1, layer);
            } else if l == 5 {
                Self::refresh_transpose(&mut self.wt5, layer);
            }
        }
    }
}
