//! Top-k layer fusion: concatenation + projection, CNN-gated and SE-gated
//! weighted sums.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{LayerStack, TokenGrid};
use crate::error::{Error, Result};
use crate::frontend::MelSpec;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Concat,
    CnnGate,
    SeGate,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Concat, FusionMode::CnnGate, FusionMode::SeGate];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::CnnGate => "cnn_gate",
            FusionMode::SeGate => "se_gate",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(&["fusion.mode"], format!("unknown fusion mode {s:?} (concat, cnn_gate, se_gate)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub k: usize,
    /// SE excitation hidden width is `ceil(k / se_reduction)`.
    pub se_reduction: usize,
    /// Output channels of the three CNN-gate convolutions.
    pub cnn_channels: [usize; 3],
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { mode: FusionMode::SeGate, k: 4, se_reduction: 2, cnn_channels: [8, 16, 32] }
    }
}

impl FusionConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.k == 0 || self.k > depth {
            return Err(Error::config(
                &["fusion.k", "encoder.depth"],
                format!("fusion.k = {} must be between 1 and encoder.depth = {depth}", self.k),
            ));
        }
        if self.se_reduction == 0 {
            return Err(Error::config(&["fusion.se_reduction"], "reduction must be at least 1"));
        }
        if self.cnn_channels.contains(&0) {
            return Err(Error::config(&["fusion.cnn_channels"], "every channel count must be positive"));
        }
        Ok(())
    }
}

/// Non-negative layer weights summing to one.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights(Vec<f64>);

impl FusionWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.is_empty() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!("not a probability vector: {weights:?}")));
        }
        Ok(Self(weights))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// The last `k` layers, in encoder order.
pub fn select_topk(stack: &LayerStack, k: usize) -> Result<LayerStack> {
    let l = stack.len();
    if k == 0 || k > l {
        return Err(Error::InvalidInput(format!("k = {k} is outside 1..={l}")));
    }
    LayerStack::new(stack.layers()[l - k..].to_vec())
}

pub(crate) fn topk_vars(layers: &[Var], k: usize) -> Result<&[Var]> {
    let l = layers.len();
    if k == 0 || k > l {
        return Err(Error::InvalidInput(format!("k = {k} is outside 1..={l}")));
    }
    Ok(&layers[l - k..])
}

/// Stacks the k layers per token (`[T, k*D]`) and projects back to `D`.
#[derive(Clone, Debug)]
pub struct ConcatFusion {
    k: usize,
    dim: usize,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl ConcatFusion {
    /// The projection starts as `[I/k; ...; I/k]`, i.e. the layer mean.
    pub fn new(k: usize, dim: usize, store: &mut ParamStore, prefix: &str) -> Self {
        let mut w = Tensor::zeros(&[k * dim, dim]);
        for b in 0..k {
            for i in 0..dim {
                w.data_mut()[(b * dim + i) * dim + i] = 1.0 / k as f64;
            }
        }
        let proj_w = store.add(format!("{prefix}.proj.weight"), w);
        let proj_b = store.zeros(format!("{prefix}.proj.bias"), &[dim]);
        Self { k, dim, proj_w, proj_b }
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj_w, self.proj_b)
    }

    pub fn forward(&self, g: &mut Graph, topk: &[Var]) -> Result<Var> {
        check_stack(g, topk, self.k, self.dim)?;
        let stacked = if topk.len() == 1 { topk[0] } else { g.concat_cols(topk) };
        Ok(g.linear(stacked, self.proj_w, self.proj_b))
    }

    pub fn fuse(&self, store: &ParamStore, topk: &LayerStack) -> Result<TokenGrid> {
        let mut g = Graph::new(store);
        let vars = constants(&mut g, topk);
        let out = self.forward(&mut g, &vars)?;
        TokenGrid::new(g.value(out).clone(), topk.layers()[0].meta())
    }
}

/// Three stride-2 3x3 convolutions over the mel image, global average
/// pooling, then linear + softmax to k layer weights.
#[derive(Clone, Debug)]
pub struct CnnGate {
    k: usize,
    convs: Vec<(ParamId, ParamId)>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl CnnGate {
    pub fn new<R: Rng + ?Sized>(k: usize, channels: [usize; 3], store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let mut convs = Vec::with_capacity(3);
        let mut cin = 1;
        for (i, &cout) in channels.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let w = store.normal(format!("{prefix}.conv{i}.weight"), &[cout, cin, 3, 3], std, rng);
            let b = store.zeros(format!("{prefix}.conv{i}.bias"), &[cout]);
            convs.push((w, b));
            cin = cout;
        }
        let fc_w = store.normal(format!("{prefix}.fc.weight"), &[cin, k], 0.01, rng);
        let fc_b = store.zeros(format!("{prefix}.fc.bias"), &[k]);
        Self { k, convs, fc_w, fc_b }
    }

    /// Final linear layer producing the gate logits.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.fc_w, self.fc_b)
    }

    /// Softmax layer weights `[1, k]` for `mel`.
    pub fn weights_graph(&self, g: &mut Graph, mel: &MelSpec) -> Var {
        let img = Tensor::new(&[1, mel.frames(), mel.n_mels()], mel.values().to_vec());
        let mut x = g.constant(img);
        for &(w, b) in &self.convs {
            x = g.conv2d(x, w, b, 2, 1);
            x = g.relu(x);
        }
        let c = g.shape(x)[0];
        let spatial = g.value(x).len() / c;
        let x = g.reshape(x, &[c, spatial]);
        // [C, HW] -> mean over HW, as a [1, C] row
        let ones = g.constant(Tensor::full(&[1, spatial], 1.0 / spatial as f64));
        let pooled = g.matmul_nt(ones, x);
        let logits = g.linear(pooled, self.fc_w, self.fc_b);
        g.softmax_rows(logits)
    }

    pub fn forward(&self, g: &mut Graph, topk: &[Var], mel: &MelSpec, meta_frames: (usize, usize)) -> Result<(Var, Var)> {
        let dim = g.shape(topk[0])[1];
        check_stack(g, topk, self.k, dim)?;
        check_mel_matches(mel, meta_frames)?;
        let w = self.weights_graph(g, mel);
        Ok((g.weighted_sum(w, topk), w))
    }

    pub fn fuse(&self, store: &ParamStore, topk: &LayerStack, mel: &MelSpec) -> Result<(TokenGrid, FusionWeights)> {
        let mut g = Graph::new(store);
        let vars = constants(&mut g, topk);
        let meta = topk.layers()[0].meta();
        let (out, w) = self.forward(&mut g, &vars, mel, (meta.h, meta.w * meta.patch_size))?;
        let weights = FusionWeights::new(g.value(w).data().to_vec())?;
        Ok((TokenGrid::new(g.value(out).clone(), meta)?, weights))
    }
}

/// Squeeze each layer to its mean activation, excite through
/// `k -> ceil(k/r) -> k` with ReLU, softmax to layer weights.
#[derive(Clone, Debug)]
pub struct SeGate {
    k: usize,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl SeGate {
    pub fn new<R: Rng + ?Sized>(k: usize, reduction: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let hidden = k.div_ceil(reduction);
        let fc1_w = store.normal(format!("{prefix}.fc1.weight"), &[k, hidden], (2.0 / k as f64).sqrt(), rng);
        let fc1_b = store.zeros(format!("{prefix}.fc1.bias"), &[hidden]);
        let fc2_w = store.normal(format!("{prefix}.fc2.weight"), &[hidden, k], 0.01, rng);
        let fc2_b = store.zeros(format!("{prefix}.fc2.bias"), &[k]);
        Self { k, fc1_w, fc1_b, fc2_w, fc2_b }
    }

    pub fn hidden_width(&self, store: &ParamStore) -> usize {
        store.get(self.fc1_b).len()
    }

    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.fc2_w, self.fc2_b)
    }

    /// Per-layer descriptors, `[1, k]`.
    pub fn squeeze_graph(&self, g: &mut Graph, topk: &[Var]) -> Var {
        let means: Vec<Var> = topk.iter().map(|&l| g.mean_all(l)).collect();
        if means.len() == 1 {
            means[0]
        } else {
            g.concat_cols(&means)
        }
    }

    pub fn forward(&self, g: &mut Graph, topk: &[Var]) -> Result<(Var, Var)> {
        let dim = g.shape(topk[0])[1];
        check_stack(g, topk, self.k, dim)?;
        let d = self.squeeze_graph(g, topk);
        let h = g.linear(d, self.fc1_w, self.fc1_b);
        let h = g.relu(h);
        let logits = g.linear(h, self.fc2_w, self.fc2_b);
        let w = g.softmax_rows(logits);
        Ok((g.weighted_sum(w, topk), w))
    }

    pub fn fuse(&self, store: &ParamStore, topk: &LayerStack) -> Result<(TokenGrid, FusionWeights)> {
        let mut g = Graph::new(store);
        let vars = constants(&mut g, topk);
        let (out, w) = self.forward(&mut g, &vars)?;
        let weights = FusionWeights::new(g.value(w).data().to_vec())?;
        Ok((TokenGrid::new(g.value(out).clone(), topk.layers()[0].meta())?, weights))
    }

    /// Squeeze descriptors of a value-level stack.
    pub fn descriptors(stack: &LayerStack) -> Vec<f64> {
        stack
            .layers()
            .iter()
            .map(|l| l.tokens().data().iter().sum::<f64>() / l.tokens().len() as f64)
            .collect()
    }
}

/// A configured fusion module.
#[derive(Clone, Debug)]
pub enum Fusion {
    Concat(ConcatFusion),
    CnnGate(CnnGate),
    SeGate(SeGate),
}

impl Fusion {
    pub fn new<R: Rng + ?Sized>(cfg: &FusionConfig, dim: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        match cfg.mode {
            FusionMode::Concat => Fusion::Concat(ConcatFusion::new(cfg.k, dim, store, prefix)),
            FusionMode::CnnGate => Fusion::CnnGate(CnnGate::new(cfg.k, cfg.cnn_channels, store, prefix, rng)),
            FusionMode::SeGate => Fusion::SeGate(SeGate::new(cfg.k, cfg.se_reduction, store, prefix, rng)),
        }
    }

    pub fn mode(&self) -> FusionMode {
        match self {
            Fusion::Concat(_) => FusionMode::Concat,
            Fusion::CnnGate(_) => FusionMode::CnnGate,
            Fusion::SeGate(_) => FusionMode::SeGate,
        }
    }

    /// Fused `[T, D]` tokens and, for gated modes, the `[1, k]` weights.
    /// `grid` is `(H, frames used by the grid)` for the mel-shape check.
    pub fn forward(&self, g: &mut Graph, topk: &[Var], mel: &MelSpec, grid: (usize, usize)) -> Result<(Var, Option<Var>)> {
        match self {
            Fusion::Concat(f) => Ok((f.forward(g, topk)?, None)),
            Fusion::CnnGate(f) => f.forward(g, topk, mel, grid).map(|(o, w)| (o, Some(w))),
            Fusion::SeGate(f) => f.forward(g, topk).map(|(o, w)| (o, Some(w))),
        }
    }
}

fn constants(g: &mut Graph, stack: &LayerStack) -> Vec<Var> {
    stack.layers().iter().map(|l| g.constant(l.tokens().clone())).collect()
}

fn check_stack(g: &Graph, topk: &[Var], k: usize, dim: usize) -> Result<()> {
    if topk.len() != k {
        return Err(Error::Shape(format!("fusion expects {k} layers, got {}", topk.len())));
    }
    let shape = g.shape(topk[0]).to_vec();
    if shape.len() != 2 || shape[1] != dim || topk.iter().any(|&v| g.shape(v) != shape.as_slice()) {
        return Err(Error::Shape("fusion layers must share one [T, D] shape".into()));
    }
    Ok(())
}

/// The gate must see the spectrogram the encoder saw: same mel height and
/// enough frames to produce the same patch grid.
fn check_mel_matches(mel: &MelSpec, (h, frames_used): (usize, usize)) -> Result<()> {
    if !mel.n_mels().is_multiple_of(h) || mel.frames() < frames_used || mel.frames() >= frames_used + mel.n_mels() / h {
        return Err(Error::Shape(format!(
            "gate spectrogram {}x{} does not match the encoder input grid",
            mel.frames(),
            mel.n_mels()
        )));
    }
    Ok(())
}
