//! The full detector: encoder -> top-k fusion -> split -> branches -> head.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::branch::{split_graph, Branch, BranchConfig, Head, Logits, SplitMode};
use crate::encoder::{Encoder, EncoderConfig, PatchGridMeta};
use crate::error::{Error, Result};
use crate::frontend::MelSpec;
use crate::fusion::{topk_vars, Fusion, FusionConfig};
use crate::label::Label;
use crate::nn::{load_checkpoint, save_checkpoint, Gradients, Graph, ParamStore, Var};
use crate::training::ClassWeights;

/// Fixed input scaling `(x - mean) / (2 std)` applied to log-mel values
/// before the encoder and the CNN gate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for InputNorm {
    fn default() -> Self {
        Self { mean: -12.0, std: 6.0 }
    }
}

impl InputNorm {
    pub fn identity() -> Self {
        Self { mean: 0.0, std: 0.5 }
    }

    pub fn apply(&self, mel: &MelSpec) -> Result<MelSpec> {
        let s = 0.5 / self.std;
        let values = mel.values().iter().map(|v| (v - self.mean) * s).collect();
        MelSpec::new(mel.frames(), mel.n_mels(), values, mel.config().clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_norm: InputNorm,
    pub encoder: EncoderConfig,
    pub fusion: FusionConfig,
    pub split: SplitMode,
    pub branch: BranchConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_norm.std > 0.0) || !self.input_norm.std.is_finite() || !self.input_norm.mean.is_finite() {
            return Err(Error::config(&["frontend.norm_mean", "frontend.norm_std"], "input normalization needs a finite mean and a positive std"));
        }
        self.encoder.validate()?;
        self.fusion.validate(self.encoder.depth)?;
        self.branch.validate()?;
        let grid = self.encoder.grid()?;
        match self.split {
            SplitMode::Frequency if grid.h % 2 != 0 => Err(Error::config(
                &["split.mode", "frontend.n_mels", "encoder.patch_size"],
                format!("frequency split needs an even patch height, got H = {}", grid.h),
            )),
            SplitMode::Channel if !self.encoder.dim.is_multiple_of(2) => Err(Error::config(
                &["split.mode", "encoder.dim"],
                format!("channel split needs an even encoder.dim, got {}", self.encoder.dim),
            )),
            _ => Ok(()),
        }
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub embedded: Var,
    pub layers: Vec<Var>,
    pub fused: Var,
    pub fusion_weights: Option<Var>,
    pub parts: Vec<Var>,
    pub embeddings: Vec<Var>,
    pub logits: Var,
}

/// Shapes and small values of one forward pass, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    /// `(frames, n_mels)`.
    pub mel_shape: (usize, usize),
    pub grid: PatchGridMeta,
    pub dim: usize,
    pub layer_count: usize,
    pub k: usize,
    /// `(H, W, D)` of the fused grid.
    pub fused_shape: (usize, usize, usize),
    /// `(H, W, D)` of each branch input.
    pub branch_inputs: Vec<(usize, usize, usize)>,
    pub embedding_dims: Vec<usize>,
    pub fusion_weights: Option<Vec<f64>>,
    pub logits: Logits,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    fusion: Fusion,
    branches: Vec<Branch>,
    head: Head,
}

impl Detector {
    /// Randomly initialized model; parameter names are prefixed `encoder.`,
    /// `fusion.`, `branch0.`/`branch1.` and `head.`.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&config.encoder, &mut store, "encoder", &mut rng)?;
        let dim = config.encoder.dim;
        let fusion = Fusion::new(&config.fusion, dim, &mut store, "fusion", &mut rng);
        let in_dim = config.split.branch_input_dim(dim);
        let branches: Vec<Branch> = (0..config.split.n_branches())
            .map(|i| Branch::new(in_dim, config.branch, &mut store, &format!("branch{i}"), &mut rng))
            .collect();
        let head_in = branches.iter().map(Branch::readout_dim).sum();
        let head = Head::new(head_in, &mut store, "head", &mut rng);
        Ok(Self { config: config.clone(), store, encoder, fusion, branches, head })
    }

    /// Builds the architecture for `config` and loads weights from a checkpoint.
    pub fn load(config: &ModelConfig, path: &Path) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        load_checkpoint(&mut model.store, path)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn fusion(&self) -> &Fusion {
        &self.fusion
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    /// Builds the forward pass on `g`; `mel` is the raw log-mel input.
    pub fn forward(&self, g: &mut Graph, mel: &MelSpec) -> Result<ForwardVars> {
        let mel = &self.config.input_norm.apply(mel)?;
        let meta = self.encoder.meta();
        let embedded = self.encoder.embed_graph(g, mel)?;
        let layers = self.encoder.blocks_graph(g, embedded)?;
        let topk = topk_vars(&layers, self.config.fusion.k)?.to_vec();
        let (fused, fusion_weights) = self.fusion.forward(g, &topk, mel, (meta.h, meta.w * meta.patch_size))?;
        let parts = split_graph(g, fused, meta, self.config.split)?;
        let embeddings = parts
            .iter()
            .zip(&self.branches)
            .map(|(&p, b)| b.forward(g, p))
            .collect::<Result<Vec<_>>>()?;
        let logits = self.head.forward(g, &embeddings)?;
        Ok(ForwardVars { embedded, layers, fused, fusion_weights, parts, embeddings, logits })
    }

    pub fn logits(&self, mel: &MelSpec) -> Result<Logits> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, mel)?;
        Logits::from_slice(g.value(out.logits).data())
    }

    pub fn score(&self, mel: &MelSpec) -> Result<f64> {
        self.logits(mel).map(|l| crate::branch::score(&l))
    }

    pub fn trace(&self, mel: &MelSpec) -> Result<ForwardTrace> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, mel)?;
        let meta = self.encoder.meta();
        let dim = self.config.encoder.dim;
        let branch_inputs = out
            .parts
            .iter()
            .map(|&p| {
                let s = g.shape(p);
                let h = s[0] / meta.w;
                (h, meta.w, s[1])
            })
            .collect();
        Ok(ForwardTrace {
            mel_shape: (mel.frames(), mel.n_mels()),
            grid: meta,
            dim,
            layer_count: out.layers.len(),
            k: self.config.fusion.k,
            fused_shape: (meta.h, meta.w, g.shape(out.fused)[1]),
            branch_inputs,
            embedding_dims: out.embeddings.iter().map(|&e| g.shape(e)[1]).collect(),
            fusion_weights: out.fusion_weights.map(|w| g.value(w).data().to_vec()),
            logits: Logits::from_slice(g.value(out.logits).data())?,
        })
    }

    /// Weighted cross-entropy of one utterance, multiplied by `scale`, and
    /// its parameter gradients.
    pub fn loss_and_gradients(&self, mel: &MelSpec, label: Label, weights: &ClassWeights, scale: f64) -> Result<(f64, Logits, Gradients)> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, mel)?;
        let logits = Logits::from_slice(g.value(out.logits).data())?;
        let ce = g.weighted_cross_entropy(out.logits, label.class_index(), weights.weight(label));
        let loss = g.scale(ce, scale);
        let value = g.value(loss).data()[0];
        Ok((value, logits, g.backward(loss)))
    }
}
