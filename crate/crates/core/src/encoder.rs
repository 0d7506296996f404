//! Patch tokenizer and transformer stack.
//!
//! A log-mel spectrogram is viewed as a (frequency x time) image and cut into
//! `patch_size x patch_size` blocks. Block `(i, j)` covers mel bins
//! `[p*i, p*i + p)` and frames `[p*j, p*j + p)`; it is flattened row-major
//! over (frequency, time) and becomes token `t = i * W + j`. Every module
//! downstream relies on this frequency-major token order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::MelSpec;
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGridMeta {
    /// Patches along frequency.
    pub h: usize,
    /// Patches along time.
    pub w: usize,
    pub patch_size: usize,
}

impl PatchGridMeta {
    /// Grid for a `frames x n_mels` spectrogram; trailing frames that do not
    /// fill a patch are dropped.
    pub fn for_input(n_mels: usize, frames: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 {
            return Err(Error::InvalidInput("patch size must be positive".into()));
        }
        if !n_mels.is_multiple_of(patch_size) || n_mels == 0 {
            return Err(Error::InvalidInput(format!(
                "n_mels = {n_mels} is not a positive multiple of the patch size {patch_size}"
            )));
        }
        if frames < patch_size {
            return Err(Error::InvalidInput(format!(
                "{frames} frames is fewer than one {patch_size}-frame patch"
            )));
        }
        Ok(Self { h: n_mels / patch_size, w: frames / patch_size, patch_size })
    }

    pub fn n_tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn token_index(&self, i: usize, j: usize) -> usize {
        i * self.w + j
    }
}

/// `H x W x D` patch tokens stored as an `[H*W, D]` matrix in
/// frequency-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    tokens: Tensor,
    meta: PatchGridMeta,
}

impl TokenGrid {
    pub fn new(tokens: Tensor, meta: PatchGridMeta) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != meta.n_tokens() {
            return Err(Error::Shape(format!(
                "token matrix {:?} does not match a {}x{} grid",
                tokens.shape(),
                meta.h,
                meta.w
            )));
        }
        if meta.n_tokens() == 0 {
            return Err(Error::Shape("token grid is empty".into()));
        }
        if !tokens.is_finite() {
            return Err(Error::InvalidInput("token grid contains non-finite values".into()));
        }
        Ok(Self { tokens, meta })
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }

    pub fn meta(&self) -> PatchGridMeta {
        self.meta
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// `(H, W, D)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.meta.h, self.meta.w, self.dim())
    }

    pub fn token(&self, i: usize, j: usize) -> &[f64] {
        let d = self.dim();
        let t = self.meta.token_index(i, j);
        &self.tokens.data()[t * d..(t + 1) * d]
    }
}

/// Per-layer encoder outputs, first block first.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack {
    layers: Vec<TokenGrid>,
}

impl LayerStack {
    pub fn new(layers: Vec<TokenGrid>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::Shape("layer stack is empty".into()))?;
        let shape = first.shape();
        if let Some(bad) = layers.iter().position(|l| l.shape() != shape) {
            return Err(Error::Shape(format!(
                "layer {} has shape {:?}, expected {:?}",
                bad + 1,
                layers[bad].shape(),
                shape
            )));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[TokenGrid] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn last(&self) -> &TokenGrid {
        self.layers.last().expect("non-empty by construction")
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.layers[0].shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_size: usize,
    /// Mel bins of the input spectrogram.
    pub n_mels: usize,
    /// Frames of the input spectrogram; fixes the positional table.
    pub frames: usize,
}

impl EncoderConfig {
    /// 12 layers, 64-wide tokens: trains on a laptop CPU.
    pub fn desk(n_mels: usize, frames: usize) -> Self {
        Self { depth: 12, dim: 64, heads: 4, mlp_ratio: 4.0, patch_size: 16, n_mels, frames }
    }

    /// 12 layers, 768-wide tokens, 12 heads.
    pub fn paper_scale(n_mels: usize, frames: usize) -> Self {
        Self { depth: 12, dim: 768, heads: 12, mlp_ratio: 4.0, patch_size: 16, n_mels, frames }
    }

    pub fn grid(&self) -> Result<PatchGridMeta> {
        PatchGridMeta::for_input(self.n_mels, self.frames, self.patch_size)
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round().max(1.0) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config(&["encoder.depth"], "depth must be at least 1"));
        }
        if self.dim < 2 {
            return Err(Error::config(&["encoder.dim"], "token width must be at least 2"));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                &["encoder.dim", "encoder.heads"],
                format!("encoder.dim = {} is not divisible by encoder.heads = {}", self.dim, self.heads),
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config(&["encoder.mlp_ratio"], "mlp ratio must be positive"));
        }
        self.grid().map_err(|e| Error::config(&["encoder.patch_size", "frontend.n_mels"], e.to_string()))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

const LN_EPS: f64 = 1e-5;

/// Patch embedding plus `depth` pre-norm transformer blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    meta: PatchGridMeta,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
}

impl Encoder {
    /// Registers parameters under `prefix`: weights ~ N(0, 0.02²),
    /// positions ~ N(0, 0.01²), zero biases, unit layer-norm gains.
    pub fn new<R: Rng + ?Sized>(config: &EncoderConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let meta = config.grid()?;
        let (d, p2, hid) = (config.dim, config.patch_size * config.patch_size, config.hidden_dim());
        let patch_w = store.normal(format!("{prefix}.patch_embed.weight"), &[p2, d], 0.02, rng);
        let patch_b = store.zeros(format!("{prefix}.patch_embed.bias"), &[d]);
        let pos = store.normal(format!("{prefix}.pos_embed"), &[meta.n_tokens(), d], 0.01, rng);
        let blocks = (0..config.depth)
            .map(|l| {
                let n = |s: &str| format!("{prefix}.blocks.{l}.{s}");
                Block {
                    ln1_g: store.full(n("ln1.gamma"), &[d], 1.0),
                    ln1_b: store.zeros(n("ln1.beta"), &[d]),
                    qkv_w: store.normal(n("attn.qkv.weight"), &[d, 3 * d], 0.02, rng),
                    qkv_b: store.zeros(n("attn.qkv.bias"), &[3 * d]),
                    proj_w: store.normal(n("attn.proj.weight"), &[d, d], 0.02, rng),
                    proj_b: store.zeros(n("attn.proj.bias"), &[d]),
                    ln2_g: store.full(n("ln2.gamma"), &[d], 1.0),
                    ln2_b: store.zeros(n("ln2.beta"), &[d]),
                    fc1_w: store.normal(n("mlp.fc1.weight"), &[d, hid], 0.02, rng),
                    fc1_b: store.zeros(n("mlp.fc1.bias"), &[hid]),
                    fc2_w: store.normal(n("mlp.fc2.weight"), &[hid, d], 0.02, rng),
                    fc2_b: store.zeros(n("mlp.fc2.bias"), &[d]),
                }
            })
            .collect();
        Ok(Self { config: config.clone(), meta, patch_w, patch_b, pos, blocks })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn meta(&self) -> PatchGridMeta {
        self.meta
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn patch_embedding(&self) -> (ParamId, ParamId) {
        (self.patch_w, self.patch_b)
    }

    pub fn positional_embedding(&self) -> ParamId {
        self.pos
    }

    /// Output projections of every attention and MLP sub-block; zeroing
    /// them reduces each block to the identity.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| [b.proj_w, b.proj_b, b.fc2_w, b.fc2_b]).collect()
    }

    fn check_grid(&self, meta: PatchGridMeta) -> Result<()> {
        if meta != self.meta {
            return Err(Error::Shape(format!(
                "input grid {}x{} does not match the encoder's {}x{} positional table",
                meta.h, meta.w, self.meta.h, self.meta.w
            )));
        }
        Ok(())
    }

    /// Embedded tokens `[H*W, D]` on the tape.
    pub fn embed_graph(&self, g: &mut Graph, mel: &MelSpec) -> Result<Var> {
        let (patches, meta) = extract_patches(mel, self.config.patch_size)?;
        self.check_grid(meta)?;
        let x = g.constant(patches);
        let x = g.linear(x, self.patch_w, self.patch_b);
        let pos = g.param(self.pos);
        Ok(g.add(x, pos))
    }

    /// Runs every block; returns each block's output in order.
    pub fn blocks_graph(&self, g: &mut Graph, x: Var) -> Result<Vec<Var>> {
        let d = self.config.dim;
        if g.shape(x) != [self.meta.n_tokens(), d] {
            return Err(Error::Shape(format!(
                "encoder expects [{}, {d}] tokens, got {:?}",
                self.meta.n_tokens(),
                g.shape(x)
            )));
        }
        let heads = self.config.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = x;
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h = g.layer_norm(x, b.ln1_g, b.ln1_b, LN_EPS);
            let qkv = g.linear(h, b.qkv_w, b.qkv_b);
            let per_head: Vec<Var> = (0..heads)
                .map(|hd| {
                    let q = g.slice_cols(qkv, hd * dh, dh);
                    let k = g.slice_cols(qkv, d + hd * dh, dh);
                    let v = g.slice_cols(qkv, 2 * d + hd * dh, dh);
                    let s = g.matmul_nt(q, k);
                    let s = g.scale(s, scale);
                    let a = g.softmax_rows(s);
                    g.matmul(a, v)
                })
                .collect();
            let o = if heads == 1 { per_head[0] } else { g.concat_cols(&per_head) };
            let o = g.linear(o, b.proj_w, b.proj_b);
            x = g.add(x, o);
            let h = g.layer_norm(x, b.ln2_g, b.ln2_b, LN_EPS);
            let h = g.linear(h, b.fc1_w, b.fc1_b);
            let h = g.gelu(h);
            let h = g.linear(h, b.fc2_w, b.fc2_b);
            x = g.add(x, h);
            outputs.push(x);
        }
        Ok(outputs)
    }

    /// Embeds a spectrogram into a token grid.
    pub fn patchify(&self, store: &ParamStore, mel: &MelSpec) -> Result<TokenGrid> {
        let mut g = Graph::new(store);
        let x = self.embed_graph(&mut g, mel)?;
        TokenGrid::new(g.value(x).clone(), self.meta)
    }

    /// Runs the transformer over an embedded grid.
    pub fn encode(&self, store: &ParamStore, grid: &TokenGrid) -> Result<LayerStack> {
        if grid.dim() != self.config.dim {
            return Err(Error::Shape(format!("grid width {} != encoder width {}", grid.dim(), self.config.dim)));
        }
        self.check_grid(grid.meta())?;
        let mut g = Graph::new(store);
        let x = g.constant(grid.tokens().clone());
        let outs = self.blocks_graph(&mut g, x)?;
        let layers = outs
            .into_iter()
            .map(|v| TokenGrid::new(g.value(v).clone(), self.meta))
            .collect::<Result<Vec<_>>>()?;
        LayerStack::new(layers)
    }
}

/// Cuts the spectrogram into flattened patches, `[H*W, p*p]`, dropping
/// trailing frames that do not fill a patch.
pub fn extract_patches(mel: &MelSpec, patch_size: usize) -> Result<(Tensor, PatchGridMeta)> {
    let meta = PatchGridMeta::for_input(mel.n_mels(), mel.frames(), patch_size)?;
    let p = patch_size;
    let mut data = Vec::with_capacity(meta.n_tokens() * p * p);
    for i in 0..meta.h {
        for j in 0..meta.w {
            for df in 0..p {
                for dt in 0..p {
                    data.push(mel.get(j * p + dt, i * p + df));
                }
            }
        }
    }
    Ok((Tensor::new(&[meta.n_tokens(), p * p], data), meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::MelConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mel(frames: usize, n_mels: usize, seed: u64) -> MelSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = MelConfig { n_mels, ..MelConfig::default() };
        let v = (0..frames * n_mels).map(|_| rng.gen_range(-10.0..10.0)).collect();
        MelSpec::new(frames, n_mels, v, cfg).unwrap()
    }

    fn small_config() -> EncoderConfig {
        EncoderConfig { depth: 3, dim: 16, heads: 2, mlp_ratio: 2.0, patch_size: 16, n_mels: 32, frames: 50 }
    }

    #[test]
    fn four_second_grid_is_8_by_24() {
        let meta = PatchGridMeta::for_input(128, 398, 16).unwrap();
        assert_eq!((meta.h, meta.w), (8, 24));
        assert_eq!(398 - 16 * meta.w, 14);
        assert!(PatchGridMeta::for_input(120, 398, 16).is_err());
        assert!(PatchGridMeta::for_input(128, 15, 16).is_err());
    }

    fn identity_encoder(frames: usize, n_mels: usize) -> (Encoder, ParamStore) {
        let cfg = EncoderConfig { depth: 1, dim: 256, heads: 4, mlp_ratio: 1.0, patch_size: 16, n_mels, frames };
        let mut store = ParamStore::new();
        let enc = Encoder::new(&cfg, &mut store, "encoder", &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (w, _) = enc.patch_embedding();
        let mut eye = Tensor::zeros(&[256, 256]);
        (0..256).for_each(|i| eye.data_mut()[i * 256 + i] = 1.0);
        store.set(w, eye);
        store.set(enc.positional_embedding(), Tensor::zeros(&[enc.meta().n_tokens(), 256]));
        (enc, store)
    }

    #[test]
    fn constant_input_gives_identical_tokens_before_positions() {
        let cfg = MelConfig::default();
        let mel = MelSpec::floor(398, &cfg);
        let (patches, meta) = extract_patches(&mel, 16).unwrap();
        let first = &patches.data()[..256];
        for t in 0..meta.n_tokens() {
            assert_eq!(&patches.data()[t * 256..(t + 1) * 256], first);
        }
    }

    #[test]
    fn mismatched_grid_is_rejected() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&small_config(), &mut store, "e", &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(matches!(enc.patchify(&store, &random_mel(80, 32, 0)), Err(Error::Shape(_))));
        let grid = TokenGrid::new(Tensor::zeros(&[6, 8]), enc.meta()).unwrap();
        assert!(matches!(enc.encode(&store, &grid), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_residual_outputs_make_every_layer_the_input() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&small_config(), &mut store, "e", &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for id in enc.residual_output_params() {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::zeros(&shape));
        }
        let grid = enc.patchify(&store, &random_mel(50, 32, 3)).unwrap();
        let stack = enc.encode(&store, &grid).unwrap();
        assert_eq!(stack.len(), 3);
        for layer in stack.layers() {
            assert_eq!(layer, &grid);
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(&small_config(), &mut store, "e", &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let grid = enc.patchify(&store, &random_mel(50, 32, 5)).unwrap();
        let n = grid.meta().n_tokens();
        let perm: Vec<usize> = (0..n).rev().collect();
        let d = grid.dim();
        let permute = |t: &Tensor| {
            let data = perm.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect();
            Tensor::new(&[n, d], data)
        };
        let base = enc.encode(&store, &grid).unwrap();
        let permuted = enc.encode(&store, &TokenGrid::new(permute(grid.tokens()), grid.meta()).unwrap()).unwrap();
        for (a, b) in base.layers().iter().zip(permuted.layers()) {
            assert!(permute(a.tokens()).max_abs_diff(b.tokens()) < 1e-5);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn identity_embedding_partitions_the_spectrogram(seed in 0u64..10_000, w in 1usize..4, h in 1usize..3, extra in 0usize..16) {
            let frames = 16 * w + extra;
            let n_mels = 16 * h;
            let mel = random_mel(frames, n_mels, seed);
            let (enc, store) = identity_encoder(frames, n_mels);
            let grid = enc.patchify(&store, &mel).unwrap();
            prop_assert_eq!(grid.shape(), (h, w, 256));
            for i in 0..h {
                for j in 0..w {
                    let tok = grid.token(i, j);
                    for df in 0..16 {
                        for dt in 0..16 {
                            prop_assert_eq!(tok[df * 16 + dt], mel.get(16 * j + dt, 16 * i + df));
                        }
                    }
                }
            }
        }

        #[test]
        fn outputs_stay_finite(seed in 0u64..10_000) {
            let mut store = ParamStore::new();
            let enc = Encoder::new(&small_config(), &mut store, "e", &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let grid = enc.patchify(&store, &random_mel(50, 32, seed + 1)).unwrap();
            let stack = enc.encode(&store, &grid).unwrap();
            prop_assert!(stack.layers().iter().all(|l| l.tokens().is_finite()));
        }
    }
}
