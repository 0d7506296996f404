//! Dual-branch back-end: split the fused grid along frequency or channels,
//! run an independent graph-attention branch on each half, classify the
//! concatenated branch embeddings.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::encoder::{PatchGridMeta, TokenGrid};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    Frequency,
    Channel,
    /// Single branch over the unsplit grid.
    None,
}

impl SplitMode {
    pub const ALL: [SplitMode; 3] = [SplitMode::Frequency, SplitMode::Channel, SplitMode::None];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Frequency => "frequency",
            SplitMode::Channel => "channel",
            SplitMode::None => "none",
        }
    }

    pub fn n_branches(self) -> usize {
        match self {
            SplitMode::None => 1,
            _ => 2,
        }
    }

    /// Token width seen by each branch.
    pub fn branch_input_dim(self, dim: usize) -> usize {
        match self {
            SplitMode::Channel => dim / 2,
            _ => dim,
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SplitMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::config(&["split.mode"], format!("unknown split mode {s:?} (frequency, channel, none)")))
    }
}

/// Rows `0..H/2` (low mel bins) and `H/2..H`, each an `(H/2) x W` grid.
pub fn split_frequency(g: &TokenGrid) -> Result<(TokenGrid, TokenGrid)> {
    let meta = g.meta();
    if !meta.h.is_multiple_of(2) {
        return Err(Error::Shape(format!("frequency split needs an even patch height, got H = {}", meta.h)));
    }
    let half = PatchGridMeta { h: meta.h / 2, ..meta };
    let d = g.dim();
    let cut = half.n_tokens() * d;
    let data = g.tokens().data();
    let low = Tensor::new(&[half.n_tokens(), d], data[..cut].to_vec());
    let high = Tensor::new(&[half.n_tokens(), d], data[cut..].to_vec());
    Ok((TokenGrid::new(low, half)?, TokenGrid::new(high, half)?))
}

/// Channels `0..D/2` and `D/2..D`, both keeping the `H x W` grid.
pub fn split_channel(g: &TokenGrid) -> Result<(TokenGrid, TokenGrid)> {
    let d = g.dim();
    if !d.is_multiple_of(2) {
        return Err(Error::Shape(format!("channel split needs an even width, got D = {d}")));
    }
    let (mut a, mut b) = (Vec::with_capacity(g.tokens().len() / 2), Vec::with_capacity(g.tokens().len() / 2));
    for row in g.tokens().data().chunks(d) {
        a.extend_from_slice(&row[..d / 2]);
        b.extend_from_slice(&row[d / 2..]);
    }
    let n = g.meta().n_tokens();
    Ok((
        TokenGrid::new(Tensor::new(&[n, d / 2], a), g.meta())?,
        TokenGrid::new(Tensor::new(&[n, d / 2], b), g.meta())?,
    ))
}

/// Graph version of the split; returns one var per branch.
pub fn split_graph(g: &mut Graph, fused: Var, meta: PatchGridMeta, mode: SplitMode) -> Result<Vec<Var>> {
    let d = g.shape(fused)[1];
    match mode {
        SplitMode::None => Ok(vec![fused]),
        SplitMode::Frequency => {
            if !meta.h.is_multiple_of(2) {
                return Err(Error::Shape(format!("frequency split needs an even patch height, got H = {}", meta.h)));
            }
            let half = meta.n_tokens() / 2;
            let low: Vec<usize> = (0..half).collect();
            let high: Vec<usize> = (half..meta.n_tokens()).collect();
            Ok(vec![g.select_rows(fused, &low), g.select_rows(fused, &high)])
        }
        SplitMode::Channel => {
            if !d.is_multiple_of(2) {
                return Err(Error::Shape(format!("channel split needs an even width, got D = {d}")));
            }
            Ok(vec![g.slice_cols(fused, 0, d / 2), g.slice_cols(fused, d / 2, d / 2)])
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BranchConfig {
    /// Branch width E.
    pub dim: usize,
    /// Graph-attention layers G.
    pub layers: usize,
}

impl Default for BranchConfig {
    fn default() -> Self {
        Self { dim: 32, layers: 2 }
    }
}

impl BranchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config(&["branch.dim"], "branch width must be at least 2"));
        }
        if self.layers == 0 {
            return Err(Error::config(&["branch.layers"], "need at least one graph-attention layer"));
        }
        Ok(())
    }

    /// Width of the max+mean readout.
    pub fn readout_dim(&self) -> usize {
        2 * self.dim
    }
}

#[derive(Clone, Debug)]
struct GraphAttention {
    q_w: ParamId,
    k_w: ParamId,
    v_w: ParamId,
    o_w: ParamId,
    o_b: ParamId,
}

/// Tokens are nodes of a fully connected graph. Each layer updates
/// `h <- h + gelu(softmax(q k^T / sqrt(E)) v W_o + b_o)`; the readout
/// concatenates max- and mean-pooling over nodes.
#[derive(Clone, Debug)]
pub struct Branch {
    input_dim: usize,
    config: BranchConfig,
    in_w: ParamId,
    in_b: ParamId,
    layers: Vec<GraphAttention>,
}

impl Branch {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, config: BranchConfig, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let e = config.dim;
        let in_std = (1.0 / input_dim as f64).sqrt();
        let std = (1.0 / e as f64).sqrt();
        let in_w = store.normal(format!("{prefix}.in_proj.weight"), &[input_dim, e], in_std, rng);
        let in_b = store.zeros(format!("{prefix}.in_proj.bias"), &[e]);
        let layers = (0..config.layers)
            .map(|l| GraphAttention {
                q_w: store.normal(format!("{prefix}.gat.{l}.query"), &[e, e], std, rng),
                k_w: store.normal(format!("{prefix}.gat.{l}.key"), &[e, e], std, rng),
                v_w: store.normal(format!("{prefix}.gat.{l}.value"), &[e, e], std, rng),
                o_w: store.normal(format!("{prefix}.gat.{l}.out.weight"), &[e, e], std, rng),
                o_b: store.zeros(format!("{prefix}.gat.{l}.out.bias"), &[e]),
            })
            .collect();
        Self { input_dim, config, in_w, in_b, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn readout_dim(&self) -> usize {
        self.config.readout_dim()
    }

    /// `[1, 2E]` embedding of a `[T, input_dim]` token matrix.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x)[1] != self.input_dim {
            return Err(Error::Shape(format!("branch expects width {}, got {:?}", self.input_dim, g.shape(x))));
        }
        let scale = 1.0 / (self.config.dim as f64).sqrt();
        let mut h = g.linear(x, self.in_w, self.in_b);
        for layer in &self.layers {
            let (qw, kw, vw) = (g.param(layer.q_w), g.param(layer.k_w), g.param(layer.v_w));
            let q = g.matmul(h, qw);
            let k = g.matmul(h, kw);
            let v = g.matmul(h, vw);
            let s = g.matmul_nt(q, k);
            let s = g.scale(s, scale);
            let a = g.softmax_rows(s);
            let m = g.matmul(a, v);
            let m = g.linear(m, layer.o_w, layer.o_b);
            let m = g.gelu(m);
            h = g.add(h, m);
        }
        let mx = g.max_rows(h);
        let mean = g.mean_rows(h);
        Ok(g.concat_cols(&[mx, mean]))
    }

    pub fn embed(&self, store: &ParamStore, grid: &TokenGrid) -> Result<Vec<f64>> {
        let mut g = Graph::new(store);
        let x = g.constant(grid.tokens().clone());
        let e = self.forward(&mut g, x)?;
        Ok(g.value(e).data().to_vec())
    }
}

/// Class logits in (fake, real) order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Logits {
    pub fake: f64,
    pub real: f64,
}

impl Logits {
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        match v {
            [fake, real] if fake.is_finite() && real.is_finite() => Ok(Self { fake: *fake, real: *real }),
            _ => Err(Error::InvalidInput(format!("expected two finite logits, got {v:?}"))),
        }
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.fake, self.real]
    }
}

/// Detection score: `real - fake`; higher means more bona fide.
pub fn score(l: &Logits) -> f64 {
    l.real - l.fake
}

/// Linear map from the concatenated branch embeddings to two logits.
#[derive(Clone, Debug)]
pub struct Head {
    input_dim: usize,
    w: ParamId,
    b: ParamId,
}

impl Head {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, store: &mut ParamStore, prefix: &str, rng: &mut R) -> Self {
        let w = store.normal(format!("{prefix}.weight"), &[input_dim, 2], (1.0 / input_dim as f64).sqrt(), rng);
        let b = store.zeros(format!("{prefix}.bias"), &[2]);
        Self { input_dim, w, b }
    }

    pub fn params(&self) -> (ParamId, ParamId) {
        (self.w, self.b)
    }

    pub fn forward(&self, g: &mut Graph, embeddings: &[Var]) -> Result<Var> {
        let x = if embeddings.len() == 1 { embeddings[0] } else { g.concat_cols(embeddings) };
        if g.shape(x)[1] != self.input_dim {
            return Err(Error::Shape(format!("head expects width {}, got {:?}", self.input_dim, g.shape(x))));
        }
        Ok(g.linear(x, self.w, self.b))
    }

    /// Logits for the embeddings of one input's branches.
    pub fn classify(&self, store: &ParamStore, embeddings: &[&[f64]]) -> Result<Logits> {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = embeddings.iter().map(|e| g.constant(Tensor::row(e.to_vec()))).collect();
        let out = self.forward(&mut g, &vars)?;
        Logits::from_slice(g.value(out).data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid(h: usize, w: usize, d: usize, seed: u64) -> TokenGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let meta = PatchGridMeta { h, w, patch_size: 16 };
        let data = (0..h * w * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        TokenGrid::new(Tensor::new(&[h * w, d], data), meta).unwrap()
    }

    #[test]
    fn paper_shapes() {
        let g = grid(8, 24, 768, 0);
        let (lo, hi) = split_frequency(&g).unwrap();
        assert_eq!(lo.shape(), (4, 24, 768));
        assert_eq!(hi.shape(), (4, 24, 768));
        let (a, b) = split_channel(&g).unwrap();
        assert_eq!(a.shape(), (8, 24, 384));
        assert_eq!(b.shape(), (8, 24, 384));
    }

    #[test]
    fn minimal_splits() {
        let g = grid(2, 1, 3, 1);
        let (lo, hi) = split_frequency(&g).unwrap();
        assert_eq!(lo.token(0, 0), g.token(0, 0));
        assert_eq!(hi.token(0, 0), g.token(1, 0));
        let g2 = grid(1, 1, 2, 2);
        let (a, b) = split_channel(&g2).unwrap();
        assert_eq!(a.tokens().data(), &g2.tokens().data()[..1]);
        assert_eq!(b.tokens().data(), &g2.tokens().data()[1..]);
        assert!(split_frequency(&grid(3, 2, 2, 0)).is_err());
        assert!(split_channel(&grid(2, 2, 3, 0)).is_err());
    }

    #[test]
    fn graph_split_matches_value_split() {
        let fused = grid(4, 3, 6, 3);
        let store = ParamStore::new();
        for (mode, f) in [(SplitMode::Frequency, split_frequency as fn(&TokenGrid) -> Result<_>), (SplitMode::Channel, split_channel)] {
            let mut g = Graph::new(&store);
            let x = g.constant(fused.tokens().clone());
            let parts = split_graph(&mut g, x, fused.meta(), mode).unwrap();
            let (a, b) = f(&fused).unwrap();
            assert_eq!(g.value(parts[0]), a.tokens());
            assert_eq!(g.value(parts[1]), b.tokens());
        }
    }

    #[test]
    fn single_token_readout_duplicates_features() {
        let mut store = ParamStore::new();
        let br = Branch::new(4, BranchConfig { dim: 6, layers: 2 }, &mut store, "b", &mut ChaCha8Rng::seed_from_u64(0));
        let e = br.embed(&store, &grid(1, 1, 4, 4)).unwrap();
        assert_eq!(e.len(), 12);
        assert_eq!(e[..6], e[6..]);
    }

    #[test]
    fn zero_grid_gives_zero_embedding() {
        let mut store = ParamStore::new();
        let br = Branch::new(4, BranchConfig::default(), &mut store, "b", &mut ChaCha8Rng::seed_from_u64(1));
        let meta = PatchGridMeta { h: 2, w: 3, patch_size: 16 };
        let zero = TokenGrid::new(Tensor::zeros(&[6, 4]), meta).unwrap();
        assert!(br.embed(&store, &zero).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_linear_checks() {
        let mut store = ParamStore::new();
        let head = Head::new(4, &mut store, "head", &mut ChaCha8Rng::seed_from_u64(2));
        let (w, b) = head.params();
        store.set(w, Tensor::zeros(&[4, 2]));
        let l = head.classify(&store, &[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(l, Logits { fake: 0.0, real: 0.0 });
        let mut sel = Tensor::zeros(&[4, 2]);
        sel.data_mut()[0] = 1.0; // coordinate 0 -> fake
        sel.data_mut()[3] = 1.0; // coordinate 1 -> real
        store.set(w, sel);
        store.set(b, Tensor::zeros(&[2]));
        let l = head.classify(&store, &[&[1.5, -2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(l, Logits { fake: 1.5, real: -2.0 });
        assert!(head.classify(&store, &[&[1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn score_is_logit_difference() {
        assert_eq!(score(&Logits { fake: 0.0, real: 0.0 }), 0.0);
        assert_eq!(score(&Logits { fake: -1.0, real: 3.0 }), 4.0);
        assert_eq!(score(&Logits { fake: 9.0, real: 13.0 }), 4.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn readout_ignores_token_order(seed in 0u64..100_000) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let br = Branch::new(5, BranchConfig { dim: 8, layers: 2 }, &mut store, "b", &mut rng);
            let g = grid(3, 4, 5, seed + 1);
            let mut order: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                order.swap(i, rng.gen_range(0..=i));
            }
            let data = order.iter().flat_map(|&r| g.tokens().data()[r * 5..(r + 1) * 5].to_vec()).collect();
            let shuffled = TokenGrid::new(Tensor::new(&[12, 5], data), g.meta()).unwrap();
            let a = br.embed(&store, &g).unwrap();
            let b = br.embed(&store, &shuffled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-5);
            }
        }

        #[test]
        fn swapping_branches_with_permuted_head_keeps_logits(seed in 0u64..100_000) {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let head = Head::new(6, &mut store, "head", &mut rng);
            let (w, _) = head.params();
            let e1: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let e2: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let before = head.classify(&store, &[&e1, &e2]).unwrap();
            let wv = store.get(w).data().to_vec();
            let swapped: Vec<f64> = wv[6..].iter().chain(&wv[..6]).copied().collect();
            store.set(w, Tensor::new(&[6, 2], swapped));
            let after = head.classify(&store, &[&e2, &e1]).unwrap();
            prop_assert!((before.fake - after.fake).abs() < 1e-12);
            prop_assert!((before.real - after.real).abs() < 1e-12);
        }

        #[test]
        fn splits_are_exact_partitions(seed in 0u64..100_000, h in 1usize..5, w in 1usize..5, d in 1usize..6) {
            let g = grid(2 * h, w, 2 * d, seed);
            let (lo, hi) = split_frequency(&g).unwrap();
            let mut joined = lo.tokens().data().to_vec();
            joined.extend_from_slice(hi.tokens().data());
            prop_assert_eq!(joined.as_slice(), g.tokens().data());
            let (a, b) = split_channel(&g).unwrap();
            let joined: Vec<f64> = a.tokens().data().chunks(d).zip(b.tokens().data().chunks(d))
                .flat_map(|(x, y)| x.iter().chain(y).copied().collect::<Vec<_>>()).collect();
            prop_assert_eq!(joined.as_slice(), g.tokens().data());
        }
    }
}
