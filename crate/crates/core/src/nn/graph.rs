//! Reverse-mode automatic differentiation over a per-forward tape.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters are
//! pulled in lazily from a borrowed [`ParamStore`]; [`Graph::backward`]
//! walks the tape in reverse and returns gradients aligned with the store.
//! Most operations use the matrix view of a tensor (`rows x cols`).

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddRow { x: Var, bias: Var },
    Scale { x: Var, c: f64 },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    SoftmaxRows { x: Var },
    SliceCols { x: Var, start: usize },
    ConcatCols { xs: Vec<Var> },
    SelectRows { x: Var, rows: Vec<usize> },
    MeanRows { x: Var },
    MaxRows { x: Var, argmax: Vec<usize> },
    MeanAll { x: Var },
    SumAll { x: Var },
    WeightedSum { w: Var, xs: Vec<Var> },
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Reshape { x: Var },
    WeightedCe { logits: Var, target: usize, weight: f64, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Graph<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store, nodes: Vec::new(), param_vars: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = matches!(op, Op::Param(_)) || inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, &[])
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id), &[]);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `a [m,k] x b [k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a [m,k] x b^T` where `b` is `[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (bk, n) = if trans_b { (bv.cols(), bv.rows()) } else { (bv.rows(), bv.cols()) };
        assert_eq!(k, bk, "matmul inner dimension mismatch: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), trans_b, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out), Op::MatMul { a, b, trans_b }, &[a, b])
    }

    /// `x W + b` with `W` `[in, out]` and `b` `[out]`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Add { a, b }, &[a, b])
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = xv.cols();
        assert_eq!(bv.len(), n, "bias width mismatch");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::AddRow { x, bias }, &[x, bias])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Scale { x, c }, &[x])
    }

    /// Row-wise layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: ParamId, beta: ParamId, eps: f64) -> Var {
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let n = xv.cols();
        assert_eq!(gv.len(), n);
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(xv.rows());
        for ((row, o), h) in xv.data().chunks(n).zip(out.chunks_mut(n)).zip(xhat.chunks_mut(n)) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..n {
                h[j] = (row[j] - mean) * r;
                o[j] = h[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(&shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Gelu { x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v.max(0.0)).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::Relu { x }, &[x])
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(&shape, data), Op::SoftmaxRows { x }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        assert!(start + len <= n, "column slice out of range");
        let mut data = Vec::with_capacity(m * len);
        for row in xv.data().chunks(n) {
            data.extend_from_slice(&row[start..start + len]);
        }
        self.push(Tensor::new(&[m, len], data), Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let m = self.value(xs[0]).rows();
        let widths: Vec<usize> = xs
            .iter()
            .map(|&v| {
                assert_eq!(self.value(v).rows(), m, "concat_cols row mismatch");
                self.value(v).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&v, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(&[m, total], data), Op::ConcatCols { xs: xs.to_vec() }, xs)
    }

    /// Gathers rows of `x` in the given order (rows may repeat).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(&xv.data()[r * n..(r + 1) * n]);
        }
        self.push(
            Tensor::new(&[rows.len(), n], data),
            Op::SelectRows { x, rows: rows.to_vec() },
            &[x],
        )
    }

    /// Column means, `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (m, n) = (xv.rows(), xv.cols());
        let mut out = vec![0.0; n];
        for row in xv.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= m as f64);
        self.push(Tensor::row(out), Op::MeanRows { x }, &[x])
    }

    /// Column maxima, `[m,n] -> [1,n]`.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.cols();
        let mut out = vec![f64::NEG_INFINITY; n];
        let mut argmax = vec![0; n];
        for (r, row) in xv.data().chunks(n).enumerate() {
            for j in 0..n {
                if row[j] > out[j] {
                    out[j] = row[j];
                    argmax[j] = r;
                }
            }
        }
        self.push(Tensor::row(out), Op::MaxRows { x, argmax }, &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data().iter().sum::<f64>() / xv.len() as f64;
        self.push(Tensor::scalar(m), Op::MeanAll { x }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        self.push(Tensor::scalar(s), Op::SumAll { x }, &[x])
    }

    /// `sum_i w[i] * xs[i]` for a weight row `w` of length `xs.len()`.
    pub fn weighted_sum(&mut self, w: Var, xs: &[Var]) -> Var {
        let wv = self.value(w).data().to_vec();
        assert_eq!(wv.len(), xs.len(), "one weight per summand");
        let shape = self.value(xs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(xs[0]).len()];
        for (&wi, &x) in wv.iter().zip(xs) {
            let xv = self.value(x);
            assert_eq!(xv.shape(), shape.as_slice(), "weighted_sum shape mismatch");
            out.iter_mut().zip(xv.data()).for_each(|(o, v)| *o += wi * v);
        }
        let mut inputs = vec![w];
        inputs.extend_from_slice(xs);
        self.push(Tensor::new(&shape, out), Op::WeightedSum { w, xs: xs.to_vec() }, &inputs)
    }

    /// 2-D convolution of a `[c_in, h, w]` image with `[c_out, c_in, kh, kw]`
    /// kernels, zero padding `pad` on every side.
    pub fn conv2d(&mut self, x: Var, w: ParamId, b: ParamId, stride: usize, pad: usize) -> Var {
        let w = self.param(w);
        let b = self.param(b);
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let [cin, h, wd] = dims3(xv.shape());
        let [cout, wcin, kh, kw] = dims4(wv.shape());
        assert_eq!(cin, wcin, "conv2d channel mismatch");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; cout * ho * wo];
        let (xd, wdat) = (xv.data(), wv.data());
        for co in 0..cout {
            let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
            plane.iter_mut().for_each(|v| *v = bv.data()[co]);
            for ci in 0..cin {
                for ki in 0..kh {
                    for kj in 0..kw {
                        let wt = wdat[((co * cin + ci) * kh + ki) * kw + kj];
                        for oi in 0..ho {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let xrow = &xd[(ci * h + ii as usize) * wd..(ci * h + ii as usize + 1) * wd];
                            let orow = &mut plane[oi * wo..(oi + 1) * wo];
                            for (oj, o) in orow.iter_mut().enumerate() {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj >= 0 && jj < wd as isize {
                                    *o += wt * xrow[jj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(&[cout, ho, wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            &[x, w, b],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshaped(shape);
        self.push(v, Op::Reshape { x }, &[x])
    }

    /// `-weight * log softmax(logits)[target]` for a single row of logits.
    pub fn weighted_cross_entropy(&mut self, logits: Var, target: usize, weight: f64) -> Var {
        let lv = self.value(logits);
        assert!(target < lv.len(), "target class out of range");
        let mut probs = lv.data().to_vec();
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = -weight * (lv.data()[target] - lse);
        softmax_in_place(&mut probs);
        self.push(
            Tensor::scalar(loss),
            Op::WeightedCe { logits, target, weight, probs },
            &[logits],
        )
    }

    /// Gradients of the scalar `loss` with respect to every parameter used.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::empty(self.store.len());
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads, &mut out);
        }
        out
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backward_node(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => out.accumulate(*id, g, node.value.shape()),
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = node.value.cols();
                if let Some(da) = self.slot(grads, *a) {
                    // dA = dC * op(B)^T
                    gemm(m, n, k, 1.0, g, false, bv.data(), !trans_b, 1.0, da);
                }
                if let Some(db) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is [n,k]: dB = dC^T * A
                        gemm(n, m, k, 1.0, g, true, av.data(), false, 1.0, db);
                    } else {
                        gemm(k, m, n, 1.0, av.data(), true, g, false, 1.0, db);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(d) = self.slot(grads, *v) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::AddRow { x, bias } => {
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += c * g);
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let n = node.value.cols();
                let gam = self.value(*gamma).data();
                if let Some(dgam) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dgam[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(dbeta) = self.slot(grads, *beta) {
                    for gr in g.chunks(n) {
                        dbeta.iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let nf = n as f64;
                    let mut dxhat = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..n {
                            dxhat[j] = gr[j] * gam[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * hr[j];
                        }
                        let dr = &mut dx[r * n..(r + 1) * n];
                        for j in 0..n {
                            dr[j] += rstd[r] / nf * (nf * dxhat[j] - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), g) in dx.iter_mut().zip(xv).zip(g) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *d += g * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &v), g) in dx.iter_mut().zip(xv).zip(g) {
                        if v > 0.0 {
                            *d += g;
                        }
                    }
                }
            }
            Op::SoftmaxRows { x } => {
                let n = node.value.cols();
                let y = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.cols();
                let n = self.value(*x).cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (dr, gr) in dx.chunks_mut(n).zip(g.chunks(len)) {
                        dr[*start..start + len].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::ConcatCols { xs } => {
                let total = node.value.cols();
                let mut offset = 0;
                for &v in xs {
                    let w = self.value(v).cols();
                    if let Some(dx) = self.slot(grads, v) {
                        for (dr, gr) in dx.chunks_mut(w).zip(g.chunks(total)) {
                            dr.iter_mut().zip(&gr[offset..offset + w]).for_each(|(d, g)| *d += g);
                        }
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (gr, &r) in g.chunks(n).zip(rows) {
                        dx[r * n..(r + 1) * n].iter_mut().zip(gr).for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::MeanRows { x } => {
                let m = self.value(*x).rows() as f64;
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for dr in dx.chunks_mut(n) {
                        dr.iter_mut().zip(g).for_each(|(d, g)| *d += g / m);
                    }
                }
            }
            Op::MaxRows { x, argmax } => {
                let n = node.value.cols();
                if let Some(dx) = self.slot(grads, *x) {
                    for (j, &r) in argmax.iter().enumerate() {
                        dx[r * n + j] += g[j];
                    }
                }
            }
            Op::MeanAll { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let c = g[0] / dx.len() as f64;
                    dx.iter_mut().for_each(|d| *d += c);
                }
            }
            Op::SumAll { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum { w, xs } => {
                let wv = self.value(*w).data();
                if let Some(dw) = self.slot(grads, *w) {
                    for (d, &x) in dw.iter_mut().zip(xs) {
                        *d += self.value(x).data().iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                for (&wi, &x) in wv.iter().zip(xs) {
                    if let Some(dx) = self.slot(grads, x) {
                        dx.iter_mut().zip(g).for_each(|(d, g)| *d += wi * g);
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv2d_backward(node, g, grads, *x, *w, *b, *stride, *pad),
            Op::Reshape { x } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                }
            }
            Op::WeightedCe { logits, target, weight, probs } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    for (j, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *d += g[0] * weight * (p - onehot);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) {
        let (xv, wv) = (self.value(x), self.value(w));
        let [cin, h, wd] = dims3(xv.shape());
        let [cout, _, kh, kw] = dims4(wv.shape());
        let [_, ho, wo] = dims3(node.value.shape());
        if let Some(db) = self.slot(grads, b) {
            for co in 0..cout {
                db[co] += g[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
            }
        }
        let taps = |oi: usize, oj: usize, ki: usize, kj: usize| -> Option<(usize, usize)> {
            let ii = (oi * stride + ki) as isize - pad as isize;
            let jj = (oj * stride + kj) as isize - pad as isize;
            (ii >= 0 && ii < h as isize && jj >= 0 && jj < wd as isize).then_some((ii as usize, jj as usize))
        };
        if let Some(dw) = self.slot(grads, w) {
            for co in 0..cout {
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let mut acc = 0.0;
                            for oi in 0..ho {
                                for oj in 0..wo {
                                    if let Some((ii, jj)) = taps(oi, oj, ki, kj) {
                                        acc += g[(co * ho + oi) * wo + oj] * xv.data()[(ci * h + ii) * wd + jj];
                                    }
                                }
                            }
                            dw[((co * cin + ci) * kh + ki) * kw + kj] += acc;
                        }
                    }
                }
            }
        }
        if let Some(dx) = self.slot(grads, x) {
            for co in 0..cout {
                for ci in 0..cin {
                    for ki in 0..kh {
                        for kj in 0..kw {
                            let wt = wv.data()[((co * cin + ci) * kh + ki) * kw + kj];
                            for oi in 0..ho {
                                for oj in 0..wo {
                                    if let Some((ii, jj)) = taps(oi, oj, ki, kj) {
                                        dx[(ci * h + ii) * wd + jj] += wt * g[(co * ho + oi) * wo + oj];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    shape.try_into().unwrap_or_else(|_| panic!("expected a rank-3 tensor, got {shape:?}"))
}

fn dims4(shape: &[usize]) -> [usize; 4] {
    shape.try_into().unwrap_or_else(|_| panic!("expected a rank-4 tensor, got {shape:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` with respect to every element of `id`.
    fn numeric_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..store.get(id).len())
            .map(|i| {
                let orig = store.get(id).data()[i];
                store.get_mut(id).data_mut()[i] = orig + h;
                let up = f(store);
                store.get_mut(id).data_mut()[i] = orig - h;
                let down = f(store);
                store.get_mut(id).data_mut()[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn check(store: &mut ParamStore, build: &dyn Fn(&mut Graph) -> Var) {
        let f = |s: &ParamStore| {
            let mut g = Graph::new(s);
            let l = build(&mut g);
            g.value(l).data()[0]
        };
        let grads = {
            let mut g = Graph::new(store);
            let l = build(&mut g);
            g.backward(l)
        };
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let num = numeric_grad(store, id, &f);
            let ana = grads.get(id).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; num.len()]);
            for (a, n) in ana.iter().zip(&num) {
                let err = (a - n).abs() / (a.abs().max(n.abs()).max(1e-6));
                assert!(err < 1e-5, "{}: analytic {a} vs numeric {n}", store.name(id));
            }
        }
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        let x = s.normal("x", &[4, 6], 1.0, &mut rng);
        let w = s.normal("w", &[6, 6], 0.5, &mut rng);
        let b = s.normal("b", &[6], 0.5, &mut rng);
        let gam = s.normal("gamma", &[6], 1.0, &mut rng);
        let bet = s.normal("beta", &[6], 1.0, &mut rng);
        let mix = s.normal("mix", &[1, 3], 1.0, &mut rng);
        check(&mut s, &|g| {
            let xv = g.param(x);
            let y = g.linear(xv, w, b);
            let y = g.layer_norm(y, gam, bet, 1e-5);
            let y = g.gelu(y);
            let att = g.matmul_nt(y, xv);
            let att = g.softmax_rows(att);
            let z = g.matmul(att, y);
            let z2 = g.slice_cols(z, 1, 4);
            let r = g.relu(z);
            let r = g.slice_cols(r, 0, 4);
            let c = g.concat_cols(&[z2, r]);
            let sel = g.select_rows(c, &[3, 0, 0, 2]);
            let mw = g.param(mix);
            let mw = g.softmax_rows(mw);
            let a = g.scale(sel, 0.7);
            let bsum = g.add(sel, a);
            let ws = g.weighted_sum(mw, &[sel, a, bsum]);
            let mx = g.max_rows(ws);
            let mn = g.mean_rows(ws);
            let head = g.concat_cols(&[mx, mn]);
            let logits = g.slice_cols(head, 2, 2);
            let ce = g.weighted_cross_entropy(logits, 1, 0.9);
            let m = g.mean_all(ws);
            let t = g.add(ce, m);
            g.sum_all(t)
        });
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = ParamStore::new();
        let img = s.normal("img", &[2, 7, 6], 1.0, &mut rng);
        let w = s.normal("w", &[3, 2, 3, 3], 0.5, &mut rng);
        let b = s.normal("b", &[3], 0.5, &mut rng);
        check(&mut s, &|g| {
            let x = g.param(img);
            let y = g.conv2d(x, w, b, 2, 1);
            assert_eq!(g.shape(y), &[3, 4, 3]);
            let y = g.reshape(y, &[3, 12]);
            let y = g.gelu(y);
            g.mean_all(y)
        });
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut s = ParamStore::new();
        let w = s.full("w", &[2, 2], 1.0);
        let mut g = Graph::new(&s);
        let c = g.constant(Tensor::new(&[1, 2], vec![1.0, 2.0]));
        let wv = g.param(w);
        let y = g.matmul(c, wv);
        let l = g.sum_all(y);
        let grads = g.backward(l);
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn softmax_saturates_without_overflow() {
        let mut row = vec![1000.0, 0.0, 0.0];
        softmax_in_place(&mut row);
        assert_eq!(row[0], 1.0);
        assert!(row[1] < 1e-300);
    }
}
