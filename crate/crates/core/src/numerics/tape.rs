//! Wengert tape over rank-2 arrays.
//!
//! Every node stores its forward value; ops that need intermediates for the
//! backward pass (softmax probabilities, inverse RMS) cache them in the op.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::numerics::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{DenseArray, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row id that makes [`Tape::gather`] emit a zero row.
pub const ZERO_ROW: u32 = u32::MAX;

const RMS_EPS: f64 = 1e-6;

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Rope { x: Var, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    SwiGlu(Var, Var),
    Gelu(Var),
    Gather { table: Var, ids: Vec<u32> },
    ConcatRows(Var, Var),
    SelectRows { x: Var, rows: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<u32>, weights: Vec<T>, probs: Vec<T> },
    SquaredError { x: Var, target: Vec<T> },
}

struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::of(0.797_884_560_802_865_4);
    let a = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * a * x * x);
    (y, dy)
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn rope_angles(pos: usize, pair: usize, head_dim: usize, base: f64) -> (f64, f64) {
    let freq = libm::pow(base, -(2.0 * pair as f64) / head_dim as f64);
    let theta = pos as f64 * freq;
    (libm::cos(theta), libm::sin(theta))
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn to_array(&self, v: Var) -> DenseArray<T> {
        let n = self.node(v);
        DenseArray::from_vec(&[n.rows, n.cols], n.value.clone()).expect("node shape")
    }

    /// Scalar value of a `[1×1]` node.
    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    pub fn leaf(&mut self, value: &DenseArray<T>, requires_grad: bool) -> Var {
        self.push(value.rows(), value.cols(), value.data().to_vec(), Op::Leaf, requires_grad)
    }

    pub fn leaf_vec(&mut self, rows: usize, cols: usize, value: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(rows * cols, value.len(), "leaf shape");
        self.push(rows, cols, value, Op::Leaf, requires_grad)
    }

    fn grad_of(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.node(*v).needs_grad)
    }

    /// `a[n×k] · b[k×m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.dims(a);
        let (k2, m) = self.dims(b);
        ensure!(k == k2, Shape, "matmul [{}x{}]·[{}x{}]", n, k, k2, m);
        let mut out = vec![T::zero(); n * m];
        gemm_nn(self.value(a), self.value(b), &mut out, n, k, m);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(n, m, out, Op::MatMul(a, b), g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        ensure!(self.dims(b) == (ra, ca), Shape, "add {:?} vs {:?}", (ra, ca), self.dims(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(ra, ca, out, Op::Add(a, b), g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        ensure!(self.dims(b) == (ra, ca), Shape, "mul {:?} vs {:?}", (ra, ca), self.dims(b));
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let g = self.grad_of(&[a, b]);
        Ok(self.push(ra, ca, out, Op::Mul(a, b), g))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let (r, c) = self.dims(a);
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let g = self.grad_of(&[a]);
        self.push(r, c, out, Op::Scale(a, s), g)
    }

    /// Row-wise RMS normalization with a learned `[1×cols]` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(self.dims(gain) == (1, c), Shape, "rms gain {:?} for width {}", self.dims(gain), c);
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut out = vec![T::zero(); r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let ms = dot(row, row) / T::of(c as f64);
            let inv = T::one() / (ms + T::of(RMS_EPS)).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = row[j] * inv * gv[j];
            }
        }
        let g = self.grad_of(&[x, gain]);
        Ok(self.push(r, c, out, Op::RmsNorm { x, gain, inv_rms }, g))
    }

    /// Rotary position rotation; row `i` sits at position `i`. Pairs are
    /// interleaved within each head.
    pub fn rope(&mut self, x: Var, heads: usize, base: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        ensure!(heads > 0 && c % heads == 0, Shape, "width {} not divisible by {} heads", c, heads);
        let hd = c / heads;
        ensure!(hd % 2 == 0, Shape, "head dim {} must be even", hd);
        let xv = self.value(x);
        let mut out = vec![T::zero(); r * c];
        for pos in 0..r {
            for p in 0..hd / 2 {
                let (cs, sn) = rope_angles(pos, p, hd, base);
                let (cs, sn) = (T::of(cs), T::of(sn));
                for h in 0..heads {
                    let i0 = pos * c + h * hd + 2 * p;
                    let (a, b) = (xv[i0], xv[i0 + 1]);
                    out[i0] = a * cs - b * sn;
                    out[i0 + 1] = a * sn + b * cs;
                }
            }
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(r, c, out, Op::Rope { x, heads, base }, g))
    }

    /// Bidirectional multi-head softmax attention, no mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (n, c) = self.dims(q);
        ensure!(self.dims(k) == (n, c) && self.dims(v) == (n, c), Shape, "attention q/k/v shapes");
        ensure!(heads > 0 && c % heads == 0, Shape, "width {} not divisible by {} heads", c, heads);
        let hd = c / heads;
        let scale = T::of(1.0 / libm::sqrt(hd as f64));
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::zero(); heads * n * n];
        let mut out = vec![T::zero(); n * c];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let qi = &qv[i * c + off..i * c + off + hd];
                let prow = &mut probs[(h * n + i) * n..(h * n + i + 1) * n];
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    let s = dot(qi, &kv[j * c + off..j * c + off + hd]) * scale;
                    prow[j] = s;
                    if s > mx {
                        mx = s;
                    }
                }
                let mut z = T::zero();
                for p in prow.iter_mut() {
                    *p = (*p - mx).exp();
                    z += *p;
                }
                let inv = T::one() / z;
                let oi = &mut out[i * c + off..i * c + off + hd];
                for j in 0..n {
                    prow[j] *= inv;
                    axpy(prow[j], &vv[j * c + off..j * c + off + hd], oi);
                }
            }
        }
        let g = self.grad_of(&[q, k, v]);
        Ok(self.push(n, c, out, Op::Attention { q, k, v, heads, probs }, g))
    }

    /// `silu(gate) ⊙ up`
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        let (r, c) = self.dims(gate);
        ensure!(self.dims(up) == (r, c), Shape, "swiglu gate/up shapes");
        let out = self
            .value(gate)
            .iter()
            .zip(self.value(up))
            .map(|(&g, &u)| g * sigmoid(g) * u)
            .collect();
        let gr = self.grad_of(&[gate, up]);
        Ok(self.push(r, c, out, Op::SwiGlu(gate, up), gr))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        let g = self.grad_of(&[x]);
        self.push(r, c, out, Op::Gelu(x), g)
    }

    /// Row lookup into `table`; [`ZERO_ROW`] yields a zero row.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (r, c) = self.dims(table);
        let tv = self.value(table);
        let mut out = vec![T::zero(); ids.len() * c];
        for (i, &id) in ids.iter().enumerate() {
            if id == ZERO_ROW {
                continue;
            }
            ensure!((id as usize) < r, Domain, "row id {} outside table of {} rows", id, r);
            out[i * c..(i + 1) * c].copy_from_slice(&tv[id as usize * c..(id as usize + 1) * c]);
        }
        let g = self.grad_of(&[table]);
        Ok(self.push(ids.len(), c, out, Op::Gather { table, ids: ids.to_vec() }, g))
    }

    /// Stacks `a` above `b`.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.dims(a);
        let (rb, cb) = self.dims(b);
        ensure!(ca == cb, Shape, "concat widths {} vs {}", ca, cb);
        let mut out = Vec::with_capacity((ra + rb) * ca);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let g = self.grad_of(&[a, b]);
        Ok(self.push(ra + rb, ca, out, Op::ConcatRows(a, b), g))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            ensure!(i < r, Domain, "row {} outside {} rows", i, r);
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let g = self.grad_of(&[x]);
        Ok(self.push(rows.len(), c, out, Op::SelectRows { x, rows: rows.to_vec() }, g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows: Vec<usize> = (start..start + len).collect();
        self.select_rows(x, &rows)
    }

    /// `Σ_i w_i · −log softmax(logits_i)[target_i]` as a `[1×1]` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[T]) -> Result<Var> {
        let (n, v) = self.dims(logits);
        ensure!(targets.len() == n && weights.len() == n, Shape, "{} targets/{} weights for {} rows", targets.len(), weights.len(), n);
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut loss = T::zero();
        for i in 0..n {
            let t = targets[i] as usize;
            ensure!(t < v, Domain, "target {} outside vocabulary {}", t, v);
            if weights[i] == T::zero() {
                continue;
            }
            let row = &lv[i * v..(i + 1) * v];
            let prow = &mut probs[i * v..(i + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| if x > m { x } else { m });
            let mut z = T::zero();
            for j in 0..v {
                prow[j] = (row[j] - mx).exp();
                z += prow[j];
            }
            let inv = T::one() / z;
            for p in prow.iter_mut() {
                *p *= inv;
            }
            loss += weights[i] * (mx + z.ln() - row[t]);
        }
        let g = self.grad_of(&[logits]);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs };
        Ok(self.push(1, 1, vec![loss], op, g))
    }

    /// `Σ (x − target)²` as a `[1×1]` node.
    pub fn squared_error(&mut self, x: Var, target: &[T]) -> Result<Var> {
        let xv = self.value(x);
        ensure!(xv.len() == target.len(), Shape, "squared error {} vs {}", xv.len(), target.len());
        let s = xv.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let g = self.grad_of(&[x]);
        Ok(self.push(1, 1, vec![s], Op::SquaredError { x, target: target.to_vec() }, g))
    }

    /// Reverse sweep from a `[1×1]` output.
    pub fn backward(&self, out: Var) -> Grads<T> {
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(self.node(out).value.len(), 1, "backward needs a scalar output");
        grads[out.0] = Some(vec![T::one()]);

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop(node, &gy, &mut grads);
        }
        Grads { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); n.value.len()]);
        }
        slot.as_deref_mut()
    }

    fn backprop(&self, node: &Node<T>, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.dims(*a);
                let m = node.cols;
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt(gy, self.value(*b), ga, n, m, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn(self.value(*a), gy, gb, k, n, m);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        for (x, &d) in g.iter_mut().zip(gy) {
                            *x += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(g) = self.acc(grads, *a) {
                    for ((x, &d), &bv) in g.iter_mut().zip(gy).zip(self.value(*b)) {
                        *x += d * bv;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((x, &d), &av) in g.iter_mut().zip(gy).zip(self.value(*a)) {
                        *x += d * av;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(g) = self.acc(grads, *a) {
                    axpy(*s, gy, g);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (r, c) = (node.rows, node.cols);
                let xv = self.value(*x);
                let gv = self.value(*gain);
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r {
                        for j in 0..c {
                            gg[j] += gy[i * c + j] * xv[i * c + j] * inv_rms[i];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let cf = T::of(c as f64);
                    for i in 0..r {
                        let inv = inv_rms[i];
                        let mut proj = T::zero();
                        for j in 0..c {
                            proj += gy[i * c + j] * gv[j] * xv[i * c + j] * inv;
                        }
                        proj /= cf;
                        for j in 0..c {
                            let xhat = xv[i * c + j] * inv;
                            gx[i * c + j] += inv * (gy[i * c + j] * gv[j] - xhat * proj);
                        }
                    }
                }
            }
            Op::Rope { x, heads, base } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let (r, c) = (node.rows, node.cols);
                    let hd = c / heads;
                    for pos in 0..r {
                        for p in 0..hd / 2 {
                            let (cs, sn) = rope_angles(pos, p, hd, *base);
                            let (cs, sn) = (T::of(cs), T::of(sn));
                            for h in 0..*heads {
                                let i0 = pos * c + h * hd + 2 * p;
                                let (g0, g1) = (gy[i0], gy[i0 + 1]);
                                gx[i0] += g0 * cs + g1 * sn;
                                gx[i0 + 1] += g1 * cs - g0 * sn;
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(node, gy, grads, *q, *k, *v, *heads, probs),
            Op::SwiGlu(gate, up) => {
                let gv = self.value(*gate);
                let uv = self.value(*up);
                if let Some(gg) = self.acc(grads, *gate) {
                    for i in 0..gy.len() {
                        let s = sigmoid(gv[i]);
                        gg[i] += gy[i] * uv[i] * (s + gv[i] * s * (T::one() - s));
                    }
                }
                if let Some(gu) = self.acc(grads, *up) {
                    for i in 0..gy.len() {
                        gu[i] += gy[i] * gv[i] * sigmoid(gv[i]);
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * gelu_parts(xv[i]).1;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = node.cols;
                if let Some(gt) = self.acc(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        if id == ZERO_ROW {
                            continue;
                        }
                        let id = id as usize;
                        for j in 0..c {
                            gt[id * c + j] += gy[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, &d) in ga.iter_mut().zip(&gy[..split]) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, &d) in gb.iter_mut().zip(&gy[split..]) {
                        *x += d;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let c = node.cols;
                if let Some(gx) = self.acc(grads, *x) {
                    for (o, &i) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[i * c + j] += gy[o * c + j];
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let (n, v) = self.dims(*logits);
                if let Some(gl) = self.acc(grads, *logits) {
                    let g0 = gy[0];
                    for i in 0..n {
                        if weights[i] == T::zero() {
                            continue;
                        }
                        let w = g0 * weights[i];
                        for j in 0..v {
                            gl[i * v + j] += w * probs[i * v + j];
                        }
                        gl[i * v + targets[i] as usize] -= w;
                    }
                }
            }
            Op::SquaredError { x, target } => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let two = T::of(2.0) * gy[0];
                    for i in 0..xv.len() {
                        gx[i] += two * (xv[i] - target[i]);
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node<T>,
        gy: &[T],
        grads: &mut [Option<Vec<T>>],
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
    ) {
        let (n, c) = (node.rows, node.cols);
        let hd = c / heads;
        let scale = T::of(1.0 / libm::sqrt(hd as f64));
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut gq = vec![T::zero(); n * c];
        let mut gk = vec![T::zero(); n * c];
        let mut gv = vec![T::zero(); n * c];
        let mut ds = vec![T::zero(); n];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..n {
                let prow = &probs[(h * n + i) * n..(h * n + i + 1) * n];
                let gi = &gy[i * c + off..i * c + off + hd];
                let mut row_dot = T::zero();
                for j in 0..n {
                    let dp = dot(gi, &vv[j * c + off..j * c + off + hd]);
                    ds[j] = dp;
                    row_dot += dp * prow[j];
                    axpy(prow[j], gi, &mut gv[j * c + off..j * c + off + hd]);
                }
                for j in 0..n {
                    let s = prow[j] * (ds[j] - row_dot) * scale;
                    if s == T::zero() {
                        continue;
                    }
                    axpy(s, &kv[j * c + off..j * c + off + hd], &mut gq[i * c + off..i * c + off + hd]);
                    axpy(s, &qv[i * c + off..i * c + off + hd], &mut gk[j * c + off..j * c + off + hd]);
                }
            }
        }
        for (var, g) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(dst) = self.acc(grads, var) {
                for (x, d) in dst.iter_mut().zip(g) {
                    *x += d;
                }
            }
        }
    }
}
