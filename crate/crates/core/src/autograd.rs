//! Minimal reverse-mode automatic differentiation over row-major matrices.
//!
//! Every value in a [`Graph`] is a 2-D tensor `[rows, cols]`. Operations are
//! evaluated eagerly when they are recorded; [`Graph::backward`] walks the tape
//! in reverse. Only the handful of operations the diffusion transformer and
//! its losses need are provided.

use std::sync::Arc;

use crate::scalar::{Scalar, Strided};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Dense token-level visibility table, `visible[q * keys + k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttnMask {
    pub queries: usize,
    pub keys: usize,
    pub visible: Vec<bool>,
}

enum Op<T> {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    LayerNorm { x: Var, rstd: Vec<T> },
    Gelu(Var),
    Silu(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Var, Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    MeanSquare(Var),
    SumAll(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    match t.shape() {
        [r, c] => (*r, *c),
        other => panic!("graph values are matrices, got shape {other:?}"),
    }
}

fn matrix<T: Scalar>(rows: usize, cols: usize, data: Vec<T>) -> Tensor<T> {
    Tensor::new(vec![rows, cols], data).expect("internal matrix shape")
}

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(value.shape().len(), 2);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A trainable parameter identified by its index in a parameter store.
    pub fn param(&mut self, id: usize, value: Tensor<T>) -> Var {
        self.push(value, Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Strided::row_major(k),
            self.value(b).data(),
            Strided::row_major(n),
            T::zero(),
            &mut out,
            Strided::row_major(n),
        );
        let ng = self.needs(a) || self.needs(b);
        self.push(matrix(m, n, out), Op::MatMul(a, b), ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "elementwise operands");
        va.zip_map(vb, f).expect("checked shapes")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x + y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x - y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.binary(a, b, |x, y| x * y);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// `a + row` with `row` of shape `[1, cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "broadcast row shape");
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, &b) in chunk.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(matrix(r, c, out), Op::AddRow(a, row), ng)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x + s);
        let ng = self.needs(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let eps = T::from_f64_lossy(LN_EPS);
        let n = T::from_usize_lossy(c);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        let mut rstd = Vec::with_capacity(r);
        for (row, dst) in src.chunks(c).zip(out.chunks_mut(c)) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let ng = self.needs(x);
        self.push(matrix(r, c, out), Op::LayerNorm { x, rstd }, ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64_lossy(GELU_C);
        let k = T::from_f64_lossy(GELU_K);
        let half = T::from_f64_lossy(0.5);
        let out = self.value(x).map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        let ng = self.needs(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v / (T::one() + (-v).exp()));
        let ng = self.needs(x);
        self.push(out, Op::Silu(x), ng)
    }

    /// `out[i] = x[index[i]]` row-wise.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Var {
        let (r, c) = self.shape(x);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            assert!(i < r, "gather index {i} out of {r} rows");
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        let rows = index.len();
        self.push(matrix(rows, c, out), Op::GatherRows(x, index), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start + len <= c, "column slice out of range");
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in src.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.needs(x);
        self.push(matrix(r, len, out), Op::SliceCols { x, start }, ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = Tensor::concat_rows(&[self.value(a), self.value(b)]).expect("concat column mismatch");
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatRows(a, b), ng)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q` is `[nq, d]`, `k` and `v` are `[nk, d]`; heads split the columns.
    /// Masked entries get zero probability; every query must see at least one key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&Arc<AttnMask>>) -> Var {
        let (nq, d) = self.shape(q);
        let (nk, dk) = self.shape(k);
        assert_eq!(d, dk, "query/key width");
        assert_eq!(self.shape(v), (nk, d), "value shape");
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        if let Some(m) = mask {
            assert_eq!((m.queries, m.keys), (nq, nk), "mask shape");
        }
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![T::zero(); heads * nq * nk];
        let mut out = vec![T::zero(); nq * d];
        for h in 0..heads {
            let p = &mut probs[h * nq * nk..(h + 1) * nq * nk];
            T::gemm(nq, dh, nk, scale, qd, Strided::row_major(d).at(h * dh), kd, Strided::transposed(d).at(h * dh), T::zero(), p, Strided::row_major(nk));
            for i in 0..nq {
                let row = &mut p[i * nk..(i + 1) * nk];
                let mut max = T::neg_infinity();
                for (j, s) in row.iter().enumerate() {
                    let vis = mask.map_or(true, |m| m.visible[i * nk + j]);
                    if vis && *s > max {
                        max = *s;
                    }
                }
                assert!(max.is_finite(), "attention row {i} has no visible key or non-finite scores");
                let mut total = T::zero();
                for (j, s) in row.iter_mut().enumerate() {
                    let vis = mask.map_or(true, |m| m.visible[i * nk + j]);
                    *s = if vis { (*s - max).exp() } else { T::zero() };
                    total += *s;
                }
                for s in row.iter_mut() {
                    *s /= total;
                }
            }
            T::gemm(
                nq,
                nk,
                dh,
                T::one(),
                p,
                Strided::row_major(nk),
                vd,
                Strided::row_major(d).at(h * dh),
                T::zero(),
                &mut out,
                Strided::row_major(d).at(h * dh),
            );
        }
        let ng = self.needs(q) || self.needs(k) || self.needs(v);
        self.push(matrix(nq, d, out), Op::Attention { q, k, v, heads, probs }, ng)
    }

    /// `mean(x^2)` as a `[1, 1]` value.
    pub fn mean_square(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_usize_lossy(t.numel());
        let s = t.data().iter().map(|&v| v * v).sum::<T>() / n;
        let ng = self.needs(x);
        self.push(matrix(1, 1, vec![s]), Op::MeanSquare(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let ng = self.needs(x);
        self.push(matrix(1, 1, vec![s]), Op::SumAll(x), ng)
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, x: Var, target: Tensor<T>) -> Var {
        let t = self.constant(target);
        let d = self.sub(x, t);
        self.mean_square(d)
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar() on a non-scalar value");
        t.data()[0]
    }

    /// Reverse pass from a `[1, 1]` output.
    pub fn backward(&self, output: Var) -> Gradients<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(matrix(1, 1, vec![T::one()]));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads, params: self.nodes.iter().map(|n| if let Op::Param(id) = n.op { Some(id) } else { None }).collect() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += *d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.shape(a);
                let (_, n) = self.shape(b);
                if self.needs(a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        gd,
                        Strided::row_major(n),
                        self.value(b).data(),
                        Strided::transposed(n),
                        T::zero(),
                        &mut da,
                        Strided::row_major(k),
                    );
                    self.accumulate(grads, a, matrix(m, k, da));
                }
                if self.needs(b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        self.value(a).data(),
                        Strided::transposed(k),
                        gd,
                        Strided::row_major(n),
                        T::zero(),
                        &mut db,
                        Strided::row_major(n),
                    );
                    self.accumulate(grads, b, matrix(k, n, db));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.map(|v| -v));
            }
            &Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |x, y| x * y).expect("same shape"));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |x, y| x * y).expect("same shape"));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(row) {
                    let (_, c) = dims(g);
                    let mut acc = vec![T::zero(); c];
                    for r in gd.chunks(c) {
                        for (s, &v) in acc.iter_mut().zip(r) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, row, matrix(1, c, acc));
                }
            }
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            Op::LayerNorm { x, rstd } => {
                let (_, c) = dims(g);
                let n = T::from_usize_lossy(c);
                let xhat = node.value.data();
                let mut dx = vec![T::zero(); gd.len()];
                for (r, &rs) in rstd.iter().enumerate() {
                    let gr = &gd[r * c..(r + 1) * c];
                    let xr = &xhat[r * c..(r + 1) * c];
                    let mean_g = gr.iter().copied().sum::<T>() / n;
                    let mean_gx = gr.iter().zip(xr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for j in 0..c {
                        dx[r * c + j] = rs * (gr[j] - mean_g - xr[j] * mean_gx);
                    }
                }
                let (rows, _) = dims(g);
                self.accumulate(grads, *x, matrix(rows, c, dx));
            }
            &Op::Gelu(x) => {
                let c = T::from_f64_lossy(GELU_C);
                let k = T::from_f64_lossy(GELU_K);
                let half = T::from_f64_lossy(0.5);
                let three = T::from_f64_lossy(3.0);
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| {
                        let th = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + th) + half * v * (T::one() - th * th) * c * (T::one() + three * k * v * v);
                        gv * d
                    })
                    .expect("same shape");
                self.accumulate(grads, x, dx);
            }
            &Op::Silu(x) => {
                let dx = self
                    .value(x)
                    .zip_map(g, |v, gv| {
                        let s = T::one() / (T::one() + (-v).exp());
                        gv * (s + v * s * (T::one() - s))
                    })
                    .expect("same shape");
                self.accumulate(grads, x, dx);
            }
            Op::GatherRows(x, index) => {
                let (r, c) = self.shape(*x);
                let mut dx = vec![T::zero(); r * c];
                for (o, &i) in index.iter().enumerate() {
                    for j in 0..c {
                        dx[i * c + j] += gd[o * c + j];
                    }
                }
                self.accumulate(grads, *x, matrix(r, c, dx));
            }
            &Op::SliceCols { x, start } => {
                let (r, c) = self.shape(x);
                let (_, len) = dims(g);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, x, matrix(r, c, dx));
            }
            &Op::ConcatRows(a, b) => {
                let (ra, c) = self.shape(a);
                let (rb, _) = self.shape(b);
                self.accumulate(grads, a, matrix(ra, c, gd[..ra * c].to_vec()));
                self.accumulate(grads, b, matrix(rb, c, gd[ra * c..].to_vec()));
            }
            Op::Attention { q, k, v, heads, probs } => self.attention_backward(g, *q, *k, *v, *heads, probs, grads),
            &Op::MeanSquare(x) => {
                let t = self.value(x);
                let f = gd[0] * T::from_f64_lossy(2.0) / T::from_usize_lossy(t.numel());
                self.accumulate(grads, x, t.map(|v| v * f));
            }
            &Op::SumAll(x) => {
                let (r, c) = self.shape(x);
                self.accumulate(grads, x, matrix(r, c, vec![gd[0]; r * c]));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, g: &Tensor<T>, q: Var, k: Var, v: Var, heads: usize, probs: &[T], grads: &mut [Option<Tensor<T>>]) {
        let (nq, d) = self.shape(q);
        let (nk, _) = self.shape(k);
        let dh = d / heads;
        let scale = T::one() / T::from_usize_lossy(dh).sqrt();
        let gd = g.data();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut dq = vec![T::zero(); nq * d];
        let mut dk = vec![T::zero(); nk * d];
        let mut dv = vec![T::zero(); nk * d];
        let mut ds = vec![T::zero(); nq * nk];
        for h in 0..heads {
            let p = &probs[h * nq * nk..(h + 1) * nq * nk];
            // dV_h = P^T dO_h
            T::gemm(
                nk,
                nq,
                dh,
                T::one(),
                p,
                Strided::transposed(nk),
                gd,
                Strided::row_major(d).at(h * dh),
                T::zero(),
                &mut dv,
                Strided::row_major(d).at(h * dh),
            );
            // dP = dO_h V_h^T
            T::gemm(
                nq,
                dh,
                nk,
                T::one(),
                gd,
                Strided::row_major(d).at(h * dh),
                vd,
                Strided::transposed(d).at(h * dh),
                T::zero(),
                &mut ds,
                Strided::row_major(nk),
            );
            for i in 0..nq {
                let pr = &p[i * nk..(i + 1) * nk];
                let dr = &mut ds[i * nk..(i + 1) * nk];
                let dot = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (dv_, &pv) in dr.iter_mut().zip(pr) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            T::gemm(nq, nk, dh, scale, &ds, Strided::row_major(nk), kd, Strided::row_major(d).at(h * dh), T::zero(), &mut dq, Strided::row_major(d).at(h * dh));
            T::gemm(
                nk,
                nq,
                dh,
                scale,
                &ds,
                Strided::transposed(nk),
                qd,
                Strided::row_major(d).at(h * dh),
                T::zero(),
                &mut dk,
                Strided::row_major(d).at(h * dh),
            );
        }
        self.accumulate(grads, q, matrix(nq, d, dq));
        self.accumulate(grads, k, matrix(nk, d, dk));
        self.accumulate(grads, v, matrix(nk, d, dv));
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Option<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients keyed by parameter id; parameters recorded more than once are summed.
    pub fn accumulate_params(&self, into: &mut [Tensor<T>]) {
        for (g, id) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, id) {
                let dst = into[*id].data_mut();
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d += v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(&[r, c], rng)
    }

    /// Central differences of `f` with respect to every element of `x0`.
    fn numeric_grad(x0: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.numel())
            .map(|i| {
                let mut p = x0.clone();
                p.data_mut()[i] += h;
                let mut m = x0.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!((a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-9, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn attention_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q0 = rand_mat(5, 4, &mut rng);
        let k0 = rand_mat(7, 4, &mut rng);
        let v0 = rand_mat(7, 4, &mut rng);
        let mask = Arc::new(AttnMask { queries: 5, keys: 7, visible: (0..35).map(|i| (i % 7) <= (i / 7) + 2).collect() });
        let w = rand_mat(5, 4, &mut rng);
        let run = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let a = g.attention(qv, kv, vv, 2, Some(&mask));
            let wv = g.constant(w.clone());
            let p = g.mul(a, wv);
            let l = g.sum_all(p);
            (g, l, qv, kv, vv)
        };
        let (g, l, qv, kv, vv) = run(&q0, &k0, &v0);
        let grads = g.backward(l);
        let f = |q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>| {
            let (g, l, ..) = run(q, k, v);
            g.scalar(l)
        };
        assert_close(grads.get(qv).unwrap().data(), &numeric_grad(&q0, |q| f(q, &k0, &v0)));
        assert_close(grads.get(kv).unwrap().data(), &numeric_grad(&k0, |k| f(&q0, k, &v0)));
        assert_close(grads.get(vv).unwrap().data(), &numeric_grad(&v0, |v| f(&q0, &k0, v)));
    }

    #[test]
    fn pointwise_and_norm_gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_mat(3, 6, &mut rng);
        let w = rand_mat(6, 4, &mut rng);
        let run = |x: &Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let n = g.layer_norm(xv);
            let wv = g.constant(w.clone());
            let h = g.matmul(n, wv);
            let a = g.gelu(h);
            let s = g.silu(a);
            let sl = g.slice_cols(s, 1, 2);
            let gathered = g.gather_rows(sl, vec![0, 2, 2, 1]);
            let both = g.concat_rows(gathered, sl);
            let sq = g.add_scalar(both, 0.3);
            let l = g.mean_square(sq);
            (g, l, xv)
        };
        let (g, l, xv) = run(&x0);
        let grads = g.backward(l);
        let numeric = numeric_grad(&x0, |x| {
            let (g, l, _) = run(x);
            g.scalar(l)
        });
        assert_close(grads.get(xv).unwrap().data(), &numeric);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::full(&[2, 2], 1.0));
        let x = g.input(Tensor::full(&[2, 2], 2.0));
        let p = g.mul(c, x);
        let l = g.sum_all(p);
        let grads = g.backward(l);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
    }
}
