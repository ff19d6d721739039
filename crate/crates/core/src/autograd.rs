//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! The operator set is deliberately small: matrix multiply, bias and residual
//! addition, GELU, layer normalization, embedding lookup, dropout, masked
//! multi-head attention, sequence concatenation and a masked softmax
//! negative log-likelihood. Everything the denoiser computes is built from
//! these.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the tape is generic over (`f32` for training, `f64` for
/// gradient checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// `m x k`, `k x n` and `m x n` matrices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

impl Real for f32 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f64 {
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape does not match data length");
        Mat { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn add_assign(&mut self, other: &Mat<T>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }
}

/// `c = op(a) * op(b) + beta * c` where `op` optionally transposes.
pub fn gemm_into<T: Real>(a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, beta: T, c: &mut Mat<T>) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    if k == 0 {
        for x in c.data.iter_mut() {
            *x = *x * beta;
        }
        return;
    }
    // SAFETY: shapes were checked above and `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a batched attention call.
#[derive(Debug, Clone)]
pub struct AttnSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    /// `true` when keys/values hold a single sequence shared by every query batch.
    pub shared_kv: bool,
    /// Validity of each key row, `[kv_batch * k_len]`.
    pub key_mask: Vec<bool>,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, tb: bool },
    AddBias { x: Var, bias: Var },
    Add { a: Var, b: Var },
    Gelu { x: Var },
    LayerNorm { x: Var, gamma: Var, xhat: Vec<T>, rstd: Vec<T> },
    Dropout { x: Var, scale: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttnSpec, probs: Vec<T> },
    ConcatSeq { a: Var, b: Var, batch: usize, la: usize, lb: usize },
    MaskedNll { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    /// Parameter index for parameter leaves.
    param: Option<usize>,
    needs_grad: bool,
}

/// Recorded computation. Parameters enter through [`Tape::param`] and receive
/// gradients from [`Tape::backward`].
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let x3 = x * x * x;
    let u = c * (x + a * x3);
    let th = u.tanh();
    let y = half * x * (T::one() + th);
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = half * (T::one() + th) + half * x * (T::one() - th * th) * du;
    (y, dy)
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Mat<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Mat::zeros(0, 0))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf tied to parameter slot `index`.
    pub fn param(&mut self, index: usize, value: Mat<T>) -> Var {
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].param = Some(index);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let n = if tb { bv.rows } else { bv.cols };
        let mut out = Mat::zeros(av.rows, n);
        gemm_into(av, false, bv, tb, T::zero(), &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul { a, b, tb }, ng)
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(bias);
        assert_eq!(bv.len(), xv.cols, "bias width mismatch");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o = *o + b;
            }
        }
        let ng = self.ng(x) || self.ng(bias);
        self.push(out, Op::AddBias { x, bias }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data.len(), self.value(b).data.len(), "add shape mismatch");
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add { a, b }, ng)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let out = Mat::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().map(|&v| gelu_parts(v).0).collect(),
        );
        let ng = self.ng(x);
        self.push(out, Op::Gelu { x }, ng)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each `[1, cols]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let eps = T::lit(1e-5);
        let xv = self.value(x);
        let (rows, cols) = (xv.rows, xv.cols);
        let g = &self.value(gamma).data;
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        let mut out = Mat::zeros(rows, cols);
        let nf = T::from_usize(cols).unwrap();
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g[c];
            }
        }
        let ng = self.ng(x) || self.ng(gamma);
        let normed = self.push(out, Op::LayerNorm { x, gamma, xhat, rstd }, ng);
        self.add_bias(normed, beta)
    }

    /// Inverted dropout with a precomputed keep mask.
    pub fn dropout(&mut self, x: Var, keep: &[bool], p: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(keep.len(), xv.len());
        let s = T::lit(1.0 / (1.0 - p));
        let scale: Vec<T> = keep.iter().map(|&k| if k { s } else { T::zero() }).collect();
        let out = Mat::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().zip(&scale).map(|(&v, &m)| v * m).collect(),
        );
        let ng = self.ng(x);
        self.push(out, Op::Dropout { x, scale }, ng)
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Mat::zeros(ids.len(), tv.cols);
        for (i, &id) in ids.iter().enumerate() {
            out.row_mut(i).copy_from_slice(tv.row(id));
        }
        let ng = self.ng(table);
        self.push(out, Op::Gather { table, ids: ids.to_vec() }, ng)
    }

    /// Per-batch concatenation along the sequence axis:
    /// `[batch*la, d] ++ [batch*lb, d] -> [batch*(la+lb), d]`.
    pub fn concat_seq(&mut self, a: Var, b: Var, batch: usize, la: usize, lb: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols;
        assert_eq!(bv.cols, d);
        assert_eq!(av.rows, batch * la);
        assert_eq!(bv.rows, batch * lb);
        let mut out = Mat::zeros(batch * (la + lb), d);
        for bi in 0..batch {
            let dst = bi * (la + lb) * d;
            out.data[dst..dst + la * d].copy_from_slice(&av.data[bi * la * d..(bi + 1) * la * d]);
            out.data[dst + la * d..dst + (la + lb) * d]
                .copy_from_slice(&bv.data[bi * lb * d..(bi + 1) * lb * d]);
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::ConcatSeq { a, b, batch, la, lb }, ng)
    }

    /// Scaled dot-product attention with key padding. Masked keys are skipped
    /// entirely; a query with no valid key yields a zero row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        assert_eq!(d % spec.heads, 0);
        assert_eq!(qv.rows, spec.batch * spec.q_len, "query rows");
        let kv_batch = if spec.shared_kv { 1 } else { spec.batch };
        assert_eq!(kv.rows, kv_batch * spec.k_len, "key rows");
        assert_eq!(vv.rows, kv.rows);
        assert_eq!(spec.key_mask.len(), kv.rows);
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (lq, lk, h) = (spec.q_len, spec.k_len, spec.heads);
        let mut probs = vec![T::zero(); spec.batch * h * lq * lk];
        let mut out = Mat::zeros(qv.rows, d);
        let mut scores = vec![T::zero(); lk];
        for b in 0..spec.batch {
            let kb = if spec.shared_kv { 0 } else { b };
            let valid: Vec<usize> = (0..lk).filter(|&j| spec.key_mask[kb * lk + j]).collect();
            if valid.is_empty() {
                continue;
            }
            for hh in 0..h {
                let c0 = hh * dh;
                for i in 0..lq {
                    let qrow = &qv.data[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                    let mut maxs = T::neg_infinity();
                    for &j in &valid {
                        let krow = &kv.data[(kb * lk + j) * d + c0..(kb * lk + j) * d + c0 + dh];
                        let s = qrow.iter().zip(krow).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        scores[j] = s;
                        if s > maxs {
                            maxs = s;
                        }
                    }
                    let mut z = T::zero();
                    for &j in &valid {
                        let e = (scores[j] - maxs).exp();
                        scores[j] = e;
                        z = z + e;
                    }
                    let prow = &mut probs[((b * h + hh) * lq + i) * lk..((b * h + hh) * lq + i + 1) * lk];
                    let orow = &mut out.data[(b * lq + i) * d + c0..(b * lq + i) * d + c0 + dh];
                    for &j in &valid {
                        let p = scores[j] / z;
                        prow[j] = p;
                        let vrow = &vv.data[(kb * lk + j) * d + c0..(kb * lk + j) * d + c0 + dh];
                        for (o, &vx) in orow.iter_mut().zip(vrow) {
                            *o = *o + p * vx;
                        }
                    }
                }
            }
        }
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, ng)
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, over rows that have a target. Zero when no row has one.
    pub fn masked_nll(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(targets.len(), lv.rows);
        let vsz = lv.cols;
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            total = total + (lz - row[t]);
            for c in 0..vsz {
                probs[r * vsz + c] = (row[c] - lz).exp();
            }
            count += 1;
        }
        let loss = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        let ng = self.ng(logits);
        self.push(
            Mat::from_vec(1, 1, vec![loss]),
            Op::MaskedNll {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar output. Returns `(parameter index,
    /// gradient)` for every parameter leaf reached.
    pub fn backward(&self, output: Var) -> Vec<(usize, Mat<T>)> {
        let n = output.0 + 1;
        let mut grads: Vec<Option<Mat<T>>> = (0..n).map(|_| None).collect();
        let ov = &self.nodes[output.0].value;
        assert_eq!(ov.len(), 1, "backward expects a scalar output");
        grads[output.0] = Some(Mat::from_vec(1, 1, vec![T::one()]));

        fn acc<T: Real>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        let mut out = Vec::new();
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(p) = node.param {
                        out.push((p, g));
                    }
                }
                Op::MatMul { a, b, tb } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    if self.ng(*a) {
                        let mut ga = Mat::zeros(av.rows, av.cols);
                        // dA = dC * op(B)^T
                        gemm_into(&g, false, bv, !*tb, T::zero(), &mut ga);
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        let mut gb = Mat::zeros(bv.rows, bv.cols);
                        if *tb {
                            // C = A B^T  =>  dB = dC^T A
                            gemm_into(&g, true, av, false, T::zero(), &mut gb);
                        } else {
                            gemm_into(av, true, &g, false, T::zero(), &mut gb);
                        }
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::AddBias { x, bias } => {
                    if self.ng(*bias) {
                        let mut gb = Mat::zeros(1, g.cols);
                        for r in 0..g.rows {
                            for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                                *o = *o + v;
                            }
                        }
                        acc(&mut grads, *bias, gb);
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Add { a, b } => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Gelu { x } => {
                    let xv = self.value(*x);
                    let gx = Mat::from_vec(
                        g.rows,
                        g.cols,
                        xv.data
                            .iter()
                            .zip(&g.data)
                            .map(|(&v, &gg)| gg * gelu_parts(v).1)
                            .collect(),
                    );
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gamma, xhat, rstd } => {
                    let (rows, cols) = (g.rows, g.cols);
                    let gm = &self.value(*gamma).data;
                    if self.ng(*gamma) {
                        let mut gg = Mat::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data[c] = gg.data[c] + g.data[r * cols + c] * xhat[r * cols + c];
                            }
                        }
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.ng(*x) {
                        let nf = T::from_usize(cols).unwrap();
                        let mut gx = Mat::zeros(rows, cols);
                        for r in 0..rows {
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in 0..cols {
                                let dxh = g.data[r * cols + c] * gm[c];
                                s1 = s1 + dxh;
                                s2 = s2 + dxh * xhat[r * cols + c];
                            }
                            let (m1, m2) = (s1 / nf, s2 / nf);
                            for c in 0..cols {
                                let dxh = g.data[r * cols + c] * gm[c];
                                gx.data[r * cols + c] = rstd[r] * (dxh - m1 - xhat[r * cols + c] * m2);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Dropout { x, scale } => {
                    let gx = Mat::from_vec(
                        g.rows,
                        g.cols,
                        g.data.iter().zip(scale).map(|(&a, &s)| a * s).collect(),
                    );
                    acc(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let tv = self.value(*table);
                    let mut gt = Mat::zeros(tv.rows, tv.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, &v) in gt.row_mut(id).iter_mut().zip(g.row(i)) {
                            *o = *o + v;
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatSeq { a, b, batch, la, lb } => {
                    let d = g.cols;
                    let mut ga = Mat::zeros(batch * la, d);
                    let mut gb = Mat::zeros(batch * lb, d);
                    for bi in 0..*batch {
                        let src = bi * (la + lb) * d;
                        ga.data[bi * la * d..(bi + 1) * la * d].copy_from_slice(&g.data[src..src + la * d]);
                        gb.data[bi * lb * d..(bi + 1) * lb * d]
                            .copy_from_slice(&g.data[src + la * d..src + (la + lb) * d]);
                    }
                    if self.ng(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (gq, gk, gv) = self.attention_backward(*q, *k, *v, spec, probs, &g);
                    if self.ng(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.ng(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.ng(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::MaskedNll {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let lv = self.value(*logits);
                    let mut gl = Mat::zeros(lv.rows, lv.cols);
                    if *count > 0 {
                        let s = g.data[0] / T::from_usize(*count).unwrap();
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            for c in 0..lv.cols {
                                gl.data[r * lv.cols + c] = probs[r * lv.cols + c] * s;
                            }
                            gl.data[r * lv.cols + t] = gl.data[r * lv.cols + t] - s;
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[T],
        g: &Mat<T>,
    ) -> (Mat<T>, Mat<T>, Mat<T>) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols;
        let dh = d / spec.heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let (lq, lk, h) = (spec.q_len, spec.k_len, spec.heads);
        let mut gq = Mat::zeros(qv.rows, d);
        let mut gk = Mat::zeros(kv.rows, d);
        let mut gv = Mat::zeros(vv.rows, d);
        let mut dp = vec![T::zero(); lk];
        for b in 0..spec.batch {
            let kb = if spec.shared_kv { 0 } else { b };
            let valid: Vec<usize> = (0..lk).filter(|&j| spec.key_mask[kb * lk + j]).collect();
            if valid.is_empty() {
                continue;
            }
            for hh in 0..h {
                let c0 = hh * dh;
                for i in 0..lq {
                    let qoff = (b * lq + i) * d + c0;
                    let grow = &g.data[qoff..qoff + dh];
                    let prow = &probs[((b * h + hh) * lq + i) * lk..((b * h + hh) * lq + i + 1) * lk];
                    let mut dot = T::zero();
                    for &j in &valid {
                        let voff = (kb * lk + j) * d + c0;
                        let vrow = &vv.data[voff..voff + dh];
                        let s = grow.iter().zip(vrow).map(|(&a, &b)| a * b).sum::<T>();
                        dp[j] = s;
                        dot = dot + s * prow[j];
                        let p = prow[j];
                        for (o, &gg) in gv.data[voff..voff + dh].iter_mut().zip(grow) {
                            *o = *o + p * gg;
                        }
                    }
                    for &j in &valid {
                        let ds = prow[j] * (dp[j] - dot) * scale;
                        let koff = (kb * lk + j) * d + c0;
                        for c in 0..dh {
                            gq.data[qoff + c] = gq.data[qoff + c] + ds * kv.data[koff + c];
                            gk.data[koff + c] = gk.data[koff + c] + ds * qv.data[qoff + c];
                        }
                    }
                }
            }
        }
        (gq, gk, gv)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Finite-difference check of every parameter coordinate of a small graph.
    fn check<F>(params: Vec<Mat<f64>>, build: F)
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Var,
    {
        let eval = |ps: &[Mat<f64>]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| t.param(i, p.clone())).collect();
            let out = build(&mut t, &vars);
            t.value(out).data[0]
        };
        let mut t = Tape::new();
        let vars: Vec<Var> = params.iter().enumerate().map(|(i, p)| t.param(i, p.clone())).collect();
        let out = build(&mut t, &vars);
        let grads = t.backward(out);
        let h = 1e-5;
        for (pi, g) in grads {
            for c in 0..params[pi].len() {
                let mut plus = params.clone();
                plus[pi].data[c] += h;
                let mut minus = params.clone();
                minus[pi].data[c] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data[c];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "param {pi} coord {c}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gemm_transposes() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2., 3., 4., 5., 6.]);
        let b = Mat::from_vec(2, 3, vec![1.0f64, 0., 1., 0., 1., 0.]);
        let mut c = Mat::zeros(2, 2);
        gemm_into(&a, false, &b, true, 0.0, &mut c);
        assert_eq!(c.data, vec![4., 2., 10., 5.]);
        let mut c = Mat::zeros(3, 3);
        gemm_into(&a, true, &b, false, 0.0, &mut c);
        assert_eq!(c.data, vec![1., 4., 1., 2., 5., 2., 3., 6., 3.]);
    }

    #[test]
    fn grad_linear_gelu_layernorm_nll() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            rand_mat(&mut rng, 4, 6),
            rand_mat(&mut rng, 1, 6),
            rand_mat(&mut rng, 1, 6),
            rand_mat(&mut rng, 1, 6),
            rand_mat(&mut rng, 6, 5),
        ];
        let x = rand_mat(&mut rng, 3, 4);
        check(params, move |t, p| {
            let xi = t.input(x.clone());
            let h = t.matmul(xi, p[0], false);
            let h = t.add_bias(h, p[1]);
            let h = t.gelu(h);
            let h = t.layer_norm(h, p[2], p[3]);
            let logits = t.matmul(h, p[4], false);
            t.masked_nll(logits, &[Some(1), None, Some(4)])
        });
    }

    #[test]
    fn grad_attention_gather_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            rand_mat(&mut rng, 7, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 4, 3),
        ];
        check(params, |t, p| {
            // two batches: queries of length 3, keys = concat(2 rows, 2 rows)
            let x = t.gather(p[0], &[0, 1, 2, 3, 4, 5]);
            let ca = t.gather(p[0], &[6, 1, 2, 3]);
            let cb = t.gather(p[0], &[4, 5, 6, 0]);
            let cond = t.concat_seq(ca, cb, 2, 2, 2);
            let q = t.matmul(x, p[1], false);
            let k = t.matmul(cond, p[2], false);
            let v = t.matmul(cond, p[3], false);
            let spec = AttnSpec {
                batch: 2,
                q_len: 3,
                k_len: 4,
                heads: 2,
                shared_kv: false,
                key_mask: vec![true, false, true, true, true, true, false, false],
            };
            let o = t.attention(q, k, v, spec);
            let o = t.add(o, x);
            let w = t.matmul(p[4], p[4], true);
            let h = t.matmul(o, w, true);
            let logits = t.matmul(h, p[4], false);
            t.masked_nll(logits, &[Some(0), Some(1), Some(2), None, Some(2), Some(0)])
        });
    }

    #[test]
    fn grad_shared_kv_attention_and_dropout() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![rand_mat(&mut rng, 4, 4), rand_mat(&mut rng, 3, 4), rand_mat(&mut rng, 4, 5)];
        let keep: Vec<bool> = (0..16).map(|i| i % 3 != 0).collect();
        check(params, move |t, p| {
            let q = t.dropout(p[0], &keep, 0.25);
            let spec = AttnSpec {
                batch: 2,
                q_len: 2,
                k_len: 3,
                heads: 1,
                shared_kv: true,
                key_mask: vec![true, true, false],
            };
            let o = t.attention(q, p[1], p[1], spec);
            let logits = t.matmul(o, p[2], false);
            t.masked_nll(logits, &[Some(0), Some(4), Some(2), Some(3)])
        });
    }

    #[test]
    fn fully_masked_keys_give_zero_rows() {
        let mut t: Tape<f64> = Tape::new();
        let q = t.input(Mat::from_vec(1, 2, vec![1.0, 2.0]));
        let k = t.input(Mat::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let spec = AttnSpec {
            batch: 1,
            q_len: 1,
            k_len: 2,
            heads: 1,
            shared_kv: false,
            key_mask: vec![false, false],
        };
        let o = t.attention(q, k, k, spec);
        assert_eq!(t.value(o).data, vec![0.0, 0.0]);
    }

    #[test]
    fn nll_examples() {
        let mut t: Tape<f64> = Tape::new();
        let l = t.input(Mat::from_vec(1, 2, vec![0.0, 3f64.ln()]));
        let loss = t.masked_nll(l, &[Some(0)]);
        assert!((t.value(loss).data[0] - 4f64.ln()).abs() < 1e-12);
        let l = t.input(Mat::zeros(2, 7));
        let loss = t.masked_nll(l, &[None, None]);
        assert_eq!(t.value(loss).data[0], 0.0);
    }
}
