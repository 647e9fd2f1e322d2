//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and a one-shot backward closure. [`Graph::backward`] walks the tape
//! in reverse and accumulates gradients into a [`GradStore`]. The op set is
//! exactly what the model needs — embedding lookups, (batched) matmul, masked
//! softmax, layer norm, cosine/log-sum-exp machinery for contrastive losses,
//! and a fused pairwise ranking loss.
//!
//! Kernels parallelize over independent output rows, so results do not depend
//! on the number of worker threads.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

use std::sync::Arc;

use crate::tensor::{Scalar, Tensor};

mod kernels {
    use super::Scalar;
    use rayon::prelude::*;

    const PAR_THRESHOLD: usize = 1 << 14;

    /// C[m,n] = op(A) @ op(B); A is [m,k] (or [k,m] when `ta`), B is [k,n]
    /// (or [n,k] when `tb`).
    pub fn mm<S: Scalar>(
        a: &[S],
        b: &[S],
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        out: &mut [S],
    ) {
        debug_assert_eq!(out.len(), m * n);
        let run_row = |i: usize, row: &mut [S]| match (ta, tb) {
            (false, false) => {
                for l in 0..k {
                    let av = a[i * k + l];
                    if av == S::ZERO {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (false, true) => {
                let arow = &a[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    // Eight independent accumulators so the reduction
                    // vectorizes; float sums are order-sensitive, so this
                    // fixed grouping is part of the deterministic contract.
                    let mut acc = [S::ZERO; 8];
                    let mut ca = arow.chunks_exact(8);
                    let mut cb = brow.chunks_exact(8);
                    for (xa, xb) in (&mut ca).zip(&mut cb) {
                        for t in 0..8 {
                            acc[t] += xa[t] * xb[t];
                        }
                    }
                    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3]))
                        + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
                    for (&av, &bv) in ca.remainder().iter().zip(cb.remainder()) {
                        total += av * bv;
                    }
                    *o += total;
                }
            }
            (true, false) => {
                for l in 0..k {
                    let av = a[l * m + i];
                    if av == S::ZERO {
                        continue;
                    }
                    let brow = &b[l * n..(l + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
            (true, true) => {
                for (j, o) in row.iter_mut().enumerate() {
                    let mut acc = S::ZERO;
                    for l in 0..k {
                        acc += a[l * m + i] * b[j * k + l];
                    }
                    *o += acc;
                }
            }
        };
        if m * n * k >= PAR_THRESHOLD && m > 1 {
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, row)| run_row(i, row));
        } else {
            for (i, row) in out.chunks_mut(n).enumerate() {
                run_row(i, row);
            }
        }
    }

    /// Batched mm over the leading dimension.
    #[allow(clippy::too_many_arguments)]
    pub fn bmm<S: Scalar>(
        a: &[S],
        b: &[S],
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        ta: bool,
        tb: bool,
        out: &mut [S],
    ) {
        let a_sz = m * k;
        let b_sz = k * n;
        if batch * m * n * k >= PAR_THRESHOLD && batch > 1 {
            out.par_chunks_mut(m * n).enumerate().for_each(|(bi, o)| {
                mm(
                    &a[bi * a_sz..(bi + 1) * a_sz],
                    &b[bi * b_sz..(bi + 1) * b_sz],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                    o,
                );
            });
        } else {
            for (bi, o) in out.chunks_mut(m * n).enumerate() {
                mm(
                    &a[bi * a_sz..(bi + 1) * a_sz],
                    &b[bi * b_sz..(bi + 1) * b_sz],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                    o,
                );
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn<S> = Box<dyn FnOnce(&Tensor<S>, &Vals<'_, S>, &mut GradStore<S>)>;

struct Node<S: Scalar> {
    value: Tensor<S>,
    back: Option<BackwardFn<S>>,
}

pub struct Vals<'a, S: Scalar>(&'a [Node<S>]);

impl<S: Scalar> Vals<'_, S> {
    fn val(&self, v: Var) -> &Tensor<S> {
        &self.0[v.0].value
    }
}

pub struct GradStore<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> GradStore<S> {
    fn new(n: usize) -> Self {
        GradStore {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn add(&mut self, v: Var, g: Tensor<S>) {
        match &mut self.grads[v.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape());
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate into a set of rows of the gradient of `v` (shape [n, d]).
    fn add_rows(&mut self, v: Var, rows: usize, d: usize, idx: &[usize], g: &[S]) {
        let acc = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&[rows, d]));
        let data = acc.data_mut();
        for (i, &r) in idx.iter().enumerate() {
            let src = &g[i * d..(i + 1) * d];
            let dst = &mut data[r * d..(r + 1) * d];
            for (o, &x) in dst.iter_mut().zip(src) {
                *o += x;
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` never
    /// contributed to the loss.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<S> {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, back: Option<BackwardFn<S>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients accumulate here and stop.
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, None)
    }

    pub fn val(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Reverse pass from `loss` (a single-element tensor).
    pub fn backward(&mut self, loss: Var) -> GradStore<S> {
        assert_eq!(self.nodes[loss.0].value.numel(), 1, "loss must be scalar");
        let mut store = GradStore::new(self.nodes.len());
        store.add(loss, Tensor::scalar(S::ONE));
        for i in (0..=loss.0).rev() {
            let g = match store.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if let Some(back) = self.nodes[i].back.take() {
                let vals = Vals(&self.nodes);
                back(&g, &vals, &mut store);
            }
            store.grads[i] = Some(g);
        }
        store
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                store.add(a, g.clone());
                store.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                store.add(a, g.clone());
                store.add(b, g.map(|x| -x));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let gb = {
                    let va = vals.val(a);
                    Tensor::from_vec(
                        va.shape(),
                        va.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gi)| x * gi)
                            .collect(),
                    )
                };
                let ga = {
                    let vb = vals.val(b);
                    Tensor::from_vec(
                        vb.shape(),
                        vb.data()
                            .iter()
                            .zip(g.data())
                            .map(|(&x, &gi)| x * gi)
                            .collect(),
                    )
                };
                store.add(a, ga);
                store.add(b, gb);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.val(a).map(|x| x * c);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                store.add(a, g.map(|x| x * c));
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.val(a).map(|x| x.tanh());
        let y = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&t, &gi)| gi * (S::ONE - t * t))
                    .collect();
                store.add(a, Tensor::from_vec(y.shape(), data));
            })),
        )
    }

    /// Smooth GELU (tanh approximation).
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = S::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = S::from_f64(0.044715);
        let half = S::from_f64(0.5);
        let three = S::from_f64(3.0);
        let out = self.val(a).map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (S::ONE + u.tanh())
        });
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let va = vals.val(a);
                let data = va
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gi)| {
                        let u = c * (x + k * x * x * x);
                        let t = u.tanh();
                        let du = c * (S::ONE + three * k * x * x);
                        gi * (half * (S::ONE + t) + half * x * (S::ONE - t * t) * du)
                    })
                    .collect();
                store.add(a, Tensor::from_vec(va.shape(), data));
            })),
        )
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn stop_grad(&mut self, a: Var) -> Var {
        let out = self.val(a).clone();
        self.push(out, None)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.val(a).clone().reshaped(shape);
        let orig = self.val(a).shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                store.add(a, g.clone().reshaped(&orig));
            })),
        )
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, a: Var, keep: Arc<Vec<bool>>, keep_prob: f64) -> Var {
        let va = self.val(a);
        assert_eq!(va.numel(), keep.len());
        let scale = S::from_f64(1.0 / keep_prob);
        let data = va
            .data()
            .iter()
            .zip(keep.iter())
            .map(|(&x, &k)| if k { x * scale } else { S::ZERO })
            .collect();
        let out = Tensor::from_vec(va.shape(), data);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let data = g
                    .data()
                    .iter()
                    .zip(keep.iter())
                    .map(|(&gi, &k)| if k { gi * scale } else { S::ZERO })
                    .collect();
                store.add(a, Tensor::from_vec(g.shape(), data));
            })),
        )
    }

    // ---- linear algebra ----

    /// `a` is [..., k], `b` is [k, n]; result is [..., n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let k = va.last_dim();
        assert_eq!(vb.shape().len(), 2, "matmul rhs must be 2-d");
        assert_eq!(vb.shape()[0], k, "matmul inner dim");
        let m = va.leading();
        let n = vb.shape()[1];
        let mut out = vec![S::ZERO; m * n];
        kernels::mm(va.data(), vb.data(), m, k, n, false, false, &mut out);
        let mut out_shape = va.shape()[..va.shape().len() - 1].to_vec();
        out_shape.push(n);
        let out = Tensor::from_vec(&out_shape, out);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let (va, vb) = (vals.val(a), vals.val(b));
                let mut ga = vec![S::ZERO; m * k];
                kernels::mm(g.data(), vb.data(), m, n, k, false, true, &mut ga);
                let mut gb = vec![S::ZERO; k * n];
                kernels::mm(va.data(), g.data(), k, m, n, true, false, &mut gb);
                store.add(a, Tensor::from_vec(va.shape(), ga));
                store.add(b, Tensor::from_vec(vb.shape(), gb));
            })),
        )
    }

    /// Batched matmul with transpose flags: out[i] = op(a[i]) @ op(b[i]).
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape().len(), 3, "bmm lhs must be 3-d");
        assert_eq!(vb.shape().len(), 3, "bmm rhs must be 3-d");
        let batch = va.shape()[0];
        assert_eq!(vb.shape()[0], batch, "bmm batch");
        let (m, ka) = if ta {
            (va.shape()[2], va.shape()[1])
        } else {
            (va.shape()[1], va.shape()[2])
        };
        let (kb, n) = if tb {
            (vb.shape()[2], vb.shape()[1])
        } else {
            (vb.shape()[1], vb.shape()[2])
        };
        assert_eq!(ka, kb, "bmm inner dim");
        let k = ka;
        let mut out = vec![S::ZERO; batch * m * n];
        kernels::bmm(va.data(), vb.data(), batch, m, k, n, ta, tb, &mut out);
        let out = Tensor::from_vec(&[batch, m, n], out);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let (va, vb) = (vals.val(a), vals.val(b));
                let mut ga = vec![S::ZERO; va.numel()];
                let mut gb = vec![S::ZERO; vb.numel()];
                // gA = gC @ op(B)^T (or transposed when ta).
                if ta {
                    kernels::bmm(vb.data(), g.data(), batch, k, n, m, tb, true, &mut ga);
                } else {
                    kernels::bmm(g.data(), vb.data(), batch, m, n, k, false, !tb, &mut ga);
                }
                if tb {
                    kernels::bmm(g.data(), va.data(), batch, n, m, k, true, ta, &mut gb);
                } else {
                    kernels::bmm(va.data(), g.data(), batch, k, m, n, !ta, false, &mut gb);
                }
                store.add(a, Tensor::from_vec(va.shape(), ga));
                store.add(b, Tensor::from_vec(vb.shape(), gb));
            })),
        )
    }

    // ---- lookups / indexing ----

    /// Rows of `table` ([rows, d]) selected by `idx`; result [idx.len(), d].
    pub fn gather_rows(&mut self, table: Var, idx: Arc<Vec<usize>>) -> Var {
        let vt = self.val(table);
        assert_eq!(vt.shape().len(), 2, "gather_rows table must be 2-d");
        let rows = vt.shape()[0];
        let d = vt.shape()[1];
        let mut out = Vec::with_capacity(idx.len() * d);
        for &r in idx.iter() {
            debug_assert!(r < rows);
            out.extend_from_slice(&vt.data()[r * d..(r + 1) * d]);
        }
        let out = Tensor::from_vec(&[idx.len(), d], out);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                store.add_rows(table, rows, d, &idx, g.data());
            })),
        )
    }

    /// x is [B, T, d]; picks x[b, idx[b], :] per batch row; result [B, d].
    pub fn gather_time(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Var {
        let vx = self.val(x);
        assert_eq!(vx.shape().len(), 3);
        let (b, t, d) = (vx.shape()[0], vx.shape()[1], vx.shape()[2]);
        assert_eq!(idx.len(), b);
        let mut out = Vec::with_capacity(b * d);
        for (bi, &ti) in idx.iter().enumerate() {
            debug_assert!(ti < t);
            let off = (bi * t + ti) * d;
            out.extend_from_slice(&vx.data()[off..off + d]);
        }
        let out = Tensor::from_vec(&[b, d], out);
        let shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(&shape);
                for (bi, &ti) in idx.iter().enumerate() {
                    let off = (bi * t + ti) * d;
                    let dst = &mut gx.data_mut()[off..off + d];
                    for (o, &v) in dst.iter_mut().zip(&g.data()[bi * d..(bi + 1) * d]) {
                        *o += v;
                    }
                }
                store.add(x, gx);
            })),
        )
    }

    /// Column `l` of a [B, L] tensor; result [B].
    pub fn col(&mut self, x: Var, l: usize) -> Var {
        let vx = self.val(x);
        assert_eq!(vx.shape().len(), 2);
        let (b, cols) = (vx.shape()[0], vx.shape()[1]);
        assert!(l < cols);
        let out = Tensor::from_vec(
            &[b],
            (0..b).map(|i| vx.data()[i * cols + l]).collect(),
        );
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(&[b, cols]);
                for i in 0..b {
                    gx.data_mut()[i * cols + l] = g.data()[i];
                }
                store.add(x, gx);
            })),
        )
    }

    /// Single element of a 1-d tensor as a [1] tensor.
    pub fn index_elem(&mut self, x: Var, i: usize) -> Var {
        let vx = self.val(x);
        assert_eq!(vx.shape().len(), 1);
        let n = vx.shape()[0];
        assert!(i < n);
        let out = Tensor::scalar(vx.data()[i]);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(&[n]);
                gx.data_mut()[i] = g.data()[0];
                store.add(x, gx);
            })),
        )
    }

    /// Trailing-dim slice: x [..., n] -> [..., len] starting at `start`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.val(x);
        let n = vx.last_dim();
        assert!(start + len <= n);
        let lead = vx.leading();
        let mut out = Vec::with_capacity(lead * len);
        for i in 0..lead {
            out.extend_from_slice(&vx.data()[i * n + start..i * n + start + len]);
        }
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::from_vec(&shape, out);
        let full_shape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(&full_shape);
                for i in 0..lead {
                    let src = &g.data()[i * len..(i + 1) * len];
                    let dst = &mut gx.data_mut()[i * n + start..i * n + start + len];
                    dst.copy_from_slice(src);
                }
                store.add(x, gx);
            })),
        )
    }

    /// Concatenate along the trailing dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        let (pa, pb) = (va.last_dim(), vb.last_dim());
        let lead = va.leading();
        assert_eq!(lead, vb.leading(), "concat_last leading dims");
        assert_eq!(
            va.shape()[..va.shape().len() - 1],
            vb.shape()[..vb.shape().len() - 1]
        );
        let mut out = Vec::with_capacity(lead * (pa + pb));
        for i in 0..lead {
            out.extend_from_slice(&va.data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&vb.data()[i * pb..(i + 1) * pb]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().unwrap() = pa + pb;
        let out = Tensor::from_vec(&shape, out);
        let (sa, sb) = (va.shape().to_vec(), vb.shape().to_vec());
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut ga = Tensor::zeros(&sa);
                let mut gb = Tensor::zeros(&sb);
                for i in 0..lead {
                    let row = &g.data()[i * (pa + pb)..(i + 1) * (pa + pb)];
                    ga.data_mut()[i * pa..(i + 1) * pa].copy_from_slice(&row[..pa]);
                    gb.data_mut()[i * pb..(i + 1) * pb].copy_from_slice(&row[pa..]);
                }
                store.add(a, ga);
                store.add(b, gb);
            })),
        )
    }

    /// Repeat a vector [n] into [count, n].
    pub fn broadcast_rows(&mut self, v: Var, count: usize) -> Var {
        let vv = self.val(v);
        assert_eq!(vv.shape().len(), 1);
        let n = vv.shape()[0];
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(vv.data());
        }
        let out = Tensor::from_vec(&[count, n], out);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gv = Tensor::zeros(&[n]);
                for i in 0..count {
                    for (o, &x) in gv
                        .data_mut()
                        .iter_mut()
                        .zip(&g.data()[i * n..(i + 1) * n])
                    {
                        *o += x;
                    }
                }
                store.add(v, gv);
            })),
        )
    }

    /// Add a bias vector [n] to every trailing row of x [..., n].
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (vx, vb) = (self.val(x), self.val(bias));
        let n = vx.last_dim();
        assert_eq!(vb.shape(), &[n], "bias must be [last_dim]");
        let lead = vx.leading();
        let mut out = vx.data().to_vec();
        for i in 0..lead {
            for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gb = Tensor::zeros(&[n]);
                for i in 0..lead {
                    for (o, &v) in gb.data_mut().iter_mut().zip(&g.data()[i * n..(i + 1) * n]) {
                        *o += v;
                    }
                }
                store.add(x, g.clone());
                store.add(bias, gb);
            })),
        )
    }

    /// Scale contiguous blocks of `x` by entries of `s`: block i of size
    /// numel/s.len() is multiplied by s[i]. Covers per-batch alpha weighting
    /// ([B] over [B,T,d]) and pad masking ([B*T] over [B,T,d]).
    pub fn scale_blocks(&mut self, x: Var, s: Var) -> Var {
        let (vx, vs) = (self.val(x), self.val(s));
        let groups = vs.numel();
        assert_eq!(vx.numel() % groups, 0, "scale_blocks divisibility");
        let block = vx.numel() / groups;
        let mut out = vx.data().to_vec();
        for (i, &sv) in vs.data().iter().enumerate() {
            for o in &mut out[i * block..(i + 1) * block] {
                *o *= sv;
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let (vx, vs) = (vals.val(x), vals.val(s));
                let mut gx = g.clone();
                let mut gs = Tensor::zeros(vs.shape());
                for i in 0..groups {
                    let sv = vs.data()[i];
                    let mut acc = S::ZERO;
                    for j in i * block..(i + 1) * block {
                        acc += g.data()[j] * vx.data()[j];
                        gx.data_mut()[j] *= sv;
                    }
                    gs.data_mut()[i] = acc;
                }
                store.add(x, gx);
                store.add(s, gs);
            })),
        )
    }

    /// Multiply by a single-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.val(s).numel(), 1);
        let sv = self.val(s).item();
        let out = self.val(x).map(|v| v * sv);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let vx = vals.val(x);
                let sv = vals.val(s).item();
                let mut acc = S::ZERO;
                for (&gi, &xi) in g.data().iter().zip(vx.data()) {
                    acc += gi * xi;
                }
                store.add(x, g.map(|v| v * sv));
                store.add(s, Tensor::scalar(acc));
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.val(x);
        let total: S = vx.data().iter().copied().sum();
        let shape = vx.shape().to_vec();
        self.push(
            Tensor::scalar(total),
            Some(Box::new(move |g, _, store| {
                let gv = g.item();
                store.add(x, Tensor::full(&shape, gv));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.val(x).numel();
        let s = self.sum_all(x);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Mean over the first axis of a [B, n] tensor; result [n].
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let vx = self.val(x);
        assert_eq!(vx.shape().len(), 2);
        let (b, n) = (vx.shape()[0], vx.shape()[1]);
        let inv = S::from_f64(1.0 / b as f64);
        let mut out = vec![S::ZERO; n];
        for i in 0..b {
            for (o, &v) in out.iter_mut().zip(&vx.data()[i * n..(i + 1) * n]) {
                *o += v * inv;
            }
        }
        let out = Tensor::from_vec(&[n], out);
        self.push(
            out,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(&[b, n]);
                for i in 0..b {
                    for (o, &v) in gx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.data()) {
                        *o = v * inv;
                    }
                }
                store.add(x, gx);
            })),
        )
    }

    /// Row-wise dot product of equally shaped [..., d] tensors; result [...].
    pub fn rows_dot(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.val(a), self.val(b));
        assert_eq!(va.shape(), vb.shape(), "rows_dot shape mismatch");
        let d = va.last_dim();
        let lead = va.leading();
        let mut out = Vec::with_capacity(lead);
        for i in 0..lead {
            let mut acc = S::ZERO;
            for (x, y) in va.data()[i * d..(i + 1) * d]
                .iter()
                .zip(&vb.data()[i * d..(i + 1) * d])
            {
                acc += *x * *y;
            }
            out.push(acc);
        }
        let shape = va.shape()[..va.shape().len() - 1].to_vec();
        let out = Tensor::from_vec(&shape, out);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let (va, vb) = (vals.val(a), vals.val(b));
                let mut ga = Tensor::zeros(va.shape());
                let mut gb = Tensor::zeros(vb.shape());
                for i in 0..lead {
                    let gi = g.data()[i];
                    for j in i * d..(i + 1) * d {
                        ga.data_mut()[j] = gi * vb.data()[j];
                        gb.data_mut()[j] = gi * va.data()[j];
                    }
                }
                store.add(a, ga);
                store.add(b, gb);
            })),
        )
    }

    /// Dot of h [B, T, d] against each of e's K rows [B, T, K, d]; result
    /// [B, T, K].
    pub fn rows_dot_bcast(&mut self, h: Var, e: Var) -> Var {
        let (vh, ve) = (self.val(h), self.val(e));
        assert_eq!(vh.shape().len(), 3);
        assert_eq!(ve.shape().len(), 4);
        let (b, t, d) = (vh.shape()[0], vh.shape()[1], vh.shape()[2]);
        let k = ve.shape()[2];
        assert_eq!(ve.shape(), &[b, t, k, d]);
        let mut out = Vec::with_capacity(b * t * k);
        for bt in 0..b * t {
            let hrow = &vh.data()[bt * d..(bt + 1) * d];
            for ki in 0..k {
                let erow = &ve.data()[(bt * k + ki) * d..(bt * k + ki + 1) * d];
                let mut acc = S::ZERO;
                for (x, y) in hrow.iter().zip(erow) {
                    acc += *x * *y;
                }
                out.push(acc);
            }
        }
        let out = Tensor::from_vec(&[b, t, k], out);
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let (vh, ve) = (vals.val(h), vals.val(e));
                let mut gh = Tensor::zeros(vh.shape());
                let mut ge = Tensor::zeros(ve.shape());
                for bt in 0..b * t {
                    let hrow = &vh.data()[bt * d..(bt + 1) * d];
                    for ki in 0..k {
                        let gi = g.data()[bt * k + ki];
                        let eoff = (bt * k + ki) * d;
                        let erow = &ve.data()[eoff..eoff + d];
                        for j in 0..d {
                            gh.data_mut()[bt * d + j] += gi * erow[j];
                            ge.data_mut()[eoff + j] = gi * hrow[j];
                        }
                    }
                }
                store.add(h, gh);
                store.add(e, ge);
            })),
        )
    }

    // ---- normalization / softmax ----

    /// Layer norm over the trailing dimension with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let eps = S::from_f64(1e-6);
        let (vx, vg, vb) = (self.val(x), self.val(gain), self.val(bias));
        let d = vx.last_dim();
        assert_eq!(vg.shape(), &[d]);
        assert_eq!(vb.shape(), &[d]);
        let lead = vx.leading();
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::ZERO; vx.numel()];
        let mut xhat = vec![S::ZERO; vx.numel()];
        let mut inv_std = vec![S::ZERO; lead];
        for i in 0..lead {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mut mean = S::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = S::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let inv = S::ONE / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[i * d + j] = xh;
                out[i * d + j] = vg.data()[j] * xh + vb.data()[j];
            }
        }
        let out = Tensor::from_vec(vx.shape(), out);
        let xshape = vx.shape().to_vec();
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let vg = vals.val(gain);
                let mut gx = Tensor::zeros(&xshape);
                let mut ggain = Tensor::zeros(&[d]);
                let mut gbias = Tensor::zeros(&[d]);
                for i in 0..lead {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let xh = &xhat[i * d..(i + 1) * d];
                    let mut mean_dxh = S::ZERO;
                    let mut mean_dxh_xh = S::ZERO;
                    for j in 0..d {
                        let dxh = grow[j] * vg.data()[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                        ggain.data_mut()[j] += grow[j] * xh[j];
                        gbias.data_mut()[j] += grow[j];
                    }
                    mean_dxh *= inv_d;
                    mean_dxh_xh *= inv_d;
                    let inv = inv_std[i];
                    for j in 0..d {
                        let dxh = grow[j] * vg.data()[j];
                        gx.data_mut()[i * d + j] = inv * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                    }
                }
                store.add(x, gx);
                store.add(gain, ggain);
                store.add(bias, gbias);
            })),
        )
    }

    /// Unit-normalize trailing rows (for cosine similarity).
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let eps = S::from_f64(1e-12);
        let vx = self.val(x);
        let d = vx.last_dim();
        let lead = vx.leading();
        let mut out = vec![S::ZERO; vx.numel()];
        let mut norms = vec![S::ZERO; lead];
        for i in 0..lead {
            let row = &vx.data()[i * d..(i + 1) * d];
            let mut sq = S::ZERO;
            for &v in row {
                sq += v * v;
            }
            let r = sq.sqrt().maximum(eps);
            norms[i] = r;
            for j in 0..d {
                out[i * d + j] = row[j] / r;
            }
        }
        let y = Tensor::from_vec(vx.shape(), out);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(yc.shape());
                for i in 0..lead {
                    let grow = &g.data()[i * d..(i + 1) * d];
                    let yrow = &yc.data()[i * d..(i + 1) * d];
                    let mut gy = S::ZERO;
                    for j in 0..d {
                        gy += grow[j] * yrow[j];
                    }
                    let r = norms[i];
                    for j in 0..d {
                        gx.data_mut()[i * d + j] = (grow[j] - yrow[j] * gy) / r;
                    }
                }
                store.add(x, gx);
            })),
        )
    }

    /// Row-wise softmax over the trailing dimension. Entries where `mask` is
    /// false get probability zero; fully masked rows come out as all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<Arc<Vec<bool>>>) -> Var {
        let vx = self.val(x);
        if let Some(m) = &mask {
            assert_eq!(m.len(), vx.numel(), "softmax mask length");
        }
        let n = vx.last_dim();
        let lead = vx.leading();
        let mut out = vec![S::ZERO; vx.numel()];
        for i in 0..lead {
            let row = &vx.data()[i * n..(i + 1) * n];
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[i * n + j]);
            let mut maxv: Option<S> = None;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    maxv = Some(match maxv {
                        Some(m) => m.maximum(v),
                        None => v,
                    });
                }
            }
            let Some(maxv) = maxv else { continue };
            let mut denom = S::ZERO;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - maxv).exp();
                    out[i * n + j] = e;
                    denom += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= denom;
            }
        }
        let y = Tensor::from_vec(vx.shape(), out);
        let yc = y.clone();
        self.push(
            y,
            Some(Box::new(move |g, _, store| {
                let mut gx = Tensor::zeros(yc.shape());
                for i in 0..lead {
                    let yrow = &yc.data()[i * n..(i + 1) * n];
                    let grow = &g.data()[i * n..(i + 1) * n];
                    let mut dot = S::ZERO;
                    for j in 0..n {
                        dot += yrow[j] * grow[j];
                    }
                    for j in 0..n {
                        gx.data_mut()[i * n + j] = yrow[j] * (grow[j] - dot);
                    }
                }
                store.add(x, gx);
            })),
        )
    }

    /// Row-wise log-sum-exp of x [N, M] restricted to `mask`; result [N].
    /// Every row must have at least one unmasked entry.
    pub fn logsumexp_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Var {
        let vx = self.val(x);
        assert_eq!(vx.shape().len(), 2);
        let (rows, m) = (vx.shape()[0], vx.shape()[1]);
        assert_eq!(mask.len(), rows * m);
        let mut out = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = &vx.data()[i * m..(i + 1) * m];
            let mut maxv: Option<S> = None;
            for j in 0..m {
                if mask[i * m + j] {
                    maxv = Some(match maxv {
                        Some(mv) => mv.maximum(row[j]),
                        None => row[j],
                    });
                }
            }
            let maxv = maxv.expect("logsumexp row fully masked");
            let mut acc = S::ZERO;
            for j in 0..m {
                if mask[i * m + j] {
                    acc += (row[j] - maxv).exp();
                }
            }
            out.push(maxv + acc.ln());
        }
        let out = Tensor::from_vec(&[rows], out);
        let lse = out.clone();
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                let vx = vals.val(x);
                let mut gx = Tensor::zeros(&[rows, m]);
                for i in 0..rows {
                    let gi = g.data()[i];
                    for j in 0..m {
                        if mask[i * m + j] {
                            gx.data_mut()[i * m + j] =
                                gi * (vx.data()[i * m + j] - lse.data()[i]).exp();
                        }
                    }
                }
                store.add(x, gx);
            })),
        )
    }

    // ---- fused losses ----

    /// Mean over valid positions and negatives of -log sigmoid(pos - neg).
    /// pos is [B, T], neg is [B, T, K], valid flags cover [B*T].
    pub fn pairwise_rank_loss(&mut self, pos: Var, neg: Var, valid: Arc<Vec<bool>>) -> Var {
        let (vp, vn) = (self.val(pos), self.val(neg));
        let bt = vp.numel();
        assert_eq!(vn.numel() % bt, 0);
        let k = vn.numel() / bt;
        assert_eq!(valid.len(), bt);
        let count = valid.iter().filter(|&&v| v).count() * k;
        let mut total = 0.0f64;
        for i in 0..bt {
            if !valid[i] {
                continue;
            }
            let p = vp.data()[i].to_f64();
            for j in 0..k {
                let z = vn.data()[i * k + j].to_f64() - p;
                // softplus(z) = -ln sigmoid(pos - neg)
                total += z.max(0.0) + (-z.abs()).exp().ln_1p();
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let out = Tensor::scalar(S::from_f64(loss));
        self.push(
            out,
            Some(Box::new(move |g, vals, store| {
                if count == 0 {
                    return;
                }
                let (vp, vn) = (vals.val(pos), vals.val(neg));
                let gscale = g.item().to_f64() / count as f64;
                let mut gp = Tensor::zeros(vp.shape());
                let mut gn = Tensor::zeros(vn.shape());
                for i in 0..bt {
                    if !valid[i] {
                        continue;
                    }
                    let p = vp.data()[i].to_f64();
                    let mut acc = 0.0f64;
                    for j in 0..k {
                        let z = vn.data()[i * k + j].to_f64() - p;
                        let sig = if z >= 0.0 {
                            1.0 / (1.0 + (-z).exp())
                        } else {
                            let e = z.exp();
                            e / (1.0 + e)
                        };
                        gn.data_mut()[i * k + j] = S::from_f64(gscale * sig);
                        acc += sig;
                    }
                    gp.data_mut()[i] = S::from_f64(-gscale * acc);
                }
                store.add(pos, gp);
                store.add(neg, gn);
            })),
        )
    }
}
