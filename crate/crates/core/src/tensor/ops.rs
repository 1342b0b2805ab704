//! Forward construction and backward rules for every op.

use super::{numel, shape_err, Graph, Op, TensorError, TensorId};
use crate::real::Real;

// ---------------------------------------------------------------------------
// Matmul kernels. Written so the inner loops run over contiguous memory.
// ---------------------------------------------------------------------------

/// c[n,m] += a[n,k] * b[k,m]
pub(crate) fn mm_nn<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let ci = &mut c[i * m..(i + 1) * m];
        for (p, &ap) in ai.iter().enumerate() {
            let bp = &b[p * m..(p + 1) * m];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += ap * bv;
            }
        }
    }
}

/// c[n,m] += a^T * b  with a[k,n], b[k,m]
pub(crate) fn mm_tn<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    for p in 0..k {
        let ap = &a[p * n..(p + 1) * n];
        let bp = &b[p * m..(p + 1) * m];
        for (i, &av) in ap.iter().enumerate() {
            let ci = &mut c[i * m..(i + 1) * m];
            for (cv, &bv) in ci.iter_mut().zip(bp) {
                *cv += av * bv;
            }
        }
    }
}

/// c[n,m] += a * b^T  with a[n,k], b[m,k]
pub(crate) fn mm_nt<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let ci = &mut c[i * m..(i + 1) * m];
        for (j, cv) in ci.iter_mut().enumerate() {
            let bj = &b[j * k..(j + 1) * k];
            let mut acc = R::ZERO;
            for (&av, &bv) in ai.iter().zip(bj) {
                acc += av * bv;
            }
            *cv += acc;
        }
    }
}

/// c[n,m] += a * b^T with the shared width known at compile time, so the
/// inner dot products unroll and vectorize.
fn mm_nt_fixed<const K: usize, R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, m: usize) {
    for i in 0..n {
        let ai: &[R; K] = a[i * K..(i + 1) * K].try_into().ok().unwrap();
        let ci = &mut c[i * m..(i + 1) * m];
        for (j, cv) in ci.iter_mut().enumerate() {
            let bj: &[R; K] = b[j * K..(j + 1) * K].try_into().ok().unwrap();
            let mut acc = R::ZERO;
            for t in 0..K {
                acc += ai[t] * bj[t];
            }
            *cv += acc;
        }
    }
}

fn mm_nt_small<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    match k {
        4 => mm_nt_fixed::<4, R>(a, b, c, n, m),
        8 => mm_nt_fixed::<8, R>(a, b, c, n, m),
        16 => mm_nt_fixed::<16, R>(a, b, c, n, m),
        32 => mm_nt_fixed::<32, R>(a, b, c, n, m),
        64 => mm_nt_fixed::<64, R>(a, b, c, n, m),
        _ => mm_nt(a, b, c, n, k, m),
    }
}

/// c[n,M] += a[n,k] * b[k,M] with the output width known at compile time.
fn mm_nn_fixed<const M: usize, R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize) {
    for i in 0..n {
        let ai = &a[i * k..(i + 1) * k];
        let ci: &mut [R; M] = (&mut c[i * M..(i + 1) * M]).try_into().ok().unwrap();
        for (p, &ap) in ai.iter().enumerate() {
            let bp: &[R; M] = b[p * M..(p + 1) * M].try_into().ok().unwrap();
            for t in 0..M {
                ci[t] += ap * bp[t];
            }
        }
    }
}

fn mm_nn_small<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    match m {
        4 => mm_nn_fixed::<4, R>(a, b, c, n, k),
        8 => mm_nn_fixed::<8, R>(a, b, c, n, k),
        16 => mm_nn_fixed::<16, R>(a, b, c, n, k),
        32 => mm_nn_fixed::<32, R>(a, b, c, n, k),
        _ => mm_nn(a, b, c, n, k, m),
    }
}

/// c[n,M] += a^T * b with a[k,n], b[k,M], output width fixed.
fn mm_tn_fixed<const M: usize, R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize) {
    for p in 0..k {
        let ap = &a[p * n..(p + 1) * n];
        let bp: &[R; M] = b[p * M..(p + 1) * M].try_into().ok().unwrap();
        for (i, &av) in ap.iter().enumerate() {
            let ci: &mut [R; M] = (&mut c[i * M..(i + 1) * M]).try_into().ok().unwrap();
            for t in 0..M {
                ci[t] += av * bp[t];
            }
        }
    }
}

fn mm_tn_small<R: Real>(a: &[R], b: &[R], c: &mut [R], n: usize, k: usize, m: usize) {
    match m {
        4 => mm_tn_fixed::<4, R>(a, b, c, n, k),
        8 => mm_tn_fixed::<8, R>(a, b, c, n, k),
        16 => mm_tn_fixed::<16, R>(a, b, c, n, k),
        32 => mm_tn_fixed::<32, R>(a, b, c, n, k),
        _ => mm_tn(a, b, c, n, k, m),
    }
}

/// Copy one head's columns out of an interleaved [n, d] block.
fn gather_head<R: Real>(
    src: &[R],
    dst: &mut [R],
    base: usize,
    col: usize,
    n: usize,
    d: usize,
    dh: usize,
) {
    for i in 0..n {
        dst[i * dh..(i + 1) * dh]
            .copy_from_slice(&src[base + i * d + col..base + i * d + col + dh]);
    }
}

/// Add one head's columns back into an interleaved [n, d] block.
fn scatter_head<R: Real>(
    src: &[R],
    dst: &mut [R],
    base: usize,
    col: usize,
    n: usize,
    d: usize,
    dh: usize,
) {
    for i in 0..n {
        let out = &mut dst[base + i * d + col..base + i * d + col + dh];
        for (o, &v) in out.iter_mut().zip(&src[i * dh..(i + 1) * dh]) {
            *o += v;
        }
    }
}

// Gating slope of the smooth activation below.
const GATE_ALPHA: f64 = 1.5;

/// Smooth gated activation: x * 0.5 * (1 + u / sqrt(1 + u^2)) with u = a*x.
/// Shaped like the usual transformer gating nonlinearity but built from an
/// algebraic sigmoid, so it is infinitely differentiable and needs no
/// transcendental calls.
/// (outer, mid, inner) strides around one axis.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_fwd<R: Real>(x: R) -> R {
    let a = R::from_f64(GATE_ALPHA);
    let half = R::from_f64(0.5);
    let u = a * x;
    let s = u / (R::ONE + u * u).sqrt();
    half * x * (R::ONE + s)
}

fn gelu_bwd<R: Real>(x: R) -> R {
    let a = R::from_f64(GATE_ALPHA);
    let half = R::from_f64(0.5);
    let u = a * x;
    let w = R::ONE + u * u;
    let rw = R::ONE / w.sqrt();
    let s = u * rw;
    // d/dx [x/2 (1 + s)] = (1 + s)/2 + x/2 * a * (1+u^2)^(-3/2)
    half * (R::ONE + s) + half * x * a * rw / w
}

const LN_EPS: f64 = 1e-5;

impl<R: Real> Graph<R> {
    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("add", a, b)?;
        let vals = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), vals, Op::Add(a.0, b.0), ng))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("sub", a, b)?;
        let vals = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), vals, Op::Sub(a.0, b.0), ng))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mul", a, b)?;
        let vals = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(self.shape(a).to_vec(), vals, Op::Mul(a.0, b.0), ng))
    }

    /// b's shape must be a suffix of a's shape; b repeats over leading dims.
    pub fn add_broadcast(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..] {
            return Err(shape_err("add_broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let bn = numel(&sb);
        let av = self.values(a);
        let bv = self.values(b);
        let mut vals = vec![R::ZERO; av.len()];
        for (chunk, src) in vals.chunks_mut(bn).zip(av.chunks(bn)) {
            for ((o, &x), &y) in chunk.iter_mut().zip(src).zip(bv) {
                *o = x + y;
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(sa, vals, Op::AddBroadcast(a.0, b.0), ng))
    }

    pub fn affine(&mut self, x: TensorId, mul: f64, add: f64) -> TensorId {
        let m = R::from_f64(mul);
        let c = R::from_f64(add);
        let vals = self.values(x).iter().map(|&v| m * v + c).collect();
        let ng = self.ng(&[x.0]);
        self.push(
            self.shape(x).to_vec(),
            vals,
            Op::AffineScalar { x: x.0, mul },
            ng,
        )
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut vals = vec![R::ZERO; n * m];
        mm_nn(self.values(a), self.values(b), &mut vals, n, k, m);
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(vec![n, m], vals, Op::Matmul(a.0, b.0), ng))
    }

    pub fn batch_matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("batch_matmul", format!("{sa:?} x {sb:?}")));
        }
        let (g, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut vals = vec![R::ZERO; g * n * m];
        for gi in 0..g {
            mm_nn(
                &self.values(a)[gi * n * k..(gi + 1) * n * k],
                &self.values(b)[gi * k * m..(gi + 1) * k * m],
                &mut vals[gi * n * m..(gi + 1) * n * m],
                n,
                k,
                m,
            );
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(vec![g, n, m], vals, Op::BatchMatmul(a.0, b.0), ng))
    }

    pub fn transpose(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("{s:?}")));
        }
        let (n, m) = (s[0], s[1]);
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; n * m];
        for i in 0..n {
            for j in 0..m {
                vals[j * n + i] = xv[i * m + j];
            }
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(vec![m, n], vals, Op::Transpose(x.0), ng))
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId, TensorError> {
        if numel(new_shape) != numel(self.shape(x)) {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {new_shape:?}", self.shape(x)),
            ));
        }
        let vals = self.values(x).to_vec();
        let ng = self.ng(&[x.0]);
        Ok(self.push(new_shape.to_vec(), vals, Op::Reshape(x.0), ng))
    }

    pub fn concat(&mut self, inputs: &[TensorId], axis: usize) -> Result<TensorId, TensorError> {
        assert!(!inputs.is_empty());
        let rank = self.shape(inputs[0]).len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let mut out_shape = self.shape(inputs[0]).to_vec();
        let mut mid_total = 0;
        for &id in inputs {
            let s = self.shape(id);
            if s.len() != rank
                || s[..axis] != out_shape[..axis]
                || s[axis + 1..] != out_shape[axis + 1..]
            {
                return Err(shape_err("concat", format!("{s:?} vs {out_shape:?}")));
            }
            mid_total += s[axis];
        }
        out_shape[axis] = mid_total;
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let mut vals = vec![R::ZERO; numel(&out_shape)];
        let mut offset = 0;
        for &id in inputs {
            let mid = self.shape(id)[axis];
            let xv = self.values(id);
            for o in 0..outer {
                let src = &xv[o * mid * inner..(o + 1) * mid * inner];
                let dst_base = o * mid_total * inner + offset * inner;
                vals[dst_base..dst_base + mid * inner].copy_from_slice(src);
            }
            offset += mid;
        }
        let ids: Vec<usize> = inputs.iter().map(|t| t.0).collect();
        let ng = self.ng(&ids);
        Ok(self.push(out_shape, vals, Op::Concat { inputs: ids, axis }, ng))
    }

    pub fn slice_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        start: usize,
        len: usize,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        if start + len > s[axis] {
            return Err(shape_err(
                "slice_axis",
                format!("range {start}..{} out of {}", start + len, s[axis]),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mid = s[axis];
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &xv[(o * mid + start) * inner..(o * mid + start + len) * inner];
            vals[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            out_shape,
            vals,
            Op::SliceAxis {
                x: x.0,
                axis,
                start,
                len,
            },
            ng,
        ))
    }

    /// Pick the listed slots of one axis, in the given order.
    pub fn gather_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        idxs: &[usize],
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        if idxs.iter().any(|&i| i >= mid) {
            return Err(shape_err("gather_axis", format!("index out of {mid}")));
        }
        let k = idxs.len();
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; outer * k * inner];
        for o in 0..outer {
            for (j, &idx) in idxs.iter().enumerate() {
                let src = &xv[(o * mid + idx) * inner..(o * mid + idx + 1) * inner];
                vals[(o * k + j) * inner..(o * k + j + 1) * inner].copy_from_slice(src);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = k;
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            out_shape,
            vals,
            Op::GatherAxis {
                x: x.0,
                axis,
                idxs: idxs.to_vec(),
            },
            ng,
        ))
    }

    /// Gather slots along axis 1 of a rank-3 tensor.
    pub fn gather_mid(&mut self, x: TensorId, idxs: &[usize]) -> Result<TensorId, TensorError> {
        if self.shape(x).len() != 3 {
            return Err(shape_err(
                "gather_mid",
                format!("{:?} not rank 3", self.shape(x)),
            ));
        }
        self.gather_axis(x, 1, idxs)
    }

    /// Write the slots of one axis into a zero tensor with `out_dim` slots
    /// on that axis, at the given indices.
    pub fn scatter_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        idxs: &[usize],
        out_dim: usize,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        if s[axis] != idxs.len() {
            return Err(shape_err(
                "scatter_axis",
                format!("{s:?} with {} indices", idxs.len()),
            ));
        }
        if idxs.iter().any(|&i| i >= out_dim) {
            return Err(shape_err("scatter_axis", format!("index out of {out_dim}")));
        }
        let (outer, k, inner) = split_at_axis(&s, axis);
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; outer * out_dim * inner];
        for o in 0..outer {
            for (j, &idx) in idxs.iter().enumerate() {
                let src = &xv[(o * k + j) * inner..(o * k + j + 1) * inner];
                vals[(o * out_dim + idx) * inner..(o * out_dim + idx + 1) * inner]
                    .copy_from_slice(src);
            }
        }
        let mut out_shape = s;
        out_shape[axis] = out_dim;
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            out_shape,
            vals,
            Op::ScatterAxis {
                x: x.0,
                axis,
                idxs: idxs.to_vec(),
                out_dim,
            },
            ng,
        ))
    }

    /// Scatter along axis 1 of a rank-3 tensor.
    pub fn scatter_mid(
        &mut self,
        x: TensorId,
        idxs: &[usize],
        out_dim: usize,
    ) -> Result<TensorId, TensorError> {
        if self.shape(x).len() != 3 {
            return Err(shape_err(
                "scatter_mid",
                format!("{:?} not rank 3", self.shape(x)),
            ));
        }
        self.scatter_axis(x, 1, idxs, out_dim)
    }

    /// Repeat every slot of one axis `factor` times, in place.
    pub fn replicate_axis(
        &mut self,
        x: TensorId,
        axis: usize,
        factor: usize,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        if factor == 0 {
            return Err(shape_err("replicate_axis", format!("{s:?} x{factor}")));
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; outer * mid * factor * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xv[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                for f in 0..factor {
                    let dst = (o * mid * factor + m * factor + f) * inner;
                    vals[dst..dst + inner].copy_from_slice(src);
                }
            }
        }
        let mut out_shape = s;
        out_shape[axis] *= factor;
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            out_shape,
            vals,
            Op::ReplicateAxis {
                x: x.0,
                axis,
                factor,
            },
            ng,
        ))
    }

    /// Repeat every axis-1 slot of a rank-3 tensor `factor` times.
    pub fn replicate_mid(&mut self, x: TensorId, factor: usize) -> Result<TensorId, TensorError> {
        if self.shape(x).len() != 3 {
            return Err(shape_err(
                "replicate_mid",
                format!("{:?} not rank 3", self.shape(x)),
            ));
        }
        self.replicate_axis(x, 1, factor)
    }

    /// Mean over non-overlapping windows of `window` frames along axis 1,
    /// counting only frames whose mask entry is true. Fully masked windows
    /// produce zeros.
    pub fn masked_window_mean(
        &mut self,
        x: TensorId,
        window: usize,
        mask: &[bool],
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || window == 0 || s[1] % window != 0 {
            return Err(shape_err(
                "masked_window_mean",
                format!("{s:?} window {window}"),
            ));
        }
        let (g, t, d) = (s[0], s[1], s[2]);
        if mask.len() != g * t {
            return Err(shape_err(
                "masked_window_mean",
                format!("mask has {} entries, expected {}", mask.len(), g * t),
            ));
        }
        let slots = t / window;
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; g * slots * d];
        for gi in 0..g {
            for si in 0..slots {
                let mut count = 0usize;
                let out = (gi * slots + si) * d;
                for f in si * window..(si + 1) * window {
                    if mask[gi * t + f] {
                        count += 1;
                        let src = &xv[(gi * t + f) * d..(gi * t + f + 1) * d];
                        for (o, &v) in vals[out..out + d].iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                }
                if count > 0 {
                    let inv = R::from_f64(1.0 / count as f64);
                    for o in &mut vals[out..out + d] {
                        *o *= inv;
                    }
                }
            }
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(
            vec![g, slots, d],
            vals,
            Op::MaskedWindowMean {
                x: x.0,
                window,
                mask: std::rc::Rc::new(mask.to_vec()),
            },
            ng,
        ))
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.values(x).len();
        let sum: R = self.values(x).iter().copied().sum();
        let vals = vec![sum * R::from_f64(1.0 / n as f64)];
        let ng = self.ng(&[x.0]);
        self.push(vec![1], vals, Op::MeanAll(x.0), ng)
    }

    /// Softmax along one axis.
    pub fn softmax_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |m: usize| (o * mid + m) * inner + i;
                let mut mx = xv[at(0)];
                for m in 1..mid {
                    mx = mx.maximum(xv[at(m)]);
                }
                let mut sum = R::ZERO;
                for m in 0..mid {
                    let e = (xv[at(m)] - mx).exp();
                    vals[at(m)] = e;
                    sum += e;
                }
                let inv = R::ONE / sum;
                for m in 0..mid {
                    vals[at(m)] *= inv;
                }
            }
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(s, vals, Op::Softmax { x: x.0, axis }, ng))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let rank = self.shape(x).len();
        if rank == 0 {
            return Err(shape_err("softmax", "rank 0".into()));
        }
        self.softmax_axis(x, rank - 1)
    }

    /// Mean over one axis, dropping it from the shape.
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(TensorError::InvalidAxis {
                axis,
                rank: s.len(),
            });
        }
        let (outer, mid, inner) = split_at_axis(&s, axis);
        let xv = self.values(x);
        let inv = R::from_f64(1.0 / mid as f64);
        let mut vals = vec![R::ZERO; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                let src = &xv[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                let dst = &mut vals[o * inner..(o + 1) * inner];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
        for v in &mut vals {
            *v *= inv;
        }
        let mut out_shape = s;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(out_shape, vals, Op::MeanAxis { x: x.0, axis }, ng))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        let d = *s
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank 0".into()))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gain {:?} bias {:?} for width {d}",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = numel(&s) / d;
        let xv = self.values(x);
        let gv = self.values(gain);
        let bv = self.values(bias);
        let mut vals = vec![R::ZERO; xv.len()];
        // saved: xhat (rows*d) then rstd (rows)
        let mut saved = vec![R::ZERO; rows * d + rows];
        let inv_d = R::from_f64(1.0 / d as f64);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mut mean = R::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_d;
            let mut var = R::ZERO;
            for &v in row {
                let c = v - mean;
                var += c * c;
            }
            var *= inv_d;
            let rstd = R::ONE / (var + R::from_f64(LN_EPS)).sqrt();
            saved[rows * d + r] = rstd;
            for i in 0..d {
                let xh = (row[i] - mean) * rstd;
                saved[r * d + i] = xh;
                vals[r * d + i] = gv[i] * xh + bv[i];
            }
        }
        let ng = self.ng(&[x.0, gain.0, bias.0]);
        Ok(self.push_saved(
            s,
            vals,
            saved,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
            },
            ng,
        ))
    }

    /// x[..., in] * w[in, out] + b[out]
    pub fn linear(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
    ) -> Result<TensorId, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let sb = self.shape(b).to_vec();
        let d_in = *sx
            .last()
            .ok_or_else(|| shape_err("linear", "rank 0 input".into()))?;
        if sw.len() != 2 || sw[0] != d_in || sb != [sw[1]] {
            return Err(shape_err(
                "linear",
                format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            ));
        }
        let d_out = sw[1];
        let rows = numel(&sx) / d_in;
        let mut vals = vec![R::ZERO; rows * d_out];
        mm_nn(self.values(x), self.values(w), &mut vals, rows, d_in, d_out);
        let bv = self.values(b);
        for r in 0..rows {
            for (o, &bb) in vals[r * d_out..(r + 1) * d_out].iter_mut().zip(bv) {
                *o += bb;
            }
        }
        let mut out_shape = sx;
        *out_shape.last_mut().unwrap() = d_out;
        let ng = self.ng(&[x.0, w.0, b.0]);
        Ok(self.push(
            out_shape,
            vals,
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            ng,
        ))
    }

    /// Multi-head attention over already-projected q, k, v of shape
    /// [groups, tokens, width]. `key_mask` (groups*tokens, true = valid)
    /// hides keys; `causal` hides keys beyond each query position.
    pub fn multi_head_attention(
        &mut self,
        q: TensorId,
        k: TensorId,
        v: TensorId,
        heads: usize,
        causal: bool,
        key_mask: Option<&[bool]>,
    ) -> Result<TensorId, TensorError> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s || self.shape(v) != s {
            return Err(shape_err(
                "multi_head_attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let (g, n, d) = (s[0], s[1], s[2]);
        if heads == 0 || d % heads != 0 {
            return Err(shape_err(
                "multi_head_attention",
                format!("width {d} not divisible by {heads} heads"),
            ));
        }
        if let Some(m) = key_mask {
            if m.len() != g * n {
                return Err(shape_err(
                    "multi_head_attention",
                    format!("key mask has {} entries, expected {}", m.len(), g * n),
                ));
            }
        }
        let dh = d / heads;
        let scale = R::from_f64(1.0 / (dh as f64).sqrt());
        let qv = self.values(q);
        let kv = self.values(k);
        let vv = self.values(v);
        let mut vals = vec![R::ZERO; g * n * d];
        let mut saved = vec![R::ZERO; g * heads * n * n];
        // contiguous per-head work buffers so the matmul kernels do the work
        let mut qh = vec![R::ZERO; n * dh];
        let mut kh = vec![R::ZERO; n * dh];
        let mut vh = vec![R::ZERO; n * dh];
        let mut oh = vec![R::ZERO; n * dh];
        for gi in 0..g {
            let base = gi * n * d;
            for h in 0..heads {
                let col = h * dh;
                gather_head(qv, &mut qh, base, col, n, d, dh);
                gather_head(kv, &mut kh, base, col, n, d, dh);
                gather_head(vv, &mut vh, base, col, n, d, dh);
                let a_block = &mut saved[(gi * heads + h) * n * n..(gi * heads + h + 1) * n * n];
                // raw scores
                mm_nt_small(&qh, &kh, a_block, n, dh, n);
                if !causal && key_mask.is_none() {
                    // fast path: plain softmax rows
                    for i in 0..n {
                        let row = &mut a_block[i * n..(i + 1) * n];
                        let mut mx = row[0] * scale;
                        for r in row.iter_mut() {
                            *r *= scale;
                            mx = mx.maximum(*r);
                        }
                        let mut sum = R::ZERO;
                        for r in row.iter_mut() {
                            *r = (*r - mx).exp();
                            sum += *r;
                        }
                        let inv = R::ONE / sum;
                        for r in row.iter_mut() {
                            *r *= inv;
                        }
                    }
                } else {
                    for i in 0..n {
                        let limit = if causal { i + 1 } else { n };
                        let row = &mut a_block[i * n..(i + 1) * n];
                        let mut best: Option<R> = None;
                        for (j, r) in row.iter_mut().enumerate() {
                            if j >= limit || key_mask.map_or(false, |m| !m[gi * n + j]) {
                                continue;
                            }
                            *r *= scale;
                            best = Some(match best {
                                None => *r,
                                Some(b) => b.maximum(*r),
                            });
                        }
                        if let Some(mx) = best {
                            let mut sum = R::ZERO;
                            for (j, r) in row.iter_mut().enumerate() {
                                if j >= limit || key_mask.map_or(false, |m| !m[gi * n + j]) {
                                    *r = R::ZERO;
                                } else {
                                    *r = (*r - mx).exp();
                                    sum += *r;
                                }
                            }
                            let inv = R::ONE / sum;
                            for r in row.iter_mut() {
                                *r *= inv;
                            }
                        } else {
                            // every key hidden: attention contributes nothing
                            for r in row.iter_mut() {
                                *r = R::ZERO;
                            }
                        }
                    }
                }
                oh.fill(R::ZERO);
                mm_nn_small(a_block, &vh, &mut oh, n, n, dh);
                scatter_head(&oh, &mut vals, base, col, n, d, dh);
            }
        }
        let ng = self.ng(&[q.0, k.0, v.0]);
        Ok(self.push_saved(
            vec![g, n, d],
            vals,
            saved,
            Op::Mha {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let vals = self.values(x).iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.ng(&[x.0]);
        self.push(self.shape(x).to_vec(), vals, Op::Gelu(x.0), ng)
    }

    /// Cosine similarity of each row pair: [n,d] x [n,d] -> [n].
    pub fn cosine_rows(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("cosine_rows", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(shape_err("cosine_rows", format!("{s:?} not rank 2")));
        }
        let (n, d) = (s[0], s[1]);
        let av = self.values(a);
        let bv = self.values(b);
        let eps = R::norm_eps();
        let mut vals = vec![R::ZERO; n];
        for r in 0..n {
            let (mut dot, mut na, mut nb) = (R::ZERO, R::ZERO, R::ZERO);
            for i in 0..d {
                let x = av[r * d + i];
                let y = bv[r * d + i];
                dot += x * y;
                na += x * x;
                nb += y * y;
            }
            vals[r] = dot / ((na + eps).sqrt() * (nb + eps).sqrt());
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(vec![n], vals, Op::CosineRows(a.0, b.0), ng))
    }

    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mse", a, b)?;
        let n = self.values(a).len();
        let mut sum = R::ZERO;
        for (&x, &y) in self.values(a).iter().zip(self.values(b)) {
            let c = x - y;
            sum += c * c;
        }
        let vals = vec![sum * R::from_f64(1.0 / n as f64)];
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(vec![1], vals, Op::MseAll(a.0, b.0), ng))
    }

    /// sum(mask * (a - b)^2) / denom
    pub fn masked_mse(
        &mut self,
        a: TensorId,
        b: TensorId,
        mask: &[bool],
        denom: f64,
    ) -> Result<TensorId, TensorError> {
        self.same_shape("masked_mse", a, b)?;
        let n = self.values(a).len();
        if mask.len() != n {
            return Err(shape_err(
                "masked_mse",
                format!("mask has {} entries for {} values", mask.len(), n),
            ));
        }
        if denom <= 0.0 {
            return Err(shape_err("masked_mse", format!("denominator {denom}")));
        }
        let mut sum = R::ZERO;
        for i in 0..n {
            if mask[i] {
                let c = self.values(a)[i] - self.values(b)[i];
                sum += c * c;
            }
        }
        let vals = vec![sum * R::from_f64(1.0 / denom)];
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(
            vec![1],
            vals,
            Op::MaskedMse {
                a: a.0,
                b: b.0,
                mask: std::rc::Rc::new(mask.to_vec()),
                denom,
            },
            ng,
        ))
    }

    pub fn l2_norm(&mut self, x: TensorId) -> TensorId {
        let mut sum = R::ZERO;
        for &v in self.values(x) {
            sum += v * v;
        }
        let vals = vec![(sum + R::norm_eps()).sqrt()];
        let ng = self.ng(&[x.0]);
        self.push(vec![1], vals, Op::L2NormAll(x.0), ng)
    }

    /// Rows of a [n,3] tensor scaled to unit length, epsilon-stabilized.
    pub fn normalize3(&mut self, x: TensorId) -> Result<TensorId, TensorError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[1] != 3 {
            return Err(shape_err("normalize3", format!("{s:?} not [n,3]")));
        }
        let n = s[0];
        let xv = self.values(x);
        let eps = R::norm_eps();
        let mut vals = vec![R::ZERO; n * 3];
        for r in 0..n {
            let (a, b, c) = (xv[r * 3], xv[r * 3 + 1], xv[r * 3 + 2]);
            let inv = R::ONE / (a * a + b * b + c * c + eps).sqrt();
            vals[r * 3] = a * inv;
            vals[r * 3 + 1] = b * inv;
            vals[r * 3 + 2] = c * inv;
        }
        let ng = self.ng(&[x.0]);
        Ok(self.push(s, vals, Op::Normalize3(x.0), ng))
    }

    /// Row-wise dot product: [n,3] . [n,3] -> [n,1].
    pub fn dot3(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("dot3", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 3 {
            return Err(shape_err("dot3", format!("{s:?} not [n,3]")));
        }
        let n = s[0];
        let av = self.values(a);
        let bv = self.values(b);
        let vals = (0..n)
            .map(|r| {
                av[r * 3] * bv[r * 3] + av[r * 3 + 1] * bv[r * 3 + 1] + av[r * 3 + 2] * bv[r * 3 + 2]
            })
            .collect();
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(vec![n, 1], vals, Op::Dot3(a.0, b.0), ng))
    }

    /// Row-wise cross product of [n,3] tensors.
    pub fn cross3(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("cross3", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 3 {
            return Err(shape_err("cross3", format!("{s:?} not [n,3]")));
        }
        let n = s[0];
        let av = self.values(a);
        let bv = self.values(b);
        let mut vals = vec![R::ZERO; n * 3];
        for r in 0..n {
            let (a0, a1, a2) = (av[r * 3], av[r * 3 + 1], av[r * 3 + 2]);
            let (b0, b1, b2) = (bv[r * 3], bv[r * 3 + 1], bv[r * 3 + 2]);
            vals[r * 3] = a1 * b2 - a2 * b1;
            vals[r * 3 + 1] = a2 * b0 - a0 * b2;
            vals[r * 3 + 2] = a0 * b1 - a1 * b0;
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(s, vals, Op::Cross3(a.0, b.0), ng))
    }

    /// s[n,1] broadcast-multiplied into x[n,d].
    pub fn mul_bcast_last(&mut self, s: TensorId, x: TensorId) -> Result<TensorId, TensorError> {
        let ss = self.shape(s).to_vec();
        let sx = self.shape(x).to_vec();
        if ss.len() != 2 || ss[1] != 1 || sx.len() != 2 || ss[0] != sx[0] {
            return Err(shape_err("mul_bcast_last", format!("{ss:?} x {sx:?}")));
        }
        let (n, d) = (sx[0], sx[1]);
        let sv = self.values(s);
        let xv = self.values(x);
        let mut vals = vec![R::ZERO; n * d];
        for r in 0..n {
            for i in 0..d {
                vals[r * d + i] = sv[r] * xv[r * d + i];
            }
        }
        let ng = self.ng(&[s.0, x.0]);
        Ok(self.push(sx, vals, Op::MulBcastLast { s: s.0, x: x.0 }, ng))
    }

    /// Column-major 3x3 matrix products: [n,9] x [n,9] -> [n,9].
    pub fn mat3_mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.same_shape("mat3_mul", a, b)?;
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[1] != 9 {
            return Err(shape_err("mat3_mul", format!("{s:?} not [n,9]")));
        }
        let n = s[0];
        let av = self.values(a);
        let bv = self.values(b);
        let mut vals = vec![R::ZERO; n * 9];
        for item in 0..n {
            let a9 = &av[item * 9..item * 9 + 9];
            let b9 = &bv[item * 9..item * 9 + 9];
            let c9 = &mut vals[item * 9..item * 9 + 9];
            for c in 0..3 {
                for r in 0..3 {
                    let mut acc = R::ZERO;
                    for k in 0..3 {
                        acc += a9[k * 3 + r] * b9[c * 3 + k];
                    }
                    c9[c * 3 + r] = acc;
                }
            }
        }
        let ng = self.ng(&[a.0, b.0]);
        Ok(self.push(s, vals, Op::Mat3Mul(a.0, b.0), ng))
    }

    /// Column-major 3x3 matrices applied to one constant 3-vector.
    pub fn mat3_vec_const(&mut self, m: TensorId, v: [f64; 3]) -> Result<TensorId, TensorError> {
        let s = self.shape(m).to_vec();
        if s.len() != 2 || s[1] != 9 {
            return Err(shape_err("mat3_vec_const", format!("{s:?} not [n,9]")));
        }
        let n = s[0];
        let mv = self.values(m);
        let vr = [R::from_f64(v[0]), R::from_f64(v[1]), R::from_f64(v[2])];
        let mut vals = vec![R::ZERO; n * 3];
        for item in 0..n {
            let m9 = &mv[item * 9..item * 9 + 9];
            for r in 0..3 {
                vals[item * 3 + r] = m9[r] * vr[0] + m9[3 + r] * vr[1] + m9[6 + r] * vr[2];
            }
        }
        let ng = self.ng(&[m.0]);
        Ok(self.push(
            vec![n, 3],
            vals,
            Op::Mat3VecConst { m: m.0, v },
            ng,
        ))
    }

    // -----------------------------------------------------------------------
    // Backward dispatch
    // -----------------------------------------------------------------------

    pub(crate) fn backward_step(&self, i: usize, gy: &[R], up: &mut [Option<Vec<R>>]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(up, a, gy.to_vec());
                self.accum(up, b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                self.accum(up, a, gy.to_vec());
                self.accum(up, b, gy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                self.accum(up, a, gy.iter().zip(bv).map(|(&g, &y)| g * y).collect());
                self.accum(up, b, gy.iter().zip(av).map(|(&g, &x)| g * x).collect());
            }
            Op::AddBroadcast(a, b) => {
                self.accum(up, a, gy.to_vec());
                let bn = self.nodes[b].values.len();
                let mut gb = vec![R::ZERO; bn];
                for (idx, &g) in gy.iter().enumerate() {
                    gb[idx % bn] += g;
                }
                self.accum(up, b, gb);
            }
            Op::AffineScalar { x, mul } => {
                let m = R::from_f64(mul);
                self.accum(up, x, gy.iter().map(|&g| g * m).collect());
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                let m = self.nodes[b].shape[1];
                if self.nodes[a].needs_grad {
                    let mut ga = vec![R::ZERO; n * k];
                    mm_nt(gy, &self.nodes[b].values, &mut ga, n, m, k);
                    self.accum(up, a, ga);
                }
                if self.nodes[b].needs_grad {
                    let mut gb = vec![R::ZERO; k * m];
                    mm_tn(&self.nodes[a].values, gy, &mut gb, k, n, m);
                    self.accum(up, b, gb);
                }
            }
            Op::BatchMatmul(a, b) => {
                let (g, n, k) = (
                    self.nodes[a].shape[0],
                    self.nodes[a].shape[1],
                    self.nodes[a].shape[2],
                );
                let m = self.nodes[b].shape[2];
                if self.nodes[a].needs_grad {
                    let mut ga = vec![R::ZERO; g * n * k];
                    for gi in 0..g {
                        mm_nt(
                            &gy[gi * n * m..(gi + 1) * n * m],
                            &self.nodes[b].values[gi * k * m..(gi + 1) * k * m],
                            &mut ga[gi * n * k..(gi + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                    self.accum(up, a, ga);
                }
                if self.nodes[b].needs_grad {
                    let mut gb = vec![R::ZERO; g * k * m];
                    for gi in 0..g {
                        mm_tn(
                            &self.nodes[a].values[gi * n * k..(gi + 1) * n * k],
                            &gy[gi * n * m..(gi + 1) * n * m],
                            &mut gb[gi * k * m..(gi + 1) * k * m],
                            k,
                            n,
                            m,
                        );
                    }
                    self.accum(up, b, gb);
                }
            }
            Op::Transpose(x) => {
                let (n, m) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let mut gx = vec![R::ZERO; n * m];
                for i in 0..n {
                    for j in 0..m {
                        gx[i * m + j] = gy[j * n + i];
                    }
                }
                self.accum(up, x, gx);
            }
            Op::Reshape(x) => self.accum(up, x, gy.to_vec()),
            Op::Concat { inputs, axis } => {
                let out_shape = &self.nodes[i].shape;
                let outer: usize = out_shape[..axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let mid_total = out_shape[axis];
                let mut offset = 0;
                for &inp in &inputs {
                    let mid = self.nodes[inp].shape[axis];
                    if self.nodes[inp].needs_grad {
                        let mut gx = vec![R::ZERO; outer * mid * inner];
                        for o in 0..outer {
                            let src = o * mid_total * inner + offset * inner;
                            gx[o * mid * inner..(o + 1) * mid * inner]
                                .copy_from_slice(&gy[src..src + mid * inner]);
                        }
                        self.accum(up, inp, gx);
                    }
                    offset += mid;
                }
            }
            Op::SliceAxis {
                x,
                axis,
                start,
                len,
            } => {
                let s = &self.nodes[x].shape;
                let outer: usize = s[..axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mid = s[axis];
                let mut gx = vec![R::ZERO; self.nodes[x].values.len()];
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&gy[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum(up, x, gx);
            }
            Op::GatherAxis { x, axis, idxs } => {
                let (outer, mid, inner) = split_at_axis(&self.nodes[x].shape, axis);
                let k = idxs.len();
                let mut gx = vec![R::ZERO; outer * mid * inner];
                for o in 0..outer {
                    for (j, &idx) in idxs.iter().enumerate() {
                        let src = &gy[(o * k + j) * inner..(o * k + j + 1) * inner];
                        let dst = &mut gx[(o * mid + idx) * inner..(o * mid + idx + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.accum(up, x, gx);
            }
            Op::ScatterAxis {
                x,
                axis,
                idxs,
                out_dim,
            } => {
                let (outer, k, inner) = split_at_axis(&self.nodes[x].shape, axis);
                let mut gx = vec![R::ZERO; outer * k * inner];
                for o in 0..outer {
                    for (j, &idx) in idxs.iter().enumerate() {
                        let src =
                            &gy[(o * out_dim + idx) * inner..(o * out_dim + idx + 1) * inner];
                        gx[(o * k + j) * inner..(o * k + j + 1) * inner].copy_from_slice(src);
                    }
                }
                self.accum(up, x, gx);
            }
            Op::ReplicateAxis { x, axis, factor } => {
                let (outer, mid, inner) = split_at_axis(&self.nodes[x].shape, axis);
                let mut gx = vec![R::ZERO; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = &mut gx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        for f in 0..factor {
                            let src = (o * mid * factor + m * factor + f) * inner;
                            for (d, &v) in dst.iter_mut().zip(&gy[src..src + inner]) {
                                *d += v;
                            }
                        }
                    }
                }
                self.accum(up, x, gx);
            }
            Op::MaskedWindowMean { x, window, mask } => {
                let s = &self.nodes[x].shape;
                let (g, t, d) = (s[0], s[1], s[2]);
                let slots = t / window;
                let mut gx = vec![R::ZERO; g * t * d];
                for gi in 0..g {
                    for si in 0..slots {
                        let count = (si * window..(si + 1) * window)
                            .filter(|&f| mask[gi * t + f])
                            .count();
                        if count == 0 {
                            continue;
                        }
                        let inv = R::from_f64(1.0 / count as f64);
                        let src = &gy[(gi * slots + si) * d..(gi * slots + si + 1) * d];
                        for f in si * window..(si + 1) * window {
                            if mask[gi * t + f] {
                                let dst = &mut gx[(gi * t + f) * d..(gi * t + f + 1) * d];
                                for (o, &v) in dst.iter_mut().zip(src) {
                                    *o += v * inv;
                                }
                            }
                        }
                    }
                }
                self.accum(up, x, gx);
            }
            Op::MeanAll(x) => {
                let n = self.nodes[x].values.len();
                let g = gy[0] * R::from_f64(1.0 / n as f64);
                self.accum(up, x, vec![g; n]);
            }
            Op::Softmax { x, axis } => {
                let (outer, mid, inner) = split_at_axis(&self.nodes[i].shape, axis);
                let y = &self.nodes[i].values;
                let mut gx = vec![R::ZERO; y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let at = |m: usize| (o * mid + m) * inner + ii;
                        let mut dot = R::ZERO;
                        for m in 0..mid {
                            dot += y[at(m)] * gy[at(m)];
                        }
                        for m in 0..mid {
                            gx[at(m)] = y[at(m)] * (gy[at(m)] - dot);
                        }
                    }
                }
                self.accum(up, x, gx);
            }
            Op::MeanAxis { x, axis } => {
                let (outer, mid, inner) = split_at_axis(&self.nodes[x].shape, axis);
                let inv = R::from_f64(1.0 / mid as f64);
                let mut gx = vec![R::ZERO; outer * mid * inner];
                for o in 0..outer {
                    for m in 0..mid {
                        let dst = &mut gx[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                        let src = &gy[o * inner..(o + 1) * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = v * inv;
                        }
                    }
                }
                self.accum(up, x, gx);
            }
            Op::LayerNorm { x, gain, bias } => {
                let d = *self.nodes[i].shape.last().unwrap();
                let rows = self.nodes[i].values.len() / d;
                let saved = &self.nodes[i].saved;
                let xhat = &saved[..rows * d];
                let rstd = &saved[rows * d..];
                let gv = &self.nodes[gain].values;
                let inv_d = R::from_f64(1.0 / d as f64);
                if self.nodes[x].needs_grad {
                    let mut gx = vec![R::ZERO; rows * d];
                    for r in 0..rows {
                        let mut sum_dxhat = R::ZERO;
                        let mut sum_dxhat_xhat = R::ZERO;
                        for k in 0..d {
                            let dxh = gy[r * d + k] * gv[k];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat[r * d + k];
                        }
                        for k in 0..d {
                            let dxh = gy[r * d + k] * gv[k];
                            gx[r * d + k] = rstd[r]
                                * (dxh
                                    - inv_d * sum_dxhat
                                    - xhat[r * d + k] * inv_d * sum_dxhat_xhat);
                        }
                    }
                    self.accum(up, x, gx);
                }
                if self.nodes[gain].needs_grad {
                    let mut gg = vec![R::ZERO; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gg[k] += gy[r * d + k] * xhat[r * d + k];
                        }
                    }
                    self.accum(up, gain, gg);
                }
                if self.nodes[bias].needs_grad {
                    let mut gb = vec![R::ZERO; d];
                    for r in 0..rows {
                        for k in 0..d {
                            gb[k] += gy[r * d + k];
                        }
                    }
                    self.accum(up, bias, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let d_in = self.nodes[w].shape[0];
                let d_out = self.nodes[w].shape[1];
                let rows = self.nodes[x].values.len() / d_in;
                if self.nodes[x].needs_grad {
                    let mut gx = vec![R::ZERO; rows * d_in];
                    mm_nt(gy, &self.nodes[w].values, &mut gx, rows, d_out, d_in);
                    self.accum(up, x, gx);
                }
                if self.nodes[w].needs_grad {
                    let mut gw = vec![R::ZERO; d_in * d_out];
                    mm_tn(&self.nodes[x].values, gy, &mut gw, d_in, rows, d_out);
                    self.accum(up, w, gw);
                }
                if self.nodes[b].needs_grad {
                    let mut gb = vec![R::ZERO; d_out];
                    for r in 0..rows {
                        for (o, &g) in gb.iter_mut().zip(&gy[r * d_out..(r + 1) * d_out]) {
                            *o += g;
                        }
                    }
                    self.accum(up, b, gb);
                }
            }
            Op::Mha { q, k, v, heads } => {
                let s = &self.nodes[i].shape;
                let (g, n, d) = (s[0], s[1], s[2]);
                let dh = d / heads;
                let scale = R::from_f64(1.0 / (dh as f64).sqrt());
                let a_all = &self.nodes[i].saved;
                let qv = &self.nodes[q].values;
                let kv = &self.nodes[k].values;
                let vv = &self.nodes[v].values;
                let mut gq = vec![R::ZERO; g * n * d];
                let mut gk = vec![R::ZERO; g * n * d];
                let mut gvv = vec![R::ZERO; g * n * d];
                let mut qh = vec![R::ZERO; n * dh];
                let mut kh = vec![R::ZERO; n * dh];
                let mut vh = vec![R::ZERO; n * dh];
                let mut goh = vec![R::ZERO; n * dh];
                let mut da = vec![R::ZERO; n * n];
                let mut dqh = vec![R::ZERO; n * dh];
                let mut dkh = vec![R::ZERO; n * dh];
                let mut dvh = vec![R::ZERO; n * dh];
                for gi in 0..g {
                    let base = gi * n * d;
                    for h in 0..heads {
                        let col = h * dh;
                        let a_block = &a_all[(gi * heads + h) * n * n..(gi * heads + h + 1) * n * n];
                        gather_head(qv, &mut qh, base, col, n, d, dh);
                        gather_head(kv, &mut kh, base, col, n, d, dh);
                        gather_head(vv, &mut vh, base, col, n, d, dh);
                        gather_head(gy, &mut goh, base, col, n, d, dh);
                        // dA = dO . V^T ; dV = A^T dO
                        da.fill(R::ZERO);
                        mm_nt_small(&goh, &vh, &mut da, n, dh, n);
                        dvh.fill(R::ZERO);
                        mm_tn_small(a_block, &goh, &mut dvh, n, n, dh);
                        // softmax backward row by row: dS = A (dA - sum(dA A))
                        // masked entries have A = 0, so dS vanishes there too
                        for r in 0..n {
                            let a_row = &a_block[r * n..(r + 1) * n];
                            let da_row = &mut da[r * n..(r + 1) * n];
                            let mut dot = R::ZERO;
                            for (x, y) in da_row.iter().zip(a_row) {
                                dot += *x * *y;
                            }
                            for (x, &y) in da_row.iter_mut().zip(a_row) {
                                *x = y * (*x - dot) * scale;
                            }
                        }
                        // dQ = dS . K ; dK = dS^T . Q (scale already applied)
                        dqh.fill(R::ZERO);
                        mm_nn_small(&da, &kh, &mut dqh, n, n, dh);
                        dkh.fill(R::ZERO);
                        mm_tn_small(&da, &qh, &mut dkh, n, n, dh);
                        scatter_head(&dqh, &mut gq, base, col, n, d, dh);
                        scatter_head(&dkh, &mut gk, base, col, n, d, dh);
                        scatter_head(&dvh, &mut gvv, base, col, n, d, dh);
                    }
                }
                self.accum(up, q, gq);
                self.accum(up, k, gk);
                self.accum(up, v, gvv);
            }
            Op::Gelu(x) => {
                let xv = &self.nodes[x].values;
                self.accum(
                    up,
                    x,
                    gy.iter()
                        .zip(xv)
                        .map(|(&g, &v)| g * gelu_bwd(v))
                        .collect(),
                );
            }
            Op::CosineRows(a, b) => {
                let d = self.nodes[a].shape[1];
                let n = self.nodes[a].shape[0];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let eps = R::norm_eps();
                let mut ga = vec![R::ZERO; n * d];
                let mut gb = vec![R::ZERO; n * d];
                for r in 0..n {
                    let (mut dot, mut na2, mut nb2) = (R::ZERO, R::ZERO, R::ZERO);
                    for idx in 0..d {
                        let x = av[r * d + idx];
                        let y = bv[r * d + idx];
                        dot += x * y;
                        na2 += x * x;
                        nb2 += y * y;
                    }
                    let na = (na2 + eps).sqrt();
                    let nb = (nb2 + eps).sqrt();
                    let c = dot / (na * nb);
                    let g = gy[r];
                    for idx in 0..d {
                        let x = av[r * d + idx];
                        let y = bv[r * d + idx];
                        ga[r * d + idx] = g * (y / (na * nb) - c * x / (na * na));
                        gb[r * d + idx] = g * (x / (na * nb) - c * y / (nb * nb));
                    }
                }
                self.accum(up, a, ga);
                self.accum(up, b, gb);
            }
            Op::MseAll(a, b) => {
                let n = self.nodes[a].values.len();
                let two_over_n = R::from_f64(2.0 / n as f64);
                let g = gy[0];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                if self.nodes[a].needs_grad {
                    self.accum(
                        up,
                        a,
                        av.iter()
                            .zip(bv)
                            .map(|(&x, &y)| g * two_over_n * (x - y))
                            .collect(),
                    );
                }
                if self.nodes[b].needs_grad {
                    self.accum(
                        up,
                        b,
                        av.iter()
                            .zip(bv)
                            .map(|(&x, &y)| -g * two_over_n * (x - y))
                            .collect(),
                    );
                }
            }
            Op::MaskedMse { a, b, mask, denom } => {
                let g = gy[0];
                let coef = R::from_f64(2.0 / denom);
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                if self.nodes[a].needs_grad {
                    self.accum(
                        up,
                        a,
                        (0..av.len())
                            .map(|idx| {
                                if mask[idx] {
                                    g * coef * (av[idx] - bv[idx])
                                } else {
                                    R::ZERO
                                }
                            })
                            .collect(),
                    );
                }
                if self.nodes[b].needs_grad {
                    self.accum(
                        up,
                        b,
                        (0..av.len())
                            .map(|idx| {
                                if mask[idx] {
                                    -g * coef * (av[idx] - bv[idx])
                                } else {
                                    R::ZERO
                                }
                            })
                            .collect(),
                    );
                }
            }
            Op::L2NormAll(x) => {
                let y = self.nodes[i].values[0];
                let g = gy[0];
                let xv = &self.nodes[x].values;
                self.accum(up, x, xv.iter().map(|&v| g * v / y).collect());
            }
            Op::Normalize3(x) => {
                let xv = &self.nodes[x].values;
                let n = self.nodes[x].shape[0];
                let eps = R::norm_eps();
                let mut gx = vec![R::ZERO; n * 3];
                for r in 0..n {
                    let v = [xv[r * 3], xv[r * 3 + 1], xv[r * 3 + 2]];
                    let n2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eps;
                    let nn = n2.sqrt();
                    let g = [gy[r * 3], gy[r * 3 + 1], gy[r * 3 + 2]];
                    let xdotg = v[0] * g[0] + v[1] * g[1] + v[2] * g[2];
                    for idx in 0..3 {
                        gx[r * 3 + idx] = g[idx] / nn - v[idx] * xdotg / (n2 * nn);
                    }
                }
                self.accum(up, x, gx);
            }
            Op::Dot3(a, b) => {
                let n = self.nodes[a].shape[0];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let mut ga = vec![R::ZERO; n * 3];
                let mut gb = vec![R::ZERO; n * 3];
                for r in 0..n {
                    let g = gy[r];
                    for idx in 0..3 {
                        ga[r * 3 + idx] = g * bv[r * 3 + idx];
                        gb[r * 3 + idx] = g * av[r * 3 + idx];
                    }
                }
                self.accum(up, a, ga);
                self.accum(up, b, gb);
            }
            Op::Cross3(a, b) => {
                let n = self.nodes[a].shape[0];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let mut ga = vec![R::ZERO; n * 3];
                let mut gb = vec![R::ZERO; n * 3];
                for r in 0..n {
                    let va = [av[r * 3], av[r * 3 + 1], av[r * 3 + 2]];
                    let vb = [bv[r * 3], bv[r * 3 + 1], bv[r * 3 + 2]];
                    let g = [gy[r * 3], gy[r * 3 + 1], gy[r * 3 + 2]];
                    // grad_a = b x g ; grad_b = g x a
                    ga[r * 3] = vb[1] * g[2] - vb[2] * g[1];
                    ga[r * 3 + 1] = vb[2] * g[0] - vb[0] * g[2];
                    ga[r * 3 + 2] = vb[0] * g[1] - vb[1] * g[0];
                    gb[r * 3] = g[1] * va[2] - g[2] * va[1];
                    gb[r * 3 + 1] = g[2] * va[0] - g[0] * va[2];
                    gb[r * 3 + 2] = g[0] * va[1] - g[1] * va[0];
                }
                self.accum(up, a, ga);
                self.accum(up, b, gb);
            }
            Op::MulBcastLast { s, x } => {
                let (n, d) = (self.nodes[x].shape[0], self.nodes[x].shape[1]);
                let sv = &self.nodes[s].values;
                let xv = &self.nodes[x].values;
                if self.nodes[s].needs_grad {
                    let mut gs = vec![R::ZERO; n];
                    for r in 0..n {
                        let mut acc = R::ZERO;
                        for idx in 0..d {
                            acc += gy[r * d + idx] * xv[r * d + idx];
                        }
                        gs[r] = acc;
                    }
                    self.accum(up, s, gs);
                }
                if self.nodes[x].needs_grad {
                    let mut gx = vec![R::ZERO; n * d];
                    for r in 0..n {
                        for idx in 0..d {
                            gx[r * d + idx] = gy[r * d + idx] * sv[r];
                        }
                    }
                    self.accum(up, x, gx);
                }
            }
            Op::Mat3Mul(a, b) => {
                let n = self.nodes[a].shape[0];
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let mut ga = vec![R::ZERO; n * 9];
                let mut gb = vec![R::ZERO; n * 9];
                for item in 0..n {
                    let a9 = &av[item * 9..item * 9 + 9];
                    let b9 = &bv[item * 9..item * 9 + 9];
                    let g9 = &gy[item * 9..item * 9 + 9];
                    for r in 0..3 {
                        for k in 0..3 {
                            let mut acc = R::ZERO;
                            for c in 0..3 {
                                acc += g9[c * 3 + r] * b9[c * 3 + k];
                            }
                            ga[item * 9 + k * 3 + r] = acc;
                        }
                    }
                    for k in 0..3 {
                        for c in 0..3 {
                            let mut acc = R::ZERO;
                            for r in 0..3 {
                                acc += a9[k * 3 + r] * g9[c * 3 + r];
                            }
                            gb[item * 9 + c * 3 + k] = acc;
                        }
                    }
                }
                self.accum(up, a, ga);
                self.accum(up, b, gb);
            }
            Op::Mat3VecConst { m, v } => {
                let n = self.nodes[m].shape[0];
                let vr = [R::from_f64(v[0]), R::from_f64(v[1]), R::from_f64(v[2])];
                let mut gm = vec![R::ZERO; n * 9];
                for item in 0..n {
                    for r in 0..3 {
                        let g = gy[item * 3 + r];
                        for c in 0..3 {
                            gm[item * 9 + c * 3 + r] = g * vr[c];
                        }
                    }
                }
                self.accum(up, m, gm);
            }
        }
    }
}
