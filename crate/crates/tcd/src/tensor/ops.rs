//! Elementwise, linear-algebra, reduction and shape operations.


use super::{numel, sc, Scalar, Tensor};
use crate::error::{Error, Result};

// ── broadcasting helpers ────────────────────────────────────────────────

/// NumPy-style broadcast of two shapes, aligned from the trailing dim.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0usize; r];
    for i in 0..r {
        let da = if i < r - a.len() { 1 } else { a[i - (r - a.len())] };
        let db = if i < r - b.len() { 1 } else { b[i - (r - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides of `shape` padded to `out` rank, with 0 stride on
/// broadcast dims.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let off = r - shape.len();
    let mut strides = vec![0usize; r];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every element of `out`, handing the closure the linear output
/// index plus the linear indices into both broadcast inputs.
pub(crate) fn walk2(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n = numel(out);
    if n == 0 {
        return;
    }
    let sa = bcast_strides(a, out);
    let sb = bcast_strides(b, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..r).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

impl<T: Scalar> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, kind: BinKind) -> Result<Tensor<T>> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape()).ok_or_else(|| {
            Error::ShapeMismatch {
                op: kind.name(),
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            }
        })?;
        let n = numel(&out_shape);
        let mut data = vec![T::zero(); n];
        let (a, b) = (self.data(), rhs.data());
        if self.shape() == rhs.shape() {
            for i in 0..n {
                data[i] = apply_bin(a[i], b[i], kind);
            }
        } else {
            walk2(&out_shape, self.shape(), rhs.shape(), |o, ai, bi| {
                data[o] = apply_bin(a[ai], b[bi], kind);
            });
        }

        let la = self.data_rc();
        let lb = rhs.data_rc();
        let (sl, sr) = (self.shape().to_vec(), rhs.shape().to_vec());
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |go, _od, os| {
                    let mut ga = if need_a { Some(vec![T::zero(); la.len()]) } else { None };
                    let mut gb = if need_b { Some(vec![T::zero(); lb.len()]) } else { None };
                    walk2(os, &sl, &sr, |o, ai, bi| {
                        let g = go[o];
                        match kind {
                            BinKind::Add => {
                                if let Some(ga) = ga.as_mut() {
                                    ga[ai] += g;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[bi] += g;
                                }
                            }
                            BinKind::Sub => {
                                if let Some(ga) = ga.as_mut() {
                                    ga[ai] += g;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[bi] -= g;
                                }
                            }
                            BinKind::Mul => {
                                if let Some(ga) = ga.as_mut() {
                                    ga[ai] += g * lb[bi];
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[bi] += g * la[ai];
                                }
                            }
                            BinKind::Div => {
                                let inv = T::one() / lb[bi];
                                if let Some(ga) = ga.as_mut() {
                                    ga[ai] += g * inv;
                                }
                                if let Some(gb) = gb.as_mut() {
                                    gb[bi] -= g * la[ai] * inv * inv;
                                }
                            }
                        }
                    });
                    vec![ga, gb]
                })
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinKind::Div)
    }

    // ── unary ops ───────────────────────────────────────────────────────

    /// Generic unary op; `df(x, y)` is the local derivative given input and
    /// output values.
    fn unary(
        &self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        let input = self.data_rc();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move || {
            Box::new(move |go, od, _| {
                let g = go
                    .iter()
                    .zip(input.iter())
                    .zip(od.iter())
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(g)]
            })
        })
    }

    pub fn neg(&self) -> Tensor<T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    /// `a * x + b` with plain constants.
    pub fn affine(&self, a: f64, b: f64) -> Tensor<T> {
        let (ta, tb) = (sc::<T>(a), sc::<T>(b));
        self.unary(move |x| ta * x + tb, move |_, _| ta)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |_, y| T::one() / (sc::<T>(2.0) * y))
    }

    pub fn sqr(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| sc::<T>(2.0) * x)
    }

    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    /// `max(x, 0)`; the gradient at exactly zero is zero.
    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(stable_sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn silu(&self) -> Tensor<T> {
        self.unary(
            |x| x * stable_sigmoid(x),
            |x, _| {
                let s = stable_sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    pub fn softplus(&self) -> Tensor<T> {
        self.unary(stable_softplus, |x, _| stable_sigmoid(x))
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    /// Clamp into `[lo, hi]`. The gradient passes through strictly inside
    /// the interval and is zero at and beyond the edges.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<T> {
        let (tl, th) = (sc::<T>(lo), sc::<T>(hi));
        self.unary(
            move |x| x.max(tl).min(th),
            move |x, _| {
                if x > tl && x < th {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Sum of all elements as a rank-0 scalar.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc += v;
        }
        let n = self.len();
        Tensor::from_op(vec![], vec![acc], vec![self.clone()], move || {
            Box::new(move |go, _, _| vec![Some(vec![go[0]; n])])
        })
    }

    pub fn mean_all(&self) -> Tensor<T> {
        let n = self.len() as f64;
        self.sum_all().affine(1.0 / n, 0.0)
    }

    /// Sum along one axis; `keepdim` keeps a size-1 dim in its place.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Invalid {
                op: "sum_axis",
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let d = self.data();
        for o in 0..outer {
            for t in 0..n {
                let base = (o * n + t) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += d[base + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let in_len = self.len();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); in_len];
                for o in 0..outer {
                    for t in 0..n {
                        let base = (o * n + t) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            g[base + i] = go[obase + i];
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.affine(1.0 / n, 0.0))
    }

    // ── softmax ─────────────────────────────────────────────────────────

    /// Numerically-stable softmax along `axis` (max subtracted per lane).
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() {
            return Err(Error::Invalid {
                op: "softmax",
                msg: format!("axis {} out of range for shape {:?}", axis, self.shape()),
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let d = self.data();
        let mut out = vec![T::zero(); d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |t: usize| (o * n + t) * inner + i;
                let mut m = d[at(0)];
                for t in 1..n {
                    m = m.max(d[at(t)]);
                }
                let mut z = T::zero();
                for t in 0..n {
                    let e = (d[at(t)] - m).exp();
                    out[at(t)] = e;
                    z += e;
                }
                let inv = T::one() / z;
                for t in 0..n {
                    out[at(t)] = out[at(t)] * inv;
                }
            }
        }
        Ok(Tensor::from_op(shape.to_vec(), out, vec![self.clone()], move || {
            Box::new(move |go, od, _| {
                // dx = y * (g - sum(g * y)) per lane
                let mut g = vec![T::zero(); go.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * n + t) * inner + i;
                        let mut dot = T::zero();
                        for t in 0..n {
                            dot += go[at(t)] * od[at(t)];
                        }
                        for t in 0..n {
                            g[at(t)] = od[at(t)] * (go[at(t)] - dot);
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    // ── matmul ──────────────────────────────────────────────────────────

    /// Batched matrix product `[.., m, k] x [.., k, n]`; leading batch dims
    /// broadcast.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        if self.rank() < 2 || rhs.rank() < 2 {
            return Err(Error::Invalid {
                op: "matmul",
                msg: format!("needs rank >= 2, got {:?} x {:?}", self.shape(), rhs.shape()),
            });
        }
        let (ra, rb) = (self.rank(), rhs.rank());
        let (m, ka) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = (rhs.shape()[rb - 2], rhs.shape()[rb - 1]);
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let ba = &self.shape()[..ra - 2];
        let bb = &rhs.shape()[..rb - 2];
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })?;
        let mut out_shape = batch.clone();
        out_shape.extend_from_slice(&[m, n]);
        let nb = numel(&batch);
        let mut out = vec![T::zero(); nb * m * n];
        let (a, b) = (self.data(), rhs.data());
        let (ba_v, bb_v) = (ba.to_vec(), bb.to_vec());
        walk2(&batch, &ba_v, &bb_v, |bo, bao, bbo| {
            mm_acc(
                &a[bao * m * ka..bao * m * ka + m * ka],
                &b[bbo * ka * n..bbo * ka * n + ka * n],
                &mut out[bo * m * n..(bo + 1) * m * n],
                m,
                ka,
                n,
            );
        });

        let la = self.data_rc();
        let lb = rhs.data_rc();
        let need_a = self.requires_grad();
        let need_b = rhs.requires_grad();
        let batch_c = batch.clone();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            move || {
                Box::new(move |go, _, _| {
                    let mut ga = if need_a { Some(vec![T::zero(); la.len()]) } else { None };
                    let mut gb = if need_b { Some(vec![T::zero(); lb.len()]) } else { None };
                    walk2(&batch_c, &ba_v, &bb_v, |bo, bao, bbo| {
                        let gblk = &go[bo * m * n..(bo + 1) * m * n];
                        if let Some(ga) = ga.as_mut() {
                            // dA += dC . B^T
                            mm_nt_acc(
                                gblk,
                                &lb[bbo * ka * n..bbo * ka * n + ka * n],
                                &mut ga[bao * m * ka..bao * m * ka + m * ka],
                                m,
                                n,
                                ka,
                            );
                        }
                        if let Some(gb) = gb.as_mut() {
                            // dB += A^T . dC
                            mm_tn_acc(
                                &la[bao * m * ka..bao * m * ka + m * ka],
                                gblk,
                                &mut gb[bbo * ka * n..bbo * ka * n + ka * n],
                                m,
                                ka,
                                n,
                            );
                        }
                    });
                    vec![ga, gb]
                })
            },
        ))
    }

    // ── shape ops ───────────────────────────────────────────────────────

    /// Size-preserving reshape; shares the underlying buffer.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.len() {
            return Err(Error::Invalid {
                op: "reshape",
                msg: format!("cannot view {:?} as {:?}", self.shape(), shape),
            });
        }
        let data = self.data_rc();
        let n = self.len();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data.as_ref().clone(),
            vec![self.clone()],
            move || Box::new(move |go, _, _| {
                debug_assert_eq!(go.len(), n);
                vec![Some(go.to_vec())]
            }),
        ))
    }

    /// Reorders axes; `axes` must be a permutation of `0..rank`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor<T>> {
        let r = self.rank();
        if axes.len() != r || {
            let mut seen = vec![false; r];
            axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::Invalid {
                op: "permute",
                msg: format!("{:?} is not a permutation of 0..{}", axes, r),
            });
        }
        let (data, out_shape) = permute_copy(self.data(), self.shape(), axes);
        let mut inverse = vec![0usize; r];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        let oshape = out_shape.clone();
        Ok(Tensor::from_op(out_shape, data, vec![self.clone()], move || {
            let inv = inverse.clone();
            let os = oshape.clone();
            Box::new(move |go, _, _| {
                let (g, _) = permute_copy(go, &os, &inv);
                vec![Some(g)]
            })
        }))
    }

    /// Contiguous slice `start..start+len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= self.rank() || start + len > self.shape()[axis] {
            return Err(Error::Invalid {
                op: "narrow",
                msg: format!(
                    "axis {} range {}..{} out of bounds for {:?}",
                    axis,
                    start,
                    start + len,
                    self.shape()
                ),
            });
        }
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * len * inner];
        let d = self.data();
        for o in 0..outer {
            let src = (o * n + start) * inner;
            let dst = o * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let in_len = self.len();
        Ok(Tensor::from_op(out_shape, out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); in_len];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    g[dst..dst + len * inner].copy_from_slice(&go[src..src + len * inner]);
                }
                vec![Some(g)]
            })
        }))
    }

    /// Concatenation along `axis`; all inputs must agree on the other dims.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = &parts[0];
        if axis >= first.rank() {
            return Err(Error::Invalid {
                op: "concat",
                msg: format!("axis {} out of range for {:?}", axis, first.shape()),
            });
        }
        let mut total = 0usize;
        for p in parts {
            if p.rank() != first.rank()
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first.shape()[i])
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            total += p.shape()[axis];
        }
        let shape = first.shape();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = total;
        let mut out = vec![T::zero(); outer * total * inner];
        let mut offset = 0usize;
        let mut spans = Vec::with_capacity(parts.len());
        for p in parts {
            let len = p.shape()[axis];
            let d = p.data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                let src = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
            }
            spans.push((offset, len, p.len()));
            offset += len;
        }
        Ok(Tensor::from_op(out_shape, out, parts.to_vec(), move || {
            Box::new(move |go, _, _| {
                spans
                    .iter()
                    .map(|&(off, len, plen)| {
                        let mut g = vec![T::zero(); plen];
                        for o in 0..outer {
                            let src = (o * total + off) * inner;
                            let dst = o * len * inner;
                            g[dst..dst + len * inner]
                                .copy_from_slice(&go[src..src + len * inner]);
                        }
                        Some(g)
                    })
                    .collect()
            })
        }))
    }

    /// 2-D transpose shorthand.
    pub fn t2(&self) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::Invalid {
                op: "t2",
                msg: format!("needs rank 2, got {:?}", self.shape()),
            });
        }
        self.permute(&[1, 0])
    }
}

fn apply_bin<T: Scalar>(a: T, b: T, kind: BinKind) -> T {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

/// Sigmoid that never overflows in either tail.
pub(crate) fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + e^x) computed without overflow.
pub(crate) fn stable_softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// c += a . b for row-major blocks.
fn mm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a . b^T ; a is [m, n], b is [k, n], c is [m, k].
fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// c += a^T . g ; a is [m, k], g is [m, n], c is [k, n].
fn mm_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * grow[j];
            }
        }
    }
}

/// Copies `data` with axes reordered; returns the new buffer and shape.
pub(crate) fn permute_copy<T: Scalar>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let r = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; r];
    for i in (0..r.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mapped: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = data.len();
    let mut out = vec![data.first().copied().unwrap_or_else(T::zero); n];
    if n == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; r];
    let mut src = 0usize;
    for o in 0..n {
        out[o] = data[src];
        for d in (0..r).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= mapped[d] * out_shape[d];
        }
    }
    (out, out_shape)
}
