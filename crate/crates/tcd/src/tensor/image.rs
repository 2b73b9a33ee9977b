//! Image-domain kernels: convolution, pooling, resampling, patch layout.
//!
//! All map-like tensors are `[C, H, W]` row-major. Convolution is
//! cross-correlation (no kernel flip).

use super::{sc, Scalar, Tensor};
use crate::error::{Error, Result};

/// Out-of-bounds policy for convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Out-of-range taps read zero.
    Zero,
    /// Mirror about the edge pixel without repeating it (-1 -> 1, n -> n-2).
    Reflect,
}

/// Mirrors `i` into `0..n`; exact for offsets up to `n - 1`.
fn reflect_idx(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Resolves a (possibly out-of-range) coordinate to Some(in-range index) or
/// None when the tap reads zero.
#[inline]
fn pad_lookup(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < n {
        Some(i as usize)
    } else {
        match mode {
            PadMode::Zero => None,
            PadMode::Reflect => Some(reflect_idx(i, n)),
        }
    }
}

/// Floor-division output extent, as in every convolution framework: trailing
/// positions that do not fit a full stride are dropped.
fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize, op: &'static str) -> Result<usize> {
    let span = n + 2 * pad;
    if span < k {
        return Err(Error::Invalid {
            op,
            msg: format!("kernel {k} larger than padded extent {span}"),
        });
    }
    Ok((span - k) / stride + 1)
}

impl<T: Scalar> Tensor<T> {
    /// 2-D cross-correlation: `x [Cin,H,W] * w [Cout,Cin,k,k] -> [Cout,H',W']`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Tensor<T>> {
        if self.rank() != 3 || weight.rank() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, wcin, kh, kw) = (
            weight.shape()[0],
            weight.shape()[1],
            weight.shape()[2],
            weight.shape()[3],
        );
        if cin != wcin {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::Invalid { op: "conv2d", msg: "stride must be >= 1".into() });
        }
        if mode == PadMode::Reflect && (pad >= h.max(1) || pad >= w.max(1)) && (h > 1 || w > 1) {
            // single reflection only stays exact for pad <= n-1
            if pad >= h || pad >= w {
                return Err(Error::Invalid {
                    op: "conv2d",
                    msg: format!("reflect pad {pad} too large for {h}x{w}"),
                });
            }
        }
        let oh = conv_out_len(h, kh, stride, pad, "conv2d")?;
        let ow = conv_out_len(w, kw, stride, pad, "conv2d")?;

        let x = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ci in 0..cin {
                        let xoff = ci * h * w;
                        let woff = ((co * cin + ci) * kh) * kw;
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                let Some(ix) = pad_lookup(ix, w, mode) else { continue };
                                acc += wd[woff + ky * kw + kx] * x[xoff + iy * w + ix];
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }

        let xd = self.data_rc();
        let wdat = weight.data_rc();
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        Ok(Tensor::from_op(
            vec![cout, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            move || {
                Box::new(move |go, _, _| {
                    let mut gx = if need_x { Some(vec![T::zero(); xd.len()]) } else { None };
                    let mut gw = if need_w { Some(vec![T::zero(); wdat.len()]) } else { None };
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = go[(co * oh + oy) * ow + ox];
                                if g == T::zero() {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xoff = ci * h * w;
                                    let woff = ((co * cin + ci) * kh) * kw;
                                    for ky in 0..kh {
                                        let iy = (oy * stride + ky) as isize - pad as isize;
                                        let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                                        for kx in 0..kw {
                                            let ix = (ox * stride + kx) as isize - pad as isize;
                                            let Some(ix) = pad_lookup(ix, w, mode) else {
                                                continue;
                                            };
                                            if let Some(gx) = gx.as_mut() {
                                                gx[xoff + iy * w + ix] +=
                                                    g * wdat[woff + ky * kw + kx];
                                            }
                                            if let Some(gw) = gw.as_mut() {
                                                gw[woff + ky * kw + kx] +=
                                                    g * xd[xoff + iy * w + ix];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    vec![gx, gw]
                })
            },
        ))
    }

    /// Per-channel 3x3-style convolution: `x [C,H,W] * w [C,k,k] -> [C,H',W']`.
    pub fn depthwise_conv2d(
        &self,
        weight: &Tensor<T>,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Result<Tensor<T>> {
        if self.rank() != 3 || weight.rank() != 3 || self.shape()[0] != weight.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: self.shape().to_vec(),
                rhs: weight.shape().to_vec(),
            });
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (kh, kw) = (weight.shape()[1], weight.shape()[2]);
        let oh = conv_out_len(h, kh, stride, pad, "depthwise_conv2d")?;
        let ow = conv_out_len(w, kw, stride, pad, "depthwise_conv2d")?;

        let x = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            let xoff = ci * h * w;
            let woff = ci * kh * kw;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            let Some(ix) = pad_lookup(ix, w, mode) else { continue };
                            acc += wd[woff + ky * kw + kx] * x[xoff + iy * w + ix];
                        }
                    }
                    out[(ci * oh + oy) * ow + ox] = acc;
                }
            }
        }

        let xd = self.data_rc();
        let wdat = weight.data_rc();
        let need_x = self.requires_grad();
        let need_w = weight.requires_grad();
        Ok(Tensor::from_op(
            vec![c, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            move || {
                Box::new(move |go, _, _| {
                    let mut gx = if need_x { Some(vec![T::zero(); xd.len()]) } else { None };
                    let mut gw = if need_w { Some(vec![T::zero(); wdat.len()]) } else { None };
                    for ci in 0..c {
                        let xoff = ci * h * w;
                        let woff = ci * kh * kw;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let g = go[(ci * oh + oy) * ow + ox];
                                if g == T::zero() {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let Some(iy) = pad_lookup(iy, h, mode) else { continue };
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        let Some(ix) = pad_lookup(ix, w, mode) else { continue };
                                        if let Some(gx) = gx.as_mut() {
                                            gx[xoff + iy * w + ix] += g * wdat[woff + ky * kw + kx];
                                        }
                                        if let Some(gw) = gw.as_mut() {
                                            gw[woff + ky * kw + kx] += g * xd[xoff + iy * w + ix];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    vec![gx, gw]
                })
            },
        ))
    }

    /// Spatial average pool over all of H, W: `[C,H,W] -> [C]`.
    pub fn pool_spatial_avg(&self) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("pool_spatial_avg")?;
        let hw = h * w;
        let inv = sc::<T>(1.0 / hw as f64);
        let d = self.data();
        let mut out = vec![T::zero(); c];
        for ci in 0..c {
            let mut acc = T::zero();
            for i in 0..hw {
                acc += d[ci * hw + i];
            }
            out[ci] = acc * inv;
        }
        Ok(Tensor::from_op(vec![c], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); c * hw];
                for ci in 0..c {
                    let gv = go[ci] * inv;
                    for i in 0..hw {
                        g[ci * hw + i] = gv;
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Spatial max pool over all of H, W: `[C,H,W] -> [C]`. Gradient routes
    /// to the first maximal element per channel.
    pub fn pool_spatial_max(&self) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("pool_spatial_max")?;
        let hw = h * w;
        let d = self.data();
        let mut out = vec![T::zero(); c];
        let mut arg = vec![0usize; c];
        for ci in 0..c {
            let mut best = d[ci * hw];
            let mut bi = 0usize;
            for i in 1..hw {
                if d[ci * hw + i] > best {
                    best = d[ci * hw + i];
                    bi = i;
                }
            }
            out[ci] = best;
            arg[ci] = bi;
        }
        Ok(Tensor::from_op(vec![c], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); c * hw];
                for ci in 0..c {
                    g[ci * hw + arg[ci]] = go[ci];
                }
                vec![Some(g)]
            })
        }))
    }

    /// Mean over the channel axis: `[C,H,W] -> [1,H,W]`.
    pub fn pool_channel_avg(&self) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("pool_channel_avg")?;
        let hw = h * w;
        let inv = sc::<T>(1.0 / c as f64);
        let d = self.data();
        let mut out = vec![T::zero(); hw];
        for ci in 0..c {
            for i in 0..hw {
                out[i] += d[ci * hw + i];
            }
        }
        for v in out.iter_mut() {
            *v = *v * inv;
        }
        Ok(Tensor::from_op(vec![1, h, w], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); c * hw];
                for ci in 0..c {
                    for i in 0..hw {
                        g[ci * hw + i] = go[i] * inv;
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Max over the channel axis: `[C,H,W] -> [1,H,W]`; first-max routing.
    pub fn pool_channel_max(&self) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("pool_channel_max")?;
        let hw = h * w;
        let d = self.data();
        let mut out = vec![T::zero(); hw];
        let mut arg = vec![0usize; hw];
        for i in 0..hw {
            let mut best = d[i];
            let mut bc = 0usize;
            for ci in 1..c {
                if d[ci * hw + i] > best {
                    best = d[ci * hw + i];
                    bc = ci;
                }
            }
            out[i] = best;
            arg[i] = bc;
        }
        Ok(Tensor::from_op(vec![1, h, w], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); c * hw];
                for i in 0..hw {
                    g[arg[i] * hw + i] = go[i];
                }
                vec![Some(g)]
            })
        }))
    }

    /// Bilinear resample to `(oh, ow)` using half-pixel centers. Identity
    /// sizes return a bitwise copy.
    pub fn bilinear_resize(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("bilinear_resize")?;
        if oh == 0 || ow == 0 {
            return Err(Error::Invalid { op: "bilinear_resize", msg: "zero output size".into() });
        }
        if oh == h && ow == w {
            let data = self.data().to_vec();
            let n = data.len();
            return Ok(Tensor::from_op(
                vec![c, h, w],
                data,
                vec![self.clone()],
                move || Box::new(move |go, _, _| {
                    debug_assert_eq!(go.len(), n);
                    vec![Some(go.to_vec())]
                }),
            ));
        }
        let ys = axis_taps(h, oh);
        let xs = axis_taps(w, ow);
        let d = self.data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ci in 0..c {
            let base = ci * h * w;
            for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let (fy, fx) = (sc::<T>(fy), sc::<T>(fx));
                    let v00 = d[base + y0 * w + x0];
                    let v01 = d[base + y0 * w + x1];
                    let v10 = d[base + y1 * w + x0];
                    let v11 = d[base + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[(ci * oh + oy) * ow + ox] = top + (bot - top) * fy;
                }
            }
        }
        let n_in = self.len();
        Ok(Tensor::from_op(vec![c, oh, ow], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); n_in];
                for ci in 0..c {
                    let base = ci * h * w;
                    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = go[(ci * oh + oy) * ow + ox];
                            let (fy, fx) = (sc::<T>(fy), sc::<T>(fx));
                            let one = T::one();
                            g[base + y0 * w + x0] += gv * (one - fy) * (one - fx);
                            g[base + y0 * w + x1] += gv * (one - fy) * fx;
                            g[base + y1 * w + x0] += gv * fy * (one - fx);
                            g[base + y1 * w + x1] += gv * fy * fx;
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Splits `[C,H,W]` into non-overlapping `p x p` patches flattened per
    /// row: `[T, C*p*p]` with `T = (H/p)*(W/p)`, patches in row-major order
    /// and elements ordered channel-major then y, x.
    pub fn patchify(&self, p: usize) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("patchify")?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Invalid {
                op: "patchify",
                msg: format!("{h}x{w} not divisible by patch {p}"),
            });
        }
        let (gh, gw) = (h / p, w / p);
        let t = gh * gw;
        let row = c * p * p;
        let d = self.data();
        let mut out = vec![T::zero(); t * row];
        for ty in 0..gh {
            for tx in 0..gw {
                let ti = ty * gw + tx;
                for ci in 0..c {
                    for py in 0..p {
                        for px in 0..p {
                            out[ti * row + (ci * p + py) * p + px] =
                                d[(ci * h + ty * p + py) * w + tx * p + px];
                        }
                    }
                }
            }
        }
        let n_in = self.len();
        Ok(Tensor::from_op(vec![t, row], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); n_in];
                for ty in 0..gh {
                    for tx in 0..gw {
                        let ti = ty * gw + tx;
                        for ci in 0..c {
                            for py in 0..p {
                                for px in 0..p {
                                    g[(ci * h + ty * p + py) * w + tx * p + px] =
                                        go[ti * row + (ci * p + py) * p + px];
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// `[T, C] -> [C, h, w]` with token `t = y*w + x`.
    pub fn tokens_to_map(&self, h: usize, w: usize) -> Result<Tensor<T>> {
        if self.rank() != 2 || self.shape()[0] != h * w {
            return Err(Error::Invalid {
                op: "tokens_to_map",
                msg: format!("{:?} does not hold {h}x{w} tokens", self.shape()),
            });
        }
        let c = self.shape()[1];
        let hw = h * w;
        let d = self.data();
        let mut out = vec![T::zero(); c * hw];
        for t in 0..hw {
            for ci in 0..c {
                out[ci * hw + t] = d[t * c + ci];
            }
        }
        Ok(Tensor::from_op(vec![c, h, w], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); hw * c];
                for t in 0..hw {
                    for ci in 0..c {
                        g[t * c + ci] = go[ci * hw + t];
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// `[C, h, w] -> [h*w, C]`, inverse of [`Tensor::tokens_to_map`].
    pub fn map_to_tokens(&self) -> Result<Tensor<T>> {
        let (c, h, w) = self.chw("map_to_tokens")?;
        let hw = h * w;
        let d = self.data();
        let mut out = vec![T::zero(); hw * c];
        for t in 0..hw {
            for ci in 0..c {
                out[t * c + ci] = d[ci * hw + t];
            }
        }
        Ok(Tensor::from_op(vec![hw, c], out, vec![self.clone()], move || {
            Box::new(move |go, _, _| {
                let mut g = vec![T::zero(); c * hw];
                for t in 0..hw {
                    for ci in 0..c {
                        g[ci * hw + t] = go[t * c + ci];
                    }
                }
                vec![Some(g)]
            })
        }))
    }

    /// Convex combination upsampling. `self` is the low-resolution map
    /// `[C, hl, wl]`; `weights [k*k, hr, wr]` holds one convex weight vector
    /// per high-resolution pixel (rows must already be softmaxed). Each HR
    /// pixel maps to a continuous LR location via half-pixel centers; the
    /// k x k patch around it is read with edge-clamped bilinear sampling and
    /// combined with the weights. The output therefore always lies inside
    /// the sampled patch's [min, max].
    pub fn convex_upsample(&self, weights: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
        let (c, hl, wl) = self.chw("convex_upsample")?;
        if weights.rank() != 3 || weights.shape()[0] != k * k {
            return Err(Error::ShapeMismatch {
                op: "convex_upsample",
                lhs: self.shape().to_vec(),
                rhs: weights.shape().to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(Error::Invalid { op: "convex_upsample", msg: "k must be odd".into() });
        }
        let (hr, wr) = (weights.shape()[1], weights.shape()[2]);
        if hr % hl != 0 || wr % wl != 0 || hr / hl != wr / wl || hr / hl == 0 {
            return Err(Error::Invalid {
                op: "convex_upsample",
                msg: format!("factor from {hl}x{wl} to {hr}x{wr} is not a uniform integer"),
            });
        }
        let factor = hr / hl;
        let taps = sample_taps(hl, wl, hr, wr, k, factor);
        let kk = k * k;
        let d = self.data();
        let wdat = weights.data();
        let mut out = vec![T::zero(); c * hr * wr];
        for (pi, tap) in taps.iter().enumerate() {
            for ci in 0..c {
                let base = ci * hl * wl;
                let mut acc = T::zero();
                for (i, s) in tap.iter().enumerate() {
                    let wv = wdat[i * hr * wr + pi];
                    let p = s.eval(&d[base..base + hl * wl]);
                    acc += wv * p;
                }
                out[ci * hr * wr + pi] = acc;
            }
        }
        let lr = self.data_rc();
        let wrc = weights.data_rc();
        let need_lr = self.requires_grad();
        let need_w = weights.requires_grad();
        Ok(Tensor::from_op(
            vec![c, hr, wr],
            out,
            vec![self.clone(), weights.clone()],
            move || {
                Box::new(move |go, _, _| {
                    let mut gl = if need_lr { Some(vec![T::zero(); lr.len()]) } else { None };
                    let mut gw = if need_w { Some(vec![T::zero(); wrc.len()]) } else { None };
                    for (pi, tap) in taps.iter().enumerate() {
                        for ci in 0..c {
                            let base = ci * hl * wl;
                            let g = go[ci * hr * wr + pi];
                            if g == T::zero() {
                                continue;
                            }
                            for (i, s) in tap.iter().enumerate() {
                                let wv = wrc[i * hr * wr + pi];
                                if let Some(gw) = gw.as_mut() {
                                    gw[i * hr * wr + pi] += g * s.eval(&lr[base..base + hl * wl]);
                                }
                                if let Some(gl) = gl.as_mut() {
                                    s.scatter(&mut gl[base..base + hl * wl], g * wv);
                                }
                            }
                        }
                    }
                    debug_assert_eq!(kk * hr * wr, wrc.len());
                    vec![gl, gw]
                })
            },
        ))
    }

    fn chw(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        if self.rank() != 3 {
            return Err(Error::Invalid {
                op,
                msg: format!("needs [C,H,W], got {:?}", self.shape()),
            });
        }
        Ok((self.shape()[0], self.shape()[1], self.shape()[2]))
    }
}

/// One bilinear sample: four corner indices plus weights.
#[derive(Clone, Copy)]
struct BilinSample<T> {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    w00: T,
    w01: T,
    w10: T,
    w11: T,
}

impl<T: Scalar> BilinSample<T> {
    #[inline]
    fn eval(&self, plane: &[T]) -> T {
        self.w00 * plane[self.i00]
            + self.w01 * plane[self.i01]
            + self.w10 * plane[self.i10]
            + self.w11 * plane[self.i11]
    }

    #[inline]
    fn scatter(&self, grad: &mut [T], g: T) {
        grad[self.i00] += g * self.w00;
        grad[self.i01] += g * self.w01;
        grad[self.i10] += g * self.w10;
        grad[self.i11] += g * self.w11;
    }
}

fn make_sample<T: Scalar>(cy: f64, cx: f64, h: usize, w: usize) -> BilinSample<T> {
    let (y0, y1, fy) = clamp_taps(cy, h);
    let (x0, x1, fx) = clamp_taps(cx, w);
    let (fy, fx) = (sc::<T>(fy), sc::<T>(fx));
    let one = T::one();
    BilinSample {
        i00: y0 * w + x0,
        i01: y0 * w + x1,
        i10: y1 * w + x0,
        i11: y1 * w + x1,
        w00: (one - fy) * (one - fx),
        w01: (one - fy) * fx,
        w10: fy * (one - fx),
        w11: fy * fx,
    }
}

/// Floor/ceil taps for a continuous coordinate with edge clamping. Weights
/// always sum to one, and both taps collapse onto the edge pixel outside the
/// valid range, so samples stay inside the value range of the plane.
fn clamp_taps(cm: f64, n: usize) -> (usize, usize, f64) {
    if n == 1 {
        return (0, 0, 0.0);
    }
    let f = cm.floor();
    let frac = cm - f;
    let i0 = f as i64;
    if i0 < 0 {
        (0, 0, 0.0)
    } else if i0 as usize >= n - 1 {
        (n - 1, n - 1, 0.0)
    } else {
        (i0 as usize, i0 as usize + 1, frac)
    }
}

/// Half-pixel source taps for 1-D bilinear resize.
fn axis_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| clamp_taps((o as f64 + 0.5) * scale - 0.5, n_in))
        .collect()
}

/// Precomputed k x k bilinear patches for every HR pixel.
fn sample_taps<T: Scalar>(
    hl: usize,
    wl: usize,
    hr: usize,
    wr: usize,
    k: usize,
    factor: usize,
) -> Vec<Vec<BilinSample<T>>> {
    let half = (k / 2) as isize;
    let f = factor as f64;
    let mut taps = Vec::with_capacity(hr * wr);
    for r in 0..hr {
        let cy = (r as f64 + 0.5) / f - 0.5;
        for s in 0..wr {
            let cx = (s as f64 + 0.5) / f - 0.5;
            let mut patch = Vec::with_capacity(k * k);
            for dy in -half..=half {
                for dx in -half..=half {
                    patch.push(make_sample::<T>(cy + dy as f64, cx + dx as f64, hl, wl));
                }
            }
            taps.push(patch);
        }
    }
    taps
}
