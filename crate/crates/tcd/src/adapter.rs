//! Hierarchical adapter around the single-scale encoder.
//!
//! A convolutional spatial-prior stem produces token maps at four strides
//! (`p/4, p/2, p, 2p`); four stages then exchange information with the
//! encoder taps — an injector cross-attends tap tokens into the prior, an
//! extractor cross-attends the prior into the tap and refines it with a
//! depthwise convolutional feed-forward — and the final prior tokens are
//! split back into scale maps and added to bilinearly resized taps to form
//! the feature pyramid. Both attention gates start at zero, so an untrained
//! adapter passes encoder features through unchanged.

use rand::Rng;

use crate::encoder::LinearParams;
use crate::error::{Error, Result};
use crate::tensor::{PadMode, Scalar, Tensor};

/// Row counts and offsets of the four scales inside the flattened prior
/// token sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScaleLayout {
    pub extents: [(usize, usize); 4],
    pub offsets: [usize; 4],
    pub total: usize,
}

impl ScaleLayout {
    /// Layout for an `h x w` image at patch size `p`. Strides per scale are
    /// `p/4, p/2, p, 2p`, so the image must divide by `2p` and `p` must be
    /// a power of two at least 4.
    pub fn for_image(h: usize, w: usize, p: usize) -> Result<ScaleLayout> {
        if p < 4 || !p.is_power_of_two() {
            return Err(Error::Config(format!("patch_size {p} must be a power of two >= 4")));
        }
        if h == 0 || w == 0 || h % (2 * p) != 0 || w % (2 * p) != 0 {
            return Err(Error::Invalid {
                op: "scale_layout",
                msg: format!("image {h}x{w} must divide by 2*patch = {}", 2 * p),
            });
        }
        let mut extents = [(0usize, 0usize); 4];
        let mut offsets = [0usize; 4];
        let mut total = 0usize;
        for (j, div) in [p / 4, p / 2, p, 2 * p].iter().enumerate() {
            offsets[j] = total;
            extents[j] = (h / div, w / div);
            total += extents[j].0 * extents[j].1;
        }
        Ok(ScaleLayout { extents, offsets, total })
    }

    /// Rows `[offset, offset+len)` of scale `j`.
    pub fn span(&self, j: usize) -> (usize, usize) {
        let (h, w) = self.extents[j];
        (self.offsets[j], h * w)
    }
}

/// 3x3 (or 1x1) convolution with bias.
#[derive(Clone)]
pub struct ConvLayer<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
    pub stride: usize,
}

impl<T: Scalar> ConvLayer<T> {
    pub fn init(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut impl Rng,
    ) -> ConvLayer<T> {
        let fan_in = c_in * k * k;
        ConvLayer {
            w: Tensor::randn(&[c_out, c_in, k, k], (1.0 / fan_in as f64).sqrt(), rng)
                .requiring_grad(),
            b: Tensor::zeros(&[c_out, 1, 1]).requiring_grad(),
            stride,
        }
    }

    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let k = self.w.shape()[2];
        let pad = k / 2;
        x.conv2d(&self.w, self.stride, pad, PadMode::Zero)?.add(&self.b)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Convolutional stem producing the initial prior tokens: a stack of
/// stride-2 convolutions (SiLU between) tapped at the four scale strides,
/// each tap projected to the embedding width by a 1x1 convolution.
#[derive(Clone)]
pub struct SpatialPrior<T: Scalar> {
    pub stem: Vec<ConvLayer<T>>,
    /// stem index after which each scale is tapped
    taps: [usize; 4],
    pub proj: Vec<ConvLayer<T>>,
    pub patch: usize,
}

impl<T: Scalar> SpatialPrior<T> {
    pub fn init(patch: usize, img_channels: usize, dim: usize, rng: &mut impl Rng) -> Result<SpatialPrior<T>> {
        if patch < 4 || !patch.is_power_of_two() {
            return Err(Error::Config(format!("patch_size {patch} must be a power of two >= 4")));
        }
        let width = dim.min(64);
        let mut stem = Vec::new();
        // reach stride p/4 from the image
        if patch == 4 {
            stem.push(ConvLayer::init(img_channels, width, 3, 1, rng));
        } else {
            let mut c_in = img_channels;
            for _ in 0..(patch / 4).trailing_zeros() {
                stem.push(ConvLayer::init(c_in, width, 3, 2, rng));
                c_in = width;
            }
        }
        let mut taps = [0usize; 4];
        taps[0] = stem.len() - 1;
        // three more halvings: strides p/2, p, 2p
        for j in 1..4 {
            stem.push(ConvLayer::init(width, width, 3, 2, rng));
            taps[j] = stem.len() - 1;
        }
        let proj = (0..4).map(|_| ConvLayer::init(width, dim, 1, 1, rng)).collect();
        Ok(SpatialPrior { stem, taps, proj, patch })
    }

    /// `[C_img, H, W] -> [N, C]` prior tokens (scales concatenated).
    pub fn apply(&self, image: &Tensor<T>) -> Result<(Tensor<T>, ScaleLayout)> {
        if image.rank() != 3 {
            return Err(Error::Invalid {
                op: "spatial_prior",
                msg: format!("needs [C,H,W], got {:?}", image.shape()),
            });
        }
        let layout = ScaleLayout::for_image(image.shape()[1], image.shape()[2], self.patch)?;
        let mut x = image.clone();
        let mut scale_tokens = Vec::with_capacity(4);
        let mut next_tap = 0usize;
        for (i, conv) in self.stem.iter().enumerate() {
            x = conv.apply(&x)?.silu();
            while next_tap < 4 && self.taps[next_tap] == i {
                let m = self.proj[next_tap].apply(&x)?;
                let (h, w) = layout.extents[next_tap];
                if m.shape()[1] != h || m.shape()[2] != w {
                    return Err(Error::Invalid {
                        op: "spatial_prior",
                        msg: format!("scale {next_tap}: got {:?}, expected {h}x{w}", m.shape()),
                    });
                }
                scale_tokens.push(m.map_to_tokens()?);
                next_tap += 1;
            }
        }
        Ok((Tensor::concat(&scale_tokens, 0)?, layout))
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (i, c) in self.stem.iter_mut().enumerate() {
            c.visit_mut(&mut |n, t| f(format!("stem{i}.{n}"), t));
        }
        for (i, c) in self.proj.iter_mut().enumerate() {
            c.visit_mut(&mut |n, t| f(format!("proj{i}.{n}"), t));
        }
    }
}

/// Bare single-head cross-attention: `softmax(q·kᵀ/√C)·v`, no output
/// projection, no normalization.
#[derive(Clone)]
pub struct CrossAttention<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
}

impl<T: Scalar> CrossAttention<T> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> CrossAttention<T> {
        CrossAttention {
            wq: Tensor::randn(&[dim, dim], 0.02, rng).requiring_grad(),
            wk: Tensor::randn(&[dim, dim], 0.02, rng).requiring_grad(),
            wv: Tensor::randn(&[dim, dim], 0.02, rng).requiring_grad(),
        }
    }

    pub fn apply(&self, q_in: &Tensor<T>, kv_in: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.wq.shape()[0];
        if q_in.rank() != 2 || kv_in.rank() != 2 || q_in.shape()[1] != c || kv_in.shape()[1] != c {
            return Err(Error::ShapeMismatch {
                op: "cross_attention",
                lhs: q_in.shape().to_vec(),
                rhs: kv_in.shape().to_vec(),
            });
        }
        let q = q_in.matmul(&self.wq)?;
        let k = kv_in.matmul(&self.wk)?;
        let v = kv_in.matmul(&self.wv)?;
        let scores = q.matmul(&k.t2()?)?.affine(1.0 / (c as f64).sqrt(), 0.0);
        scores.softmax(1)?.matmul(&v)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor<T>)) {
        f("wq", &mut self.wq);
        f("wk", &mut self.wk);
        f("wv", &mut self.wv);
    }
}

/// Token feed-forward with a per-scale depthwise 3x3 in the middle:
/// `fc2(silu(dwconv(fc1(x))))`, final layer zero-initialized.
#[derive(Clone)]
pub struct Cffn<T: Scalar> {
    pub fc1: LinearParams<T>,
    pub dw: Tensor<T>,
    pub dw_b: Tensor<T>,
    pub fc2: LinearParams<T>,
}

impl<T: Scalar> Cffn<T> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> Cffn<T> {
        Cffn {
            fc1: LinearParams::init(dim, dim, 0.02, rng),
            dw: Tensor::randn(&[dim, 3, 3], (1.0f64 / 9.0).sqrt(), rng).requiring_grad(),
            dw_b: Tensor::zeros(&[dim, 1, 1]).requiring_grad(),
            fc2: LinearParams {
                w: Tensor::zeros(&[dim, dim]).requiring_grad(),
                b: Tensor::zeros(&[dim]).requiring_grad(),
            },
        }
    }

    /// `x: [N, C]` prior tokens, reshaped scale-by-scale for the depthwise
    /// convolution.
    pub fn apply(&self, x: &Tensor<T>, layout: &ScaleLayout) -> Result<Tensor<T>> {
        if x.shape()[0] != layout.total {
            return Err(Error::Invalid {
                op: "cffn",
                msg: format!("{} tokens vs layout {}", x.shape()[0], layout.total),
            });
        }
        let h1 = self.fc1.apply(x)?;
        let mut parts = Vec::with_capacity(4);
        for j in 0..4 {
            let (off, len) = layout.span(j);
            let (h, w) = layout.extents[j];
            let map = h1.narrow(0, off, len)?.tokens_to_map(h, w)?;
            let conv = map.depthwise_conv2d(&self.dw, 1, 1, PadMode::Zero)?.add(&self.dw_b)?;
            parts.push(conv.map_to_tokens()?);
        }
        self.fc2.apply(&Tensor::concat(&parts, 0)?.silu())
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_mut(&mut |n, t| f(format!("fc1.{n}"), t));
        f("dw".to_string(), &mut self.dw);
        f("dw_b".to_string(), &mut self.dw_b);
        self.fc2.visit_mut(&mut |n, t| f(format!("fc2.{n}"), t));
    }
}

/// One injector/extractor stage with zero-initialized gates.
#[derive(Clone)]
pub struct AdapterStage<T: Scalar> {
    pub gamma_in: Tensor<T>,
    pub inject_attn: CrossAttention<T>,
    pub gamma_ex: Tensor<T>,
    pub extract_attn: CrossAttention<T>,
    pub cffn: Cffn<T>,
}

impl<T: Scalar> AdapterStage<T> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> AdapterStage<T> {
        AdapterStage {
            gamma_in: Tensor::zeros(&[]).requiring_grad(),
            inject_attn: CrossAttention::init(dim, rng),
            gamma_ex: Tensor::zeros(&[]).requiring_grad(),
            extract_attn: CrossAttention::init(dim, rng),
            cffn: Cffn::init(dim, rng),
        }
    }

    /// `f̂ = f + γ_in · CrossAttn(f, c)`; identity while the gate is zero.
    pub fn inject(&self, f: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
        f.add(&self.gamma_in.mul(&self.inject_attn.apply(f, c)?)?)
    }

    /// `ĉ = c + γ_ex · CrossAttn(c, f̂)` then `ĉ + CFFN(ĉ)`.
    pub fn extract(&self, c: &Tensor<T>, f_hat: &Tensor<T>, layout: &ScaleLayout) -> Result<Tensor<T>> {
        let c_hat = c.add(&self.gamma_ex.mul(&self.extract_attn.apply(c, f_hat)?)?)?;
        c_hat.add(&self.cffn.apply(&c_hat, layout)?)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f("gamma_in".to_string(), &mut self.gamma_in);
        self.inject_attn.visit_mut(&mut |n, t| f(format!("inject.{n}"), t));
        f("gamma_ex".to_string(), &mut self.gamma_ex);
        self.extract_attn.visit_mut(&mut |n, t| f(format!("extract.{n}"), t));
        self.cffn.visit_mut(&mut |n, t| f(format!("cffn.{n}"), t));
    }
}

/// Four-scale feature maps, fine to coarse: strides `p/4, p/2, p, 2p`.
#[derive(Clone)]
pub struct FeaturePyramid<T: Scalar> {
    pub levels: [Tensor<T>; 4],
}

/// The full adapter: spatial prior plus four stages.
#[derive(Clone)]
pub struct Adapter<T: Scalar> {
    pub spm: SpatialPrior<T>,
    pub stages: Vec<AdapterStage<T>>,
    pub dim: usize,
}

impl<T: Scalar> Adapter<T> {
    pub fn init(patch: usize, img_channels: usize, dim: usize, rng: &mut impl Rng) -> Result<Adapter<T>> {
        Ok(Adapter {
            spm: SpatialPrior::init(patch, img_channels, dim, rng)?,
            stages: (0..4).map(|_| AdapterStage::init(dim, rng)).collect(),
            dim,
        })
    }

    /// Builds the pyramid for one image from its four encoder taps.
    pub fn adapt(&self, image: &Tensor<T>, taps: &[Tensor<T>; 4]) -> Result<FeaturePyramid<T>> {
        let (mut c, layout) = self.spm.apply(image)?;
        for (stage, tap) in self.stages.iter().zip(taps.iter()) {
            let f_hat = stage.inject(tap, &c)?;
            c = stage.extract(&c, &f_hat, &layout)?;
        }
        build_pyramid(taps, &c, &layout, self.spm.patch, image.shape()[1], image.shape()[2])
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.spm.visit_mut(&mut |n, t| f(format!("spm.{n}"), t));
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&mut |n, t| f(format!("stage{}.{n}", i + 1), t));
        }
    }
}

/// Splits the final prior tokens into scale maps and adds each to the
/// matching bilinearly-resized encoder tap (the stride-`p` level needs no
/// resize).
pub fn build_pyramid<T: Scalar>(
    taps: &[Tensor<T>; 4],
    c_final: &Tensor<T>,
    layout: &ScaleLayout,
    patch: usize,
    img_h: usize,
    img_w: usize,
) -> Result<FeaturePyramid<T>> {
    if c_final.shape()[0] != layout.total {
        return Err(Error::Invalid {
            op: "build_pyramid",
            msg: format!("{} prior tokens vs layout {}", c_final.shape()[0], layout.total),
        });
    }
    let (gh, gw) = (img_h / patch, img_w / patch);
    let mut levels = Vec::with_capacity(4);
    for j in 0..4 {
        let (off, len) = layout.span(j);
        let (h, w) = layout.extents[j];
        let c_map = c_final.narrow(0, off, len)?.tokens_to_map(h, w)?;
        let tap_map = taps[j].tokens_to_map(gh, gw)?.bilinear_resize(h, w)?;
        levels.push(tap_map.add(&c_map)?);
    }
    let l4 = levels.pop().unwrap();
    let l3 = levels.pop().unwrap();
    let l2 = levels.pop().unwrap();
    let l1 = levels.pop().unwrap();
    Ok(FeaturePyramid { levels: [l1, l2, l3, l4] })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn layout_extents_and_totals() {
        // 64x64 at p=16: scales 16^2, 8^2, 4^2, 2^2
        let l = ScaleLayout::for_image(64, 64, 16).unwrap();
        assert_eq!(l.extents, [(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(l.total, 256 + 64 + 16 + 4);
        // 16T + 4T + T + T/4 with T = 16
        assert_eq!(l.total, 340);
        // 256x256 at p=16 pyramid extents
        let l = ScaleLayout::for_image(256, 256, 16).unwrap();
        assert_eq!(l.extents, [(64, 64), (32, 32), (16, 16), (8, 8)]);
    }

    #[test]
    fn layout_rejects_bad_dims() {
        assert!(ScaleLayout::for_image(60, 64, 16).is_err());
        assert!(ScaleLayout::for_image(64, 64, 12).is_err());
        assert!(ScaleLayout::for_image(64, 64, 2).is_err());
    }

    #[test]
    fn spatial_prior_zero_image_zero_tokens() {
        let mut r = rng(1);
        let spm = SpatialPrior::<f64>::init(4, 3, 8, &mut r).unwrap();
        let (c, layout) = spm.apply(&Tensor::zeros(&[3, 8, 8])).unwrap();
        assert_eq!(c.shape(), &[layout.total, 8]);
        assert_eq!(layout.total, 64 + 16 + 4 + 1);
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spatial_prior_scale_shapes_p16() {
        let mut r = rng(2);
        let spm = SpatialPrior::<f64>::init(16, 3, 8, &mut r).unwrap();
        let img = Tensor::randn(&[3, 64, 64], 0.5, &mut r);
        let (c, layout) = spm.apply(&img).unwrap();
        assert_eq!(layout.extents, [(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(c.shape(), &[340, 8]);
        assert!(c.all_finite());
    }

    #[test]
    fn inject_zero_gate_is_identity() {
        let mut r = rng(3);
        let stage = AdapterStage::<f64>::init(8, &mut r);
        let f = Tensor::randn(&[4, 8], 0.7, &mut r);
        let c = Tensor::randn(&[10, 8], 0.7, &mut r);
        let out = stage.inject(&f, &c).unwrap();
        assert_eq!(out.data(), f.data());
    }

    #[test]
    fn single_token_kv_attention_returns_its_value_projection() {
        let mut r = rng(4);
        let attn = CrossAttention::<f64>::init(6, &mut r);
        let f = Tensor::randn(&[5, 6], 0.9, &mut r);
        let c = Tensor::randn(&[1, 6], 0.9, &mut r);
        let out = attn.apply(&f, &c).unwrap();
        let v = c.matmul(&attn.wv).unwrap();
        for row in out.data().chunks(6) {
            for (a, b) in row.iter().zip(v.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn inject_gradcheck() {
        let mut r = rng(5);
        let mut stage = AdapterStage::<f64>::init(8, &mut r);
        // non-zero gate so the attention path carries gradient
        stage.gamma_in = Tensor::from_vec(vec![0.3], &[]).unwrap();
        let c = Tensor::randn(&[6, 8], 0.6, &mut r);
        let f = Tensor::randn(&[4, 8], 0.6, &mut r);
        let err = grad_check(|v| Ok(stage.inject(v, &c)?.sqr().sum_all()), &f, 1e-5).unwrap();
        assert!(err < 1e-4, "query path: {err}");
        let err = grad_check(|v| Ok(stage.inject(&f, v)?.sqr().sum_all()), &c, 1e-5).unwrap();
        assert!(err < 1e-4, "kv path: {err}");
    }

    #[test]
    fn extract_zero_init_is_identity_on_prior() {
        let mut r = rng(6);
        let stage = AdapterStage::<f64>::init(8, &mut r);
        let layout = ScaleLayout::for_image(8, 8, 4).unwrap();
        let c = Tensor::randn(&[layout.total, 8], 0.5, &mut r);
        let f_hat = Tensor::randn(&[4, 8], 0.5, &mut r);
        let out = stage.extract(&c, &f_hat, &layout).unwrap();
        assert_eq!(out.data(), c.data());
    }

    #[test]
    fn cffn_constant_input_interior_scales_by_kernel_sum() {
        let dim = 3;
        let mut r = rng(7);
        let mut cffn = Cffn::<f64>::init(dim, &mut r);
        cffn.fc1 = LinearParams { w: Tensor::eye(dim), b: Tensor::zeros(&[dim]) };
        cffn.dw = Tensor::ones(&[dim, 3, 3]);
        cffn.dw_b = Tensor::zeros(&[dim, 1, 1]);
        cffn.fc2 = LinearParams { w: Tensor::eye(dim), b: Tensor::zeros(&[dim]) };
        // constant tokens; finest scale is 8x8 so it has a true interior
        let layout = ScaleLayout::for_image(8, 8, 4).unwrap();
        let cval = 0.35;
        let x = Tensor::full(&[layout.total, dim], cval);
        let y = cffn.apply(&x, &layout).unwrap();
        // token (row 3, col 3) of scale 0 is interior: dwconv gives 9c
        let silu = |v: f64| v / (1.0 + (-v).exp());
        let idx = (3 * 8 + 3) * dim;
        for d in 0..dim {
            assert!((y.data()[idx + d] - silu(9.0 * cval)).abs() < 1e-12);
        }
        // corner of scale 0 sees a 2x2 window under zero padding
        for d in 0..dim {
            assert!((y.data()[d] - silu(4.0 * cval)).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_split_concat_roundtrip_bitwise() {
        let layout = ScaleLayout::for_image(8, 8, 4).unwrap();
        let mut r = rng(8);
        let c = Tensor::<f64>::randn(&[layout.total, 5], 1.0, &mut r);
        let mut parts = Vec::new();
        for j in 0..4 {
            let (off, len) = layout.span(j);
            let (h, w) = layout.extents[j];
            parts.push(c.narrow(0, off, len).unwrap().tokens_to_map(h, w).unwrap().map_to_tokens().unwrap());
        }
        let back = Tensor::concat(&parts, 0).unwrap();
        assert_eq!(back.data(), c.data());
    }

    #[test]
    fn pyramid_zero_prior_equals_resized_taps() {
        let layout = ScaleLayout::for_image(8, 8, 4).unwrap();
        let mut r = rng(9);
        let dim = 5;
        let taps: [Tensor<f64>; 4] =
            std::array::from_fn(|_| Tensor::randn(&[4, dim], 0.8, &mut r));
        let c0 = Tensor::zeros(&[layout.total, dim]);
        let pyr = build_pyramid(&taps, &c0, &layout, 4, 8, 8).unwrap();
        assert_eq!(pyr.levels[0].shape(), &[dim, 8, 8]);
        assert_eq!(pyr.levels[1].shape(), &[dim, 4, 4]);
        assert_eq!(pyr.levels[2].shape(), &[dim, 2, 2]);
        assert_eq!(pyr.levels[3].shape(), &[dim, 1, 1]);
        // stride-p level: identity resize, so it equals the tap map exactly
        let tap3 = taps[2].tokens_to_map(2, 2).unwrap();
        assert_eq!(pyr.levels[2].data(), tap3.data());
        // finest level equals bilinear upsampling of the tap
        let up = taps[0].tokens_to_map(2, 2).unwrap().bilinear_resize(8, 8).unwrap();
        assert_eq!(pyr.levels[0].data(), up.data());
    }

    #[test]
    fn default_adapter_is_identity_plus_prior() {
        // zero gates + zero CFFN output layer: stages leave the prior
        // untouched, so the pyramid is resized taps + raw prior maps
        let mut r = rng(10);
        let dim = 6;
        let adapter = Adapter::<f64>::init(4, 3, dim, &mut r).unwrap();
        let img = Tensor::randn(&[3, 8, 8], 0.5, &mut r);
        let taps: [Tensor<f64>; 4] =
            std::array::from_fn(|_| Tensor::randn(&[4, dim], 0.8, &mut r));
        let pyr = adapter.adapt(&img, &taps).unwrap();

        let (c0, layout) = adapter.spm.apply(&img).unwrap();
        let expect = build_pyramid(&taps, &c0, &layout, 4, 8, 8).unwrap();
        for (a, b) in pyr.levels.iter().zip(expect.levels.iter()) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn stage_gradcheck_end_to_end() {
        // one full stage (inject + extract + cffn) with live gates
        let mut r = rng(11);
        let dim = 8;
        let mut stage = AdapterStage::<f64>::init(dim, &mut r);
        stage.gamma_in = Tensor::from_vec(vec![0.4], &[]).unwrap();
        stage.gamma_ex = Tensor::from_vec(vec![0.25], &[]).unwrap();
        stage.cffn.fc2 = LinearParams::init(dim, dim, 0.1, &mut r);
        let layout = ScaleLayout::for_image(8, 8, 4).unwrap();
        let c = Tensor::randn(&[layout.total, dim], 0.4, &mut r);
        let f = Tensor::randn(&[4, dim], 0.4, &mut r);
        let err = grad_check(
            |v| {
                let f_hat = stage.inject(v, &c)?;
                Ok(stage.extract(&c, &f_hat, &layout)?.sqr().sum_all())
            },
            &f,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "tap path: {err}");
        let err = grad_check(
            |v| {
                let f_hat = stage.inject(&f, v)?;
                Ok(stage.extract(v, &f_hat, &layout)?.sqr().sum_all())
            },
            &c,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "prior path: {err}");
    }

    #[test]
    fn adapter_full_gradcheck_small() {
        let mut r = rng(12);
        let dim = 4;
        let mut adapter = Adapter::<f64>::init(4, 1, dim, &mut r).unwrap();
        for s in adapter.stages.iter_mut() {
            s.gamma_in = Tensor::from_vec(vec![0.2], &[]).unwrap();
            s.gamma_ex = Tensor::from_vec(vec![0.15], &[]).unwrap();
        }
        let taps: [Tensor<f64>; 4] =
            std::array::from_fn(|_| Tensor::randn(&[4, dim], 0.5, &mut r));
        let img = Tensor::randn(&[1, 8, 8], 0.5, &mut r);
        let err = grad_check(
            |v| {
                let pyr = adapter.adapt(v, &taps)?;
                let mut acc = pyr.levels[0].sqr().sum_all();
                for l in &pyr.levels[1..] {
                    acc = acc.add(&l.sqr().sum_all())?;
                }
                Ok(acc)
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "adapter image grad: {err}");
    }
}
