//! Decoder: coarse-to-fine refinement of the fused pyramid into a
//! full-resolution change probability map.
//!
//! Starting from the coarsest level, each stage bilinearly doubles the
//! running map, merges the matching skip level with a 1x1 convolution, and
//! refines the flattened tokens with three attention blocks. A 1x1
//! reduction then feeds a learned convex-combination upsampler (softmax
//! weights over a 3x3 neighborhood per high-resolution pixel) that restores
//! the input resolution in one step; sigmoid gives per-pixel probabilities,
//! thresholded strictly above one half for the binary map.

use rand::Rng;

use crate::adapter::{ConvLayer, FeaturePyramid};
use crate::encoder::{block_forward, EncoderConfig, TitansBlock};
use crate::error::{Error, Result};
use crate::fusion::ConvMerge;
use crate::tensor::{Scalar, Tensor};

/// Predicts per-pixel convex weights for upsampling by factor `s` over a
/// `k x k` low-resolution neighborhood.
#[derive(Clone)]
pub struct ConvexHead<T: Scalar> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub k: usize,
    pub s: usize,
}

impl<T: Scalar> ConvexHead<T> {
    /// `conv2` starts at zero so the initial weights are uniform (a plain
    /// box average) — training sharpens them.
    pub fn init(channels: usize, k: usize, s: usize, rng: &mut impl Rng) -> Result<ConvexHead<T>> {
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!("convex_kernel must be odd, got {k}")));
        }
        if s == 0 {
            return Err(Error::Config("upsample factor must be at least 1".into()));
        }
        let conv2 = ConvLayer {
            w: Tensor::zeros(&[k * k * s * s, channels, 1, 1]).requiring_grad(),
            b: Tensor::zeros(&[k * k * s * s, 1, 1]).requiring_grad(),
            stride: 1,
        };
        Ok(ConvexHead { conv1: ConvLayer::init(channels, channels, 3, 1, rng), conv2, k, s })
    }

    /// `[C', hl, wl] -> [k^2, hl*s, wl*s]` softmax-normalized weights: each
    /// high-resolution pixel gets a distribution over its k x k
    /// low-resolution neighborhood.
    pub fn weights(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let (k, s) = (self.k, self.s);
        let hl = y.shape()[1];
        let wl = y.shape()[2];
        let logits = self.conv2.apply(&self.conv1.apply(y)?.silu())?;
        let spread = logits
            .reshape(&[k * k, s, s, hl, wl])?
            .permute(&[0, 3, 1, 4, 2])?
            .reshape(&[k * k, hl * s, wl * s])?;
        spread.softmax(0)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.conv1.visit_mut(&mut |n, t| f(format!("conv1.{n}"), t));
        self.conv2.visit_mut(&mut |n, t| f(format!("conv2.{n}"), t));
    }
}

/// One upsample/merge/refine stage.
#[derive(Clone)]
pub struct DecoderStage<T: Scalar> {
    pub merge: ConvMerge<T>,
    pub blocks: Vec<TitansBlock<T>>,
}

/// Full decoder with the final channel reduction, logit projection, and
/// convex upsampler.
#[derive(Clone)]
pub struct Decoder<T: Scalar> {
    pub stages: Vec<DecoderStage<T>>,
    pub reduce: ConvLayer<T>,
    pub proj: ConvLayer<T>,
    pub head: ConvexHead<T>,
    pub bilinear: bool,
    chunk: usize,
    second_order: bool,
}

impl<T: Scalar> Decoder<T> {
    /// `cfg` supplies the block hyperparameters (width, heads, chunking,
    /// memory schedule — block indices run 1..=9 across the three stages);
    /// `channels` is the reduced width ahead of the upsampler; the
    /// upsampling factor is `patch/4` (the finest pyramid stride).
    pub fn init(
        cfg: &EncoderConfig,
        channels: usize,
        kernel: usize,
        bilinear: bool,
        rng: &mut impl Rng,
    ) -> Result<Decoder<T>> {
        let mut stages = Vec::with_capacity(3);
        for si in 0..3 {
            let blocks = (0..3)
                .map(|bi| TitansBlock::init(cfg, cfg.layer_has_memory(si * 3 + bi + 1), rng))
                .collect();
            stages.push(DecoderStage { merge: ConvMerge::init(cfg.dim, rng), blocks });
        }
        Ok(Decoder {
            stages,
            reduce: ConvLayer::init(cfg.dim, channels, 1, 1, rng),
            proj: ConvLayer::init(channels, 1, 1, 1, rng),
            head: ConvexHead::init(channels, kernel, cfg.patch / 4, rng)?,
            bilinear,
            chunk: cfg.chunk,
            second_order: cfg.second_order,
        })
    }

    /// Fused pyramid -> reduced map `[channels, 4H/p, 4W/p]` at the finest
    /// pyramid scale.
    pub fn decode(&self, pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        let mut z = pyramid.levels[3].clone();
        for (stage, skip) in self.stages.iter().zip(pyramid.levels[..3].iter().rev()) {
            let (h, w) = (skip.shape()[1], skip.shape()[2]);
            if h != 2 * z.shape()[1] || w != 2 * z.shape()[2] {
                return Err(Error::Invalid {
                    op: "decode",
                    msg: format!("skip {:?} does not double {:?}", skip.shape(), z.shape()),
                });
            }
            let up = z.bilinear_resize(h, w)?;
            let merged = stage.merge.apply(&up, skip)?;
            let mut tokens = merged.map_to_tokens()?;
            let ck = self.chunk.min(tokens.shape()[0]);
            for b in &stage.blocks {
                tokens = block_forward(b, &tokens, ck, self.second_order)?;
            }
            z = tokens.tokens_to_map(h, w)?;
        }
        self.reduce.apply(&z)
    }

    /// Reduced map -> full-resolution logits `[H, W]`.
    pub fn upsample_logits(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        let lo = self.proj.apply(y)?;
        let (hl, wl) = (lo.shape()[1], lo.shape()[2]);
        let s = self.head.s;
        let hr = if self.bilinear {
            lo.bilinear_resize(hl * s, wl * s)?
        } else {
            let w = self.head.weights(y)?;
            lo.convex_upsample(&w, self.head.k)?
        };
        hr.reshape(&[hl * s, wl * s])
    }

    /// Pyramid -> full-resolution logits.
    pub fn forward(&self, pyramid: &FeaturePyramid<T>) -> Result<Tensor<T>> {
        self.upsample_logits(&self.decode(pyramid)?)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (si, stage) in self.stages.iter_mut().enumerate() {
            stage.merge.visit_mut(&mut |n, t| f(format!("stage{}.merge.{n}", si + 1), t));
            for (bi, b) in stage.blocks.iter_mut().enumerate() {
                b.visit_mut(&mut |n, t| f(format!("stage{}.block{}.{n}", si + 1, bi + 1), t));
            }
        }
        self.reduce.visit_mut(&mut |n, t| f(format!("reduce.{n}"), t));
        self.proj.visit_mut(&mut |n, t| f(format!("proj.{n}"), t));
        self.head.visit_mut(&mut |n, t| f(format!("head.{n}"), t));
    }
}

/// Final prediction: probabilities plus the binary map (class 1 strictly
/// above 0.5 — an exact 0.5 stays class 0).
#[derive(Clone)]
pub struct ChangeMap<T: Scalar> {
    pub h: usize,
    pub w: usize,
    pub probs: Tensor<T>,
    pub mask: Vec<bool>,
}

pub fn predict<T: Scalar>(logits: &Tensor<T>) -> Result<ChangeMap<T>> {
    if logits.rank() != 2 {
        return Err(Error::Invalid {
            op: "predict",
            msg: format!("logits must be [H,W], got {:?}", logits.shape()),
        });
    }
    let probs = logits.sigmoid();
    let half = crate::tensor::sc::<T>(0.5);
    let mask = probs.data().iter().map(|&p| p > half).collect();
    Ok(ChangeMap { h: logits.shape()[0], w: logits.shape()[1], probs, mask })
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

    fn cfg(dim: usize, patch: usize, chunk: usize, persistent: usize) -> EncoderConfig {
        EncoderConfig {
            layers: 4,
            dim,
            patch,
            chunk,
            persistent,
            heads: 2,
            memory_interval: 3,
            memory: true,
            second_order: false,
            ..EncoderConfig::default()
        }
    }

    fn pyramid(dim: usize, base: usize, seed: u64) -> FeaturePyramid<f64> {
        let mut r = rng(seed);
        let levels = std::array::from_fn(|j| {
            let side = base >> j;
            Tensor::randn(&[dim, side, side], 0.5, &mut r)
        });
        FeaturePyramid { levels }
    }

    #[test]
    fn shape_chain_doubles_and_restores_resolution() {
        // 64x64 image at p=16: pyramid 16,8,4,2; decode ends at 16 and the
        // factor-4 upsampler restores 64x64
        let mut r = rng(1);
        let c = cfg(8, 16, 64, 2);
        let dec = Decoder::<f64>::init(&c, 4, 3, false, &mut r).unwrap();
        let pyr = pyramid(8, 16, 2);
        let y = dec.decode(&pyr).unwrap();
        assert_eq!(y.shape(), &[4, 16, 16]);
        let logits = dec.upsample_logits(&y).unwrap();
        assert_eq!(logits.shape(), &[64, 64]);
        let cm = predict(&logits).unwrap();
        assert_eq!((cm.h, cm.w), (64, 64));
        assert_eq!(cm.probs.shape(), &[64, 64]);
    }

    #[test]
    fn mismatched_pyramid_errors() {
        let mut r = rng(3);
        let c = cfg(8, 16, 64, 2);
        let dec = Decoder::<f64>::init(&c, 4, 3, false, &mut r).unwrap();
        let mut pyr = pyramid(8, 16, 4);
        pyr.levels[1] = Tensor::zeros(&[8, 5, 5]);
        assert!(dec.decode(&pyr).is_err());
    }

    #[test]
    fn zero_pyramid_bias_free_gives_zero_reduced_map() {
        // no persistent tokens and all biases at their zero init: every
        // stage maps zero to zero
        let mut r = rng(5);
        let c = cfg(4, 4, 16, 0);
        let dec = Decoder::<f64>::init(&c, 3, 3, false, &mut r).unwrap();
        let levels = std::array::from_fn(|j| Tensor::zeros(&[4, 8 >> j, 8 >> j]));
        let y = dec.decode(&FeaturePyramid { levels }).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        let logits = dec.upsample_logits(&y).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        // zero logits mean probability one half everywhere, class 0
        let cm = predict(&logits).unwrap();
        assert!(cm.probs.data().iter().all(|&p| p == 0.5));
        assert!(cm.mask.iter().all(|&m| !m));
    }

    #[test]
    fn decode_is_deterministic() {
        let mut r = rng(6);
        let c = cfg(4, 4, 8, 1);
        let dec = Decoder::<f64>::init(&c, 3, 3, false, &mut r).unwrap();
        let pyr = pyramid(4, 8, 7);
        let a = dec.forward(&pyr).unwrap();
        let b = dec.forward(&pyr).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn default_head_gives_uniform_weights() {
        let mut r = rng(8);
        let head = ConvexHead::<f64>::init(3, 3, 4, &mut r).unwrap();
        let y = Tensor::randn(&[3, 2, 2], 0.7, &mut r);
        let w = head.weights(&y).unwrap();
        assert_eq!(w.shape(), &[9, 8, 8]);
        for &v in w.data() {
            assert!((v - 1.0 / 9.0).abs() < 1e-15);
        }
    }

    #[test]
    fn trained_head_weights_are_convex() {
        let mut r = rng(9);
        let mut head = ConvexHead::<f64>::init(3, 3, 2, &mut r).unwrap();
        head.conv2.w = Tensor::randn(&[9 * 4, 3, 1, 1], 0.8, &mut r);
        head.conv2.b = Tensor::randn(&[9 * 4, 1, 1], 0.3, &mut r);
        let y = Tensor::randn(&[3, 3, 3], 0.7, &mut r);
        let w = head.weights(&y).unwrap();
        let (hr, wr) = (w.shape()[1], w.shape()[2]);
        let d = w.data();
        for p in 0..hr * wr {
            let mut sum = 0.0;
            for i in 0..9 {
                let v = d[i * hr * wr + p];
                assert!(v >= 0.0);
                sum += v;
            }
            assert!((sum - 1.0).abs() < 1e-6, "weight column sums to {sum}");
        }
    }

    #[test]
    fn saturated_logit_dominates() {
        // one neighbor at +1000 takes essentially all of the weight
        let hlwl = 4;
        let mut logits = vec![0.0; 9 * hlwl];
        logits[2 * hlwl + 1] = 1000.0;
        let t = Tensor::<f64>::from_vec(logits, &[9, 2, 2]).unwrap();
        let w = t.softmax(0).unwrap();
        assert!((w.data()[2 * hlwl + 1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_map_upsamples_to_itself_under_any_convex_weights() {
        let mut r = rng(10);
        let mut head = ConvexHead::<f64>::init(2, 3, 3, &mut r).unwrap();
        head.conv2.w = Tensor::randn(&[9 * 9, 2, 1, 1], 0.8, &mut r);
        let y = Tensor::randn(&[2, 3, 3], 0.7, &mut r);
        let w = head.weights(&y).unwrap();
        let cval = -1.7;
        let lo = Tensor::full(&[1, 3, 3], cval);
        let hi = lo.convex_upsample(&w, 3).unwrap();
        for &v in hi.data() {
            assert!((v - cval).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_mode_matches_resolution_contract() {
        let mut r = rng(11);
        let c = cfg(4, 8, 16, 1);
        let dec = Decoder::<f64>::init(&c, 3, 3, true, &mut r).unwrap();
        // 32x32 image at p=8: pyramid 16,8,4,2; finest-scale map is 16 and
        // factor 2 restores 32
        let pyr = pyramid(4, 16, 12);
        let logits = dec.forward(&pyr).unwrap();
        assert_eq!(logits.shape(), &[32, 32]);
        assert!(logits.all_finite());
    }

    #[test]
    fn predict_threshold_is_strict() {
        let t = Tensor::from_vec(vec![0.0, 1e-9, -1e-9, 3.0], &[2, 2]).unwrap();
        let cm = predict(&t).unwrap();
        assert_eq!(cm.mask, vec![false, true, false, true]);
        // monotone: larger logit, larger probability
        let p = cm.probs.data();
        assert!(p[1] > p[0] && p[0] > p[2]);
    }

    #[test]
    fn decoder_gradcheck_through_stages_and_upsampler() {
        let mut r = rng(13);
        let mut c = cfg(4, 4, 2, 1);
        c.second_order = true; // multi-chunk path must carry exact gradients
        let dec = Decoder::<f64>::init(&c, 3, 3, false, &mut r).unwrap();
        let pyr = pyramid(4, 8, 14);
        for level in [0usize, 3] {
            let err = grad_check(
                |v| {
                    let mut p2 = pyr.clone();
                    p2.levels[level] = v.clone();
                    Ok(dec.forward(&p2)?.sqr().sum_all())
                },
                &pyr.levels[level],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "level {level}: {err}");
        }
    }
}
