//! Gradient oracle suite: every differentiable operation and the key
//! composites, checked against central finite differences on pinned
//! random inputs. The CLI's `gradcheck` command runs this list and the
//! acceptance tests gate on it.
//!
//! Elementwise kinks (relu, abs, clamp, max-pool ties) are kept away from
//! their non-differentiable points by construction, so the comparisons are
//! exact statements, not lucky draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use crate::adapter::{AdapterStage, ScaleLayout};
use crate::config::Config;
use crate::encoder::{block_forward, AttentionParams, EncoderConfig, LayerNormParams, TitansBlock};
use crate::error::Result;
use crate::fusion::{fuse, CbamParams, ConvMerge, TsVariant};
use crate::memory::{memory_retrieve, memory_update, MemoryHyper, MemoryMlp, MemoryState};
use crate::objectives::{bce, dice, loss_terms, LossConfig};
use crate::tensor::{grad_check, PadMode, Tensor};

/// Relative-error tolerance for tensor-valued composites.
pub const TOL_COMPOSITE: f64 = 1e-4;
/// Tighter tolerance for the scalar losses.
pub const TOL_SCALAR: f64 = 1e-5;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub err: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn pass(&self) -> bool {
        self.err.is_finite() && self.err < self.tol
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec((0..n).map(|_| r.gen_range(lo..hi)).collect(), shape).unwrap()
}

/// Values in `[-1,-gap] ∪ [gap,1]` — misses every origin kink by `gap`.
fn away_from_zero(shape: &[usize], gap: f64, r: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = r.gen_range(gap..1.0);
            if r.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(data, shape).unwrap()
}

fn run(
    out: &mut Vec<CheckResult>,
    name: &'static str,
    tol: f64,
    x: &Tensor<f64>,
    f: impl Fn(&Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<()> {
    let err = grad_check(f, x, EPS)?;
    out.push(CheckResult { name, err, tol });
    Ok(())
}

/// Runs the whole list; a returned error means a check could not even be
/// evaluated (which the caller should treat as failure, not absence).
pub fn gradient_suite() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let t = TOL_COMPOSITE;

    // --- primitives -----------------------------------------------------
    {
        let mut r = rng(11);
        let big = uniform(&[2, 3], -1.0, 1.0, &mut r);
        let row = uniform(&[3], -1.0, 1.0, &mut r);
        run(&mut out, "add_broadcast", t, &row, |v| Ok(big.add(v)?.sqr().sum_all()))?;
        run(&mut out, "mul_broadcast", t, &row, |v| Ok(big.mul(v)?.sqr().sum_all()))?;
        let den = uniform(&[2, 3], 0.5, 1.5, &mut r);
        run(&mut out, "div", t, &den, |v| Ok(big.div(v)?.sqr().sum_all()))?;
        run(&mut out, "affine", t, &big, |v| Ok(v.affine(-2.0, 0.3).sqr().sum_all()))?;
    }
    {
        let mut r = rng(12);
        let x = uniform(&[7], -0.8, 0.8, &mut r);
        let pos = uniform(&[7], 0.4, 1.6, &mut r);
        let off = away_from_zero(&[7], 0.25, &mut r);
        run(&mut out, "exp", t, &x, |v| Ok(v.exp().sqr().sum_all()))?;
        run(&mut out, "ln", t, &pos, |v| Ok(v.ln().sqr().sum_all()))?;
        run(&mut out, "sqrt", t, &pos, |v| Ok(v.sqrt().sqr().sum_all()))?;
        run(&mut out, "sqr", t, &x, |v| Ok(v.sqr().sum_all()))?;
        run(&mut out, "abs", t, &off, |v| Ok(v.abs().sqr().sum_all()))?;
        run(&mut out, "relu", t, &off, |v| Ok(v.relu().sqr().sum_all()))?;
        run(&mut out, "sigmoid", t, &x, |v| Ok(v.sigmoid().sqr().sum_all()))?;
        run(&mut out, "silu", t, &x, |v| Ok(v.silu().sqr().sum_all()))?;
        run(&mut out, "softplus", t, &x, |v| Ok(v.softplus().sqr().sum_all()))?;
        run(&mut out, "tanh", t, &x, |v| Ok(v.tanh().sqr().sum_all()))?;
        let interior = uniform(&[7], 0.31, 0.69, &mut r);
        run(&mut out, "clamp", t, &interior, |v| Ok(v.clamp(0.3, 0.7).sqr().sum_all()))?;
    }
    {
        let mut r = rng(13);
        let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 4], -1.0, 1.0, &mut r);
        run(&mut out, "softmax", t, &x, |v| Ok(v.softmax(1)?.mul(&w)?.sqr().sum_all()))?;
        run(&mut out, "sum_mean_axis", t, &x, |v| {
            v.sum_axis(0, false)?.sqr().sum_all().add(&v.mean_axis(1, false)?.sqr().sum_all())
        })?;
        let a = uniform(&[2, 3], -1.0, 1.0, &mut r);
        let b = uniform(&[4, 2], -1.0, 1.0, &mut r);
        run(&mut out, "matmul", t, &x, |v| Ok(a.matmul(v)?.matmul(&b)?.sqr().sum_all()))?;
        let cube = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        run(&mut out, "permute_reshape", t, &cube, |v| {
            Ok(v.permute(&[2, 0, 1])?.reshape(&[4, 6])?.matmul(&x.reshape(&[6, 2])?)?.sqr().sum_all())
        })?;
        run(&mut out, "narrow_concat", t, &x, |v| {
            let top = v.narrow(0, 0, 1)?;
            let rest = v.narrow(0, 1, 2)?;
            Ok(Tensor::concat(&[rest, top], 0)?.sqr().sum_all())
        })?;
    }

    // --- normalization and attention ------------------------------------
    {
        let mut r = rng(14);
        let mut ln = LayerNormParams::<f64>::init(4);
        ln.gamma = uniform(&[4], 0.5, 1.5, &mut r);
        ln.beta = uniform(&[4], -0.3, 0.3, &mut r);
        let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
        run(&mut out, "layer_norm", t, &x, |v| Ok(ln.apply(v)?.sqr().sum_all()))?;
        let attn = AttentionParams::<f64>::init(4, 2, &mut r);
        let kv = uniform(&[5, 4], -1.0, 1.0, &mut r);
        run(&mut out, "attention", t, &x, |v| Ok(attn.apply(v, &kv)?.sqr().sum_all()))?;
    }

    // --- image ops --------------------------------------------------------
    {
        let mut r = rng(15);
        let img = uniform(&[2, 5, 5], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 2, 3, 3], -0.5, 0.5, &mut r);
        run(&mut out, "conv2d_zero_pad", t, &img, |v| {
            Ok(v.conv2d(&w, 1, 1, PadMode::Zero)?.sqr().sum_all())
        })?;
        run(&mut out, "conv2d_weight", t, &w, |v| {
            Ok(img.conv2d(v, 2, 1, PadMode::Zero)?.sqr().sum_all())
        })?;
        run(&mut out, "conv2d_reflect_pad", t, &img, |v| {
            Ok(v.conv2d(&w, 1, 1, PadMode::Reflect)?.sqr().sum_all())
        })?;
        let dw = uniform(&[2, 3, 3], -0.5, 0.5, &mut r);
        run(&mut out, "depthwise_conv2d", t, &dw, |v| {
            Ok(img.depthwise_conv2d(v, 1, 1, PadMode::Zero)?.sqr().sum_all())
        })?;
        run(&mut out, "pool_avg", t, &img, |v| {
            v.pool_spatial_avg()?.sqr().sum_all().add(&v.pool_channel_avg()?.sqr().sum_all())
        })?;
        run(&mut out, "pool_max", t, &img, |v| {
            v.pool_spatial_max()?.sqr().sum_all().add(&v.pool_channel_max()?.sqr().sum_all())
        })?;
        run(&mut out, "bilinear_resize", t, &img, |v| {
            Ok(v.bilinear_resize(8, 7)?.sqr().sum_all())
        })?;
        let sq = uniform(&[2, 4, 4], -1.0, 1.0, &mut r);
        run(&mut out, "patchify_tokens", t, &sq, |v| {
            Ok(v.patchify(2)?.tokens_to_map(2, 2)?.map_to_tokens()?.sqr().sum_all())
        })?;
        let lo = uniform(&[1, 3, 3], -1.0, 1.0, &mut r);
        let raw = uniform(&[9, 6, 6], -1.0, 1.0, &mut r);
        let wconv = raw.softmax(0)?.detach();
        run(&mut out, "convex_upsample_source", t, &lo, |v| {
            Ok(v.convex_upsample(&wconv, 3)?.sqr().sum_all())
        })?;
        run(&mut out, "convex_upsample_weights", t, &raw, |v| {
            Ok(lo.convex_upsample(&v.softmax(0)?, 3)?.sqr().sum_all())
        })?;
    }

    // --- memory inner loop -------------------------------------------------
    {
        let mut r = rng(16);
        let hyper = MemoryHyper::<f64>::init(4, &mut r);
        let mlp = MemoryMlp::<f64>::init(4, &mut r);
        let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
        run(&mut out, "memory_step_tokens", t, &x, |v| {
            let st = memory_update(&MemoryState::fresh(mlp.clone()), &hyper, v)?;
            Ok(memory_retrieve(&st, &hyper, v)?.sqr().sum_all())
        })?;
        let wk0 = hyper.w_k.detach();
        run(&mut out, "memory_step_keys", t, &wk0, |v| {
            let h = MemoryHyper { w_k: v.clone(), ..hyper.clone() };
            let st = memory_update(&MemoryState::fresh(mlp.clone()), &h, &x)?;
            Ok(memory_retrieve(&st, &h, &x)?.sqr().sum_all())
        })?;
    }

    // --- encoder block, adapter stage, fusion -------------------------------
    {
        let mut r = rng(17);
        let ecfg = EncoderConfig {
            layers: 4,
            dim: 4,
            patch: 2,
            chunk: 2,
            persistent: 2,
            heads: 2,
            memory_interval: 1,
            memory: true,
            second_order: true,
        };
        let block = TitansBlock::<f64>::init(&ecfg, true, &mut r);
        let x = uniform(&[5, 4], -1.0, 1.0, &mut r);
        run(&mut out, "titans_block_multichunk", t, &x, |v| {
            Ok(block_forward(&block, v, 2, true)?.sqr().sum_all())
        })?;
    }
    {
        let mut r = rng(18);
        let mut stage = AdapterStage::<f64>::init(4, &mut r);
        // Open the gates and the zero-initialized feed-forward output so
        // every branch carries gradient.
        stage.gamma_in = Tensor::scalar(0.3).requiring_grad();
        stage.gamma_ex = Tensor::scalar(-0.2).requiring_grad();
        stage.cffn.fc2.w = uniform(&[4, 4], -0.1, 0.1, &mut r).requiring_grad();
        let layout = ScaleLayout::for_image(8, 8, 4)?;
        let f_tokens = uniform(&[4, 4], -1.0, 1.0, &mut r);
        let c_tokens = uniform(&[layout.total, 4], -1.0, 1.0, &mut r);
        run(&mut out, "adapter_stage", t, &c_tokens, |v| {
            let f_hat = stage.inject(&f_tokens, v)?;
            Ok(stage.extract(v, &f_hat, &layout)?.sqr().sum_all())
        })?;
    }
    {
        let mut r = rng(19);
        let cbam = CbamParams::<f64>::init(3, &mut r);
        let merge = ConvMerge::<f64>::init(3, &mut r);
        let f1 = uniform(&[3, 4, 4], -1.0, 1.0, &mut r);
        let f2 = uniform(&[3, 4, 4], -1.0, 1.0, &mut r);
        run(&mut out, "fusion_cbam_sum", t, &f1, |v| {
            Ok(fuse(v, &f2, &cbam, TsVariant::Sum, None)?.sqr().sum_all())
        })?;
        run(&mut out, "fusion_cbam_conv", t, &f1, |v| {
            Ok(fuse(v, &f2, &cbam, TsVariant::Conv, Some(&merge))?.sqr().sum_all())
        })?;
    }

    // --- decoder -----------------------------------------------------------
    {
        let mut r = rng(20);
        let ecfg = EncoderConfig {
            layers: 4,
            dim: 4,
            patch: 4,
            chunk: 2,
            persistent: 1,
            heads: 2,
            memory_interval: 2,
            memory: true,
            second_order: true,
        };
        let dec = crate::decoder::Decoder::<f64>::init(&ecfg, 3, 3, false, &mut r)?;
        let mk = |e: usize, r: &mut ChaCha8Rng| uniform(&[4, e, e], -1.0, 1.0, r);
        let levels =
            [mk(8, &mut r), mk(4, &mut r), mk(2, &mut r), mk(1, &mut r)];
        let fine = levels[0].detach();
        run(&mut out, "decoder_stack", t, &fine, |v| {
            let pyr = crate::adapter::FeaturePyramid {
                levels: [v.clone(), levels[1].clone(), levels[2].clone(), levels[3].clone()],
            };
            Ok(dec.forward(&pyr)?.sqr().sum_all())
        })?;
    }

    // --- losses -------------------------------------------------------------
    {
        let mut r = rng(21);
        let pred = uniform(&[4, 4], 0.05, 0.95, &mut r);
        let tdata: Vec<f64> = (0..16).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let target = Tensor::from_vec(tdata, &[4, 4]).unwrap();
        run(&mut out, "bce", TOL_SCALAR, &pred, |v| bce(v, &target))?;
        run(&mut out, "dice", TOL_SCALAR, &pred, |v| dice(v, &target, 1.0))?;
        let lcfg = LossConfig { lambda: 0.7, epsilon: 1.0 };
        run(&mut out, "hybrid_total", TOL_SCALAR, &pred, |v| {
            Ok(loss_terms(v, &target, &lcfg)?.total)
        })?;
    }

    // --- the whole model ------------------------------------------------------
    {
        let cfg = Config {
            titans_blocks: 4,
            embedding_dim: 4,
            patch_size: 4,
            chunk_size: 2,
            memory_interval: 2,
            persistent_tokens: 1,
            heads: 2,
            image_size: 8,
            image_channels: 3,
            decoder_channels: 3,
            convex_kernel: 3,
            second_order: true,
            ..Config::default()
        };
        let mut r = rng(22);
        let model = Model::<f64>::init(&cfg, &mut r)?;
        let t2 = uniform(&[3, 8, 8], 0.1, 0.9, &mut r);
        let t1 = uniform(&[3, 8, 8], 0.1, 0.9, &mut r);
        let tdata: Vec<f64> = (0..64).map(|_| if r.gen::<bool>() { 1.0 } else { 0.0 }).collect();
        let target = Tensor::from_vec(tdata, &[8, 8]).unwrap();
        let lcfg = cfg.loss_config();
        run(&mut out, "full_pipeline", t, &t1, |v| {
            let logits = model.forward(v, &t2)?;
            Ok(loss_terms(&logits.sigmoid(), &target, &lcfg)?.total)
        })?;
    }

    Ok(out)
}
