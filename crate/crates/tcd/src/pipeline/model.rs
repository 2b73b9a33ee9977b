//! The full two-stream change detector: shared encoder, optional
//! hierarchical adapter, per-level fusion, and the decoder.
//!
//! `forward` takes raw `[C,H,W]` frames in `[0,1]`, normalizes them to
//! `[-1,1]`, runs both streams through the *same* encoder/adapter weights,
//! fuses the two pyramids level by level, and decodes to full-resolution
//! logits. With `fusion = early_fusion` the frames are concatenated on the
//! channel axis instead and a single stream runs on the six-channel input.
//!
//! Every stage boundary is scanned for non-finite values; a failure names
//! the first offending stage so numeric blowups are attributable.

use std::collections::HashMap;

use rand::Rng;

use super::normalize;
use crate::adapter::{build_pyramid, Adapter, FeaturePyramid, ScaleLayout};
use crate::config::Config;
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionLevel};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub cfg: Config,
    pub encoder: Encoder<T>,
    pub adapter: Option<Adapter<T>>,
    /// One fuser per pyramid level; empty when fusing early.
    pub fusion: Vec<FusionLevel<T>>,
    pub decoder: Decoder<T>,
}

fn finite_or<T: Scalar>(t: &Tensor<T>, module: String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric { module, msg: "non-finite values".into() })
    }
}

impl<T: Scalar> Model<T> {
    pub fn init(cfg: &Config, rng: &mut impl Rng) -> Result<Model<T>> {
        cfg.validate()?;
        let ecfg = cfg.encoder_config();
        let early = cfg.fusion == FusionKind::EarlyFusion;
        let img_ch = if early { 2 * cfg.image_channels } else { cfg.image_channels };
        let max_tokens = (cfg.image_size / cfg.patch_size) * (cfg.image_size / cfg.patch_size);
        let encoder = Encoder::init(ecfg.clone(), img_ch, max_tokens, rng)?;
        let adapter = if cfg.adapter {
            Some(Adapter::init(cfg.patch_size, img_ch, cfg.embedding_dim, rng)?)
        } else {
            None
        };
        let fusion = if early {
            Vec::new()
        } else {
            (0..4)
                .map(|_| FusionLevel::init(cfg.fusion, cfg.embedding_dim, rng))
                .collect::<Result<Vec<_>>>()?
        };
        let decoder =
            Decoder::init(&ecfg, cfg.decoder_channels, cfg.convex_kernel, cfg.bilinear_upsample, rng)?;
        Ok(Model { cfg: cfg.clone(), encoder, adapter, fusion, decoder })
    }

    fn check_input(&self, which: &str, img: &Tensor<T>) -> Result<()> {
        let n = self.cfg.image_size;
        let want = [self.cfg.image_channels, n, n];
        if img.shape() != want {
            return Err(Error::Invalid {
                op: "forward",
                msg: format!("{which} must be {want:?}, got {:?}", img.shape()),
            });
        }
        finite_or(img, format!("input ({which})"))
    }

    /// One stream: encoder taps, then the adapted (or plain) pyramid.
    fn stream_pyramid(&self, image_norm: &Tensor<T>, tag: &str) -> Result<FeaturePyramid<T>> {
        let taps = self.encoder.encode(image_norm)?;
        for (i, t) in taps.iter().enumerate() {
            finite_or(t, format!("encoder tap {} ({tag})", i + 1))?;
        }
        let pyr = match &self.adapter {
            Some(a) => a.adapt(image_norm, &taps)?,
            None => {
                let (h, w) = (image_norm.shape()[1], image_norm.shape()[2]);
                let layout = ScaleLayout::for_image(h, w, self.cfg.patch_size)?;
                let zero_prior = Tensor::zeros(&[layout.total, self.cfg.embedding_dim]);
                build_pyramid(&taps, &zero_prior, &layout, self.cfg.patch_size, h, w)?
            }
        };
        for (j, l) in pyr.levels.iter().enumerate() {
            finite_or(l, format!("pyramid level {} ({tag})", j + 1))?;
        }
        Ok(pyr)
    }

    /// Raw frame pair -> full-resolution change logits `[H,W]`.
    pub fn forward(&self, t1: &Tensor<T>, t2: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input("first frame", t1)?;
        self.check_input("second frame", t2)?;
        let x1 = normalize(t1);
        let x2 = normalize(t2);
        let fused = if self.cfg.fusion == FusionKind::EarlyFusion {
            let joint = Tensor::concat(&[x1, x2], 0)?;
            self.stream_pyramid(&joint, "joint stream")?
        } else {
            let p1 = self.stream_pyramid(&x1, "stream 1")?;
            let p2 = self.stream_pyramid(&x2, "stream 2")?;
            let mut levels = Vec::with_capacity(4);
            for j in 0..4 {
                let l = self.fusion[j].apply(&p1.levels[j], &p2.levels[j])?;
                finite_or(&l, format!("fusion level {}", j + 1))?;
                levels.push(l);
            }
            let l4 = levels.pop().unwrap();
            let l3 = levels.pop().unwrap();
            let l2 = levels.pop().unwrap();
            let l1 = levels.pop().unwrap();
            FeaturePyramid { levels: [l1, l2, l3, l4] }
        };
        let logits = self.decoder.forward(&fused)?;
        finite_or(&logits, "decoder".into())?;
        Ok(logits)
    }

    /// Visits every learnable parameter with a stable, unique name.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.encoder.visit_mut(&mut |n, t| f(format!("encoder.{n}"), t));
        if let Some(a) = &mut self.adapter {
            a.visit_mut(&mut |n, t| f(format!("adapter.{n}"), t));
        }
        for (j, fl) in self.fusion.iter_mut().enumerate() {
            fl.visit_mut(&mut |n, t| f(format!("fusion{}.{n}", j + 1), t));
        }
        self.decoder.visit_mut(&mut |n, t| f(format!("decoder.{n}"), t));
    }

    /// Snapshot of all parameters in visit order.
    pub fn state(&mut self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_mut(&mut |n, t| out.push((n, t.detach())));
        out
    }

    /// Replaces every parameter from `map`. Names must cover the model
    /// exactly; shapes must match.
    pub fn load_state(&mut self, map: &HashMap<String, Tensor<T>>) -> Result<()> {
        let mut missing = Vec::new();
        let mut used = 0usize;
        let mut shape_err = None;
        self.visit_mut(&mut |n, t| match map.get(&n) {
            Some(v) => {
                if v.shape() != t.shape() && shape_err.is_none() {
                    shape_err = Some(format!(
                        "parameter {n}: checkpoint shape {:?} vs model {:?}",
                        v.shape(),
                        t.shape()
                    ));
                }
                *t = v.detach().requiring_grad();
                used += 1;
            }
            None => missing.push(n),
        });
        if let Some(msg) = shape_err {
            return Err(Error::Config(msg));
        }
        if !missing.is_empty() {
            return Err(Error::Config(format!(
                "checkpoint is missing {} parameters (first: {})",
                missing.len(),
                missing[0]
            )));
        }
        if used != map.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} extra parameters for this model",
                map.len() - used
            )));
        }
        Ok(())
    }

    /// Total scalar parameter count.
    pub fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_mut(&mut |_, t| n += t.len());
        n
    }
}
