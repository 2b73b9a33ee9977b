//! End-to-end assembly: paired samples, the full two-stream model,
//! optimizers, synthetic data, image I/O, checkpoints, and the training
//! loop.

pub mod checkpoint;
pub mod data;
pub mod model;
pub mod optim;
pub mod suite;
pub mod synth;
pub mod train;

use crate::metrics::BitMask;
use crate::tensor::{sc, Scalar, Tensor};

/// One co-registered bi-temporal pair with its change mask. Images are
/// `[C,H,W]` with values in `[0,1]`.
#[derive(Clone)]
pub struct SamplePair<T: Scalar> {
    pub id: String,
    pub t1: Tensor<T>,
    pub t2: Tensor<T>,
    pub mask: BitMask,
}

impl<T: Scalar> SamplePair<T> {
    /// The mask as a `[H,W]` 0/1 tensor for the losses.
    pub fn mask_tensor(&self) -> Tensor<T> {
        let data = self.mask.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        Tensor::from_vec(data, &[self.mask.h, self.mask.w]).expect("mask dims")
    }
}

/// Joint horizontal flip of images and mask.
pub fn hflip<T: Scalar>(pair: &SamplePair<T>) -> SamplePair<T> {
    let flip_img = |t: &Tensor<T>| {
        let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let d = t.data();
        let mut out = vec![T::zero(); d.len()];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ci * h * w + y * w + x] = d[ci * h * w + y * w + (w - 1 - x)];
                }
            }
        }
        Tensor::from_vec(out, t.shape()).expect("same shape")
    };
    let (h, w) = (pair.mask.h, pair.mask.w);
    let mut bits = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            bits[y * w + x] = pair.mask.bits[y * w + (w - 1 - x)];
        }
    }
    SamplePair {
        id: pair.id.clone(),
        t1: flip_img(&pair.t1),
        t2: flip_img(&pair.t2),
        mask: BitMask { h, w, bits },
    }
}

/// Joint quarter-turn (clockwise) of images and mask; square inputs only.
pub fn rot90<T: Scalar>(pair: &SamplePair<T>) -> SamplePair<T> {
    let n = pair.mask.h;
    assert_eq!(n, pair.mask.w, "rotation needs square images");
    let rot_img = |t: &Tensor<T>| {
        let c = t.shape()[0];
        let d = t.data();
        let mut out = vec![T::zero(); d.len()];
        for ci in 0..c {
            for y in 0..n {
                for x in 0..n {
                    out[ci * n * n + y * n + x] = d[ci * n * n + (n - 1 - x) * n + y];
                }
            }
        }
        Tensor::from_vec(out, t.shape()).expect("same shape")
    };
    let mut bits = vec![false; n * n];
    for y in 0..n {
        for x in 0..n {
            bits[y * n + x] = pair.mask.bits[(n - 1 - x) * n + y];
        }
    }
    SamplePair {
        id: pair.id.clone(),
        t1: rot_img(&pair.t1),
        t2: rot_img(&pair.t2),
        mask: BitMask { h: n, w: n, bits },
    }
}

/// Maps `[0,1]` image values to the model's `[-1,1]` input range.
pub fn normalize<T: Scalar>(img: &Tensor<T>) -> Tensor<T> {
    img.affine(2.0, -1.0)
}

/// Probabilities (already in `[0,1]`) to a binary mask, strict threshold.
pub fn probs_to_mask<T: Scalar>(probs: &Tensor<T>) -> BitMask {
    let half = sc::<T>(0.5);
    BitMask {
        h: probs.shape()[0],
        w: probs.shape()[1],
        bits: probs.data().iter().map(|&p| p > half).collect(),
    }
}
