//! Two-stream fusion of per-epoch feature maps.
//!
//! The main fuser gates each stream with channel and spatial attention
//! computed from the *other* stream: a channel gate from pooled statistics
//! through two shared square projections, then a spatial gate from the
//! channel-pooled, 3x3-convolved (reflect padded) partner map. Gated
//! streams combine by sum, absolute difference, or a 1x1 convolution on
//! their concatenation. Plain difference/concatenation fusers are kept as
//! baselines.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{PadMode, Scalar, Tensor};

/// How the two gated streams are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TsVariant {
    Sum,
    Diff,
    Conv,
}

/// Fusion selection, including non-gated baselines. `EarlyFusion` is
/// resolved before the pyramid stage (the streams are concatenated at the
/// image level), so no per-level fuser exists for it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    TsSum,
    TsDiff,
    TsConv,
    SiamDiff,
    SiamConc,
    EarlyFusion,
}

/// Cross-attention gate parameters shared by both streams: two square
/// channel projections and one 3x3 conv (2 pooled channels -> 1 gate).
#[derive(Clone)]
pub struct CbamParams<T: Scalar> {
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
    pub sconv_w: Tensor<T>,
    pub sconv_b: Tensor<T>,
}

impl<T: Scalar> CbamParams<T> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> CbamParams<T> {
        CbamParams {
            w1: Tensor::randn(&[dim, dim], 0.02, rng).requiring_grad(),
            w2: Tensor::randn(&[dim, dim], 0.02, rng).requiring_grad(),
            sconv_w: Tensor::randn(&[1, 2, 3, 3], (1.0f64 / 18.0).sqrt(), rng).requiring_grad(),
            sconv_b: Tensor::zeros(&[1, 1, 1]).requiring_grad(),
        }
    }

    /// Per-channel gate in (0,1) from spatial average and max pooling:
    /// `sigmoid(avg.W1 + max.W2)`, shape `[C]`.
    pub fn channel_gate(&self, source: &Tensor<T>) -> Result<Tensor<T>> {
        let c = self.w1.shape()[0];
        if source.rank() != 3 || source.shape()[0] != c {
            return Err(Error::ShapeMismatch {
                op: "channel_gate",
                lhs: source.shape().to_vec(),
                rhs: self.w1.shape().to_vec(),
            });
        }
        let avg = source.pool_spatial_avg()?.reshape(&[1, c])?;
        let max = source.pool_spatial_max()?.reshape(&[1, c])?;
        let pre = avg.matmul(&self.w1)?.add(&max.matmul(&self.w2)?)?;
        pre.sigmoid().reshape(&[c])
    }

    /// Per-pixel gate in (0,1): channel-avg and channel-max maps stacked,
    /// 3x3 conv with reflect padding, sigmoid. Shape `[1,h,w]`.
    pub fn spatial_gate(&self, source: &Tensor<T>) -> Result<Tensor<T>> {
        let pooled = Tensor::concat(&[source.pool_channel_avg()?, source.pool_channel_max()?], 0)?;
        let pre = pooled.conv2d(&self.sconv_w, 1, 1, PadMode::Reflect)?.add(&self.sconv_b)?;
        Ok(pre.sigmoid())
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor<T>)) {
        f("w1", &mut self.w1);
        f("w2", &mut self.w2);
        f("sconv_w", &mut self.sconv_w);
        f("sconv_b", &mut self.sconv_b);
    }
}

/// 1x1 conv merging a concatenated pair `[2C,h,w] -> [C,h,w]`.
#[derive(Clone)]
pub struct ConvMerge<T: Scalar> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> ConvMerge<T> {
    pub fn init(dim: usize, rng: &mut impl Rng) -> ConvMerge<T> {
        ConvMerge {
            w: Tensor::randn(&[dim, 2 * dim, 1, 1], (1.0 / (2 * dim) as f64).sqrt(), rng)
                .requiring_grad(),
            b: Tensor::zeros(&[dim, 1, 1]).requiring_grad(),
        }
    }

    pub fn apply(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let cat = Tensor::concat(&[a.clone(), b.clone()], 0)?;
        cat.conv2d(&self.w, 1, 0, PadMode::Zero)?.add(&self.b)
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&'static str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Cross-gates both streams then combines them.
///
/// Stream 1's channel gate comes from stream 2 and vice versa; the spatial
/// gate for each stream comes from the *other* stream's channel-gated map.
pub fn fuse<T: Scalar>(
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    params: &CbamParams<T>,
    variant: TsVariant,
    merge: Option<&ConvMerge<T>>,
) -> Result<Tensor<T>> {
    if f1.shape() != f2.shape() {
        return Err(Error::ShapeMismatch {
            op: "fuse",
            lhs: f1.shape().to_vec(),
            rhs: f2.shape().to_vec(),
        });
    }
    let c = f1.shape()[0];
    let g1 = params.channel_gate(f2)?.reshape(&[c, 1, 1])?;
    let g2 = params.channel_gate(f1)?.reshape(&[c, 1, 1])?;
    let f1_cam = g1.mul(f1)?;
    let f2_cam = g2.mul(f2)?;
    let f1_sam = params.spatial_gate(&f2_cam)?.mul(&f1_cam)?;
    let f2_sam = params.spatial_gate(&f1_cam)?.mul(&f2_cam)?;
    match variant {
        TsVariant::Sum => f1_sam.add(&f2_sam),
        TsVariant::Diff => Ok(f1_sam.sub(&f2_sam)?.abs()),
        TsVariant::Conv => match merge {
            Some(m) => m.apply(&f1_sam, &f2_sam),
            None => Err(Error::Invalid { op: "fuse", msg: "Conv variant needs merge weights".into() }),
        },
    }
}

/// One pyramid level's fuser.
#[derive(Clone)]
pub enum FusionLevel<T: Scalar> {
    TsCbam { cbam: CbamParams<T>, variant: TsVariant, merge: Option<ConvMerge<T>> },
    SiamDiff,
    SiamConc { merge: ConvMerge<T> },
}

impl<T: Scalar> FusionLevel<T> {
    pub fn init(kind: FusionKind, dim: usize, rng: &mut impl Rng) -> Result<FusionLevel<T>> {
        Ok(match kind {
            FusionKind::TsSum => {
                FusionLevel::TsCbam { cbam: CbamParams::init(dim, rng), variant: TsVariant::Sum, merge: None }
            }
            FusionKind::TsDiff => {
                FusionLevel::TsCbam { cbam: CbamParams::init(dim, rng), variant: TsVariant::Diff, merge: None }
            }
            FusionKind::TsConv => FusionLevel::TsCbam {
                cbam: CbamParams::init(dim, rng),
                variant: TsVariant::Conv,
                merge: Some(ConvMerge::init(dim, rng)),
            },
            FusionKind::SiamDiff => FusionLevel::SiamDiff,
            FusionKind::SiamConc => FusionLevel::SiamConc { merge: ConvMerge::init(dim, rng) },
            FusionKind::EarlyFusion => {
                return Err(Error::Config("early fusion has no per-level fuser".into()))
            }
        })
    }

    pub fn apply(&self, f1: &Tensor<T>, f2: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            FusionLevel::TsCbam { cbam, variant, merge } => {
                fuse(f1, f2, cbam, *variant, merge.as_ref())
            }
            FusionLevel::SiamDiff => Ok(f1.sub(f2)?.abs()),
            FusionLevel::SiamConc { merge } => merge.apply(f1, f2),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            FusionLevel::TsCbam { cbam, merge, .. } => {
                cbam.visit_mut(&mut |n, t| f(format!("cbam.{n}"), t));
                if let Some(m) = merge {
                    m.visit_mut(&mut |n, t| f(format!("merge.{n}"), t));
                }
            }
            FusionLevel::SiamDiff => {}
            FusionLevel::SiamConc { merge } => {
                merge.visit_mut(&mut |n, t| f(format!("merge.{n}"), t));
            }
        }
    }
}
