//! Boundary-aware evaluation of binary change masks.
//!
//! Pixel precision/recall/F1/IoU from exact confusion counts, boundary F1
//! within a Euclidean tolerance band, mean IoU restricted to a trimap band
//! around the reference boundary, and the symmetric Hausdorff distance
//! between boundary sets. Distances use an exact squared Euclidean
//! distance transform (lower envelope of parabolas, row pass then column
//! pass); all squared distances are integers, so results match a
//! brute-force all-pairs scan bit for bit.
//!
//! Conventions, chosen where the formulas go 0/0 and flagged via
//! `degenerate`: an empty-vs-empty comparison scores 1 everywhere; a ratio
//! with zero denominator (e.g. precision with no predicted positives)
//! scores 0; the Hausdorff distance is 0 when both boundary sets are empty
//! and infinity when exactly one is; a vacuous trimap class (absent from
//! both masks inside the band) scores 1.

use crate::error::{Error, Result};

/// Dense binary mask in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    pub h: usize,
    pub w: usize,
    pub bits: Vec<bool>,
}

impl BitMask {
    pub fn new(h: usize, w: usize, bits: Vec<bool>) -> Result<BitMask> {
        if bits.len() != h * w {
            return Err(Error::Invalid {
                op: "bitmask",
                msg: format!("{} bits for {h}x{w}", bits.len()),
            });
        }
        Ok(BitMask { h, w, bits })
    }

    pub fn zeros(h: usize, w: usize) -> BitMask {
        BitMask { h, w, bits: vec![false; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Mask pixels with a 4-neighbor outside the mask or off the image.
    pub fn boundary(&self) -> BitMask {
        let (h, w) = (self.h, self.w);
        let mut out = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                if !self.get(y, x) {
                    continue;
                }
                let edge = y == 0
                    || x == 0
                    || y == h - 1
                    || x == w - 1
                    || !self.get(y - 1, x)
                    || !self.get(y + 1, x)
                    || !self.get(y, x - 1)
                    || !self.get(y, x + 1);
                out[y * w + x] = edge;
            }
        }
        BitMask { h, w, bits: out }
    }
}

fn check_pair(op: &'static str, a: &BitMask, b: &BitMask) -> Result<()> {
    if a.h != b.h || a.w != b.w {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.h, a.w],
            rhs: vec![b.h, b.w],
        });
    }
    Ok(())
}

/// Pixel counts; `fneg` is the false-negative count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fneg: usize,
    pub tn: usize,
}

pub fn confusion(pred: &BitMask, gt: &BitMask) -> Result<ConfusionCounts> {
    check_pair("confusion", pred, gt)?;
    let mut c = ConfusionCounts { tp: 0, fp: 0, fneg: 0, tn: 0 };
    for (&p, &g) in pred.bits.iter().zip(&gt.bits) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fneg += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: bool,
}

pub fn pixel_metrics(c: &ConfusionCounts) -> PixelMetrics {
    if c.tp + c.fp + c.fneg == 0 {
        // nothing predicted, nothing to find: perfect by convention
        return PixelMetrics { precision: 1.0, recall: 1.0, f1: 1.0, iou: 1.0, degenerate: true };
    }
    let mut degenerate = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            degenerate = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fneg);
    let iou = c.tp as f64 / (c.tp + c.fp + c.fneg) as f64;
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    PixelMetrics { precision, recall, f1, iou, degenerate }
}

/// Treated as unreachable in the distance transform; large enough to lose
/// every envelope contest against a genuine parabola, small enough to keep
/// the arithmetic finite.
const FAR: f64 = 1e20;
const FAR_CUT: f64 = 1e19;

/// 1-D squared distance transform (lower envelope of parabolas).
fn dt_1d(f: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64;
            if s > z[k] {
                break;
            }
            k -= 1;
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        out[q] = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest set pixel of
/// `src` (`FAR`-scale values where no set pixel exists).
pub fn edt_sq(src: &BitMask) -> Vec<f64> {
    let (h, w) = (src.h, src.w);
    let mut grid = vec![0.0f64; h * w];
    for (i, &b) in src.bits.iter().enumerate() {
        grid[i] = if b { 0.0 } else { FAR };
    }
    let mut tmp = vec![0.0f64; w.max(h)];
    // rows
    for y in 0..h {
        dt_1d(&grid[y * w..(y + 1) * w].to_vec(), &mut tmp[..w]);
        grid[y * w..(y + 1) * w].copy_from_slice(&tmp[..w]);
    }
    // columns
    let mut col = vec![0.0f64; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[y * w + x];
        }
        dt_1d(&col, &mut tmp[..h]);
        for y in 0..h {
            grid[y * w + x] = tmp[y];
        }
    }
    grid
}

/// Boundary F1 at tolerance `tau`: a boundary pixel counts as matched when
/// some pixel of the other mask's boundary lies within Euclidean distance
/// `tau`.
pub fn boundary_f1(pred: &BitMask, gt: &BitMask, tau: f64) -> Result<f64> {
    check_pair("boundary_f1", pred, gt)?;
    if tau < 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("tau must be finite and >= 0, got {tau}")));
    }
    let pb = pred.boundary();
    let gb = gt.boundary();
    let np = pb.count_ones();
    let ng = gb.count_ones();
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    if np == 0 || ng == 0 {
        return Ok(0.0);
    }
    let t2 = tau * tau;
    let to_g = edt_sq(&gb);
    let to_p = edt_sq(&pb);
    let hits = |set: &BitMask, dist: &[f64]| {
        set.bits.iter().zip(dist).filter(|(&b, &d)| b && d <= t2).count()
    };
    let prec = hits(&pb, &to_g) as f64 / np as f64;
    let rec = hits(&gb, &to_p) as f64 / ng as f64;
    if prec + rec == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * prec * rec / (prec + rec))
}

/// Mean of change-class and background-class IoU over the pixels within
/// Euclidean distance `width` of the reference boundary. Returns the value
/// and a degeneracy flag (empty band, or a class absent from both masks
/// inside the band — the absent class scores 1).
pub fn trimap_miou(pred: &BitMask, gt: &BitMask, width: f64) -> Result<(f64, bool)> {
    check_pair("trimap_miou", pred, gt)?;
    if width < 1.0 || !width.is_finite() {
        return Err(Error::Config(format!("trimap width must be >= 1, got {width}")));
    }
    let gb = gt.boundary();
    if gb.count_ones() == 0 {
        let same = pred.bits == gt.bits;
        return Ok((if same { 1.0 } else { 0.0 }, true));
    }
    let w2 = width * width;
    let dist = edt_sq(&gb);
    let mut c = ConfusionCounts { tp: 0, fp: 0, fneg: 0, tn: 0 };
    for i in 0..pred.bits.len() {
        if dist[i] > w2 {
            continue;
        }
        match (pred.bits[i], gt.bits[i]) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fneg += 1,
            (false, false) => c.tn += 1,
        }
    }
    let mut degenerate = false;
    let mut class_iou = |inter: usize, union: usize| {
        if union == 0 {
            degenerate = true;
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    let change = class_iou(c.tp, c.tp + c.fp + c.fneg);
    let background = class_iou(c.tn, c.tn + c.fp + c.fneg);
    Ok(((change + background) / 2.0, degenerate))
}

/// Symmetric Hausdorff distance between the two boundary pixel sets; 0
/// when both are empty, infinity when exactly one is.
pub fn hausdorff(pred: &BitMask, gt: &BitMask) -> Result<f64> {
    check_pair("hausdorff", pred, gt)?;
    let pb = pred.boundary();
    let gb = gt.boundary();
    let np = pb.count_ones();
    let ng = gb.count_ones();
    if np == 0 && ng == 0 {
        return Ok(0.0);
    }
    if np == 0 || ng == 0 {
        return Ok(f64::INFINITY);
    }
    let to_g = edt_sq(&gb);
    let to_p = edt_sq(&pb);
    let directed = |set: &BitMask, dist: &[f64]| {
        set.bits
            .iter()
            .zip(dist)
            .filter(|(&b, _)| b)
            .map(|(_, &d)| d)
            .fold(0.0f64, f64::max)
    };
    let worst = directed(&pb, &to_g).max(directed(&gb, &to_p));
    if worst >= FAR_CUT {
        return Ok(f64::INFINITY);
    }
    Ok(worst.sqrt())
}

/// One pair's full evaluation.
#[derive(Debug, Clone, Copy)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub bf1: f64,
    pub trimap_miou: f64,
    pub hausdorff: f64,
    pub tau: f64,
    pub trimap_width: f64,
    pub degenerate: bool,
}

pub fn evaluate(pred: &BitMask, gt: &BitMask, tau: f64, trimap_width: f64) -> Result<MetricReport> {
    let px = pixel_metrics(&confusion(pred, gt)?);
    let bf1 = boundary_f1(pred, gt, tau)?;
    let (tm, tm_degen) = trimap_miou(pred, gt, trimap_width)?;
    let hd = hausdorff(pred, gt)?;
    Ok(MetricReport {
        precision: px.precision,
        recall: px.recall,
        f1: px.f1,
        iou: px.iou,
        bf1,
        trimap_miou: tm,
        hausdorff: hd,
        tau,
        trimap_width,
        degenerate: px.degenerate || tm_degen,
    })
}
