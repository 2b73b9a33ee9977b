//! Synthetic bi-temporal pair generator.
//!
//! Each pair shares a smooth textured background. Objects (rectangles and
//! discs of contrasting flat color) are either *inserted* (drawn only in the
//! second frame) or *deleted* (drawn only in the first); the change mask is
//! the union of all object footprints. The second frame additionally gets a
//! global photometric jitter (`a*v + b`, clamped) which is *not* part of the
//! mask, so a learner must separate appearance change from structural change.
//!
//! All randomness flows from one seeded stream in a fixed draw order
//! (background, then per-object kind/geometry/color/polarity, then jitter),
//! so a `(seed, size, n_objects)` triple pins the pair bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::BitMask;
use crate::tensor::{sc, Scalar, Tensor};

/// Axis-aligned object footprint; bounds are inclusive.
#[derive(Debug, Clone, PartialEq)]
pub enum Shape {
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
    Disc { cy: usize, cx: usize, r: usize },
}

impl Shape {
    /// Pixel-containment test; discs use the integer lattice rule
    /// `(y-cy)^2 + (x-cx)^2 <= r^2`.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
            Shape::Disc { cy, cx, r } => {
                let dy = y as i64 - cy as i64;
                let dx = x as i64 - cx as i64;
                dy * dy + dx * dx <= (r * r) as i64
            }
        }
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, inclusive.
    pub fn bbox(&self) -> (usize, usize, usize, usize) {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => (y0, x0, y1, x1),
            Shape::Disc { cy, cx, r } => (cy - r, cx - r, cy + r, cx + r),
        }
    }
}

/// The union footprint of `shapes`, rasterized over a `size x size` grid.
pub fn rasterize(shapes: &[Shape], size: usize) -> BitMask {
    let mut m = BitMask::zeros(size, size);
    for s in shapes {
        let (y0, x0, y1, x1) = s.bbox();
        for y in y0..=y1.min(size - 1) {
            for x in x0..=x1.min(size - 1) {
                if s.contains(y, x) {
                    m.bits[y * size + x] = true;
                }
            }
        }
    }
    m
}

fn validate_size(size: usize) -> Result<()> {
    if size < 32 || size % 32 != 0 {
        return Err(Error::Config(format!(
            "synthetic pair size {size} must be a positive multiple of 32"
        )));
    }
    Ok(())
}

/// Smooth background: low-resolution RGB noise upsampled to full size.
fn background<T: Scalar>(size: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let coarse = size / 8;
    let data: Vec<T> = (0..3 * coarse * coarse).map(|_| sc::<T>(rng.gen_range(0.25..0.75))).collect();
    let low = Tensor::from_vec(data, &[3, coarse, coarse]).expect("coarse grid");
    low.bilinear_resize(size, size).expect("upsample")
}

fn paint<T: Scalar>(frame: &mut [T], size: usize, shape: &Shape, color: [T; 3]) {
    let (y0, x0, y1, x1) = shape.bbox();
    for y in y0..=y1.min(size - 1) {
        for x in x0..=x1.min(size - 1) {
            if shape.contains(y, x) {
                for (c, &v) in color.iter().enumerate() {
                    frame[c * size * size + y * size + x] = v;
                }
            }
        }
    }
}

/// Generates one pair plus the object list that produced it, for tests that
/// want to re-derive the mask independently.
pub fn synth_pair_with_shapes<T: Scalar>(
    seed: u64,
    size: usize,
    n_objects: usize,
) -> Result<(SamplePair<T>, Vec<Shape>)> {
    validate_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = background::<T>(size, &mut rng);
    let mut f1: Vec<T> = bg.data().to_vec();
    let mut f2 = f1.clone();

    let lo = size / 16; // half-extent bounds keep objects inside the frame
    let hi = size / 8;
    let mut shapes = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let disc = rng.gen::<bool>();
        let shape = if disc {
            let r = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(r..size - r);
            let cx = rng.gen_range(r..size - r);
            Shape::Disc { cy, cx, r }
        } else {
            let hy = rng.gen_range(lo..=hi);
            let hx = rng.gen_range(lo..=hi);
            let cy = rng.gen_range(hy..size - hy);
            let cx = rng.gen_range(hx..size - hx);
            Shape::Rect { y0: cy - hy, x0: cx - hx, y1: cy + hy - 1, x1: cx + hx - 1 }
        };
        // Flat fill with strong contrast against the mid-range background.
        let bright = rng.gen::<bool>();
        let mut color = [T::zero(); 3];
        for ch in color.iter_mut() {
            let v = if bright { rng.gen_range(0.85..1.0) } else { rng.gen_range(0.0..0.15) };
            *ch = sc::<T>(v);
        }
        let inserted = rng.gen::<bool>();
        if inserted {
            paint(&mut f2, size, &shape, color);
        } else {
            paint(&mut f1, size, &shape, color);
        }
        shapes.push(shape);
    }

    // Photometric jitter on frame two only; the mask ignores it.
    let a = sc::<T>(rng.gen_range(0.9..1.1));
    let b = sc::<T>(rng.gen_range(-0.05..0.05));
    for v in f2.iter_mut() {
        let j = *v * a + b;
        *v = if j < T::zero() {
            T::zero()
        } else if j > T::one() {
            T::one()
        } else {
            j
        };
    }

    let mask = rasterize(&shapes, size);
    let pair = SamplePair {
        id: format!("synth{seed:04}"),
        t1: Tensor::from_vec(f1, &[3, size, size])?,
        t2: Tensor::from_vec(f2, &[3, size, size])?,
        mask,
    };
    Ok((pair, shapes))
}

/// Generates one deterministic synthetic pair.
pub fn synth_pair<T: Scalar>(seed: u64, size: usize, n_objects: usize) -> Result<SamplePair<T>> {
    Ok(synth_pair_with_shapes(seed, size, n_objects)?.0)
}
