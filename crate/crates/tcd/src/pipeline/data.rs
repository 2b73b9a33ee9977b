//! Binary PPM/PGM image I/O and the on-disk pair layout.
//!
//! A dataset directory holds one triple per sample stem:
//! `<stem>_a.ppm` (first frame), `<stem>_b.ppm` (second frame), and
//! `<stem>_m.pgm` (binary change mask, 255 = changed). Images are 8-bit
//! binary ("P6"/"P5", maxval 255). Stems are processed in sorted order so
//! directory iteration order never leaks into results.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::SamplePair;
use crate::error::{Error, Result};
use crate::metrics::BitMask;
use crate::tensor::{sc, Scalar, Tensor};

fn io_err(path: &Path, what: &str, err: std::io::Error) -> Error {
    Error::Io(format!("{} {}: {err}", what, path.display()))
}

fn format_err(path: &Path, msg: &str) -> Error {
    Error::Io(format!("{}: {msg}", path.display()))
}

/// Parses a binary netpbm header, returning `(width, height, payload)`.
/// Comments (`#` to end of line) are allowed between header tokens.
fn parse_netpbm<'a>(path: &Path, bytes: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    if bytes.len() < 2 || &bytes[..2] != magic.as_bytes() {
        return Err(format_err(path, &format!("expected {magic} header")));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and comments.
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(path, "truncated header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| format_err(path, "header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(path, &format!("unsupported maxval {maxval}, expected 255")));
    }
    if w == 0 || h == 0 {
        return Err(format_err(path, "zero image dimension"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(format_err(path, "missing separator before payload"));
    }
    pos += 1; // exactly one whitespace byte separates header and payload
    Ok((w, h, &bytes[pos..]))
}

/// Reads a binary RGB image to a `[3,H,W]` tensor scaled to `[0,1]`.
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, "read", e))?;
    let (w, h, payload) = parse_netpbm(path, &bytes, "P6")?;
    if payload.len() < 3 * w * h {
        return Err(format_err(path, "payload shorter than 3*w*h"));
    }
    let mut data = vec![T::zero(); 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v = payload[(y * w + x) * 3 + c] as f64 / 255.0;
                data[c * h * w + y * w + x] = sc::<T>(v);
            }
        }
    }
    Tensor::from_vec(data, &[3, h, w])
}

/// Writes a `[3,H,W]` tensor (values clamped to `[0,1]`) as binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, img: &Tensor<T>) -> Result<()> {
    if img.rank() != 3 || img.shape()[0] != 3 {
        return Err(Error::Invalid {
            op: "write_ppm",
            msg: format!("wants [3,h,w], got {:?}", img.shape()),
        });
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    let mut out = Vec::with_capacity(32 + 3 * h * w);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let v: f64 = num_traits::ToPrimitive::to_f64(&d[c * h * w + y * w + x]).unwrap_or(0.0);
                out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out).map_err(|e| io_err(path, "write", e))
}

/// Reads a binary grayscale image as a mask: pixels above 127 are `true`.
pub fn read_pgm_mask(path: &Path) -> Result<BitMask> {
    let bytes = fs::read(path).map_err(|e| io_err(path, "read", e))?;
    let (w, h, payload) = parse_netpbm(path, &bytes, "P5")?;
    if payload.len() < w * h {
        return Err(format_err(path, "payload shorter than w*h"));
    }
    Ok(BitMask { h, w, bits: payload[..w * h].iter().map(|&b| b > 127).collect() })
}

/// Writes a mask as binary PGM (255 = set).
pub fn write_pgm_mask(path: &Path, mask: &BitMask) -> Result<()> {
    let mut out = Vec::with_capacity(32 + mask.bits.len());
    write!(out, "P5\n{} {}\n255\n", mask.w, mask.h).expect("vec write");
    out.extend(mask.bits.iter().map(|&b| if b { 255u8 } else { 0 }));
    fs::write(path, out).map_err(|e| io_err(path, "write", e))
}

/// Writes the full triple for one pair into `dir`.
pub fn save_pair<T: Scalar>(dir: &Path, pair: &SamplePair<T>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, "create", e))?;
    write_ppm(&dir.join(format!("{}_a.ppm", pair.id)), &pair.t1)?;
    write_ppm(&dir.join(format!("{}_b.ppm", pair.id)), &pair.t2)?;
    write_pgm_mask(&dir.join(format!("{}_m.pgm", pair.id)), &pair.mask)
}

/// Stems in `dir` that have a file named `<stem><suffix>`, sorted.
pub fn list_stems(dir: &Path, suffix: &str) -> Result<Vec<String>> {
    let mut stems = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, "read dir", e))?;
    for entry in entries {
        let entry = entry.map_err(|e| io_err(dir, "read dir", e))?;
        if let Some(name) = entry.file_name().to_str() {
            if let Some(stem) = name.strip_suffix(suffix) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    Ok(stems)
}

/// Loads every complete `_a.ppm`/`_b.ppm`/`_m.pgm` triple in `dir`, in
/// sorted stem order. Errors if the directory holds none.
pub fn load_dir<T: Scalar>(dir: &Path) -> Result<Vec<SamplePair<T>>> {
    let mut pairs = Vec::new();
    for stem in list_stems(dir, "_a.ppm")? {
        let b = dir.join(format!("{stem}_b.ppm"));
        let m = dir.join(format!("{stem}_m.pgm"));
        if !b.exists() || !m.exists() {
            continue;
        }
        let t1 = read_ppm(&dir.join(format!("{stem}_a.ppm")))?;
        let t2 = read_ppm(&b)?;
        let mask = read_pgm_mask(&m)?;
        if t1.shape() != t2.shape() || t1.shape()[1] != mask.h || t1.shape()[2] != mask.w {
            return Err(Error::Io(format!(
                "pair {stem}: frames {:?} vs {:?}, mask {}x{}",
                t1.shape(),
                t2.shape(),
                mask.h,
                mask.w
            )));
        }
        pairs.push(SamplePair { id: stem, t1, t2, mask });
    }
    if pairs.is_empty() {
        return Err(Error::Io(format!("no image pairs found in {}", dir.display())));
    }
    Ok(pairs)
}

/// Same as [`load_dir`] but without requiring masks: for inference inputs.
/// Missing masks become all-zero placeholders.
pub fn load_dir_unlabeled<T: Scalar>(dir: &Path) -> Result<Vec<SamplePair<T>>> {
    let mut pairs = Vec::new();
    for stem in list_stems(dir, "_a.ppm")? {
        let b = dir.join(format!("{stem}_b.ppm"));
        if !b.exists() {
            continue;
        }
        let t1 = read_ppm(&dir.join(format!("{stem}_a.ppm")))?;
        let t2 = read_ppm(&b)?;
        if t1.shape() != t2.shape() {
            return Err(Error::Io(format!(
                "pair {stem}: frames {:?} vs {:?}",
                t1.shape(),
                t2.shape()
            )));
        }
        let m = dir.join(format!("{stem}_m.pgm"));
        let mask = if m.exists() {
            read_pgm_mask(&m)?
        } else {
            BitMask::zeros(t1.shape()[1], t1.shape()[2])
        };
        pairs.push(SamplePair { id: stem, t1, t2, mask });
    }
    if pairs.is_empty() {
        return Err(Error::Io(format!("no image pairs found in {}", dir.display())));
    }
    Ok(pairs)
}
