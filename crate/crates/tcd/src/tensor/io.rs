//! Tensor container format.
//!
//! Layout: magic `TCDT`, `u32` rank (little endian), one `u32` extent per
//! axis, then row-major values as little-endian `f64`. Values are stored as
//! `f64` regardless of the in-memory scalar type, so files written from an
//! `f64` model reload bitwise.

use std::io::{Read, Write};

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"TCDT";
/// Sanity bound against corrupt headers; real shapes are rank <= 4.
const MAX_RANK: u32 = 8;

/// Serializes a tensor into the `TCDT` container.
pub fn write_tensor<T: Scalar>(w: &mut dyn Write, t: &Tensor<T>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        if d > u32::MAX as usize {
            return Err(Error::Invalid { op: "write_tensor", msg: format!("extent {d} exceeds u32") });
        }
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.into_f64().to_le_bytes())?;
    }
    Ok(())
}

/// Deserializes a `TCDT` container written by [`write_tensor`].
pub fn read_tensor<T: Scalar>(r: &mut dyn Read) -> Result<Tensor<T>> {
    let bad = |msg: String| Error::Invalid { op: "read_tensor", msg };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let rank = u32::from_le_bytes(u);
    if rank > MAX_RANK {
        return Err(bad(format!("rank {rank} exceeds limit {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut n: usize = 1;
    for _ in 0..rank {
        r.read_exact(&mut u)?;
        let d = u32::from_le_bytes(u) as usize;
        n = n
            .checked_mul(d)
            .ok_or_else(|| bad("element count overflows usize".into()))?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(n);
    let mut b = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut b)?;
        data.push(T::from_f64(f64::from_le_bytes(b)));
    }
    debug_assert_eq!(numel(&shape), data.len());
    Tensor::from_vec(data, &shape)
}

/// Deterministic human-readable rendering: a shape header followed by one
/// line per innermost row, nine significant digits.
pub fn ascii_dump<T: Scalar>(t: &Tensor<T>) -> String {
    use std::fmt::Write as _;
    let mut s = String::new();
    let shape = t.shape();
    let dims: Vec<String> = shape.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "tcdt shape=[{}]", dims.join(" "));
    let row = shape.last().copied().unwrap_or(1).max(1);
    for (i, v) in t.data().iter().enumerate() {
        if i % row != 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.9e}", v.into_f64());
        if (i + 1) % row == 0 {
            s.push('\n');
        }
    }
    if t.len() % row != 0 {
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_bytes_2x2() {
        let t = Tensor::from_vec(vec![1.5f64, -2.0, 0.0, 3.25], &[2, 2]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let mut expect = Vec::new();
        expect.extend_from_slice(b"TCDT");
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        expect.extend_from_slice(&2u32.to_le_bytes());
        for v in [1.5f64, -2.0, 0.0, 3.25] {
            expect.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(buf, expect);
    }

    #[test]
    fn rank_zero_roundtrip() {
        let t = Tensor::scalar(-7.125f64);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor::<f64>(&mut buf.as_slice()).unwrap();
        assert_eq!(back.rank(), 0);
        assert_eq!(back.item(), -7.125);
    }

    #[test]
    fn truncated_stream_errors() {
        let t = Tensor::from_vec(vec![1.0f64; 6], &[2, 3]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_tensor::<f64>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn bad_magic_errors() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(read_tensor::<f64>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn absurd_rank_rejected() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"TCDT");
        buf.extend_from_slice(&99u32.to_le_bytes());
        assert!(read_tensor::<f64>(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn ascii_dump_shape_header_and_rows() {
        let t = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let s = ascii_dump(&t);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "tcdt shape=[2 3]");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1.000000000e0"));
        assert_eq!(lines[1].split(' ').count(), 3);
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_bits(vals in proptest::collection::vec(-1e6f64..1e6, 1..48)) {
            let n = vals.len();
            let t = Tensor::from_vec(vals.clone(), &[n]).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back = read_tensor::<f64>(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back.shape(), &[n]);
            for (a, b) in back.data().iter().zip(&vals) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
