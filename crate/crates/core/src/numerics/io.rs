//! Binary tensor container: `"MQNT"`, version `u32`, rows `u64`, cols `u64`,
//! then `rows * cols` little-endian `f64` values in row-major order.

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MQNT";
pub const VERSION: u32 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rows() as u64).to_le_bytes())?;
    w.write_all(&(t.cols() as u64).to_le_bytes())?;
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad tensor magic {magic:?}")));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8);
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8);
    let count = rows
        .checked_mul(cols)
        .and_then(|c| usize::try_from(c).ok())
        .ok_or_else(|| Error::Format(format!("tensor shape {rows}x{cols} overflows")))?;
    let mut data = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    Tensor::from_vec(rows as usize, cols as usize, data)
}

pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(24 + 8 * t.len());
    write_tensor(&mut buf, t).expect("writing to a Vec cannot fail");
    buf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::from_rows(&[vec![1.0, -2.5]]).unwrap();
        let bytes = tensor_to_bytes(&t);
        assert_eq!(&bytes[0..4], b"MQNT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &1u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[32..40], &(-2.5f64).to_le_bytes());
        assert_eq!(bytes.len(), 40);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = tensor_to_bytes(&Tensor::identity(2));
        bytes[0] = b'X';
        assert!(matches!(read_tensor(&mut bytes.as_slice()), Err(Error::Format(_))));
        let bytes = tensor_to_bytes(&Tensor::identity(2));
        assert!(read_tensor(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let t = Tensor::from_fn(rows, cols, |i, j| ((seed ^ (i * 31 + j) as u64) as f64).sin() * 1e3);
            let back = read_tensor(&mut tensor_to_bytes(&t).as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
