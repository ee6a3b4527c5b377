//! Binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSXT" | version: u16 | dtype: u8 (0 = f64) | rank: u8 | dims: u64 * rank | payload: f64 * numel
//! ```

use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};

pub const CONTAINER_MAGIC: &[u8; 4] = b"CSXT";
pub const CONTAINER_VERSION: u16 = 1;
const DTYPE_F64: u8 = 0;

fn io_err(e: std::io::Error) -> Error {
    Error::Format(e.to_string())
}

pub fn write_tensor<W: Write>(mut w: W, t: &Tensor) -> Result<()> {
    let rank = u8::try_from(t.rank()).map_err(|_| Error::Format("rank exceeds 255".into()))?;
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.numel());
    buf.extend_from_slice(CONTAINER_MAGIC);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.push(DTYPE_F64);
    buf.push(rank);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor> {
    let mut header = [0u8; 8];
    r.read_exact(&mut header).map_err(io_err)?;
    if &header[..4] != CONTAINER_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &header[..4])));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if header[6] != DTYPE_F64 {
        return Err(Error::Format(format!(
            "unsupported dtype code {}",
            header[6]
        )));
    }
    let rank = header[7] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut word = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut word).map_err(io_err)?;
        let d = usize::try_from(u64::from_le_bytes(word))
            .map_err(|_| Error::Format("dimension overflows usize".into()))?;
        shape.push(d);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("element count overflows".into()))?;
    let mut payload = vec![0u8; numel * 8];
    r.read_exact(&mut payload).map_err(io_err)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing).map_err(io_err)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

impl Tensor {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write_tensor(&mut out, self).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_tensor(bytes)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, -0.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"CSXT");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 0);
        assert_eq!(b[7], 2);
        assert_eq!(&b[8..16], &2u64.to_le_bytes());
        assert_eq!(&b[16..24], &3u64.to_le_bytes());
        assert_eq!(&b[24..32], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 8 + 16 + 48);
    }

    #[test]
    fn rejects_corrupt_input() {
        let t = Tensor::ones(&[2, 2]);
        let mut b = t.to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(Tensor::from_bytes(&extra).is_err());
        b[0] = b'X';
        assert!(Tensor::from_bytes(&b).is_err());
    }

    proptest! {
        #[test]
        fn byte_exact_round_trip(
            shape in proptest::collection::vec(1usize..5, 1..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|i| f64::from_bits(seed.wrapping_mul(i as u64 + 1) & 0x3FEF_FFFF_FFFF_FFFF) - 0.5)
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = t.to_bytes();
            let back = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
            prop_assert_eq!(back, t);
        }
    }
}
