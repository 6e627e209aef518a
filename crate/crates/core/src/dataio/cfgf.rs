//! CFGF binary tensor files.
//!
//! Layout, all little-endian:
//!
//! | bytes        | field                      |
//! |--------------|----------------------------|
//! | 4            | magic `CFGF`               |
//! | 4            | version (u32) = 1          |
//! | 4            | ndim (u32)                 |
//! | 4 · ndim     | dims (u32 each)            |
//! | 4 · Π dims   | row-major f32 payload      |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

pub const MAGIC: &[u8; 4] = b"CFGF";
pub const VERSION: u32 = 1;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.data().len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in t.data() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                field,
                detail: format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            field: "magic",
            detail: format!("bad magic {:?}", String::from_utf8_lossy(magic)),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported version {version}"),
        });
    }
    let ndim = r.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32("dims")? as usize);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format {
            field: "dims",
            detail: "element count overflows".into(),
        })?;
    let payload = r.take(count.saturating_mul(4), "data")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            field: "data",
            detail: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| Error::Format {
        field: "data",
        detail: e.to_string(),
    })
}

pub fn store_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_2x2_is_36_bytes() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let bytes = encode(&t);
        assert_eq!(bytes.len(), 36);
        assert_eq!(&bytes[..4], b"CFGF");
        assert_eq!(decode(&bytes).unwrap(), t);
    }

    #[test]
    fn bad_magic_is_reported() {
        let t = Tensor::new(vec![1], vec![1.0]).unwrap();
        let mut bytes = encode(&t);
        bytes[..4].copy_from_slice(b"XXXX");
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
        assert!(matches!(err, Error::Format { field: "magic", .. }));
    }

    #[test]
    fn bad_version_and_truncation_name_the_field() {
        let t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut bytes = encode(&t);
        bytes[4] = 9;
        assert!(matches!(
            decode(&bytes).unwrap_err(),
            Error::Format { field: "version", .. }
        ));

        let bytes = encode(&t);
        assert!(matches!(
            decode(&bytes[..bytes.len() - 1]).unwrap_err(),
            Error::Format { field: "data", .. }
        ));
        assert!(matches!(
            decode(&bytes[..14]).unwrap_err(),
            Error::Format { field: "dims", .. }
        ));
        assert!(matches!(
            decode(&bytes[..6]).unwrap_err(),
            Error::Format { field: "version", .. }
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cfgf");
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 0.0, 7.5, -0.125]).unwrap();
        store_tensor(&t, &path).unwrap();
        assert_eq!(load_tensor(&path).unwrap(), t);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact_at_f32(dims in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let n: usize = dims.iter().product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1e6..1e6)).collect();
            let t = Tensor::new(dims, data).unwrap();
            let once = encode(&t);
            let loaded = decode(&once).unwrap();
            prop_assert_eq!(loaded.dims(), t.dims());
            for (a, b) in loaded.data().iter().zip(t.data()) {
                prop_assert_eq!((*a as f32).to_bits(), (*b as f32).to_bits());
            }
            prop_assert_eq!(encode(&loaded), once);
        }
    }
}
