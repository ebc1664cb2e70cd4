//! Binary tensor container.
//!
//! Layout (little-endian): magic `DAVA`, version `u32`, precision tag `u8`,
//! entry count `u32`, then per entry: name length `u32` + UTF-8 name,
//! rank `u32`, `rank` extents as `u64`, raw payload.

use std::path::Path;

use super::{Precision, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DAVA";
pub const FORMAT_VERSION: u32 = 1;
const META_PREFIX: &str = "meta/";

/// Named tensors plus text metadata blocks.
///
/// Metadata is stored as ordinary rank-1 entries named `meta/<key>` whose
/// elements are the UTF-8 byte values of the text.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<S> {
    pub entries: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for Checkpoint<S> {
    fn default() -> Self {
        Checkpoint {
            entries: Vec::new(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad("truncated file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads the precision tag without decoding the payload.
pub fn peek_precision(bytes: &[u8]) -> Result<Precision> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    Precision::from_tag(bytes[8]).ok_or_else(|| bad(format!("unknown precision tag {}", bytes[8])))
}

impl<S: Scalar> Checkpoint<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<S>) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn set_metadata(&mut self, key: &str, text: &str) {
        let name = format!("{META_PREFIX}{key}");
        self.entries.retain(|(n, _)| *n != name);
        // An empty block still needs one element; a NUL terminator is never
        // part of the decoded text.
        let mut bytes: Vec<S> = text.bytes().map(|b| S::lit(b as f64)).collect();
        bytes.push(S::zero());
        let t = Tensor::vector(bytes).expect("non-empty");
        self.entries.push((name, t));
    }

    pub fn metadata(&self, key: &str) -> Option<String> {
        let t = self.get(&format!("{META_PREFIX}{key}"))?;
        let bytes: Vec<u8> = t
            .data()
            .iter()
            .map(|v| v.to_f64_lossless() as u8)
            .take_while(|&b| b != 0)
            .collect();
        String::from_utf8(bytes).ok()
    }

    /// Tensor entries excluding metadata blocks.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.entries
            .iter()
            .filter(|(n, _)| !n.starts_with(META_PREFIX))
            .map(|(n, t)| (n.as_str(), t))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(S::PRECISION.tag());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let precision = peek_precision(bytes)?;
        if precision != S::PRECISION {
            return Err(bad(format!(
                "file holds {precision:?} data, expected {:?}",
                S::PRECISION
            )));
        }
        let mut r = Reader { bytes, pos: 9 };
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| bad("entry name is not UTF-8"))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank > 16 {
                return Err(bad(format!("entry {name}: rank {rank} too large")));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut total: usize = 1;
            for _ in 0..rank {
                let e = usize::try_from(r.u64()?).map_err(|_| bad("extent overflow"))?;
                if e == 0 {
                    return Err(bad(format!("entry {name}: zero extent")));
                }
                total = total.checked_mul(e).ok_or_else(|| bad("extent overflow"))?;
                shape.push(e);
            }
            let width = S::PRECISION.width();
            let raw = r.take(
                total
                    .checked_mul(width)
                    .ok_or_else(|| bad("payload overflow"))?,
            )?;
            let data = raw.chunks_exact(width).map(S::read_le).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(bad("trailing bytes after last entry"));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint<f32> {
        let mut c = Checkpoint::new();
        c.push(
            "w",
            Tensor::new(
                vec![2, 3],
                vec![1.0, -2.5, f32::MIN_POSITIVE, 0.0, -0.0, 1e30],
            )
            .unwrap(),
        );
        c.push("s", Tensor::scalar(0.125));
        c.set_metadata("config", "hidden_size = 8\nfrontend = \"sinc\"\n");
        c
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes();
        assert_eq!(&b[..4], b"DAVA");
        assert_eq!(
            u32::from_le_bytes(b[4..8].try_into().unwrap()),
            FORMAT_VERSION
        );
        assert_eq!(b[8], 4);
        assert_eq!(u32::from_le_bytes(b[9..13].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[13..17].try_into().unwrap()), 1);
        assert_eq!(&b[17..18], b"w");
    }

    #[test]
    fn metadata_round_trips() {
        let c = Checkpoint::<f32>::from_bytes(&sample().to_bytes()).unwrap();
        assert_eq!(
            c.metadata("config").unwrap(),
            "hidden_size = 8\nfrontend = \"sinc\"\n"
        );
        assert_eq!(c.tensors().count(), 2);
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let b = sample().to_bytes();
        assert!(Checkpoint::<f64>::from_bytes(&b).is_err());
        assert_eq!(peek_precision(&b).unwrap(), Precision::F32);
    }

    #[test]
    fn every_truncation_is_an_error() {
        let b = sample().to_bytes();
        for n in 0..b.len() {
            assert!(
                Checkpoint::<f32>::from_bytes(&b[..n]).is_err(),
                "prefix {n}"
            );
        }
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(any::<f64>(), 1..64)) {
            let mut c = Checkpoint::<f64>::new();
            let n = data.len();
            c.push("x", Tensor::new(vec![n], data).unwrap());
            let bytes = c.to_bytes();
            let back = Checkpoint::<f64>::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }

        #[test]
        fn mutated_bytes_never_panic(flip in 0usize..200, bit in 0u8..8) {
            let mut b = sample().to_bytes();
            let i = flip % b.len();
            b[i] ^= 1 << bit;
            let _ = Checkpoint::<f32>::from_bytes(&b);
        }
    }
}
