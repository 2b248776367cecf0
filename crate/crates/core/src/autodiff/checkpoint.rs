//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "AGNN"                  magic
//! u32                     format version
//! u32 + bytes             metadata (UTF-8 JSON)
//! u32                     entry count
//! per entry:
//!   u32 + bytes           name
//!   u32                   rank
//!   u64 × rank            dims
//!   u64                   byte offset into the payload
//! payload                 f64 values, little-endian, in entry order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use super::store::{MomentState, ParameterStore};
use super::tensor::Tensor;
use super::AutodiffError;

pub const MAGIC: &[u8; 4] = b"AGNN";
pub const VERSION: u32 = 1;

const FIRST_MOMENT: &str = "opt/m/";
const SECOND_MOMENT: &str = "opt/v/";
const PARAM: &str = "param/";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint at byte {0}")]
    Truncated(usize),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.metadata.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.numel() as u64;
        }
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let metadata = String::from_utf8(r.bytes_with_len()?.to_vec())
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let name = String::from_utf8(r.bytes_with_len()?.to_vec())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let payload = &bytes[r.pos..];
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in manifest {
            let numel: usize = shape.iter().product();
            let end = offset + 8 * numel;
            let chunk = payload
                .get(offset..end)
                .ok_or(CheckpointError::Truncated(r.pos + end))?;
            let data = chunk
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if tensors.insert(name.clone(), Tensor::new(shape, data)?).is_some() {
                return Err(CheckpointError::Malformed(format!("duplicate entry {name}")));
            }
        }
        Ok(Self { metadata, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.encode())?;
        f.sync_all()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&fs::read(path)?)
    }

    /// Adds the parameters and optimizer moments of `store`.
    /// The optimizer step counter travels in the `"opt/step"` entry.
    pub fn put_store(&mut self, store: &ParameterStore) {
        for (k, v) in store.iter() {
            self.tensors.insert(format!("{PARAM}{k}"), v.clone());
        }
        if let Some(m) = &store.moments {
            for (k, v) in &m.first {
                self.tensors.insert(format!("{FIRST_MOMENT}{k}"), v.clone());
            }
            for (k, v) in &m.second {
                self.tensors.insert(format!("{SECOND_MOMENT}{k}"), v.clone());
            }
        }
        self.tensors
            .insert("opt/step".into(), Tensor::scalar(store.step as f64));
    }

    pub fn take_store(&self) -> Result<ParameterStore, CheckpointError> {
        let mut store = ParameterStore::new();
        let mut moments = MomentState::default();
        for (k, v) in &self.tensors {
            if let Some(name) = k.strip_prefix(PARAM) {
                store.insert(name, v.clone())?;
            } else if let Some(name) = k.strip_prefix(FIRST_MOMENT) {
                moments.first.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix(SECOND_MOMENT) {
                moments.second.insert(name.to_string(), v.clone());
            }
        }
        if !moments.first.is_empty() || !moments.second.is_empty() {
            store.moments = Some(moments);
        }
        store.step = self.tensors.get("opt/step").map_or(0, |t| t.item() as u64);
        Ok(store)
    }
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or(CheckpointError::Truncated(self.pos))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes_with_len(&mut self) -> Result<&'a [u8], CheckpointError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let ck = Checkpoint {
            metadata: "{}".into(),
            tensors: BTreeMap::from([("a".into(), Tensor::scalar(1.5))]),
        };
        let b = ck.encode();
        assert_eq!(&b[..4], b"AGNN");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(&b[b.len() - 8..], &1.5f64.to_le_bytes());
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(matches!(Checkpoint::decode(b"XXXX\x01\0\0\0"), Err(CheckpointError::BadMagic)));
        let ck = Checkpoint {
            metadata: "m".into(),
            tensors: BTreeMap::from([("a".into(), Tensor::row(&[1.0, 2.0]))]),
        };
        let b = ck.encode();
        assert!(matches!(
            Checkpoint::decode(&b[..b.len() - 3]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn store_with_moments_survives() {
        let mut s = ParameterStore::new();
        s.insert("x/w", Tensor::row(&[1.0, -2.0])).unwrap();
        s.step = 17;
        s.moments = Some(MomentState {
            first: BTreeMap::from([("x/w".into(), Tensor::row(&[0.1, 0.2]))]),
            second: BTreeMap::from([("x/w".into(), Tensor::row(&[0.3, 0.4]))]),
        });
        let mut ck = Checkpoint::default();
        ck.put_store(&s);
        let back = Checkpoint::decode(&ck.encode()).unwrap().take_store().unwrap();
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            entries in prop::collection::btree_map(
                "[a-z/]{1,12}",
                (1usize..4, 1usize..5).prop_flat_map(|(r, c)| {
                    prop::collection::vec(prop::num::f64::ANY, r * c)
                        .prop_map(move |d| (vec![r, c], d))
                }),
                0..6,
            ),
            meta in ".{0,40}",
        ) {
            let tensors = entries
                .into_iter()
                .map(|(k, (s, d))| (k, Tensor::new(s, d).unwrap()))
                .collect::<BTreeMap<_, _>>();
            let ck = Checkpoint { metadata: meta, tensors };
            let back = Checkpoint::decode(&ck.encode()).unwrap();
            prop_assert_eq!(&back.metadata, &ck.metadata);
            prop_assert_eq!(back.tensors.len(), ck.tensors.len());
            for (k, t) in &ck.tensors {
                let b = &back.tensors[k];
                prop_assert_eq!(b.shape(), t.shape());
                let bits_a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }
}
