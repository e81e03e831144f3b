//! Versioned binary container for named tensors plus a JSON header.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     4 bytes  "HYBC"
//! version   u32      1
//! json_len  u64      then json_len bytes of UTF-8 JSON
//! count     u64      number of tensors, then per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8      0 = f64
//!   flags    u8      bit 0 = trainable
//!   rank     u32, dims u64 × rank
//!   data     f64 × numel, row-major
//! ```
//!
//! Tensors are written in parameter registration order, so identical
//! stores produce identical bytes on every platform.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HYBC";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub trainable: bool,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_store(header: serde_json::Value, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                trainable: p.trainable,
                tensor: p.value.clone(),
            })
            .collect();
        Checkpoint { header, tensors }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = serde_json::to_vec(&self.header).expect("json value serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F64);
            out.push(u8::from(t.trainable));
            out.extend_from_slice(&(t.tensor.rank() as u32).to_le_bytes());
            for &d in t.tensor.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.tensor.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let json_len = r.len()?;
        let header = serde_json::from_slice(r.take(json_len)?)?;
        let count = r.len()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            if dtype != DTYPE_F64 {
                return Err(Error::Checkpoint(format!("{name}: unknown dtype {dtype}")));
            }
            let trainable = r.u8()? & 1 == 1;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<usize>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("{name}: truncated data")))?;
            let data = r
                .take(numel * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(NamedTensor { name, trainable, tensor: Tensor::new(shape, data)? });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes every tensor into `store`, which must hold exactly the same
    /// names and shapes.
    pub fn apply(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for t in &self.tensors {
            store.set_value(&t.name, t.tensor.clone())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflows usize".into()))
    }
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    model: ModelConfig,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Saves a model with its configuration and caller metadata.
pub fn save_model(path: &Path, model: &HybridModel, extra: serde_json::Value) -> Result<()> {
    model_checkpoint(model, extra)?.save(path)
}

pub fn model_checkpoint(model: &HybridModel, extra: serde_json::Value) -> Result<Checkpoint> {
    let header = serde_json::to_value(ModelHeader { model: model.config.clone(), extra })?;
    Ok(Checkpoint::from_store(header, &model.store))
}

/// Rebuilds the architecture from the stored config and loads its tensors.
pub fn load_model(path: &Path) -> Result<(HybridModel, serde_json::Value)> {
    model_from_checkpoint(&Checkpoint::load(path)?)
}

pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<(HybridModel, serde_json::Value)> {
    let header: ModelHeader = serde_json::from_value(ck.header.clone())?;
    let mut model = HybridModel::new(header.model, 0)?;
    ck.apply(&mut model.store)?;
    Ok((model, header.extra))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> HybridModel {
        let mut c = ModelConfig::tiny(12, 8, 8);
        c.kernel_sizes = vec![2];
        c.filters = 3;
        c.proj_dim = 4;
        c.hidden = 3;
        c.attn_dim = 3;
        c.dense_units = 4;
        HybridModel::new(c, 9).unwrap()
    }

    #[test]
    fn roundtrip_is_exact_and_byte_stable() {
        let m = tiny();
        let extra = serde_json::json!({"task": "aspect"});
        let ck = model_checkpoint(&m, extra.clone()).unwrap();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
        let (m2, extra2) = model_from_checkpoint(&back).unwrap();
        assert_eq!(extra2, extra);
        assert_eq!(m2.config, m.config);
        for ((_, a), (_, b)) in m.store.iter().zip(m2.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.5]));
        let bytes = Checkpoint::from_store(serde_json::json!(null), &store).to_bytes();
        let mut want = b"HYBC".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(4u64.to_le_bytes());
        want.extend(b"null");
        want.extend(1u64.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.extend(b"w");
        want.extend([0u8, 1u8]);
        want.extend(1u32.to_le_bytes());
        want.extend(1u64.to_le_bytes());
        want.extend(1.5f64.to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = model_checkpoint(&tiny(), serde_json::Value::Null).unwrap().to_bytes();
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let ck = model_checkpoint(&tiny(), serde_json::Value::Null).unwrap();
        let mut other = ModelConfig::tiny(12, 8, 8);
        other.kernel_sizes = vec![2];
        other.filters = 5;
        let mut m = HybridModel::new(other, 0).unwrap();
        assert!(ck.apply(&mut m.store).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.hybc");
        let m = tiny();
        save_model(&path, &m, serde_json::json!({"seed": 9})).unwrap();
        let (m2, extra) = load_model(&path).unwrap();
        assert_eq!(extra["seed"], 9);
        assert_eq!(m2.store.value(m2.store.trainable_ids()[0]), m.store.value(m.store.trainable_ids()[0]));
        assert!(load_model(&dir.path().join("missing")).is_err());
    }
}
