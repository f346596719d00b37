//! Versioned little-endian binary checkpoints.
//!
//! Layout: magic `DYTX`, `u32` version, `u32`-prefixed JSON holding the model
//! config and options, `u32` task count followed by one `u64` class count per
//! task, an optional ChaCha state (`u8` flag, 32-byte seed, `u64` stream,
//! `u128` word position), then a `u32`-counted tensor table where each entry
//! is a `u32`-prefixed UTF-8 name, `u32` rank, `u64` extents and `f32` values.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DyToxModel, ModelConfig, ModelOptions, Module};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DYTX";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    options: ModelOptions,
}

/// A restored model and, when saved, the generator state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DyToxModel<f32>,
    pub rng: Option<ChaCha8Rng>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} too large for the checkpoint format")))
}

/// Serialises a model. The training-only divergence head is not stored.
pub fn checkpoint_bytes(model: &DyToxModel<f32>, rng: Option<&ChaCha8Rng>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        options: model.options,
    })?;
    put_u32(&mut out, len_u32(header.len(), "header")?);
    out.extend_from_slice(&header);

    put_u32(&mut out, len_u32(model.num_tasks(), "task count")?);
    for &c in model.class_counts() {
        put_u64(&mut out, c as u64);
    }

    match rng {
        Some(r) => {
            out.push(1);
            out.extend_from_slice(&r.get_seed());
            put_u64(&mut out, r.get_stream());
            out.extend_from_slice(&r.get_word_pos().to_le_bytes());
        }
        None => out.push(0),
    }

    let params: Vec<_> = model.params("").into_iter().filter(|(n, _)| !n.starts_with("divergence.")).collect();
    put_u32(&mut out, len_u32(params.len(), "tensor table")?);
    for (name, t) in params {
        put_u32(&mut out, len_u32(name.len(), "tensor name")?);
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, len_u32(t.ndim(), "rank")?);
        for &d in t.shape() {
            put_u64(&mut out, d as u64);
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &DyToxModel<f32>, rng: Option<&ChaCha8Rng>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model, rng)?)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated checkpoint: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("extent does not fit in memory".into()))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| Error::Format("missing magic header".into()))? != MAGIC {
        return Err(Error::Format("bad magic header, expected DYTX".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let header_len = r.u32()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    header
        .model
        .validate("model")
        .map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;

    let tasks = r.u32()? as usize;
    let counts = (0..tasks).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;

    let rng = match r.take(1)?[0] {
        0 => None,
        1 => {
            let mut g = ChaCha8Rng::from_seed(r.array()?);
            g.set_stream(r.u64()?);
            g.set_word_pos(u128::from_le_bytes(r.array()?));
            Some(g)
        }
        f => return Err(Error::Format(format!("bad generator flag {f}"))),
    };

    let count = r.u32()? as usize;
    let mut table: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = r.take(numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        if table.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut model = DyToxModel::with_tasks(header.model, header.options, &counts, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut seen = 0;
    for (name, p) in model.params_mut("") {
        let stored = table
            .get(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        if stored.shape() != p.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {:?}",
                stored.shape(),
                p.shape()
            )));
        }
        p.data_mut().copy_from_slice(stored.data());
        seen += 1;
    }
    if seen != table.len() {
        let known: std::collections::BTreeSet<String> = model.params("").into_iter().map(|(n, _)| n).collect();
        let unknown = table.keys().find(|k| !known.contains(*k)).cloned().unwrap_or_default();
        return Err(Error::Format(format!("unknown tensor name {unknown}")));
    }
    Ok(Checkpoint { model, rng })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    fn model() -> (DyToxModel<f32>, ChaCha8Rng) {
        let cfg = ModelConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            heads: 2,
            sab_count: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let mut m = DyToxModel::new(cfg, ModelOptions::default(), &mut r).unwrap();
        for c in [2, 3, 2] {
            m.expand_task(c, &mut r).unwrap();
        }
        (m, r)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, mut rng) = model();
        let bytes = checkpoint_bytes(&m, Some(&rng)).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.model.tokens.len(), 3);
        assert_eq!(back.model.heads.len(), 3);
        assert_eq!(back.model.class_counts(), &[2, 3, 2]);
        let img = Tensor::full(&[2, 3, 8, 8], 0.3f32);
        let a = m.forward_all(&img, 3).unwrap();
        let b = back.model.forward_all(&img, 3).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(back.rng.unwrap().next_u64(), rng.next_u64());
    }

    #[test]
    fn corrupted_inputs_fail_explicitly() {
        let (m, _) = model();
        let bytes = checkpoint_bytes(&m, None).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(msg)) if msg.contains("magic")));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(msg)) if msg.contains("version")));
        assert!(matches!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Format(msg)) if msg.contains("truncated")));
        let mut bad = bytes.clone();
        let at = bad.windows(14).position(|w| w == b"tab.norm1.gain").unwrap();
        bad[at + 8] = b'X';
        assert!(matches!(checkpoint_from_bytes(&bad), Err(Error::Format(msg)) if msg.contains("tab.norm1.gain")));
    }
}
