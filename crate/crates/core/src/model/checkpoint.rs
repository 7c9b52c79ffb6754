//! Binary named-tensor container.
//!
//! ```text
//! "CMKW" | version u32 | count u32 | count x entry
//! entry: name_len u16 | name | rank u8 | rank x extent u32 | f32 LE payload
//! ```
//!
//! The model config travels as an entry named [`CONFIG_ENTRY`]: its
//! `key = value` text, zero-padded to a multiple of four bytes and stored
//! as a rank-1 tensor of raw words.

use std::io::{Read, Write};
use std::path::Path;

use kws_tensor::{Real, Tensor};

use super::{ConvMixerModel, ModelConfig};
use crate::error::{KwsError, Result};
use crate::kv::{check_keys, KeyValues};

const MAGIC: &[u8; 4] = b"CMKW";
const VERSION: u32 = 1;
pub const CONFIG_ENTRY: &str = "__config__";

fn entries<T: Real>(model: &ConvMixerModel<T>) -> Vec<(String, Vec<usize>, Vec<u8>)> {
    let mut text = model.config().to_kv().to_text().into_bytes();
    text.resize(text.len().div_ceil(4) * 4, 0);
    let mut out = vec![(CONFIG_ENTRY.to_string(), vec![text.len() / 4], text)];
    for p in model.params().iter().chain(model.buffers()) {
        let bytes = p.value.data().iter().flat_map(|v| v.to_f32().unwrap_or(f32::NAN).to_le_bytes()).collect();
        out.push((p.name.clone(), p.value.shape().to_vec(), bytes));
    }
    out
}

/// Serializes `model` (parameters, running statistics and config).
pub fn write_checkpoint<T: Real, W: Write>(model: &ConvMixerModel<T>, mut w: W) -> Result<()> {
    let entries = entries(model);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, shape, payload) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(shape.len() as u8);
        for &e in shape {
            buf.extend_from_slice(&(e as u32).to_le_bytes());
        }
        buf.extend_from_slice(payload);
    }
    w.write_all(&buf).map_err(|e| KwsError::Checkpoint(format!("write failed: {e}")))
}

pub fn save_checkpoint<T: Real>(model: &ConvMixerModel<T>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| KwsError::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| KwsError::Checkpoint(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses a checkpoint, rebuilding the model from the embedded config and
/// checking every stored tensor against it.
pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ConvMixerModel<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| KwsError::Checkpoint(format!("read failed: {e}")))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };
    if cur.take(4).map_err(|_| KwsError::Checkpoint("missing magic".into()))? != MAGIC {
        return Err(KwsError::Checkpoint("bad magic (not a CMKW checkpoint)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(KwsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|_| KwsError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        let shape = (0..rank).map(|_| cur.u32().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = cur.take(numel.checked_mul(4).ok_or_else(|| KwsError::Checkpoint("extent overflow".into()))?)?;
        tensors.push((name, shape, payload));
    }
    if cur.pos != bytes.len() {
        return Err(KwsError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
    }

    let (_, _, text) = tensors
        .iter()
        .find(|(n, _, _)| n == CONFIG_ENTRY)
        .ok_or_else(|| KwsError::Checkpoint("missing config entry".into()))?;
    let text = std::str::from_utf8(text)
        .map_err(|_| KwsError::Checkpoint("config entry is not UTF-8".into()))?
        .trim_end_matches('\0');
    let kv = KeyValues::parse(text)?;
    check_keys(&kv, super::MODEL_KEYS)?;
    let config = ModelConfig::from_kv(&kv)?;

    let mut model = ConvMixerModel::<T>::build(&config, &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0))?;
    let expected = model.params().len() + model.buffers().len() + 1;
    if tensors.len() != expected {
        return Err(KwsError::Checkpoint(format!("expected {expected} tensors for this config, found {}", tensors.len())));
    }
    let slots = model.params.iter_mut().chain(model.buffers.iter_mut());
    for slot in slots {
        let (_, shape, payload) = tensors
            .iter()
            .find(|(n, _, _)| *n == slot.name)
            .ok_or_else(|| KwsError::Checkpoint(format!("missing tensor `{}`", slot.name)))?;
        if shape.as_slice() != slot.value.shape() {
            return Err(KwsError::Checkpoint(format!(
                "shape mismatch for `{}`: config wants {:?}, file has {shape:?}",
                slot.name,
                slot.value.shape()
            )));
        }
        let data = payload.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)).collect();
        slot.value = Tensor::new(shape.clone(), data)?;
    }
    Ok(model)
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<ConvMixerModel<T>> {
    let file = std::fs::File::open(path).map_err(|e| KwsError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(file))
}
