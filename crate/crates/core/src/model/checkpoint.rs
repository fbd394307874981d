//! Binary checkpoint format.
//!
//! ```text
//! magic "PSAGANCK" | version u32 | config length u32 | config (key=value lines)
//! growth_stage u32 | alpha f32 | entry count u32
//! per entry: name length u16 | name | ndim u8 | dims u32… | payload offset u64
//! payload length u64 | payload (little-endian f32)
//! ```
//! All integers are little-endian.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use psagan_tensor::Tensor;

use super::{ModelConfig, ModelPair};
use crate::error::{Error, Result};
use crate::nn;

const MAGIC: &[u8; 8] = b"PSAGANCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub growth_stage: u32,
    pub alpha: f32,
    pub entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.get(key).map(String::as_str)
    }

    pub fn entry(&self, name: &str) -> Option<&(String, Vec<usize>, Vec<f32>)> {
        self.entries.iter().find(|(n, _, _)| n == name)
    }

    /// Copies stored values into `tensors`; every name must be present with
    /// a matching shape.
    pub fn restore(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        for (name, t) in tensors {
            let (_, shape, data) = self
                .entry(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {:?}",
                    t.shape()
                )));
            }
            t.data_mut().copy_from_slice(data);
        }
        if self.entries.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model has {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        Ok(())
    }
}

pub fn write_checkpoint(
    w: &mut impl Write,
    config: &[(String, String)],
    growth_stage: u32,
    alpha: f32,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let mut text = String::new();
    for (k, v) in config {
        if k.contains('=') || k.contains('\n') || v.contains('\n') {
            return Err(Error::Checkpoint(format!(
                "config entry `{k}` cannot be encoded"
            )));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&growth_stage.to_le_bytes());
    out.extend_from_slice(&alpha.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.ndim() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.numel() as u64;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for (_, t) in tensors {
        for v in t.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let len = c.u32()? as usize;
    let text = std::str::from_utf8(c.take(len)?)
        .map_err(|_| Error::Checkpoint("config echo is not UTF-8".into()))?;
    let mut config = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("malformed config line `{line}`")))?;
        config.insert(k.to_string(), v.to_string());
    }
    let growth_stage = c.u32()?;
    let alpha = c.f32()?;
    let n = c.u32()? as usize;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let name_len = c.u16()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = c.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        manifest.push((name, shape, offset));
    }
    let payload_len = c.u64()? as usize;
    let payload = c.take(payload_len)?;
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    let mut entries = Vec::with_capacity(n);
    for (name, shape, offset) in manifest {
        let count: usize = shape.iter().product();
        let bytes = payload.get(offset..offset + 4 * count).ok_or_else(|| {
            Error::Checkpoint(format!("tensor `{name}` lies outside the payload"))
        })?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        entries.push((name, shape, data));
    }
    Ok(Checkpoint {
        config,
        growth_stage,
        alpha,
        entries,
    })
}

/// Writes every parameter and spectral-norm vector of `pair`, echoing the
/// model config plus `extra` pairs (scaler state, run metadata).
pub fn save_checkpoint(path: &Path, pair: &ModelPair, extra: &[(String, String)]) -> Result<()> {
    let mut config = pair.config().to_pairs();
    config.extend_from_slice(extra);
    let tensors = nn::state_tensors(pair);
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(
        &mut file,
        &config,
        pair.growth_stage() as u32,
        pair.alpha(),
        &tensors,
    )?;
    file.flush()?;
    Ok(())
}

/// Rebuilds the model pair described by a checkpoint.
pub fn load_checkpoint(path: &Path) -> Result<(ModelPair, Checkpoint)> {
    let ck = read_checkpoint(&mut std::io::BufReader::new(std::fs::File::open(path)?))?;
    let cfg = ModelConfig::from_pairs(&ck.config)?;
    let mut pair = ModelPair::new(cfg, 0)?;
    for s in 2..=ck.growth_stage as usize {
        pair.grow(s)?;
    }
    pair.set_alpha(ck.alpha)?;
    ck.restore(&nn::state_tensors(&pair))?;
    Ok((pair, ck))
}
