//! Binary checkpoint files.
//!
//! Layout (little endian): `"MTJC"`, `u16` version, `u32`-prefixed JSON model
//! configuration, mode byte, tag-position byte, `u32` tap layer, `u64` step,
//! `u32` parameter count, then per parameter a `u16`-prefixed UTF-8 name, a
//! rank byte, `u32` dimensions and three `f32` payloads (value, Adam first
//! and second moments). A CRC-32 of everything before it closes the file.
//!
//! Payloads are stored in single precision, so a loaded model is the
//! in-memory one rounded to `f32`; saving it again reproduces the file.

use std::fs;
use std::path::Path;

use mtjr_core::model::{Model, ModelConfig, SharingConfig};
use mtjr_core::train::{AdamState, Checkpoint, Mode, TagPosition};
use mtjr_core::{ParamStore, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTJC";
pub const FORMAT_VERSION: u16 = 1;

fn mode_code(mode: Mode) -> (u8, u8) {
    match mode {
        Mode::MonoAsr => (0, 0),
        Mode::MonoAr => (1, 0),
        Mode::Stjr(TagPosition::Append) => (2, 0),
        Mode::Stjr(TagPosition::Prepend) => (2, 1),
        Mode::Mtjr => (3, 0),
    }
}

fn mode_from_code(mode: u8, tag: u8) -> Option<Mode> {
    let position = match tag {
        0 => TagPosition::Append,
        1 => TagPosition::Prepend,
        _ => return None,
    };
    Some(match mode {
        0 => Mode::MonoAsr,
        1 => Mode::MonoAr,
        2 => Mode::Stjr(position),
        3 => Mode::Mtjr,
        _ => return None,
    })
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor) {
    for &x in t.data() {
        out.extend_from_slice(&(x as f32).to_le_bytes());
    }
}

/// Serializes a checkpoint to bytes.
pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(&ckpt.model.config).expect("model config serializes");
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    let (mode, tag) = mode_code(ckpt.mode);
    out.extend_from_slice(&[mode, tag]);
    out.extend_from_slice(&(ckpt.sharing.tap_layer as u32).to_le_bytes());
    out.extend_from_slice(&ckpt.optimizer.step.to_le_bytes());
    let params = &ckpt.model.params;
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (id, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, &p.value);
        put_f32s(&mut out, &ckpt.optimizer.m[id.index()]);
        put_f32s(&mut out, &ckpt.optimizer.v[id.index()]);
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::corrupt(self.path, "unexpected end of checkpoint"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        self.array().map(u16::from_le_bytes)
    }

    fn u32(&mut self) -> Result<u32> {
        self.array().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.array().map(u64::from_le_bytes)
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::corrupt(self.path, "tensor too large"))?)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

/// Parses bytes produced by [`encode`]; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() < 10 || &bytes[..4] != MAGIC {
        return Err(Error::corrupt(path, "missing MTJC magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { path: path.to_owned(), found: version, expected: FORMAT_VERSION });
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(trailer.try_into().expect("4 bytes")) {
        return Err(Error::corrupt(path, "checksum mismatch"));
    }
    let mut r = Reader { bytes: body, pos: 6, path };
    let len = r.u32()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(len)?).map_err(|e| Error::corrupt(path, format!("model config: {e}")))?;
    let (mode, tag) = (r.u8()?, r.u8()?);
    let mode = mode_from_code(mode, tag).ok_or_else(|| Error::corrupt(path, "unknown training mode"))?;
    let tap_layer = r.u32()? as usize;
    let step = r.u64()?;
    let count = r.u32()? as usize;
    let mut params = ParamStore::new();
    let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name =
            std::str::from_utf8(r.take(len)?).map_err(|_| Error::corrupt(path, "parameter name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        params.insert(name, r.tensor(&shape)?)?;
        m.push(r.tensor(&shape)?);
        v.push(r.tensor(&shape)?);
    }
    if r.pos != body.len() {
        return Err(Error::corrupt(path, "trailing bytes after the parameters"));
    }
    let model = Model::from_params(config, params)?;
    let sharing = SharingConfig { tap_layer };
    sharing.validate(&model.config)?;
    Ok(Checkpoint { model, mode, sharing, optimizer: AdamState { step, m, v } })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    fs::write(path, encode(ckpt)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    decode(&bytes, path)
}
