//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "UNEXTCK\0"
//! version    u32       1
//! dtype      u8        element width in bytes: 4 = f32, 8 = f64
//! step       u64       optimizer steps completed
//! config     u32 length + UTF-8 JSON  (resolved run configuration)
//! count      u32       number of entries
//! entry*     u16 name length, name bytes,
//!            u8 kind (0 parameter, 1 buffer, 2 Adam first moment, 3 Adam second moment),
//!            u8 flags (bit 0 trainable, bit 1 weight decay),
//!            u8 rank, rank × u64 dims, numel × dtype values
//! crc32      u32       over every preceding byte
//! ```
//!
//! Entries appear in registry order: parameters, buffers, then moment pairs.
//! Moments are stored under the parameter's name.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, SegModel};
use crate::nn::Tensor;
use crate::optim::AdamW;
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"UNEXTCK\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryKind {
    Param,
    Buffer,
    MomentM,
    MomentV,
}

impl EntryKind {
    fn tag(self) -> u8 {
        match self {
            EntryKind::Param => 0,
            EntryKind::Buffer => 1,
            EntryKind::MomentM => 2,
            EntryKind::MomentV => 3,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => EntryKind::Param,
            1 => EntryKind::Buffer,
            2 => EntryKind::MomentM,
            3 => EntryKind::MomentV,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub kind: EntryKind,
    pub trainable: bool,
    pub decay: bool,
    pub shape: Vec<usize>,
    /// Values widened to f64 (exact for both supported widths).
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub dtype: DType,
    pub step: u64,
    /// Resolved configuration echo, stored verbatim.
    pub config: String,
    pub entries: Vec<Entry>,
}

/// Names that were found in only one of checkpoint and model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RestoreReport {
    pub restored: usize,
    /// Checkpoint entries with no counterpart in the model.
    pub extra: Vec<String>,
}

fn entry<T: Scalar>(name: &str, kind: EntryKind, trainable: bool, decay: bool, t: &Tensor<T>) -> Entry {
    Entry {
        name: name.to_string(),
        kind,
        trainable,
        decay,
        shape: t.shape().to_vec(),
        data: t.data().iter().map(|v| v.as_f64()).collect(),
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    /// Captures every parameter, buffer and (optionally) optimizer moment.
    pub fn capture<T: Scalar>(model: &SegModel<T>, opt: Option<&AdamW<T>>, config: String) -> Self {
        let mut entries: Vec<Entry> = model
            .params
            .iter()
            .map(|(n, p)| entry(n, EntryKind::Param, p.trainable, p.decay, &p.values))
            .collect();
        entries.extend(model.params.buffers().map(|(n, b)| entry(n, EntryKind::Buffer, false, false, b)));
        if let Some(opt) = opt {
            for (n, (m, v)) in &opt.moments {
                entries.push(entry(n, EntryKind::MomentM, true, false, m));
                entries.push(entry(n, EntryKind::MomentV, true, false, v));
            }
        }
        Self {
            dtype: T::DTYPE,
            step: opt.map_or(0, |o| o.step),
            config,
            entries,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.dtype.tag());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.kind.tag());
            out.push(u8::from(e.trainable) | (u8::from(e.decay) << 1));
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &e.data {
                match self.dtype {
                    DType::F32 => (v as f32).write_le(&mut out),
                    DType::F64 => v.write_le(&mut out),
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        if bytes.len() < 16 {
            return Err(corrupt("file is truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch (truncated or corrupted file)"));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let dtype = DType::from_tag(r.u8()?).ok_or_else(|| corrupt("unknown dtype tag"))?;
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let config = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("config is not UTF-8"))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let kind = EntryKind::from_tag(r.u8()?).ok_or_else(|| corrupt(format!("unknown entry kind for `{name}`")))?;
            let flags = r.u8()?;
            let rank = r.u8()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| corrupt(format!("shape of `{name}` overflows")))?;
            let raw = r.take(numel.checked_mul(dtype.size()).ok_or_else(|| corrupt("tensor too large"))?)?;
            let data = match dtype {
                DType::F32 => raw.chunks_exact(4).map(|c| f32::read_le(c) as f64).collect(),
                DType::F64 => raw.chunks_exact(8).map(f64::read_le).collect(),
            };
            entries.push(Entry {
                name,
                kind,
                trainable: flags & 1 != 0,
                decay: flags & 2 != 0,
                shape,
                data,
            });
        }
        if r.pos != body.len() {
            return Err(corrupt(format!("{} trailing byte(s) after the tensor table", body.len() - r.pos)));
        }
        Ok(Self {
            dtype,
            step,
            config,
            entries,
        })
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// The `model` section of the configuration echo.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let value: serde_json::Value = serde_json::from_str(&self.config)?;
        let model = value.get("model").cloned().unwrap_or(value);
        Ok(serde_json::from_value(model)?)
    }

    fn find(&self, name: &str, kind: EntryKind) -> Option<&Entry> {
        self.entries.iter().find(|e| e.kind == kind && e.name == name)
    }

    /// Copies every parameter and buffer whose name starts with one of
    /// `prefixes` (all of them when empty) into the model, and the optimizer
    /// moments when `opt` is given. Everything is validated first, so on
    /// error the model and optimizer are untouched.
    pub fn restore<T: Scalar>(
        &self,
        model: &mut SegModel<T>,
        opt: Option<&mut AdamW<T>>,
        prefixes: &[&str],
    ) -> Result<RestoreReport> {
        let wanted = |n: &str| prefixes.is_empty() || prefixes.iter().any(|p| n.starts_with(p));
        let mut missing = Vec::new();
        let mut plan: Vec<(&str, EntryKind, &Entry)> = Vec::new();
        let check = |name: &str, expected: &[usize], e: &Entry| -> Result<()> {
            if e.shape != expected {
                return Err(Error::TensorShape {
                    name: name.to_string(),
                    expected: expected.to_vec(),
                    found: e.shape.clone(),
                });
            }
            Ok(())
        };
        for (name, p) in model.params.iter().filter(|(n, _)| wanted(n)) {
            match self.find(name, EntryKind::Param) {
                Some(e) => {
                    check(name, p.values.shape(), e)?;
                    plan.push((name, EntryKind::Param, e));
                }
                None => missing.push(name.to_string()),
            }
        }
        for (name, b) in model.params.buffers().filter(|(n, _)| wanted(n)) {
            match self.find(name, EntryKind::Buffer) {
                Some(e) => {
                    check(name, b.shape(), e)?;
                    plan.push((name, EntryKind::Buffer, e));
                }
                None => missing.push(name.to_string()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        let mut moments = Vec::new();
        if opt.is_some() {
            for e in self.entries.iter().filter(|e| e.kind == EntryKind::MomentM) {
                let v = self
                    .find(&e.name, EntryKind::MomentV)
                    .ok_or_else(|| corrupt(format!("second moment of `{}` is missing", e.name)))?;
                let p = model
                    .params
                    .get(&e.name)
                    .ok_or_else(|| corrupt(format!("moment for unknown parameter `{}`", e.name)))?;
                check(&e.name, p.values.shape(), e)?;
                check(&e.name, p.values.shape(), v)?;
                moments.push((e, v));
            }
        }
        let known: Vec<String> = plan.iter().map(|(n, _, _)| n.to_string()).collect();
        let extra = self
            .entries
            .iter()
            .filter(|e| matches!(e.kind, EntryKind::Param | EntryKind::Buffer))
            .filter(|e| wanted(&e.name) && !known.contains(&e.name))
            .map(|e| e.name.clone())
            .collect();
        let to_tensor = |e: &Entry| Tensor::new(e.shape.clone(), e.data.iter().map(|&v| T::lit(v)).collect());
        let restored = plan.len();
        let updates: Vec<(String, EntryKind, Tensor<T>)> = plan
            .into_iter()
            .map(|(n, k, e)| Ok((n.to_string(), k, to_tensor(e)?)))
            .collect::<Result<_>>()?;
        for (name, kind, t) in updates {
            match kind {
                EntryKind::Param => model.params.get_mut(&name).expect("validated").values = t,
                _ => *model.params.get_buffer_mut(&name).expect("validated") = t,
            }
        }
        if let Some(opt) = opt {
            opt.moments.clear();
            for (m, v) in moments {
                opt.moments.insert(m.name.clone(), (to_tensor(m)?, to_tensor(v)?));
            }
            opt.step = self.step;
        }
        Ok(RestoreReport { restored, extra })
    }
}

/// Populates the encoder tensors (`hier.*`, `plain.*`) of `model` from a
/// checkpoint file.
pub fn load_encoder_weights<T: Scalar>(path: &Path, model: &mut SegModel<T>) -> Result<RestoreReport> {
    Checkpoint::load(path)?.restore(model, None, &["hier.", "plain."])
}
