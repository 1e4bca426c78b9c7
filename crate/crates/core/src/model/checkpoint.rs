//! Binary checkpoints: a header (magic, version, config as length-prefixed
//! key/value fields), base tensors in declaration order as little-endian
//! f64, then optional tagged trailer sections for patches and memory.

use std::fs;
use std::path::Path;

use sme_autodiff::{Activation, Tensor};

use super::{ModelConfig, Task, TransformerModel};
use crate::error::{Result, SmeError};
use crate::patch::PatchSet;

const MAGIC: &[u8; 8] = b"SMECKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const PATCH_TAG: &[u8; 4] = b"PTCH";
const MEMORY_TAG: &[u8; 4] = b"MEMB";

/// A model together with an optional memory matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub memory: Option<Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let c = m.config();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let fields: Vec<(&str, String)> = vec![
            ("vocab_size", c.vocab_size.to_string()),
            ("d_model", c.d_model.to_string()),
            ("n_heads", c.n_heads.to_string()),
            ("n_layers", c.n_layers.to_string()),
            ("d_ffn", c.d_ffn.to_string()),
            ("activation", c.activation.name().to_string()),
            ("task", c.task.name().to_string()),
            ("n_classes", c.n_classes.to_string()),
            ("max_seq_len", c.max_seq_len.to_string()),
            ("patched_layer", m.patched_layer().to_string()),
        ];
        out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
        for (k, v) in fields {
            put_str(&mut out, k);
            put_str(&mut out, &v);
        }
        for (_, t) in m.weights().iter() {
            put_f64s(&mut out, t.data());
        }
        let p = m.patches();
        if !p.is_empty() {
            let mut body = Vec::new();
            body.extend_from_slice(&(p.len() as u64).to_le_bytes());
            body.extend_from_slice(&(p.d_model() as u64).to_le_bytes());
            for t in [&p.keys, &p.bias, &p.values_raw, &p.value_scale] {
                put_f64s(&mut body, t.data());
            }
            for o in &p.owners {
                body.extend_from_slice(&o.to_le_bytes());
            }
            put_section(&mut out, PATCH_TAG, &body);
        }
        if let Some(mem) = &self.memory {
            let (rows, d) = mem.dims2().expect("memory is a matrix");
            let mut body = Vec::new();
            body.extend_from_slice(&(rows as u64).to_le_bytes());
            body.extend_from_slice(&(d as u64).to_le_bytes());
            put_f64s(&mut body, mem.data());
            put_section(&mut out, MEMORY_TAG, &body);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(SmeError::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(SmeError::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let n_fields = r.u32()?;
        let mut fields = std::collections::HashMap::new();
        for _ in 0..n_fields {
            let k = r.string()?;
            let v = r.string()?;
            fields.insert(k, v);
        }
        let get = |k: &str| -> Result<&String> {
            fields
                .get(k)
                .ok_or_else(|| SmeError::Format(format!("missing header field {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| SmeError::Format(format!("header field {k} is not a number")))
        };
        let activation: Activation = get("activation")?
            .parse()
            .map_err(|_| SmeError::Format("unknown activation".into()))?;
        let task = match get("task")?.as_str() {
            "classification" => Task::Classification,
            "generation" => Task::Generation,
            other => return Err(SmeError::Format(format!("unknown task {other}"))),
        };
        let config = ModelConfig {
            vocab_size: num("vocab_size")?,
            d_model: num("d_model")?,
            n_heads: num("n_heads")?,
            n_layers: num("n_layers")?,
            d_ffn: num("d_ffn")?,
            activation,
            task,
            n_classes: num("n_classes")?,
            max_seq_len: num("max_seq_len")?,
        };
        config.validate()?;
        // Shapes come from a freshly built model with the same config.
        let mut weights = TransformerModel::new(config.clone(), 0)?.weights().clone();
        for t in weights.iter_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&r.f64s(n)?);
        }
        let d = config.d_model;
        let mut patches = PatchSet::empty(d);
        let mut memory = None;
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let body = r.take(len)?;
            let mut s = Reader {
                bytes: body,
                pos: 0,
            };
            match &tag {
                PATCH_TAG => {
                    let n = s.u64()? as usize;
                    let pd = s.u64()? as usize;
                    if pd != d {
                        return Err(SmeError::Format("patch width differs from model".into()));
                    }
                    let keys = Tensor::new([d, n], s.f64s(d * n)?)?;
                    let bias = Tensor::new([n], s.f64s(n)?)?;
                    let raw = Tensor::new([n, d], s.f64s(n * d)?)?;
                    let scale = Tensor::new([n, d], s.f64s(n * d)?)?;
                    let owners = (0..n).map(|_| s.u64()).collect::<Result<Vec<_>>>()?;
                    patches = PatchSet::new(keys, bias, raw, scale, owners)?;
                }
                MEMORY_TAG => {
                    let rows = s.u64()? as usize;
                    let md = s.u64()? as usize;
                    memory = Some(Tensor::new([rows, md], s.f64s(rows * md)?)?);
                }
                _ => {
                    return Err(SmeError::Format(format!(
                        "unknown section {}",
                        String::from_utf8_lossy(&tag)
                    )))
                }
            }
            if s.pos != body.len() {
                return Err(SmeError::Format("trailing bytes in section".into()));
            }
        }
        let model = TransformerModel::from_parts(config, weights, patches, num("patched_layer")?)?;
        Ok(Self { model, memory })
    }
}

pub fn save_checkpoint(path: &Path, model: &TransformerModel, memory: Option<&Tensor>) -> Result<()> {
    let ck = Checkpoint {
        model: model.clone(),
        memory: memory.cloned(),
    };
    fs::write(path, ck.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn put_section(out: &mut Vec<u8>, tag: &[u8; 4], body: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(body);
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
            .ok_or_else(|| SmeError::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| SmeError::Format("header field is not UTF-8".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| SmeError::Format("overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")))
            .collect())
    }
}
