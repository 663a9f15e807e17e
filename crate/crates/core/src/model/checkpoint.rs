//! Binary tensor files: magic, version, JSON header, little-endian `f32` data.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::config::ModelConfig;
use super::optim::{AdamW, AdamWConfig};
use super::params::ParamSet;
use super::tensor::Matrix;
use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};

pub const MAGIC: &[u8; 8] = b"MTRECIPE";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct FileHeader {
    kind: String,
    header: Value,
    tensors: Vec<TensorEntry>,
}

/// Named `f32` tensors plus a free-form JSON header.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub header: Value,
    pub tensors: Vec<(String, Matrix<f32>)>,
}

impl TensorFile {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let head = FileHeader {
            kind: self.kind.clone(),
            header: self.header.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let head = serde_json::to_vec(&head)?;
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(fs::File::create(path).map_err(io)?);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&head).map_err(io)?;
        for (_, t) in &self.tensors {
            for v in &t.data {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |m: &str| Error::Checkpoint(format!("{}: {m}", path.display()));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let hend = 20usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let head: FileHeader = serde_json::from_slice(&bytes[20..hend])?;
        let mut off = hend;
        let mut tensors = Vec::with_capacity(head.tensors.len());
        for e in head.tensors {
            let n = e.rows * e.cols;
            let end = off + 4 * n;
            if end > bytes.len() {
                return Err(bad(&format!("truncated tensor {}", e.name)));
            }
            let data = bytes[off..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name, Matrix::from_vec(e.rows, e.cols, data)));
            off = end;
        }
        if off != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(TensorFile {
            kind: head.kind,
            header: head.header,
            tensors,
        })
    }
}

/// Model weights with optional adapter, optimizer, and trainer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamSet<f32>,
    pub adapter: Option<LoraAdapter<f32>>,
    pub optimizer: Option<AdamW>,
    /// Trainer progress and RNG bookkeeping, opaque to this module.
    pub trainer: Option<Value>,
}

impl Checkpoint {
    pub fn weights(params: ParamSet<f32>) -> Self {
        Checkpoint {
            params,
            adapter: None,
            optimizer: None,
            trainer: None,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors: Vec<(String, Matrix<f32>)> = self
            .params
            .tensors()
            .into_iter()
            .map(|(n, t)| (format!("param.{n}"), t.clone()))
            .collect();
        if let Some(a) = &self.adapter {
            tensors.extend(a.tensors().into_iter().map(|(n, t)| (format!("adapter.{n}"), t.clone())));
        }
        if let Some(o) = &self.optimizer {
            for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
                tensors.push((format!("opt.m.{i}"), m.clone()));
                tensors.push((format!("opt.v.{i}"), v.clone()));
            }
        }
        let header = serde_json::json!({
            "model": self.params.config,
            "lora": self.adapter.as_ref().map(|a| &a.config),
            "optimizer": self.optimizer.as_ref().map(|o| serde_json::json!({
                "config": o.config,
                "step": o.step,
                "slots": o.m.len(),
            })),
            "trainer": self.trainer,
        });
        TensorFile {
            kind: "checkpoint".into(),
            header,
            tensors,
        }
        .save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = TensorFile::load(path)?;
        if file.kind != "checkpoint" {
            return Err(Error::Checkpoint(format!("expected checkpoint, found {}", file.kind)));
        }
        let config: ModelConfig = serde_json::from_value(file.header["model"].clone())?;
        let mut by_name: std::collections::HashMap<String, Matrix<f32>> =
            file.tensors.into_iter().collect();
        let mut take = |key: String| {
            by_name
                .remove(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))
        };
        let mut params = ParamSet::<f32>::init(&config)?;
        for (n, t) in params.tensors_mut() {
            let loaded = take(format!("param.{n}"))?;
            if loaded.shape() != t.shape() {
                return Err(Error::Checkpoint(format!("shape mismatch for {n}")));
            }
            *t = loaded;
        }
        let adapter = match file.header.get("lora").filter(|v| !v.is_null()) {
            Some(v) => {
                let cfg: LoraConfig = serde_json::from_value(v.clone())?;
                let mut a = LoraAdapter::new(&params, &cfg)?;
                for (n, t) in a.tensors_mut() {
                    *t = take(format!("adapter.{n}"))?;
                }
                Some(a)
            }
            None => None,
        };
        let optimizer = match file.header.get("optimizer").filter(|v| !v.is_null()) {
            Some(v) => {
                let cfg: AdamWConfig = serde_json::from_value(v["config"].clone())?;
                let slots = v["slots"].as_u64().unwrap_or(0) as usize;
                let mut o = AdamW::new(cfg);
                o.step = v["step"].as_u64().unwrap_or(0);
                for i in 0..slots {
                    o.m.push(take(format!("opt.m.{i}"))?);
                    o.v.push(take(format!("opt.v.{i}"))?);
                }
                Some(o)
            }
            None => None,
        };
        let trainer = file.header.get("trainer").filter(|v| !v.is_null()).cloned();
        Ok(Checkpoint {
            params,
            adapter,
            optimizer,
            trainer,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::forward;

    #[test]
    fn save_load_forward_bit_exact() {
        let p = ParamSet::<f32>::init(&ModelConfig::tiny(280, 16)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.m.push(Matrix::filled(2, 2, 0.5));
        opt.v.push(Matrix::filled(2, 2, 0.25));
        opt.step = 7;
        let ck = Checkpoint {
            params: p.clone(),
            adapter: None,
            optimizer: Some(opt),
            trainer: Some(serde_json::json!({"epoch": 1})),
        };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let toks = [1u32, 2, 3, 4];
        assert_eq!(forward(&back.params, &toks).unwrap(), forward(&p, &toks).unwrap());
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
