//! Binary checkpoints.
//!
//! ```text
//! bytes 0..8    magic "MDDAFRM1"
//! bytes 8..16   header length L, u64 little-endian
//! next L bytes  JSON header: version, model config, training state, and
//!               the manifest of (name, shape) entries
//! rest          f32 little-endian arrays in manifest order
//! ```
//!
//! The manifest lists every parameter in store order, then `opt.m.<name>`
//! and `opt.v.<name>` for each parameter.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig};
use crate::tensor::Tensor;

use super::optim::{AdamW, OptState};
use super::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MDDAFRM1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: ModelConfig,
    step: u64,
    adamw: AdamW,
    #[serde(default)]
    train: Option<TrainConfig>,
    manifest: Vec<Entry>,
}

/// Everything restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub opt: OptState<f32>,
    /// Training configuration of the run that wrote the file, if recorded.
    pub train: Option<TrainConfig>,
}

/// Writes a checkpoint atomically: the bytes go to a sibling temporary file
/// which is then renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &Model<f32>, opt: &OptState<f32>, train: Option<&TrainConfig>) -> Result<()> {
    opt.check_matches(model.params())?;
    let mut manifest = Vec::new();
    let mut arrays: Vec<&Tensor<f32>> = Vec::new();
    for (_, name, t) in model.params().iter() {
        manifest.push(Entry { name: name.to_string(), shape: t.shape().to_vec() });
        arrays.push(t);
    }
    for (prefix, bufs) in [("opt.m.", &opt.m), ("opt.v.", &opt.v)] {
        for ((_, name, _), t) in model.params().iter().zip(bufs) {
            manifest.push(Entry { name: format!("{prefix}{name}"), shape: t.shape().to_vec() });
            arrays.push(t);
        }
    }
    let header = Header {
        version: VERSION,
        config: model.config().clone(),
        step: opt.step,
        adamw: opt.hyper,
        train: train.cloned(),
        manifest,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let payload: usize = arrays.iter().map(|t| t.numel() * 4).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + payload);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for t in arrays {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let err = |m: String| Error::Checkpoint(m);
    if bytes.len() < 16 {
        return Err(err(format!("file is {} bytes, too short for a header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(err("bad magic, not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if hlen > body.len() {
        return Err(err(format!("truncated header: {hlen} bytes declared, {} present", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| err(format!("malformed header: {e}")))?;
    if header.version != VERSION {
        return Err(err(format!("unsupported version {} (expected {VERSION})", header.version)));
    }

    let mut data = &body[hlen..];
    let mut tensors = Vec::with_capacity(header.manifest.len());
    for e in &header.manifest {
        let n: usize = e.shape.iter().product();
        let need = n * 4;
        if data.len() < need {
            return Err(err(format!("truncated data in entry {}", e.name)));
        }
        let vals = data[..need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push((e.name.clone(), Tensor::new(&e.shape, vals)?));
        data = &data[need..];
    }
    if !data.is_empty() {
        return Err(err(format!("{} trailing bytes after the last entry", data.len())));
    }

    let mut m = Vec::new();
    let mut v = Vec::new();
    let mut params = Vec::new();
    for (name, t) in tensors {
        if let Some(rest) = name.strip_prefix("opt.m.") {
            m.push((rest.to_string(), t));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v.push((rest.to_string(), t));
        } else {
            params.push((name, t));
        }
    }
    let model = Model::from_named(&header.config, params)?;
    let order = |bufs: Vec<(String, Tensor<f32>)>, which: &str| -> Result<Vec<Tensor<f32>>> {
        if bufs.len() != model.params().len() {
            return Err(err(format!(
                "{} {which} buffers for {} parameters",
                bufs.len(),
                model.params().len()
            )));
        }
        bufs.into_iter()
            .zip(model.params().iter())
            .map(|((name, t), (_, pname, p))| {
                if name != pname {
                    return Err(err(format!("optimizer entry {which}.{name} out of order, expected {pname}")));
                }
                if t.shape() != p.shape() {
                    return Err(err(format!(
                        "optimizer entry opt.{which}.{name}: expected shape {:?}, found {:?}",
                        p.shape(),
                        t.shape()
                    )));
                }
                Ok(t)
            })
            .collect()
    };
    let opt = OptState {
        hyper: header.adamw,
        step: header.step,
        m: order(m, "m")?,
        v: order(v, "v")?,
    };
    Ok(Checkpoint {
        model,
        opt,
        train: header.train,
    })
}
