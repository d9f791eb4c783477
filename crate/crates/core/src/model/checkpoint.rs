//! Checkpoint file format.
//!
//! ```text
//! magic "RMCK" | version u32 | header length u32 | header JSON
//! tensor count u32
//! per tensor: name length u32 | UTF-8 name | rank u32 | dims u32[rank] | f32 payload
//! crc32 u32 over every byte after the magic
//! ```
//!
//! Optimizer moments, when present, follow the weights as `adam.m/<name>` and
//! `adam.v/<name>` tensors.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{predict, MetaModel, ParamStore, TransformerConfig};
use crate::datagen::NormalizationStats;
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: MetaModel,
    /// Dataset statistics the model was trained under.
    pub stats: NormalizationStats,
    /// Context length used during training; longer test contexts are rejected.
    pub train_context: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub optimizer: Option<Adam>,
    /// Statistics fingerprint of the checkpoint this one was fine-tuned from.
    pub parent_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TransformerConfig,
    stats: NormalizationStats,
    fingerprint: String,
    train_context: usize,
    step: u64,
    adam: Option<AdamHeader>,
    parent_fingerprint: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

impl Checkpoint {
    pub fn new(model: MetaModel, stats: NormalizationStats, train_context: usize) -> Self {
        Checkpoint {
            model,
            stats,
            train_context,
            step: 0,
            optimizer: None,
            parent_fingerprint: None,
        }
    }

    pub fn fingerprint(&self) -> String {
        self.stats.fingerprint()
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.model.config
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if !self.model.params.all_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        let header = Header {
            config: self.model.config.clone(),
            stats: self.stats.clone(),
            fingerprint: self.fingerprint(),
            train_context: self.train_context,
            step: self.step,
            adam: self.optimizer.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
            parent_fingerprint: self.parent_fingerprint.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let params = &self.model.params;
        let mut tensors: Vec<(String, &Tensor)> =
            params.names().iter().cloned().zip(params.tensors()).collect();
        if let Some(adam) = &self.optimizer {
            for (prefix, bufs) in [("adam.m/", &adam.m), ("adam.v/", &adam.v)] {
                tensors.extend(params.names().iter().map(|n| format!("{prefix}{n}")).zip(bufs.iter()));
            }
        }

        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&json);
        buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&buf[4..]);
        buf.extend_from_slice(&crc.to_le_bytes());
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Format("missing RMCK magic".into()));
        }
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let mut r = Cursor { bytes: body, pos: 4 };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let computed = crc32fast::hash(&body[4..]);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let json_len = r.u32()? as usize;
        let header: Header = serde_json::from_slice(r.take(json_len)?)?;
        header.config.validate()?;
        if header.fingerprint != header.stats.fingerprint() {
            return Err(Error::Format("header fingerprint does not match its statistics".into()));
        }
        let count = r.u32()? as usize;
        let mut named = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            named.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} unread bytes before checksum", body.len() - r.pos)));
        }
        let n_params = header.config.param_shapes().len();
        let expected = if header.adam.is_some() { 3 * n_params } else { n_params };
        if named.len() != expected {
            return Err(Error::Format(format!("expected {expected} tensors, found {}", named.len())));
        }
        let moments = named.split_off(n_params);
        let params = ParamStore::from_named(&header.config, named)?;
        if !params.all_finite() {
            return Err(Error::NonFinite("checkpoint weights".into()));
        }
        let optimizer = match header.adam {
            Some(AdamHeader { config, step }) => {
                let mut m = Vec::with_capacity(n_params);
                let mut v = Vec::with_capacity(n_params);
                for (i, (name, t)) in moments.into_iter().enumerate() {
                    let (prefix, dst) = if i < n_params { ("adam.m/", &mut m) } else { ("adam.v/", &mut v) };
                    let want = format!("{prefix}{}", params.names()[i % n_params]);
                    if name != want || t.shape() != params.tensors()[i % n_params].shape() {
                        return Err(Error::Format(format!("optimizer tensor '{name}' where '{want}' was expected")));
                    }
                    dst.push(t);
                }
                Some(Adam { config, step, m, v })
            }
            None => None,
        };
        Ok(Checkpoint {
            model: MetaModel {
                config: header.config,
                params,
            },
            stats: header.stats,
            train_context: header.train_context,
            step: header.step,
            optimizer,
            parent_fingerprint: header.parent_fingerprint,
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n + 4,
                found: self.bytes.len() + 4,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::decode(&fs::read(path)?)
}

/// Predictions in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    /// `[K × n_y]` row-major outputs.
    pub y: Vec<f64>,
    pub steps: usize,
    /// Set when the caller's dataset statistics differ from the checkpoint's.
    pub warning: Option<String>,
}

/// Runs the model on raw (physical-unit) context and query rows, given as
/// row-major `[m × n_u]`, `[m × n_y]` and `[K × n_u]` slices.
pub fn simulate(
    ckpt: &Checkpoint,
    u_ctx: &[f32],
    y_ctx: &[f32],
    u_query: &[f32],
    dataset_fingerprint: Option<&str>,
) -> Result<Simulation> {
    let cfg = ckpt.config();
    let (n_u, n_y) = (cfg.n_u, cfg.n_y);
    if u_ctx.len() % n_u != 0 || y_ctx.len() % n_y != 0 || u_query.len() % n_u != 0 {
        return Err(Error::Dimension {
            what: "simulate inputs",
            expected: n_u,
            actual: u_ctx.len() % n_u.max(1),
        });
    }
    let (m, k) = (u_ctx.len() / n_u, u_query.len() / n_u);
    if y_ctx.len() / n_y != m {
        return Err(Error::Dimension {
            what: "context output rows",
            expected: m,
            actual: y_ctx.len() / n_y,
        });
    }
    if m > ckpt.train_context {
        return Err(Error::Unsupported(format!(
            "test context of {m} steps exceeds the training context of {}",
            ckpt.train_context
        )));
    }
    let norm_rows = |rows: &[f32], dim: usize, is_u: bool| -> Vec<f32> {
        let mut out = Vec::with_capacity(rows.len());
        for row in rows.chunks(dim) {
            if is_u {
                ckpt.stats.normalize_u(row, &mut out);
            } else {
                ckpt.stats.normalize_y(row, &mut out);
            }
        }
        out
    };
    let uc = Tensor::new(vec![m, n_u], norm_rows(u_ctx, n_u, true))?;
    let yc = Tensor::new(vec![m, n_y], norm_rows(y_ctx, n_y, false))?;
    let uq = Tensor::new(vec![k, n_u], norm_rows(u_query, n_u, true))?;
    let pred = predict(&ckpt.model, &uc, &yc, &uq)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite("model prediction".into()));
    }
    let own = ckpt.fingerprint();
    let warning = dataset_fingerprint.filter(|fp| *fp != own).map(|fp| {
        format!("dataset statistics {fp} differ from the checkpoint's {own}; outputs use the checkpoint's")
    });
    Ok(Simulation {
        y: ckpt.stats.denormalize_y(pred.data()),
        steps: k,
        warning,
    })
}
