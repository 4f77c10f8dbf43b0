//! Little-endian binary checkpoints.
//!
//! Layout: magic `QSL1`; `u64` length plus a UTF-8 JSON header (format
//! version, step counter, run config, optional vocabulary); `u64` tensor
//! count; then per tensor a `u32` name length, the name bytes, a `u32` rank,
//! `u64` extents and the raw `f64` values. Parameters are stored under
//! `param/<name>`, optimizer moments under `adam.m/<name>` and `adam.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::optim::AdamW;
use crate::tensor::Tensor;
use crate::train::TrainState;

pub const MAGIC: &[u8; 4] = b"QSL1";
pub const FORMAT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam.m/";
const MOMENT2: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    version: u32,
    step: usize,
    config: RunConfig,
    vocabulary: Option<Vocabulary>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub vocabulary: Option<Vocabulary>,
    pub params: ParamStore,
    /// First and second moments, in parameter order.
    pub moments: Option<(Vec<Tensor>, Vec<Tensor>)>,
}

impl Checkpoint {
    pub fn from_state(
        state: &TrainState,
        config: &RunConfig,
        vocabulary: Option<Vocabulary>,
    ) -> Self {
        Self {
            config: config.clone(),
            step: state.optimizer.step,
            vocabulary,
            params: state.model.params.clone(),
            moments: Some((state.optimizer.m.clone(), state.optimizer.v.clone())),
        }
    }

    pub fn model(&self) -> Result<Model> {
        Model::with_params(self.config.model.clone(), self.params.clone())
    }

    /// Model plus optimizer, ready to resume; the loss log starts empty.
    pub fn into_state(self) -> Result<TrainState> {
        let model = self.model()?;
        let mut optimizer = AdamW::new(self.config.optim.clone(), &model.params);
        optimizer.step = self.step;
        if let Some((m, v)) = self.moments {
            // Moments follow the stored parameter order; `with_params` keeps names aligned.
            let order = |src: Vec<Tensor>| -> Result<Vec<Tensor>> {
                model
                    .params
                    .ids()
                    .map(|id| {
                        let k = self
                            .params
                            .id(model.params.name(id))
                            .expect("validated by with_params");
                        Ok(src[k.index()].clone())
                    })
                    .collect()
            };
            optimizer.m = order(m)?;
            optimizer.v = order(v)?;
        }
        Ok(TrainState {
            model,
            optimizer,
            log: Vec::new(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            step: self.step,
            config: self.config.clone(),
            vocabulary: self.vocabulary.clone(),
        };
        let blob = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);

        let mut entries: Vec<(String, &Tensor)> = self
            .params
            .iter()
            .map(|(n, t)| (format!("{PARAM}{n}"), t))
            .collect();
        if let Some((m, v)) = &self.moments {
            let names: Vec<&str> = self.params.iter().map(|(n, _)| n).collect();
            entries.extend(
                names
                    .iter()
                    .zip(m)
                    .map(|(n, t)| (format!("{MOMENT1}{n}"), t)),
            );
            entries.extend(
                names
                    .iter()
                    .zip(v)
                    .map(|(n, t)| (format!("{MOMENT2}{n}"), t)),
            );
        }
        out.extend_from_slice(&(entries.len() as u64).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let len = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                header.version
            )));
        }
        header.config.validate()?;
        let count = r.u64()? as usize;
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|e| e as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(8)
                    .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t =
                Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            if let Some(p) = name.strip_prefix(PARAM) {
                if params.id(p).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
                }
                params.add(p, t);
            } else if let Some(p) = name.strip_prefix(MOMENT1) {
                m.push((p.to_string(), t));
            } else if let Some(p) = name.strip_prefix(MOMENT2) {
                v.push((p.to_string(), t));
            } else {
                return Err(Error::Checkpoint(format!("unknown tensor {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        let moments = if m.is_empty() && v.is_empty() {
            None
        } else {
            let names: Vec<&str> = params.iter().map(|(n, _)| n).collect();
            let aligned = |list: &[(String, Tensor)]| {
                list.len() == names.len() && list.iter().zip(&names).all(|((a, _), b)| a == b)
            };
            if !aligned(&m) || !aligned(&v) {
                return Err(Error::Checkpoint(
                    "optimizer moments do not match the parameter list".into(),
                ));
            }
            Some((
                m.into_iter().map(|x| x.1).collect(),
                v.into_iter().map(|x| x.1).collect(),
            ))
        };
        Ok(Self {
            config: header.config,
            step: header.step,
            vocabulary: header.vocabulary,
            params,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
