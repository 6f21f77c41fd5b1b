use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::matcher::MatcherConfig;
use crate::tensor::{ParamSet, Tensor};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMeta {
    pub mode: Mode,
    pub epochs: usize,
    pub seed: u64,
}

/// Trained parameters together with the configuration needed to rebuild
/// the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderConfig,
    pub matcher: Option<MatcherConfig>,
    pub meta: TrainMeta,
    pub params: ParamSet,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StoredTensor {
    shape: [usize; 2],
    /// IEEE-754 bit patterns as 16 hex digits, row-major.
    values: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    encoder: EncoderConfig,
    matcher: Option<MatcherConfig>,
    meta: TrainMeta,
    params: BTreeMap<String, StoredTensor>,
}

fn encode_tensor(t: &Tensor) -> StoredTensor {
    StoredTensor {
        shape: [t.rows(), t.cols()],
        values: t.data().iter().map(|v| format!("{:016x}", v.to_bits())).collect(),
    }
}

fn decode_tensor(name: &str, s: StoredTensor) -> Result<Tensor> {
    let data = s
        .values
        .iter()
        .map(|h| {
            u64::from_str_radix(h, 16)
                .ok()
                .filter(|_| h.len() == 16)
                .map(f64::from_bits)
                .ok_or_else(|| Error::Checkpoint(format!("parameter `{name}`: bad value `{h}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::new(s.shape[0], s.shape[1], data)
        .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        let doc = Document {
            format_version: FORMAT_VERSION,
            encoder: self.encoder.clone(),
            matcher: self.matcher.clone(),
            meta: self.meta.clone(),
            params: self.params.iter().map(|(k, v)| (k.to_string(), encode_tensor(v))).collect(),
        };
        serde_json::to_string_pretty(&doc).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(FORMAT_VERSION) => {}
            Some(v) => return Err(Error::Checkpoint(format!("unsupported format version {v}"))),
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let doc: Document =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("parse error: {e}")))?;
        let mut params = ParamSet::new();
        for (name, stored) in doc.params {
            let t = decode_tensor(&name, stored)?;
            params.insert(name, t);
        }
        Ok(Self {
            encoder: doc.encoder,
            matcher: doc.matcher,
            meta: doc.meta,
            params,
        })
    }

    /// The parameters a downstream model needs.
    pub fn encoder_params(&self) -> ParamSet {
        self.params.subset(encoder::PREFIX)
    }

    pub fn check_dims(&self, node_dim: usize, edge_dim: usize) -> Result<()> {
        let c = &self.encoder;
        if (c.node_dim, c.edge_dim) != (node_dim, edge_dim) {
            return Err(Error::Config(format!(
                "checkpoint expects node/edge dims ({}, {}), dataset has ({node_dim}, {edge_dim})",
                c.node_dim, c.edge_dim
            )));
        }
        Ok(())
    }
}

/// Writes through a temporary sibling file so a crash never leaves a
/// half-written checkpoint behind.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, ckpt.to_json()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
