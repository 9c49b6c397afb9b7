//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` version, `u64` header length, a JSON
//! header (topology, attributes, parameter names and shapes, optimizer
//! hyperparameters), then every parameter tensor followed by the optimizer
//! moments as raw little-endian `f64`. Values round-trip bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::graph::{Node, Param};
use super::{AdamConfig, AdamState, Graph, GraphError, Tensor};

const MAGIC: &[u8; 8] = b"FDXCKPT\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
    moment_lengths: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    nodes: Vec<Node>,
    params: Vec<ParamMeta>,
    optimizer: Option<OptimizerMeta>,
    /// Free-form model metadata owned by the caller.
    metadata: serde_json::Value,
}

/// A graph, optional optimizer state and caller metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub graph: Graph,
    pub optimizer: Option<AdamState>,
    pub metadata: serde_json::Value,
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, GraphError> {
        let header = Header {
            nodes: self.graph.nodes().to_vec(),
            params: self
                .graph
                .params()
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                config: o.config,
                step: o.step,
                moment_lengths: o.m.iter().map(Vec::len).collect(),
            }),
            metadata: self.metadata.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| GraphError::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in self.graph.params() {
            put_f64s(&mut out, p.tensor.data());
        }
        if let Some(o) = &self.optimizer {
            for m in o.m.iter().chain(&o.v) {
                put_f64s(&mut out, m);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let bad = |msg: &str| GraphError::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(GraphError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| GraphError::Checkpoint(e.to_string()))?;
        let mut cursor = 20 + hlen;
        let mut take = |n: usize| -> Result<Vec<f64>, GraphError> {
            let end = cursor + n * 8;
            let raw = bytes.get(cursor..end).ok_or_else(|| bad("truncated tensor data"))?;
            cursor = end;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let mut params = Vec::with_capacity(header.params.len());
        for meta in header.params {
            let n = meta.shape.iter().product();
            let tensor = Tensor::new(meta.shape, take(n)?)?;
            params.push(Param {
                name: meta.name,
                tensor,
                trainable: meta.trainable,
            });
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                let m = o.moment_lengths.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                let v = o.moment_lengths.iter().map(|&n| take(n)).collect::<Result<Vec<_>, _>>()?;
                Some(AdamState {
                    config: o.config,
                    step: o.step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Checkpoint {
            graph: Graph::from_parts(header.nodes, params)?,
            optimizer,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), GraphError> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GraphError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
