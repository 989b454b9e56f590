//! Binary checkpoint of model parameters and optimizer state.
//!
//! Layout, little endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `RSTBCKPT` |
//! | 4     | format version (`u32`) |
//! | 8     | header length `n` (`u64`) |
//! | n     | UTF-8 JSON header |
//! | rest  | `f64` payload |
//!
//! The header holds the model config, training position, and one entry per
//! tensor section (`params`, `m`, optional `v` and `h`), each listing tensor
//! names and shapes in flat parameter order. The payload is the concatenation
//! of every tensor's data in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{OptimizerKind, OptimizerState};
use crate::params::ParamTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RSTBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    optimizer: OptimizerKind,
    step: u64,
    last_hessian_step: Option<u64>,
    rst_consumed: f64,
    names: Vec<String>,
    sections: Vec<Section>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    shapes: Vec<Vec<usize>>,
}

/// Everything needed to resume or inspect a run.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f64>,
    pub state: OptimizerState<f64>,
    pub rst_consumed: f64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut trees: Vec<(&str, &ParamTree<Tensor<f64>>)> =
            vec![("params", &self.params.tensors), ("m", &self.state.m)];
        if let Some(v) = &self.state.v {
            trees.push(("v", v));
        }
        if let Some(h) = &self.state.h {
            trees.push(("h", h));
        }
        let header = Header {
            config: self.params.config,
            optimizer: self.state.kind,
            step: self.state.step,
            last_hessian_step: self.state.last_hessian_step,
            rst_consumed: self.rst_consumed,
            names: self.params.names(),
            sections: trees
                .iter()
                .map(|(name, t)| Section {
                    name: (*name).into(),
                    shapes: t.iter().map(|x| x.shape().to_vec()).collect(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Parse(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in trees {
            for x in t.iter().flat_map(|t| t.data()) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json = bytes.get(20..20 + n).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| bad(&e.to_string()))?;
        let mut payload = bytes[20 + n..].chunks_exact(8);
        if payload.len() * 8 != bytes.len() - 20 - n {
            return Err(bad("payload is not a whole number of f64 values"));
        }

        let layout = crate::model::init_layout(&header.config)?;
        let mut read_tree = |name: &str| -> Result<Option<ParamTree<Tensor<f64>>>> {
            let Some(sec) = header.sections.iter().find(|s| s.name == name) else {
                return Ok(None);
            };
            if !sec.shapes.iter().eq(layout.iter()) {
                return Err(bad(&format!("section {name} shapes do not match the model config")));
            }
            let mut tensors = Vec::with_capacity(sec.shapes.len());
            for shape in &sec.shapes {
                let len: usize = shape.iter().product();
                let data: Option<Vec<f64>> = (0..len)
                    .map(|_| {
                        payload
                            .next()
                            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                    })
                    .collect();
                tensors.push(Tensor::new(
                    shape.clone(),
                    data.ok_or_else(|| bad("truncated payload"))?,
                )?);
            }
            Ok(layout.with_layout_of(tensors))
        };
        let mut sections = Vec::new();
        for s in &header.sections {
            sections.push((s.name.clone(), read_tree(&s.name)?));
        }
        if payload.next().is_some() {
            return Err(bad("trailing payload"));
        }
        let mut take = |name: &str| sections.iter_mut().find(|(n, _)| n == name).and_then(|(_, t)| t.take());
        let params = ModelParams {
            config: header.config,
            tensors: take("params").ok_or_else(|| bad("missing params"))?,
        };
        params.validate()?;
        if params.names() != header.names {
            return Err(bad("tensor names do not match the model layout"));
        }
        let state = OptimizerState {
            kind: header.optimizer,
            m: take("m").ok_or_else(|| bad("missing m"))?,
            v: take("v"),
            h: take("h"),
            step: header.step,
            last_hessian_step: header.last_hessian_step,
        };
        Ok(Self {
            params,
            state,
            rst_consumed: header.rst_consumed,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
