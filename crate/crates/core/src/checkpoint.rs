//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "TBGCKPT\0"
//! header_len   u64
//! header       header_len bytes of UTF-8 JSON
//! payload      f64 values, concatenated in header tensor order
//! ```
//!
//! The header carries `format_version`, `config_hash` (SHA-256 of the
//! model config JSON), the config itself, training metadata, tokenizer
//! settings and a `tensors` list of `{name, shape}`. Tensors are every model
//! parameter (canonical order), then `feature_maps.<layer>.omega`, then
//! `codebook`. Values are stored bit-exactly, so a round trip is lossless.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::RandomFeatureMap;
use crate::dataset::Tokenizers;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams, Param};
use crate::tokenizer::{Codebook, ReportVocab};

pub const MAGIC: &[u8; 8] = b"TBGCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub epoch: usize,
    pub step: usize,
    pub seed: u64,
    pub train_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub tokenizers: Tokenizers,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config_hash: String,
    config: ModelConfig,
    meta: TrainingMeta,
    words: Vec<String>,
    patch: usize,
    image_side: usize,
    feature_seeds: Vec<u64>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        let model = &self.model;
        let mut tensors: Vec<(String, Vec<usize>, &[f64])> = model
            .params
            .named()
            .into_iter()
            .map(|(n, p)| (n, p.shape.clone(), p.data.as_slice()))
            .collect();
        for (l, map) in model.feature_maps.iter().enumerate() {
            tensors.push((format!("feature_maps.{l}.omega"), vec![map.m, map.d], &map.omega));
        }
        let cb = &self.tokenizers.codebook;
        tensors.push(("codebook".into(), vec![cb.k, cb.dim], &cb.entries));
        let header = Header {
            format_version: FORMAT_VERSION,
            config_hash: model.config.hash(),
            config: model.config.clone(),
            meta: self.meta.clone(),
            words: self.tokenizers.words.words().to_vec(),
            patch: self.tokenizers.patch,
            image_side: self.tokenizers.image_side,
            feature_seeds: model.feature_maps.iter().map(|m| m.seed).collect(),
            tensors: tensors
                .iter()
                .map(|(n, s, _)| TensorEntry {
                    name: n.clone(),
                    shape: s.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let mut buf = Vec::new();
        for (_, _, data) in &tensors {
            buf.clear();
            buf.extend(data.iter().flat_map(|v| v.to_le_bytes()));
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(corrupt("bad magic; not a checkpoint file"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(corrupt(format!("implausible header length {len}")));
        }
        let mut json = vec![0u8; len];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        if header.format_version != FORMAT_VERSION {
            return Err(corrupt(format!(
                "format version {} is not supported (expected {FORMAT_VERSION})",
                header.format_version
            )));
        }
        if header.config.hash() != header.config_hash {
            return Err(corrupt("config hash does not match the stored config"));
        }
        let mut read_tensor = |entry: &TensorEntry| -> Result<Vec<f64>> {
            let n: usize = entry.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            input
                .read_exact(&mut bytes)
                .map_err(|e| corrupt(format!("tensor {}: {e}", entry.name)))?;
            Ok(bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect())
        };

        let cfg = header.config.clone();
        let reference = ModelParams::init(&cfg)?;
        let expected = reference.named();
        let n_layers = cfg.n_layers;
        if header.tensors.len() != expected.len() + n_layers + 1 || header.feature_seeds.len() != n_layers {
            return Err(corrupt("tensor list does not match the stored config"));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, p), entry) in expected.iter().zip(&header.tensors) {
            if *name != entry.name || p.shape != entry.shape {
                return Err(corrupt(format!(
                    "expected tensor {name} {:?}, found {} {:?}",
                    p.shape, entry.name, entry.shape
                )));
            }
            values.push(read_tensor(entry)?);
        }
        let mut values = values.into_iter();
        let params = reference.try_map(|_, p| {
            Ok(Param {
                shape: p.shape.clone(),
                data: values.next().expect("one value per tensor"),
            })
        })?;
        let mut feature_maps = Vec::with_capacity(n_layers);
        for (l, entry) in header.tensors[expected.len()..expected.len() + n_layers].iter().enumerate() {
            if entry.shape != [cfg.m_features, cfg.head_dim()] {
                return Err(corrupt(format!("feature map {l} has shape {:?}", entry.shape)));
            }
            feature_maps.push(RandomFeatureMap {
                omega: read_tensor(entry)?,
                m: cfg.m_features,
                d: cfg.head_dim(),
                seed: header.feature_seeds[l],
                orthogonal: cfg.orthogonal_features,
            });
        }
        let cb_entry = header.tensors.last().expect("non-empty tensor list");
        if cb_entry.name != "codebook" || cb_entry.shape.len() != 2 {
            return Err(corrupt("missing codebook tensor"));
        }
        let codebook = Codebook::new(read_tensor(cb_entry)?, cb_entry.shape[0], cb_entry.shape[1])?;
        let words = ReportVocab::new(header.words)?;
        if words.len() != cfg.vocab.words || codebook.k != cfg.vocab.image_codes {
            return Err(corrupt("tokenizer sizes do not match the model vocabulary"));
        }
        Ok(Self {
            model: Model {
                config: cfg,
                params,
                feature_maps,
            },
            tokenizers: Tokenizers {
                words,
                codebook,
                patch: header.patch,
                image_side: header.image_side,
            },
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}
