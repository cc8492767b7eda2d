//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `QATCKPT1`, the header length as a little-endian
//! `u64`, a JSON header, then a data section. The header lists every
//! parameter tensor (name, role, shape, byte offset) and every weight
//! quantizer (name, bit width, scale, byte offset of its codes). Parameters
//! are stored as little-endian `f64`, codes as `i8`; offsets count from the
//! start of the data section, whose SHA-256 is recorded in the header.

use std::path::Path;

use anyhow::{bail, ensure, Context};
use qat_core::models::{ParamRole, TinyLm};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::sha256_hex;

pub const MAGIC: &[u8; 8] = b"QATCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ExperimentConfig,
    alphabet: Vec<u8>,
    steps: usize,
    data_sha256: String,
    tensors: Vec<TensorEntry>,
    quantizers: Vec<QuantizerEntry>,
    frozen: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    role: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantizerEntry {
    name: String,
    bits: u32,
    scale: f64,
    shape: Vec<usize>,
    offset: usize,
}

fn role_name(role: ParamRole) -> &'static str {
    match role {
        ParamRole::Weight => "weight",
        ParamRole::Scale => "scale",
    }
}

/// A trained (or freshly initialised) model with the config and alphabet
/// needed to rebuild it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub alphabet: Vec<u8>,
    pub steps: usize,
    pub model: TinyLm<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> anyhow::Result<Vec<u8>> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        for p in self.model.params().iter() {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                role: role_name(p.role).into(),
                shape: p.value.shape().to_vec(),
                offset: data.len(),
            });
            p.value.data().iter().for_each(|v| data.extend_from_slice(&v.to_le_bytes()));
        }
        let mut quantizers = Vec::new();
        for q in self.model.export_codes()? {
            quantizers.push(QuantizerEntry {
                name: q.name,
                bits: q.bits,
                scale: q.scale,
                shape: q.shape,
                offset: data.len(),
            });
            data.extend(q.codes.iter().map(|&c| c as u8));
        }
        let header = Header {
            config: self.config.clone(),
            alphabet: self.alphabet.clone(),
            steps: self.steps,
            data_sha256: sha256_hex(&data),
            tensors,
            quantizers,
            frozen: self.model.frozen_layers(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> anyhow::Result<Self> {
        ensure!(bytes.len() >= 16 && &bytes[..8] == MAGIC, "corrupt checkpoint: bad magic");
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        ensure!(bytes.len() - 16 >= header_len, "corrupt checkpoint: truncated header");
        let header: Header =
            serde_json::from_slice(&bytes[16..16 + header_len]).context("corrupt checkpoint: unreadable header")?;
        let data = &bytes[16 + header_len..];
        ensure!(sha256_hex(data) == header.data_sha256, "corrupt checkpoint: data checksum mismatch");
        header.config.validate()?;

        let cfg = &header.config;
        let mut model = TinyLm::new(cfg.model_config(header.alphabet.len()), cfg.layout()?, &mut || 0.0)?;
        ensure!(
            header.tensors.len() == model.params().len(),
            "corrupt checkpoint: {} tensors, model has {}",
            header.tensors.len(),
            model.params().len()
        );
        for (p, entry) in model.params_mut().iter_mut().zip(&header.tensors) {
            ensure!(
                p.name == entry.name && role_name(p.role) == entry.role && p.value.shape() == entry.shape.as_slice(),
                "corrupt checkpoint: tensor {} does not match the configured model",
                entry.name
            );
            let n = p.value.len();
            let raw = data
                .get(entry.offset..)
                .and_then(|d| d.get(..8 * n))
                .context("corrupt checkpoint: tensor out of range")?;
            for (dst, chunk) in p.value.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
            }
        }
        model.set_frozen(&header.frozen);

        let codes = model.export_codes()?;
        ensure!(codes.len() == header.quantizers.len(), "corrupt checkpoint: quantizer count mismatch");
        for (q, entry) in codes.iter().zip(&header.quantizers) {
            let raw = data
                .get(entry.offset..)
                .and_then(|d| d.get(..q.codes.len()))
                .context("corrupt checkpoint: codes out of range")?;
            let stored: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
            if q.name != entry.name
                || q.bits != entry.bits
                || q.scale.to_bits() != entry.scale.to_bits()
                || stored != q.codes
            {
                bail!("corrupt checkpoint: codes of {} disagree with its weights", entry.name);
            }
        }
        Ok(Self { config: header.config, alphabet: header.alphabet, steps: header.steps, model })
    }

    pub fn save(&self, path: &Path) -> anyhow::Result<()> {
        std::fs::write(path, self.to_bytes()?).with_context(|| format!("cannot write checkpoint {}", path.display()))
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        Self::from_bytes(&bytes).with_context(|| format!("in {}", path.display()))
    }
}
