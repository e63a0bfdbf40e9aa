//! Versioned binary checkpoints.
//!
//! ```text
//! "ALTCKPT1" | u32 version | u32 manifest_len | manifest (UTF-8)
//!            | tensors as f32, in manifest order | u64 bytes-before-footer
//! ```
//!
//! The manifest is line oriented: `key = value` settings for the model
//! config, optimizer hyper-parameters and free-form metadata, a SHA-256 of
//! the tensor section, and one `tensor <section>/<name> <d0>x<d1>...` line per
//! stored tensor.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::corpus_io::write_atomic;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TagNet};
use crate::nn::ParamRegistry;
use crate::optim::{AdadeltaConfig, AdadeltaState};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ALTCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAIN: &str = "main";
const DISC: &str = "disc";
const OPT_SECTIONS: [&str; 4] = [
    "opt_main.sq_grad",
    "opt_main.sq_delta",
    "opt_disc.sq_grad",
    "opt_disc.sq_delta",
];

/// A trained network with both optimizer states and run metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: TagNet,
    pub opt_main: AdadeltaState,
    pub opt_disc: AdadeltaState,
    pub meta: Vec<(String, String)>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Errors if the network does not fit a corpus of `vocab_size` tags and
    /// `feature_dim` features.
    pub fn check_compatible(&self, vocab_size: usize, feature_dim: usize) -> Result<()> {
        let c = self.model.config();
        if c.vocab_size != vocab_size || c.feature_dim != feature_dim {
            return Err(Error::dim(format!(
                "checkpoint expects N={} and d_in={}, corpus has N={vocab_size} and d_in={feature_dim}",
                c.vocab_size, c.feature_dim
            )));
        }
        Ok(())
    }
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn check_meta(key: &str, value: &str) -> Result<()> {
    let bad = |s: &str| s.is_empty() || s.contains(['\n', '\r']) || s.contains(" = ");
    if bad(key) || key.contains(' ') || value.contains(['\n', '\r']) {
        return Err(Error::contract(format!("invalid checkpoint metadata `{key}`")));
    }
    Ok(())
}

/// Serializes a checkpoint to bytes. Parameters and accumulators are stored
/// as f32.
pub fn encode_checkpoint(
    model: &TagNet,
    opt_main: &AdadeltaState,
    opt_disc: &AdadeltaState,
    meta: &[(String, String)],
) -> Result<Vec<u8>> {
    for (opt, reg, what) in [(opt_main, &model.main, "main"), (opt_disc, &model.disc, "discriminator")] {
        if opt.names() != reg.names() {
            return Err(Error::contract(format!("{what} optimizer state does not match its parameters")));
        }
    }
    let mut manifest = String::new();
    for (k, v) in model.config().to_kv() {
        manifest.push_str(&format!("model.{k} = {v}\n"));
    }
    for (name, opt) in [("opt_main", opt_main), ("opt_disc", opt_disc)] {
        let AdadeltaConfig { rho, epsilon, lr } = opt.config;
        manifest.push_str(&format!("{name}.rho = {rho:?}\n{name}.epsilon = {epsilon:?}\n{name}.lr = {lr:?}\n"));
    }
    for (k, v) in meta {
        check_meta(k, v)?;
        manifest.push_str(&format!("meta.{k} = {v}\n"));
    }

    let mut tensors = Vec::new();
    let mut lines = String::new();
    for (section, reg) in [(MAIN, &model.main), (DISC, &model.disc)] {
        for (name, t) in reg.iter() {
            lines.push_str(&format!("tensor {section}/{name} {}\n", dims(t.shape())));
            push_f32(&mut tensors, t.data());
        }
    }
    let opt_parts = [opt_main.sq_grad(), opt_main.sq_delta(), opt_disc.sq_grad(), opt_disc.sq_delta()];
    for (section, part) in OPT_SECTIONS.iter().zip(opt_parts) {
        let reg = if section.starts_with("opt_main") { &model.main } else { &model.disc };
        for ((name, t), values) in reg.iter().zip(part) {
            lines.push_str(&format!("tensor {section}/{name} {}\n", dims(t.shape())));
            push_f32(&mut tensors, values);
        }
    }
    manifest.push_str(&format!("tensor_checksum = {}\n", hex(&Sha256::digest(&tensors))));
    manifest.push_str(&lines);

    let mut out = Vec::with_capacity(16 + manifest.len() + tensors.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    out.extend_from_slice(&tensors);
    let body_len = out.len() as u64;
    out.extend_from_slice(&body_len.to_le_bytes());
    Ok(out)
}

pub fn save_checkpoint(
    path: &Path,
    model: &TagNet,
    opt_main: &AdadeltaState,
    opt_disc: &AdadeltaState,
    meta: &[(String, String)],
) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model, opt_main, opt_disc, meta)?)
}

struct TensorEntry {
    section: String,
    name: String,
    shape: Vec<usize>,
}

fn parse_entry(line: &str) -> Result<TensorEntry> {
    let bad = || Error::Format(format!("malformed tensor line `{line}`"));
    let mut parts = line.split(' ');
    let (_, path, shape) = (parts.next(), parts.next().ok_or_else(bad)?, parts.next().ok_or_else(bad)?);
    if parts.next().is_some() {
        return Err(bad());
    }
    let (section, name) = path.split_once('/').ok_or_else(bad)?;
    let shape = shape
        .split('x')
        .map(|d| d.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TensorEntry {
        section: section.to_string(),
        name: name.to_string(),
        shape,
    })
}

fn optimizer_config(settings: &[(String, String)], prefix: &str) -> Result<AdadeltaConfig> {
    let get = |k: &str| -> Result<f64> {
        let key = format!("{prefix}.{k}");
        settings
            .iter()
            .find(|(name, _)| *name == key)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks `{key}`")))?
            .1
            .parse()
            .map_err(|_| Error::Format(format!("bad value for `{key}`")))
    };
    Ok(AdadeltaConfig {
        rho: get("rho")?,
        epsilon: get("epsilon")?,
        lr: get("lr")?,
    })
}

/// Parses and verifies checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    if bytes.len() < 24 {
        return Err(Error::Integrity("checkpoint truncated".into()));
    }
    let footer = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    if footer != (bytes.len() - 8) as u64 {
        return Err(Error::Integrity(format!(
            "checkpoint length {} does not match footer {footer}",
            bytes.len() - 8
        )));
    }
    let body = &bytes[..bytes.len() - 8];
    let manifest_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
    if 16 + manifest_len > body.len() {
        return Err(Error::Integrity("checkpoint manifest truncated".into()));
    }
    let manifest = std::str::from_utf8(&body[16..16 + manifest_len])
        .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
    let tensor_bytes = &body[16 + manifest_len..];

    let mut settings = Vec::new();
    let mut entries = Vec::new();
    for line in manifest.lines() {
        if line.starts_with("tensor ") {
            entries.push(parse_entry(line)?);
        } else {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| Error::Format(format!("malformed manifest line `{line}`")))?;
            settings.push((k.to_string(), v.to_string()));
        }
    }

    let expected: usize = entries.iter().map(|e| e.shape.iter().product::<usize>() * 4).sum();
    if expected != tensor_bytes.len() {
        return Err(Error::Integrity(format!(
            "tensor section has {} bytes, manifest describes {expected}",
            tensor_bytes.len()
        )));
    }
    let checksum = settings
        .iter()
        .find(|(k, _)| k == "tensor_checksum")
        .ok_or_else(|| Error::Format("checkpoint manifest lacks a tensor checksum".into()))?;
    if checksum.1 != hex(&Sha256::digest(tensor_bytes)) {
        return Err(Error::Integrity("tensor section checksum mismatch".into()));
    }

    let mut config = ModelConfig::new(0, 0);
    let mut meta = Vec::new();
    for (k, v) in &settings {
        if let Some(key) = k.strip_prefix("model.") {
            config.set(key, v).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        } else if let Some(key) = k.strip_prefix("meta.") {
            meta.push((key.to_string(), v.clone()));
        }
    }
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;

    let mut pos = 0;
    let mut main = Vec::new();
    let mut disc = Vec::new();
    let mut opt: [Vec<(String, Vec<f64>)>; 4] = Default::default();
    for e in entries {
        let n: usize = e.shape.iter().product();
        let values: Vec<f64> = tensor_bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        pos += 4 * n;
        match e.section.as_str() {
            MAIN => main.push((e.name, Tensor::new(e.shape, values)?)),
            DISC => disc.push((e.name, Tensor::new(e.shape, values)?)),
            s => {
                let i = OPT_SECTIONS
                    .iter()
                    .position(|o| *o == s)
                    .ok_or_else(|| Error::Format(format!("unknown checkpoint section `{s}`")))?;
                opt[i].push((e.name, values));
            }
        }
    }

    let model = TagNet::with_params(config, &main, &disc)?;
    let [mg, md, dg, dd] = opt;
    let opt_main = restore_optimizer(&model.main, optimizer_config(&settings, "opt_main")?, mg, md)?;
    let opt_disc = restore_optimizer(&model.disc, optimizer_config(&settings, "opt_disc")?, dg, dd)?;
    Ok(Checkpoint {
        model,
        opt_main,
        opt_disc,
        meta,
    })
}

fn restore_optimizer(
    registry: &ParamRegistry,
    config: AdadeltaConfig,
    sq_grad: Vec<(String, Vec<f64>)>,
    sq_delta: Vec<(String, Vec<f64>)>,
) -> Result<AdadeltaState> {
    let names: Vec<String> = sq_grad.iter().map(|(n, _)| n.clone()).collect();
    let delta_names: Vec<&String> = sq_delta.iter().map(|(n, _)| n).collect();
    if names.as_slice() != registry.names() || !names.iter().eq(delta_names) {
        return Err(Error::Format("optimizer state does not match the model parameters".into()));
    }
    AdadeltaState::from_parts(
        config,
        names,
        sq_grad.into_iter().map(|(_, v)| v).collect(),
        sq_delta.into_iter().map(|(_, v)| v).collect(),
    )
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
