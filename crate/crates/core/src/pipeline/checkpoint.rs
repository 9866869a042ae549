//! Single-file checkpoints: safetensors with `param.*`, `buffer.*` and
//! `optim.momentum.*` tensors plus JSON metadata entries.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sgd, TrainConfig};
use crate::crnet::{CrNet, CrNetConfig};
use crate::data::write_atomic;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "scribble-cod-ckpt/1";

const PARAM: &str = "param.";
const BUFFER: &str = "buffer.";
const MOMENTUM: &str = "optim.momentum.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    /// Augmentation stream state at `step`.
    pub rng_state: ChaCha8Rng,
    pub config_hash: String,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub config: TrainConfig,
    pub net_config: CrNetConfig,
    tensors: HashMap<String, Tensor>,
}

fn ckpt_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save_checkpoint(path: &Path, net: &CrNet, optimizer: &Sgd, config: &TrainConfig, meta: &CheckpointMeta) -> Result<()> {
    let store = net.store();
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (name, var) in store.params() {
        tensors.push((format!("{PARAM}{name}"), var.as_tensor().clone()));
    }
    for (name, buf) in store.buffers() {
        tensors.push((format!("{BUFFER}{name}"), buf.lock().expect("buffer lock").clone()));
    }
    for (name, v) in optimizer.state(store) {
        tensors.push((format!("{MOMENTUM}{name}"), v));
    }
    let mut info = HashMap::new();
    info.insert("format".to_string(), CHECKPOINT_FORMAT.to_string());
    info.insert("net_config".to_string(), serde_json::to_string(net.config())?);
    info.insert("train_config".to_string(), serde_json::to_string(config)?);
    info.insert("meta".to_string(), serde_json::to_string(meta)?);
    let bytes = safetensors::serialize(tensors, Some(info)).map_err(|e| ckpt_err(path, e))?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| ckpt_err(path, "no metadata"))?;
    let field = |key: &str| {
        info.get(key)
            .ok_or_else(|| ckpt_err(path, format!("missing `{key}` entry")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(ckpt_err(path, format!("unsupported format `{}`", field("format")?)));
    }
    let meta: CheckpointMeta = serde_json::from_str(field("meta")?)?;
    let config: TrainConfig = serde_json::from_str(field("train_config")?)?;
    let net_config: CrNetConfig = serde_json::from_str(field("net_config")?)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device).map_err(|e| ckpt_err(path, e))?;
    Ok(Checkpoint {
        meta,
        config,
        net_config,
        tensors,
    })
}

impl Checkpoint {
    /// Rebuilds the network and overwrites every parameter and buffer.
    pub fn restore_net(&self, dtype: DType, device: &Device) -> Result<CrNet> {
        let config = CrNetConfig {
            pretrained: None,
            ..self.net_config.clone()
        };
        let net = CrNet::new(config, dtype, device)?;
        let store = net.store();
        let names = store
            .params()
            .iter()
            .map(|(n, _)| (PARAM, n))
            .chain(store.buffers().iter().map(|(n, _)| (BUFFER, n)));
        for (prefix, name) in names {
            let key = format!("{prefix}{name}");
            let t = self
                .tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks `{key}`")))?;
            store.assign(name, t)?;
        }
        Ok(net)
    }

    /// Optimizer with the saved momentum buffers.
    pub fn restore_optimizer(&self, net: &CrNet, momentum: f64, weight_decay: f64) -> Result<Sgd> {
        let mut sgd = Sgd::new(net.store(), momentum, weight_decay);
        for (key, t) in &self.tensors {
            if let Some(name) = key.strip_prefix(MOMENTUM) {
                sgd.set_state(net.store(), name, t.clone())?;
            }
        }
        Ok(sgd)
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }
}
