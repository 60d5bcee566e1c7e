//! The assembled pipeline: vision encoder -> feature fusion -> projector ->
//! language model, plus the on-disk checkpoint container.
//!
//! Parameters fall into three groups by name prefix (`vision.`,
//! `projector.`, `lm.`); the training stages freeze and thaw whole groups.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::fusion::{fuse_canonical, FusionStrategy, Projector};
use crate::lm::{caption_loss, LMConfig, TokenSequence, ToyLm};
use crate::nn::{ParamBuilder, ParamStore, Parameter};
use crate::tensor::{dbft, Tensor};
use crate::vision::{EncoderConfig, ImageTensor, PromptTask, VisionEncoder};

pub const PARAM_GROUPS: [&str; 3] = ["vision", "projector", "lm"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub strategy: FusionStrategy,
    pub lm: LMConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()
    }

    /// Features per bundle: the depth feature plus one breadth feature per
    /// prompt task.
    pub fn k(&self) -> usize {
        1 + PromptTask::ALL.len()
    }

    /// Vision rows handed to the language model.
    pub fn vision_rows(&self) -> usize {
        match self.strategy {
            FusionStrategy::TokenIntegration => self.k() * self.encoder.n_v(),
            _ => self.encoder.n_v(),
        }
    }
}

#[derive(Debug)]
pub struct DbFusionModel {
    cfg: ModelConfig,
    pub encoder: VisionEncoder,
    pub projector: Projector,
    pub lm: ToyLm,
}

impl DbFusionModel {
    pub fn new(cfg: &ModelConfig, pb: &mut ParamBuilder) -> Result<DbFusionModel> {
        cfg.validate()?;
        let encoder = VisionEncoder::new(&cfg.encoder, pb)?;
        let c_in = cfg.strategy.fused_width(cfg.k(), cfg.encoder.d);
        let projector = Projector::new(pb, cfg.strategy, c_in, cfg.lm.d_model)?;
        let lm = ToyLm::new(&cfg.lm, pb)?;
        Ok(DbFusionModel { cfg: cfg.clone(), encoder, projector, lm })
    }

    pub fn seeded(cfg: &ModelConfig, seed: u64) -> Result<DbFusionModel> {
        DbFusionModel::new(cfg, &mut ParamBuilder::seeded(seed))
    }

    pub fn from_store(cfg: &ModelConfig, store: ParamStore) -> Result<DbFusionModel> {
        DbFusionModel::new(cfg, &mut ParamBuilder::restore(store))
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Encode, fuse with the full task set in canonical order, and project
    /// into the language model's width.
    pub fn embed_image(&self, image: &ImageTensor) -> Result<Tensor> {
        let tasks: BTreeSet<PromptTask> = PromptTask::ALL.into_iter().collect();
        let bundle = self.encoder.extract_bundle(image, &tasks)?;
        let fused = fuse_canonical(&bundle, self.cfg.strategy)?;
        self.projector.forward(&fused)
    }

    pub fn forward_logits(&self, image: &ImageTensor, text: &TokenSequence) -> Result<Tensor> {
        self.lm.forward(&self.embed_image(image)?, text)
    }

    pub fn forward_caption_loss(
        &self,
        image: &ImageTensor,
        text: &TokenSequence,
    ) -> Result<Tensor> {
        caption_loss(&self.forward_logits(image, text)?, text)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.encoder.collect_params(out);
        self.projector.collect_params(out);
        self.lm.collect_params(out);
    }

    pub fn params(&self) -> Vec<Parameter> {
        let mut out = Vec::new();
        self.collect_params(&mut out);
        out
    }

    pub fn store(&self) -> ParamStore {
        ParamStore::from_params(&self.params())
    }

    /// Freeze or thaw one named group; returns how many parameters changed
    /// mode. An unknown group is a config error.
    pub fn set_group_trainable(&self, group: &str, trainable: bool) -> Result<usize> {
        if !PARAM_GROUPS.contains(&group) {
            return Err(CoreError::Config(format!(
                "unknown parameter group {group:?}; expected one of {PARAM_GROUPS:?}"
            )));
        }
        let prefix = format!("{group}.");
        let mut n = 0;
        for p in self.params() {
            if p.name.starts_with(&prefix) {
                p.tensor.set_trainable(trainable);
                n += 1;
            }
        }
        Ok(n)
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DBFC";
const CKPT_VERSION: u8 = 0x01;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    stage: String,
    names: Vec<String>,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stage: String,
    pub store: ParamStore,
}

/// Single-file checkpoint: magic, version, u64 little-endian header length,
/// JSON header (config, stage tag, parameter names), then one DBFT blob per
/// parameter in header order. Values pass through the container's f32
/// payload, so saving the same store twice is byte-identical.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    stage: &str,
    store: &ParamStore,
) -> Result<()> {
    let names: Vec<String> = store.names().map(String::from).collect();
    let header =
        serde_json::to_vec(&CheckpointHeader { config: config.clone(), stage: stage.into(), names })?;
    let mut out = Vec::with_capacity(header.len() + 64);
    out.extend_from_slice(CKPT_MAGIC);
    out.push(CKPT_VERSION);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, (shape, data)) in store.iter() {
        out.extend_from_slice(&dbft::encode(&Tensor::new(shape, data.clone())?));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let at = |detail: String| CoreError::ingestion(path.display().to_string(), detail);
    let bytes = fs::read(path).map_err(|e| at(format!("checkpoint unreadable: {e}")))?;
    if bytes.len() < 13 || &bytes[0..4] != CKPT_MAGIC {
        return Err(at("not a checkpoint file".into()));
    }
    if bytes[4] != CKPT_VERSION {
        return Err(at(format!("unsupported checkpoint version 0x{:02x}", bytes[4])));
    }
    let header_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let body = 13 + header_len;
    if bytes.len() < body {
        return Err(at("header runs past the end of the file".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[13..body])
        .map_err(|e| at(format!("bad checkpoint header: {e}")))?;
    let mut store = ParamStore::new();
    let mut offset = body;
    for name in &header.names {
        let (tensor, used) = dbft::decode_prefix(&bytes[offset..])
            .map_err(|e| at(format!("parameter {name}: {e}")))?;
        store.insert(name, tensor.shape().to_vec(), tensor.data().to_vec());
        offset += used;
    }
    if offset != bytes.len() {
        return Err(at(format!("{} trailing bytes after the last parameter", bytes.len() - offset)));
    }
    Ok(Checkpoint { config: header.config, stage: header.stage, store })
}
