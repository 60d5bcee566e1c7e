//! Two-stage training: full-model caption pretraining, then instruction
//! finetuning with the vision encoder frozen. Adam with a cosine
//! learning-rate schedule, seeded batch selection, and a run directory
//! holding config.json, losses.csv, and per-stage checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{CoreError, Result};
use crate::lm::{ByteTokenizer, TokenSequence};
use crate::model::{save_checkpoint, DbFusionModel, PARAM_GROUPS};
use crate::nn::ParamStore;
use crate::vision::ImageTensor;

/// Which half of the recipe a spec drives. The stage fixes which parameter
/// groups may move and how the resulting checkpoint is tagged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    /// Checkpoint tag embedded in the header and used for the file name.
    pub fn label(self) -> &'static str {
        match self {
            Stage::Pretrain => "stage1",
            Stage::Finetune => "stage2",
        }
    }

    /// Parameter groups that must be trainable in this stage: pretraining
    /// moves everything, finetuning freezes the vision encoder.
    pub fn required_groups(self) -> &'static [&'static str] {
        match self {
            Stage::Pretrain => &["vision", "projector", "lm"],
            Stage::Finetune => &["projector", "lm"],
        }
    }
}

/// Full recipe for one training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub stage: Stage,
    pub steps: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub trainable: BTreeSet<String>,
}

impl StageSpec {
    /// Stage-1 defaults: 2,000 steps, batch 16, cosine 3e-4 -> 0, all
    /// parameter groups trainable.
    pub fn pretrain() -> StageSpec {
        StageSpec::stage_defaults(Stage::Pretrain, 2000, 3e-4)
    }

    /// Stage-2 defaults: 1,000 steps, batch 16, cosine 1e-4 -> 0, vision
    /// encoder frozen.
    pub fn finetune() -> StageSpec {
        StageSpec::stage_defaults(Stage::Finetune, 1000, 1e-4)
    }

    fn stage_defaults(stage: Stage, steps: usize, lr_max: f64) -> StageSpec {
        StageSpec {
            stage,
            steps,
            batch: 16,
            lr_max,
            lr_min: 0.0,
            seed: 0,
            trainable: stage.required_groups().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        if !self.lr_max.is_finite() || !self.lr_min.is_finite() {
            return Err(CoreError::Config("learning rates must be finite".into()));
        }
        if self.lr_min < 0.0 || self.lr_max < self.lr_min {
            return Err(CoreError::Config(format!(
                "learning rates must satisfy 0 <= lr_min <= lr_max, got lr_min {} lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        let required: BTreeSet<String> =
            self.stage.required_groups().iter().map(|s| s.to_string()).collect();
        if self.trainable != required {
            return Err(CoreError::Config(format!(
                "{:?} stage must train exactly the groups {:?}, got {:?}",
                self.stage, required, self.trainable
            )));
        }
        Ok(())
    }
}

/// Learning rate at `step` of a cosine decay from `lr_max` (step 0) to
/// `lr_min` (final step). A single-step schedule stays at the peak rate.
pub fn cosine_lr(step: usize, spec: &StageSpec) -> Result<f64> {
    if step >= spec.steps {
        return Err(CoreError::argument(
            "cosine_lr",
            format!("step {step} outside a schedule of {} steps", spec.steps),
        ));
    }
    if spec.steps == 1 {
        return Ok(spec.lr_max);
    }
    let t = step as f64 / (spec.steps - 1) as f64;
    Ok(spec.lr_min + 0.5 * (spec.lr_max - spec.lr_min) * (1.0 + (PI * t).cos()))
}

/// Adam with bias correction, state keyed by parameter name so it survives
/// the per-step model rebuild. Names absent from `grads` (frozen groups)
/// are never touched, keeping their stored bytes identical.
#[derive(Debug, Default)]
pub struct Adam {
    t: u32,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    pub fn new() -> Adam {
        Adam::default()
    }

    /// Apply one update to every named gradient's entry in `store`.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads {
            let (shape, mut values) = store
                .get(name)
                .cloned()
                .ok_or_else(|| CoreError::Config(format!("gradient for unknown parameter {name:?}")))?;
            if values.len() != g.len() {
                return Err(CoreError::dimension(
                    "adam_step",
                    format!("parameter {name:?} has {} values but {} gradients", values.len(), g.len()),
                ));
            }
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            for i in 0..g.len() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                values[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
            }
            store.insert(name, shape, values);
        }
        Ok(())
    }
}

/// One training example: an image, the token sequence to score against it,
/// and a human-readable id used in abort diagnostics.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub image: ImageTensor,
    pub seq: TokenSequence,
}

/// An in-memory training corpus. Images are loaded eagerly; clones of one
/// record's image share storage.
#[derive(Clone, Debug)]
pub struct TrainSet {
    items: Vec<TrainItem>,
}

impl TrainSet {
    pub fn from_items(items: Vec<TrainItem>) -> TrainSet {
        TrainSet { items }
    }

    /// Caption pretraining corpus: one item per record, full-caption loss
    /// mask, id = record id.
    pub fn captions(records: &[DatasetRecord]) -> Result<TrainSet> {
        let mut items = Vec::with_capacity(records.len());
        for r in records {
            items.push(TrainItem {
                id: r.id.to_string(),
                image: r.load_image()?,
                seq: ByteTokenizer::caption_sequence(&r.caption)?,
            });
        }
        Ok(TrainSet { items })
    }

    /// Instruction finetuning corpus: records flattened to one item per
    /// question/answer pair, loss masked to the answer span, id =
    /// `record/pair`.
    pub fn instructions(records: &[DatasetRecord]) -> Result<TrainSet> {
        let mut items = Vec::new();
        for r in records {
            let image = r.load_image()?;
            for (k, ins) in r.instructions.iter().enumerate() {
                items.push(TrainItem {
                    id: format!("{}/{k}", r.id),
                    image: image.clone(),
                    seq: ByteTokenizer::instruction_sequence(&ins.question, &ins.answer)?,
                });
            }
        }
        Ok(TrainSet { items })
    }

    pub fn items(&self) -> &[TrainItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Indices of the batch drawn at `step`: a pure function of (seed, step),
/// so a run can be replayed or prepared concurrently without shared state.
pub fn batch_indices(seed: u64, step: usize, batch: usize, n: usize) -> Vec<usize> {
    assert!(n > 0, "batch_indices needs a nonempty training set");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

/// One logged optimizer step. `max_grad_norm` is the largest per-parameter
/// L2 gradient norm after batch averaging; it is checked finite every step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub max_grad_norm: f64,
}

/// What a completed stage leaves behind.
#[derive(Debug)]
pub struct StageReport {
    pub stage: Stage,
    pub log: Vec<StepRecord>,
    pub checkpoint: PathBuf,
}

/// A run directory: `config.json`, `losses.csv` (step,lr,loss), and
/// `checkpoints/stage{1,2}.dbft`. Stage 1 starts the loss log fresh;
/// stage 2 appends so a full two-stage run shares one file.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: impl AsRef<Path>) -> Result<RunDir> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(root.join("checkpoints"))?;
        Ok(RunDir { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn losses_path(&self) -> PathBuf {
        self.root.join("losses.csv")
    }

    pub fn checkpoint_path(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.dbft", stage.label()))
    }

    /// Persist the fully resolved run configuration as pretty JSON.
    pub fn write_config<T: Serialize>(&self, config: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(config)?;
        text.push('\n');
        fs::write(self.config_path(), text)?;
        Ok(())
    }

    fn write_losses(&self, stage: Stage, log: &[StepRecord]) -> Result<()> {
        let path = self.losses_path();
        let mut out = String::new();
        if stage == Stage::Pretrain || !path.exists() {
            out.push_str("step,lr,loss\n");
        }
        for r in log {
            out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(stage == Stage::Pretrain)
            .append(stage == Stage::Finetune)
            .open(&path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }
}

/// Stage 1: caption pretraining with every parameter group trainable.
/// Writes `checkpoints/stage1.dbft` and starts `losses.csv`. With steps=0
/// the checkpoint equals the model's initialization.
pub fn pretrain_stage(
    model: &mut DbFusionModel,
    data: &TrainSet,
    spec: &StageSpec,
    run: &RunDir,
) -> Result<StageReport> {
    if spec.stage != Stage::Pretrain {
        return Err(CoreError::Config(format!(
            "pretrain_stage needs a Pretrain spec, got {:?}",
            spec.stage
        )));
    }
    run_stage("pretrain_stage", model, data, spec, run)
}

/// Stage 2: instruction finetuning with the vision encoder frozen; the
/// caller starts from a stage-1 checkpoint. Loss falls only on answer
/// spans (the data's masks), vision bytes are untouched, and the cosine
/// schedule restarts. Writes `checkpoints/stage2.dbft` and appends to
/// `losses.csv`.
pub fn finetune_stage(
    model: &mut DbFusionModel,
    data: &TrainSet,
    spec: &StageSpec,
    run: &RunDir,
) -> Result<StageReport> {
    if spec.stage != Stage::Finetune {
        return Err(CoreError::Config(format!(
            "finetune_stage needs a Finetune spec, got {:?}",
            spec.stage
        )));
    }
    run_stage("finetune_stage", model, data, spec, run)
}

fn run_stage(
    entry: &'static str,
    model: &mut DbFusionModel,
    data: &TrainSet,
    spec: &StageSpec,
    run: &RunDir,
) -> Result<StageReport> {
    spec.validate()?;
    if spec.steps > 0 && data.is_empty() {
        return Err(CoreError::argument(entry, "training set is empty"));
    }

    let cfg = model.cfg().clone();
    let mut store = model.store();
    let mut adam = Adam::new();
    let mut log = Vec::with_capacity(spec.steps);

    for step in 0..spec.steps {
        let lr = cosine_lr(step, spec)?;
        // Parameter tensors are immutable once built, so each step rebuilds
        // the model from the store and Adam writes the update back into it.
        let live = DbFusionModel::from_store(&cfg, store.clone())?;
        for group in PARAM_GROUPS {
            live.set_group_trainable(group, spec.trainable.contains(group))?;
        }

        let ids = batch_indices(spec.seed, step, spec.batch, data.len());
        let mut total = 0.0;
        for &i in &ids {
            let item = &data.items[i];
            let loss = live.forward_caption_loss(&item.image, &item.seq)?;
            let value = loss.data()[0];
            if !value.is_finite() {
                return Err(abort_diagnostics(entry, step, &ids, data, &live, value));
            }
            loss.backward()?;
            total += value;
        }
        let mean_loss = total / spec.batch as f64;

        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut max_grad_norm: f64 = 0.0;
        for p in live.params() {
            if !p.tensor.requires_grad() {
                continue;
            }
            let mut g = p.tensor.take_grad().unwrap_or_else(|| vec![0.0; p.tensor.len()]);
            for x in &mut g {
                *x /= spec.batch as f64;
            }
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(CoreError::numeric(
                    entry,
                    format!(
                        "gradient norm for {:?} is not finite at step {step}; batch ids [{}]",
                        p.name,
                        join_ids(&ids, data)
                    ),
                ));
            }
            max_grad_norm = max_grad_norm.max(norm);
            grads.insert(p.name.clone(), g);
        }

        adam.step(&mut store, &grads, lr)?;
        log.push(StepRecord { step, lr, loss: mean_loss, max_grad_norm });
    }

    *model = DbFusionModel::from_store(&cfg, store.clone())?;
    let checkpoint = run.checkpoint_path(spec.stage);
    save_checkpoint(&checkpoint, &cfg, spec.stage.label(), &store)?;
    run.write_losses(spec.stage, &log)?;
    Ok(StageReport { stage: spec.stage, log, checkpoint })
}

fn abort_diagnostics(
    entry: &'static str,
    step: usize,
    ids: &[usize],
    data: &TrainSet,
    live: &DbFusionModel,
    value: f64,
) -> CoreError {
    // Norm over whatever accumulated before the bad sample, so the abort
    // message still reports how large the gradients had grown.
    let mut max_norm: f64 = 0.0;
    for p in live.params() {
        if let Some(g) = p.tensor.grad() {
            max_norm = max_norm.max(g.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    CoreError::numeric(
        entry,
        format!(
            "loss {value} is not finite at step {step}; batch ids [{}]; max grad norm {max_norm:e}",
            join_ids(ids, data)
        ),
    )
}

fn join_ids(ids: &[usize], data: &TrainSet) -> String {
    ids.iter().map(|&i| data.items[i].id.as_str()).collect::<Vec<_>>().join(", ")
}

/// Trailing window means of a loss curve: entry `i` averages
/// `losses[i..i+window]`, so the result has `len - window + 1` entries and
/// is empty when the curve is shorter than one window.
pub fn smoothed_losses(losses: &[f64], window: usize) -> Vec<f64> {
    assert!(window > 0, "smoothing window must be positive");
    if losses.len() < window {
        return Vec::new();
    }
    losses
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}
