//! One function per subcommand. Each resolves its configuration, echoes and
//! stamps it into the output directory, runs, and prints a short summary.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use dbfusion_core::align::{
    compare_configs, parse_feature_mask, summarize_reports, write_reports_csv, write_summary_json,
    AblationConfig, CompareOptions,
};
use dbfusion_core::data::{
    generate_dataset, load_dataset, sha256_hex, DatasetRecord, GenOptions, IMAGE_SIDE,
};
use dbfusion_core::fusion::FeatureKey;
use dbfusion_core::model::{load_checkpoint, DbFusionModel, ModelConfig, PARAM_GROUPS};
use dbfusion_core::training::{finetune_stage, pretrain_stage, RunDir, Stage, TrainSet};
use dbfusion_core::vision::PromptTask;
use dbfusion_core::viz::{save_ppm, visualize_feature};

use crate::config::{
    config_err, parse_mix, resolve_workers, CliError, CliResult, FileConfig, GenStamp, ProbeStamp,
    RunConfig, ALL_FEATURES,
};

/// Analysis flags shared by `align` and `ablate`.
#[derive(Debug, Default)]
pub struct ProbeFlags {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub seeds: Option<usize>,
    pub limit: Option<usize>,
    pub subset: Option<String>,
}

impl ProbeFlags {
    /// Fill in defaults and validate; workers come from the environment.
    fn resolve(&self) -> CliResult<(CompareOptions, usize, String)> {
        let steps = self.steps.unwrap_or(500);
        if steps == 0 {
            return Err(CliError::Config("the probe needs at least one step".into()));
        }
        let lr = self.lr.unwrap_or(1e-3);
        if !(lr.is_finite() && lr > 0.0) {
            return Err(CliError::Config(format!("bad probe learning rate {lr}")));
        }
        let n_seeds = self.seeds.unwrap_or(3);
        if n_seeds == 0 {
            return Err(CliError::Config("need at least one probe seed".into()));
        }
        let subset = self.subset.clone().unwrap_or_else(|| "all".into());
        if subset != "all" && subset != "text-heavy" {
            return Err(CliError::Config(format!(
                "unknown subset {subset:?}, expected all | text-heavy"
            )));
        }
        let opts = CompareOptions {
            steps,
            lr,
            seeds: (0..n_seeds as u64).collect(),
            workers: resolve_workers()?,
        };
        Ok((opts, self.limit.unwrap_or(0), subset))
    }
}

pub fn gen_data(fc: FileConfig, n: Option<usize>, mix: Option<String>) -> CliResult<()> {
    let out = fc.out_dir()?;
    let n = n.unwrap_or(5000);
    if n == 0 {
        return Err(CliError::Config("need at least one record".into()));
    }
    let mix = parse_mix(mix.as_deref().unwrap_or("1,1,1"))?;
    let model = fc.model()?;
    let stage = fc.stage_spec(Stage::Pretrain)?;

    let gen = GenOptions { n, seed: fc.seed(), mix };
    let summary = generate_dataset(&out, &gen)?;
    let manifest_sha256 = hash_file(&summary.manifest)?;

    let stamp = RunConfig {
        command: "gen-data".into(),
        seed: fc.seed(),
        data: String::new(),
        out: out.display().to_string(),
        init: String::new(),
        manifest_sha256,
        model,
        stage,
        gen: GenStamp { n, mix },
        probe: ProbeStamp::default(),
    };
    stamp.echo_and_write(&out)?;

    println!(
        "wrote {} records ({} instruction pairs, {} text-heavy) under {}",
        summary.records,
        summary.instruction_pairs,
        summary.text_heavy,
        out.display()
    );
    Ok(())
}

pub fn pretrain(fc: FileConfig) -> CliResult<()> {
    train(fc, Stage::Pretrain)
}

pub fn finetune(fc: FileConfig) -> CliResult<()> {
    train(fc, Stage::Finetune)
}

fn train(fc: FileConfig, stage: Stage) -> CliResult<()> {
    let data = fc.data_dir()?;
    let out = fc.out_dir()?;
    let spec = fc.stage_spec(stage)?;
    let (cfg, mut model, init) = match stage {
        Stage::Pretrain => {
            let cfg = fc.model()?;
            let model = DbFusionModel::seeded(&cfg, fc.seed())?;
            (cfg, model, String::new())
        }
        Stage::Finetune => {
            let path = fc.init_path().ok_or_else(|| {
                CliError::Config("finetune needs a stage-1 checkpoint; pass --init".into())
            })?;
            let ck = load_checkpoint(&path)?;
            if ck.stage != Stage::Pretrain.label() {
                return Err(CliError::Config(format!(
                    "finetune starts from a {} checkpoint, {} holds {:?}",
                    Stage::Pretrain.label(),
                    path.display(),
                    ck.stage
                )));
            }
            let cfg = fc.model_matching_checkpoint(&ck.config)?;
            let model = DbFusionModel::from_store(&cfg, ck.store)?;
            (cfg, model, path.display().to_string())
        }
    };
    check_image_extent(&cfg)?;

    let (records, manifest_sha256) = load_records(&data)?;
    let set = match stage {
        Stage::Pretrain => TrainSet::captions(&records)?,
        Stage::Finetune => TrainSet::instructions(&records)?,
    };

    let stamp = RunConfig {
        command: match stage {
            Stage::Pretrain => "pretrain".into(),
            Stage::Finetune => "finetune".into(),
        },
        seed: fc.seed(),
        data: data.display().to_string(),
        out: out.display().to_string(),
        init,
        manifest_sha256,
        model: cfg.clone(),
        stage: spec.clone(),
        gen: GenStamp::default(),
        probe: ProbeStamp::default(),
    };
    stamp.echo_and_write(&out)?;

    let run = RunDir::create(&out)?;
    println!("{}: {} steps, batch {}, {} training items", spec.stage.label(), spec.steps, spec.batch, set.len());
    let report = match stage {
        Stage::Pretrain => pretrain_stage(&mut model, &set, &spec, &run)?,
        Stage::Finetune => finetune_stage(&mut model, &set, &spec, &run)?,
    };
    match (report.log.first(), report.log.last()) {
        (Some(first), Some(last)) => {
            println!("loss {:.6} -> {:.6} over {} steps", first.loss, last.loss, report.log.len());
        }
        _ => println!("0 steps; the checkpoint equals the initialization"),
    }
    println!("checkpoint: {}", report.checkpoint.display());
    println!("losses: {}", run.losses_path().display());
    Ok(())
}

pub fn align(fc: FileConfig, probe: ProbeFlags, mask: Option<String>) -> CliResult<()> {
    let data = fc.data_dir()?;
    let out = fc.out_dir()?;
    let mask_text = mask.unwrap_or_else(|| ALL_FEATURES.into());
    let mask = config_err(parse_feature_mask(&mask_text))?;
    let label = mask_label(&mask);
    let (opts, limit, subset) = probe.resolve()?;
    let (cfg, model, init) = load_model(&fc)?;
    check_image_extent(&cfg)?;

    let (records, manifest_sha256) = load_records(&data)?;
    let records = filter_records(records, &subset, limit)?;

    let stamp = RunConfig {
        command: "align".into(),
        seed: fc.seed(),
        data: data.display().to_string(),
        out: out.display().to_string(),
        init,
        manifest_sha256,
        model: cfg.clone(),
        stage: fc.stage_spec(Stage::Pretrain)?,
        gen: GenStamp::default(),
        probe: ProbeStamp {
            steps: opts.steps,
            lr: opts.lr,
            seeds: opts.seeds.clone(),
            workers: opts.workers,
            mask: joined(&mask),
            limit,
            subset,
            ..ProbeStamp::default()
        },
    };
    stamp.echo_and_write(&out)?;

    let configs = vec![AblationConfig::new(label, mask).with_strategy(cfg.strategy)];
    run_probe(&model, &records, &configs, &opts, &out)
}

pub fn ablate(fc: FileConfig, probe: ProbeFlags, remove: Option<String>) -> CliResult<()> {
    let data = fc.data_dir()?;
    let out = fc.out_dir()?;
    let remove_text = remove.unwrap_or_else(|| ALL_FEATURES.into());
    let removed = config_err(parse_feature_mask(&remove_text))?;
    let full = config_err(parse_feature_mask(ALL_FEATURES))?;
    let (opts, limit, subset) = probe.resolve()?;
    let (cfg, model, init) = load_model(&fc)?;
    check_image_extent(&cfg)?;

    let (records, manifest_sha256) = load_records(&data)?;
    let records = filter_records(records, &subset, limit)?;

    let stamp = RunConfig {
        command: "ablate".into(),
        seed: fc.seed(),
        data: data.display().to_string(),
        out: out.display().to_string(),
        init,
        manifest_sha256,
        model: cfg.clone(),
        stage: fc.stage_spec(Stage::Pretrain)?,
        gen: GenStamp::default(),
        probe: ProbeStamp {
            steps: opts.steps,
            lr: opts.lr,
            seeds: opts.seeds.clone(),
            workers: opts.workers,
            remove: removed.iter().map(|k| k.label().to_string()).collect(),
            limit,
            subset,
            ..ProbeStamp::default()
        },
    };
    stamp.echo_and_write(&out)?;

    let mut configs =
        vec![AblationConfig::new("full", full.clone()).with_strategy(cfg.strategy)];
    for key in &removed {
        let mut mask = full.clone();
        mask.remove(key);
        configs.push(
            AblationConfig::new(format!("minus-{}", key.label()), mask)
                .with_strategy(cfg.strategy),
        );
    }
    run_probe(&model, &records, &configs, &opts, &out)
}

pub fn viz(
    fc: FileConfig,
    record: Option<u64>,
    tasks: Option<String>,
    scale: Option<usize>,
) -> CliResult<()> {
    let data = fc.data_dir()?;
    let out = fc.out_dir()?;
    let id = record.ok_or_else(|| {
        CliError::Config("no record selected; pass --record with a manifest id".into())
    })?;
    let tasks_text = tasks.unwrap_or_else(|| ALL_FEATURES.into());
    let keys = config_err(parse_feature_mask(&tasks_text))?;
    let scale = scale.unwrap_or(8);
    if scale == 0 {
        return Err(CliError::Config("scale must be at least 1".into()));
    }
    let (cfg, model, init) = load_model(&fc)?;
    check_image_extent(&cfg)?;

    let (records, manifest_sha256) = load_records(&data)?;
    let rec = records
        .iter()
        .find(|r| r.id == id)
        .ok_or_else(|| CliError::Config(format!("record {id} is not in the manifest")))?;

    let stamp = RunConfig {
        command: "viz".into(),
        seed: fc.seed(),
        data: data.display().to_string(),
        out: out.display().to_string(),
        init,
        manifest_sha256,
        model: cfg.clone(),
        stage: fc.stage_spec(Stage::Pretrain)?,
        gen: GenStamp::default(),
        probe: ProbeStamp { tasks: joined(&keys), scale, record: id, ..ProbeStamp::default() },
    };
    stamp.echo_and_write(&out)?;

    // Rendering never backpropagates; freezing keeps the forward passes off
    // the autodiff tape.
    for group in PARAM_GROUPS {
        model.set_group_trainable(group, false)?;
    }
    let image = rec.load_image()?;
    let depth = model.encoder.project_norm(&model.encoder.patch_embed(&image)?)?;
    let grid = cfg.encoder.grid();
    for key in &keys {
        let feature = match key {
            FeatureKey::Depth => depth.v.clone(),
            FeatureKey::Task(t) => model.encoder.encode_with_prompt(&depth, *t)?,
        };
        let viz = visualize_feature(&feature, (grid, grid), key.label())?;
        let stem = format!("{:06}.{}", rec.id, key.label());
        let ppm = out.join(format!("{stem}.ppm"));
        save_ppm(&ppm, &viz, scale)?;
        let mut sidecar = serde_json::to_string_pretty(&viz.sidecar())
            .map_err(|e| CliError::Runtime(format!("sidecar serialization: {e}")))?;
        sidecar.push('\n');
        let json = out.join(format!("{stem}.json"));
        fs::write(&json, sidecar).map_err(|e| CliError::Runtime(format!("{}: {e}", json.display())))?;
        println!("wrote {} and {} (foreground {} of {})", ppm.display(), json.display(), viz.foreground(), grid * grid);
    }
    Ok(())
}

/// Model from `--init` (checkpoint config authoritative, explicit flags
/// cross-checked) or a fresh seeded model. The returned string is the
/// checkpoint path for the stamp, empty when seeded.
fn load_model(fc: &FileConfig) -> CliResult<(ModelConfig, DbFusionModel, String)> {
    match fc.init_path() {
        Some(path) => {
            let ck = load_checkpoint(&path)?;
            let cfg = fc.model_matching_checkpoint(&ck.config)?;
            let model = DbFusionModel::from_store(&cfg, ck.store)?;
            Ok((cfg, model, path.display().to_string()))
        }
        None => {
            let cfg = fc.model()?;
            let model = DbFusionModel::seeded(&cfg, fc.seed())?;
            Ok((cfg, model, String::new()))
        }
    }
}

fn load_records(dir: &Path) -> CliResult<(Vec<DatasetRecord>, String)> {
    let manifest = dir.join("manifest.jsonl");
    let records = load_dataset(&manifest)?;
    Ok((records, hash_file(&manifest)?))
}

fn hash_file(path: &PathBuf) -> CliResult<String> {
    let bytes =
        fs::read(path).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

fn filter_records(
    mut records: Vec<DatasetRecord>,
    subset: &str,
    limit: usize,
) -> CliResult<Vec<DatasetRecord>> {
    if subset == "text-heavy" {
        records.retain(|r| !r.scene.glyphs.is_empty());
    }
    if limit > 0 {
        records.truncate(limit);
    }
    if records.is_empty() {
        return Err(CliError::Config("no records left after the subset/limit filters".into()));
    }
    Ok(records)
}

fn run_probe(
    model: &DbFusionModel,
    records: &[DatasetRecord],
    configs: &[AblationConfig],
    opts: &CompareOptions,
    out: &Path,
) -> CliResult<()> {
    println!(
        "probing {} config(s) x {} seed(s) on {} records with {} worker(s)",
        configs.len(),
        opts.seeds.len(),
        records.len(),
        opts.workers
    );
    let reports = compare_configs(model, records, configs, opts)?;
    let csv = out.join("reports.csv");
    let json = out.join("summary.json");
    write_reports_csv(&csv, &reports)?;
    write_summary_json(&json, &reports)?;
    for s in summarize_reports(&reports) {
        println!(
            "{}: mean final loss {:.6} (std {:.6}) over {} seeds",
            s.label,
            s.mean_final_loss,
            s.std_final_loss,
            s.seeds
        );
    }
    println!("reports: {}", csv.display());
    println!("summary: {}", json.display());
    Ok(())
}

fn check_image_extent(cfg: &ModelConfig) -> CliResult<()> {
    if cfg.encoder.image != IMAGE_SIDE {
        return Err(CliError::Config(format!(
            "encoder image extent {} does not match the {IMAGE_SIDE}-pixel dataset images",
            cfg.encoder.image
        )));
    }
    Ok(())
}

fn mask_label(mask: &BTreeSet<FeatureKey>) -> String {
    if mask.len() == 1 + PromptTask::ALL.len() {
        return "full".into();
    }
    joined(mask)
}

/// Canonical `+`-joined form, safe inside CSV label fields.
fn joined(mask: &BTreeSet<FeatureKey>) -> String {
    mask.iter().map(|k| k.label()).collect::<Vec<_>>().join("+")
}
