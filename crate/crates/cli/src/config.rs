//! Config resolution: documented defaults, then the optional JSON config
//! file, then command-line flags, each layer overriding the one below. The
//! fully resolved configuration is echoed and written into the output
//! directory before the subcommand runs.

use std::env;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dbfusion_core::fusion::FusionStrategy;
use dbfusion_core::model::ModelConfig;
use dbfusion_core::training::{Stage, StageSpec};
use dbfusion_core::CoreError;

/// CLI failures split by exit code: usage errors are clap's (exit 2),
/// config errors exit 3, everything else exits 1.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> CliError {
        match e {
            CoreError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Mark any error as a config error (exit 3); used while resolving and
/// validating, where every failure is the user's input.
pub fn config_err<T>(r: dbfusion_core::Result<T>) -> CliResult<T> {
    r.map_err(|e| CliError::Config(e.to_string()))
}

/// The keys a config file may set; flags with the same (kebab-case) names
/// override them. Everything else is flag-only.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    // vision encoder
    pub patch: Option<usize>,
    pub d_backbone: Option<usize>,
    pub d: Option<usize>,
    pub encoder_layers: Option<usize>,
    pub heads: Option<usize>,
    pub n_t_max: Option<usize>,
    pub image: Option<usize>,
    // language model
    pub d_model: Option<usize>,
    pub lm_layers: Option<usize>,
    pub lm_heads: Option<usize>,
    pub vocab: Option<usize>,
    pub max_seq: Option<usize>,
    // fusion
    pub strategy: Option<String>,
    // training stage
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    pub lr_max: Option<f64>,
    pub lr_min: Option<f64>,
    // shared
    pub seed: Option<u64>,
    pub data: Option<String>,
    pub out: Option<String>,
    pub init: Option<String>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> CliResult<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::Config(format!("config file {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::Config(format!("config file {}: {e}", path.display()))
        })
    }

    /// Overlay `flags` on top of `self`: any field the flags set wins.
    pub fn merged_with(self, flags: FileConfig) -> FileConfig {
        macro_rules! pick {
            ($($f:ident),* $(,)?) => {
                FileConfig { $($f: flags.$f.or(self.$f)),* }
            };
        }
        pick!(
            patch, d_backbone, d, encoder_layers, heads, n_t_max, image, d_model, lm_layers,
            lm_heads, vocab, max_seq, strategy, steps, batch, lr_max, lr_min, seed, data, out,
            init,
        )
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn data_dir(&self) -> CliResult<PathBuf> {
        self.data.as_deref().map(PathBuf::from).ok_or_else(|| {
            CliError::Config("no dataset directory; pass --data or set \"data\"".into())
        })
    }

    pub fn out_dir(&self) -> CliResult<PathBuf> {
        self.out.as_deref().map(PathBuf::from).ok_or_else(|| {
            CliError::Config("no output directory; pass --out or set \"out\"".into())
        })
    }

    pub fn init_path(&self) -> Option<PathBuf> {
        self.init.as_deref().map(PathBuf::from)
    }

    fn strategy(&self) -> CliResult<Option<FusionStrategy>> {
        self.strategy
            .as_deref()
            .map(|s| config_err(s.parse::<FusionStrategy>()))
            .transpose()
    }

    /// Resolved model configuration when no checkpoint pins it.
    pub fn model(&self) -> CliResult<ModelConfig> {
        let mut m = ModelConfig::default();
        let e = &mut m.encoder;
        set(&mut e.patch, self.patch);
        set(&mut e.d_backbone, self.d_backbone);
        set(&mut e.d, self.d);
        set(&mut e.encoder_layers, self.encoder_layers);
        set(&mut e.heads, self.heads);
        set(&mut e.n_t_max, self.n_t_max);
        set(&mut e.image, self.image);
        let l = &mut m.lm;
        set(&mut l.d_model, self.d_model);
        set(&mut l.layers, self.lm_layers);
        set(&mut l.heads, self.lm_heads);
        set(&mut l.vocab, self.vocab);
        set(&mut l.max_seq, self.max_seq);
        if let Some(s) = self.strategy()? {
            m.strategy = s;
        }
        config_err(m.validate())?;
        Ok(m)
    }

    /// A checkpoint's configuration is authoritative; any explicitly set
    /// model field must agree with it.
    pub fn model_matching_checkpoint(&self, ck: &ModelConfig) -> CliResult<ModelConfig> {
        conflict("patch", self.patch, ck.encoder.patch)?;
        conflict("d_backbone", self.d_backbone, ck.encoder.d_backbone)?;
        conflict("d", self.d, ck.encoder.d)?;
        conflict("encoder_layers", self.encoder_layers, ck.encoder.encoder_layers)?;
        conflict("heads", self.heads, ck.encoder.heads)?;
        conflict("n_t_max", self.n_t_max, ck.encoder.n_t_max)?;
        conflict("image", self.image, ck.encoder.image)?;
        conflict("d_model", self.d_model, ck.lm.d_model)?;
        conflict("lm_layers", self.lm_layers, ck.lm.layers)?;
        conflict("lm_heads", self.lm_heads, ck.lm.heads)?;
        conflict("vocab", self.vocab, ck.lm.vocab)?;
        conflict("max_seq", self.max_seq, ck.lm.max_seq)?;
        conflict("strategy", self.strategy()?, ck.strategy)?;
        Ok(ck.clone())
    }

    /// Stage recipe with per-stage defaults, overridden field by field.
    pub fn stage_spec(&self, stage: Stage) -> CliResult<StageSpec> {
        let mut s = match stage {
            Stage::Pretrain => StageSpec::pretrain(),
            Stage::Finetune => StageSpec::finetune(),
        };
        set(&mut s.steps, self.steps);
        set(&mut s.batch, self.batch);
        set(&mut s.lr_max, self.lr_max);
        set(&mut s.lr_min, self.lr_min);
        s.seed = self.seed();
        config_err(s.validate())?;
        Ok(s)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn conflict<T: PartialEq + Display>(key: &str, given: Option<T>, ck: T) -> CliResult<()> {
    match given {
        Some(g) if g != ck => Err(CliError::Config(format!(
            "{key} {g} conflicts with the checkpoint's {ck}"
        ))),
        _ => Ok(()),
    }
}

/// Worker count for fan-out commands: machine parallelism, capped by the
/// DBFUSION_THREADS environment variable when set.
pub fn resolve_workers() -> CliResult<usize> {
    let base = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match env::var("DBFUSION_THREADS") {
        Err(env::VarError::NotPresent) => Ok(base),
        Err(e) => Err(CliError::Config(format!("DBFUSION_THREADS is not readable: {e}"))),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(base.min(n)),
            _ => Err(CliError::Config(format!(
                "DBFUSION_THREADS must be a positive integer, got {s:?}"
            ))),
        },
    }
}

/// Comma-separated scene-mix weights, e.g. `1,1,1`.
pub fn parse_mix(text: &str) -> CliResult<[f64; 3]> {
    let bad = || CliError::Config(format!("mix must be three comma-separated weights, got {text:?}"));
    let parts: Vec<f64> =
        text.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad())?;
    let [a, b, c] = parts[..] else { return Err(bad()) };
    let mix = [a, b, c];
    if mix.iter().any(|w| !w.is_finite() || *w < 0.0) || mix.iter().sum::<f64>() <= 0.0 {
        return Err(CliError::Config(format!(
            "mix weights must be nonnegative with a positive sum, got {text:?}"
        )));
    }
    Ok(mix)
}

/// Synthetic-data knobs as stamped into the run config.
#[derive(Clone, Debug, Serialize)]
pub struct GenStamp {
    pub n: usize,
    pub mix: [f64; 3],
}

impl Default for GenStamp {
    fn default() -> GenStamp {
        GenStamp { n: 5000, mix: [1.0, 1.0, 1.0] }
    }
}

/// Analysis knobs as stamped into the run config.
#[derive(Clone, Debug, Serialize)]
pub struct ProbeStamp {
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub workers: usize,
    pub mask: String,
    pub remove: Vec<String>,
    pub tasks: String,
    pub scale: usize,
    pub record: u64,
    pub limit: usize,
    pub subset: String,
}

pub const ALL_FEATURES: &str = "depth,caption,ocr,grounding";

impl Default for ProbeStamp {
    fn default() -> ProbeStamp {
        ProbeStamp {
            steps: 500,
            lr: 1e-3,
            seeds: vec![0, 1, 2],
            workers: 1,
            mask: ALL_FEATURES.into(),
            remove: Vec::new(),
            tasks: ALL_FEATURES.into(),
            scale: 8,
            record: 0,
            limit: 0,
            subset: "all".into(),
        }
    }
}

/// The fully resolved run configuration. Written as `config.json` into the
/// output directory and echoed to stdout before the command runs, so the run
/// can be reproduced from the directory alone. Sections a command does not
/// use hold their defaults.
#[derive(Clone, Debug, Serialize)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    /// Dataset directory; empty for gen-data, whose dataset is the output.
    pub data: String,
    pub out: String,
    /// Checkpoint the model was loaded from; empty means a fresh seeded model.
    pub init: String,
    /// SHA-256 of the manifest the run consumed (or, for gen-data, produced).
    pub manifest_sha256: String,
    pub model: ModelConfig,
    pub stage: StageSpec,
    pub gen: GenStamp,
    pub probe: ProbeStamp,
}

impl RunConfig {
    /// Echo the resolved config and persist it as `<out>/config.json`.
    pub fn echo_and_write(&self, out: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Runtime(format!("config serialization: {e}")))?;
        text.push('\n');
        println!("resolved config:\n{text}");
        fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("output directory {}: {e}", out.display())))?;
        fs::write(out.join("config.json"), &text)
            .map_err(|e| CliError::Runtime(format!("config.json: {e}")))?;
        Ok(())
    }
}
