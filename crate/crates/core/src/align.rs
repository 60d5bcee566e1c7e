//! Vision-text alignment probe: pool both feature sides, L2-normalize, and
//! train a projection P to pull each record's vision feature onto its own
//! text feature under a contrastive cross-entropy over the similarity
//! matrix. Includes the ablation harness that compares feature subsets on
//! one frozen model, plus CSV/JSON report writers and DBFT pair exchange.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::Serialize;

use crate::data::DatasetRecord;
use crate::error::{CoreError, Result};
use crate::fusion::{fuse_subset, FeatureKey, FusionStrategy};
use crate::lm::ByteTokenizer;
use crate::model::{DbFusionModel, PARAM_GROUPS};
use crate::nn::{ParamBuilder, ParamStore};
use crate::tensor::{dbft, Tensor};
use crate::training::Adam;
use crate::vision::PromptTask;

/// Pooled rows with a norm below this are reported as degenerate.
const NORM_EPS: f64 = 1e-12;

/// Matched vision/text feature records plus a provenance label. Vision
/// records are `r_n x d_vision`, text records `s_n x d_text`; row counts may
/// vary per record but widths may not.
#[derive(Clone, Debug)]
pub struct FeaturePairSet {
    label: String,
    vision: Vec<Tensor>,
    text: Vec<Tensor>,
    d_vision: usize,
    d_text: usize,
}

impl FeaturePairSet {
    pub fn new(label: impl Into<String>, vision: Vec<Tensor>, text: Vec<Tensor>) -> Result<Self> {
        if vision.len() != text.len() {
            return Err(CoreError::argument(
                "feature_pairs",
                format!("{} vision records but {} text records", vision.len(), text.len()),
            ));
        }
        if vision.is_empty() {
            return Err(CoreError::argument("feature_pairs", "no records"));
        }
        let (mut d_vision, mut d_text) = (0, 0);
        for (i, (v, t)) in vision.iter().zip(&text).enumerate() {
            for (side, tensor, width) in [("vision", v, &mut d_vision), ("text", t, &mut d_text)] {
                if tensor.rank() != 2 || tensor.shape()[0] == 0 {
                    return Err(CoreError::dimension(
                        "feature_pairs",
                        format!("{side} record {i} must be a nonempty rank-2 tensor, got {:?}", tensor.shape()),
                    ));
                }
                let d = tensor.shape()[1];
                if *width == 0 {
                    *width = d;
                } else if *width != d {
                    return Err(CoreError::dimension(
                        "feature_pairs",
                        format!("{side} record {i} has width {d}, expected {width}"),
                    ));
                }
            }
        }
        Ok(FeaturePairSet { label: label.into(), vision, text, d_vision, d_text })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn len(&self) -> usize {
        self.vision.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vision.is_empty()
    }

    pub fn d_vision(&self) -> usize {
        self.d_vision
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn vision(&self) -> &[Tensor] {
        &self.vision
    }

    pub fn text(&self) -> &[Tensor] {
        &self.text
    }
}

/// The trainable projection mapping vision width onto text width.
#[derive(Clone, Debug)]
pub struct ProjectionP {
    pub d_in: usize,
    pub d_out: usize,
    pub values: Vec<f64>,
}

impl ProjectionP {
    /// Gaussian init with the shared weight convention.
    pub fn seeded(d_in: usize, d_out: usize, seed: u64) -> Result<ProjectionP> {
        let p = ParamBuilder::seeded(seed).normal("align.p", &[d_in, d_out])?;
        Ok(ProjectionP { d_in, d_out, values: p.tensor.data().to_vec() })
    }

    /// Square identity, for tests where projection must be a no-op.
    pub fn identity(d: usize) -> ProjectionP {
        let mut values = vec![0.0; d * d];
        for i in 0..d {
            values[i * d + i] = 1.0;
        }
        ProjectionP { d_in: d, d_out: d, values }
    }

    /// Live trainable tensor over the current values.
    pub fn tensor(&self) -> Result<Tensor> {
        if let Some(bad) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(CoreError::argument(
                "projection",
                format!("projection holds non-finite entry {bad}"),
            ));
        }
        Tensor::param(&[self.d_in, self.d_out], self.values.clone())
    }
}

/// Project each vision record by `p`, mean-pool both sides over tokens,
/// L2-normalize, and stack into `(F_v, F_t)`, both `N x d_text`, in record
/// order.
pub fn pool_normalize_stack(pairs: &FeaturePairSet, p: &ProjectionP) -> Result<(Tensor, Tensor)> {
    pool_normalize_stack_with(pairs, &p.tensor()?)
}

/// Same as [`pool_normalize_stack`] but over a live projection tensor, so
/// the result stays differentiable with respect to it.
pub fn pool_normalize_stack_with(pairs: &FeaturePairSet, p: &Tensor) -> Result<(Tensor, Tensor)> {
    if p.shape() != [pairs.d_vision, pairs.d_text] {
        return Err(CoreError::dimension(
            "pool_normalize_stack",
            format!(
                "projection is {:?}, pairs need [{}, {}]",
                p.shape(),
                pairs.d_vision,
                pairs.d_text
            ),
        ));
    }
    let mut v_rows = Vec::with_capacity(pairs.len());
    let mut t_rows = Vec::with_capacity(pairs.len());
    for (v, t) in pairs.vision.iter().zip(&pairs.text) {
        v_rows.push(v.matmul(p)?.mean_pool(0)?.reshape(&[1, pairs.d_text])?);
        t_rows.push(t.mean_pool(0)?.reshape(&[1, pairs.d_text])?);
    }
    let f_v = normalize_stacked("vision", &Tensor::concat(&v_rows, 0)?)?;
    let f_t = normalize_stacked("text", &Tensor::concat(&t_rows, 0)?)?;
    Ok((f_v, f_t))
}

/// Normalize stacked pooled rows, naming the offending record on a zero
/// norm rather than surfacing a bare row index.
fn normalize_stacked(side: &str, stacked: &Tensor) -> Result<Tensor> {
    let cols = stacked.shape()[1];
    for (r, row) in stacked.data().chunks(cols).enumerate() {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= NORM_EPS) {
            return Err(CoreError::degenerate(
                "pool_normalize_stack",
                format!("{side} record {r} pools to norm {norm:e}"),
            ));
        }
    }
    stacked.l2_normalize(NORM_EPS)
}

/// Contrastive diagnostic loss: row-softmax the similarity matrix
/// `F_v F_t^T` and take the mean cross-entropy against the identity target,
/// i.e. each vision row should be most similar to its own text row.
pub fn alignment_loss(f_v: &Tensor, f_t: &Tensor) -> Result<Tensor> {
    if f_v.rank() != 2 || f_v.shape() != f_t.shape() {
        return Err(CoreError::dimension(
            "alignment_loss",
            format!("need matching N x d matrices, got {:?} and {:?}", f_v.shape(), f_t.shape()),
        ));
    }
    let n = f_v.shape()[0];
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    f_v.matmul_nt(f_t)?.softmax_cross_entropy_rows(&Tensor::new(&[n, n], eye)?)
}

/// One optimization run's outcome.
#[derive(Clone, Debug, Serialize)]
pub struct AlignmentReport {
    pub label: String,
    pub loss_curve: Vec<(usize, f64)>,
    pub final_loss: f64,
    pub n: usize,
    pub d_vision: usize,
    pub d_text: usize,
    pub seed: u64,
}

/// Pooled, plain-data form of a pair set: pooling commutes with the linear
/// projection, so `mean_rows(X P) == mean_rows(X) P` and the per-step work
/// shrinks to one `N x d_vision` matmul. Plain vectors keep jobs sendable
/// across worker threads.
#[derive(Clone, Debug)]
struct PooledPairs {
    label: String,
    n: usize,
    d_vision: usize,
    d_text: usize,
    vision: Vec<f64>,
    text: Vec<f64>,
}

impl PooledPairs {
    fn from_pairs(pairs: &FeaturePairSet) -> Result<PooledPairs> {
        let vision = pool_records("vision", &pairs.vision, pairs.d_vision, false)?;
        let text = pool_records("text", &pairs.text, pairs.d_text, true)?;
        Ok(PooledPairs {
            label: pairs.label.clone(),
            n: pairs.len(),
            d_vision: pairs.d_vision,
            d_text: pairs.d_text,
            vision,
            text,
        })
    }
}

fn pool_records(side: &str, records: &[Tensor], d: usize, normalize: bool) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(records.len() * d);
    for (i, rec) in records.iter().enumerate() {
        // Same accumulation order as mean_pool, so both pooling paths agree
        // bit for bit.
        let scale = 1.0 / rec.shape()[0] as f64;
        let mut pooled = vec![0.0; d];
        for row in rec.data().chunks(d) {
            for (acc, v) in pooled.iter_mut().zip(row) {
                *acc += v * scale;
            }
        }
        if normalize {
            let norm = pooled.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm >= NORM_EPS) {
                return Err(CoreError::degenerate(
                    "pool_normalize_stack",
                    format!("{side} record {i} pools to norm {norm:e}"),
                ));
            }
            for v in &mut pooled {
                *v /= norm;
            }
        }
        out.extend_from_slice(&pooled);
    }
    Ok(out)
}

fn optimize_pooled(pooled: &PooledPairs, steps: usize, lr: f64, seed: u64) -> Result<AlignmentReport> {
    let mv = Tensor::new(&[pooled.n, pooled.d_vision], pooled.vision.clone())?;
    let ft = Tensor::new(&[pooled.n, pooled.d_text], pooled.text.clone())?;
    let p = ProjectionP::seeded(pooled.d_vision, pooled.d_text, seed)?;

    let mut store = ParamStore::new();
    store.insert("align.p", vec![p.d_in, p.d_out], p.values);
    let mut adam = Adam::new();
    let mut curve = Vec::with_capacity(steps);

    for step in 0..steps {
        let (shape, values) = store.get("align.p").unwrap().clone();
        let pt = Tensor::param(&shape, values)?;
        let f_v = normalize_stacked("projected vision", &mv.matmul(&pt)?)?;
        let loss = alignment_loss(&f_v, &ft)?;
        let value = loss.data()[0];
        if !value.is_finite() {
            return Err(CoreError::numeric(
                "optimize_projection",
                format!("loss {value} is not finite at step {step}"),
            ));
        }
        loss.backward()?;
        let grad = pt.take_grad().expect("projection always participates in the loss");
        let mut grads = BTreeMap::new();
        grads.insert("align.p".to_string(), grad);
        adam.step(&mut store, &grads, lr)?;
        curve.push((step, value));
    }

    let final_loss = curve.last().map(|&(_, l)| l).unwrap_or(f64::NAN);
    Ok(AlignmentReport {
        label: pooled.label.clone(),
        loss_curve: curve,
        final_loss,
        n: pooled.n,
        d_vision: pooled.d_vision,
        d_text: pooled.d_text,
        seed,
    })
}

/// Train a seeded projection with Adam on the pooled pair set, recording
/// the loss before each update.
pub fn optimize_projection(
    pairs: &FeaturePairSet,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<AlignmentReport> {
    if steps == 0 {
        return Err(CoreError::argument("optimize_projection", "need at least one step"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(CoreError::argument("optimize_projection", format!("bad learning rate {lr}")));
    }
    optimize_pooled(&PooledPairs::from_pairs(pairs)?, steps, lr, seed)
}

/// One ablation arm: which bundle members stay, and how they fuse.
#[derive(Clone, Debug)]
pub struct AblationConfig {
    pub label: String,
    pub mask: BTreeSet<FeatureKey>,
    pub strategy: FusionStrategy,
}

impl AblationConfig {
    /// Channel fusion unless overridden.
    pub fn new(label: impl Into<String>, mask: BTreeSet<FeatureKey>) -> AblationConfig {
        AblationConfig { label: label.into(), mask, strategy: FusionStrategy::ChannelIntegration }
    }

    pub fn with_strategy(mut self, strategy: FusionStrategy) -> AblationConfig {
        self.strategy = strategy;
        self
    }
}

/// Parse a comma-joined feature mask such as `depth,caption,ocr,grounding`.
pub fn parse_feature_mask(text: &str) -> Result<BTreeSet<FeatureKey>> {
    let mut mask = BTreeSet::new();
    for part in text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let key = FeatureKey::from_label(part).ok_or_else(|| {
            CoreError::argument(
                "feature_mask",
                format!("unknown feature {part:?}; expected depth, caption, ocr, or grounding"),
            )
        })?;
        mask.insert(key);
    }
    if mask.is_empty() {
        return Err(CoreError::argument("feature_mask", "empty feature mask"));
    }
    Ok(mask)
}

/// Knobs for [`compare_configs`].
#[derive(Clone, Debug)]
pub struct CompareOptions {
    pub steps: usize,
    pub lr: f64,
    pub seeds: Vec<u64>,
    pub workers: usize,
}

impl Default for CompareOptions {
    fn default() -> CompareOptions {
        CompareOptions { steps: 500, lr: 1e-3, seeds: vec![0, 1, 2], workers: 1 }
    }
}

/// Run the alignment probe for every (config, seed) pair against one frozen
/// model: vision features are masked fused bundles, text features the LM's
/// last hidden layer over each record's caption. Jobs are independent and
/// may run on parallel workers; reports come back sorted by (label, seed)
/// and are identical for any worker count.
pub fn compare_configs(
    model: &DbFusionModel,
    records: &[DatasetRecord],
    configs: &[AblationConfig],
    opts: &CompareOptions,
) -> Result<Vec<AlignmentReport>> {
    if configs.is_empty() {
        return Err(CoreError::argument("compare_configs", "no configs"));
    }
    if records.is_empty() {
        return Err(CoreError::argument("compare_configs", "no records"));
    }
    if opts.seeds.is_empty() {
        return Err(CoreError::argument("compare_configs", "no seeds"));
    }
    let mut labels = BTreeSet::new();
    for c in configs {
        if c.mask.is_empty() {
            return Err(CoreError::argument(
                "compare_configs",
                format!("config {:?} has an empty feature mask", c.label),
            ));
        }
        if !labels.insert(c.label.as_str()) {
            return Err(CoreError::argument(
                "compare_configs",
                format!("duplicate config label {:?}", c.label),
            ));
        }
    }

    // A frozen replica keeps feature extraction off the tape and leaves the
    // caller's model untouched.
    let frozen = DbFusionModel::from_store(model.cfg(), model.store())?;
    for group in PARAM_GROUPS {
        frozen.set_group_trainable(group, false)?;
    }

    let all_tasks: BTreeSet<PromptTask> = PromptTask::ALL.into_iter().collect();
    let d_text = model.cfg().lm.d_model;
    let mut text = Vec::with_capacity(records.len() * d_text);
    let mut fused_per_config: Vec<Vec<f64>> = vec![Vec::new(); configs.len()];
    let mut widths = vec![0usize; configs.len()];
    for (i, rec) in records.iter().enumerate() {
        let image = rec.load_image()?;
        let bundle = frozen.encoder.extract_bundle(&image, &all_tasks)?;
        for (c, cfg) in configs.iter().enumerate() {
            let keys: Vec<FeatureKey> = cfg.mask.iter().copied().collect();
            let fused = fuse_subset(&bundle, cfg.strategy, &keys)?.tokens;
            widths[c] = fused.shape()[1];
            let pooled = pool_records("vision", std::slice::from_ref(&fused), widths[c], false)?;
            fused_per_config[c].extend_from_slice(&pooled);
        }
        let caption = ByteTokenizer::caption_sequence(&rec.caption)?;
        let hidden = frozen.lm.hidden_states(&caption)?;
        let pooled = pool_records("text", std::slice::from_ref(&hidden), d_text, true)
            .map_err(|_| {
                CoreError::degenerate(
                    "compare_configs",
                    format!("text record {i} pools to zero norm"),
                )
            })?;
        text.extend_from_slice(&pooled);
    }

    let pooled: Vec<PooledPairs> = configs
        .iter()
        .enumerate()
        .map(|(c, cfg)| PooledPairs {
            label: cfg.label.clone(),
            n: records.len(),
            d_vision: widths[c],
            d_text,
            vision: fused_per_config[c].clone(),
            text: text.clone(),
        })
        .collect();

    let jobs: Vec<(usize, u64)> = (0..pooled.len())
        .flat_map(|c| opts.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let workers = opts.workers.max(1).min(jobs.len());
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<AlignmentReport>>> = Vec::new();
    slots.resize_with(jobs.len(), || None);

    if workers <= 1 {
        for (slot, &(c, seed)) in slots.iter_mut().zip(&jobs) {
            *slot = Some(optimize_pooled(&pooled[c], opts.steps, opts.lr, seed));
        }
    } else {
        let done: Vec<Vec<(usize, Result<AlignmentReport>)>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    scope.spawn(|| {
                        let mut out = Vec::new();
                        loop {
                            let j = next.fetch_add(1, Ordering::Relaxed);
                            if j >= jobs.len() {
                                break;
                            }
                            let (c, seed) = jobs[j];
                            out.push((j, optimize_pooled(&pooled[c], opts.steps, opts.lr, seed)));
                        }
                        out
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("alignment worker panicked")).collect()
        });
        for batch in done {
            for (j, report) in batch {
                slots[j] = Some(report);
            }
        }
    }

    let mut reports = Vec::with_capacity(jobs.len());
    for slot in slots {
        reports.push(slot.expect("every job ran exactly once")?);
    }
    reports.sort_by(|a, b| (a.label.as_str(), a.seed).cmp(&(b.label.as_str(), b.seed)));
    Ok(reports)
}

/// Per-label mean and population standard deviation of final losses.
#[derive(Clone, Debug, Serialize)]
pub struct AlignmentSummary {
    pub label: String,
    pub mean_final_loss: f64,
    pub std_final_loss: f64,
    pub seeds: usize,
}

pub fn summarize_reports(reports: &[AlignmentReport]) -> Vec<AlignmentSummary> {
    let mut by_label: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in reports {
        by_label.entry(&r.label).or_default().push(r.final_loss);
    }
    by_label
        .into_iter()
        .map(|(label, finals)| {
            let n = finals.len() as f64;
            let mean = finals.iter().sum::<f64>() / n;
            let var = finals.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
            AlignmentSummary {
                label: label.to_string(),
                mean_final_loss: mean,
                std_final_loss: var.sqrt(),
                seeds: finals.len(),
            }
        })
        .collect()
}

/// Write every report's curve as CSV rows `label,seed,step,loss`.
pub fn write_reports_csv(path: impl AsRef<Path>, reports: &[AlignmentReport]) -> Result<()> {
    let mut out = String::from("label,seed,step,loss\n");
    for r in reports {
        for &(step, loss) in &r.loss_curve {
            out.push_str(&format!("{},{},{},{}\n", r.label, r.seed, step, loss));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write per-label mean/std of final loss as pretty JSON.
pub fn write_summary_json(path: impl AsRef<Path>, reports: &[AlignmentReport]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(&summarize_reports(reports))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Save a pair set as two packed DBFT streams, one blob per record.
pub fn save_feature_pairs(
    pairs: &FeaturePairSet,
    vision_path: impl AsRef<Path>,
    text_path: impl AsRef<Path>,
) -> Result<()> {
    for (path, records) in [(vision_path.as_ref(), &pairs.vision), (text_path.as_ref(), &pairs.text)] {
        let mut buf = Vec::new();
        for rec in records {
            buf.extend_from_slice(&dbft::encode(rec));
        }
        fs::write(path, buf)?;
    }
    Ok(())
}

/// Load feature pairs produced outside this process: two packed DBFT
/// streams with equally many blobs. Values pass through the container's
/// reduced precision.
pub fn load_feature_pairs(
    label: impl Into<String>,
    vision_path: impl AsRef<Path>,
    text_path: impl AsRef<Path>,
) -> Result<FeaturePairSet> {
    let mut sides = Vec::new();
    for path in [vision_path.as_ref(), text_path.as_ref()] {
        let buf = fs::read(path)
            .map_err(|e| CoreError::ingestion(path.display().to_string(), e.to_string()))?;
        let mut records = Vec::new();
        let mut offset = 0;
        while offset < buf.len() {
            let (tensor, used) = dbft::decode_prefix(&buf[offset..]).map_err(|e| {
                CoreError::ingestion(
                    path.display().to_string(),
                    format!("blob {}: {e}", records.len()),
                )
            })?;
            records.push(tensor);
            offset += used;
        }
        sides.push(records);
    }
    let text = sides.pop().expect("two sides pushed");
    let vision = sides.pop().expect("two sides pushed");
    FeaturePairSet::new(label, vision, text)
}
