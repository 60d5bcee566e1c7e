//! Shared network plumbing: named parameters, parameter construction and
//! snapshotting, linear/layer-norm layers, multi-head self-attention,
//! pre-norm transformer blocks, and additive attention masks.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Additive mask value for forbidden attention edges. Large enough that the
/// masked probability underflows to exactly 0.0 after softmax, small enough
/// to stay finite through every intermediate.
pub const MASK_OFF: f64 = -1e30;

/// Weight init scale for fresh models.
const INIT_STD: f64 = 0.02;

/// A named trainable tensor. Cloning shares the underlying storage, so a
/// collected parameter list hands out live handles, not copies.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

impl Parameter {
    pub fn shape(&self) -> &[usize] {
        self.tensor.shape()
    }
}

/// Plain-data snapshot of parameter values keyed by name. This is the
/// exchange format between live models, checkpoints, and worker threads.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore").field("params", &self.entries.len()).finish()
    }
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn from_params(params: &[Parameter]) -> ParamStore {
        let mut store = ParamStore::new();
        for p in params {
            store.insert(&p.name, p.shape().to_vec(), p.tensor.data().to_vec());
        }
        store
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        self.entries.insert(name.to_string(), (shape, data));
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f64>)> {
        self.entries.get(name)
    }

    /// Iterate entries in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &(Vec<usize>, Vec<f64>))> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug)]
enum BuildMode {
    Fresh(ChaCha8Rng),
    Restore(ParamStore),
}

/// Constructs named parameters either from a seeded initializer or from a
/// stored snapshot, so fresh models and checkpoint loads share one code
/// path. Duplicate names are rejected; restore validates shapes.
#[derive(Debug)]
pub struct ParamBuilder {
    mode: BuildMode,
    seen: std::collections::BTreeSet<String>,
}

impl ParamBuilder {
    pub fn seeded(seed: u64) -> ParamBuilder {
        ParamBuilder {
            mode: BuildMode::Fresh(ChaCha8Rng::seed_from_u64(seed)),
            seen: Default::default(),
        }
    }

    pub fn restore(store: ParamStore) -> ParamBuilder {
        ParamBuilder {
            mode: BuildMode::Restore(store),
            seen: Default::default(),
        }
    }

    fn make(&mut self, name: &str, shape: &[usize], fresh: Fresh) -> Result<Parameter> {
        if !self.seen.insert(name.to_string()) {
            return Err(CoreError::Config(format!("duplicate parameter name {name:?}")));
        }
        let data = match &mut self.mode {
            BuildMode::Fresh(rng) => {
                let n: usize = shape.iter().product();
                match fresh {
                    Fresh::Normal => {
                        let dist = Normal::new(0.0, INIT_STD).expect("finite std");
                        (0..n).map(|_| dist.sample(rng)).collect()
                    }
                    Fresh::Zeros => vec![0.0; n],
                    Fresh::Ones => vec![1.0; n],
                }
            }
            BuildMode::Restore(store) => {
                let (stored_shape, data) = store.get(name).ok_or_else(|| {
                    CoreError::Config(format!("checkpoint is missing parameter {name:?}"))
                })?;
                if stored_shape != shape {
                    return Err(CoreError::Config(format!(
                        "parameter {name:?} has shape {stored_shape:?} in the checkpoint, \
                         expected {shape:?}"
                    )));
                }
                data.clone()
            }
        };
        Ok(Parameter {
            name: name.to_string(),
            tensor: Tensor::param(shape, data)?,
        })
    }

    /// Gaussian-initialized weight (std 0.02) or restored value.
    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<Parameter> {
        self.make(name, shape, Fresh::Normal)
    }

    /// Zero-initialized (biases) or restored value.
    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Parameter> {
        self.make(name, shape, Fresh::Zeros)
    }

    /// One-initialized (layer-norm gains) or restored value.
    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Parameter> {
        self.make(name, shape, Fresh::Ones)
    }
}

enum Fresh {
    Normal,
    Zeros,
    Ones,
}

/// Affine map `x · w + b` with `w: d_in × d_out`.
#[derive(Debug)]
pub struct Linear {
    pub w: Parameter,
    pub b: Option<Parameter>,
}

impl Linear {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Linear> {
        Ok(Linear {
            w: pb.normal(&format!("{name}.w"), &[d_in, d_out])?,
            b: if bias {
                Some(pb.zeros(&format!("{name}.b"), &[d_out])?)
            } else {
                None
            },
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w.tensor)?;
        match &self.b {
            Some(b) => y.add_bias(&b.tensor),
            None => Ok(y),
        }
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.w.clone());
        if let Some(b) = &self.b {
            out.push(b.clone());
        }
    }
}

/// Row-wise layer norm with learned gain and bias.
#[derive(Debug)]
pub struct LayerNorm {
    pub gain: Parameter,
    pub bias: Parameter,
}

/// Variance floor used by every layer-norm in the model.
pub const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gain: pb.ones(&format!("{name}.gain"), &[d])?,
            bias: pb.zeros(&format!("{name}.bias"), &[d])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gain.tensor, &self.bias.tensor, LN_EPS)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.gain.clone());
        out.push(self.bias.clone());
    }
}

/// Multi-head self-attention over one sequence, with an additive mask
/// (`0` where position i may attend j, [`MASK_OFF`] where it may not).
#[derive(Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    heads: usize,
    d_head: usize,
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(CoreError::Config(format!(
                "width {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            wq: Linear::new(pb, &format!("{name}.wq"), d_model, d_model, true)?,
            wk: Linear::new(pb, &format!("{name}.wk"), d_model, d_model, true)?,
            wv: Linear::new(pb, &format!("{name}.wv"), d_model, d_model, true)?,
            wo: Linear::new(pb, &format!("{name}.wo"), d_model, d_model, true)?,
            heads,
            d_head: d_model / heads,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let n = x.shape()[0];
        if mask.shape() != [n, n] {
            return Err(CoreError::dimension(
                "attention",
                format!("mask shape {:?} does not match {n} positions", mask.shape()),
            ));
        }
        let q = self.wq.forward(x)?;
        let k = self.wk.forward(x)?;
        let v = self.wv.forward(x)?;
        let scale = 1.0 / (self.d_head as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let off = h * self.d_head;
            let qh = q.narrow(1, off, self.d_head)?;
            let kh = k.narrow(1, off, self.d_head)?;
            let vh = v.narrow(1, off, self.d_head)?;
            let scores = qh.matmul_nt(&kh)?.scale(scale).add(mask)?;
            let probs = scores.softmax_rows()?;
            per_head.push(probs.matmul(&vh)?);
        }
        let merged = Tensor::concat(&per_head, 1)?;
        self.wo.forward(&merged)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.wq.collect_params(out);
        self.wk.collect_params(out);
        self.wv.collect_params(out);
        self.wo.collect_params(out);
    }
}

/// Position-wise MLP with one hidden layer and GELU.
#[derive(Debug)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            w1: Linear::new(pb, &format!("{name}.w1"), d_model, hidden, true)?,
            w2: Linear::new(pb, &format!("{name}.w2"), hidden, d_model, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.w2.forward(&self.w1.forward(x)?.gelu())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.w1.collect_params(out);
        self.w2.collect_params(out);
    }
}

/// Pre-norm transformer block: `x += attn(ln1(x)); x += ffn(ln2(x))`.
/// The feed-forward hidden width is 4x the model width.
#[derive(Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

impl TransformerBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_model: usize, heads: usize) -> Result<Self> {
        Ok(TransformerBlock {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), d_model)?,
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), d_model, heads)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), d_model)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d_model, 4 * d_model)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let x = x.add(&self.attn.forward(&self.ln1.forward(x)?, mask)?)?;
        x.add(&self.ffn.forward(&self.ln2.forward(&x)?)?)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.ln1.collect_params(out);
        self.attn.collect_params(out);
        self.ln2.collect_params(out);
        self.ffn.collect_params(out);
    }
}

/// Every position attends every position.
pub fn bidirectional_mask(n: usize) -> Tensor {
    Tensor::zeros(&[n, n])
}

/// Position i attends positions j <= i.
pub fn causal_mask(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            m[i * n + j] = MASK_OFF;
        }
    }
    Tensor::new(&[n, n], m).expect("mask shape matches data")
}

/// The first `prefix` positions attend each other bidirectionally and never
/// look past the prefix; the remaining positions attend the whole prefix
/// plus earlier (and own) suffix positions causally.
pub fn prefix_causal_mask(prefix: usize, total: usize) -> Tensor {
    assert!(prefix <= total, "prefix {prefix} exceeds sequence length {total}");
    let mut m = vec![0.0; total * total];
    for i in 0..total {
        for j in 0..total {
            let allowed = if i < prefix { j < prefix } else { j < prefix || j <= i };
            if !allowed {
                m[i * total + j] = MASK_OFF;
            }
        }
    }
    Tensor::new(&[total, total], m).expect("mask shape matches data")
}

/// Local attention over a `rows x cols` grid flattened row-major: cell p
/// attends cell q iff their grid coordinates differ by at most `radius`
/// in both axes (radius 1 = a 3x3 window).
pub fn window_mask(rows: usize, cols: usize, radius: usize) -> Tensor {
    let n = rows * cols;
    let mut m = vec![0.0; n * n];
    for p in 0..n {
        let (pr, pc) = (p / cols, p % cols);
        for q in 0..n {
            let (qr, qc) = (q / cols, q % cols);
            if pr.abs_diff(qr) > radius || pc.abs_diff(qc) > radius {
                m[p * n + q] = MASK_OFF;
            }
        }
    }
    Tensor::new(&[n, n], m).expect("mask shape matches data")
}
