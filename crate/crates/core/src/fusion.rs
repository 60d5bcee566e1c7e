//! Fusing a feature bundle into one token matrix and projecting it into the
//! language-model embedding space.
//!
//! Three strategies: concatenate along the token axis (k times the tokens),
//! average the k features elementwise (same shape), or concatenate along the
//! channel axis (same token count, k times the width).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{Linear, ParamBuilder, Parameter};
use crate::tensor::Tensor;
use crate::vision::{FeatureBundle, PromptTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    #[serde(rename = "token")]
    TokenIntegration,
    #[serde(rename = "pool")]
    AveragePooling,
    #[serde(rename = "channel")]
    ChannelIntegration,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::TokenIntegration,
        FusionStrategy::AveragePooling,
        FusionStrategy::ChannelIntegration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::TokenIntegration => "token",
            FusionStrategy::AveragePooling => "pool",
            FusionStrategy::ChannelIntegration => "channel",
        }
    }

    /// Input width a projector must accept for `k` fused features of width
    /// `d`.
    pub fn fused_width(self, k: usize, d: usize) -> usize {
        match self {
            FusionStrategy::ChannelIntegration => k * d,
            _ => d,
        }
    }
}

impl Default for FusionStrategy {
    fn default() -> Self {
        FusionStrategy::ChannelIntegration
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<FusionStrategy> {
        FusionStrategy::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                CoreError::Config(format!(
                    "unknown fusion strategy {s:?}, expected token | pool | channel"
                ))
            })
    }
}

/// One member of a feature bundle: the depth feature or one task's breadth
/// feature. Ordering matches the canonical fusion order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum FeatureKey {
    Depth,
    Task(PromptTask),
}

impl FeatureKey {
    pub fn label(self) -> &'static str {
        match self {
            FeatureKey::Depth => "depth",
            FeatureKey::Task(t) => t.label(),
        }
    }

    pub fn from_label(label: &str) -> Option<FeatureKey> {
        if label == "depth" {
            return Some(FeatureKey::Depth);
        }
        PromptTask::from_label(label).map(FeatureKey::Task)
    }
}

/// The bundle's members in canonical order: depth first, then task features
/// in task order.
pub fn canonical_order(bundle: &FeatureBundle) -> Vec<FeatureKey> {
    let mut order = vec![FeatureKey::Depth];
    order.extend(bundle.breadth.keys().map(|&t| FeatureKey::Task(t)));
    order
}

/// One matrix of fused vision features, remembering how it was made.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub tokens: Tensor,
    pub strategy: FusionStrategy,
    pub k: usize,
}

impl FusedFeatures {
    /// Token count L.
    pub fn l(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Channel width C.
    pub fn c(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Fuse the bundle members listed in `order` (each present member exactly
/// once) under the given strategy.
pub fn fuse(
    bundle: &FeatureBundle,
    strategy: FusionStrategy,
    order: &[FeatureKey],
) -> Result<FusedFeatures> {
    let mut expected = canonical_order(bundle);
    let mut given = order.to_vec();
    expected.sort_unstable();
    given.sort_unstable();
    if expected != given {
        return Err(CoreError::argument(
            "fuse",
            format!(
                "order {:?} must list each bundle member exactly once, bundle holds {:?}",
                order.iter().map(|k| k.label()).collect::<Vec<_>>(),
                expected.iter().map(|k| k.label()).collect::<Vec<_>>(),
            ),
        ));
    }

    let parts: Vec<Tensor> = order
        .iter()
        .map(|key| match key {
            FeatureKey::Depth => bundle.depth.v.clone(),
            FeatureKey::Task(t) => bundle.breadth[t].clone(),
        })
        .collect();
    combine(parts, strategy)
}

fn combine(parts: Vec<Tensor>, strategy: FusionStrategy) -> Result<FusedFeatures> {
    let k = parts.len();
    let tokens = match strategy {
        FusionStrategy::TokenIntegration => Tensor::concat(&parts, 0)?,
        FusionStrategy::ChannelIntegration => Tensor::concat(&parts, 1)?,
        FusionStrategy::AveragePooling => {
            let mut acc = parts[0].clone();
            for p in &parts[1..] {
                acc = acc.add(p)?;
            }
            acc.scale(1.0 / k as f64)
        }
    };
    Ok(FusedFeatures { tokens, strategy, k })
}

/// Fuse in canonical order.
pub fn fuse_canonical(bundle: &FeatureBundle, strategy: FusionStrategy) -> Result<FusedFeatures> {
    fuse(bundle, strategy, &canonical_order(bundle))
}

/// Fuse only the listed bundle members, in the given order. Unlike [`fuse`]
/// this accepts any nonempty duplicate-free subset, which is how ablations
/// drop the depth feature or individual prompt features.
pub fn fuse_subset(
    bundle: &FeatureBundle,
    strategy: FusionStrategy,
    keys: &[FeatureKey],
) -> Result<FusedFeatures> {
    if keys.is_empty() {
        return Err(CoreError::argument("fuse_subset", "empty feature subset"));
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut parts = Vec::with_capacity(keys.len());
    for &key in keys {
        if !seen.insert(key) {
            return Err(CoreError::argument(
                "fuse_subset",
                format!("feature {:?} listed twice", key.label()),
            ));
        }
        parts.push(match key {
            FeatureKey::Depth => bundle.depth.v.clone(),
            FeatureKey::Task(t) => bundle
                .breadth
                .get(&t)
                .ok_or_else(|| {
                    CoreError::argument(
                        "fuse_subset",
                        format!("bundle holds no {:?} feature", t.label()),
                    )
                })?
                .clone(),
        });
    }
    combine(parts, strategy)
}

/// Two-layer MLP mapping fused features into the language-model space,
/// built for one strategy and one input width (hidden width is 2x input).
#[derive(Debug)]
pub struct Projector {
    strategy: FusionStrategy,
    c_in: usize,
    w1: Linear,
    w2: Linear,
}

impl Projector {
    pub fn new(
        pb: &mut ParamBuilder,
        strategy: FusionStrategy,
        c_in: usize,
        d_model: usize,
    ) -> Result<Projector> {
        Ok(Projector {
            strategy,
            c_in,
            w1: Linear::new(pb, "projector.w1", c_in, 2 * c_in, true)?,
            w2: Linear::new(pb, "projector.w2", 2 * c_in, d_model, true)?,
        })
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.strategy
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn forward(&self, fused: &FusedFeatures) -> Result<Tensor> {
        if fused.strategy != self.strategy {
            return Err(CoreError::Config(format!(
                "projector was built for the {} strategy, features use {}",
                self.strategy, fused.strategy
            )));
        }
        if fused.c() != self.c_in {
            return Err(CoreError::Config(format!(
                "projector input width is {}, fused features have width {}",
                self.c_in,
                fused.c()
            )));
        }
        self.w2.forward(&self.w1.forward(&fused.tokens)?.gelu())
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.w1.collect_params(out);
        self.w2.collect_params(out);
    }
}
