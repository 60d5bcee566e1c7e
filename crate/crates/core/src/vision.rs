//! Prompt-conditioned vision encoder.
//!
//! The depth path turns an image into patch tokens (patchify, linear map,
//! one windowed-attention block) and projects them to the multimodal width:
//! feature V. The breadth path appends embedded prompt tokens to V, runs a
//! small bidirectional encoder, and keeps the updated vision rows: one
//! feature V' per task prompt.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{window_mask, LayerNorm, Linear, ParamBuilder, Parameter, TransformerBlock};
use crate::tensor::Tensor;

/// An H x W x 3 image with every value in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageTensor {
    pixels: Tensor,
}

impl ImageTensor {
    pub fn new(pixels: Tensor) -> Result<ImageTensor> {
        let shape = pixels.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(CoreError::argument(
                "image",
                format!("expected H x W x 3 pixels, got shape {shape:?}"),
            ));
        }
        if let Some(bad) = pixels.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::argument(
                "image",
                format!("pixel value {bad} outside [0, 1]"),
            ));
        }
        Ok(ImageTensor { pixels })
    }

    pub fn from_rows(h: usize, w: usize, data: Vec<f64>) -> Result<ImageTensor> {
        ImageTensor::new(Tensor::new(&[h, w, 3], data)?)
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn h(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn w(&self) -> usize {
        self.pixels.shape()[1]
    }
}

/// The three closed-class task prompts. Declaration order is the canonical
/// feature order used by fusion and checkpoints.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptTask {
    DetailedCaption,
    Ocr,
    DenseRegionCaption,
}

impl PromptTask {
    pub const ALL: [PromptTask; 3] =
        [PromptTask::DetailedCaption, PromptTask::Ocr, PromptTask::DenseRegionCaption];

    /// Canonical prompt string, fixed verbatim; manifests and the CLI rely
    /// on these exact bytes.
    pub fn prompt_text(self) -> &'static str {
        match self {
            PromptTask::DetailedCaption => "describe what is shown in the image with a paragraph",
            PromptTask::Ocr => "provide the text shown in the image",
            PromptTask::DenseRegionCaption => {
                "locate the objects in the image, with their descriptions"
            }
        }
    }

    /// Short name used in CLI masks, file names, and reports.
    pub fn label(self) -> &'static str {
        match self {
            PromptTask::DetailedCaption => "caption",
            PromptTask::Ocr => "ocr",
            PromptTask::DenseRegionCaption => "grounding",
        }
    }

    pub fn from_label(label: &str) -> Option<PromptTask> {
        PromptTask::ALL.into_iter().find(|t| t.label() == label)
    }
}

/// Depth feature V: one row per patch at the multimodal width.
#[derive(Clone)]
pub struct VisionTokens {
    pub v: Tensor,
}

/// The depth feature plus one breadth feature per requested task. All
/// tensors share the shape N_v x D.
pub struct FeatureBundle {
    pub depth: VisionTokens,
    pub breadth: BTreeMap<PromptTask, Tensor>,
}

impl FeatureBundle {
    /// Member count k (depth plus breadth).
    pub fn k(&self) -> usize {
        1 + self.breadth.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Square patch extent in pixels.
    pub patch: usize,
    /// Width d' of raw patch features.
    pub d_backbone: usize,
    /// Multimodal width D shared by depth and breadth features.
    pub d: usize,
    /// Bidirectional blocks in the prompt-conditioned encoder.
    pub encoder_layers: usize,
    /// Attention heads (both the local block and the encoder blocks).
    pub heads: usize,
    /// Positional-table budget for prompt tokens; the longest canonical
    /// prompt is 10 words.
    pub n_t_max: usize,
    /// Square image extent the encoder is built for.
    pub image: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch: 8,
            d_backbone: 32,
            d: 64,
            encoder_layers: 2,
            heads: 4,
            n_t_max: 12,
            image: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image == 0 {
            return Err(CoreError::Config("patch and image extents must be positive".into()));
        }
        if self.image % self.patch != 0 {
            return Err(CoreError::Config(format!(
                "image extent {} is not divisible by patch {}",
                self.image, self.patch
            )));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "multimodal width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d_backbone % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "backbone width {} is not divisible by {} heads",
                self.d_backbone, self.heads
            )));
        }
        if self.encoder_layers == 0 {
            return Err(CoreError::Config("encoder needs at least one layer".into()));
        }
        Ok(())
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.image / self.patch
    }

    /// Patch token count N_v.
    pub fn n_v(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Whitespace tokenizer over the closed vocabulary of the three canonical
/// prompts.
#[derive(Debug)]
pub struct PromptVocab {
    words: BTreeMap<String, usize>,
}

impl PromptVocab {
    pub fn new() -> PromptVocab {
        let mut words = BTreeMap::new();
        for task in PromptTask::ALL {
            for word in task.prompt_text().split_whitespace() {
                let next = words.len();
                words.entry(word.to_string()).or_insert(next);
            }
        }
        PromptVocab { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn tokenize(&self, text: &str, max_len: usize) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let id = self.words.get(word).ok_or_else(|| {
                CoreError::Tokenizer(format!("word {word:?} is not in the prompt vocabulary"))
            })?;
            ids.push(*id);
        }
        if ids.len() > max_len {
            return Err(CoreError::Tokenizer(format!(
                "prompt is {} tokens, budget is {max_len}",
                ids.len()
            )));
        }
        Ok(ids)
    }
}

impl Default for PromptVocab {
    fn default() -> Self {
        PromptVocab::new()
    }
}

#[derive(Debug)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    vocab: PromptVocab,
    patch_proj: Linear,
    local_block: TransformerBlock,
    to_multimodal: Linear,
    norm: LayerNorm,
    prompt_embed: Parameter,
    pos_v: Parameter,
    pos_t: Parameter,
    blocks: Vec<TransformerBlock>,
}

impl VisionEncoder {
    /// Parameter names all live under the `vision.` prefix so the training
    /// stages can freeze the group wholesale.
    pub fn new(cfg: &EncoderConfig, pb: &mut ParamBuilder) -> Result<VisionEncoder> {
        cfg.validate()?;
        let vocab = PromptVocab::new();
        let patch_in = 3 * cfg.patch * cfg.patch;
        let mut blocks = Vec::with_capacity(cfg.encoder_layers);
        let patch_proj = Linear::new(pb, "vision.patch", patch_in, cfg.d_backbone, true)?;
        let local_block =
            TransformerBlock::new(pb, "vision.local", cfg.d_backbone, cfg.heads)?;
        let to_multimodal = Linear::new(pb, "vision.proj", cfg.d_backbone, cfg.d, true)?;
        let norm = LayerNorm::new(pb, "vision.norm", cfg.d)?;
        let prompt_embed = pb.normal("vision.prompt_embed", &[vocab.len(), cfg.d])?;
        let pos_v = pb.normal("vision.pos_v", &[cfg.n_v(), cfg.d])?;
        let pos_t = pb.normal("vision.pos_t", &[cfg.n_t_max, cfg.d])?;
        for i in 0..cfg.encoder_layers {
            blocks.push(TransformerBlock::new(pb, &format!("vision.enc{i}"), cfg.d, cfg.heads)?);
        }
        Ok(VisionEncoder {
            cfg: cfg.clone(),
            vocab,
            patch_proj,
            local_block,
            to_multimodal,
            norm,
            prompt_embed,
            pos_v,
            pos_t,
            blocks,
        })
    }

    pub fn cfg(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// Raw patch features: patchify in raster order, map linearly to the
    /// backbone width, and mix once with windowed attention (3x3 in the
    /// patch grid), so each row stays a local feature.
    pub fn patch_embed(&self, image: &ImageTensor) -> Result<Tensor> {
        let (h, w) = (image.h(), image.w());
        let p = self.cfg.patch;
        if h % p != 0 || w % p != 0 {
            return Err(CoreError::Config(format!(
                "image {h}x{w} is not divisible by patch {p}"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let pix = image.pixels().data();
        let row_len = 3 * p * p;
        let mut rows = vec![0.0; gh * gw * row_len];
        for pr in 0..gh {
            for pc in 0..gw {
                let out = (pr * gw + pc) * row_len;
                let mut o = out;
                for dy in 0..p {
                    for dx in 0..p {
                        let src = ((pr * p + dy) * w + (pc * p + dx)) * 3;
                        rows[o..o + 3].copy_from_slice(&pix[src..src + 3]);
                        o += 3;
                    }
                }
            }
        }
        let tokens = Tensor::new(&[gh * gw, row_len], rows)?;
        let embedded = self.patch_proj.forward(&tokens)?;
        self.local_block.forward(&embedded, &window_mask(gh, gw, 1))
    }

    /// V: linear projection to the multimodal width, then layer norm.
    pub fn project_norm(&self, raw: &Tensor) -> Result<VisionTokens> {
        let v = self.norm.forward(&self.to_multimodal.forward(raw)?)?;
        Ok(VisionTokens { v })
    }

    /// V'_t: append embedded prompt tokens after the vision rows, run the
    /// bidirectional encoder, and keep the first N_v rows.
    pub fn encode_with_prompt(&self, v: &VisionTokens, task: PromptTask) -> Result<Tensor> {
        let n_v = v.v.shape()[0];
        if n_v != self.cfg.n_v() {
            return Err(CoreError::dimension(
                "encode_with_prompt",
                format!("positional table covers {} vision rows, got {n_v}", self.cfg.n_v()),
            ));
        }
        let ids = self.vocab.tokenize(task.prompt_text(), self.cfg.n_t_max)?;
        let t = self
            .prompt_embed
            .tensor
            .select_rows(&ids)?
            .add(&self.pos_t.tensor.narrow(0, 0, ids.len())?)?;
        let v_pos = v.v.add(&self.pos_v.tensor)?;
        let mut x = Tensor::concat(&[v_pos, t], 0)?;
        let mask = crate::nn::bidirectional_mask(n_v + ids.len());
        for block in &self.blocks {
            x = block.forward(&x, &mask)?;
        }
        x.narrow(0, 0, n_v)
    }

    /// Depth plus one breadth feature per requested task, computing V once.
    pub fn extract_bundle(
        &self,
        image: &ImageTensor,
        tasks: &BTreeSet<PromptTask>,
    ) -> Result<FeatureBundle> {
        if tasks.is_empty() {
            return Err(CoreError::argument("extract_bundle", "empty task set"));
        }
        let depth = self.project_norm(&self.patch_embed(image)?)?;
        let mut breadth = BTreeMap::new();
        for &task in tasks {
            breadth.insert(task, self.encode_with_prompt(&depth, task)?);
        }
        Ok(FeatureBundle { depth, breadth })
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        self.patch_proj.collect_params(out);
        self.local_block.collect_params(out);
        self.to_multimodal.collect_params(out);
        self.norm.collect_params(out);
        out.push(self.prompt_embed.clone());
        out.push(self.pos_v.clone());
        out.push(self.pos_t.clone());
        for block in &self.blocks {
            block.collect_params(out);
        }
    }
}
