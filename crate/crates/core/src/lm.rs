//! Byte-level decoder-only language model with a bidirectional vision
//! prefix.
//!
//! Projected vision tokens occupy the first rows of the sequence and attend
//! each other freely; text rows attend the whole prefix plus earlier text
//! (causal). Training is next-token prediction on the text span, gated by a
//! per-position loss mask.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::{prefix_causal_mask, LayerNorm, Linear, ParamBuilder, Parameter, TransformerBlock};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Byte values are shifted past the reserved specials.
pub const BYTE_OFFSET: usize = 3;

const CHARSET_LO: u8 = 0x20;
const CHARSET_HI: u8 = 0x7e;

/// Stateless byte tokenizer over printable ASCII.
pub struct ByteTokenizer;

impl ByteTokenizer {
    /// Smallest vocab that covers every id the tokenizer can emit. Bytes
    /// keep their numeric values, so ids below `0x20 + 3` (other than the
    /// specials) are simply never produced.
    pub fn vocab_span() -> usize {
        CHARSET_HI as usize + BYTE_OFFSET + 1
    }

    pub fn encode(text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BOS);
        for b in text.bytes() {
            if !(CHARSET_LO..=CHARSET_HI).contains(&b) {
                return Err(CoreError::Tokenizer(format!(
                    "byte 0x{b:02x} is outside the printable-ASCII charset"
                )));
            }
            ids.push(b as usize + BYTE_OFFSET);
        }
        ids.push(EOS);
        Ok(ids)
    }

    pub fn decode(ids: &[usize]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            match id {
                PAD | BOS | EOS => {}
                _ => {
                    let b = id.checked_sub(BYTE_OFFSET).and_then(|b| u8::try_from(b).ok());
                    match b {
                        Some(b) if (CHARSET_LO..=CHARSET_HI).contains(&b) => out.push(b as char),
                        _ => {
                            return Err(CoreError::Tokenizer(format!(
                                "id {id} does not decode to a charset byte"
                            )))
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Caption sequence: every position after BOS carries loss.
    pub fn caption_sequence(text: &str) -> Result<TokenSequence> {
        let ids = ByteTokenizer::encode(text)?;
        let mut mask = vec![true; ids.len()];
        mask[0] = false;
        TokenSequence::new(ids, mask)
    }

    /// Instruction sequence `<question> <answer>`: only the answer bytes and
    /// the closing EOS carry loss.
    pub fn instruction_sequence(question: &str, answer: &str) -> Result<TokenSequence> {
        let ids = ByteTokenizer::encode(&format!("{question} {answer}"))?;
        let mut mask = vec![false; ids.len()];
        // BOS + question bytes + separator come first; everything after is
        // the answer span plus EOS.
        let answer_start = 1 + question.len() + 1;
        for m in mask.iter_mut().skip(answer_start) {
            *m = true;
        }
        TokenSequence::new(ids, mask)
    }
}

/// Token ids with a per-position loss gate.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<TokenSequence> {
        if ids.len() != loss_mask.len() {
            return Err(CoreError::argument(
                "token_sequence",
                format!("{} ids but {} mask entries", ids.len(), loss_mask.len()),
            ));
        }
        Ok(TokenSequence { ids, loss_mask })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LMConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_seq: usize,
}

impl Default for LMConfig {
    fn default() -> Self {
        LMConfig { d_model: 128, layers: 4, heads: 4, vocab: 512, max_seq: 256 }
    }
}

impl LMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.vocab < ByteTokenizer::vocab_span() {
            return Err(CoreError::Config(format!(
                "vocab {} does not cover the tokenizer's {} ids",
                self.vocab,
                ByteTokenizer::vocab_span()
            )));
        }
        if self.layers == 0 || self.max_seq == 0 {
            return Err(CoreError::Config("layers and max_seq must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct ToyLm {
    cfg: LMConfig,
    embed: Parameter,
    pos: Parameter,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    head: Linear,
}

impl ToyLm {
    /// Parameter names live under the `lm.` prefix.
    pub fn new(cfg: &LMConfig, pb: &mut ParamBuilder) -> Result<ToyLm> {
        cfg.validate()?;
        let embed = pb.normal("lm.embed", &[cfg.vocab, cfg.d_model])?;
        let pos = pb.normal("lm.pos", &[cfg.max_seq, cfg.d_model])?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            blocks.push(TransformerBlock::new(pb, &format!("lm.blk{i}"), cfg.d_model, cfg.heads)?);
        }
        let final_norm = LayerNorm::new(pb, "lm.final_norm", cfg.d_model)?;
        let head = Linear::new(pb, "lm.head", cfg.d_model, cfg.vocab, false)?;
        Ok(ToyLm { cfg: cfg.clone(), embed, pos, blocks, final_norm, head })
    }

    pub fn cfg(&self) -> &LMConfig {
        &self.cfg
    }

    fn embed_text(&self, text: &TokenSequence) -> Result<Tensor> {
        for &id in &text.ids {
            if id >= self.cfg.vocab {
                return Err(CoreError::Tokenizer(format!(
                    "token id {id} exceeds the vocab of {}",
                    self.cfg.vocab
                )));
            }
        }
        self.embed.tensor.select_rows(&text.ids)
    }

    /// Blocks then final norm, with the first `prefix` rows bidirectional.
    fn trunk(&self, x0: Tensor, prefix: usize) -> Result<Tensor> {
        let n = x0.shape()[0];
        let mask = prefix_causal_mask(prefix, n);
        let mut x = x0;
        for block in &self.blocks {
            x = block.forward(&x, &mask)?;
        }
        self.final_norm.forward(&x)
    }

    /// Logits at every position of `[vision rows; text rows]`.
    pub fn forward(&self, vision_embeds: &Tensor, text: &TokenSequence) -> Result<Tensor> {
        let &[l, width] = vision_embeds.shape() else {
            return Err(CoreError::dimension(
                "lm_forward",
                format!("vision embeddings must be rank 2, got {:?}", vision_embeds.shape()),
            ));
        };
        if width != self.cfg.d_model {
            return Err(CoreError::dimension(
                "lm_forward",
                format!("vision embedding width {width}, model width {}", self.cfg.d_model),
            ));
        }
        let total = l + text.len();
        if total > self.cfg.max_seq {
            return Err(CoreError::SequenceLength(format!(
                "{l} vision + {} text tokens exceed max_seq {}",
                text.len(),
                self.cfg.max_seq
            )));
        }
        let rows = Tensor::concat(&[vision_embeds.clone(), self.embed_text(text)?], 0)?;
        let x0 = rows.add(&self.pos.tensor.narrow(0, 0, total)?)?;
        let hidden = self.trunk(x0, l)?;
        self.head.forward(&hidden)
    }

    /// Final-layer hidden states of a text-only causal pass; the alignment
    /// probe reads these as the text representation.
    pub fn hidden_states(&self, text: &TokenSequence) -> Result<Tensor> {
        if text.is_empty() {
            return Err(CoreError::argument("hidden_states", "empty token sequence"));
        }
        if text.len() > self.cfg.max_seq {
            return Err(CoreError::SequenceLength(format!(
                "{} text tokens exceed max_seq {}",
                text.len(),
                self.cfg.max_seq
            )));
        }
        let x0 = self.embed_text(text)?.add(&self.pos.tensor.narrow(0, 0, text.len())?)?;
        self.trunk(x0, 0)
    }

    pub fn collect_params(&self, out: &mut Vec<Parameter>) {
        out.push(self.embed.clone());
        out.push(self.pos.clone());
        for block in &self.blocks {
            block.collect_params(out);
        }
        self.final_norm.collect_params(out);
        self.head.collect_params(out);
    }
}

/// Mean next-token cross-entropy over the gated text positions: the logit
/// row at `L + i - 1` predicts `text.ids[i]` wherever `loss_mask[i]` is set
/// (i >= 1; vision rows and BOS are never targets).
pub fn caption_loss(logits: &Tensor, text: &TokenSequence) -> Result<Tensor> {
    let &[rows, vocab] = logits.shape() else {
        return Err(CoreError::dimension(
            "caption_loss",
            format!("logits must be rank 2, got {:?}", logits.shape()),
        ));
    };
    let len = text.len();
    if rows < len {
        return Err(CoreError::dimension(
            "caption_loss",
            format!("{rows} logit rows cannot cover {len} text positions"),
        ));
    }
    let l = rows - len;
    let mut positions = Vec::new();
    for i in 1..len {
        if text.loss_mask[i] {
            if text.ids[i] >= vocab {
                return Err(CoreError::Tokenizer(format!(
                    "target id {} exceeds the vocab of {vocab}",
                    text.ids[i]
                )));
            }
            positions.push(i);
        }
    }
    if positions.is_empty() {
        return Err(CoreError::argument(
            "caption_loss",
            "loss mask selects no predictable position",
        ));
    }
    let pred_rows: Vec<usize> = positions.iter().map(|&i| l + i - 1).collect();
    let mut targets = vec![0.0; positions.len() * vocab];
    for (row, &i) in positions.iter().enumerate() {
        targets[row * vocab + text.ids[i]] = 1.0;
    }
    let selected = logits.select_rows(&pred_rows)?;
    selected.softmax_cross_entropy_rows(&Tensor::new(&[positions.len(), vocab], targets)?)
}
