//! Text, emotion, vision and context encoders.

pub mod emotion;
pub mod tokenizer;

use crate::autograd::NodeId;
use crate::config::ModelConfig;
use crate::data::Scene;
use crate::error::{Error, Result};
use crate::nn::{EncoderBlock, LayerNorm, Linear};
use crate::params::{Binder, ParamBuilder, ParamId};
use crate::tensor::Tensor;

pub use emotion::{classify_rule, EmotionCategory, EmotionClassifier, RuleClassifier};
pub use tokenizer::{tokenize, Tokenized, Vocabulary};

/// A tokenized command with its emotion category.
#[derive(Clone, Debug, PartialEq)]
pub struct Command {
    pub raw_text: String,
    pub tokens: Vec<usize>,
    pub words: Vec<String>,
    pub truncated: bool,
    pub word_count: usize,
    pub emotion: EmotionCategory,
}

impl Command {
    pub fn new(
        raw_text: &str,
        vocab: &Vocabulary,
        max_len: usize,
        classifier: &dyn EmotionClassifier,
    ) -> Result<Self> {
        let t = tokenize(raw_text, vocab, max_len)?;
        let emotion = classifier.classify(raw_text)?.category;
        Ok(Command {
            raw_text: raw_text.to_string(),
            tokens: t.ids,
            words: t.words,
            truncated: t.truncated,
            word_count: raw_text.split_whitespace().count(),
            emotion,
        })
    }

    /// Rule-based emotion.
    pub fn parse(raw_text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        Command::new(raw_text, vocab, max_len, &RuleClassifier)
    }
}

/// Graph handles for the four encoder outputs.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutputs {
    /// `[tokens × d]`
    pub o_text: NodeId,
    /// `[1 × d]`
    pub o_emo: NodeId,
    /// `[N × d_vision]`
    pub o_vision: NodeId,
    /// `[(P² + tokens) × d]`
    pub o_context: NodeId,
}

/// Token + learned positional embeddings followed by bidirectional self-attention layers.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub ln: LayerNorm,
    pub blocks: Vec<EncoderBlock>,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl TextEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        let blocks = (0..cfg.text_layers)
            .map(|i| {
                EncoderBlock::new(pb, &format!("text.layer{i}"), cfg.d, cfg.text_heads, cfg.ffn_ratio, cfg.ln_eps)
            })
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            token_embed: pb.uniform("text.token_embed", vocab_size, cfg.d, cfg.d)?,
            pos_embed: pb.uniform("text.pos_embed", cfg.max_len, cfg.d, cfg.d)?,
            ln: LayerNorm::new(pb, "text.embed_ln", cfg.d, cfg.ln_eps)?,
            blocks,
            max_len: cfg.max_len,
            vocab_size,
        })
    }

    pub fn forward(&self, b: &mut Binder, tokens: &[usize]) -> Result<NodeId> {
        if tokens.is_empty() {
            return Err(Error::Validation("no tokens to encode".into()));
        }
        if tokens.len() > self.max_len {
            return Err(Error::Validation(format!(
                "{} tokens exceed the maximum length {}; truncate first",
                tokens.len(),
                self.max_len
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::Validation(format!(
                "token id {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = b.p(self.token_embed)?;
        let tok = b.graph.gather(table, tokens)?;
        let pos_table = b.p(self.pos_embed)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = b.graph.gather(pos_table, &positions)?;
        let x = b.graph.add(tok, pos)?;
        let mut x = self.ln.forward(b, x)?;
        for blk in &self.blocks {
            x = blk.forward(b, x, None)?;
        }
        Ok(x)
    }
}

/// Learned embedding table with one row per emotion category.
#[derive(Clone, Debug)]
pub struct EmotionEncoder {
    pub table: ParamId,
}

impl EmotionEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        Ok(EmotionEncoder {
            table: pb.uniform("emotion.table", EmotionCategory::ALL.len(), cfg.d, cfg.d)?,
        })
    }

    pub fn forward(&self, b: &mut Binder, category: EmotionCategory) -> Result<NodeId> {
        let t = b.p(self.table)?;
        b.graph.gather(t, &[category.index()])
    }
}

/// Stacks region feature vectors into `[N × d_vision]`, preserving region order.
pub fn load_region_features(scene: &Scene, d_vision: usize) -> Result<Tensor> {
    if scene.regions.is_empty() {
        return Err(Error::Validation(format!("scene {} has no regions", scene.id)));
    }
    let mut data = Vec::with_capacity(scene.regions.len() * d_vision);
    for (i, r) in scene.regions.iter().enumerate() {
        if r.features.len() != d_vision {
            return Err(Error::schema(
                format!("regions[{i}].features"),
                format!("length {} does not match d_vision = {d_vision}", r.features.len()),
            ));
        }
        data.extend_from_slice(&r.features);
    }
    Tensor::matrix(scene.regions.len(), d_vision, data)
}

/// Patch-transformer over the image grid whose outputs are concatenated with
/// the text vector and passed through a fusion block.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub patch_proj: Linear,
    pub patch_pos: ParamId,
    pub blocks: Vec<EncoderBlock>,
    pub to_d: Option<Linear>,
    pub fusion: EncoderBlock,
    pub n_patches: usize,
    pub patch_width: usize,
}

impl ContextEncoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let n_patches = cfg.grid * cfg.grid;
        let w = cfg.context_width;
        let blocks = (0..cfg.context_layers)
            .map(|i| {
                EncoderBlock::new(pb, &format!("context.layer{i}"), w, cfg.context_heads, cfg.ffn_ratio, cfg.ln_eps)
            })
            .collect::<Result<_>>()?;
        let to_d = if w != cfg.d {
            Some(Linear::new(pb, "context.to_d", w, cfg.d)?)
        } else {
            None
        };
        Ok(ContextEncoder {
            patch_proj: Linear::new(pb, "context.patch_proj", cfg.patch_width, w)?,
            patch_pos: pb.uniform("context.patch_pos", n_patches, w, w)?,
            blocks,
            to_d,
            fusion: EncoderBlock::new(pb, "context.fusion", cfg.d, cfg.context_heads, cfg.ffn_ratio, cfg.ln_eps)?,
            n_patches,
            patch_width: cfg.patch_width,
        })
    }

    pub fn forward(&self, b: &mut Binder, patches: NodeId, o_text: NodeId) -> Result<NodeId> {
        let (n, w) = b.graph.shape(patches);
        if n != self.n_patches || w != self.patch_width {
            return Err(Error::Dimension(format!(
                "patch grid [{n}×{w}] does not match configured [{}×{}]",
                self.n_patches, self.patch_width
            )));
        }
        let x = self.patch_proj.forward(b, patches)?;
        let pos = b.p(self.patch_pos)?;
        let mut x = b.graph.add(x, pos)?;
        for blk in &self.blocks {
            x = blk.forward(b, x, None)?;
        }
        if let Some(p) = &self.to_d {
            x = p.forward(b, x)?;
        }
        let (_, xw) = b.graph.shape(x);
        let (_, tw) = b.graph.shape(o_text);
        if xw != tw {
            return Err(Error::Config(format!(
                "patch encoder width {xw} does not match text width {tw}"
            )));
        }
        let joined = b.graph.concat_rows(&[x, o_text])?;
        self.fusion.forward(b, joined, None)
    }
}
