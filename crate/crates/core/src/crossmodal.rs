//! Cross-modal encoder.
//!
//! Queries come from the region features plus the command-derived position
//! token `l_q`; keys from the emotion embedding stacked on the text vector plus
//! the image-derived token `l_k`; values from the context vector. The context
//! has a different row count from the keys, so it is first pooled onto the key
//! rows by a learned attention (key rows act as the pooling queries). Head
//! outputs are summed, not concatenated, and the projected query input is
//! added back as a residual. A self-attention block then fuses the result.

use crate::autograd::NodeId;
use crate::config::ModelConfig;
use crate::encoders::EncoderOutputs;
use crate::error::{Error, Result};
use crate::nn::{attention_probs, EncoderBlock, Linear};
use crate::params::{Binder, ParamBuilder, ParamId};

/// `l_q` is `[N × d_vision]`, `l_k` is `[(1 + tokens) × d]`.
#[derive(Clone, Copy, Debug)]
pub struct PositionTokens {
    pub l_q: NodeId,
    pub l_k: NodeId,
}

/// Small embedding network standing in for a pretrained single-stream model:
/// mean-pooled command embeddings give `l_q`, mean-pooled patch embeddings give `l_k`.
#[derive(Clone, Debug)]
pub struct PositionTokenNet {
    pub command_embed: ParamId,
    pub q_proj: Linear,
    pub patch_embed: Linear,
    pub k_proj: Linear,
}

impl PositionTokenNet {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        Ok(PositionTokenNet {
            command_embed: pb.uniform("position.command_embed", vocab_size, cfg.d, cfg.d)?,
            q_proj: Linear::new(pb, "position.q_proj", cfg.d, cfg.d_vision)?,
            patch_embed: Linear::new(pb, "position.patch_embed", cfg.patch_width, cfg.d)?,
            k_proj: Linear::new(pb, "position.k_proj", cfg.d, cfg.d)?,
        })
    }

    pub fn forward(
        &self,
        b: &mut Binder,
        tokens: &[usize],
        patches: NodeId,
        n_regions: usize,
    ) -> Result<PositionTokens> {
        let table = b.p(self.command_embed)?;
        let emb = b.graph.gather(table, tokens)?;
        let pooled = b.graph.mean_rows(emb)?;
        let q = self.q_proj.forward(b, pooled)?;
        let q = b.graph.tanh(q)?;
        let l_q = b.graph.tile_rows(q, n_regions)?;

        let pe = self.patch_embed.forward(b, patches)?;
        let pooled = b.graph.mean_rows(pe)?;
        let k = self.k_proj.forward(b, pooled)?;
        let k = b.graph.tanh(k)?;
        let l_k = b.graph.tile_rows(k, tokens.len() + 1)?;
        Ok(PositionTokens { l_q, l_k })
    }
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    /// `[width × d_k]`
    pub wq: ParamId,
    /// `[width × d_k]`
    pub wk: ParamId,
    /// `[value width × width]`
    pub wv: ParamId,
}

#[derive(Clone, Debug)]
pub struct CrossModalAttention {
    pub query_in: Linear,
    pub key_in: Linear,
    pub align_q: Linear,
    pub align_k: Linear,
    pub heads: Vec<HeadParams>,
    pub width: usize,
    pub d_k: usize,
    pub swap: bool,
}

/// Result of [`CrossModalAttention::forward`].
#[derive(Clone, Debug)]
pub struct CrossModalOutput {
    /// `[query rows × width]`
    pub alpha: NodeId,
    /// Per-head `[query rows × key rows]` probabilities.
    pub attention_maps: Vec<NodeId>,
    /// Context → key-row pooling probabilities.
    pub alignment: NodeId,
    /// Projected query input (also the residual term).
    pub query: NodeId,
    /// Projected key input.
    pub key: NodeId,
}

impl CrossModalAttention {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let w = cfg.cross_width;
        let h = cfg.cross_heads;
        if h == 0 || w % h != 0 {
            return Err(Error::Config(format!(
                "cross-modal heads {h} do not divide projection width {w}"
            )));
        }
        let d_k = w / h;
        let (q_src, k_src) = if cfg.qk_swap {
            (cfg.d, cfg.d_vision)
        } else {
            (cfg.d_vision, cfg.d)
        };
        let heads = (0..h)
            .map(|i| {
                Ok(HeadParams {
                    wq: pb.uniform(&format!("cross.head{i}.wq"), w, d_k, w)?,
                    wk: pb.uniform(&format!("cross.head{i}.wk"), w, d_k, w)?,
                    wv: pb.uniform(&format!("cross.head{i}.wv"), cfg.d, w, cfg.d)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(CrossModalAttention {
            query_in: Linear::new(pb, "cross.query_in", q_src, w)?,
            key_in: Linear::new(pb, "cross.key_in", k_src, w)?,
            align_q: Linear::no_bias(pb, "cross.align_q", w, cfg.d)?,
            align_k: Linear::no_bias(pb, "cross.align_k", cfg.d, cfg.d)?,
            heads,
            width: w,
            d_k,
            swap: cfg.qk_swap,
        })
    }

    /// Pools the context rows onto the key rows: `softmax((K·A_q)(C·A_k)ᵀ/√d)·C`.
    pub fn align_values(&self, b: &mut Binder, key: NodeId, context: NodeId) -> Result<(NodeId, NodeId)> {
        let q = self.align_q.forward(b, key)?;
        let k = self.align_k.forward(b, context)?;
        let p = attention_probs(b, q, k, None)?;
        let v = b.graph.matmul(p, context)?;
        Ok((v, p))
    }

    /// `Σ_i softmax(Q_i K_iᵀ/√d_k) V_i + query`, with `Q_i = query·W^Q_i`,
    /// `K_i = key·W^K_i`, `V_i = values·W^V_i`.
    pub fn attend(
        &self,
        b: &mut Binder,
        query: NodeId,
        key: NodeId,
        values: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let mut alpha = query;
        let mut maps = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            let wq = b.p(h.wq)?;
            let wk = b.p(h.wk)?;
            let wv = b.p(h.wv)?;
            let q = b.graph.matmul(query, wq)?;
            let k = b.graph.matmul(key, wk)?;
            let v = b.graph.matmul(values, wv)?;
            let p = attention_probs(b, q, k, None)?;
            let head = b.graph.matmul(p, v)?;
            alpha = b.graph.add(alpha, head)?;
            maps.push(p);
        }
        Ok((alpha, maps))
    }

    pub fn forward(
        &self,
        b: &mut Binder,
        outs: &EncoderOutputs,
        tokens: &PositionTokens,
    ) -> Result<CrossModalOutput> {
        let vision = b.graph.add(outs.o_vision, tokens.l_q)?;
        let emo_text = b.graph.concat_rows(&[outs.o_emo, outs.o_text])?;
        let emo_text = b.graph.add(emo_text, tokens.l_k)?;
        let (q_src, k_src) = if self.swap {
            (emo_text, vision)
        } else {
            (vision, emo_text)
        };
        let query = self.query_in.forward(b, q_src)?;
        let key = self.key_in.forward(b, k_src)?;
        let (values, alignment) = self.align_values(b, key, outs.o_context)?;
        let (alpha, attention_maps) = self.attend(b, query, key, values)?;
        Ok(CrossModalOutput {
            alpha,
            attention_maps,
            alignment,
            query,
            key,
        })
    }
}

/// One self-attention encoder block over the rows of `alpha`, producing width `d`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub in_proj: Option<Linear>,
    pub block: EncoderBlock,
}

impl Fusion {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let in_proj = if cfg.cross_width != cfg.d {
            Some(Linear::new(pb, "fuse.in_proj", cfg.cross_width, cfg.d)?)
        } else {
            None
        };
        Ok(Fusion {
            in_proj,
            block: EncoderBlock::new(pb, "fuse.block", cfg.d, cfg.cross_heads, cfg.ffn_ratio, cfg.ln_eps)?,
        })
    }

    pub fn forward(&self, b: &mut Binder, alpha: NodeId) -> Result<NodeId> {
        let x = match &self.in_proj {
            Some(p) => p.forward(b, alpha)?,
            None => alpha,
        };
        self.block.forward(b, x, None)
    }
}
