//! Layer building blocks shared by the encoders, the cross-modal encoder and the decoder.

use crate::autograd::NodeId;
use crate::error::{Error, Result};
use crate::params::{Binder, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Logit assigned to masked (padding) keys before the softmax.
pub const MASKED_LOGIT: f64 = -1e9;

/// `y = x·W + b`, with `W` stored as `[in × out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: pb.uniform(&format!("{name}.weight"), d_in, d_out, d_in)?,
            bias: Some(pb.constant(&format!("{name}.bias"), 1, d_out, 0.0)?),
            d_in,
            d_out,
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Linear {
            weight: pb.uniform(&format!("{name}.weight"), d_in, d_out, d_in)?,
            bias: None,
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let w = b.p(self.weight)?;
        let y = b.graph.matmul(x, w)?;
        match self.bias {
            Some(bias) => {
                let bias = b.p(bias)?;
                b.graph.add_row(y, bias)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::Config(format!("{name}: layer norm eps must be positive")));
        }
        Ok(LayerNorm {
            gamma: pb.constant(&format!("{name}.gamma"), 1, d, 1.0)?,
            beta: pb.constant(&format!("{name}.beta"), 1, d, 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let g = b.p(self.gamma)?;
        let bt = b.p(self.beta)?;
        b.graph.layer_norm(x, g, bt, self.eps)
    }
}

/// Standard multi-head attention: heads are concatenated and projected.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: NodeId,
    /// Per-head `[query rows × key rows]` probabilities.
    pub probs: Vec<NodeId>,
}

/// Additive mask `[n_q × n_k]`: 0 for live keys, [`MASKED_LOGIT`] for padding.
pub fn key_mask_tensor(n_q: usize, key_live: &[bool]) -> Tensor {
    let row: Vec<f64> = key_live
        .iter()
        .map(|&live| if live { 0.0 } else { MASKED_LOGIT })
        .collect();
    let data = (0..n_q).flat_map(|_| row.iter().copied()).collect();
    Tensor::matrix(n_q, key_live.len(), data).expect("mask shape")
}

/// `softmax(q·kᵀ/√d_k + mask)`; returns the probability node.
pub fn attention_probs(
    b: &mut Binder,
    q: NodeId,
    k: NodeId,
    key_live: Option<&[bool]>,
) -> Result<NodeId> {
    let dk = b.graph.shape(q).1;
    let scores = b.graph.matmul_nt(q, k)?;
    let mut scores = b.graph.scale(scores, 1.0 / (dk as f64).sqrt())?;
    if let Some(live) = key_live {
        let (nq, nk) = b.graph.shape(scores);
        if live.len() != nk {
            return Err(Error::Dimension(format!(
                "key mask has {} entries for {nk} keys",
                live.len()
            )));
        }
        if !live.iter().any(|&l| l) {
            return Err(Error::Validation("attention mask hides every key".into()));
        }
        scores = b.graph.add_const(scores, &key_mask_tensor(nq, live))?;
    }
    b.graph.softmax_rows(scores)
}

impl MultiHeadAttention {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: {heads} heads do not divide width {d}"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(pb, &format!("{name}.q"), d, d)?,
            k: Linear::new(pb, &format!("{name}.k"), d, d)?,
            v: Linear::new(pb, &format!("{name}.v"), d, d)?,
            out: Linear::new(pb, &format!("{name}.out"), d, d)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        b: &mut Binder,
        x_q: NodeId,
        x_kv: NodeId,
        key_live: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let q = self.q.forward(b, x_q)?;
        let k = self.k.forward(b, x_kv)?;
        let v = self.v.forward(b, x_kv)?;
        let d = b.graph.shape(q).1;
        let dh = d / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    b.graph.slice_cols(q, h * dh, dh)?,
                    b.graph.slice_cols(k, h * dh, dh)?,
                    b.graph.slice_cols(v, h * dh, dh)?,
                )
            };
            let p = attention_probs(b, qh, kh, key_live)?;
            outs.push(b.graph.matmul(p, vh)?);
            probs.push(p);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            b.graph.concat_cols(&outs)?
        };
        Ok(AttentionOutput {
            out: self.out.forward(b, cat)?,
            probs,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(FeedForward {
            up: Linear::new(pb, &format!("{name}.up"), d, hidden)?,
            down: Linear::new(pb, &format!("{name}.down"), hidden, d)?,
        })
    }

    pub fn forward(&self, b: &mut Binder, x: NodeId) -> Result<NodeId> {
        let h = self.up.forward(b, x)?;
        let h = b.graph.gelu(h)?;
        self.down.forward(b, h)
    }
}

/// Post-norm transformer encoder block: self-attention then feed-forward,
/// each wrapped in a residual and a layer norm.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
}

impl EncoderBlock {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        d: usize,
        heads: usize,
        ffn_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(EncoderBlock {
            attn: MultiHeadAttention::new(pb, &format!("{name}.attn"), d, heads)?,
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), d, eps)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d, d * ffn_ratio)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), d, eps)?,
        })
    }

    pub fn forward(&self, b: &mut Binder, x: NodeId, key_live: Option<&[bool]>) -> Result<NodeId> {
        let a = self.attn.forward(b, x, x, key_live)?;
        let h = b.graph.add(x, a.out)?;
        let h = self.ln1.forward(b, h)?;
        let f = self.ffn.forward(b, h)?;
        let o = b.graph.add(h, f)?;
        self.ln2.forward(b, o)
    }
}
