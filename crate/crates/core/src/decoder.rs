//! Multimodal decoder: stacked layers over region rows with the command
//! position token fed into every layer, per-region attention over all layer
//! states (RSD), and an MLP head scoring each region.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_in_place, NodeId};
use crate::config::ModelConfig;
use crate::data::BBox;
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{Binder, ParamBuilder, ParamId};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub ln1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
    pub ln3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d;
        Ok(DecoderLayer {
            self_attn: MultiHeadAttention::new(pb, &format!("{name}.self_attn"), d, cfg.decoder_heads)?,
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), d, cfg.ln_eps)?,
            cross_attn: MultiHeadAttention::new(pb, &format!("{name}.cross_attn"), d, cfg.decoder_heads)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), d, cfg.ln_eps)?,
            ffn: FeedForward::new(pb, &format!("{name}.ffn"), d, d * cfg.ffn_ratio)?,
            ln3: LayerNorm::new(pb, &format!("{name}.ln3"), d, cfg.ln_eps)?,
        })
    }

    pub fn forward(&self, b: &mut Binder, x: NodeId, memory: NodeId) -> Result<NodeId> {
        let a = self.self_attn.forward(b, x, x, None)?;
        let h = b.graph.add(x, a.out)?;
        let h = self.ln1.forward(b, h)?;
        let c = self.cross_attn.forward(b, h, memory, None)?;
        let h2 = b.graph.add(h, c.out)?;
        let h2 = self.ln2.forward(b, h2)?;
        let f = self.ffn.forward(b, h2)?;
        let o = b.graph.add(h2, f)?;
        self.ln3.forward(b, o)
    }
}

/// Additive layer scoring `s_l = u·tanh(W·h_l + b)`, shared across regions and layers.
#[derive(Clone, Debug)]
pub struct RsdAttention {
    pub proj: Linear,
    pub u: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub lq_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub rsd: RsdAttention,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

/// Graph handles for one decoding pass.
#[derive(Clone, Debug)]
pub struct DecoderTrace {
    /// `m + 1` states of shape `[N × d]`; index 0 is the embedding layer.
    pub stack: Vec<NodeId>,
    /// `[N × (m + 1)]`
    pub rsd_weights: NodeId,
    /// `[N × 1]`
    pub logits: NodeId,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        if cfg.decoder_layers == 0 {
            return Err(Error::Config("model.decoder_layers must be at least 1".into()));
        }
        let d = cfg.d;
        let layers = (0..cfg.decoder_layers)
            .map(|i| DecoderLayer::new(pb, &format!("decoder.layer{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Decoder {
            lq_proj: Linear::new(pb, "decoder.lq_proj", cfg.d_vision, d)?,
            layers,
            rsd: RsdAttention {
                proj: Linear::new(pb, "decoder.rsd.proj", d, d)?,
                u: pb.uniform("decoder.rsd.u", d, 1, d)?,
            },
            mlp_hidden: Linear::new(pb, "decoder.mlp.hidden", d, d)?,
            mlp_out: Linear::new(pb, "decoder.mlp.out", d, 1)?,
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Runs the layers, adding the projected `l_q` to every layer input, and
    /// records all `m + 1` states.
    pub fn decode_stack(
        &self,
        b: &mut Binder,
        regions: NodeId,
        l_q: NodeId,
        memory: NodeId,
    ) -> Result<Vec<NodeId>> {
        let skip = self.lq_proj.forward(b, l_q)?;
        let mut stack = Vec::with_capacity(self.layers.len() + 1);
        stack.push(regions);
        let mut x = regions;
        for (i, layer) in self.layers.iter().enumerate() {
            x = (|| {
                let input = b.graph.add(x, skip)?;
                layer.forward(b, input, memory)
            })()
            .map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("decoder layer {}: {m}", i + 1)),
                other => other,
            })?;
            stack.push(x);
        }
        Ok(stack)
    }

    /// Softmax over layers of the per-region scores; `[N × (m + 1)]`.
    pub fn rsd_weights(&self, b: &mut Binder, stack: &[NodeId]) -> Result<NodeId> {
        let u = b.p(self.rsd.u)?;
        let mut scores = Vec::with_capacity(stack.len());
        for &h in stack {
            let t = self.rsd.proj.forward(b, h)?;
            let t = b.graph.tanh(t)?;
            scores.push(b.graph.matmul(t, u)?);
        }
        let s = b.graph.concat_cols(&scores)?;
        b.graph.softmax_rows(s)
    }

    /// `Σ_l w_il·h_l` per region.
    pub fn fuse_layers(&self, b: &mut Binder, stack: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let mut fused = None;
        for (l, &h) in stack.iter().enumerate() {
            let w = b.graph.slice_cols(weights, l, 1)?;
            let term = b.graph.mul_col(h, w)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => b.graph.add(acc, term)?,
            });
        }
        fused.ok_or_else(|| Error::Validation("empty layer stack".into()))
    }

    /// Region logits `[N × 1]` from the RSD-fused representations.
    pub fn credibility_logits(&self, b: &mut Binder, stack: &[NodeId], weights: NodeId) -> Result<NodeId> {
        let fused = self.fuse_layers(b, stack, weights)?;
        let h = self.mlp_hidden.forward(b, fused)?;
        let h = b.graph.gelu(h)?;
        self.mlp_out.forward(b, h)
    }

    pub fn forward(&self, b: &mut Binder, regions: NodeId, l_q: NodeId, memory: NodeId) -> Result<DecoderTrace> {
        let stack = self.decode_stack(b, regions, l_q, memory)?;
        let rsd_weights = self.rsd_weights(b, &stack)?;
        let logits = self.credibility_logits(b, &stack, rsd_weights)?;
        Ok(DecoderTrace {
            stack,
            rsd_weights,
            logits,
        })
    }
}

/// Softmax over region logits.
pub fn credibility(logits: &[f64]) -> Vec<f64> {
    let mut c = logits.to_vec();
    softmax_in_place(&mut c);
    c
}

/// Region indices by descending score; ties go to the lower index.
pub fn rank_regions(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scene_id: String,
    pub command: String,
    pub k: usize,
    pub credibility: Vec<f64>,
    pub ranked_regions: Vec<usize>,
    pub top_k: Vec<usize>,
    pub selected_region: usize,
    pub selected_box: BBox,
}

impl Prediction {
    pub fn from_logits(
        scene_id: &str,
        command: &str,
        logits: &[f64],
        boxes: &[BBox],
        k: usize,
    ) -> Result<Self> {
        if logits.len() != boxes.len() || logits.is_empty() {
            return Err(Error::Dimension(format!(
                "{} logits for {} regions",
                logits.len(),
                boxes.len()
            )));
        }
        if k == 0 || k > boxes.len() {
            return Err(Error::Validation(format!(
                "k = {k} outside 1..={}",
                boxes.len()
            )));
        }
        let credibility = credibility(logits);
        // rank on logits: softmax can collapse distinct logits to equal probabilities
        let ranked_regions = rank_regions(logits);
        let selected_region = ranked_regions[0];
        Ok(Prediction {
            scene_id: scene_id.to_string(),
            command: command.to_string(),
            k,
            top_k: ranked_regions[..k].to_vec(),
            selected_box: boxes[selected_region],
            selected_region,
            credibility,
            ranked_regions,
        })
    }
}
