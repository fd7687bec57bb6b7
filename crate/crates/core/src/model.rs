//! Full pipeline: encoders → cross-modal attention → fusion → decoder.

use crate::autograd::NodeId;
use crate::config::ModelConfig;
use crate::crossmodal::{CrossModalAttention, CrossModalOutput, Fusion, PositionTokenNet, PositionTokens};
use crate::data::{BBox, Sample, Scene};
use crate::decoder::{Decoder, DecoderTrace, Prediction};
use crate::encoders::{
    load_region_features, Command, ContextEncoder, EmotionClassifier, EmotionEncoder, EncoderOutputs,
    TextEncoder, Vocabulary,
};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Binder, ParamBuilder, ParamStore};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

/// Module layout. Holds parameter handles only; values live in the [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub text: TextEncoder,
    pub emotion: EmotionEncoder,
    pub context: ContextEncoder,
    pub position: PositionTokenNet,
    pub cross: CrossModalAttention,
    pub fusion: Fusion,
    pub decoder: Decoder,
    /// With swapped query/key roles the region rows come from the key side;
    /// this maps them to decoder width.
    pub swap_regions: Option<Linear>,
}

impl Architecture {
    pub fn build(pb: &mut ParamBuilder, cfg: &ModelConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(Architecture {
            text: TextEncoder::new(pb, cfg, vocab_size)?,
            emotion: EmotionEncoder::new(pb, cfg)?,
            context: ContextEncoder::new(pb, cfg)?,
            position: PositionTokenNet::new(pb, cfg, vocab_size)?,
            cross: CrossModalAttention::new(pb, cfg)?,
            fusion: Fusion::new(pb, cfg)?,
            decoder: Decoder::new(pb, cfg)?,
            swap_regions: if cfg.qk_swap {
                Some(Linear::new(pb, "decoder.swap_regions", cfg.cross_width, cfg.d)?)
            } else {
                None
            },
        })
    }
}

/// Trained (or freshly initialized) model: configuration, vocabulary and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    pub arch: Architecture,
}

/// Scene and command converted to tensors, ready for a forward pass.
#[derive(Clone, Debug)]
pub struct PreparedInput {
    pub scene_id: String,
    pub command: Command,
    pub regions: Tensor,
    pub patches: Tensor,
    pub boxes: Vec<BBox>,
}

impl PreparedInput {
    pub fn n_regions(&self) -> usize {
        self.boxes.len()
    }
}

/// Graph handles for every intermediate of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub encoders: EncoderOutputs,
    pub tokens: PositionTokens,
    pub cross: CrossModalOutput,
    pub alpha_bar: NodeId,
    pub decoder: DecoderTrace,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let arch = {
            let mut pb = ParamBuilder::new(&mut params, SeedTree::new(seed).child("init").rng());
            Architecture::build(&mut pb, &config, vocab.len())?
        };
        if config.freeze_emotion {
            params.set_frozen(arch.emotion.table, true);
        }
        Ok(Model {
            config,
            vocab,
            params,
            arch,
        })
    }

    /// Rebuilds the architecture for `config` and installs `params` after checking names and shapes.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, params: &ParamStore) -> Result<Self> {
        let mut model = Model::new(config, vocab, 0)?;
        model.params.load_from(params)?;
        if model.config.freeze_emotion {
            model.params.set_frozen(model.arch.emotion.table, true);
        }
        Ok(model)
    }

    pub fn prepare_scene(
        &self,
        scene: &Scene,
        command_text: &str,
        classifier: &dyn EmotionClassifier,
    ) -> Result<PreparedInput> {
        let command = Command::new(command_text, &self.vocab, self.config.max_len, classifier)?;
        self.prepare_with(scene, command)
    }

    pub fn prepare_with(&self, scene: &Scene, command: Command) -> Result<PreparedInput> {
        let regions = load_region_features(scene, self.config.d_vision)?;
        let patches = scene.patch_grid.to_tensor()?;
        let n = self.config.grid * self.config.grid;
        if patches.rows() != n || patches.cols() != self.config.patch_width {
            return Err(Error::Dimension(format!(
                "scene {}: patch grid [{}×{}] but the model expects [{n}×{}]",
                scene.id,
                patches.rows(),
                patches.cols(),
                self.config.patch_width
            )));
        }
        Ok(PreparedInput {
            scene_id: scene.id.clone(),
            command,
            regions,
            patches,
            boxes: scene.region_boxes(),
        })
    }

    pub fn prepare(&self, sample: &Sample, classifier: &dyn EmotionClassifier) -> Result<PreparedInput> {
        self.prepare_scene(&sample.scene, &sample.command, classifier)
    }

    pub fn forward(&self, b: &mut Binder, input: &PreparedInput) -> Result<ForwardTrace> {
        let a = &self.arch;
        let tokens = &input.command.tokens;
        let o_text = a.text.forward(b, tokens)?;
        let o_emo = a.emotion.forward(b, input.command.emotion)?;
        let o_vision = b.graph.constant(input.regions.clone())?;
        let patches = b.graph.constant(input.patches.clone())?;
        let o_context = a.context.forward(b, patches, o_text)?;
        let encoders = EncoderOutputs {
            o_text,
            o_emo,
            o_vision,
            o_context,
        };
        let pos = a.position.forward(b, tokens, patches, input.n_regions())?;
        let cross = a.cross.forward(b, &encoders, &pos)?;
        let alpha_bar = a.fusion.forward(b, cross.alpha)?;
        let regions = match &a.swap_regions {
            Some(p) => p.forward(b, cross.key)?,
            None => alpha_bar,
        };
        let decoder = a.decoder.forward(b, regions, pos.l_q, alpha_bar)?;
        Ok(ForwardTrace {
            encoders,
            tokens: pos,
            cross,
            alpha_bar,
            decoder,
        })
    }

    /// Per-region logits from an inference pass.
    pub fn logits(&self, input: &PreparedInput) -> Result<Vec<f64>> {
        let mut b = Binder::new(&self.params, false);
        let t = self.forward(&mut b, input)?;
        Ok(b.graph.value(t.decoder.logits).data().to_vec())
    }

    pub fn predict_prepared(&self, input: &PreparedInput, k: usize) -> Result<Prediction> {
        let logits = self.logits(input)?;
        Prediction::from_logits(&input.scene_id, &input.command.raw_text, &logits, &input.boxes, k)
    }

    pub fn predict(&self, scene: &Scene, command: &Command, k: usize) -> Result<Prediction> {
        let input = self.prepare_with(scene, command.clone())?;
        self.predict_prepared(&input, k)
    }

    /// Mean BCE between `sigmoid(logits)` and `targets`, with its parameter gradients.
    pub fn loss_and_grads(&self, input: &PreparedInput, targets: &[f64], eps: f64) -> Result<(f64, Vec<Tensor>)> {
        let mut b = Binder::new(&self.params, true);
        let loss = self.loss_node(&mut b, input, targets, eps)?;
        let value = b.graph.value(loss).data()[0];
        let grads = b.graph.backward(loss)?;
        Ok((value, b.param_grads(&grads)))
    }

    pub fn loss(&self, input: &PreparedInput, targets: &[f64], eps: f64) -> Result<f64> {
        let mut b = Binder::new(&self.params, false);
        let loss = self.loss_node(&mut b, input, targets, eps)?;
        Ok(b.graph.value(loss).data()[0])
    }

    fn loss_node(&self, b: &mut Binder, input: &PreparedInput, targets: &[f64], eps: f64) -> Result<NodeId> {
        if targets.len() != input.n_regions() {
            return Err(Error::Dimension(format!(
                "{} targets for {} regions",
                targets.len(),
                input.n_regions()
            )));
        }
        let t = self.forward(b, input)?;
        let p = b.graph.sigmoid(t.decoder.logits)?;
        b.graph.bce(p, targets, eps)
    }
}
