//! The full sentiment model: encoders, personality alignment, pre-fusion,
//! cross-modal interaction, enhanced fusion and the prediction head.
//!
//! The alignment layer `k` picks which sentiment-side embedding is aligned
//! with the personality embedding:
//!
//! * `1..=N`: the [CLS] row after shallow text layer `k`;
//! * `N+1..=L`: the [CLS] row after continuing the text-only sequence
//!   through layer `k` of the same stack;
//! * `L+1`: a projection of the pooled visual and audio states
//!   (`align.va_proj`, `2 d_h x d_t`);
//! * `L+2`: the pre-fusion embedding `CLS_m`.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{alignment_loss, project, AlignmentHead, AlignmentOptions};
use crate::data::{Batch, PadLimits};
use crate::encoders::{linear, SequenceEncoder, TextStack};
use crate::error::{Error, Result};
use crate::fusion::{
    bypass_prefuse, crossmodal_attend, crossmodal_contrastive_loss, linear_head, parallel_fuse, predict, prefuse, serial_fuse,
    FusionConfig, ModalityStates,
};
use crate::params::{Init, ParamStore};
use crate::tape::{Activation, Graph, Var};
use crate::tensor::Matrix;

pub const SENTIMENT_PREFIX: &str = "text";
pub const PERSONALITY_PREFIX: &str = "personality";
pub const VISUAL_PREFIX: &str = "visual_lstm";
pub const AUDIO_PREFIX: &str = "audio_lstm";
pub const VA_PROJ: &str = "align.va_proj";

/// Architecture sizes and loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub text_dim: usize,
    pub personality_dim: usize,
    pub shared_dim: usize,
    pub fused_dim: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Sentiment text stack depth `L`.
    pub layers: usize,
    /// Shallow depth `N`; layers `N+1..L` form the pre-fusion encoder.
    pub split: usize,
    pub personality_layers: usize,
    pub max_positions: usize,
    pub max_text_len: Option<usize>,
    pub max_frames: Option<usize>,
    pub tau: f64,
    pub symmetric_contrastive: bool,
    pub clamp_similarity: bool,
    pub activation: Activation,
    /// Dropout on the prediction subnet's hidden layer.
    pub dropout: f64,
    /// Feed raw frame features to pre-fusion instead of recurrent states.
    pub prefuse_raw_features: bool,
    pub serial_layer_norm: bool,
    pub train_personality: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 1000,
            text_dim: 64,
            personality_dim: 64,
            shared_dim: 32,
            fused_dim: 64,
            hidden_dim: 32,
            heads: 4,
            ffn_dim: 128,
            layers: 6,
            split: 4,
            personality_layers: 2,
            max_positions: 64,
            max_text_len: None,
            max_frames: None,
            tau: 0.07,
            symmetric_contrastive: false,
            clamp_similarity: false,
            activation: Activation::Gelu,
            dropout: 0.0,
            prefuse_raw_features: false,
            serial_layer_norm: true,
            train_personality: false,
        }
    }
}

/// Module and loss switches used by the ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Toggles {
    pub use_align_ps: bool,
    pub use_clm: bool,
    pub use_personality: bool,
    pub use_prefusion: bool,
    pub use_enhanced_fusion: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self { use_align_ps: true, use_clm: true, use_personality: true, use_prefusion: true, use_enhanced_fusion: true }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.split < 1 || self.split >= self.layers {
            return bad(format!("split depth must satisfy 1 <= N < L, got N={} L={}", self.split, self.layers));
        }
        for (name, d) in [("text_dim", self.text_dim), ("personality_dim", self.personality_dim), ("fused_dim", self.fused_dim)] {
            if self.heads == 0 || d % self.heads != 0 {
                return bad(format!("heads ({}) must divide {name} ({d})", self.heads));
            }
        }
        if self.shared_dim == 0 || self.hidden_dim == 0 || self.ffn_dim == 0 || self.personality_layers == 0 {
            return bad("dimensions and depths must be positive".into());
        }
        if self.fused_dim < 3 {
            return bad(format!("fused_dim must be at least 3, got {}", self.fused_dim));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.vocab < 2 {
            return bad("vocab must hold at least the [CLS] and [PAD] ids".into());
        }
        Ok(())
    }

    pub fn alignment_options(&self) -> AlignmentOptions {
        AlignmentOptions { tau: self.tau, symmetric: self.symmetric_contrastive, clamp_similarity: self.clamp_similarity }
    }

    pub fn pad_limits(&self) -> PadLimits {
        PadLimits { max_text: self.max_text_len, max_frames: self.max_frames }
    }
}

/// Named loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l_ccl: Var,
    pub l_ps: Var,
    pub l_align: Var,
    pub l_clm: Var,
    pub l_task: Var,
    pub l_total: Var,
}

impl LossTerms {
    pub fn named(&self) -> [(&'static str, Var); 6] {
        [
            ("l_ccl", self.l_ccl),
            ("l_ps", self.l_ps),
            ("l_align", self.l_align),
            ("l_clm", self.l_clm),
            ("l_task", self.l_task),
            ("l_total", self.l_total),
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `N x 1` predictions.
    pub predictions: Var,
    pub cls_m: Var,
    /// Present when losses were requested.
    pub losses: Option<LossTerms>,
}

/// How a forward pass is run.
pub enum Mode<'a> {
    /// Losses computed; dropout drawn from the generator.
    Train(&'a mut ChaCha8Rng),
    /// Losses computed, no dropout.
    Probe,
    /// Predictions only; any batch size.
    Predict,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub toggles: Toggles,
    /// Resolved alignment layer in `1..=L+2`.
    pub alignment_layer: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    text: TextStack,
    personality: TextStack,
    visual: SequenceEncoder,
    audio: SequenceEncoder,
    fusion: FusionConfig,
    head: AlignmentHead,
}

impl Model {
    pub fn new(config: ModelConfig, toggles: Toggles, alignment_layer: usize, visual_dim: usize, audio_dim: usize) -> Result<Self> {
        config.validate()?;
        if alignment_layer < 1 || alignment_layer > config.layers + 2 {
            return Err(Error::InvalidConfig(format!("alignment_layer must be in 1..={}, got {alignment_layer}", config.layers + 2)));
        }
        let stack = |prefix: &str, width: usize, layers: usize| TextStack {
            prefix: prefix.into(),
            vocab: config.vocab,
            width,
            heads: config.heads,
            layers,
            ffn: config.ffn_dim,
            max_positions: config.max_positions,
            activation: config.activation,
        };
        let (pv, pa) = if config.prefuse_raw_features { (visual_dim, audio_dim) } else { (config.hidden_dim, config.hidden_dim) };
        Ok(Self {
            text: stack(SENTIMENT_PREFIX, config.text_dim, config.layers),
            personality: stack(PERSONALITY_PREFIX, config.personality_dim, config.personality_layers),
            visual: SequenceEncoder { prefix: VISUAL_PREFIX.into(), input_dim: visual_dim, hidden: config.hidden_dim },
            audio: SequenceEncoder { prefix: AUDIO_PREFIX.into(), input_dim: audio_dim, hidden: config.hidden_dim },
            fusion: FusionConfig {
                text_dim: config.text_dim,
                hidden_dim: config.hidden_dim,
                fused_dim: config.fused_dim,
                heads: config.heads,
                prefuse_visual_dim: pv,
                prefuse_audio_dim: pa,
                activation: config.activation,
            },
            head: AlignmentHead { sentiment_dim: config.text_dim, personality_dim: config.personality_dim, shared_dim: config.shared_dim },
            config,
            toggles,
            alignment_layer,
            visual_dim,
            audio_dim,
        })
    }

    pub fn text_stack(&self) -> &TextStack {
        &self.text
    }

    /// Freshly initialized parameters. Every module's parameters are
    /// created regardless of toggles; ablation stand-ins are added when
    /// their toggle is off.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        self.text.init_params(&mut store, seed);
        self.personality.init_params(&mut store, seed);
        self.visual.init_params(&mut store, seed);
        self.audio.init_params(&mut store, seed);
        self.fusion.init_params(&mut store, seed);
        self.head.init_params(&mut store, seed);
        store.init(seed, VA_PROJ, 2 * self.config.hidden_dim, self.config.text_dim, Init::Xavier);
        if !self.toggles.use_prefusion {
            self.fusion.init_bypass_params(&mut store, seed);
        }
        if !self.toggles.use_enhanced_fusion {
            self.fusion.init_linear_head_params(&mut store, seed);
        }
        store.set_trainable_prefix(&format!("{PERSONALITY_PREFIX}."), self.config.train_personality);
        store
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.visual.dim() != self.visual_dim || batch.audio.dim() != self.audio_dim {
            return Err(Error::ShapeMismatch {
                context: "batch feature widths".into(),
                expected: (self.visual_dim, self.audio_dim),
                found: (batch.visual.dim(), batch.audio.dim()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, batch: &Batch, mut mode: Mode<'_>) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let cfg = &self.config;
        let (n_layers, split) = (cfg.layers, cfg.split);
        let tokens = &batch.tokens;

        let shallow = self.text.encode(g, store, tokens, split)?;
        let cls_s = shallow.cls();
        let v_out = self.visual.encode(g, store, &batch.visual)?;
        let a_out = self.audio.encode(g, store, &batch.audio)?;
        let h_v = ModalityStates { states: v_out.states, mask: batch.visual.mask.clone(), len: batch.visual.len };
        let h_a = ModalityStates { states: a_out.states, mask: batch.audio.mask.clone(), len: batch.audio.len };

        let cls_m = if self.toggles.use_prefusion {
            let (pv, pa) = if cfg.prefuse_raw_features {
                let v = g.constant(batch.visual.data.clone());
                let a = g.constant(batch.audio.data.clone());
                (ModalityStates { states: v, ..h_v.clone() }, ModalityStates { states: a, ..h_a.clone() })
            } else {
                (h_v.clone(), h_a.clone())
            };
            prefuse(g, store, &self.text, split..n_layers, cls_s, &pv, &pa)?
        } else {
            bypass_prefuse(g, store, cls_s, &h_v, &h_a)
        };

        let it = crossmodal_attend(g, store, &self.fusion, cls_m, &h_v, &h_a)?;
        let predictions = if self.toggles.use_enhanced_fusion {
            let f_s = serial_fuse(g, store, it.visual_enhanced, it.audio_enhanced, it.query_enhanced, cfg.serial_layer_norm)?;
            let f_p = parallel_fuse(g, store, it.visual, it.audio, it.query)?;
            let dropout = match mode {
                Mode::Train(ref mut rng) if cfg.dropout > 0.0 => Some((cfg.dropout, &mut **rng)),
                _ => None,
            };
            predict(g, store, f_s, f_p, cfg.activation, dropout)?
        } else {
            linear_head(g, store, it.visual, it.audio, it.query)?
        };

        if matches!(mode, Mode::Predict) {
            return Ok(ForwardOutput { predictions, cls_m, losses: None });
        }

        let zero = g.constant(Matrix::scalar(0.0));
        let (l_ccl, l_ps, l_align) = if self.toggles.use_personality {
            let p = self.personality.encode(g, store, tokens, cfg.personality_layers)?;
            let anchor = match self.alignment_layer {
                k if k <= split => shallow.layer_cls[k - 1],
                k if k <= n_layers => self.text.run_layers(g, store, shallow.hidden, split..k, tokens.len, &tokens.mask).cls(),
                k if k == n_layers + 1 => {
                    let pv = crate::encoders::masked_mean(g, h_v.states, &h_v.mask, h_v.len);
                    let pa = crate::encoders::masked_mean(g, h_a.states, &h_a.mask, h_a.len);
                    let cat = g.concat_cols(&[pv, pa]);
                    linear(g, store, cat, VA_PROJ, None)
                }
                _ => cls_m,
            };
            let (ts, tp) = project(g, store, &self.head, anchor, p.cls())?;
            let l = alignment_loss(g, store, ts, tp, &batch.labels, &cfg.alignment_options(), self.toggles.use_align_ps)?;
            (l.l_ccl, l.l_ps, l.l_align)
        } else {
            (zero, zero, zero)
        };
        let l_clm = if self.toggles.use_clm { crossmodal_contrastive_loss(g, store, cls_s, &h_v, &h_a, cfg.tau)?.total } else { zero };
        let target = g.constant(Matrix::column(&batch.labels));
        let diff = g.sub(predictions, target);
        let diff = g.abs(diff);
        let l_task = g.mean_all(diff);
        let partial = g.add(l_align, l_clm);
        let l_total = g.add(partial, l_task);
        Ok(ForwardOutput { predictions, cls_m, losses: Some(LossTerms { l_ccl, l_ps, l_align, l_clm, l_task, l_total }) })
    }

    /// Predictions for a batch, in batch order.
    pub fn predict(&self, store: &ParamStore, batch: &Batch) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, store, batch, Mode::Predict)?;
        Ok(g.value(out.predictions).as_slice().to_vec())
    }
}

/// Parameter-name prefixes owned by one loss term or module.
pub fn dedicated_params(term: &str) -> &'static [&'static str] {
    match term {
        "l_ps" => &["align.w_regression"],
        "l_clm" => &["clm."],
        "l_align" => &["align.", "personality."],
        _ => &[],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_batches, SynthSpec};
    use crate::gradcheck::check_params;
    use std::collections::BTreeMap;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            vocab: 40,
            text_dim: 8,
            personality_dim: 6,
            shared_dim: 4,
            fused_dim: 6,
            hidden_dim: 4,
            heads: 2,
            ffn_dim: 8,
            layers: 3,
            split: 1,
            personality_layers: 1,
            max_positions: 16,
            ..Default::default()
        }
    }

    fn toy_batch() -> Batch {
        let spec = SynthSpec { d_v: 3, d_a: 4, vocab: 40, max_text_len: 5, max_frames: 4, noise: 0.5 };
        let archive = generate_synthetic(5, 4, &spec).unwrap();
        make_batches(&archive, "train", 3, 1, PadLimits::default()).unwrap().remove(0)
    }

    fn loss_value(model: &Model, store: &ParamStore, batch: &Batch) -> (f64, BTreeMap<String, Matrix>) {
        let mut g = Graph::new();
        let out = model.forward(&mut g, store, batch, Mode::Probe).unwrap();
        let l = out.losses.unwrap().l_total;
        let grads = g.backward(l);
        let named = grads
            .bound_names()
            .filter(|n| store.get(n).is_some_and(|p| p.trainable))
            .filter_map(|n| grads.param(n).map(|m| (n.to_string(), m)))
            .collect();
        (g.value(l).item(), named)
    }

    #[test]
    fn every_alignment_layer_runs() {
        let batch = toy_batch();
        let cfg = toy_config();
        for k in 1..=cfg.layers + 2 {
            let model = Model::new(cfg.clone(), Toggles::default(), k, 3, 4).unwrap();
            let store = model.init_params(1);
            let (l, _) = loss_value(&model, &store, &batch);
            assert!(l.is_finite(), "layer {k}");
        }
        assert!(Model::new(cfg.clone(), Toggles::default(), 0, 3, 4).is_err());
        assert!(Model::new(cfg.clone(), Toggles::default(), 6, 3, 4).is_err());
        assert!(Model::new(ModelConfig { split: 3, ..cfg }, Toggles::default(), 1, 3, 4).is_err());
    }

    #[test]
    fn total_is_sum_of_components() {
        let batch = toy_batch();
        let model = Model::new(toy_config(), Toggles::default(), 3, 3, 4).unwrap();
        let store = model.init_params(2);
        let mut g = Graph::new();
        let l = model.forward(&mut g, &store, &batch, Mode::Probe).unwrap().losses.unwrap();
        let v = |x: Var| g.value(x).item();
        assert_eq!(v(l.l_align).to_bits(), (v(l.l_ccl) + v(l.l_ps)).to_bits());
        assert_eq!(v(l.l_total).to_bits(), (v(l.l_align) + v(l.l_clm) + v(l.l_task)).to_bits());
    }

    #[test]
    fn personality_is_frozen_by_default() {
        let batch = toy_batch();
        let model = Model::new(toy_config(), Toggles::default(), 3, 3, 4).unwrap();
        let store = model.init_params(2);
        assert!(store.iter().filter(|(n, _)| n.starts_with("personality.")).all(|(_, p)| !p.trainable));
        let (_, grads) = loss_value(&model, &store, &batch);
        assert!(grads.keys().all(|n| !n.starts_with("personality.")));
        assert!(grads.contains_key("align.w_personality"));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let batch = toy_batch();
        for (k, toggles) in
            [(2, Toggles::default()), (4, Toggles { use_prefusion: false, use_enhanced_fusion: false, ..Default::default() })]
        {
            let model = Model::new(toy_config(), toggles, k, 3, 4).unwrap();
            let store = model.init_params(4);
            let (_, analytic) = loss_value(&model, &store, &batch);
            let names: Vec<String> = analytic.keys().cloned().collect();
            for c in check_params(&store, &analytic, &names, 1e-5, 6, |st| loss_value(&model, st, &batch).0) {
                assert!(c.passes(1e-4), "{c:?}");
            }
        }
    }
}
