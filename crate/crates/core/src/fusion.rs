//! Multimodal fusion: text-anchored contrastive loss, pre-fusion through the
//! deep text layers, query-guided cross-modal attention, and the serial and
//! parallel enhanced-fusion streams feeding the prediction subnet.
//!
//! Parameter names:
//!
//! | name | shape |
//! |------|-------|
//! | `clm.proj_v`, `clm.proj_a` | d_h x d_t |
//! | `fuse.proj_v`, `fuse.proj_a` | prefuse input dim x d_t |
//! | `fuse.type_v`, `fuse.type_a` | 1 x d_t |
//! | `fuse.query.w` / `.b` | d_t x d_f / 1 x d_f |
//! | `fuse.att_v.{wq,wk,wv}` (same for `att_a`) | d_f x d_f, d_h x d_f, d_h x d_f |
//! | `fuse.enh_{v,a,m}.w` / `.b` | d_f x d_f / 1 x d_f |
//! | `fuse.serial.w` | 3 d_f x d_f |
//! | `fuse.serial_ln.{gain,bias}` | 1 x d_f |
//! | `fuse.conv.kernel` / `.bias` | 3 x 3 / 1 x 1 |
//! | `head.w1` / `.b1`, `head.w2` / `.b2` | 2 d_f x d_f / 1 x d_f, d_f x 1 / 1 x 1 |
//! | `fuse.bypass.w` / `.b` (pre-fusion ablation) | d_t + 2 d_h x d_t / 1 x d_t |
//! | `head.linear.w` / `.b` (enhanced-fusion ablation) | 3 d_f x 1 / 1 x 1 |

use std::ops::Range;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::infonce;
use crate::encoders::{init_layer_norm, layer_norm, linear, masked_mean, TextStack};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Activation, AttentionSpec, Graph, Var};
use crate::tensor::Matrix;

/// Padded per-frame states of one modality.
#[derive(Debug, Clone)]
pub struct ModalityStates {
    /// `(batch * len) x dim`, batch-major.
    pub states: Var,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl ModalityStates {
    pub fn batch(&self) -> usize {
        self.mask.len() / self.len.max(1)
    }

    fn pooled(&self, g: &mut Graph) -> Var {
        masked_mean(g, self.states, &self.mask, self.len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    pub text_dim: usize,
    pub hidden_dim: usize,
    pub fused_dim: usize,
    pub heads: usize,
    /// Input widths of the pre-fusion projections (`hidden_dim` unless raw
    /// features are fed).
    pub prefuse_visual_dim: usize,
    pub prefuse_audio_dim: usize,
    pub activation: Activation,
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fused_dim < 3 {
            return Err(Error::InvalidConfig(format!("fused width must be at least 3, got {}", self.fused_dim)));
        }
        if self.heads == 0 || !self.fused_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!("{} heads do not divide fused width {}", self.heads, self.fused_dim)));
        }
        Ok(())
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let (dt, dh, df) = (self.text_dim, self.hidden_dim, self.fused_dim);
        store.init(seed, "clm.proj_v", dh, dt, Init::Xavier);
        store.init(seed, "clm.proj_a", dh, dt, Init::Xavier);
        store.init(seed, "fuse.proj_v", self.prefuse_visual_dim, dt, Init::Xavier);
        store.init(seed, "fuse.proj_a", self.prefuse_audio_dim, dt, Init::Xavier);
        store.init(seed, "fuse.type_v", 1, dt, Init::Normal(0.1));
        store.init(seed, "fuse.type_a", 1, dt, Init::Normal(0.1));
        store.init(seed, "fuse.query.w", dt, df, Init::Xavier);
        store.init(seed, "fuse.query.b", 1, df, Init::Zeros);
        for m in ["att_v", "att_a"] {
            store.init(seed, &format!("fuse.{m}.wq"), df, df, Init::Xavier);
            store.init(seed, &format!("fuse.{m}.wk"), dh, df, Init::Xavier);
            store.init(seed, &format!("fuse.{m}.wv"), dh, df, Init::Xavier);
        }
        for m in ["enh_v", "enh_a", "enh_m"] {
            store.init(seed, &format!("fuse.{m}.w"), df, df, Init::Xavier);
            store.init(seed, &format!("fuse.{m}.b"), 1, df, Init::Zeros);
        }
        store.init(seed, "fuse.serial.w", 3 * df, df, Init::Xavier);
        init_layer_norm(store, "fuse.serial_ln", df);
        store.init(seed, "fuse.conv.kernel", 3, 3, Init::Normal(0.3));
        store.init(seed, "fuse.conv.bias", 1, 1, Init::Zeros);
        store.init(seed, "head.w1", 2 * df, df, Init::Xavier);
        store.init(seed, "head.b1", 1, df, Init::Zeros);
        store.init(seed, "head.w2", df, 1, Init::Xavier);
        store.init(seed, "head.b2", 1, 1, Init::Zeros);
    }

    /// Parameters of the linear stand-in for pre-fusion.
    pub fn init_bypass_params(&self, store: &mut ParamStore, seed: u64) {
        store.init(seed, "fuse.bypass.w", self.text_dim + 2 * self.hidden_dim, self.text_dim, Init::Xavier);
        store.init(seed, "fuse.bypass.b", 1, self.text_dim, Init::Zeros);
    }

    /// Parameters of the single linear head replacing enhanced fusion.
    pub fn init_linear_head_params(&self, store: &mut ParamStore, seed: u64) {
        store.init(seed, "head.linear.w", 3 * self.fused_dim, 1, Init::Xavier);
        store.init(seed, "head.linear.b", 1, 1, Init::Zeros);
    }
}

/// Per-modality and summed text-anchored contrastive losses.
#[derive(Debug, Clone, Copy)]
pub struct CrossModalLoss {
    pub visual: Var,
    pub audio: Var,
    pub total: Var,
}

/// Contrastive loss with the sentiment [CLS] rows as anchors and the
/// projected, mean-pooled visual and audio states as candidates.
pub fn crossmodal_contrastive_loss(
    g: &mut Graph,
    store: &ParamStore,
    cls_s: Var,
    visual: &ModalityStates,
    audio: &ModalityStates,
    tau: f64,
) -> Result<CrossModalLoss> {
    let mut parts = [cls_s; 2];
    for (slot, (m, proj)) in parts.iter_mut().zip([(visual, "clm.proj_v"), (audio, "clm.proj_a")]) {
        let pooled = m.pooled(g);
        let projected = linear(g, store, pooled, proj, None);
        *slot = infonce(g, cls_s, projected, tau, false, "cross-modal")?.loss;
    }
    let total = g.add(parts[0], parts[1]);
    Ok(CrossModalLoss { visual: parts[0], audio: parts[1], total })
}

/// Runs `[CLS_s] ++ P_v(visual) + type_v ++ P_a(audio) + type_a` through
/// the `deep` layers of `stack` and returns the position-0 output.
pub fn prefuse(
    g: &mut Graph,
    store: &ParamStore,
    stack: &TextStack,
    deep: Range<usize>,
    cls_s: Var,
    visual: &ModalityStates,
    audio: &ModalityStates,
) -> Result<Var> {
    let n = g.value(cls_s).rows();
    if visual.batch() != n || audio.batch() != n {
        return Err(Error::ShapeMismatch {
            context: "pre-fusion batch".into(),
            expected: (n, stack.width),
            found: (visual.batch(), audio.batch()),
        });
    }
    let (tv, ta) = (visual.len, audio.len);
    let len = 1 + tv + ta;
    if len > stack.max_positions {
        return Err(Error::SequenceTooLong { len, max: stack.max_positions });
    }
    let embed = |g: &mut Graph, m: &ModalityStates, proj: &str, ty: &str| {
        let p = linear(g, store, m.states, proj, None);
        let t = g.param(store, ty);
        g.add_row(p, t)
    };
    let pv = embed(g, visual, "fuse.proj_v", "fuse.type_v");
    let pa = embed(g, audio, "fuse.proj_a", "fuse.type_a");
    let stacked = g.concat_rows(&[cls_s, pv, pa]);
    let mut order = Vec::with_capacity(n * len);
    let mut mask = Vec::with_capacity(n * len);
    for b in 0..n {
        order.push(b);
        mask.push(true);
        for t in 0..tv {
            order.push(n + b * tv + t);
            mask.push(visual.mask[b * tv + t]);
        }
        for t in 0..ta {
            order.push(n + n * tv + b * ta + t);
            mask.push(audio.mask[b * ta + t]);
        }
    }
    let seq = g.gather_rows(stacked, &order);
    Ok(stack.run_layers(g, store, seq, deep, len, &mask).cls())
}

/// Text-only forward of the [CLS] rows through the `deep` layers.
pub fn text_only_deep(g: &mut Graph, store: &ParamStore, stack: &TextStack, deep: Range<usize>, cls_s: Var) -> Var {
    let n = g.value(cls_s).rows();
    stack.run_layers(g, store, cls_s, deep, 1, &vec![true; n]).cls()
}

/// Pre-fusion stand-in: one linear map of `[CLS_s, pooled visual, pooled audio]`.
pub fn bypass_prefuse(g: &mut Graph, store: &ParamStore, cls_s: Var, visual: &ModalityStates, audio: &ModalityStates) -> Var {
    let pv = visual.pooled(g);
    let pa = audio.pooled(g);
    let cat = g.concat_cols(&[cls_s, pv, pa]);
    linear(g, store, cat, "fuse.bypass.w", Some("fuse.bypass.b"))
}

/// Outputs of the cross-modal interaction stage, all `N x d_f`.
#[derive(Debug, Clone, Copy)]
pub struct Interaction {
    pub query: Var,
    pub visual: Var,
    pub audio: Var,
    pub visual_enhanced: Var,
    pub audio_enhanced: Var,
    pub query_enhanced: Var,
}

fn attend(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    query: Var,
    m: &ModalityStates,
    name: &'static str,
    modality: &'static str,
) -> Result<Var> {
    let n = g.value(query).rows();
    if m.batch() != n {
        return Err(Error::ShapeMismatch {
            context: format!("{modality} batch"),
            expected: (n, cfg.hidden_dim),
            found: (m.batch(), m.len),
        });
    }
    for b in 0..n {
        if !m.mask[b * m.len..(b + 1) * m.len].iter().any(|&v| v) {
            return Err(Error::EmptyAttention { modality, sample: b });
        }
    }
    let q = linear(g, store, query, &format!("fuse.{name}.wq"), None);
    let k = linear(g, store, m.states, &format!("fuse.{name}.wk"), None);
    let v = linear(g, store, m.states, &format!("fuse.{name}.wv"), None);
    let spec = AttentionSpec { batch: n, q_len: 1, k_len: m.len, heads: cfg.heads, key_mask: m.mask.clone() };
    Ok(g.attention(q, k, v, spec))
}

/// `M_s` queries the visual and audio states; each stream then gets its
/// own linear map.
pub fn crossmodal_attend(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &FusionConfig,
    cls_m: Var,
    visual: &ModalityStates,
    audio: &ModalityStates,
) -> Result<Interaction> {
    let query = linear(g, store, cls_m, "fuse.query.w", Some("fuse.query.b"));
    let v_t = attend(g, store, cfg, query, visual, "att_v", "visual")?;
    let a_t = attend(g, store, cfg, query, audio, "att_a", "audio")?;
    let enh = |g: &mut Graph, x: Var, p: &str| linear(g, store, x, &format!("fuse.{p}.w"), Some(&format!("fuse.{p}.b")));
    Ok(Interaction {
        query,
        visual: v_t,
        audio: a_t,
        visual_enhanced: enh(g, v_t, "enh_v"),
        audio_enhanced: enh(g, a_t, "enh_a"),
        query_enhanced: enh(g, query, "enh_m"),
    })
}

fn same_shape(g: &Graph, parts: &[Var], context: &str) -> Result<(usize, usize)> {
    let shape = g.value(parts[0]).shape();
    for &p in &parts[1..] {
        if g.value(p).shape() != shape {
            return Err(Error::ShapeMismatch { context: context.into(), expected: shape, found: g.value(p).shape() });
        }
    }
    Ok(shape)
}

/// `LayerNorm(concat(V', A', M') W_ser)`. With `normalize` false the
/// normalization is skipped.
pub fn serial_fuse(g: &mut Graph, store: &ParamStore, v: Var, a: Var, m: Var, normalize: bool) -> Result<Var> {
    let (_, d) = same_shape(g, &[v, a, m], "serial fusion")?;
    let w = g.param(store, "fuse.serial.w");
    if g.value(w).shape() != (3 * d, d) {
        return Err(Error::ShapeMismatch { context: "fuse.serial.w".into(), expected: (3 * d, d), found: g.value(w).shape() });
    }
    let cat = g.concat_cols(&[v, a, m]);
    let z = g.matmul(cat, w);
    Ok(if normalize { layer_norm(g, store, z, "fuse.serial_ln") } else { z })
}

/// Convolution across the feature axis with the three streams as input
/// channels: kernel width 3, padding 1, one output channel.
pub fn parallel_fuse(g: &mut Graph, store: &ParamStore, v: Var, a: Var, m: Var) -> Result<Var> {
    let (_, d) = same_shape(g, &[v, a, m], "parallel fusion")?;
    if d < 3 {
        return Err(Error::InvalidArgument(format!("parallel fusion needs width >= 3, got {d}")));
    }
    let kernel = g.param(store, "fuse.conv.kernel");
    if g.value(kernel).shape() != (3, 3) {
        return Err(Error::ShapeMismatch { context: "fuse.conv.kernel".into(), expected: (3, 3), found: g.value(kernel).shape() });
    }
    let bias = g.param(store, "fuse.conv.bias");
    Ok(g.conv1d(&[v, a, m], kernel, bias))
}

/// Two-layer subnet over `[F_s, F_p]`; returns `N x 1` predictions.
/// `dropout` is `(rate, rng)` and applies inverted dropout to the hidden
/// layer.
pub fn predict(
    g: &mut Graph,
    store: &ParamStore,
    f_s: Var,
    f_p: Var,
    activation: Activation,
    dropout: Option<(f64, &mut ChaCha8Rng)>,
) -> Result<Var> {
    same_shape(g, &[f_s, f_p], "prediction input")?;
    let cat = g.concat_cols(&[f_s, f_p]);
    let h = linear(g, store, cat, "head.w1", Some("head.b1"));
    let mut h = g.activation(h, activation);
    if let Some((rate, rng)) = dropout {
        if rate > 0.0 {
            let (r, c) = g.value(h).shape();
            let keep = 1.0 / (1.0 - rate);
            let mask = Matrix::from_vec(r, c, (0..r * c).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect());
            let mask = g.constant(mask);
            h = g.mul(h, mask);
        }
    }
    Ok(linear(g, store, h, "head.w2", Some("head.b2")))
}

/// Single linear head over `[V_t, A_t, M_s]`.
pub fn linear_head(g: &mut Graph, store: &ParamStore, v: Var, a: Var, m: Var) -> Result<Var> {
    same_shape(g, &[v, a, m], "linear head input")?;
    let cat = g.concat_cols(&[v, a, m]);
    Ok(linear(g, store, cat, "head.linear.w", Some("head.linear.b")))
}

/// Row means and population variances, for normalization checks.
pub fn row_moments(m: &Matrix) -> Vec<(f64, f64)> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            (mean, row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        })
        .collect()
}
