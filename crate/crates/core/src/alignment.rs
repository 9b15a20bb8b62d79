//! Personality-sentiment alignment losses.
//!
//! Both text embeddings are projected into a shared space (`T_s = CLS_s W_s`,
//! `T_p = CLS_p W_p`). Sentiment rows are anchors and personality rows are
//! candidates; matched rows are positives and every other row in the batch
//! is a negative. All per-sample terms are averaged over the batch:
//!
//! * `l_cl  = mean_i -log softmax_j(sim(T_s_i, T_p_j) / tau)[i]`
//! * `l_ccl = mean_i sim(T_s_i, T_p_i) * l_cl_i`
//! * `l_ps  = mean_i (1 - sim(T_s_i, T_p_i)) * |T_s_i W_y - y_i|`
//! * `l_align = l_ccl + l_ps`
//!
//! `sim` is cosine similarity with exact norms; a zero-norm row is an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Graph, Var};
use crate::tensor::Matrix;

pub const W_SENTIMENT: &str = "align.w_sentiment";
pub const W_PERSONALITY: &str = "align.w_personality";
pub const W_REGRESSION: &str = "align.w_regression";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentOptions {
    pub tau: f64,
    /// Average the sentiment->personality and personality->sentiment
    /// directions instead of using sentiment anchors only.
    pub symmetric: bool,
    /// Clamp the matched-pair cosine weight in `l_ccl` to `[0, 1]`.
    pub clamp_similarity: bool,
}

impl Default for AlignmentOptions {
    fn default() -> Self {
        Self { tau: 0.07, symmetric: false, clamp_similarity: false }
    }
}

/// Dimensions of the projection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AlignmentHead {
    pub sentiment_dim: usize,
    pub personality_dim: usize,
    pub shared_dim: usize,
}

impl AlignmentHead {
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        store.init(seed, W_SENTIMENT, self.sentiment_dim, self.shared_dim, Init::Xavier);
        store.init(seed, W_PERSONALITY, self.personality_dim, self.shared_dim, Init::Xavier);
        store.init(seed, W_REGRESSION, self.shared_dim, 1, Init::Xavier);
    }
}

fn expect_cols(g: &Graph, v: Var, cols: usize, context: &str) -> Result<()> {
    let shape = g.value(v).shape();
    if shape.1 != cols {
        return Err(Error::ShapeMismatch { context: context.to_string(), expected: (shape.0, cols), found: shape });
    }
    Ok(())
}

/// Projects both embeddings into the shared space with the bias-free maps.
pub fn project(g: &mut Graph, store: &ParamStore, head: &AlignmentHead, cls_s: Var, cls_p: Var) -> Result<(Var, Var)> {
    expect_cols(g, cls_s, head.sentiment_dim, "sentiment embedding")?;
    expect_cols(g, cls_p, head.personality_dim, "personality embedding")?;
    if g.value(cls_s).rows() != g.value(cls_p).rows() {
        return Err(Error::ShapeMismatch {
            context: "personality embedding rows".into(),
            expected: (g.value(cls_s).rows(), head.personality_dim),
            found: g.value(cls_p).shape(),
        });
    }
    let ws = g.param(store, W_SENTIMENT);
    let wp = g.param(store, W_PERSONALITY);
    Ok((g.matmul(cls_s, ws), g.matmul(cls_p, wp)))
}

fn check_nonzero_rows(m: &Matrix, context: &'static str) -> Result<()> {
    for r in 0..m.rows() {
        if m.row(r).iter().all(|&x| x == 0.0) {
            return Err(Error::DegenerateEmbedding { context, row: r });
        }
    }
    Ok(())
}

/// `N x N` cosine similarities between rows of `a` and rows of `b`.
pub fn cosine_matrix(g: &mut Graph, a: Var, b: Var, context: &'static str) -> Result<Var> {
    if g.value(a).cols() != g.value(b).cols() {
        return Err(Error::ShapeMismatch { context: context.into(), expected: g.value(a).shape(), found: g.value(b).shape() });
    }
    check_nonzero_rows(g.value(a), context)?;
    check_nonzero_rows(g.value(b), context)?;
    let an = g.normalize_rows(a);
    let bn = g.normalize_rows(b);
    let bt = g.transpose(bn);
    Ok(g.matmul(an, bt))
}

/// InfoNCE pieces for one anchor/candidate pairing.
#[derive(Debug, Clone, Copy)]
pub struct InfoNce {
    /// `N x N` cosine similarities, anchors by row.
    pub similarity: Var,
    /// `N x 1` matched-pair cosines.
    pub matched: Var,
    /// `N x 1` per-anchor losses.
    pub per_anchor: Var,
    /// Batch mean of `per_anchor`.
    pub loss: Var,
}

pub fn infonce(g: &mut Graph, anchors: Var, candidates: Var, tau: f64, symmetric: bool, context: &'static str) -> Result<InfoNce> {
    let n = g.value(anchors).rows();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: n });
    }
    if g.value(candidates).rows() != n {
        return Err(Error::ShapeMismatch {
            context: context.into(),
            expected: g.value(anchors).shape(),
            found: g.value(candidates).shape(),
        });
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let similarity = cosine_matrix(g, anchors, candidates, context)?;
    let matched = g.diag(similarity);
    let logits = g.scale(similarity, 1.0 / tau);
    let log_probs = g.log_softmax_rows(logits);
    let picked = g.diag(log_probs);
    let mut per_anchor = g.scale(picked, -1.0);
    if symmetric {
        let logits_t = g.transpose(logits);
        let log_probs_t = g.log_softmax_rows(logits_t);
        let picked_t = g.diag(log_probs_t);
        let twice = g.sub(per_anchor, picked_t);
        per_anchor = g.scale(twice, 0.5);
    }
    let loss = g.mean_all(per_anchor);
    Ok(InfoNce { similarity, matched, per_anchor, loss })
}

/// Sentiment-anchored contrastive loss against personality candidates.
pub fn contrastive_loss(g: &mut Graph, ts: Var, tp: Var, opts: &AlignmentOptions) -> Result<Var> {
    Ok(infonce(g, ts, tp, opts.tau, opts.symmetric, "alignment")?.loss)
}

/// Similarity-weighted contrastive loss; returns the loss and the matched
/// cosines (`N x 1`).
pub fn compound_contrastive_loss(g: &mut Graph, ts: Var, tp: Var, opts: &AlignmentOptions) -> Result<(Var, Var)> {
    let nce = infonce(g, ts, tp, opts.tau, opts.symmetric, "alignment")?;
    Ok((compound_from(g, &nce, opts), nce.matched))
}

fn compound_from(g: &mut Graph, nce: &InfoNce, opts: &AlignmentOptions) -> Var {
    let weight = if opts.clamp_similarity { g.clamp(nce.matched, 0.0, 1.0) } else { nce.matched };
    let weighted = g.mul(weight, nce.per_anchor);
    g.mean_all(weighted)
}

/// Similarity-gated L1 regression of the projected sentiment embedding.
pub fn personalized_constraint_loss(g: &mut Graph, store: &ParamStore, ts: Var, tp: Var, labels: &[f64]) -> Result<Var> {
    let n = g.value(ts).rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch { context: "labels".into(), expected: (n, 1), found: (labels.len(), 1) });
    }
    if labels.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidArgument("labels must be finite".into()));
    }
    let sim = cosine_matrix(g, ts, tp, "alignment")?;
    let matched = g.diag(sim);
    ps_from(g, store, ts, matched, labels)
}

fn ps_from(g: &mut Graph, store: &ParamStore, ts: Var, matched: Var, labels: &[f64]) -> Result<Var> {
    let wy = g.param(store, W_REGRESSION);
    if g.value(wy).shape() != (g.value(ts).cols(), 1) {
        return Err(Error::ShapeMismatch { context: W_REGRESSION.into(), expected: (g.value(ts).cols(), 1), found: g.value(wy).shape() });
    }
    let reg = g.matmul(ts, wy);
    let y = g.constant(Matrix::column(labels));
    let diff = g.sub(reg, y);
    let err = g.abs(diff);
    let gate = g.affine(matched, -1.0, 1.0);
    let weighted = g.mul(gate, err);
    Ok(g.mean_all(weighted))
}

/// Every alignment term, kept as graph nodes for logging and backprop.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentLosses {
    pub l_cl: Var,
    pub l_ccl: Var,
    pub l_ps: Var,
    pub l_align: Var,
    pub similarity: Var,
}

/// Computes all alignment terms. With `use_ps` false the constraint term
/// is a constant zero and `l_align = l_ccl + 0`.
pub fn alignment_loss(
    g: &mut Graph,
    store: &ParamStore,
    ts: Var,
    tp: Var,
    labels: &[f64],
    opts: &AlignmentOptions,
    use_ps: bool,
) -> Result<AlignmentLosses> {
    let nce = infonce(g, ts, tp, opts.tau, opts.symmetric, "alignment")?;
    let l_ccl = compound_from(g, &nce, opts);
    let l_ps = if use_ps {
        if labels.len() != g.value(ts).rows() {
            return Err(Error::ShapeMismatch { context: "labels".into(), expected: (g.value(ts).rows(), 1), found: (labels.len(), 1) });
        }
        ps_from(g, store, ts, nce.matched, labels)?
    } else {
        g.constant(Matrix::scalar(0.0))
    };
    let l_align = g.add(l_ccl, l_ps);
    Ok(AlignmentLosses { l_cl: nce.loss, l_ccl, l_ps, l_align, similarity: nce.similarity })
}
