//! Text transformer stacks and recurrent frame encoders.
//!
//! The sentiment text stack is one set of `L` layers. Its first `N` layers
//! form the shallow sentiment encoder; layers `N+1..L` are reused as the
//! multimodal pre-fusion encoder. Both are ranges over the same parameters.
//!
//! Parameter names (for weight import):
//!
//! | name | shape |
//! |------|-------|
//! | `{p}.tok_emb` | vocab x d |
//! | `{p}.pos_emb` | max_positions x d |
//! | `{p}.emb_ln.gain`, `{p}.emb_ln.bias` | 1 x d |
//! | `{p}.layer{i}.attn.{wq,wk,wv,wo}` | d x d |
//! | `{p}.layer{i}.attn.{bq,bk,bv,bo}` | 1 x d |
//! | `{p}.layer{i}.ln1.{gain,bias}`, `{p}.layer{i}.ln2.{gain,bias}` | 1 x d |
//! | `{p}.layer{i}.ffn.w1` / `.b1` | d x ffn / 1 x ffn |
//! | `{p}.layer{i}.ffn.w2` / `.b2` | ffn x d / 1 x d |
//! | `{p}.wx`, `{p}.wh`, `{p}.bias` (recurrent) | d_in x 4h, h x 4h, 1 x 4h |
//!
//! Layers are numbered from 0; recurrent gates are ordered input, forget,
//! cell, output.

use std::ops::Range;

use crate::data::{PaddedFrames, PaddedTokens, CLS_ID};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::tape::{Activation, AttentionSpec, Graph, Var};
use crate::tensor::Matrix;

pub const LN_EPS: f64 = 1e-5;

/// `x W + b` with named parameters.
pub fn linear(g: &mut Graph, store: &ParamStore, x: Var, w: &str, b: Option<&str>) -> Var {
    let wv = g.param(store, w);
    let y = g.matmul(x, wv);
    match b {
        Some(b) => {
            let bv = g.param(store, b);
            g.add_row(y, bv)
        }
        None => y,
    }
}

/// Row-wise layer normalization followed by a learned gain and bias.
pub fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Var {
    let n = g.layer_norm(x, LN_EPS);
    let gain = g.param(store, &format!("{prefix}.gain"));
    let bias = g.param(store, &format!("{prefix}.bias"));
    let s = g.mul_row(n, gain);
    g.add_row(s, bias)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.gain"), Matrix::filled(1, d, 1.0), true);
    store.insert(format!("{prefix}.bias"), Matrix::zeros(1, d), true);
}

/// Geometry and parameter prefix of one transformer stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TextStack {
    pub prefix: String,
    pub vocab: usize,
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn: usize,
    pub max_positions: usize,
    pub activation: Activation,
}

/// Output of a stack run: final hidden states plus the [CLS] row after
/// each executed layer.
#[derive(Debug, Clone)]
pub struct StackOutput {
    /// `(batch * len) x width`
    pub hidden: Var,
    /// `batch x width` per executed layer, in order.
    pub layer_cls: Vec<Var>,
}

impl StackOutput {
    pub fn cls(&self) -> Var {
        *self.layer_cls.last().expect("at least one layer ran")
    }
}

impl TextStack {
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        let d = self.width;
        store.init(seed, &format!("{p}.tok_emb"), self.vocab, d, Init::Normal(0.5));
        store.init(seed, &format!("{p}.pos_emb"), self.max_positions, d, Init::Normal(0.1));
        init_layer_norm(store, &format!("{p}.emb_ln"), d);
        for i in 0..self.layers {
            let l = format!("{p}.layer{i}");
            for w in ["wq", "wk", "wv", "wo"] {
                store.init(seed, &format!("{l}.attn.{w}"), d, d, Init::Xavier);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                store.init(seed, &format!("{l}.attn.{b}"), 1, d, Init::Zeros);
            }
            init_layer_norm(store, &format!("{l}.ln1"), d);
            init_layer_norm(store, &format!("{l}.ln2"), d);
            store.init(seed, &format!("{l}.ffn.w1"), d, self.ffn, Init::Xavier);
            store.init(seed, &format!("{l}.ffn.b1"), 1, self.ffn, Init::Zeros);
            store.init(seed, &format!("{l}.ffn.w2"), self.ffn, d, Init::Xavier);
            store.init(seed, &format!("{l}.ffn.b2"), 1, d, Init::Zeros);
        }
    }

    /// Token plus position embeddings, normalized. Validates ids and the
    /// leading [CLS] token of every sequence.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &PaddedTokens) -> Result<Var> {
        let len = tokens.len;
        if len > self.max_positions {
            return Err(Error::SequenceTooLong { len, max: self.max_positions });
        }
        for (i, (&id, &valid)) in tokens.ids.iter().zip(&tokens.mask).enumerate() {
            if valid && id >= self.vocab {
                return Err(Error::TokenOutOfVocab { id, vocab: self.vocab });
            }
            if i % len == 0 && (!valid || id != CLS_ID) {
                return Err(Error::MissingCls { sample: i / len });
            }
        }
        // padded cells may carry arbitrary ids; they are masked downstream
        let ids: Vec<usize> = tokens.ids.iter().map(|&id| id.min(self.vocab - 1)).collect();
        let positions: Vec<usize> = (0..tokens.ids.len()).map(|i| i % len).collect();
        let tok = g.param(store, &format!("{}.tok_emb", self.prefix));
        let pos = g.param(store, &format!("{}.pos_emb", self.prefix));
        let te = g.gather_rows(tok, &ids);
        let pe = g.gather_rows(pos, &positions);
        let x = g.add(te, pe);
        Ok(layer_norm(g, store, x, &format!("{}.emb_ln", self.prefix)))
    }

    /// One post-norm transformer layer over blocks of `len` rows.
    pub fn layer(&self, g: &mut Graph, store: &ParamStore, index: usize, x: Var, len: usize, mask: &[bool]) -> Var {
        let l = format!("{}.layer{index}", self.prefix);
        let batch = mask.len() / len;
        let q = linear(g, store, x, &format!("{l}.attn.wq"), Some(&format!("{l}.attn.bq")));
        let k = linear(g, store, x, &format!("{l}.attn.wk"), Some(&format!("{l}.attn.bk")));
        let v = linear(g, store, x, &format!("{l}.attn.wv"), Some(&format!("{l}.attn.bv")));
        let spec = AttentionSpec { batch, q_len: len, k_len: len, heads: self.heads, key_mask: mask.to_vec() };
        let att = g.attention(q, k, v, spec);
        let o = linear(g, store, att, &format!("{l}.attn.wo"), Some(&format!("{l}.attn.bo")));
        let r1 = g.add(x, o);
        let h = layer_norm(g, store, r1, &format!("{l}.ln1"));
        let f1 = linear(g, store, h, &format!("{l}.ffn.w1"), Some(&format!("{l}.ffn.b1")));
        let f1 = g.activation(f1, self.activation);
        let f2 = linear(g, store, f1, &format!("{l}.ffn.w2"), Some(&format!("{l}.ffn.b2")));
        let r2 = g.add(h, f2);
        layer_norm(g, store, r2, &format!("{l}.ln2"))
    }

    /// Runs the layers in `range` over `x`; every block must have its first
    /// row valid.
    pub fn run_layers(&self, g: &mut Graph, store: &ParamStore, x: Var, range: Range<usize>, len: usize, mask: &[bool]) -> StackOutput {
        assert!(range.end <= self.layers, "layer range {range:?} beyond {} layers", self.layers);
        let batch = mask.len() / len;
        let cls_idx: Vec<usize> = (0..batch).map(|b| b * len).collect();
        let mut hidden = x;
        let mut layer_cls = Vec::with_capacity(range.len());
        for i in range {
            hidden = self.layer(g, store, i, hidden, len, mask);
            layer_cls.push(g.gather_rows(hidden, &cls_idx));
        }
        StackOutput { hidden, layer_cls }
    }

    /// Embeds and runs the first `depth` layers.
    pub fn encode(&self, g: &mut Graph, store: &ParamStore, tokens: &PaddedTokens, depth: usize) -> Result<StackOutput> {
        let x = self.embed(g, store, tokens)?;
        Ok(self.run_layers(g, store, x, 0..depth, tokens.len, &tokens.mask))
    }
}

/// Single-layer unidirectional LSTM over padded frames.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceEncoder {
    pub prefix: String,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct SequenceOutput {
    /// `(batch * len) x hidden`, batch-major like the input.
    pub states: Var,
    /// `batch x hidden`: state after the last valid frame.
    pub last: Var,
}

impl SequenceEncoder {
    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let p = &self.prefix;
        let h4 = 4 * self.hidden;
        store.init(seed, &format!("{p}.wx"), self.input_dim, h4, Init::Xavier);
        store.init(seed, &format!("{p}.wh"), self.hidden, h4, Init::Xavier);
        store.init(seed, &format!("{p}.bias"), 1, h4, Init::Zeros);
    }

    pub fn encode(&self, g: &mut Graph, store: &ParamStore, frames: &PaddedFrames) -> Result<SequenceOutput> {
        if frames.dim() != self.input_dim {
            return Err(Error::ShapeMismatch {
                context: format!("{} input", self.prefix),
                expected: (frames.data.rows(), self.input_dim),
                found: frames.data.shape(),
            });
        }
        if !frames.data.is_finite() {
            return Err(Error::InvalidArgument(format!("{} input contains non-finite values", self.prefix)));
        }
        let len = frames.len;
        let batch = frames.mask.len() / len.max(1);
        let h = self.hidden;
        let wx = g.param(store, &format!("{}.wx", self.prefix));
        let wh = g.param(store, &format!("{}.wh", self.prefix));
        let bias = g.param(store, &format!("{}.bias", self.prefix));
        let mut hs = g.constant(Matrix::zeros(batch, h));
        let mut cs = g.constant(Matrix::zeros(batch, h));
        let mut steps = Vec::with_capacity(len);
        for t in 0..len {
            let rows: Vec<usize> = (0..batch).map(|b| b * len + t).collect();
            let xt = g.constant(frames.data.gather_rows(&rows));
            let a = g.matmul(xt, wx);
            let r = g.matmul(hs, wh);
            let z = g.add(a, r);
            let z = g.add_row(z, bias);
            let i_gate = g.slice_cols(z, 0, h);
            let i_gate = g.sigmoid(i_gate);
            let f_gate = g.slice_cols(z, h, h);
            let f_gate = g.sigmoid(f_gate);
            let cand = g.slice_cols(z, 2 * h, h);
            let cand = g.tanh(cand);
            let o_gate = g.slice_cols(z, 3 * h, h);
            let o_gate = g.sigmoid(o_gate);
            let keep = g.mul(f_gate, cs);
            let write = g.mul(i_gate, cand);
            let c_new = g.add(keep, write);
            let c_act = g.tanh(c_new);
            let h_new = g.mul(o_gate, c_act);
            let valid: Vec<bool> = rows.iter().map(|&r| frames.mask[r]).collect();
            cs = g.select_rows(&valid, c_new, cs);
            hs = g.select_rows(&valid, h_new, hs);
            steps.push(hs);
        }
        // time-major -> batch-major
        let stacked = g.concat_rows(&steps);
        let order: Vec<usize> = (0..batch * len).map(|i| (i % len) * batch + i / len).collect();
        let states = g.gather_rows(stacked, &order);
        Ok(SequenceOutput { states, last: hs })
    }
}

/// `batch x (batch * len)` averaging matrix over each block's valid rows.
pub fn masked_mean_matrix(mask: &[bool], len: usize) -> Matrix {
    let batch = mask.len() / len;
    let mut m = Matrix::zeros(batch, batch * len);
    for b in 0..batch {
        let count = mask[b * len..(b + 1) * len].iter().filter(|&&v| v).count();
        for t in 0..len {
            if mask[b * len + t] {
                m.set(b, b * len + t, 1.0 / count as f64);
            }
        }
    }
    m
}

/// Masked mean over the time axis: `(batch * len) x d` -> `batch x d`.
pub fn masked_mean(g: &mut Graph, states: Var, mask: &[bool], len: usize) -> Var {
    let p = g.constant(masked_mean_matrix(mask, len));
    g.matmul(p, states)
}
