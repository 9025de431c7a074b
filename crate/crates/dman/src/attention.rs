//! The two attention pathways: segment-recurrent short-term attention over
//! the current segment plus a gradient-detached cached context, and
//! long-term attention that reads the per-user memory slots.
//!
//! Key/value rows are laid out context-first, then current-segment rows; the
//! causal mask makes every context row visible and current rows visible up
//! to the query position. Logits are scaled by 1/sqrt(D) when the
//! `attention_scale` flag is on.

use crate::error::{DmanError, Result};
use crate::matrix::{BoolMat, Matrix};
use crate::rng::StreamRng;
use crate::tape::{Node, Tape};

/// Query/key/value projections for one attention network.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionTriple {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
}

impl ProjectionTriple {
    pub fn init(d: usize, std: f64, rng: &mut StreamRng) -> Self {
        ProjectionTriple {
            w_q: Matrix::random_normal(d, d, std, rng),
            w_k: Matrix::random_normal(d, d, std, rng),
            w_v: Matrix::random_normal(d, d, std, rng),
        }
    }

    pub fn params(&self, tape: &mut Tape) -> TripleNodes {
        TripleNodes {
            w_q: tape.param(self.w_q.clone()),
            w_k: tape.param(self.w_k.clone()),
            w_v: tape.param(self.w_v.clone()),
        }
    }

    /// Gradient-free copies, for places that reuse the projections frozen.
    pub fn constants(&self, tape: &mut Tape) -> TripleNodes {
        TripleNodes {
            w_q: tape.constant(self.w_q.clone()),
            w_k: tape.constant(self.w_k.clone()),
            w_v: tape.constant(self.w_v.clone()),
        }
    }
}

/// One layer's parameters: a triple for the recurrent path and a second
/// triple for the long-term path. All six matrices are D x D.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayerParams {
    pub recurrent: ProjectionTriple,
    pub long_term: ProjectionTriple,
}

/// Learned per-position embedding added to the current segment's input only;
/// cached context keeps whatever positional signal it got when current.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEmbedding {
    pub table: Matrix,
}

/// Previous segment's hidden states, one T x D matrix per level 0..=L
/// (level 0 is the embedded input). Detached from any tape by construction.
#[derive(Debug, Clone)]
pub struct CachedState {
    pub levels: Vec<Matrix>,
    pub segment_index: usize,
}

/// Tape node handles for one projection triple.
#[derive(Debug, Clone, Copy)]
pub struct TripleNodes {
    pub w_q: Node,
    pub w_k: Node,
    pub w_v: Node,
}

/// Visibility for `t` query rows over `context_len` context rows followed by
/// `t` current rows: context always visible, current rows causally.
pub fn causal_mask(t: usize, context_len: usize) -> BoolMat {
    let mut m = BoolMat::filled(t, t + context_len, false);
    for q in 0..t {
        for j in 0..context_len + q + 1 {
            m.set(q, j, true);
        }
    }
    m
}

/// Shared scaled-dot-product core: Q from `q_input`, K/V from `kv_input`.
pub(crate) fn attention_core(
    tape: &mut Tape,
    q_input: Node,
    kv_input: Node,
    mask: Option<&BoolMat>,
    w: &TripleNodes,
    scale: bool,
) -> Result<Node> {
    let d = tape.value(q_input).cols();
    let wq_t = tape.transpose(w.w_q);
    let wk_t = tape.transpose(w.w_k);
    let wv_t = tape.transpose(w.w_v);
    let q = tape.matmul(q_input, wq_t)?;
    let k = tape.matmul(kv_input, wk_t)?;
    let v = tape.matmul(kv_input, wv_t)?;
    let k_t = tape.transpose(k);
    let mut logits = tape.matmul(q, k_t)?;
    if scale {
        logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    }
    let weights = tape.softmax_rows(logits, mask)?;
    tape.matmul(weights, v)
}

/// Short-term interest layer. Keys and values span the detached context (if
/// any) followed by the current segment, causally masked.
pub fn recurrent_attention_layer(
    tape: &mut Tape,
    input: Node,
    context: Option<&Matrix>,
    w: &TripleNodes,
    scale: bool,
) -> Result<Node> {
    let t = tape.value(input).rows();
    let (kv, ctx_len) = match context {
        Some(c) if c.rows() == 0 => (input, 0),
        Some(c) => {
            if c.rows() != t || c.cols() != tape.value(input).cols() {
                return Err(DmanError::Shape {
                    op: "recurrent_attention context",
                    left_rows: t,
                    left_cols: tape.value(input).cols(),
                    right_rows: c.rows(),
                    right_cols: c.cols(),
                });
            }
            let ctx = tape.constant(c.clone());
            (tape.concat_rows(ctx, input)?, c.rows())
        }
        None => (input, 0),
    };
    let mask = causal_mask(t, ctx_len);
    attention_core(tape, input, kv, Some(&mask), w, scale)
}

/// Long-term interest layer: queries from the hidden state, keys and values
/// from the memory slots. Memory rows are unordered, so no mask.
pub fn long_term_attention_layer(
    tape: &mut Tape,
    query_input: Node,
    memory: Node,
    w: &TripleNodes,
    scale: bool,
) -> Result<Node> {
    if tape.value(memory).rows() == 0 {
        return Err(DmanError::EmptyMemory);
    }
    attention_core(tape, query_input, memory, None, w, scale)
}

/// Forward-only attention used by the inference/benchmark path. Counts every
/// logit it computes into `scores`, mask or not.
pub fn raw_attention(
    q_input: &Matrix,
    kv_input: &Matrix,
    mask: Option<&BoolMat>,
    w: &ProjectionTriple,
    scale: bool,
    scores: &mut u64,
) -> Result<Matrix> {
    let d = q_input.cols();
    let q = q_input.matmul(&w.w_q.transpose())?;
    let k = kv_input.matmul(&w.w_k.transpose())?;
    let v = kv_input.matmul(&w.w_v.transpose())?;
    let mut logits = q.matmul(&k.transpose())?;
    *scores += (logits.rows() * logits.cols()) as u64;
    if scale {
        logits = logits.scale(1.0 / (d as f64).sqrt());
    }
    let weights = crate::tape::softmax_rows_value(&logits, mask)?;
    weights.matmul(&v)
}
