//! Tape-free forward pass for inference, state replay, and the efficiency
//! benchmark. Profiling a user costs one segment forward over m memory
//! slots plus the 2T-row recurrent window, independent of how long the
//! history is; the full-scan baseline pays for the whole history instead.

use super::{ModelConfig, ModelParams, UserState, Variant};
use crate::attention::{causal_mask, raw_attention, CachedState};
use crate::data::{SegmentedHistory, PADDING_ITEM};
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::memory::update_memory;

pub struct RawForward {
    pub fused: Matrix,
    pub hidden_values: Vec<Matrix>,
}

fn embed_rows(params: &ModelParams, items: &[u32]) -> Matrix {
    let d = params.embed_dim();
    let mut out = Matrix::zeros(items.len(), d);
    for (i, &item) in items.iter().enumerate() {
        out.row_mut(i)
            .copy_from_slice(params.embedding.row(item as usize));
    }
    out
}

/// Embedded segment plus positional signal: the level-0 input.
fn level0_input(params: &ModelParams, segment: &[u32]) -> Matrix {
    let mut x = embed_rows(params, segment);
    for i in 0..x.rows() {
        let pos = params.positional.row(i % params.positional.rows()).to_vec();
        for (v, p) in x.row_mut(i).iter_mut().zip(pos) {
            *v += p;
        }
    }
    x
}

/// Recurrent pathway only: hidden levels 0..=L. This is all that state
/// replay needs, since caches and memory fusion never read the long-term
/// pathway.
pub(crate) fn raw_short_levels(
    params: &ModelParams,
    cache: Option<&CachedState>,
    segment: &[u32],
    cfg: &ModelConfig,
    scores: &mut u64,
) -> Result<Vec<Matrix>> {
    let t = segment.len();
    let x0 = level0_input(params, segment);
    let mut levels = vec![x0];
    for (l, layer) in params.layers.iter().enumerate() {
        let input = levels.last().unwrap();
        let context = match cfg.variant {
            Variant::Nran => None,
            _ => cache.map(|c| &c.levels[l]),
        };
        let (kv, ctx_len) = match context {
            Some(c) if c.rows() > 0 => (c.concat_rows(input)?, c.rows()),
            _ => (input.clone(), 0),
        };
        let mask = causal_mask(t, ctx_len);
        let h = raw_attention(
            input,
            &kv,
            Some(&mask),
            &layer.recurrent,
            cfg.attention_scale,
            scores,
        )?;
        levels.push(h);
    }
    Ok(levels)
}

fn raw_gate(short: &Matrix, long: &Matrix, params: &ModelParams) -> Result<Matrix> {
    let pre = short
        .matmul(&params.w_short)?
        .add(&long.matmul(&params.w_long)?)?;
    let mut out = Matrix::zeros(short.rows(), short.cols());
    for r in 0..short.rows() {
        for c in 0..short.cols() {
            let g = 1.0 / (1.0 + (-pre.get(r, c)).exp());
            out.set(r, c, g * short.get(r, c) + (1.0 - g) * long.get(r, c));
        }
    }
    Ok(out)
}

/// Forward-only counterpart of the tape forward pass; bit-for-bit the same
/// computation, minus the gradient record.
pub fn raw_forward_segment(
    params: &ModelParams,
    user: &UserState,
    segment: &[u32],
    cfg: &ModelConfig,
    scores: &mut u64,
) -> Result<RawForward> {
    let levels = raw_short_levels(params, user.cache.as_ref(), segment, cfg, scores)?;
    let short = levels.last().unwrap().clone();
    let fused = if cfg.variant == Variant::Xl {
        short
    } else {
        let mut long = levels[0].clone();
        for (l, layer) in params.layers.iter().enumerate() {
            let memory = if user.memory.segments_fused == 0 {
                &params.init_memory[l]
            } else {
                &user.memory.levels[l]
            };
            if memory.rows() == 0 {
                return Err(DmanError::EmptyMemory);
            }
            long = raw_attention(
                &long,
                memory,
                None,
                &layer.long_term,
                cfg.attention_scale,
                scores,
            )?;
        }
        raw_gate(&short, &long, params)?
    };
    Ok(RawForward {
        fused,
        hidden_values: levels,
    })
}

/// Rebuilds the user state a trained model would hold just before its final
/// segment: forwards segments 0..N-2, updating memory and cache in the same
/// order as training.
pub fn replay_user(
    params: &ModelParams,
    history: &SegmentedHistory,
    cfg: &ModelConfig,
) -> Result<UserState> {
    let n = history.n_segments();
    if n == 0 {
        return Err(DmanError::ColdStart {
            user: history.user as u64,
        });
    }
    let mut state = UserState::fresh(params);
    let mut scores = 0u64;
    for seg_index in 0..n.saturating_sub(1) {
        let levels = raw_short_levels(
            params,
            state.cache.as_ref(),
            &history.segments[seg_index],
            cfg,
            &mut scores,
        )?;
        if seg_index >= 1 {
            if let Some(kind) = cfg.variant.memory_update() {
                let cache = state.cache.as_ref().expect("cache set after segment 0");
                state.memory = update_memory(
                    &state.memory,
                    cache,
                    &params.routing,
                    cfg.routing_iters,
                    kind,
                )?;
            }
        }
        state.cache = Some(CachedState {
            levels,
            segment_index: seg_index,
        });
        state.next_segment = seg_index + 1;
    }
    Ok(state)
}

/// Profile embedding for one user: forward the most recent segment against
/// the replayed state and take the fused row of the last real position.
/// `scores` counts only this profiling forward.
pub fn infer_user(
    params: &ModelParams,
    user: &UserState,
    history: &SegmentedHistory,
    cfg: &ModelConfig,
    scores: &mut u64,
) -> Result<Vec<f64>> {
    let n = history.n_segments();
    if n == 0 {
        return Err(DmanError::ColdStart {
            user: history.user as u64,
        });
    }
    if cfg.variant == Variant::FullScan {
        let items = history.train_items();
        return full_scan_embedding(params, &items, cfg, scores);
    }
    let last = &history.segments[n - 1];
    if user.next_segment != n - 1 {
        return Err(DmanError::Sequencing {
            expected: n - 1,
            got: user.next_segment,
        });
    }
    let fwd = raw_forward_segment(params, user, last, cfg, scores)?;
    let last_real = last
        .iter()
        .rposition(|&i| i != PADDING_ITEM)
        .ok_or(DmanError::ColdStart {
            user: history.user as u64,
        })?;
    Ok(fwd.fused.row(last_real).to_vec())
}

/// The efficiency foil: one causal attention pass over the entire
/// concatenated history, positional table tiled along it.
pub fn full_scan_embedding(
    params: &ModelParams,
    items: &[u32],
    cfg: &ModelConfig,
    scores: &mut u64,
) -> Result<Vec<f64>> {
    if items.is_empty() {
        return Err(DmanError::ColdStart { user: 0 });
    }
    let len = items.len();
    let mut h = level0_input(params, items);
    let mask = causal_mask(len, 0);
    for layer in &params.layers {
        h = raw_attention(
            &h,
            &h.clone(),
            Some(&mask),
            &layer.recurrent,
            cfg.attention_scale,
            scores,
        )?;
    }
    Ok(h.row(len - 1).to_vec())
}

/// Attention scores needed to profile one user with the memory-bounded
/// model: L layers of T x 2T recurrent scores plus T x m memory reads.
pub fn score_count_dman(cfg: &ModelConfig) -> u64 {
    let t = cfg.window as u64;
    let m = cfg.memory_slots as u64;
    cfg.layers as u64 * t * (2 * t + m)
}

/// Attention scores for a full-history scan of `total_len` items.
pub fn score_count_full_scan(cfg: &ModelConfig, total_len: usize) -> u64 {
    cfg.layers as u64 * (total_len as u64).pow(2)
}
