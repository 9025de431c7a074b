//! The alternating two-phase training loop.
//!
//! Per (batch, segment) step: phase A forwards every user in parallel,
//! backprops the sampled-softmax likelihood, and applies one Adam step to
//! everything except the routing transforms. Phase B fuses the previous
//! segment's hidden states into each user's memory via dynamic routing,
//! backprops the reconstruction loss, and applies one Adam step to the
//! routing transforms alone. Phase C caches the fresh hidden states and
//! advances the segment cursor.
//!
//! Gradient reduction happens in user order after the parallel map, so runs
//! are bit-reproducible regardless of worker scheduling.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{
    forward_segment, segment_nll, Adam, GradSet, ModelConfig, ModelParams, ParamNodes, Phase,
    UserState, Variant,
};
use crate::attention::CachedState;
use crate::data::SegmentedHistory;
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::memory::{dynamic_routing, reconstruction_loss, update_memory, MemoryUpdateKind};
use crate::rng::{streams, StreamRng};
use crate::tape::{Node, Tape};

#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub main_loss: f64,
    pub aux_loss: f64,
    pub positions: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainLogLine {
    pub epoch: usize,
    pub segment: usize,
    pub main_loss: f64,
    pub aux_loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub lines: Vec<TrainLogLine>,
    pub final_main_loss: f64,
    pub final_aux_loss: f64,
}

struct PhaseAOut {
    grads: GradSet,
    loss_sum: f64,
    positions: usize,
    hidden_values: Vec<Matrix>,
}

struct PhaseBOut {
    routing_grads: Vec<Matrix>,
    loss: f64,
    new_levels: Vec<Matrix>,
}

/// One aligned optimization step over a batch of users at one segment index.
pub fn train_step(
    params: &mut ModelParams,
    opt: &mut Adam,
    users: &mut [(&SegmentedHistory, &mut UserState)],
    seg_index: usize,
    cfg: &ModelConfig,
    epoch: usize,
) -> Result<StepStats> {
    // ── phase A: likelihood over the new segment ────────────────────
    let params_ref = &*params;
    let phase_a: Vec<PhaseAOut> = users
        .par_iter()
        .map(|(history, state)| -> Result<PhaseAOut> {
            let segment = &history.segments[seg_index];
            let mut tape = Tape::new();
            let nodes = ParamNodes::new(&mut tape, params_ref);
            let fwd =
                forward_segment(&mut tape, params_ref, &nodes, state, segment, seg_index, cfg)?;
            let mut rng = StreamRng::new(
                cfg.seed,
                streams::negatives(epoch as u64, seg_index as u64, history.user as u64),
            );
            let boundary_target = history
                .segments
                .get(seg_index + 1)
                .map(|next| next[0]);
            let (loss, positions) = segment_nll(
                &mut tape,
                fwd.fused,
                segment,
                boundary_target,
                params_ref,
                cfg,
                &mut rng,
            )?;
            let (grads, loss_sum) = match loss {
                Some(l) => {
                    tape.backward(l)?;
                    (nodes.collect_grads(&mut tape, params_ref), tape.scalar(l))
                }
                None => (GradSet::zeros_like(params_ref), 0.0),
            };
            Ok(PhaseAOut {
                grads,
                loss_sum,
                positions,
                hidden_values: fwd.hidden_values,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = GradSet::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut positions = 0;
    for out in &phase_a {
        total.accumulate(&out.grads);
        loss_sum += out.loss_sum;
        positions += out.positions;
    }
    let main_loss = if positions > 0 {
        loss_sum / positions as f64
    } else {
        0.0
    };
    if !main_loss.is_finite() {
        return Err(DmanError::NonFinite {
            context: format!(
                "main loss at epoch {epoch} segment {seg_index}: loss={main_loss}, \
                 max|grad|={}",
                total.max_abs()
            ),
        });
    }
    if positions > 0 {
        total.scale(1.0 / positions as f64);
        opt.step(params, &total, Phase::Main);
    }

    // ── phase B: memory update + reconstruction loss ────────────────
    let mut aux_loss = 0.0;
    if seg_index >= 1 {
        match cfg.variant.memory_update() {
            Some(MemoryUpdateKind::Routing) => {
                let params_ref = &*params;
                let routing_names: Vec<usize> = params_ref
                    .dense_tensors()
                    .iter()
                    .enumerate()
                    .filter(|(_, (name, _))| name.starts_with("routing"))
                    .map(|(i, _)| i)
                    .collect();

                let phase_b: Vec<PhaseBOut> = users
                    .par_iter()
                    .zip(phase_a.par_iter())
                    .map(|((_, state), a_out)| -> Result<PhaseBOut> {
                        phase_b_routing(params_ref, state, &a_out.hidden_values, cfg)
                    })
                    .collect::<Result<Vec<_>>>()?;

                let mut grads = GradSet::zeros_like(params);
                for out in &phase_b {
                    for (slot, g) in routing_names.iter().zip(&out.routing_grads) {
                        grads.dense[*slot].add_assign(g);
                    }
                    aux_loss += out.loss;
                }
                let n_users = users.len() as f64;
                aux_loss /= n_users;
                if !aux_loss.is_finite() {
                    return Err(DmanError::NonFinite {
                        context: format!(
                            "reconstruction loss at epoch {epoch} segment {seg_index}"
                        ),
                    });
                }
                grads.scale(1.0 / n_users);
                opt.step(params, &grads, Phase::Routing);

                for ((_, state), out) in users.iter_mut().zip(phase_b) {
                    state.memory.levels = out.new_levels;
                    state.memory.segments_fused += 1;
                }
            }
            Some(MemoryUpdateKind::Fifo) => {
                for (_, state) in users.iter_mut() {
                    let cache = state.cache.as_ref().ok_or(DmanError::Sequencing {
                        expected: seg_index,
                        got: 0,
                    })?;
                    state.memory = update_memory(
                        &state.memory,
                        cache,
                        &params.routing,
                        cfg.routing_iters,
                        MemoryUpdateKind::Fifo,
                    )?;
                }
            }
            None => {}
        }
    }

    // ── phase C: cache the new hidden states, advance the cursor ────
    for ((_, state), a_out) in users.iter_mut().zip(phase_a) {
        state.cache = Some(CachedState {
            levels: a_out.hidden_values,
            segment_index: seg_index,
        });
        state.next_segment = seg_index + 1;
    }

    Ok(StepStats {
        main_loss,
        aux_loss,
        positions,
    })
}

/// Routing forward + reconstruction loss for one user. The query for level l
/// is the current segment's level-l hidden state; the frozen projections are
/// the level-(l+1) recurrent attention weights.
fn phase_b_routing(
    params: &ModelParams,
    state: &UserState,
    current_hiddens: &[Matrix],
    cfg: &ModelConfig,
) -> Result<PhaseBOut> {
    let cache = state.cache.as_ref().ok_or(DmanError::Sequencing {
        expected: 1,
        got: 0,
    })?;
    let mut tape = Tape::new();
    let transform_nodes: Vec<Vec<Node>> = params
        .routing
        .iter()
        .map(|rp| rp.transforms.iter().map(|w| tape.param(w.clone())).collect())
        .collect();

    let mut total: Option<Node> = None;
    let mut new_levels = Vec::with_capacity(params.routing.len());
    for l in 0..params.routing.len() {
        let old_memory = &state.memory.levels[l];
        let prev_hidden = &cache.levels[l];
        let primary_val = old_memory.concat_rows(prev_hidden)?;
        let primary = tape.constant(primary_val);
        let new_mem = dynamic_routing(&mut tape, primary, &transform_nodes[l], cfg.routing_iters)?;
        let loss = reconstruction_loss(
            &mut tape,
            &current_hiddens[l],
            old_memory,
            prev_hidden,
            new_mem,
            &params.layers[l].recurrent,
            cfg.attention_scale,
        )?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        new_levels.push(tape.value(new_mem).clone());
    }
    let total = total.expect("at least one level");
    tape.backward(total)?;
    let routing_grads = transform_nodes
        .iter()
        .flatten()
        .map(|&n| tape.grad(n).clone())
        .collect();
    Ok(PhaseBOut {
        routing_grads,
        loss: tape.scalar(total),
        new_levels,
    })
}

/// Full training driver: per epoch, users are grouped by segment count,
/// shuffled, and batched; every batch walks its segments in order. Returns
/// the loss log and the optimizer (whose moment buffers go into
/// checkpoints).
pub fn train(
    params: &mut ModelParams,
    histories: &[SegmentedHistory],
    cfg: &ModelConfig,
) -> Result<(TrainLog, Adam)> {
    cfg.validate()?;
    if histories.is_empty() {
        return Err(DmanError::InvalidArgument("no users to train on".into()));
    }
    if cfg.variant == Variant::FullScan {
        return Err(DmanError::InvalidArgument(
            "full_scan is an inference-time baseline and cannot be trained segment-wise".into(),
        ));
    }
    let mut opt = Adam::new(params, cfg.lr);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let mut states: Vec<UserState> =
            histories.iter().map(|_| UserState::fresh(params)).collect();

        // batches only mix users with the same segment count
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, h) in histories.iter().enumerate() {
            groups.entry(h.n_segments()).or_default().push(i);
        }
        let mut rng = StreamRng::new(cfg.seed, streams::shuffle(epoch as u64));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        for idxs in groups.values_mut() {
            for i in (1..idxs.len()).rev() {
                let j = rng.below(i + 1);
                idxs.swap(i, j);
            }
            for chunk in idxs.chunks(cfg.batch_size) {
                batches.push(chunk.to_vec());
            }
        }

        // (main sum, aux sum, batch count) per segment index
        let mut per_segment: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
        for batch in &batches {
            let n = histories[batch[0]].n_segments();
            let mut owned: Vec<(usize, UserState)> = batch
                .iter()
                .map(|&i| (i, std::mem::replace(&mut states[i], UserState::fresh(params))))
                .collect();
            {
                let mut refs: Vec<(&SegmentedHistory, &mut UserState)> = owned
                    .iter_mut()
                    .map(|(i, s)| (&histories[*i], s))
                    .collect();
                for seg in 0..n {
                    let stats = train_step(params, &mut opt, &mut refs, seg, cfg, epoch)?;
                    let entry = per_segment.entry(seg).or_insert((0.0, 0.0, 0));
                    entry.0 += stats.main_loss;
                    entry.1 += stats.aux_loss;
                    entry.2 += 1;
                }
            }
            for (i, s) in owned {
                states[i] = s;
            }
        }

        for (seg, (main_sum, aux_sum, count)) in per_segment {
            let line = TrainLogLine {
                epoch,
                segment: seg,
                main_loss: main_sum / count as f64,
                aux_loss: aux_sum / count as f64,
            };
            log.lines.push(line);
            log.final_main_loss = line.main_loss;
            log.final_aux_loss = line.aux_loss;
        }
    }
    Ok((log, opt))
}
