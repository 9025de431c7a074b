//! Differentiable forward pass for one user segment and the sampled-softmax
//! objective.

use std::collections::{HashMap, HashSet};

use super::{ModelConfig, ModelParams, UserState, Variant};
use crate::attention::{
    long_term_attention_layer, recurrent_attention_layer, TripleNodes,
};
use crate::data::{sample_negatives, PADDING_ITEM};
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::tape::{Node, Tape};

/// Tape handles for the main-phase parameters (everything but the routing
/// transforms; the embedding stays external and is reached via gathers).
pub struct ParamNodes {
    pub positional: Node,
    pub layers: Vec<LayerNodes>,
    pub w_short: Node,
    pub w_long: Node,
    pub init_memory: Vec<Node>,
}

pub struct LayerNodes {
    pub recurrent: TripleNodes,
    pub long_term: TripleNodes,
}

impl ParamNodes {
    pub fn new(tape: &mut Tape, params: &ModelParams) -> Self {
        ParamNodes {
            positional: tape.param(params.positional.clone()),
            layers: params
                .layers
                .iter()
                .map(|l| LayerNodes {
                    recurrent: l.recurrent.params(tape),
                    long_term: l.long_term.params(tape),
                })
                .collect(),
            w_short: tape.param(params.w_short.clone()),
            w_long: tape.param(params.w_long.clone()),
            init_memory: params
                .init_memory
                .iter()
                .map(|m| tape.param(m.clone()))
                .collect(),
        }
    }

    /// Gradients in `dense_tensors` order; zero matrices for tensors this
    /// tape never touched (the routing transforms).
    pub fn collect_grads(&self, tape: &mut Tape, params: &ModelParams) -> GradSet {
        let mut dense = Vec::new();
        for (name, tensor) in params.dense_tensors() {
            let node = self.lookup(&name);
            let grad = match node {
                Some(n) => tape.grad(n).clone(),
                None => Matrix::zeros(tensor.rows(), tensor.cols()),
            };
            dense.push(grad);
        }
        GradSet {
            dense,
            embedding_rows: tape.take_table_grads(),
        }
    }

    fn lookup(&self, name: &str) -> Option<Node> {
        if name == "positional" {
            return Some(self.positional);
        }
        if name == "gate/short" {
            return Some(self.w_short);
        }
        if name == "gate/long" {
            return Some(self.w_long);
        }
        if let Some(rest) = name.strip_prefix("init_memory") {
            return rest.parse::<usize>().ok().map(|l| self.init_memory[l]);
        }
        if let Some(rest) = name.strip_prefix("layer") {
            let mut parts = rest.splitn(3, '/');
            let l: usize = parts.next()?.parse().ok()?;
            let path = parts.next()?;
            let w = parts.next()?;
            let triple = match path {
                "rec" => &self.layers[l].recurrent,
                "long" => &self.layers[l].long_term,
                _ => return None,
            };
            return Some(match w {
                "wq" => triple.w_q,
                "wk" => triple.w_k,
                "wv" => triple.w_v,
                _ => return None,
            });
        }
        None
    }
}

/// Gradients aligned with `ModelParams::dense_tensors`, plus sparse
/// embedding-row gradients.
#[derive(Debug, Clone, Default)]
pub struct GradSet {
    pub dense: Vec<Matrix>,
    pub embedding_rows: HashMap<usize, Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradSet {
            dense: params
                .dense_tensors()
                .iter()
                .map(|(_, t)| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
            embedding_rows: HashMap::new(),
        }
    }

    pub fn accumulate(&mut self, other: &GradSet) {
        for (a, b) in self.dense.iter_mut().zip(&other.dense) {
            a.add_assign(b);
        }
        for (row, grad) in &other.embedding_rows {
            let entry = self
                .embedding_rows
                .entry(*row)
                .or_insert_with(|| vec![0.0; grad.len()]);
            for (e, g) in entry.iter_mut().zip(grad) {
                *e += g;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for m in &mut self.dense {
            *m = m.scale(k);
        }
        for grad in self.embedding_rows.values_mut() {
            for g in grad {
                *g *= k;
            }
        }
    }

    /// Max gradient magnitude, for divergence diagnostics.
    pub fn max_abs(&self) -> f64 {
        let dense = self
            .dense
            .iter()
            .flat_map(|m| m.as_slice())
            .fold(0.0f64, |a, &x| a.max(x.abs()));
        self.embedding_rows
            .values()
            .flatten()
            .fold(dense, |a, &x| a.max(x.abs()))
    }
}

/// Sigmoid-gated blend of the short- and long-term interest embeddings:
/// G = sigma(short W_short + long W_long), out = G*short + (1-G)*long.
pub fn gate_fuse(
    tape: &mut Tape,
    short: Node,
    long: Node,
    w_short: Node,
    w_long: Node,
) -> Result<Node> {
    if tape.value(short).shape() != tape.value(long).shape() {
        let (lr, lc) = tape.value(short).shape();
        let (rr, rc) = tape.value(long).shape();
        return Err(DmanError::Shape {
            op: "gate_fuse",
            left_rows: lr,
            left_cols: lc,
            right_rows: rr,
            right_cols: rc,
        });
    }
    let a = tape.matmul(short, w_short)?;
    let b = tape.matmul(long, w_long)?;
    let pre = tape.add(a, b)?;
    let g = tape.sigmoid(pre);
    let neg_g = tape.scale(g, -1.0);
    let one_minus_g = tape.add_scalar(neg_g, 1.0);
    let short_part = tape.hadamard(g, short)?;
    let long_part = tape.hadamard(one_minus_g, long)?;
    tape.add(short_part, long_part)
}

/// Output of processing one segment on a tape.
pub struct SegmentForward {
    /// Fused per-position user embedding V_n (T x D).
    pub fused: Node,
    /// Detached hidden values per level 0..=L (level 0 = embedded input),
    /// ready to become the next cache and to feed memory updates.
    pub hidden_values: Vec<Matrix>,
}

/// Runs the layer stack for one segment. The cached context and the fused
/// memory are read from `user` as detached state; only the very first
/// segments read the trainable initial memory directly.
pub fn forward_segment(
    tape: &mut Tape,
    params: &ModelParams,
    nodes: &ParamNodes,
    user: &UserState,
    segment: &[u32],
    segment_index: usize,
    cfg: &ModelConfig,
) -> Result<SegmentForward> {
    if segment_index != user.next_segment {
        return Err(DmanError::Sequencing {
            expected: user.next_segment,
            got: segment_index,
        });
    }
    if segment.len() != cfg.window {
        return Err(DmanError::InvalidArgument(format!(
            "segment length {} does not match window {}",
            segment.len(),
            cfg.window
        )));
    }
    let ids: Vec<usize> = segment.iter().map(|&i| i as usize).collect();
    let gathered = tape.gather(&params.embedding, &ids)?;
    let x0 = tape.add(gathered, nodes.positional)?;

    let mut hidden_values = vec![tape.value(x0).clone()];
    let mut short = x0;
    for (l, layer) in nodes.layers.iter().enumerate() {
        let context = match cfg.variant {
            Variant::Nran => None,
            _ => user.cache.as_ref().map(|c| &c.levels[l]),
        };
        short = recurrent_attention_layer(
            tape,
            short,
            context,
            &layer.recurrent,
            cfg.attention_scale,
        )?;
        hidden_values.push(tape.value(short).clone());
    }

    let fused = if cfg.variant == Variant::Xl {
        short
    } else {
        let mut long = x0;
        for (l, layer) in nodes.layers.iter().enumerate() {
            let memory = if user.memory.segments_fused == 0 {
                nodes.init_memory[l]
            } else {
                tape.constant(user.memory.levels[l].clone())
            };
            long = long_term_attention_layer(
                tape,
                long,
                memory,
                &layer.long_term,
                cfg.attention_scale,
            )?;
        }
        gate_fuse(tape, short, long, nodes.w_short, nodes.w_long)?
    };

    Ok(SegmentForward {
        fused,
        hidden_values,
    })
}

/// Negative log-likelihood of the target against the sampled candidate set;
/// candidate 0 is the target.
pub fn sampled_softmax_loss(
    tape: &mut Tape,
    user_emb: Node,
    target: u32,
    negatives: &[u32],
    embedding: &Matrix,
) -> Result<Node> {
    debug_assert!(!negatives.contains(&target));
    debug_assert!(!negatives.contains(&PADDING_ITEM));
    let mut candidates: Vec<usize> = Vec::with_capacity(1 + negatives.len());
    candidates.push(target as usize);
    candidates.extend(negatives.iter().map(|&n| n as usize));
    let cand = tape.gather(embedding, &candidates)?;
    let emb_t = tape.transpose(user_emb);
    let scores = tape.matmul(cand, emb_t)?;
    let lse = tape.log_sum_exp(scores)?;
    let pos = tape.slice_rows(scores, 0, 1);
    tape.sub(lse, pos)
}

/// Sum of per-position next-item losses for one segment. Targets shift
/// causally within the segment; the final position takes the next
/// segment's first item (`boundary_target`) when one exists, so every
/// query position receives supervision somewhere in the history. Padding
/// targets are skipped.
pub fn segment_nll(
    tape: &mut Tape,
    fused: Node,
    segment: &[u32],
    boundary_target: Option<u32>,
    params: &ModelParams,
    cfg: &ModelConfig,
    rng: &mut StreamRng,
) -> Result<(Option<Node>, usize)> {
    let vocab = params.vocab_size() as u32 - 1; // item ids 1..=vocab
    let mut total: Option<Node> = None;
    let mut positions = 0;
    for t in 0..segment.len() {
        let target = if t + 1 < segment.len() {
            segment[t + 1]
        } else {
            match boundary_target {
                Some(item) => item,
                None => continue,
            }
        };
        if target == PADDING_ITEM {
            continue;
        }
        let exclude: HashSet<u32> = [target].into_iter().collect();
        let negatives = sample_negatives(rng, vocab, &exclude, cfg.neg_samples)?;
        let row = tape.slice_rows(fused, t, t + 1);
        let loss = sampled_softmax_loss(tape, row, target, &negatives, &params.embedding)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        positions += 1;
    }
    Ok((total, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::rng::streams;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            embed_dim: 4,
            window: 3,
            memory_slots: 2,
            layers: 2,
            neg_samples: 2,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn gate_zero_weights_average_the_inputs() {
        let mut rng = StreamRng::new(70, 0);
        let short_m = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let long_m = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let s = tape.constant(short_m.clone());
        let l = tape.constant(long_m.clone());
        let ws = tape.constant(Matrix::zeros(4, 4));
        let wl = tape.constant(Matrix::zeros(4, 4));
        let out = gate_fuse(&mut tape, s, l, ws, wl).unwrap();
        let expect = short_m.add(&long_m).unwrap().scale(0.5);
        assert!(tape.value(out).max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn gate_identical_inputs_pass_through() {
        let mut rng = StreamRng::new(71, 0);
        let x = Matrix::random_normal(3, 4, 1.0, &mut rng);
        let ws_m = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let wl_m = Matrix::random_normal(4, 4, 1.0, &mut rng);
        let mut tape = Tape::new();
        let s = tape.constant(x.clone());
        let l = tape.constant(x.clone());
        let ws = tape.constant(ws_m);
        let wl = tape.constant(wl_m);
        let out = gate_fuse(&mut tape, s, l, ws, wl).unwrap();
        assert!(tape.value(out).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn gate_output_lies_between_inputs_coordinatewise() {
        let mut rng = StreamRng::new(72, 0);
        for _ in 0..5 {
            let short_m = Matrix::random_normal(3, 4, 2.0, &mut rng);
            let long_m = Matrix::random_normal(3, 4, 2.0, &mut rng);
            let ws_m = Matrix::random_normal(4, 4, 1.0, &mut rng);
            let wl_m = Matrix::random_normal(4, 4, 1.0, &mut rng);
            let mut tape = Tape::new();
            let s = tape.constant(short_m.clone());
            let l = tape.constant(long_m.clone());
            let ws = tape.constant(ws_m);
            let wl = tape.constant(wl_m);
            let out = gate_fuse(&mut tape, s, l, ws, wl).unwrap();
            for r in 0..3 {
                for c in 0..4 {
                    let (a, b) = (short_m.get(r, c), long_m.get(r, c));
                    let (lo, hi) = (a.min(b), a.max(b));
                    let y = tape.value(out).get(r, c);
                    assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_shape_mismatch_is_error() {
        let mut tape = Tape::new();
        let s = tape.constant(Matrix::zeros(3, 4));
        let l = tape.constant(Matrix::zeros(2, 4));
        let ws = tape.constant(Matrix::zeros(4, 4));
        let wl = tape.constant(Matrix::zeros(4, 4));
        assert!(matches!(
            gate_fuse(&mut tape, s, l, ws, wl),
            Err(DmanError::Shape { .. })
        ));
    }

    #[test]
    fn sampled_loss_symmetric_pair_is_ln2() {
        // One negative with the same score as the target.
        let mut embedding = Matrix::zeros(3, 2);
        embedding.set(1, 0, 1.0);
        embedding.set(2, 0, 1.0);
        let mut tape = Tape::new();
        let emb = tape.constant(Matrix::from_rows(&[vec![0.7, -0.3]]));
        let loss = sampled_softmax_loss(&mut tape, emb, 1, &[2], &embedding).unwrap();
        assert!((tape.scalar(loss) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sampled_loss_vanishes_when_target_dominates() {
        let mut embedding = Matrix::zeros(3, 1);
        embedding.set(1, 0, 40.0);
        embedding.set(2, 0, -40.0);
        let mut tape = Tape::new();
        let emb = tape.constant(Matrix::from_rows(&[vec![1.0]]));
        let loss = sampled_softmax_loss(&mut tape, emb, 1, &[2], &embedding).unwrap();
        assert!(tape.scalar(loss) < 1e-12);
    }

    #[test]
    fn sampled_loss_matches_scalar_oracle() {
        // Scores: target 1, negatives 0 and -1. Direct scalar evaluation of
        // -log(e / (e + 1 + e^{-1})).
        let expect = -((1.0f64.exp()) / (1.0f64.exp() + 1.0 + (-1.0f64).exp())).ln();
        let mut embedding = Matrix::zeros(4, 1);
        embedding.set(1, 0, 1.0);
        embedding.set(2, 0, 0.0);
        embedding.set(3, 0, -1.0);
        let mut tape = Tape::new();
        let emb = tape.constant(Matrix::from_rows(&[vec![1.0]]));
        let loss = sampled_softmax_loss(&mut tape, emb, 1, &[2, 3], &embedding).unwrap();
        assert!((tape.scalar(loss) - expect).abs() < 1e-12);
        // the value itself, frozen from the oracle
        assert!((tape.scalar(loss) - 0.40760596444438079).abs() < 1e-15);
    }

    #[test]
    fn shifting_all_candidate_scores_keeps_top1_and_loss() {
        let mut rng = StreamRng::new(73, 0);
        let d = 4;
        let mut embedding = Matrix::random_normal(6, d, 1.0, &mut rng);
        let user = Matrix::random_normal(1, d, 1.0, &mut rng);
        let score = |emb: &Matrix, item: usize| -> f64 {
            (0..d).map(|c| emb.get(item, c) * user.get(0, c)).sum()
        };
        let base: Vec<f64> = (1..6).map(|i| score(&embedding, i)).collect();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        let loss_of = |embedding: &Matrix| {
            let mut tape = Tape::new();
            let emb = tape.constant(user.clone());
            let loss = sampled_softmax_loss(&mut tape, emb, 1, &[2, 3, 4, 5], embedding).unwrap();
            tape.scalar(loss)
        };
        let before = loss_of(&embedding);

        // Shift all candidate logits by a constant: add c * user/|user|^2 so
        // every dot product moves by c.
        let norm_sq: f64 = (0..d).map(|c| user.get(0, c) * user.get(0, c)).sum();
        let c = 3.5;
        for item in 1..6 {
            for f in 0..d {
                let v = embedding.get(item, f) + c * user.get(0, f) / norm_sq;
                embedding.set(item, f, v);
            }
        }
        let shifted: Vec<f64> = (1..6).map(|i| score(&embedding, i)).collect();
        for (a, b) in base.iter().zip(&shifted) {
            assert!((b - a - c).abs() < 1e-10);
        }
        assert_eq!(argmax(&base), argmax(&shifted));
        let after = loss_of(&embedding);
        assert!((before - after).abs() < 1e-10);
    }

    fn forward_once(
        params: &ModelParams,
        user: &UserState,
        segment: &[u32],
        cfg: &ModelConfig,
    ) -> (Matrix, Vec<Matrix>) {
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, params);
        let fwd = forward_segment(&mut tape, params, &nodes, user, segment, 0, cfg).unwrap();
        (tape.value(fwd.fused).clone(), fwd.hidden_values)
    }

    #[test]
    fn xl_variant_outputs_short_term_pathway_only() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12);
        let user = UserState::fresh(&params);
        let seg = vec![1, 2, 3];

        let xl_cfg = ModelConfig {
            variant: Variant::Xl,
            ..cfg.clone()
        };
        let (fused, hiddens) = forward_once(&params, &user, &seg, &xl_cfg);
        assert!(fused.max_abs_diff(hiddens.last().unwrap()) == 0.0);

        // and the full model differs (gate mixes in the long-term readout)
        let (full, _) = forward_once(&params, &user, &seg, &cfg);
        assert!(full.max_abs_diff(&fused) > 1e-9);
    }

    #[test]
    fn nran_variant_ignores_cached_context() {
        let cfg = ModelConfig {
            variant: Variant::Nran,
            ..tiny_cfg()
        };
        let params = ModelParams::init(&cfg, 12);
        let mut user = UserState::fresh(&params);
        let seg = vec![1, 2, 3];
        let (base, hiddens) = forward_once(&params, &user, &seg, &cfg);

        // Install a cache; with NRAN the forward must not change.
        user.cache = Some(crate::attention::CachedState {
            levels: hiddens.clone(),
            segment_index: 0,
        });
        let (with_cache, _) = forward_once(&params, &user, &seg, &cfg);
        assert!(base.max_abs_diff(&with_cache) == 0.0);

        // The full model does read the cache.
        let dman_cfg = ModelConfig {
            variant: Variant::Dman,
            ..cfg
        };
        let fresh_user = UserState::fresh(&params);
        let (dman_base, _) = forward_once(&params, &fresh_user, &seg, &dman_cfg);
        let mut cached_user = UserState::fresh(&params);
        cached_user.cache = user.cache.clone();
        let (dman_with, _) = forward_once(&params, &cached_user, &seg, &dman_cfg);
        assert!(dman_with.max_abs_diff(&dman_base) > 1e-9);
    }

    #[test]
    fn first_segment_reads_learned_initial_memory_with_gradient() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12);
        let user = UserState::fresh(&params);
        let seg = vec![1, 2, 3];
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let fwd = forward_segment(&mut tape, &params, &nodes, &user, &seg, 0, &cfg).unwrap();
        let loss = tape.frob_sq(fwd.fused);
        tape.backward(loss).unwrap();
        for &m in &nodes.init_memory {
            assert!(tape.grad(m).frobenius_norm() > 0.0);
        }
    }

    #[test]
    fn segment_index_gap_is_sequencing_error() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12);
        let user = UserState::fresh(&params);
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        assert!(matches!(
            forward_segment(&mut tape, &params, &nodes, &user, &[1, 2, 3], 1, &cfg),
            Err(DmanError::Sequencing { .. })
        ));
    }

    #[test]
    fn padding_targets_are_skipped() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 12);
        let user = UserState::fresh(&params);
        // segment [0, 0, 5]: only position 1 has a real target
        let seg = vec![0, 0, 5];
        let mut tape = Tape::new();
        let nodes = ParamNodes::new(&mut tape, &params);
        let fwd = forward_segment(&mut tape, &params, &nodes, &user, &seg, 0, &cfg).unwrap();
        let mut rng = StreamRng::new(cfg.seed, streams::negatives(0, 0, 0));
        let (loss, positions) =
            segment_nll(&mut tape, fwd.fused, &seg, None, &params, &cfg, &mut rng).unwrap();
        assert_eq!(positions, 1);
        assert!(loss.is_some());
    }

    /// FD check of the whole phase-A computation (forward + loss) for every
    /// main-phase tensor on a tiny instance.
    #[test]
    fn phase_a_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        let base = ModelParams::init(&cfg, 10);
        let mut user = UserState::fresh(&base);
        // give the user a cache and a fused memory so all paths are active
        let seg0 = vec![1, 2, 3];
        let (_, hiddens) = forward_once(&base, &user, &seg0, &cfg);
        user.cache = Some(crate::attention::CachedState {
            levels: hiddens,
            segment_index: 0,
        });
        user.memory = crate::memory::MemoryState {
            levels: vec![
                Matrix::random_normal(2, 4, 0.5, &mut StreamRng::new(9, 1)),
                Matrix::random_normal(2, 4, 0.5, &mut StreamRng::new(9, 2)),
            ],
            segments_fused: 1,
        };
        user.next_segment = 1;
        let seg = vec![4, 5, 6];

        // Frozen negatives for determinism across FD evaluations.
        let eval = |params: &ModelParams, want: bool| -> (f64, GradSet) {
            let mut tape = Tape::new();
            let nodes = ParamNodes::new(&mut tape, params);
            let fwd =
                forward_segment(&mut tape, params, &nodes, &user, &seg, 1, &cfg).unwrap();
            let mut rng = StreamRng::new(cfg.seed, streams::negatives(0, 1, 0));
            let (loss, _) =
                segment_nll(&mut tape, fwd.fused, &seg, Some(7), params, &cfg, &mut rng)
                    .unwrap();
            let loss = loss.unwrap();
            if want {
                tape.backward(loss).unwrap();
                let grads = nodes.collect_grads(&mut tape, params);
                (tape.scalar(loss), grads)
            } else {
                (tape.scalar(loss), GradSet::default())
            }
        };
        let (_, grads) = eval(&base, true);

        // check a representative subset of tensors (full sweep runs in the
        // acceptance suite)
        let names = ["positional", "layer0/rec/wk", "layer1/long/wv", "gate/short", "init_memory0"];
        let dense = base.dense_tensors();
        for name in names {
            let idx = dense.iter().position(|(n, _)| n == name).unwrap();
            let param_mat = dense[idx].1.clone();
            let analytic = grads.dense[idx].clone();
            let f = |mats: &[Matrix]| -> Result<f64> {
                let mut p = base.clone();
                *p.dense_tensors_mut()[idx].1 = mats[0].clone();
                Ok(eval(&p, false).0)
            };
            let report = grad_check(f, &[param_mat], &[analytic], &[name], 1e-5).unwrap();
            assert!(report.max_rel_err() < 1e-6, "{name}: {report:?}");
        }

        // embedding rows reached by gathers
        let emb_grad = {
            let mut dense_emb = Matrix::zeros(base.embedding.rows(), base.embedding.cols());
            for (row, g) in &grads.embedding_rows {
                for (c, v) in g.iter().enumerate() {
                    dense_emb.set(*row, c, *v);
                }
            }
            dense_emb
        };
        let f = |mats: &[Matrix]| -> Result<f64> {
            let mut p = base.clone();
            p.embedding = mats[0].clone();
            Ok(eval(&p, false).0)
        };
        let report = grad_check(f, &[base.embedding.clone()], &[emb_grad], &["embedding"], 1e-5)
            .unwrap();
        assert!(report.max_rel_err() < 1e-6, "embedding: {report:?}");
    }
}
