//! Per-user external memory and the abstraction machinery that maintains it:
//! a FIFO baseline, capsule-style dynamic routing with the squash
//! nonlinearity, and the attention-based reconstruction loss that is the
//! only training signal for the routing transforms.

use crate::attention::{attention_core, raw_attention, CachedState, ProjectionTriple};
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::rng::StreamRng;
use crate::tape::{squash_rows_value, Node, Tape};

/// Per-level memory matrices plus how many segments have been fused in.
#[derive(Debug, Clone)]
pub struct MemoryState {
    /// One m x D matrix per level 0..L-1; level l feeds attention layer l+1.
    pub levels: Vec<Matrix>,
    pub segments_fused: usize,
}

impl MemoryState {
    pub fn from_initial(initial: &[Matrix]) -> Self {
        MemoryState {
            levels: initial.to_vec(),
            segments_fused: 0,
        }
    }

    pub fn slots(&self) -> usize {
        self.levels.first().map_or(0, Matrix::rows)
    }
}

/// Abstraction-function parameters for one level: one D x D transform per
/// interest capsule, shared across primary capsules.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingParams {
    pub transforms: Vec<Matrix>,
}

impl RoutingParams {
    pub fn init(slots: usize, d: usize, std: f64, rng: &mut StreamRng) -> Self {
        RoutingParams {
            transforms: (0..slots)
                .map(|_| Matrix::random_normal(d, d, std, rng))
                .collect(),
        }
    }
}

/// Memory update strategy; FIFO is kept for the ablation variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MemoryUpdateKind {
    Routing,
    Fifo,
}

/// Norm-bounding nonlinearity: direction preserved, norm mapped into [0, 1).
pub fn squash(s: &[f64]) -> Vec<f64> {
    let m = Matrix::from_vec(1, s.len(), s.to_vec()).unwrap();
    squash_rows_value(&m).into_vec()
}

/// Queue semantics over memory rows: the last `m` rows of
/// `[memory ; incoming]` survive, newest last.
pub fn fifo_update(memory: &Matrix, incoming: &Matrix) -> Matrix {
    let m = memory.rows();
    let all = memory
        .concat_rows(incoming)
        .expect("fifo width mismatch");
    all.slice_rows(all.rows() - m, all.rows())
}

/// Differentiable dynamic routing: `primary` is `[old memory ; incoming]`
/// rows, `transforms` one node per interest capsule. Returns the m x D
/// matrix of squashed interest capsules, differentiable through all
/// unrolled iterations.
pub fn dynamic_routing(
    tape: &mut Tape,
    primary: Node,
    transforms: &[Node],
    iters: usize,
) -> Result<Node> {
    assert!(iters >= 1, "routing needs at least one iteration");
    let n_primary = tape.value(primary).rows();
    let m = transforms.len();

    // Per-capsule projected primaries, fixed across iterations.
    let mut projected = Vec::with_capacity(m);
    for &w in transforms {
        let w_t = tape.transpose(w);
        projected.push(tape.matmul(primary, w_t)?);
    }

    let mut logits = tape.constant(Matrix::zeros(n_primary, m));
    let mut interest = None;
    for iter in 0..iters {
        let couplings = tape.softmax_rows(logits, None)?;
        let couplings_t = tape.transpose(couplings);
        let mut rows = Vec::with_capacity(m);
        for (j, &xhat) in projected.iter().enumerate() {
            let alpha_j = tape.slice_rows(couplings_t, j, j + 1);
            rows.push(tape.matmul(alpha_j, xhat)?);
        }
        let mut stacked = rows[0];
        for &r in &rows[1..] {
            stacked = tape.concat_rows(stacked, r)?;
        }
        let squashed = tape.squash_rows(stacked);
        interest = Some(squashed);

        if iter + 1 < iters {
            // Agreement update b_ij += x̄_j · Ŵ_j x_i, assembled row-per-capsule.
            let mut agree_rows = Vec::with_capacity(m);
            for (j, &xhat) in projected.iter().enumerate() {
                let xbar_j = tape.slice_rows(squashed, j, j + 1);
                let xhat_t = tape.transpose(xhat);
                agree_rows.push(tape.matmul(xbar_j, xhat_t)?);
            }
            let mut agree = agree_rows[0];
            for &r in &agree_rows[1..] {
                agree = tape.concat_rows(agree, r)?;
            }
            let agree_t = tape.transpose(agree);
            logits = tape.add(logits, agree_t)?;
        }
    }
    Ok(interest.expect("iters >= 1"))
}

/// Forward-only routing used for state replay and the FIFO-free inference
/// path. Also returns the coupling matrix of every iteration so invariants
/// can be inspected.
pub fn dynamic_routing_raw(
    primary: &Matrix,
    transforms: &[Matrix],
    iters: usize,
) -> (Matrix, Vec<Matrix>) {
    assert!(iters >= 1);
    let n_primary = primary.rows();
    let m = transforms.len();
    let projected: Vec<Matrix> = transforms
        .iter()
        .map(|w| primary.matmul(&w.transpose()).unwrap())
        .collect();

    let mut logits = Matrix::zeros(n_primary, m);
    let mut traces = Vec::with_capacity(iters);
    let mut interest = Matrix::zeros(m, primary.cols());
    for iter in 0..iters {
        let couplings = crate::tape::softmax_rows_value(&logits, None).unwrap();
        traces.push(couplings.clone());
        let mut stacked = Matrix::zeros(m, primary.cols());
        for j in 0..m {
            for i in 0..n_primary {
                let a = couplings.get(i, j);
                for c in 0..primary.cols() {
                    let v = stacked.get(j, c) + a * projected[j].get(i, c);
                    stacked.set(j, c, v);
                }
            }
        }
        interest = squash_rows_value(&stacked);

        if iter + 1 < iters {
            for j in 0..m {
                for i in 0..n_primary {
                    let agree: f64 = (0..primary.cols())
                        .map(|c| interest.get(j, c) * projected[j].get(i, c))
                        .sum();
                    logits.set(i, j, logits.get(i, j) + agree);
                }
            }
        }
    }
    (interest, traces)
}

/// Fuses the previous segment's hidden states into every memory level and
/// returns the refreshed, tape-detached state.
pub fn update_memory(
    state: &MemoryState,
    prev_hidden: &CachedState,
    params: &[RoutingParams],
    iters: usize,
    kind: MemoryUpdateKind,
) -> Result<MemoryState> {
    if prev_hidden.levels.len() < state.levels.len() {
        return Err(DmanError::Sequencing {
            expected: state.levels.len(),
            got: prev_hidden.levels.len(),
        });
    }
    let mut levels = Vec::with_capacity(state.levels.len());
    for (l, mem) in state.levels.iter().enumerate() {
        let incoming = &prev_hidden.levels[l];
        let next = match kind {
            MemoryUpdateKind::Fifo => fifo_update(mem, incoming),
            MemoryUpdateKind::Routing => {
                let primary = mem.concat_rows(incoming)?;
                dynamic_routing_raw(&primary, &params[l].transforms, iters).0
            }
        };
        levels.push(next);
    }
    Ok(MemoryState {
        levels,
        segments_fused: state.segments_fused + 1,
    })
}

/// Squared Frobenius distance between the frozen-attention readout over
/// `[old_memory ; prev_hidden]` and the readout over the freshly abstracted
/// memory. Only `new_memory` is a tape node, so gradient reaches the
/// routing transforms and nothing else.
pub fn reconstruction_loss(
    tape: &mut Tape,
    query: &Matrix,
    old_memory: &Matrix,
    prev_hidden: &Matrix,
    new_memory: Node,
    frozen_attention: &ProjectionTriple,
    scale: bool,
) -> Result<Node> {
    let mut scores = 0u64;
    let kv_full = old_memory.concat_rows(prev_hidden)?;
    let target = raw_attention(query, &kv_full, None, frozen_attention, scale, &mut scores)?;

    let frozen = frozen_attention.constants(tape);
    let q = tape.constant(query.clone());
    let readout = attention_core(tape, q, new_memory, None, &frozen, scale)?;
    let target_node = tape.constant(target);
    let diff = tape.sub(target_node, readout)?;
    Ok(tape.frob_sq(diff))
}
