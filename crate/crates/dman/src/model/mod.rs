//! Model assembly: configuration, the parameter set, per-user state, and
//! the training/inference entry points.

mod adam;
mod forward;
mod infer;
mod train;

pub use adam::Adam;
pub use forward::{
    forward_segment, gate_fuse, sampled_softmax_loss, segment_nll, GradSet, ParamNodes,
    SegmentForward,
};
pub use infer::{
    full_scan_embedding, infer_user, replay_user, score_count_dman, score_count_full_scan,
    RawForward,
};
pub use train::{train, train_step, StepStats, TrainLog, TrainLogLine};

use crate::attention::{AttentionLayerParams, CachedState, ProjectionTriple};
use crate::error::{DmanError, Result};
use crate::matrix::Matrix;
use crate::memory::{MemoryState, MemoryUpdateKind, RoutingParams};
use crate::rng::{streams, StreamRng};

/// Which model to run: the full model, one of the three ablations, or the
/// full-history attention baseline used for efficiency comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dman,
    /// No long-term attention network (and hence no memory).
    Xl,
    /// Memory kept, but updated by FIFO instead of dynamic routing.
    Fifo,
    /// Recurrent attention replaced by vanilla attention: empty context.
    Nran,
    /// One causal attention pass over the whole concatenated history.
    FullScan,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dman" => Ok(Variant::Dman),
            "xl" => Ok(Variant::Xl),
            "fifo" => Ok(Variant::Fifo),
            "nran" => Ok(Variant::Nran),
            "full_scan" => Ok(Variant::FullScan),
            other => Err(DmanError::InvalidArgument(format!(
                "unknown variant `{other}` (expected dman, xl, fifo, nran, full_scan)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Dman => "dman",
            Variant::Xl => "xl",
            Variant::Fifo => "fifo",
            Variant::Nran => "nran",
            Variant::FullScan => "full_scan",
        }
    }

    pub fn uses_memory(&self) -> bool {
        matches!(self, Variant::Dman | Variant::Fifo | Variant::Nran)
    }

    pub fn memory_update(&self) -> Option<MemoryUpdateKind> {
        match self {
            Variant::Dman | Variant::Nran => Some(MemoryUpdateKind::Routing),
            Variant::Fifo => Some(MemoryUpdateKind::Fifo),
            Variant::Xl | Variant::FullScan => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub window: usize,
    pub memory_slots: usize,
    pub layers: usize,
    pub neg_samples: usize,
    pub routing_iters: usize,
    pub attention_scale: bool,
    pub variant: Variant,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 128,
            window: 20,
            memory_slots: 8,
            layers: 2,
            neg_samples: 5,
            routing_iters: 3,
            attention_scale: true,
            variant: Variant::Dman,
            lr: 0.001,
            batch_size: 128,
            epochs: 8,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0
            || self.window < 2
            || self.memory_slots == 0
            || self.layers == 0
            || self.neg_samples == 0
            || self.routing_iters == 0
            || self.batch_size == 0
        {
            return Err(DmanError::InvalidArgument(
                "embed_dim, memory_slots, layers, neg_samples, routing_iters and batch_size \
                 must be positive; window_t at least 2"
                    .into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(DmanError::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Which optimization phase owns a tensor. The two phases update disjoint
/// parameter sets: routing transforms train only against the reconstruction
/// loss, everything else only against the likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Main,
    Routing,
}

/// All trainable tensors. Embedding row 0 is the padding row and stays zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub embedding: Matrix,
    pub positional: Matrix,
    pub layers: Vec<AttentionLayerParams>,
    pub w_short: Matrix,
    pub w_long: Matrix,
    pub routing: Vec<RoutingParams>,
    pub init_memory: Vec<Matrix>,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, vocab_size: usize) -> Self {
        let d = cfg.embed_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut stream = 0u64;
        let mut next = |rows: usize, cols: usize, std: f64| {
            let mut rng = StreamRng::new(cfg.seed, streams::param(stream));
            stream += 1;
            Matrix::random_normal(rows, cols, std, &mut rng)
        };

        let mut embedding = next(vocab_size, d, std);
        for c in 0..d {
            embedding.set(0, c, 0.0);
        }
        let positional = next(cfg.window, d, std);
        let layers = (0..cfg.layers)
            .map(|_| AttentionLayerParams {
                recurrent: ProjectionTriple {
                    w_q: next(d, d, std),
                    w_k: next(d, d, std),
                    w_v: next(d, d, std),
                },
                long_term: ProjectionTriple {
                    w_q: next(d, d, std),
                    w_k: next(d, d, std),
                    w_v: next(d, d, std),
                },
            })
            .collect();
        let w_short = next(d, d, std);
        let w_long = next(d, d, std);
        let routing = (0..cfg.layers)
            .map(|_| RoutingParams {
                transforms: (0..cfg.memory_slots).map(|_| next(d, d, std)).collect(),
            })
            .collect();
        let init_memory = (0..cfg.layers)
            .map(|_| next(cfg.memory_slots, d, std))
            .collect();

        ModelParams {
            embedding,
            positional,
            layers,
            w_short,
            w_long,
            routing,
            init_memory,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.cols()
    }

    /// Named references to every tensor except the embedding table, in a
    /// fixed order shared by the optimizer, checkpoints, and grad checks.
    pub fn dense_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("positional".into(), &self.positional)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}/rec/wq"), &layer.recurrent.w_q));
            out.push((format!("layer{l}/rec/wk"), &layer.recurrent.w_k));
            out.push((format!("layer{l}/rec/wv"), &layer.recurrent.w_v));
            out.push((format!("layer{l}/long/wq"), &layer.long_term.w_q));
            out.push((format!("layer{l}/long/wk"), &layer.long_term.w_k));
            out.push((format!("layer{l}/long/wv"), &layer.long_term.w_v));
        }
        out.push(("gate/short".into(), &self.w_short));
        out.push(("gate/long".into(), &self.w_long));
        for (l, rp) in self.routing.iter().enumerate() {
            for (j, w) in rp.transforms.iter().enumerate() {
                out.push((format!("routing{l}/w{j}"), w));
            }
        }
        for (l, m) in self.init_memory.iter().enumerate() {
            out.push((format!("init_memory{l}"), m));
        }
        out
    }

    pub fn dense_tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> =
            vec![("positional".into(), &mut self.positional)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}/rec/wq"), &mut layer.recurrent.w_q));
            out.push((format!("layer{l}/rec/wk"), &mut layer.recurrent.w_k));
            out.push((format!("layer{l}/rec/wv"), &mut layer.recurrent.w_v));
            out.push((format!("layer{l}/long/wq"), &mut layer.long_term.w_q));
            out.push((format!("layer{l}/long/wk"), &mut layer.long_term.w_k));
            out.push((format!("layer{l}/long/wv"), &mut layer.long_term.w_v));
        }
        out.push(("gate/short".into(), &mut self.w_short));
        out.push(("gate/long".into(), &mut self.w_long));
        for (l, rp) in self.routing.iter_mut().enumerate() {
            for (j, w) in rp.transforms.iter_mut().enumerate() {
                out.push((format!("routing{l}/w{j}"), w));
            }
        }
        for (l, m) in self.init_memory.iter_mut().enumerate() {
            out.push((format!("init_memory{l}"), m));
        }
        out
    }

    pub fn phase_of(name: &str) -> Phase {
        if name.starts_with("routing") {
            Phase::Routing
        } else {
            Phase::Main
        }
    }
}

/// Per-user mutable state: memory levels, cached previous-segment hiddens,
/// and the index of the next segment to process.
#[derive(Debug, Clone)]
pub struct UserState {
    pub memory: MemoryState,
    pub cache: Option<CachedState>,
    pub next_segment: usize,
}

impl UserState {
    pub fn fresh(params: &ModelParams) -> Self {
        UserState {
            memory: MemoryState::from_initial(&params.init_memory),
            cache: None,
            next_segment: 0,
        }
    }
}
