//! Inference-efficiency benchmark: wall time to profile a fixed user batch
//! in the forward pass, compared between the memory-bounded model and the
//! full-history scan, at several history lengths.
//!
//! State replay and data synthesis stay outside the timed region; timing is
//! single-threaded to keep measurements stable. Every report carries both
//! the measured per-user attention-score count and the analytic one.

use std::time::Instant;

use crate::data::{generate_synthetic, segment, SegmentedHistory};
use crate::error::{DmanError, Result};
use crate::model::{
    full_scan_embedding, infer_user, replay_user, score_count_dman, score_count_full_scan,
    ModelConfig, ModelParams, UserState, Variant,
};

pub const BENCH_WARMUPS: usize = 1;
pub const BENCH_REPETITIONS: usize = 5;

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub variant: Variant,
    pub history_segments: usize,
    pub users: usize,
    /// Median over [`BENCH_REPETITIONS`] timed passes, normalized to 1024
    /// users.
    pub seconds_per_1024_users: f64,
    /// Attention scores computed per user, measured by instrumentation.
    pub scores_per_user: u64,
    /// The closed-form count the measurement must equal.
    pub analytic_scores_per_user: u64,
}

impl BenchReport {
    pub fn to_kv(&self) -> String {
        format!(
            "variant={} n_segments={} users={} seconds_per_1024_users={:.6} \
             scores_per_user={} analytic_scores_per_user={}\n",
            self.variant.as_str(),
            self.history_segments,
            self.users,
            self.seconds_per_1024_users,
            self.scores_per_user,
            self.analytic_scores_per_user,
        )
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Times one full pass over all users, returning (seconds, scores of the
/// first user).
fn timed_pass(
    params: &ModelParams,
    cfg: &ModelConfig,
    histories: &[SegmentedHistory],
    states: &[Option<UserState>],
) -> Result<(f64, u64)> {
    let mut first_user_scores = 0u64;
    let start = Instant::now();
    for (i, h) in histories.iter().enumerate() {
        let mut scores = 0u64;
        match cfg.variant {
            Variant::FullScan => {
                let items = h.train_items();
                full_scan_embedding(params, &items, cfg, &mut scores)?;
            }
            _ => {
                let state = states[i].as_ref().expect("state prepared");
                infer_user(params, state, h, cfg, &mut scores)?;
            }
        }
        if i == 0 {
            first_user_scores = scores;
        } else if scores != first_user_scores {
            return Err(DmanError::InvalidArgument(format!(
                "score count varies across users: {first_user_scores} vs {scores}"
            )));
        }
    }
    Ok((start.elapsed().as_secs_f64(), first_user_scores))
}

/// Runs every (variant, history length) cell and returns one report per
/// cell. Histories are synthesized fresh per length with the benchmark
/// seed; `users` histories each of `n` segments.
pub fn efficiency_bench(
    params: &ModelParams,
    variants: &[Variant],
    n_list: &[usize],
    users: usize,
    cfg: &ModelConfig,
) -> Result<Vec<BenchReport>> {
    let vocab = params.vocab_size() as u32 - 1;
    let mut reports = Vec::new();
    for &n in n_list {
        if (vocab as usize) <= n * cfg.window {
            return Err(DmanError::InvalidArgument(format!(
                "vocab {vocab} too small for {n} segments of {}",
                cfg.window
            )));
        }
        // the held-out split consumes two interactions, leaving exactly
        // n full training segments per user
        let log = generate_synthetic(users, n, cfg.window, vocab, 0.5, cfg.seed)?;
        let histories: Vec<SegmentedHistory> = segment(&log, cfg.window, true)?;
        debug_assert!(histories.iter().all(|h| h.n_segments() == n));

        for &variant in variants {
            let vcfg = ModelConfig {
                variant,
                ..cfg.clone()
            };
            let states: Vec<Option<UserState>> = if variant == Variant::FullScan {
                histories.iter().map(|_| None).collect()
            } else {
                histories
                    .iter()
                    .map(|h| replay_user(params, h, &vcfg).map(Some))
                    .collect::<Result<Vec<_>>>()?
            };

            for _ in 0..BENCH_WARMUPS {
                timed_pass(params, &vcfg, &histories, &states)?;
            }
            let mut times = Vec::with_capacity(BENCH_REPETITIONS);
            let mut scores = 0;
            for _ in 0..BENCH_REPETITIONS {
                let (secs, s) = timed_pass(params, &vcfg, &histories, &states)?;
                times.push(secs);
                scores = s;
            }

            let analytic = match variant {
                Variant::FullScan => score_count_full_scan(&vcfg, n * cfg.window),
                _ => score_count_dman(&vcfg),
            };
            reports.push(BenchReport {
                variant,
                history_segments: n,
                users,
                seconds_per_1024_users: median(times.clone()) * 1024.0 / users as f64,
                scores_per_user: scores,
                analytic_scores_per_user: analytic,
            });
        }
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_counts_match_formulas_and_scaling_laws() {
        let cfg = ModelConfig {
            embed_dim: 8,
            window: 4,
            memory_slots: 2,
            layers: 2,
            seed: 77,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&cfg, 200);
        let reports = efficiency_bench(
            &params,
            &[Variant::Dman, Variant::FullScan],
            &[2, 8],
            6,
            &cfg,
        )
        .unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert_eq!(r.scores_per_user, r.analytic_scores_per_user, "{r:?}");
            assert!(r.seconds_per_1024_users > 0.0);
        }
        let count = |v: Variant, n: usize| {
            reports
                .iter()
                .find(|r| r.variant == v && r.history_segments == n)
                .unwrap()
                .scores_per_user
        };
        // memory-bounded profiling does not grow with history length
        assert_eq!(count(Variant::Dman, 2), count(Variant::Dman, 8));
        assert_eq!(count(Variant::Dman, 2), 2 * 4 * (2 * 4 + 2));
        // full scan grows quadratically: (8/2)^2 = 16x
        assert_eq!(count(Variant::FullScan, 8), 16 * count(Variant::FullScan, 2));
    }
}
