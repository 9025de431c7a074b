//! Behavior-log ingestion, fixed-window segmentation with leave-last-out
//! splitting, uniform negative sampling, and a synthetic generator that
//! plants a verifiable long-range dependency.
//!
//! The synthetic task: every user gets a private anchor item that occurs a
//! few times in their first segment and once in each middle segment, but
//! never in the last two segments. With probability `period_strength` the
//! held-out test item is that anchor again (periodic re-consumption), so
//! predicting it requires reaching past the recurrent context window; the
//! remaining traffic follows an item-successor Markov chain that is
//! predictable from recent items alone.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::error::{DmanError, Result};
use crate::rng::{streams, StreamRng};

/// Item id 0 is reserved for padding everywhere.
pub const PADDING_ITEM: u32 = 0;

/// "More than ten items" operationalized as a hard floor of 11.
pub const MIN_INTERACTIONS: usize = 11;

/// Probability that the synthetic Markov walk follows its successor edge.
const WALK_FOLLOW_PROB: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BehaviorLog {
    pub records: Vec<Interaction>,
}

impl BehaviorLog {
    pub fn max_item(&self) -> u32 {
        self.records.iter().map(|r| r.item).max().unwrap_or(0)
    }

    /// Distinct user ids in ascending order.
    pub fn user_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.user).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            writeln!(w, "{}\t{}\t{}", r.user, r.item, r.timestamp)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses a tab-separated `user\titem\ttimestamp` file and drops users with
/// fewer than [`MIN_INTERACTIONS`] records. Input order is preserved.
pub fn ingest(path: &Path) -> Result<BehaviorLog> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let parse_field = |s: Option<&str>, what: &str| -> Result<i64> {
            let s = s.ok_or_else(|| DmanError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("missing {what} column"),
            })?;
            s.trim().parse::<i64>().map_err(|_| DmanError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("non-integer {what} field `{s}`"),
            })
        };
        let user = parse_field(fields.next(), "user")?;
        let item = parse_field(fields.next(), "item")?;
        let ts = parse_field(fields.next(), "timestamp")?;
        if user < 0 || item < 1 || user > u32::MAX as i64 || item > u32::MAX as i64 {
            return Err(DmanError::Parse {
                path: path.display().to_string(),
                line: idx + 1,
                msg: format!("ids out of range: user {user}, item {item}"),
            });
        }
        records.push(Interaction {
            user: user as u32,
            item: item as u32,
            timestamp: ts,
        });
    }

    let mut counts = std::collections::HashMap::new();
    for r in &records {
        *counts.entry(r.user).or_insert(0usize) += 1;
    }
    records.retain(|r| counts[&r.user] >= MIN_INTERACTIONS);
    Ok(BehaviorLog { records })
}

/// A user's chronological items split into fixed-length segments, oldest
/// first, left-padded in the oldest segment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentedHistory {
    pub user: u32,
    pub segments: Vec<Vec<u32>>,
    pub pad_count: usize,
    pub val_item: Option<u32>,
    pub test_item: Option<u32>,
}

impl SegmentedHistory {
    pub fn n_segments(&self) -> usize {
        self.segments.len()
    }

    /// Training items in order, padding stripped.
    pub fn train_items(&self) -> Vec<u32> {
        self.segments
            .iter()
            .flatten()
            .copied()
            .filter(|&i| i != PADDING_ITEM)
            .collect()
    }

    /// Every item the user interacted with (train + held out), for
    /// candidate exclusion at evaluation time.
    pub fn interacted(&self) -> HashSet<u32> {
        let mut s: HashSet<u32> = self.train_items().into_iter().collect();
        if let Some(v) = self.val_item {
            s.insert(v);
        }
        s
    }
}

/// Splits each user's chronologically sorted items into length-`t` segments.
/// With `split`, the last item goes to test and the second-last to
/// validation. Users left without training items are dropped.
pub fn segment(log: &BehaviorLog, t: usize, split: bool) -> Result<Vec<SegmentedHistory>> {
    if t < 2 {
        return Err(DmanError::InvalidArgument(format!(
            "window length must be at least 2, got {t}"
        )));
    }
    let mut out = Vec::new();
    for user in log.user_ids() {
        let mut items: Vec<(i64, usize, u32)> = log
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.user == user)
            .map(|(i, r)| (r.timestamp, i, r.item))
            .collect();
        // stable order: timestamp, then input position
        items.sort_by_key(|&(ts, pos, _)| (ts, pos));
        let ordered: Vec<u32> = items.into_iter().map(|(_, _, item)| item).collect();

        let (train, val_item, test_item) = if split {
            if ordered.len() < 3 {
                continue;
            }
            let test = ordered[ordered.len() - 1];
            let val = ordered[ordered.len() - 2];
            (&ordered[..ordered.len() - 2], Some(val), Some(test))
        } else {
            (&ordered[..], None, None)
        };
        if train.is_empty() {
            continue;
        }

        let n = train.len().div_ceil(t);
        let pad_count = n * t - train.len();
        let mut padded = vec![PADDING_ITEM; pad_count];
        padded.extend_from_slice(train);
        let segments: Vec<Vec<u32>> = padded.chunks(t).map(<[u32]>::to_vec).collect();
        debug_assert_eq!(segments.len(), n);

        out.push(SegmentedHistory {
            user,
            segments,
            pad_count,
            val_item,
            test_item,
        });
    }
    Ok(out)
}

/// Deterministic successor edge of the synthetic Markov pattern.
pub fn markov_successor(item: u32, vocab: u32) -> u32 {
    let shift = (vocab / 3).max(1);
    1 + (item - 1 + shift) % vocab
}

/// The anchor item planted for a user, and (identically) the long-range
/// test item it maps to.
pub fn anchor_item(user: u32, vocab: u32) -> u32 {
    1 + user % vocab
}

pub fn generate_synthetic(
    users: usize,
    n_segments: usize,
    t: usize,
    vocab: u32,
    period_strength: f64,
    seed: u64,
) -> Result<BehaviorLog> {
    if !(0.0..=1.0).contains(&period_strength) {
        return Err(DmanError::InvalidArgument(format!(
            "period-strength must lie in [0, 1], got {period_strength}"
        )));
    }
    if users == 0 || n_segments == 0 || t < 2 {
        return Err(DmanError::InvalidArgument(
            "users and segments must be positive and the window at least 2".into(),
        ));
    }
    if (vocab as usize) <= n_segments * t {
        return Err(DmanError::InvalidArgument(format!(
            "vocab {vocab} must exceed total history length {}",
            n_segments * t
        )));
    }

    let mut records = Vec::with_capacity(users * (n_segments * t + 2));
    for u in 0..users as u32 {
        let mut rng = StreamRng::new(seed, streams::synthetic_user(u as u64));
        let anchor = anchor_item(u, vocab);

        // Markov walk over the full training span.
        let mut items = Vec::with_capacity(n_segments * t + 2);
        let mut current = 1 + rng.below(vocab as usize) as u32;
        items.push(current);
        while items.len() < n_segments * t {
            current = if rng.chance(WALK_FOLLOW_PROB) {
                markov_successor(current, vocab)
            } else {
                1 + rng.below(vocab as usize) as u32
            };
            items.push(current);
        }

        // The last two segments must stay anchor-free so the recurrent
        // window cannot see it at test time; a walk that lands on the
        // anchor there skips one step along the successor edge (which has
        // no fixed points).
        if n_segments >= 3 {
            let protected_start = (n_segments - 2) * t;
            for pos in protected_start..items.len() {
                if items[pos] == anchor {
                    items[pos] = markov_successor(items[pos], vocab);
                }
            }
        }

        // Plant the anchor: a few times in segment 1, once per middle
        // segment.
        let plant = |items: &mut Vec<u32>, pos: usize| items[pos] = anchor;
        let first_copies = 3.min(t - 1).max(1);
        let mut chosen = HashSet::new();
        while chosen.len() < first_copies {
            let pos = if t > 1 { 1 + rng.below(t - 1) } else { 0 };
            chosen.insert(pos);
        }
        for pos in chosen {
            plant(&mut items, pos);
        }
        if n_segments >= 5 {
            for seg in 2..=(n_segments - 3) {
                let pos = seg * t + 1 + rng.below(t - 1);
                plant(&mut items, pos);
            }
        }

        // Validation item continues the walk; the test item is the anchor
        // with probability `period_strength`, otherwise one more walk step.
        let mut val = if rng.chance(WALK_FOLLOW_PROB) {
            markov_successor(*items.last().unwrap(), vocab)
        } else {
            1 + rng.below(vocab as usize) as u32
        };
        if val == anchor {
            val = markov_successor(val, vocab);
        }
        items.push(val);
        let test = if rng.chance(period_strength) {
            anchor
        } else if rng.chance(WALK_FOLLOW_PROB) {
            markov_successor(val, vocab)
        } else {
            1 + rng.below(vocab as usize) as u32
        };
        items.push(test);

        for (pos, item) in items.into_iter().enumerate() {
            records.push(Interaction {
                user: u,
                item,
                timestamp: pos as i64,
            });
        }
    }
    Ok(BehaviorLog { records })
}

/// Draws `k` distinct items uniformly from `1..=vocab` minus `exclude`.
pub fn sample_negatives(
    rng: &mut StreamRng,
    vocab: u32,
    exclude: &HashSet<u32>,
    k: usize,
) -> Result<Vec<u32>> {
    let excluded_in_range = exclude.iter().filter(|&&i| i >= 1 && i <= vocab).count();
    let available = vocab as usize - excluded_in_range;
    if available < k {
        return Err(DmanError::ExhaustedVocab {
            requested: k,
            available,
        });
    }
    if k * 2 >= available {
        // dense regime: enumerate what is left and take a random prefix
        let mut remaining: Vec<u32> = (1..=vocab).filter(|i| !exclude.contains(i)).collect();
        for i in 0..k {
            let j = i + rng.below(remaining.len() - i);
            remaining.swap(i, j);
        }
        remaining.truncate(k);
        return Ok(remaining);
    }
    let mut drawn = HashSet::with_capacity(k);
    let mut out = Vec::with_capacity(k);
    while out.len() < k {
        let candidate = 1 + rng.below(vocab as usize) as u32;
        if !exclude.contains(&candidate) && drawn.insert(candidate) {
            out.push(candidate);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn log_from(triples: &[(u32, u32, i64)]) -> BehaviorLog {
        BehaviorLog {
            records: triples
                .iter()
                .map(|&(user, item, timestamp)| Interaction {
                    user,
                    item,
                    timestamp,
                })
                .collect(),
        }
    }

    #[test]
    fn ingest_parses_well_formed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        let mut body = String::new();
        for i in 0..12 {
            body.push_str(&format!("1\t{}\t{}\n", i + 1, i));
        }
        std::fs::write(&path, body).unwrap();
        let log = ingest(&path).unwrap();
        assert_eq!(log.records.len(), 12);
        assert_eq!(log.records[3].item, 4);
    }

    #[test]
    fn ingest_drops_users_below_min_interactions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        let mut body = String::new();
        for i in 0..5 {
            body.push_str(&format!("7\t{}\t{}\n", i + 1, i));
        }
        for i in 0..11 {
            body.push_str(&format!("8\t{}\t{}\n", i + 1, i));
        }
        std::fs::write(&path, body).unwrap();
        let log = ingest(&path).unwrap();
        assert!(log.records.iter().all(|r| r.user == 8));
        assert_eq!(log.records.len(), 11);
    }

    #[test]
    fn ingest_reports_malformed_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.tsv");
        std::fs::write(&path, "1\t2\t3\n1\tx\t4\n").unwrap();
        let err = ingest(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains(":2:") && msg.contains("item"), "{msg}");
    }

    #[test]
    fn duplicate_timestamps_keep_input_order() {
        let log = log_from(&[(1, 10, 5), (1, 11, 5), (1, 12, 5), (1, 13, 4)]);
        let seg = segment(&log, 2, false).unwrap();
        assert_eq!(seg[0].train_items(), vec![13, 10, 11, 12]);
    }

    #[test]
    fn segment_counts_and_padding() {
        // 45 training items, T=20: 3 segments, 15 pads at the head.
        let triples: Vec<(u32, u32, i64)> = (0..45).map(|i| (1, i + 1, i as i64)).collect();
        let seg = segment(&log_from(&triples), 20, false).unwrap();
        assert_eq!(seg[0].n_segments(), 3);
        assert_eq!(seg[0].pad_count, 15);
        assert_eq!(&seg[0].segments[0][..15], &[0u32; 15]);
        assert_eq!(seg[0].segments[0][15], 1);
        assert_eq!(seg[0].segments[2][19], 45);
    }

    #[test]
    fn segment_exact_multiple_has_no_padding() {
        let triples: Vec<(u32, u32, i64)> = (0..40).map(|i| (1, i + 1, i as i64)).collect();
        let seg = segment(&log_from(&triples), 20, false).unwrap();
        assert_eq!(seg[0].n_segments(), 2);
        assert_eq!(seg[0].pad_count, 0);
    }

    #[test]
    fn segment_split_holds_out_last_two() {
        let triples: Vec<(u32, u32, i64)> = (0..12).map(|i| (1, i + 1, i as i64)).collect();
        let seg = segment(&log_from(&triples), 5, true).unwrap();
        let h = &seg[0];
        assert_eq!(h.train_items().len(), 10);
        assert_eq!(h.val_item, Some(11));
        assert_eq!(h.test_item, Some(12));
        assert_eq!(h.n_segments(), 2);
    }

    #[test]
    fn segment_is_lossless_modulo_padding_and_holdout() {
        let log = generate_synthetic(20, 3, 7, 200, 0.5, 13).unwrap();
        let segs = segment(&log, 7, true).unwrap();
        for h in &segs {
            let mut rebuilt = h.train_items();
            rebuilt.push(h.val_item.unwrap());
            rebuilt.push(h.test_item.unwrap());
            let original: Vec<u32> = log
                .records
                .iter()
                .filter(|r| r.user == h.user)
                .map(|r| r.item)
                .collect();
            assert_eq!(rebuilt, original);
        }
    }

    #[test]
    fn synthetic_is_deterministic_per_seed() {
        let a = generate_synthetic(30, 4, 6, 300, 0.7, 99).unwrap();
        let b = generate_synthetic(30, 4, 6, 300, 0.7, 99).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(30, 4, 6, 300, 0.7, 100).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_agreement_tracks_period_strength() {
        for &ps in &[0.0, 0.5, 1.0] {
            let users = 10_000;
            let log = generate_synthetic(users, 3, 5, 200, ps, 7).unwrap();
            let segs = segment(&log, 5, true).unwrap();
            let hits = segs
                .iter()
                .filter(|h| h.test_item == Some(anchor_item(h.user, 200)))
                .count();
            let frac = hits as f64 / users as f64;
            assert!(
                (frac - ps).abs() <= 0.02,
                "period-strength {ps}: agreement {frac}"
            );
        }
    }

    #[test]
    fn synthetic_anchor_never_in_last_two_segments() {
        let vocab = 500;
        let log = generate_synthetic(50, 6, 8, vocab, 1.0, 21).unwrap();
        let segs = segment(&log, 8, true).unwrap();
        for h in &segs {
            let anchor = anchor_item(h.user, vocab);
            let n = h.n_segments();
            for seg in &h.segments[n - 2..] {
                assert!(
                    !seg.contains(&anchor),
                    "anchor leaked into the recurrent window for user {}",
                    h.user
                );
            }
            // and it does occur early
            assert!(h.segments[0].contains(&anchor));
        }
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(generate_synthetic(10, 3, 5, 200, 1.5, 7).is_err());
        assert!(generate_synthetic(10, 3, 5, 10, 0.5, 7).is_err());
        assert!(generate_synthetic(0, 3, 5, 200, 0.5, 7).is_err());
    }

    #[test]
    fn round_trip_write_ingest() {
        let log = generate_synthetic(15, 3, 5, 100, 0.4, 55).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("roundtrip.tsv");
        log.write_tsv(&path).unwrap();
        let back = ingest(&path).unwrap();
        assert_eq!(log, back);
    }

    #[test]
    fn negatives_forced_set() {
        let mut rng = StreamRng::new(1, 0);
        let exclude: HashSet<u32> = [1, 2, 3, 4, 5].into_iter().collect();
        let mut got = sample_negatives(&mut rng, 10, &exclude, 5).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![6, 7, 8, 9, 10]);
    }

    #[test]
    fn negatives_exclude_target_and_padding() {
        let mut rng = StreamRng::new(2, 0);
        let exclude: HashSet<u32> = [42].into_iter().collect();
        for _ in 0..200 {
            let got = sample_negatives(&mut rng, 50, &exclude, 5).unwrap();
            assert_eq!(got.len(), 5);
            let distinct: HashSet<u32> = got.iter().copied().collect();
            assert_eq!(distinct.len(), 5);
            assert!(!got.contains(&42));
            assert!(!got.contains(&PADDING_ITEM));
            assert!(got.iter().all(|&i| (1..=50).contains(&i)));
        }
    }

    #[test]
    fn negatives_exhausted_vocabulary_is_error() {
        let mut rng = StreamRng::new(3, 0);
        let exclude: HashSet<u32> = (1..=8).collect();
        assert!(matches!(
            sample_negatives(&mut rng, 10, &exclude, 3),
            Err(DmanError::ExhaustedVocab { .. })
        ));
    }

    #[test]
    fn negatives_uniformity_not_rejected_by_chi_square() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let vocab = 100u32;
        let draws = 100_000;
        let mut rng = StreamRng::new(4, 0);
        let exclude = HashSet::new();
        let mut counts = vec![0u64; vocab as usize];
        let mut made = 0;
        while made < draws {
            let batch = sample_negatives(&mut rng, vocab, &exclude, 5).unwrap();
            for item in batch {
                counts[(item - 1) as usize] += 1;
                made += 1;
            }
        }
        let expected = made as f64 / vocab as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        let crit = ChiSquared::new((vocab - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(chi2 < crit, "chi2 {chi2} >= critical {crit}");
    }
}
