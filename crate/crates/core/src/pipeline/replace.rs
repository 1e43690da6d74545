use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::tokenizer::TokenId;
use crate::vocab::{task_vocab, Vocabulary};

/// Smallest pretraining index eligible under [`Strategy::Top`].
pub const TOP_MIN_INDEX: usize = 5000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// The least frequent tokens of the task vocabulary.
    #[default]
    Last,
    Random,
    /// The most frequent task tokens whose pretraining index is at least
    /// `top_min_index`.
    Top,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementConfig {
    /// Percentage of the full vocabulary, 0 to 100.
    pub alpha: f64,
    pub strategy: Strategy,
    /// Tokens that must never be replaced (e.g. no definition available).
    pub exclusions: BTreeSet<TokenId>,
    pub seed: u64,
    pub top_min_index: usize,
    /// Keep walking the candidate order to refill slots lost to skips.
    pub backfill: bool,
    /// Remove exclusions from the task vocabulary before computing the count.
    pub count_after_exclusions: bool,
}

impl Default for ReplacementConfig {
    fn default() -> Self {
        ReplacementConfig {
            alpha: 0.0,
            strategy: Strategy::Last,
            exclusions: BTreeSet::new(),
            seed: 0,
            top_min_index: TOP_MIN_INDEX,
            backfill: false,
            count_after_exclusions: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    Excluded,
    AlreadyReplaced,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementPlan {
    pub target_count: usize,
    /// In application order.
    pub selected: Vec<TokenId>,
    pub skipped: Vec<(TokenId, SkipReason)>,
}

/// Ids replaced so far in a session; they are never replaced again.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplacementLock {
    pub replaced: BTreeSet<TokenId>,
}

impl ReplacementLock {
    pub fn contains(&self, id: TokenId) -> bool {
        self.replaced.contains(&id)
    }
}

/// `target_count = min(⌊alpha/100 · |V|⌋, |V_task|)`, then a window of
/// candidates per strategy, then exclusions and locked ids moved to
/// `skipped`.
pub fn build_replacement_plan(
    vocab: &Vocabulary,
    task_counts: &[u64],
    cfg: &ReplacementConfig,
    lock: &ReplacementLock,
) -> Result<ReplacementPlan> {
    if !(0.0..=100.0).contains(&cfg.alpha) || cfg.alpha.is_nan() {
        return Err(Error::InvalidArgument(format!("alpha {} outside [0, 100]", cfg.alpha)));
    }
    let mut task = task_vocab(vocab, task_counts)?;
    if cfg.count_after_exclusions {
        task.retain(|id| !cfg.exclusions.contains(id));
    }
    let by_alpha = (cfg.alpha / 100.0 * vocab.len() as f64).floor() as usize;
    let target_count = by_alpha.min(task.len());
    let order: Vec<TokenId> = match cfg.strategy {
        Strategy::Last => task.iter().rev().copied().collect(),
        Strategy::Random => {
            let mut t = task.clone();
            t.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
            t
        }
        Strategy::Top => task
            .iter()
            .copied()
            .filter(|&id| vocab.rank_of(id) >= cfg.top_min_index)
            .collect(),
    };
    let mut selected = Vec::new();
    let mut skipped = Vec::new();
    let mut seen = 0;
    for &id in &order {
        let window_full = if cfg.backfill {
            selected.len() >= target_count
        } else {
            seen >= target_count
        };
        if window_full {
            break;
        }
        seen += 1;
        if cfg.exclusions.contains(&id) {
            skipped.push((id, SkipReason::Excluded));
        } else if lock.contains(id) {
            skipped.push((id, SkipReason::AlreadyReplaced));
        } else {
            selected.push(id);
        }
    }
    if cfg.strategy == Strategy::Last {
        // application order follows the task vocabulary
        selected.reverse();
        skipped.reverse();
    }
    Ok(ReplacementPlan {
        target_count,
        selected,
        skipped,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApplyReport {
    pub matrix: EmbeddingMatrix,
    pub replaced: Vec<TokenId>,
    /// Selected ids already replaced earlier in the session.
    pub locked: Vec<TokenId>,
}

/// Overwrites the selected rows with their definition embeddings. Ids
/// already in `lock` are left alone; newly replaced ids join it.
pub fn apply_plan(
    e: &EmbeddingMatrix,
    plan: &ReplacementPlan,
    reconstructions: &BTreeMap<TokenId, Vec<f64>>,
    lock: &mut ReplacementLock,
) -> Result<ApplyReport> {
    let missing: Vec<TokenId> = plan
        .selected
        .iter()
        .copied()
        .filter(|id| !lock.contains(*id) && !reconstructions.contains_key(id))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingReconstructions(missing));
    }
    let mut matrix = e.clone();
    let mut replaced = Vec::new();
    let mut locked = Vec::new();
    for &id in &plan.selected {
        if lock.contains(id) {
            locked.push(id);
            continue;
        }
        let i = id as usize;
        if i >= matrix.rows() {
            return Err(Error::TokenOutOfRange {
                id,
                position: replaced.len(),
                vocab_size: matrix.rows(),
            });
        }
        let v = &reconstructions[&id];
        if v.len() != matrix.dim() {
            return Err(Error::shape(matrix.dim(), v.len()));
        }
        matrix.row_mut(i).copy_from_slice(v);
        lock.replaced.insert(id);
        replaced.push(id);
    }
    Ok(ApplyReport {
        matrix,
        replaced,
        locked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{rank_by_frequency, CountRecord};

    fn vocab(n: usize) -> Vocabulary {
        let recs: Vec<CountRecord> = (0..n)
            .map(|i| CountRecord {
                id: i as TokenId,
                token: format!("t{i}"),
                count: (n - i) as u64,
            })
            .collect();
        rank_by_frequency(&recs).unwrap()
    }

    #[test]
    fn worked_count_example() {
        let v = vocab(50_265);
        let mut counts = vec![0u64; 50_265];
        counts.iter_mut().take(10_000).for_each(|c| *c = 1);
        let cfg = ReplacementConfig {
            alpha: 5.0,
            ..Default::default()
        };
        let plan = build_replacement_plan(&v, &counts, &cfg, &ReplacementLock::default()).unwrap();
        assert_eq!(plan.target_count, 2513);
        assert_eq!(plan.selected.len(), 2513);
        assert_eq!(plan.selected[0], 10_000 - 2513);
        assert_eq!(*plan.selected.last().unwrap(), 9_999);
    }

    #[test]
    fn empty_task_gives_empty_plan() {
        let v = vocab(10);
        let cfg = ReplacementConfig {
            alpha: 100.0,
            ..Default::default()
        };
        let plan = build_replacement_plan(&v, &[0; 10], &cfg, &ReplacementLock::default()).unwrap();
        assert_eq!(plan.target_count, 0);
        assert!(plan.selected.is_empty());
    }

    #[test]
    fn exclusions_drop_from_window_unless_backfilled() {
        let v = vocab(20);
        let counts = vec![1u64; 20];
        let mut cfg = ReplacementConfig {
            alpha: 25.0,
            exclusions: [18, 3].into_iter().collect(),
            ..Default::default()
        };
        let lock = ReplacementLock::default();
        let plan = build_replacement_plan(&v, &counts, &cfg, &lock).unwrap();
        assert_eq!(plan.target_count, 5);
        assert_eq!(plan.selected, vec![15, 16, 17, 19]);
        assert_eq!(plan.skipped, vec![(18, SkipReason::Excluded)]);
        cfg.backfill = true;
        let plan = build_replacement_plan(&v, &counts, &cfg, &lock).unwrap();
        assert_eq!(plan.selected, vec![14, 15, 16, 17, 19]);
    }

    #[test]
    fn top_strategy_respects_min_index() {
        let v = vocab(30);
        let counts = vec![1u64; 30];
        let cfg = ReplacementConfig {
            alpha: 10.0,
            strategy: Strategy::Top,
            top_min_index: 20,
            ..Default::default()
        };
        let plan = build_replacement_plan(&v, &counts, &cfg, &ReplacementLock::default()).unwrap();
        assert_eq!(plan.selected, vec![20, 21, 22]);
    }

    #[test]
    fn random_strategy_is_seeded() {
        let v = vocab(100);
        let counts = vec![1u64; 100];
        let cfg = ReplacementConfig {
            alpha: 10.0,
            strategy: Strategy::Random,
            seed: 9,
            ..Default::default()
        };
        let lock = ReplacementLock::default();
        let a = build_replacement_plan(&v, &counts, &cfg, &lock).unwrap();
        let b = build_replacement_plan(&v, &counts, &cfg, &lock).unwrap();
        assert_eq!(a, b);
        let uniq: BTreeSet<_> = a.selected.iter().collect();
        assert_eq!(uniq.len(), 10);
    }

    #[test]
    fn apply_touches_selected_rows_once() {
        let e = EmbeddingMatrix::new(6, 2, (0..12).map(|v| v as f64).collect()).unwrap();
        let plan = ReplacementPlan {
            target_count: 3,
            selected: vec![1, 4, 5],
            skipped: vec![],
        };
        let recs: BTreeMap<TokenId, Vec<f64>> = [1, 4, 5].into_iter().map(|i| (i, vec![-1.0, -2.0])).collect();
        let mut lock = ReplacementLock::default();
        let first = apply_plan(&e, &plan, &recs, &mut lock).unwrap();
        let differing = (0..6).filter(|&i| first.matrix.row(i) != e.row(i)).count();
        assert_eq!(differing, 3);
        let other: BTreeMap<TokenId, Vec<f64>> = [1, 4, 5].into_iter().map(|i| (i, vec![7.0, 7.0])).collect();
        let second = apply_plan(&first.matrix, &plan, &other, &mut lock).unwrap();
        assert_eq!(second.matrix, first.matrix);
        assert_eq!(second.locked, vec![1, 4, 5]);

        let empty = ReplacementPlan {
            target_count: 0,
            selected: vec![],
            skipped: vec![],
        };
        let same = apply_plan(&e, &empty, &BTreeMap::new(), &mut ReplacementLock::default()).unwrap();
        assert_eq!(same.matrix.as_slice(), e.as_slice());
        assert!(matches!(
            apply_plan(&e, &plan, &BTreeMap::new(), &mut ReplacementLock::default()),
            Err(Error::MissingReconstructions(ids)) if ids == vec![1, 4, 5]
        ));
    }
}
