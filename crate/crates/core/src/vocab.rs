//! Frequency ranking, task-appearance statistics and frequency groups.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenizerModel};

/// One line of a token-count JSONL table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRecord {
    pub id: TokenId,
    pub token: String,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    entries: Vec<CountRecord>,
    order: Vec<TokenId>,
    rank: Vec<usize>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Token ids by descending pretraining count.
    pub fn order(&self) -> &[TokenId] {
        &self.order
    }

    /// Pretraining rank (0 = most frequent) of a token.
    pub fn rank_of(&self, id: TokenId) -> usize {
        self.rank[id as usize]
    }

    pub fn entry(&self, id: TokenId) -> &CountRecord {
        &self.entries[id as usize]
    }

    pub fn entries(&self) -> &[CountRecord] {
        &self.entries
    }
}

/// Builds the ranked vocabulary. Ties in count keep ascending id order.
pub fn rank_by_frequency(records: &[CountRecord]) -> Result<Vocabulary> {
    let n = records.len();
    let mut slots: Vec<Option<CountRecord>> = vec![None; n];
    for r in records {
        let i = r.id as usize;
        if i >= n {
            // Some id below n must then be missing.
            let missing = (0..n).find(|&j| !records.iter().any(|x| x.id as usize == j)).unwrap_or(n);
            return Err(Error::MissingId(missing as TokenId));
        }
        if slots[i].is_some() {
            return Err(Error::DuplicateId(r.id));
        }
        slots[i] = Some(r.clone());
    }
    let entries: Vec<CountRecord> = slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or(Error::MissingId(i as TokenId)))
        .collect::<Result<_>>()?;
    let mut order: Vec<TokenId> = (0..n as TokenId).collect();
    order.sort_by(|&a, &b| entries[b as usize].count.cmp(&entries[a as usize].count));
    let mut rank = vec![0; n];
    for (r, &id) in order.iter().enumerate() {
        rank[id as usize] = r;
    }
    Ok(Vocabulary { entries, order, rank })
}

/// Occurrences of every id when each line of `text` is encoded separately.
pub fn count_tokens(text: &str, tok: &TokenizerModel) -> Vec<u64> {
    let mut counts = vec![0u64; tok.vocab_size()];
    for line in text.lines() {
        for id in tok.encode(line) {
            counts[id as usize] += 1;
        }
    }
    counts
}

/// One record per id, with the token rendered as in the tokenizer file.
pub fn count_records(tok: &TokenizerModel, counts: &[u64]) -> Vec<CountRecord> {
    counts
        .iter()
        .enumerate()
        .map(|(i, &count)| CountRecord {
            id: i as TokenId,
            token: tok.token_string(i as TokenId).unwrap_or_default(),
            count,
        })
        .collect()
}

pub fn read_count_table(path: &Path) -> Result<Vec<CountRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn count_table_jsonl(records: &[CountRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r).expect("record serializes"));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Group {
    Frequent,
    Medium,
    Rare,
    NonAppearing,
}

impl Group {
    pub const APPEARING: [Group; 3] = [Group::Frequent, Group::Medium, Group::Rare];

    pub fn name(self) -> &'static str {
        match self {
            Group::Frequent => "frequent",
            Group::Medium => "medium",
            Group::Rare => "rare",
            Group::NonAppearing => "non-appearing",
        }
    }
}

/// How appearing tokens are ranked before the 30/50/20 split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupBasis {
    /// Descending count in the task data (ties by pretraining rank).
    #[default]
    TaskFrequency,
    /// Pretraining rank.
    PretrainingIndex,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupAssignment {
    pub labels: Vec<Group>,
    pub basis: GroupBasis,
}

impl GroupAssignment {
    pub fn members(&self, group: Group) -> Vec<TokenId> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &g)| g == group)
            .map(|(i, _)| i as TokenId)
            .collect()
    }

    pub fn count(&self, group: Group) -> usize {
        self.labels.iter().filter(|&&g| g == group).count()
    }

    pub fn label(&self, id: TokenId) -> Group {
        self.labels[id as usize]
    }
}

/// Sizes of the frequent, medium and rare groups for `appearing` tokens.
pub fn group_sizes(appearing: usize) -> (usize, usize, usize) {
    let frequent = appearing * 3 / 10;
    let medium = appearing / 2;
    (frequent, medium, appearing - frequent - medium)
}

fn check_counts(vocab: &Vocabulary, task_counts: &[u64]) -> Result<()> {
    if task_counts.len() != vocab.len() {
        return Err(Error::shape(
            format!("{} task counts", vocab.len()),
            task_counts.len(),
        ));
    }
    Ok(())
}

pub fn assign_groups(vocab: &Vocabulary, task_counts: &[u64], basis: GroupBasis) -> Result<GroupAssignment> {
    check_counts(vocab, task_counts)?;
    let mut appearing = task_vocab(vocab, task_counts)?;
    if basis == GroupBasis::TaskFrequency {
        // Stable: equal task counts keep pretraining order.
        appearing.sort_by(|&a, &b| task_counts[b as usize].cmp(&task_counts[a as usize]));
    }
    let (frequent, medium, _) = group_sizes(appearing.len());
    let mut labels = vec![Group::NonAppearing; vocab.len()];
    for (i, &id) in appearing.iter().enumerate() {
        labels[id as usize] = if i < frequent {
            Group::Frequent
        } else if i < frequent + medium {
            Group::Medium
        } else {
            Group::Rare
        };
    }
    Ok(GroupAssignment { labels, basis })
}

/// Appearing tokens in pretraining-rank order.
pub fn task_vocab(vocab: &Vocabulary, task_counts: &[u64]) -> Result<Vec<TokenId>> {
    check_counts(vocab, task_counts)?;
    Ok(vocab
        .order()
        .iter()
        .copied()
        .filter(|&id| task_counts[id as usize] > 0)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinRow {
    pub appearing: usize,
    /// `None` when the bin holds no appearing token.
    pub log10_mean_freq: Option<f64>,
}

/// Bins consecutive pretraining ranks; a trailing partial bin is dropped.
pub fn bin_report(vocab: &Vocabulary, task_counts: &[u64], bin_size: usize) -> Result<Vec<BinRow>> {
    check_counts(vocab, task_counts)?;
    if bin_size == 0 {
        return Err(Error::InvalidArgument("bin_size must be at least 1".into()));
    }
    Ok(vocab
        .order()
        .chunks_exact(bin_size)
        .map(|bin| {
            let counts: Vec<u64> = bin
                .iter()
                .map(|&id| task_counts[id as usize])
                .filter(|&c| c > 0)
                .collect();
            let log10_mean_freq = (!counts.is_empty())
                .then(|| (counts.iter().sum::<u64>() as f64 / counts.len() as f64).log10());
            BinRow {
                appearing: counts.len(),
                log10_mean_freq,
            }
        })
        .collect())
}

pub fn bin_report_csv(rows: &[BinRow]) -> String {
    let mut s = String::from("bin,appearing,log10_mean_freq\n");
    for (i, r) in rows.iter().enumerate() {
        match r.log10_mean_freq {
            Some(v) => writeln!(s, "{i},{},{v:.6}", r.appearing),
            None => writeln!(s, "{i},{},undefined", r.appearing),
        }
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(counts: &[u64]) -> Vec<CountRecord> {
        counts
            .iter()
            .enumerate()
            .map(|(i, &count)| CountRecord {
                id: i as TokenId,
                token: format!("t{i}"),
                count,
            })
            .collect()
    }

    #[test]
    fn ties_broken_by_id() {
        let v = rank_by_frequency(&records(&[5, 9, 5])).unwrap();
        assert_eq!(v.order(), &[1, 0, 2]);
        let v = rank_by_frequency(&records(&[3; 6])).unwrap();
        assert_eq!(v.order(), &[0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn missing_and_duplicate_ids() {
        let mut r = records(&[1, 2, 3]);
        r[2].id = 1;
        assert!(matches!(rank_by_frequency(&r), Err(Error::DuplicateId(1))));
        let mut r = records(&[1, 2, 3]);
        r[2].id = 7;
        assert!(matches!(rank_by_frequency(&r), Err(Error::MissingId(2))));
    }

    #[test]
    fn random_table_matches_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let counts: Vec<u64> = (0..1000).map(|_| rng.random_range(0..50)).collect();
        let v = rank_by_frequency(&records(&counts)).unwrap();
        let mut oracle: Vec<(std::cmp::Reverse<u64>, u32)> =
            counts.iter().enumerate().map(|(i, &c)| (std::cmp::Reverse(c), i as u32)).collect();
        oracle.sort();
        let oracle: Vec<u32> = oracle.into_iter().map(|(_, i)| i).collect();
        assert_eq!(v.order(), &oracle[..]);
    }

    #[test]
    fn split_sizes() {
        assert_eq!(group_sizes(10), (3, 5, 2));
        assert_eq!(group_sizes(7), (2, 3, 2));
        assert_eq!(group_sizes(0), (0, 0, 0));
        let v = rank_by_frequency(&records(&[1; 4])).unwrap();
        let g = assign_groups(&v, &[0; 4], GroupBasis::TaskFrequency).unwrap();
        assert!(g.labels.iter().all(|&l| l == Group::NonAppearing));
    }

    #[test]
    fn groups_follow_task_frequency() {
        let v = rank_by_frequency(&records(&[10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0])).unwrap();
        let task = [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 0];
        let g = assign_groups(&v, &task, GroupBasis::TaskFrequency).unwrap();
        assert_eq!(g.members(Group::Frequent), vec![7, 8, 9]);
        assert_eq!(g.members(Group::Rare), vec![0, 1]);
        assert_eq!(g.label(10), Group::NonAppearing);
        let g = assign_groups(&v, &task, GroupBasis::PretrainingIndex).unwrap();
        assert_eq!(g.members(Group::Frequent), vec![0, 1, 2]);
    }

    #[test]
    fn task_vocab_edges() {
        let v = rank_by_frequency(&records(&[3, 1, 2])).unwrap();
        assert!(task_vocab(&v, &[0, 0, 0]).unwrap().is_empty());
        assert_eq!(task_vocab(&v, &[1, 1, 1]).unwrap(), v.order());
    }

    #[test]
    fn task_vocab_matches_filter_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let counts: Vec<u64> = (0..300).map(|_| rng.random_range(0..20)).collect();
        let task: Vec<u64> = (0..300).map(|_| if rng.random_bool(0.4) { rng.random_range(1..9) } else { 0 }).collect();
        let v = rank_by_frequency(&records(&counts)).unwrap();
        let mut oracle: Vec<u32> = (0..300u32).filter(|&i| task[i as usize] > 0).collect();
        oracle.sort_by_key(|&i| (std::cmp::Reverse(counts[i as usize]), i));
        assert_eq!(task_vocab(&v, &task).unwrap(), oracle);
    }

    #[test]
    fn bins() {
        let v = rank_by_frequency(&records(&[4; 10])).unwrap();
        let rows = bin_report(&v, &[2; 10], 3).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| *r == rows[0]));
        let rows = bin_report(&v, &[1, 1, 0, 0, 0, 0, 0, 0, 0, 0], 2).unwrap();
        assert_eq!(rows[0].appearing, 2);
        assert_eq!(rows[0].log10_mean_freq, Some(0.0));
        assert_eq!(rows[1], BinRow { appearing: 0, log10_mean_freq: None });
        assert!(bin_report_csv(&rows).contains("1,0,undefined"));
        assert!(bin_report(&v, &[1; 10], 0).is_err());
    }

    #[test]
    fn zipfian_bins_decrease() {
        let n = 2000;
        let counts: Vec<u64> = (1..=n).map(|r| (1e6 / r as f64) as u64).collect();
        let v = rank_by_frequency(&records(&counts)).unwrap();
        let rows = bin_report(&v, &counts, 200).unwrap();
        for w in rows.windows(2) {
            assert!(w[1].log10_mean_freq.unwrap() <= w[0].log10_mean_freq.unwrap());
        }
        // direct computation of the first bin
        let mean = counts[..200].iter().sum::<u64>() as f64 / 200.0;
        assert!((rows[0].log10_mean_freq.unwrap() - mean.log10()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn group_proportions_and_totals(
            task in proptest::collection::vec(prop_oneof![Just(0u64), 1u64..30], 1..200),
            bin in 1usize..20,
        ) {
            let n = task.len();
            let v = rank_by_frequency(&records(&vec![1; n])).unwrap();
            let a = task.iter().filter(|&&c| c > 0).count();
            let g = assign_groups(&v, &task, GroupBasis::TaskFrequency).unwrap();
            prop_assert_eq!(g.count(Group::Frequent), a * 3 / 10);
            prop_assert_eq!(g.count(Group::Medium), a / 2);
            prop_assert_eq!(g.count(Group::Rare), a - a * 3 / 10 - a / 2);
            for (i, &c) in task.iter().enumerate() {
                prop_assert_eq!(c == 0, g.labels[i] == Group::NonAppearing);
            }
            let tv = task_vocab(&v, &task).unwrap();
            prop_assert!(tv.windows(2).all(|w| v.rank_of(w[0]) < v.rank_of(w[1])));
            let rows = bin_report(&v, &task, bin).unwrap();
            let binned = (n / bin) * bin;
            let expected = v.order()[..binned].iter().filter(|&&id| task[id as usize] > 0).count();
            prop_assert_eq!(rows.iter().map(|r| r.appearing).sum::<usize>(), expected);
        }
    }
}
