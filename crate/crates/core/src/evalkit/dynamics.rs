use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{drift_stats, isotropy, mean_pairwise_cosine, svd_project2d, DriftRow, EmbeddingMatrix, PairwiseCosine};
use crate::model::{AdamConfig, AdamState, ModelConfig, ModelParams, Objective};
use crate::pipeline::pretrain::mlm_example;
use crate::pipeline::train::run;
use crate::pipeline::{embedding_matrix, MLM_PROB};
use crate::tokenizer::{TokenId, TokenizerModel};
use crate::vocab::{assign_groups, count_records, rank_by_frequency, task_vocab, GroupAssignment, GroupBasis, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZipfConfig {
    /// Frequency ∝ rank^-exponent.
    pub exponent: f64,
    /// Number of token types used, counted from the first non-special id;
    /// 0 means all of them.
    pub types: usize,
    /// Task documents only use the `task_types` most frequent types.
    pub task_types: usize,
    pub pretrain_sequences: usize,
    pub task_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for ZipfConfig {
    fn default() -> Self {
        ZipfConfig {
            exponent: 1.1,
            types: 0,
            task_types: 100,
            pretrain_sequences: 2000,
            task_sequences: 1000,
            seq_len: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZipfCorpus {
    pub pretrain: Vec<Vec<TokenId>>,
    pub task: Vec<Vec<TokenId>>,
    pub pretrain_counts: Vec<u64>,
    pub task_counts: Vec<u64>,
}

/// Synthetic corpora whose rank `r` type is id `num_specials + r`.
pub fn zipf_corpus(cfg: &ZipfConfig, tok: &TokenizerModel) -> Result<ZipfCorpus> {
    let first = tok.num_specials();
    let available = tok.vocab_size() - first;
    let types = if cfg.types == 0 { available } else { cfg.types };
    if types > available || types == 0 {
        return Err(Error::InvalidArgument(format!("{types} types, tokenizer has {available}")));
    }
    if cfg.task_types == 0 || cfg.task_types > types || cfg.seq_len == 0 {
        return Err(Error::InvalidArgument(format!(
            "task_types {} must be in 1..={types} and seq_len positive",
            cfg.task_types
        )));
    }
    if !(cfg.exponent.is_finite() && cfg.exponent > 0.0) {
        return Err(Error::InvalidArgument(format!("exponent {}", cfg.exponent)));
    }
    let weights: Vec<f64> = (1..=types).map(|r| (r as f64).powf(-cfg.exponent)).collect();
    let full = WeightedIndex::new(&weights).expect("positive weights");
    let task = WeightedIndex::new(&weights[..cfg.task_types]).expect("positive weights");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let v = tok.vocab_size();
    let mut draw = |dist: &WeightedIndex<f64>, n: usize, counts: &mut Vec<u64>| -> Vec<Vec<TokenId>> {
        (0..n)
            .map(|_| {
                (0..cfg.seq_len)
                    .map(|_| {
                        let id = first + dist.sample(&mut rng);
                        counts[id] += 1;
                        id as TokenId
                    })
                    .collect()
            })
            .collect()
    };
    let mut pretrain_counts = vec![0; v];
    let mut task_counts = vec![0; v];
    let pretrain = draw(&full, cfg.pretrain_sequences, &mut pretrain_counts);
    let task = draw(&task, cfg.task_sequences, &mut task_counts);
    Ok(ZipfCorpus {
        pretrain,
        task,
        pretrain_counts,
        task_counts,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Init {
    #[default]
    Scratch,
    /// Masked-LM training on the full-vocabulary corpus first.
    Pretrained,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConfig {
    pub init: Init,
    pub weight_tying: bool,
    pub corpus: ZipfConfig,
    /// `vocab_size`, `tie_weights` and `max_seq_len` are taken from the
    /// tokenizer, `weight_tying` and the corpus.
    pub model: ModelConfig,
    pub steps: usize,
    pub snapshot_every: usize,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl DynamicsConfig {
    pub fn new(tok: &TokenizerModel) -> Self {
        DynamicsConfig {
            init: Init::Scratch,
            weight_tying: true,
            corpus: ZipfConfig::default(),
            model: ModelConfig::tiny(tok.vocab_size()),
            steps: 3000,
            snapshot_every: 500,
            pretrain_steps: 3000,
            batch_size: 16,
            adam: AdamConfig {
                base_lr: 0.05,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub step: usize,
    pub embeddings: EmbeddingMatrix,
    pub isotropy: f64,
    /// Against the step-0 snapshot.
    pub drift: Vec<DriftRow>,
    /// Over the tokens that appear in the task corpus.
    pub appearing_cosine: PairwiseCosine,
    pub projection: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsRun {
    pub snapshots: Vec<Snapshot>,
    /// Task-training losses.
    pub trace: Vec<f64>,
    pub pretrain_trace: Vec<f64>,
    pub vocab: Vocabulary,
    pub groups: GroupAssignment,
}

fn snapshot(step: usize, e: EmbeddingMatrix, start: &EmbeddingMatrix, groups: &GroupAssignment, appearing: &[TokenId]) -> Result<Snapshot> {
    Ok(Snapshot {
        step,
        isotropy: isotropy(&e)?.score,
        drift: drift_stats(start, &e, groups)?,
        appearing_cosine: mean_pairwise_cosine(&e, appearing, usize::MAX, 0)?,
        projection: svd_project2d(&e)?.coords,
        embeddings: e,
    })
}

/// Trains a toy masked LM on the task side of a Zipfian corpus and records
/// embedding geometry every `snapshot_every` steps (plus step 0 and the
/// final step). Divergence aborts with the losses so far.
pub fn dynamics_run(cfg: &DynamicsConfig, tok: &TokenizerModel) -> Result<DynamicsRun> {
    if cfg.snapshot_every == 0 {
        return Err(Error::InvalidArgument("snapshot_every must be at least 1".into()));
    }
    let corpus = zipf_corpus(&cfg.corpus, tok)?;
    let vocab = rank_by_frequency(&count_records(tok, &corpus.pretrain_counts))?;
    let groups = assign_groups(&vocab, &corpus.task_counts, GroupBasis::TaskFrequency)?;
    let appearing = task_vocab(&vocab, &corpus.task_counts)?;

    let mut model = cfg.model.clone();
    model.vocab_size = tok.vocab_size();
    model.tie_weights = cfg.weight_tying;
    model.max_seq_len = model.max_seq_len.max(cfg.corpus.seq_len);
    let mut params = ModelParams::<f64>::init(&model, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x2545_f491_4f6c_dd1d);
    let batch = cfg.batch_size.max(1);
    let mut pretrain_trace = Vec::new();
    if cfg.init == Init::Pretrained {
        let mut opt = AdamState::new(&params, cfg.adam);
        pretrain_trace = run(&mut params, &mut opt, cfg.pretrain_steps, Objective::MaskedLm, &mut rng, |rng| {
            Ok((0..batch)
                .map(|_| mlm_example(corpus.pretrain.choose(rng).expect("nonempty"), tok, MLM_PROB, rng))
                .collect())
        })?;
    }
    if corpus.task.is_empty() && cfg.steps > 0 {
        return Err(Error::EmptyCorpus);
    }

    let start = embedding_matrix(&params);
    let mut snapshots = vec![snapshot(0, start.clone(), &start, &groups, &appearing)?];
    let mut opt = AdamState::new(&params, cfg.adam);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut done = 0;
    while done < cfg.steps {
        let n = cfg.snapshot_every.min(cfg.steps - done);
        let chunk = run(&mut params, &mut opt, n, Objective::MaskedLm, &mut rng, |rng| {
            Ok((0..batch)
                .map(|_| mlm_example(corpus.task.choose(rng).expect("nonempty"), tok, MLM_PROB, rng))
                .collect())
        });
        match chunk {
            Ok(t) => trace.extend(t),
            Err(Error::Diverged { step, loss, trace: t }) => {
                trace.extend(t);
                return Err(Error::Diverged {
                    step: done + step,
                    loss,
                    trace,
                });
            }
            Err(e) => return Err(e),
        }
        done += n;
        snapshots.push(snapshot(done, embedding_matrix(&params), &start, &groups, &appearing)?);
    }
    Ok(DynamicsRun {
        snapshots,
        trace,
        pretrain_trace,
        vocab,
        groups,
    })
}
