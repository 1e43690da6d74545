//! Evaluation: word similarity, MSE distributions, probing, embedding
//! dynamics on synthetic corpora, and report files.

mod dynamics;
mod msedist;
mod probe;
mod report;
mod spearman;
mod wordsim;

pub use dynamics::{dynamics_run, zipf_corpus, DynamicsConfig, DynamicsRun, Init, Snapshot, ZipfConfig, ZipfCorpus};
pub use msedist::{mse_distribution, MseBin, MseDistribution};
pub use probe::{final_hidden_states, probe_accuracy, train_probe, Probe, ProbeConfig, ProbeDataset, ProbeLabel};
pub use report::{emit_report, render_report, Cell, Report, ReportFormat, ScatterPoint, Table};
pub use spearman::{average_ranks, pearson, spearman};
pub use wordsim::{word_similarity_eval, word_vector, Metric, SimilarityDataset, SimilarityPair, SkippedPair, WordSimReport};
