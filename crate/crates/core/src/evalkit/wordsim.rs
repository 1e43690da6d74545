use std::path::Path;

use serde::{Deserialize, Serialize};

use super::spearman::spearman;
use crate::error::{Error, Result};
use crate::geometry::{cosine, EmbeddingMatrix};
use crate::tokenizer::TokenizerModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityPair {
    pub a: String,
    pub b: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SimilarityDataset {
    pub pairs: Vec<SimilarityPair>,
}

impl SimilarityDataset {
    /// `word_a<TAB>word_b<TAB>score` per line; blank lines and `#` comments
    /// are ignored.
    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let bad = |why: &str| Error::Parse(format!("line {}: {why}", n + 1));
            if cols.len() != 3 {
                return Err(bad("expected 3 tab-separated fields"));
            }
            let (a, b) = (cols[0].trim(), cols[1].trim());
            if a.is_empty() || b.is_empty() {
                return Err(bad("empty word"));
            }
            let gold: f64 = cols[2].trim().parse().map_err(|_| bad("score is not a number"))?;
            if !gold.is_finite() {
                return Err(bad("score is not finite"));
            }
            pairs.push(SimilarityPair {
                a: a.into(),
                b: b.into(),
                gold,
            });
        }
        Ok(SimilarityDataset { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Dot,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordSimReport {
    /// `None` when undefined (fewer than two usable pairs or constant scores).
    pub correlation: Option<f64>,
    /// `(dataset index, model similarity)` for every scored pair.
    pub scores: Vec<(usize, f64)>,
    pub skipped: Vec<SkippedPair>,
}

/// Sum of the embeddings of the tokens of `" word"`, the form a word takes
/// inside running text.
pub fn word_vector(e: &EmbeddingMatrix, tok: &TokenizerModel, word: &str) -> std::result::Result<Vec<f64>, String> {
    let ids = tok.encode(&format!(" {word}"));
    let mut v = vec![0.0; e.dim()];
    for id in ids {
        if id as usize >= e.rows() {
            return Err(format!("token {id} of {word:?} is outside the embedding matrix"));
        }
        for (o, x) in v.iter_mut().zip(e.row(id as usize)) {
            *o += x;
        }
    }
    Ok(v)
}

pub fn word_similarity_eval(
    e: &EmbeddingMatrix,
    tok: &TokenizerModel,
    ds: &SimilarityDataset,
    metric: Metric,
) -> Result<WordSimReport> {
    if ds.pairs.is_empty() {
        return Err(Error::InvalidArgument("empty similarity dataset".into()));
    }
    let mut scores = Vec::new();
    let mut skipped = Vec::new();
    for (i, p) in ds.pairs.iter().enumerate() {
        let pair = word_vector(e, tok, &p.a).and_then(|a| word_vector(e, tok, &p.b).map(|b| (a, b)));
        let sim = pair.and_then(|(a, b)| match metric {
            Metric::Dot => Ok(a.iter().zip(&b).map(|(x, y)| x * y).sum()),
            Metric::Cosine => cosine(&a, &b).ok_or_else(|| "zero word vector".to_string()),
        });
        match sim {
            Ok(s) => scores.push((i, s)),
            Err(reason) => skipped.push(SkippedPair { index: i, reason }),
        }
    }
    let correlation = if scores.len() < 2 {
        None
    } else {
        let model: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
        let gold: Vec<f64> = scores.iter().map(|&(i, _)| ds.pairs[i].gold).collect();
        spearman(&model, &gold)?
    };
    Ok(WordSimReport {
        correlation,
        scores,
        skipped,
    })
}
