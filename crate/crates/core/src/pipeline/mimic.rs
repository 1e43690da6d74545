use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::{run, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::EmbeddingMatrix;
use crate::model::{forward, mimic_project, AdamState, Architecture, Example, ModelInput, ModelParams, Objective, Real, Targets};
use crate::prompts::{
    build_full_prompt, corrupt_bert, corrupt_t5, map_positions, CorruptedPrompt, CorruptionMode, DefinitionRecord, Phase,
    Prompt,
};
use crate::tokenizer::{TokenId, TokenizerModel, MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MimicConfig {
    pub train: TrainConfig,
    pub mode: CorruptionMode,
    /// Keep the model's own token table fixed during mimic training. The
    /// targets are a copy taken at the start either way.
    pub freeze_embeddings: bool,
}

impl MimicConfig {
    pub fn for_arch(arch: Architecture, train: TrainConfig) -> Self {
        MimicConfig {
            train,
            mode: match arch {
                Architecture::Encoder => CorruptionMode::Bert,
                Architecture::EncoderDecoder => CorruptionMode::T5,
            },
            freeze_embeddings: arch == Architecture::EncoderDecoder,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MimicOutput<R> {
    pub params: ModelParams<R>,
    pub trace: Vec<f64>,
    /// Final MSE per word-slot token over the training definitions.
    pub per_token_mse: BTreeMap<TokenId, f64>,
    /// Records whose prompt does not fit the model.
    pub skipped_records: Vec<usize>,
}

/// The token table as an f64 matrix.
pub fn embedding_matrix<R: Real>(p: &ModelParams<R>) -> EmbeddingMatrix {
    let data = p.token_embeddings().iter().map(|v| v.to_f64()).collect();
    EmbeddingMatrix::new(p.config.vocab_size, p.config.embed_dim, data).expect("table shape")
}

fn check_mode<R: Real>(p: &ModelParams<R>, mode: CorruptionMode) -> Result<()> {
    let ok = matches!(
        (p.config.arch, mode),
        (Architecture::Encoder, CorruptionMode::Bert) | (Architecture::EncoderDecoder, CorruptionMode::T5)
    );
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{mode:?} corruption does not fit a {:?} model",
            p.config.arch
        )))
    }
}

fn fits<R: Real>(p: &ModelParams<R>, prompt: &Prompt) -> bool {
    let max = p.config.max_seq_len;
    let span_tokens: usize = prompt.spans.iter().map(|s| s.len).sum();
    match p.config.arch {
        Architecture::Encoder => prompt.token_ids.len() <= max,
        Architecture::EncoderDecoder => prompt.token_ids.len() <= max && 2 * span_tokens + 1 <= max,
    }
}

/// One mimic example: every corrupted token supervised at `g(k)` with its
/// target embedding.
pub fn build_mimic_examples(c: &CorruptedPrompt, targets: &EmbeddingMatrix) -> Result<Example> {
    let mut t = Vec::with_capacity(c.kappa.len());
    for ((_, g), &orig) in map_positions(c).into_iter().zip(&c.originals) {
        if orig as usize >= targets.rows() {
            return Err(Error::TokenOutOfRange {
                id: orig,
                position: g,
                vocab_size: targets.rows(),
            });
        }
        t.push((g, targets.row(orig as usize).to_vec()));
    }
    Ok(Example {
        source: c.source_ids.clone(),
        decoder_input: c.decoder_input(),
        targets: Targets::Mimic(t),
    })
}

/// Trains the mimic model: the PLM's weights plus a fresh projection `W`,
/// fitted so that `W s_{g(k)}` matches the PLM's embedding of each
/// corrupted span token.
pub fn train_mimic<R: Real>(
    plm: &ModelParams<R>,
    defs: &[DefinitionRecord],
    tok: &TokenizerModel,
    cfg: &MimicConfig,
) -> Result<MimicOutput<R>> {
    check_mode(plm, cfg.mode)?;
    let targets = embedding_matrix(plm);
    let mut params = plm.with_mimic_head(cfg.train.seed)?;
    let mut prompts = Vec::new();
    let mut skipped_records = Vec::new();
    for (i, rec) in defs.iter().enumerate() {
        let p = build_full_prompt(rec, tok)?;
        if p.span_positions().next().is_some() && fits(&params, &p) {
            prompts.push(p);
        } else {
            skipped_records.push(i);
        }
    }
    if prompts.is_empty() {
        return Err(Error::NoCorruptedTokens);
    }
    let t5: Vec<Option<Example>> = match cfg.mode {
        CorruptionMode::T5 => prompts
            .iter()
            .map(|p| corrupt_t5(p, tok).and_then(|c| build_mimic_examples(&c, &targets)).map(Some))
            .collect::<Result<_>>()?,
        CorruptionMode::Bert => vec![None; prompts.len()],
    };
    let mut opt = AdamState::new(&params, cfg.train.adam);
    if cfg.freeze_embeddings {
        opt.freeze(params.token_embedding_index());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5851_f42d_4c95_7f2d);
    let batch = cfg.train.batch_size.max(1);
    let trace = run(&mut params, &mut opt, cfg.train.steps, Objective::MimicMse, &mut rng, |rng| {
        (0..batch)
            .map(|_| {
                let i = rng.random_range(0..prompts.len());
                match &t5[i] {
                    Some(ex) => Ok(ex.clone()),
                    None => {
                        let c = corrupt_bert(&prompts[i], tok, rng, Phase::Train)?.remove(0);
                        build_mimic_examples(&c, &targets)
                    }
                }
            })
            .collect()
    })?;
    let kept: Vec<DefinitionRecord> = defs
        .iter()
        .enumerate()
        .filter(|(i, _)| !skipped_records.contains(i))
        .map(|(_, r)| r.clone())
        .collect();
    let per_token_mse = per_token_mse(&params, &kept, tok, cfg.mode, &targets)?;
    Ok(MimicOutput {
        params,
        trace,
        per_token_mse,
        skipped_records,
    })
}

/// Definition embeddings of the tokens in a record's word slot, in order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub tokens: Vec<TokenId>,
    pub vectors: Vec<Vec<f64>>,
}

/// `W s_{g(k)}` for the span positions `ks` of `prompt`.
fn project_positions<R: Real>(
    defemb: &ModelParams<R>,
    prompt: &Prompt,
    tok: &TokenizerModel,
    mode: CorruptionMode,
    ks: &[usize],
) -> Result<Vec<Vec<f64>>> {
    check_mode(defemb, mode)?;
    let d = defemb.config.hidden_dim;
    let states: Vec<R> = match mode {
        CorruptionMode::Bert => {
            let inputs: Vec<Vec<TokenId>> = ks
                .iter()
                .map(|&k| {
                    let mut s = prompt.token_ids.clone();
                    s[k] = MASK;
                    s
                })
                .collect();
            let mut rows = Vec::with_capacity(ks.len() * d);
            for (s, &k) in inputs.iter().zip(ks) {
                let st = forward(defemb, &ModelInput::encoder(s))?;
                rows.extend_from_slice(&st[k * d..(k + 1) * d]);
            }
            rows
        }
        CorruptionMode::T5 => {
            let c = corrupt_t5(prompt, tok)?;
            let dec = c.decoder_input().expect("t5 target");
            let st = forward(defemb, &ModelInput::seq2seq(&c.source_ids, &dec))?;
            let g: BTreeMap<usize, usize> = map_positions(&c).into_iter().collect();
            let mut rows = Vec::with_capacity(ks.len() * d);
            for k in ks {
                let q = g[k];
                rows.extend_from_slice(&st[q * d..(q + 1) * d]);
            }
            rows
        }
    };
    let he = defemb.config.embed_dim;
    let proj = mimic_project(defemb, &states)?;
    Ok(proj.chunks(he).map(|r| r.iter().map(|v| v.to_f64()).collect()).collect())
}

/// Reconstructs every token of the word slot: BERT mode masks one token
/// at a time, T5 mode reads all sentinel positions in one pass.
pub fn reconstruct<R: Real>(
    defemb: &ModelParams<R>,
    rec: &DefinitionRecord,
    tok: &TokenizerModel,
    mode: CorruptionMode,
) -> Result<Reconstruction> {
    let prompt = build_full_prompt(rec, tok)?;
    let ks: Vec<usize> = prompt.word_binding().collect();
    let vectors = project_positions(defemb, &prompt, tok, mode, &ks)?;
    Ok(Reconstruction {
        tokens: ks.iter().map(|&k| prompt.token_ids[k]).collect(),
        vectors,
    })
}

/// Definition embedding of one token of the record, averaged over its
/// occurrences in the first slot (word slot before surface forms) that
/// contains it.
pub fn reconstruct_token<R: Real>(
    defemb: &ModelParams<R>,
    rec: &DefinitionRecord,
    tok: &TokenizerModel,
    mode: CorruptionMode,
    id: TokenId,
) -> Result<Vec<f64>> {
    let prompt = build_full_prompt(rec, tok)?;
    let ks: Vec<usize> = prompt
        .spans
        .iter()
        .map(|s| s.positions().filter(|&k| prompt.token_ids[k] == id).collect::<Vec<_>>())
        .find(|v| !v.is_empty())
        .ok_or(Error::TokenNotInSpans(id))?;
    let vs = project_positions(defemb, &prompt, tok, mode, &ks)?;
    Ok(mean_rows(&vs))
}

fn mean_rows(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vs.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Word-slot reconstructions over many records, averaged per token.
pub fn reconstruct_all<R: Real>(
    defemb: &ModelParams<R>,
    defs: &[DefinitionRecord],
    tok: &TokenizerModel,
    mode: CorruptionMode,
) -> Result<BTreeMap<TokenId, Vec<f64>>> {
    let recs: Vec<Reconstruction> = defs
        .par_iter()
        .map(|r| reconstruct(defemb, r, tok, mode))
        .collect::<Result<_>>()?;
    let mut acc: BTreeMap<TokenId, Vec<Vec<f64>>> = BTreeMap::new();
    for r in recs {
        for (t, v) in r.tokens.into_iter().zip(r.vectors) {
            acc.entry(t).or_default().push(v);
        }
    }
    Ok(acc.into_iter().map(|(t, vs)| (t, mean_rows(&vs))).collect())
}

/// Mean squared error per dimension between each reconstructed token and
/// its target row.
pub fn per_token_mse<R: Real>(
    defemb: &ModelParams<R>,
    defs: &[DefinitionRecord],
    tok: &TokenizerModel,
    mode: CorruptionMode,
    targets: &EmbeddingMatrix,
) -> Result<BTreeMap<TokenId, f64>> {
    let rec = reconstruct_all(defemb, defs, tok, mode)?;
    Ok(rec
        .into_iter()
        .map(|(t, v)| {
            let e = targets.row(t as usize);
            let mse = v.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / v.len() as f64;
            (t, mse)
        })
        .collect())
}
