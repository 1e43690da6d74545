use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::train::{run, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{AdamState, Architecture, Example, ModelConfig, ModelParams, Objective, Real, Targets};
use crate::tokenizer::{TokenId, TokenizerModel, BOS, MASK};

/// Share of tokens corrupted per pretraining sequence.
pub const MLM_PROB: f64 = 0.15;
const SPAN_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask_prob: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<R> {
    pub params: ModelParams<R>,
    pub trace: Vec<f64>,
}

/// Tokenizes each nonempty line and cuts it into windows of at most
/// `max_len` tokens. Windows shorter than two tokens are dropped.
pub fn corpus_windows(corpus: &str, tok: &TokenizerModel, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    for line in corpus.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let ids = tok.encode(line);
        for w in ids.chunks(max_len.max(2)) {
            if w.len() >= 2 {
                out.push(w.to_vec());
            }
        }
    }
    out
}

pub(crate) fn mlm_example<G: Rng>(ids: &[TokenId], tok: &TokenizerModel, p: f64, rng: &mut G) -> Example {
    let first = tok.num_specials() as TokenId;
    let v = tok.vocab_size() as TokenId;
    let mut picked: Vec<usize> = (0..ids.len()).filter(|_| rng.random_bool(p)).collect();
    if picked.is_empty() {
        picked.push(rng.random_range(0..ids.len()));
    }
    let mut source = ids.to_vec();
    for &k in &picked {
        let u: f64 = rng.random();
        if u < 0.8 {
            source[k] = MASK;
        } else if u < 0.9 {
            source[k] = rng.random_range(first..v);
        }
    }
    Example {
        source,
        decoder_input: None,
        targets: Targets::Lm(picked.iter().map(|&k| (k, ids[k])).collect()),
    }
}

/// Random non-overlapping spans, each collapsed to its own sentinel. The
/// target layout matches prompt corruption: `MASK_j, t` per corrupted token.
/// Spans stop once the decoder input (`BOS` plus two entries per corrupted
/// token) would exceed `max_len`.
fn span_example<G: Rng>(ids: &[TokenId], tok: &TokenizerModel, p: f64, max_len: usize, rng: &mut G) -> Example {
    let budget = (max_len.saturating_sub(1) / 2).max(1);
    let max_spans = tok.num_sentinels().max(1);
    let start_p = (p / SPAN_LEN as f64).min(1.0);
    let mut spans: Vec<(usize, usize)> = Vec::new();
    let mut i = 0;
    let mut used = 0;
    while i < ids.len() && spans.len() < max_spans && used < budget {
        if rng.random_bool(start_p) {
            let len = SPAN_LEN.min(ids.len() - i).min(budget - used);
            used += len;
            spans.push((i, len));
            i += len + 1;
        } else {
            i += 1;
        }
    }
    if spans.is_empty() {
        let s = rng.random_range(0..ids.len());
        spans.push((s, SPAN_LEN.min(ids.len() - s).min(budget)));
    }
    let mut source = Vec::with_capacity(ids.len());
    let mut dec = vec![BOS];
    let mut targets = Vec::new();
    let mut cursor = 0;
    for (j, &(s, len)) in spans.iter().enumerate() {
        let sentinel = tok.sentinel(j + 1).unwrap_or(MASK);
        source.extend_from_slice(&ids[cursor..s]);
        source.push(sentinel);
        for &t in &ids[s..s + len] {
            dec.push(sentinel);
            targets.push((dec.len() - 1, t));
            dec.push(t);
        }
        cursor = s + len;
    }
    source.extend_from_slice(&ids[cursor..]);
    dec.pop();
    Example {
        source,
        decoder_input: Some(dec),
        targets: Targets::Lm(targets),
    }
}

/// Masked-LM (encoder) or span-denoising (encoder-decoder) pretraining
/// from a fresh initialization.
pub fn pretrain_toy_plm<R: Real>(corpus: &str, tok: &TokenizerModel, cfg: &PretrainConfig) -> Result<PretrainOutput<R>> {
    if cfg.model.vocab_size != tok.vocab_size() {
        return Err(Error::shape(
            format!("model vocabulary {}", cfg.model.vocab_size),
            tok.vocab_size(),
        ));
    }
    let max_len = cfg.model.max_seq_len;
    let windows = corpus_windows(corpus, tok, max_len);
    if windows.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut params = ModelParams::<R>::init(&cfg.model, cfg.train.seed)?;
    let mut opt = AdamState::new(&params, cfg.train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x9e37_79b9_7f4a_7c15);
    let arch = cfg.model.arch;
    let batch = cfg.train.batch_size.max(1);
    let trace = run(&mut params, &mut opt, cfg.train.steps, Objective::MaskedLm, &mut rng, |rng| {
        Ok((0..batch)
            .map(|_| {
                let w = windows.choose(rng).expect("nonempty");
                match arch {
                    Architecture::Encoder => mlm_example(w, tok, cfg.mask_prob, rng),
                    Architecture::EncoderDecoder => span_example(w, tok, cfg.mask_prob, max_len, rng),
                }
            })
            .collect())
    })?;
    Ok(PretrainOutput { params, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward;
    use crate::model::ModelInput;
    use crate::tokenizer::train_bpe;

    #[test]
    fn span_example_layout() {
        let tok = TokenizerModel::bytes_only(4);
        let ids: Vec<TokenId> = tok.encode("abcdefghijklmnop");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = span_example(&ids, &tok, 0.3, 64, &mut rng);
        let dec = ex.decoder_input.clone().unwrap();
        let Targets::Lm(t) = &ex.targets else { panic!() };
        for &(q, gold) in t {
            assert!(tok.is_sentinel(dec[q]));
            if q + 1 < dec.len() {
                assert_eq!(dec[q + 1], gold);
            }
        }
        let n_sent = ex.source.iter().filter(|&&s| tok.is_sentinel(s)).count();
        assert_eq!(ex.source.len() + t.len(), ids.len() + n_sent);
    }

    #[test]
    fn zero_steps_is_init_and_runs_repeat() {
        let corpus = "the cat sat on the mat\nthe dog sat on the log\n";
        let tok = train_bpe(corpus, 280, 4).unwrap();
        let mut model = ModelConfig::tiny(tok.vocab_size());
        model.max_seq_len = 16;
        let mut cfg = PretrainConfig {
            model,
            train: TrainConfig {
                steps: 0,
                batch_size: 2,
                seed: 5,
                ..TrainConfig::default()
            },
            mask_prob: MLM_PROB,
        };
        let out = pretrain_toy_plm::<f64>(corpus, &tok, &cfg).unwrap();
        assert_eq!(out.params, ModelParams::init(&cfg.model, 5).unwrap());
        assert!(out.trace.is_empty());
        cfg.train.steps = 5;
        let a = pretrain_toy_plm::<f64>(corpus, &tok, &cfg).unwrap();
        let b = pretrain_toy_plm::<f64>(corpus, &tok, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 5);
        let s = forward(&a.params, &ModelInput::encoder(&tok.encode("the cat"))).unwrap();
        assert!(s.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn divergence_aborts_with_trace() {
        let corpus = "aaaa bbbb\n";
        let tok = TokenizerModel::bytes_only(4);
        let mut model = ModelConfig::tiny(tok.vocab_size());
        model.layers = 1;
        let cfg = PretrainConfig {
            model,
            train: TrainConfig {
                steps: 50,
                batch_size: 1,
                adam: crate::model::AdamConfig {
                    base_lr: 1e30,
                    warmup: 1,
                    ..Default::default()
                },
                seed: 0,
            },
            mask_prob: 0.5,
        };
        match pretrain_toy_plm::<f32>(corpus, &tok, &cfg) {
            Err(Error::Diverged { step, trace, .. }) => assert_eq!(trace.len(), step),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.trace)),
        }
    }
}
