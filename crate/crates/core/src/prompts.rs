//! Definition records, full prompts and their corruption.
//!
//! A full prompt has four corruption spans: the word itself, its bpe form
//! without the leading space, its capitalized form and its uppercase form.
//! Encoder models see BERT-style corruption of span tokens and predict at
//! the corrupted position. Encoder-decoder models see every span replaced by
//! a sentinel and decode `MASK_j t` pairs, predicting each span token from
//! the hidden state of the sentinel in front of it.

use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenizerModel, BOS, MASK};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefinitionRecord {
    pub word: String,
    #[serde(rename = "pos")]
    pub part_of_speech: String,
    pub definition: String,
    #[serde(skip)]
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MalformedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Deserialize)]
struct RawRecord {
    word: Option<String>,
    pos: Option<String>,
    definition: Option<String>,
}

/// Parses definitions JSONL, keeping valid lines and reporting the rest.
pub fn parse_definitions(text: &str) -> (Vec<DefinitionRecord>, Vec<MalformedLine>) {
    let mut records = Vec::new();
    let mut malformed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                malformed.push(MalformedLine {
                    line: i + 1,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let field = |v: Option<String>, name: &str| match v {
            Some(s) if !s.trim().is_empty() => Ok(s),
            Some(_) => Err(format!("empty field `{name}`")),
            None => Err(format!("missing field `{name}`")),
        };
        let parsed = field(raw.word, "word").and_then(|word| {
            let pos = field(raw.pos, "pos")?;
            let definition = field(raw.definition, "definition")?;
            Ok((word, pos, definition))
        });
        match parsed {
            Ok((word, part_of_speech, definition)) => records.push(DefinitionRecord {
                word,
                part_of_speech,
                definition,
                source_index: records.len(),
            }),
            Err(reason) => malformed.push(MalformedLine { line: i + 1, reason }),
        }
    }
    (records, malformed)
}

pub fn load_definitions(path: &Path) -> Result<(Vec<DefinitionRecord>, Vec<MalformedLine>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in std::io::BufReader::new(file).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    Ok(parse_definitions(&text))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Slot {
    Word,
    BpeForm,
    Capitalized,
    Uppercase,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub len: usize,
    pub slot: Slot,
}

impl Span {
    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub token_ids: Vec<TokenId>,
    /// Word slot first, then bpe form, capitalized, uppercase.
    pub spans: Vec<Span>,
    pub source_index: usize,
}

impl Prompt {
    /// Token positions that belong to the target word's own slot.
    pub fn word_binding(&self) -> std::ops::Range<usize> {
        self.spans[0].positions()
    }

    pub fn span_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.spans.iter().flat_map(Span::positions)
    }
}

/// Renders the human-readable full prompt. The bpe form directly follows
/// the comma before it, so it tokenizes without the whitespace marker.
pub fn render_full_prompt(rec: &DefinitionRecord) -> String {
    let segs = prompt_segments(rec);
    segs.iter().map(|(s, _)| s.as_str()).collect()
}

fn prompt_segments(rec: &DefinitionRecord) -> Vec<(String, Option<Slot>)> {
    let w = &rec.word;
    let mut chars = w.chars();
    let cap: String = match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    };
    vec![
        ("The definition of".into(), None),
        (format!(" {w}"), Some(Slot::Word)),
        (
            format!(
                " is {} . Its part-of-speech , bpe-form without space , capitalization , and uppercase are {} ,",
                rec.definition.trim(),
                rec.part_of_speech.trim()
            ),
            None,
        ),
        (w.clone(), Some(Slot::BpeForm)),
        (" ,".into(), None),
        (format!(" {cap}"), Some(Slot::Capitalized)),
        (" , and".into(), None),
        (format!(" {}", w.to_uppercase()), Some(Slot::Uppercase)),
        (" , respectively .".into(), None),
    ]
}

pub fn build_full_prompt(rec: &DefinitionRecord, tok: &TokenizerModel) -> Result<Prompt> {
    let forms = tok.word_forms(&rec.word)?;
    let mut token_ids = Vec::new();
    let mut spans = Vec::with_capacity(4);
    for (text, slot) in prompt_segments(rec) {
        let ids = match slot {
            None => tok.encode(&text),
            Some(Slot::Word) => forms.spaced.clone(),
            Some(Slot::BpeForm) => forms.bare.clone(),
            Some(Slot::Capitalized) => forms.capitalized.clone(),
            Some(Slot::Uppercase) => forms.uppercase.clone(),
        };
        if let Some(slot) = slot {
            spans.push(Span {
                start: token_ids.len(),
                len: ids.len(),
                slot,
            });
        }
        token_ids.extend(ids);
    }
    Ok(Prompt {
        token_ids,
        spans,
        source_index: rec.source_index,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorruptionMode {
    Bert,
    T5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplacementKind {
    Masked,
    Random,
    Kept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptedPrompt {
    pub mode: CorruptionMode,
    pub source_ids: Vec<TokenId>,
    /// T5 only: `MASK_j, t` pairs, one per corrupted token.
    pub target_ids: Option<Vec<TokenId>>,
    /// Corrupted positions in the full prompt, ascending.
    pub kappa: Vec<usize>,
    /// Original token at each `kappa` position.
    pub originals: Vec<TokenId>,
    /// BERT only: what happened to each `kappa` position.
    pub kinds: Vec<ReplacementKind>,
}

impl CorruptedPrompt {
    /// Decoder input for T5 mode: `BOS` followed by the target.
    pub fn decoder_input(&self) -> Option<Vec<TokenId>> {
        self.target_ids.as_ref().map(|t| {
            let mut v = Vec::with_capacity(t.len() + 1);
            v.push(BOS);
            v.extend_from_slice(t);
            v
        })
    }
}

/// Fraction of span tokens picked for corruption during training.
pub const SPAN_SELECT_PROB: f64 = 0.5;

fn random_non_special<R: Rng>(tok: &TokenizerModel, rng: &mut R) -> TokenId {
    rng.random_range(tok.num_specials() as TokenId..tok.vocab_size() as TokenId)
}

/// BERT-style corruption of span tokens.
///
/// `Train` returns one prompt: each span token is selected with probability
/// [`SPAN_SELECT_PROB`] (reselecting if nothing was picked); a selected token
/// becomes `MASK` with probability 0.5, a random non-special token with 0.25,
/// and stays unchanged with 0.25. `Infer` returns one prompt per span token
/// with exactly that token masked.
pub fn corrupt_bert<R: Rng>(
    p: &Prompt,
    tok: &TokenizerModel,
    rng: &mut R,
    phase: Phase,
) -> Result<Vec<CorruptedPrompt>> {
    let positions: Vec<usize> = p.span_positions().collect();
    if positions.is_empty() {
        return Err(Error::EmptySpans);
    }
    match phase {
        Phase::Infer => Ok(positions
            .iter()
            .map(|&k| {
                let mut source_ids = p.token_ids.clone();
                source_ids[k] = MASK;
                CorruptedPrompt {
                    mode: CorruptionMode::Bert,
                    source_ids,
                    target_ids: None,
                    kappa: vec![k],
                    originals: vec![p.token_ids[k]],
                    kinds: vec![ReplacementKind::Masked],
                }
            })
            .collect()),
        Phase::Train => {
            let kappa = loop {
                let picked: Vec<usize> = positions
                    .iter()
                    .copied()
                    .filter(|_| rng.random_bool(SPAN_SELECT_PROB))
                    .collect();
                if !picked.is_empty() {
                    break picked;
                }
            };
            let mut source_ids = p.token_ids.clone();
            let mut kinds = Vec::with_capacity(kappa.len());
            for &k in &kappa {
                let u: f64 = rng.random();
                let kind = if u < 0.5 {
                    source_ids[k] = MASK;
                    ReplacementKind::Masked
                } else if u < 0.75 {
                    source_ids[k] = random_non_special(tok, rng);
                    ReplacementKind::Random
                } else {
                    ReplacementKind::Kept
                };
                kinds.push(kind);
            }
            let originals = kappa.iter().map(|&k| p.token_ids[k]).collect();
            Ok(vec![CorruptedPrompt {
                mode: CorruptionMode::Bert,
                source_ids,
                target_ids: None,
                kappa,
                originals,
                kinds,
            }])
        }
    }
}

/// T5-style corruption: span `j` collapses to sentinel `MASK_j` in the
/// source; the target lists `MASK_j, t` for every token `t` of span `j`.
pub fn corrupt_t5(p: &Prompt, tok: &TokenizerModel) -> Result<CorruptedPrompt> {
    if p.spans.is_empty() {
        return Err(Error::EmptySpans);
    }
    if p.spans.len() > tok.num_sentinels() {
        return Err(Error::TooManySpans {
            spans: p.spans.len(),
            sentinels: tok.num_sentinels(),
        });
    }
    let mut spans = p.spans.clone();
    spans.sort_by_key(|s| s.start);
    let mut source_ids = Vec::with_capacity(p.token_ids.len());
    let mut target_ids = Vec::new();
    let mut kappa = Vec::new();
    let mut cursor = 0;
    for (j, span) in spans.iter().enumerate() {
        let sentinel = tok.sentinel(j + 1).expect("checked above");
        source_ids.extend_from_slice(&p.token_ids[cursor..span.start]);
        source_ids.push(sentinel);
        for k in span.positions() {
            target_ids.push(sentinel);
            target_ids.push(p.token_ids[k]);
            kappa.push(k);
        }
        cursor = span.start + span.len;
    }
    source_ids.extend_from_slice(&p.token_ids[cursor..]);
    let originals = kappa.iter().map(|&k| p.token_ids[k]).collect();
    Ok(CorruptedPrompt {
        mode: CorruptionMode::T5,
        source_ids,
        target_ids: Some(target_ids),
        kappa,
        originals,
        kinds: Vec::new(),
    })
}

/// `(k, g(k))` for every corrupted token, in `kappa` order.
///
/// BERT: `g(k) = k` in source coordinates. T5: the j-th corrupted token
/// (1-based) sits at target position `2j`; it is predicted from decoder
/// position `2j - 1`, which holds its sentinel once the decoder input is
/// prefixed with `BOS`.
pub fn map_positions(c: &CorruptedPrompt) -> Vec<(usize, usize)> {
    match c.mode {
        CorruptionMode::Bert => c.kappa.iter().map(|&k| (k, k)).collect(),
        CorruptionMode::T5 => c
            .kappa
            .iter()
            .enumerate()
            .map(|(j, &k)| (k, 2 * (j + 1) - 1))
            .collect(),
    }
}

pub fn corrupted_prompts_jsonl(prompts: &[CorruptedPrompt]) -> String {
    let mut s = String::new();
    for p in prompts {
        s.push_str(&serde_json::to_string(p).expect("prompt serializes"));
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::train_bpe;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn discomfort() -> DefinitionRecord {
        DefinitionRecord {
            word: "discomfort".into(),
            part_of_speech: "verb".into(),
            definition: "To cause annoyance or distress to".into(),
            source_index: 0,
        }
    }

    fn tok() -> TokenizerModel {
        let text = render_full_prompt(&discomfort()).repeat(4);
        train_bpe(&text, 330, 8).unwrap()
    }

    #[test]
    fn parse_reports_malformed_lines() {
        let text = r#"{"word":"a","pos":"det","definition":"one"}
{"word":"b","pos":"noun"}
not json
{"word":"c","pos":"noun","definition":"the letter"}
"#;
        let (recs, bad) = parse_definitions(text);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].word, "c");
        assert_eq!(recs[1].source_index, 1);
        assert_eq!(bad.iter().map(|m| m.line).collect::<Vec<_>>(), vec![2, 3]);
        assert!(bad[0].reason.contains("definition"));
    }

    #[test]
    fn load_missing_file_is_error() {
        assert!(load_definitions(Path::new("/nonexistent/defs.jsonl")).is_err());
    }

    #[test]
    fn spans_decode_to_surface_forms() {
        let t = tok();
        let p = build_full_prompt(&discomfort(), &t).unwrap();
        let forms: Vec<String> = p
            .spans
            .iter()
            .map(|s| t.decode(&p.token_ids[s.positions()]).unwrap())
            .collect();
        assert_eq!(forms, [" discomfort", "discomfort", " Discomfort", " DISCOMFORT"]);
        assert_eq!(t.decode(&p.token_ids).unwrap(), render_full_prompt(&discomfort()));
    }

    #[test]
    fn single_letter_word() {
        let t = tok();
        let rec = DefinitionRecord {
            word: "a".into(),
            ..discomfort()
        };
        let p = build_full_prompt(&rec, &t).unwrap();
        assert_eq!(p.spans.len(), 4);
        assert!(p.spans.iter().all(|s| s.len >= 1));
        let bad = DefinitionRecord {
            word: "no good".into(),
            ..discomfort()
        };
        assert!(build_full_prompt(&bad, &t).is_err());
    }

    #[test]
    fn infer_phase_counts() {
        let t = TokenizerModel::bytes_only(8);
        let p = Prompt {
            token_ids: (100..120).collect(),
            spans: vec![
                Span { start: 1, len: 4, slot: Slot::Word },
                Span { start: 7, len: 2, slot: Slot::BpeForm },
                Span { start: 11, len: 2, slot: Slot::Capitalized },
                Span { start: 15, len: 2, slot: Slot::Uppercase },
            ],
            source_index: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = corrupt_bert(&p, &t, &mut rng, Phase::Infer).unwrap();
        assert_eq!(out.len(), 10);
        let covered: Vec<usize> = out.iter().map(|c| c.kappa[0]).collect();
        assert_eq!(covered, p.span_positions().collect::<Vec<_>>());
        for c in &out {
            let diff = c.source_ids.iter().zip(&p.token_ids).filter(|(a, b)| a != b).count();
            assert_eq!(diff, 1);
            assert_eq!(c.source_ids[c.kappa[0]], MASK);
        }
    }

    #[test]
    fn train_phase_is_seeded_and_confined_to_spans() {
        let t = tok();
        let p = build_full_prompt(&discomfort(), &t).unwrap();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            corrupt_bert(&p, &t, &mut rng, Phase::Train).unwrap()
        };
        assert_eq!(run(3), run(3));
        let spans: Vec<usize> = p.span_positions().collect();
        for seed in 0..50 {
            let c = &run(seed)[0];
            assert!(!c.kappa.is_empty());
            assert!(c.kappa.iter().all(|k| spans.contains(k)));
            for (i, (&a, &b)) in c.source_ids.iter().zip(&p.token_ids).enumerate() {
                if a != b {
                    assert!(c.kappa.contains(&i));
                }
            }
        }
        let empty = Prompt { spans: vec![], ..p };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(corrupt_bert(&empty, &t, &mut rng, Phase::Train), Err(Error::EmptySpans)));
    }

    #[test]
    fn t5_layout_and_positions() {
        let t = tok();
        let p = build_full_prompt(&discomfort(), &t).unwrap();
        let c = corrupt_t5(&p, &t).unwrap();
        let target = c.target_ids.as_ref().unwrap();
        assert_eq!(target.len(), 2 * c.kappa.len());
        let dec = c.decoder_input().unwrap();
        for (k, g) in map_positions(&c) {
            assert!(t.is_sentinel(dec[g]));
            assert_eq!(dec[g + 1], p.token_ids[k]);
        }
        let source = t.decode(&c.source_ids).unwrap();
        assert!(source.starts_with("The definition of<MASK_1> is To cause"));
        assert!(source.ends_with("are verb ,<MASK_2> ,<MASK_3> , and<MASK_4> , respectively ."));
    }

    #[test]
    fn t5_single_token_span() {
        let t = TokenizerModel::bytes_only(2);
        let p = Prompt {
            token_ids: vec![40, 41, 42],
            spans: vec![Span { start: 1, len: 1, slot: Slot::Word }],
            source_index: 0,
        };
        let c = corrupt_t5(&p, &t).unwrap();
        assert_eq!(c.target_ids.as_ref().unwrap().len(), 2);
        assert_eq!(map_positions(&c), vec![(1, 1)]);
        let too_many = Prompt {
            spans: vec![
                Span { start: 0, len: 1, slot: Slot::Word },
                Span { start: 1, len: 1, slot: Slot::BpeForm },
                Span { start: 2, len: 1, slot: Slot::Capitalized },
            ],
            ..p
        };
        assert!(matches!(corrupt_t5(&too_many, &t), Err(Error::TooManySpans { .. })));
    }

    #[test]
    fn bert_positions_are_identity() {
        let c = CorruptedPrompt {
            mode: CorruptionMode::Bert,
            source_ids: vec![0; 8],
            target_ids: None,
            kappa: vec![5],
            originals: vec![9],
            kinds: vec![ReplacementKind::Masked],
        };
        assert_eq!(map_positions(&c), vec![(5, 5)]);
        let line = corrupted_prompts_jsonl(&[c]);
        assert!(line.contains("\"mode\":\"bert\""));
    }
}
