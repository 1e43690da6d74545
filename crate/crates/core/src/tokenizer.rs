//! Byte-level BPE with a leading-whitespace marker.
//!
//! Id layout is fixed: `PAD, MASK, BOS, EOS`, then the sentinel block
//! `MASK_1..MASK_S`, then the 256 byte tokens, then one id per merge in
//! training order. Word-initial pieces carry the space byte, which the text
//! format renders as `Ġ` through the usual printable byte mapping.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const MASK: TokenId = 1;
pub const BOS: TokenId = 2;
pub const EOS: TokenId = 3;
const FIXED_SPECIALS: usize = 4;

pub const DEFAULT_SENTINELS: usize = 32;
pub const WHITESPACE_MARKER: char = 'Ġ';

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizerModel {
    num_sentinels: usize,
    merges: Vec<(TokenId, TokenId)>,
    pieces: Vec<Vec<u8>>,
    merge_rank: HashMap<(TokenId, TokenId), TokenId>,
}

/// A word with the four surface forms used by the prompt template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordTokenization {
    pub word: String,
    /// `" word"`; its length is the word's token count K.
    pub spaced: Vec<TokenId>,
    /// `"word"`, the bpe form without the marker.
    pub bare: Vec<TokenId>,
    /// `" Word"`.
    pub capitalized: Vec<TokenId>,
    /// `" WORD"`.
    pub uppercase: Vec<TokenId>,
}

impl WordTokenization {
    pub fn k(&self) -> usize {
        self.spaced.len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn classify(b: u8) -> ByteClass {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xff => ByteClass::Letter,
        b'0'..=b'9' => ByteClass::Digit,
        b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => ByteClass::Space,
        _ => ByteClass::Other,
    }
}

/// Splits bytes into pre-tokens: an optional single leading space glued to a
/// run of letters, digits or punctuation, or a run of whitespace that leaves
/// a trailing space for the following word.
pub(crate) fn pretokenize(text: &[u8]) -> Vec<&[u8]> {
    let mut out = Vec::new();
    let n = text.len();
    let mut i = 0;
    while i < n {
        let start = i;
        let c = classify(text[i]);
        if text[i] == b' ' && i + 1 < n && classify(text[i + 1]) != ByteClass::Space {
            let cls = classify(text[i + 1]);
            i += 1;
            while i < n && classify(text[i]) == cls {
                i += 1;
            }
        } else if c == ByteClass::Space {
            while i < n && classify(text[i]) == ByteClass::Space {
                i += 1;
            }
            // `\s+(?!\S)`: give the final space to the next word.
            if i < n && i - start > 1 && text[i - 1] == b' ' {
                i -= 1;
            }
        } else {
            while i < n && classify(text[i]) == c {
                i += 1;
            }
        }
        out.push(&text[start..i]);
    }
    out
}

/// GPT-2's printable mapping for bytes, used by the text file format.
fn byte_to_char_table() -> [char; 256] {
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0..256u32 {
        let printable = (b'!' as u32..=b'~' as u32).contains(&b)
            || (0xA1..=0xAC).contains(&b)
            || (0xAE..=0xFF).contains(&b);
        table[b as usize] = if printable {
            char::from_u32(b).unwrap()
        } else {
            let c = char::from_u32(256 + extra).unwrap();
            extra += 1;
            c
        };
    }
    table
}

fn render_piece(table: &[char; 256], bytes: &[u8]) -> String {
    bytes.iter().map(|&b| table[b as usize]).collect()
}

fn parse_piece(reverse: &HashMap<char, u8>, s: &str) -> Option<Vec<u8>> {
    s.chars().map(|c| reverse.get(&c).copied()).collect()
}

impl TokenizerModel {
    /// A model with no merges: every byte is its own token.
    pub fn bytes_only(num_sentinels: usize) -> Self {
        let mut pieces = Vec::with_capacity(FIXED_SPECIALS + num_sentinels + 256);
        for i in 0..FIXED_SPECIALS + num_sentinels {
            pieces.push(Self::special_name(i, num_sentinels).into_bytes());
        }
        for b in 0..=255u8 {
            pieces.push(vec![b]);
        }
        TokenizerModel {
            num_sentinels,
            merges: Vec::new(),
            pieces,
            merge_rank: HashMap::new(),
        }
    }

    fn special_name(id: usize, num_sentinels: usize) -> String {
        match id {
            0 => "<PAD>".into(),
            1 => "<MASK>".into(),
            2 => "<BOS>".into(),
            3 => "<EOS>".into(),
            i if i < FIXED_SPECIALS + num_sentinels => format!("<MASK_{}>", i - FIXED_SPECIALS + 1),
            _ => unreachable!("not a special id"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn num_specials(&self) -> usize {
        FIXED_SPECIALS + self.num_sentinels
    }

    pub fn num_sentinels(&self) -> usize {
        self.num_sentinels
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.num_specials()
    }

    pub fn is_sentinel(&self, id: TokenId) -> bool {
        let i = id as usize;
        (FIXED_SPECIALS..FIXED_SPECIALS + self.num_sentinels).contains(&i)
    }

    /// Sentinel `MASK_j` for 1-based `j`.
    pub fn sentinel(&self, j: usize) -> Option<TokenId> {
        (j >= 1 && j <= self.num_sentinels).then(|| (FIXED_SPECIALS + j - 1) as TokenId)
    }

    pub fn byte_token(&self, b: u8) -> TokenId {
        (self.num_specials() + b as usize) as TokenId
    }

    /// Raw bytes of a non-special piece, or the bracketed name of a special.
    pub fn piece(&self, id: TokenId) -> Option<&[u8]> {
        self.pieces.get(id as usize).map(Vec::as_slice)
    }

    /// Printable form of a token (`Ġ` for the leading space).
    pub fn token_string(&self, id: TokenId) -> Option<String> {
        let piece = self.piece(id)?;
        if self.is_special(id) {
            return Some(String::from_utf8_lossy(piece).into_owned());
        }
        Some(render_piece(&byte_to_char_table(), piece))
    }

    /// Lookup by printable form.
    pub fn token_id(&self, token: &str) -> Option<TokenId> {
        (0..self.vocab_size() as TokenId).find(|&id| self.token_string(id).as_deref() == Some(token))
    }

    pub fn has_marker(&self, id: TokenId) -> bool {
        !self.is_special(id) && self.piece(id).is_some_and(|p| p.first() == Some(&b' '))
    }

    fn push_merge(&mut self, left: TokenId, right: TokenId) -> TokenId {
        let id = self.pieces.len() as TokenId;
        let mut piece = self.pieces[left as usize].clone();
        piece.extend_from_slice(&self.pieces[right as usize]);
        self.pieces.push(piece);
        self.merges.push((left, right));
        self.merge_rank.insert((left, right), id);
        id
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<TokenId>) {
        let mut ids: Vec<TokenId> = chunk.iter().map(|&b| self.byte_token(b)).collect();
        // Merge ids grow with training order, so the smallest id is the
        // earliest-learned applicable merge.
        loop {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.merge_rank.get(&(w[0], w[1])).map(|&id| (id, i)))
                .min();
            let Some((new_id, _)) = best else { break };
            let (l, r) = self.merges[new_id as usize - self.num_specials() - 256];
            let mut merged = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            ids = merged;
        }
        out.extend(ids);
    }

    pub fn encode_bytes(&self, text: &[u8]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for chunk in pretokenize(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (position, &id) in ids.iter().enumerate() {
            let piece = self.piece(id).ok_or(Error::TokenOutOfRange {
                id,
                position,
                vocab_size: self.vocab_size(),
            })?;
            out.extend_from_slice(piece);
        }
        Ok(out)
    }

    /// Specials render as their bracketed names, e.g. `<MASK>`.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    pub fn word_forms(&self, word: &str) -> Result<WordTokenization> {
        if word.is_empty() {
            return Err(Error::InvalidWord {
                word: word.into(),
                reason: "empty",
            });
        }
        if word.chars().any(char::is_whitespace) {
            return Err(Error::InvalidWord {
                word: word.into(),
                reason: "contains whitespace",
            });
        }
        let mut chars = word.chars();
        let capitalized: String = match chars.next() {
            Some(first) => first.to_uppercase().chain(chars).collect(),
            None => String::new(),
        };
        Ok(WordTokenization {
            word: word.to_string(),
            spaced: self.encode(&format!(" {word}")),
            bare: self.encode(word),
            capitalized: self.encode(&format!(" {capitalized}")),
            uppercase: self.encode(&format!(" {}", word.to_uppercase())),
        })
    }

    pub fn to_text(&self) -> String {
        let table = byte_to_char_table();
        let mut s = String::new();
        writeln!(s, "BPE1 {} {}", self.vocab_size(), self.num_sentinels).unwrap();
        for &(l, r) in &self.merges {
            writeln!(
                s,
                "{} {}",
                render_piece(&table, &self.pieces[l as usize]),
                render_piece(&table, &self.pieces[r as usize])
            )
            .unwrap();
        }
        for id in 0..self.num_specials() {
            writeln!(s, "{id} {}", Self::special_name(id, self.num_sentinels)).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Parse(format!("tokenizer line {}: {what}", line + 1));
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(0, "missing header"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 3 || fields[0] != "BPE1" {
            return Err(bad(0, "expected `BPE1 <vocab_size> <num_sentinels>`"));
        }
        let vocab_size: usize = fields[1].parse().map_err(|_| bad(0, "bad vocab size"))?;
        let num_sentinels: usize = fields[2].parse().map_err(|_| bad(0, "bad sentinel count"))?;
        let mut model = Self::bytes_only(num_sentinels);
        let num_merges = vocab_size
            .checked_sub(model.vocab_size())
            .ok_or_else(|| bad(0, "vocab size smaller than base vocabulary"))?;

        let table = byte_to_char_table();
        let reverse: HashMap<char, u8> = table.iter().enumerate().map(|(b, &c)| (c, b as u8)).collect();
        let mut by_piece: HashMap<Vec<u8>, TokenId> = (model.num_specials()..model.vocab_size())
            .map(|id| (model.pieces[id].clone(), id as TokenId))
            .collect();
        for _ in 0..num_merges {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated merge list"))?;
            let (l, r) = line.split_once(' ').ok_or_else(|| bad(n, "expected `left right`"))?;
            let lookup = |s: &str| {
                parse_piece(&reverse, s)
                    .and_then(|p| by_piece.get(&p).copied())
                    .ok_or_else(|| bad(n, "unknown piece"))
            };
            let (l, r) = (lookup(l)?, lookup(r)?);
            let id = model.push_merge(l, r);
            by_piece.insert(model.pieces[id as usize].clone(), id);
        }
        for id in 0..model.num_specials() {
            let (n, line) = lines.next().ok_or_else(|| bad(0, "truncated special table"))?;
            let expected = format!("{id} {}", Self::special_name(id, num_sentinels));
            if line != expected {
                return Err(bad(n, "special table mismatch"));
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Learns merges greedily by pair frequency over pre-tokenized words.
///
/// Ties go to the lexicographically smallest `(left, right)` byte pair. If
/// the corpus runs out of pairs first, the returned model is smaller than
/// `target_vocab_size`; callers compare [`TokenizerModel::vocab_size`].
pub fn train_bpe(corpus: &str, target_vocab_size: usize, num_sentinels: usize) -> Result<TokenizerModel> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = TokenizerModel::bytes_only(num_sentinels);
    let base = model.vocab_size();
    if target_vocab_size <= base {
        return Err(Error::VocabTooSmall {
            target: target_vocab_size,
            base,
        });
    }

    let mut word_counts: HashMap<&[u8], u64> = HashMap::new();
    for chunk in pretokenize(corpus.as_bytes()) {
        *word_counts.entry(chunk).or_default() += 1;
    }
    let mut words: Vec<(Vec<TokenId>, u64)> = word_counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|&b| model.byte_token(b)).collect(), c))
        .collect();
    words.sort();

    while model.vocab_size() < target_vocab_size {
        let mut pair_counts: HashMap<(TokenId, TokenId), u64> = HashMap::new();
        for (ids, count) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let key = |p: &(TokenId, TokenId)| (&model.pieces[p.0 as usize][..], &model.pieces[p.1 as usize][..]);
                key(pb).cmp(&key(pa))
            })
        });
        let Some(((l, r), _)) = best else { break };
        let new_id = model.push_merge(l, r);
        for (ids, _) in &mut words {
            let mut i = 0;
            let mut merged = Vec::with_capacity(ids.len());
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    merged.push(new_id);
                    i += 2;
                } else {
                    merged.push(ids[i]);
                    i += 1;
                }
            }
            *ids = merged;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_model() -> TokenizerModel {
        let corpus = "the cat sat on the mat. the discomfort of the cat was great discomfort. \
                      comfort and discomfort, jags and bags and tags 1000 2024";
        train_bpe(&corpus.repeat(3), 340, 4).unwrap()
    }

    #[test]
    fn aaaa_learns_aa_merge() {
        let model = train_bpe("aaaa", 270, 4).unwrap();
        let aa = model.token_id("aa").expect("aa merge present");
        assert_eq!(model.merges()[0], (model.byte_token(b'a'), model.byte_token(b'a')));
        assert_eq!(aa as usize, 4 + 4 + 256);
        // "aaaa" collapses after two merges; the target cannot be reached.
        assert_eq!(model.vocab_size(), 266);
        assert!(model.token_id("aaaa").is_some());
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(matches!(train_bpe("", 400, 4), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn training_is_deterministic() {
        let a = small_model();
        let b = small_model();
        assert_eq!(a.to_text(), b.to_text());
    }

    #[test]
    fn ties_broken_lexicographically() {
        // Every pair occurs once; the smallest pair ("a","b") goes first.
        let model = train_bpe("dcab", 265, 0).unwrap();
        assert_eq!(model.merges()[0], (model.byte_token(b'a'), model.byte_token(b'b')));
    }

    #[test]
    fn specials_render_bracketed() {
        let m = small_model();
        assert_eq!(m.decode(&[MASK]).unwrap(), "<MASK>");
        assert_eq!(m.decode(&[m.sentinel(2).unwrap()]).unwrap(), "<MASK_2>");
        let err = m.decode(&[5, m.vocab_size() as TokenId]).unwrap_err();
        assert!(matches!(err, Error::TokenOutOfRange { position: 1, .. }));
    }

    #[test]
    fn empty_text_encodes_empty() {
        assert!(small_model().encode("").is_empty());
    }

    #[test]
    fn spaced_word_starts_with_marker() {
        let m = small_model();
        let ids = m.encode(" discomfort");
        assert!(m.has_marker(ids[0]));
        assert!(m.token_string(ids[0]).unwrap().starts_with(WHITESPACE_MARKER));
        assert_eq!(m.decode(&m.encode(" cat")).unwrap(), " cat");
    }

    #[test]
    fn word_forms_variants() {
        let m = small_model();
        let forms = m.word_forms("discomfort").unwrap();
        assert_eq!(m.decode(&forms.spaced).unwrap(), " discomfort");
        assert_eq!(m.decode(&forms.bare).unwrap(), "discomfort");
        assert_eq!(m.decode(&forms.capitalized).unwrap(), " Discomfort");
        assert_eq!(m.decode(&forms.uppercase).unwrap(), " DISCOMFORT");
        assert!(!m.has_marker(forms.bare[0]));
        assert!(m.word_forms("dis comfort").is_err());
        assert!(m.word_forms("").is_err());

        let a = TokenizerModel::bytes_only(4).word_forms("a").unwrap();
        assert_eq!(a.bare.len(), 1);
        assert!(a.k() >= 1);

        let jags = m.word_forms("jags").unwrap();
        assert_eq!(jags.k(), m.encode(" jags").len());
    }

    #[test]
    fn text_format_roundtrip() {
        let m = small_model();
        let text = m.to_text();
        assert!(text.starts_with(&format!("BPE1 {} 4\n", m.vocab_size())));
        assert_eq!(TokenizerModel::from_text(&text).unwrap(), m);
        assert!(TokenizerModel::from_text("BPE2 300 4").is_err());
    }

    #[test]
    fn merges_never_produce_specials() {
        let m = small_model();
        for id in 0..m.vocab_size() as TokenId {
            if !m.is_special(id) {
                assert!(m.encode_bytes(m.piece(id).unwrap()).iter().all(|&t| !m.is_special(t)));
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn roundtrip_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let m = small_model();
            let ids = m.encode_bytes(&bytes);
            prop_assert!(ids.iter().all(|&t| !m.is_special(t)));
            prop_assert_eq!(m.decode_bytes(&ids).unwrap(), bytes);
        }

        #[test]
        fn marker_consistency(word in "[a-zA-Z]{1,12}") {
            let m = small_model();
            let spaced = m.encode(&format!(" {}", word));
            prop_assert!(m.has_marker(spaced[0]));
            prop_assert!(!m.has_marker(m.encode(&word)[0]));
        }
    }
}
