//! Corpus ingestion, subword vocabulary, tokenization and sentence-pair
//! construction.
//!
//! Corpus files are UTF-8 text: documents are separated by blank lines and
//! sentences by newlines. Vocabulary files hold one token per line; the line
//! number is the id and the first five lines are the reserved tokens.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];
/// First id available to ordinary tokens.
pub const FIRST_REGULAR_ID: u32 = SPECIAL_TOKENS.len() as u32;
/// Prefix carried by every subword that does not start a pre-token.
pub const CONTINUATION: &str = "##";

/// Upper bound on draws in [`make_nsp_pair`] before giving up.
pub const MAX_PAIR_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from a full token list whose first entries are the
    /// reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..SPECIAL_TOKENS.len()] != SPECIAL_TOKENS {
            return Err(Error::Invalid(format!("vocabulary must start with {SPECIAL_TOKENS:?}")));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Invalid(format!("invalid vocabulary token {t:?} at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: u32) -> bool {
        id < FIRST_REGULAR_ID
    }

    pub fn to_file_string(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_file_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect()).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }
}

/// Documents made of sentences.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub docs: Vec<Vec<String>>,
}

impl Corpus {
    pub fn parse(text: &str) -> Self {
        let mut docs = Vec::new();
        let mut cur: Vec<String> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                if !cur.is_empty() {
                    docs.push(std::mem::take(&mut cur));
                }
            } else {
                cur.push(line.to_string());
            }
        }
        if !cur.is_empty() {
            docs.push(cur);
        }
        Self { docs }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }

    pub fn sentences(&self) -> impl Iterator<Item = &str> {
        self.docs.iter().flatten().map(String::as_str)
    }

    pub fn num_sentences(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }

    /// Tokenizes every sentence.
    pub fn encode(&self, vocab: &Vocab) -> EncodedCorpus {
        EncodedCorpus {
            docs: self.docs.iter().map(|d| d.iter().map(|s| encode(s, vocab)).collect()).collect(),
        }
    }
}

/// A corpus after tokenization: `docs[d][s]` is the id list of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedCorpus {
    pub docs: Vec<Vec<Vec<u32>>>,
}

impl EncodedCorpus {
    pub fn sentences(&self) -> impl Iterator<Item = &Vec<u32>> {
        self.docs.iter().flatten()
    }
}

/// Splits on whitespace, then isolates every punctuation character.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if is_punct(ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

fn is_punct(ch: char) -> bool {
    ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace() && !ch.is_ascii())
}

fn initial_symbols(word: &str) -> Vec<String> {
    word.chars()
        .enumerate()
        .map(|(i, ch)| if i == 0 { ch.to_string() } else { format!("{CONTINUATION}{ch}") })
        .collect()
}

fn merge_symbols(left: &str, right: &str) -> String {
    format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(right))
}

/// Frequency-driven subword vocabulary.
///
/// Pre-tokens start as characters (non-initial ones carry `##`). The
/// character alphabet enters in descending frequency; afterwards the most
/// frequent adjacent pair is merged repeatedly until `target_size` entries
/// exist, no pair remains, or the best pair occurs fewer than `min_freq`
/// times. Ties go to the lexicographically smallest pair.
pub fn build_vocab<'a, I>(texts: I, target_size: usize, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if target_size <= SPECIAL_TOKENS.len() {
        return Err(Error::Invalid(format!(
            "target vocabulary size {target_size} must exceed the {} reserved tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
    for text in texts {
        for w in pretokenize(text) {
            *word_counts.entry(w).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut words: Vec<(Vec<String>, usize)> =
        word_counts.into_iter().map(|(w, c)| (initial_symbols(&w), c)).collect();

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut present: HashSet<String> = tokens.iter().cloned().collect();

    let mut alphabet: BTreeMap<&str, usize> = BTreeMap::new();
    for (syms, c) in &words {
        for s in syms {
            *alphabet.entry(s.as_str()).or_default() += c;
        }
    }
    let mut alphabet: Vec<(&str, usize)> = alphabet.into_iter().collect();
    alphabet.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    for (s, _) in alphabet {
        if tokens.len() >= target_size {
            break;
        }
        if present.insert(s.to_string()) {
            tokens.push(s.to_string());
        }
    }

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        let best = pairs
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .filter(|(_, c)| *c >= min_freq.max(1));
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        let merged = merge_symbols(&l, &r);
        for (syms, _) in &mut words {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == l && syms[i + 1] == r {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if present.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}

/// Greedy longest-match segmentation of one pre-token. Characters with no
/// matching piece become `[UNK]`.
pub fn encode_word(word: &str, vocab: &Vocab, out: &mut Vec<u32>) {
    let chars: Vec<char> = word.chars().collect();
    let mut start = 0;
    let mut piece = String::new();
    while start < chars.len() {
        let mut found = None;
        for end in (start + 1..=chars.len()).rev() {
            piece.clear();
            if start > 0 {
                piece.push_str(CONTINUATION);
            }
            piece.extend(&chars[start..end]);
            if let Some(id) = vocab.id(&piece) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                out.push(id);
                start = end;
            }
            None => {
                out.push(UNK);
                start += 1;
            }
        }
    }
}

/// Token ids of `text` without special tokens.
pub fn encode(text: &str, vocab: &Vocab) -> Vec<u32> {
    let mut out = Vec::new();
    for w in pretokenize(text) {
        encode_word(&w, vocab, &mut out);
    }
    out
}

/// Joins continuation pieces onto their predecessor and separates
/// pre-tokens with single spaces.
pub fn decode(ids: &[u32], vocab: &Vocab) -> String {
    let mut out = String::new();
    for &id in ids {
        let tok = vocab.token(id).unwrap_or(SPECIAL_TOKENS[UNK as usize]);
        match tok.strip_prefix(CONTINUATION) {
            Some(rest) if !out.is_empty() => out.push_str(rest),
            _ => {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
    }
    out
}

/// `[CLS] A [SEP]` or `[CLS] A [SEP] B [SEP]` with segment ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
}

impl TokenSequence {
    pub fn single(a: &[u32]) -> Self {
        let mut ids = Vec::with_capacity(a.len() + 2);
        ids.push(CLS);
        ids.extend_from_slice(a);
        ids.push(SEP);
        let segment_ids = vec![0; ids.len()];
        Self { ids, segment_ids }
    }

    pub fn pair(a: &[u32], b: &[u32]) -> Self {
        let mut s = Self::single(a);
        s.ids.extend_from_slice(b);
        s.ids.push(SEP);
        s.segment_ids.resize(s.ids.len(), 1);
        s
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks the structural invariants.
    pub fn validate(&self, max_len: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("malformed token sequence: {m}")));
        if self.ids.len() != self.segment_ids.len() {
            return bad("ids and segment ids differ in length");
        }
        if self.ids.len() > max_len {
            return Err(Error::Overlong { len: self.ids.len(), max_len });
        }
        if self.ids.first() != Some(&CLS) || self.ids.last() != Some(&SEP) {
            return bad("must start with [CLS] and end with [SEP]");
        }
        if self.ids.iter().any(|&i| i == PAD || i == MASK) {
            return bad("contains [PAD] or [MASK]");
        }
        if self.segment_ids.iter().any(|&s| s > 1) || self.segment_ids.windows(2).any(|w| w[1] < w[0]) {
            return bad("segment ids must be a run of 0s followed by 1s");
        }
        let seps: Vec<usize> = (0..self.ids.len()).filter(|&i| self.ids[i] == SEP).collect();
        let boundary = self.segment_ids.iter().position(|&s| s == 1);
        match boundary {
            None if seps.len() == 1 => Ok(()),
            Some(b) if seps.len() == 2 && seps[0] + 1 == b => Ok(()),
            _ => bad("segments must each end with [SEP]"),
        }
    }
}

/// Removes tokens from the end of the longer segment until the assembled
/// pair fits in `max_len`.
fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, max_len: usize) {
    while a.len() + b.len() + 3 > max_len {
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// Draws a next-sentence-prediction pair. With probability 0.5 segment B is
/// the sentence following A; otherwise it comes from a different document.
pub fn make_nsp_pair<R: Rng + ?Sized>(
    docs: &EncodedCorpus,
    rng: &mut R,
    max_len: usize,
) -> Result<(TokenSequence, bool)> {
    if max_len < 5 {
        return Err(Error::Invalid(format!("max_len {max_len} cannot hold a sentence pair")));
    }
    let n_docs = docs.docs.len();
    if n_docs == 0 {
        return Err(Error::EmptyCorpus);
    }
    let is_next = rng.random_bool(0.5);
    for _ in 0..MAX_PAIR_ATTEMPTS {
        let d = rng.random_range(0..n_docs);
        let doc = &docs.docs[d];
        if doc.len() < 2 {
            continue;
        }
        let i = rng.random_range(0..doc.len() - 1);
        let b = if is_next {
            &doc[i + 1]
        } else {
            if n_docs < 2 {
                continue;
            }
            let mut od = rng.random_range(0..n_docs - 1);
            if od >= d {
                od += 1;
            }
            let other = &docs.docs[od];
            if other.len() < 2 {
                continue;
            }
            &other[rng.random_range(0..other.len())]
        };
        let a = &doc[i];
        if a.is_empty() || b.is_empty() {
            continue;
        }
        let (mut a, mut b) = (a.clone(), b.clone());
        truncate_pair(&mut a, &mut b, max_len);
        return Ok((TokenSequence::pair(&a, &b), is_next));
    }
    Err(Error::ResampleExhausted {
        attempts: MAX_PAIR_ATTEMPTS,
        reason: "sentence pairs need at least two documents with two or more non-empty sentences".into(),
    })
}
