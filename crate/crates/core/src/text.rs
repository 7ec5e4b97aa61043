//! Word-level vocabulary and token sequences.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const START: usize = 1;
pub const MASK: usize = 2;
pub const UNK: usize = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[START]", "[MASK]", "[UNK]"];

/// Lowercases and splits into alphanumeric words and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token text joined with single spaces, the form `decode` reproduces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    /// Counts tokens over `corpus` and keeps those seen at least `min_count`
    /// times, ordered by descending count then token text.
    pub fn build<I, S>(corpus: I, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut docs = 0usize;
        for doc in corpus {
            docs += 1;
            for t in tokenize(doc.as_ref()) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !RESERVED.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `token\tid` lines sorted by token.
    pub fn to_tsv(&self) -> String {
        let mut lines: Vec<(&str, usize)> = self.tokens.iter().map(|t| t.as_str()).zip(0..).collect();
        lines.sort();
        lines.iter().map(|(t, i)| format!("{t}\t{i}\n")).collect()
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Validation(format!("vocabulary line {}: missing tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Validation(format!("vocabulary line {}: bad id {id:?}", n + 1)))?;
            entries.push((id, tok.to_string()));
        }
        entries.sort();
        if entries.iter().enumerate().any(|(i, (id, _))| *id != i) {
            return Err(Error::Validation("vocabulary ids are not dense".into()));
        }
        if entries.len() < RESERVED.len() || entries.iter().zip(RESERVED).any(|((_, t), r)| t != r) {
            return Err(Error::Validation("vocabulary lacks the reserved ids".into()));
        }
        Self::from_tokens(entries.into_iter().map(|(_, t)| t).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_tsv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

/// START-prefixed, PAD-suffixed ids with per-position maskability.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub maskable: Vec<bool>,
}

impl TokenSequence {
    /// Number of positions before the PAD suffix.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&t| t == PAD).unwrap_or(self.ids.len())
    }
}

pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Config(format!("max_len must be at least 2, got {max_len}")));
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START);
    ids.extend(tokenize(text).iter().map(|t| vocab.id(t)).take(max_len - 1));
    let maskable = ids.iter().map(|&i| i >= RESERVED.len()).collect::<Vec<_>>();
    let mut maskable = maskable;
    ids.resize(max_len, PAD);
    maskable.resize(max_len, false);
    Ok(TokenSequence { ids, maskable })
}

/// Joins the non-reserved tokens of `ids` with spaces (UNK renders as `[UNK]`).
pub fn decode(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| i != PAD && i != START)
        .filter_map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("Is Edema present in the LEFT lung? yes."),
            ["is", "edema", "present", "in", "the", "left", "lung", "?", "yes", "."]
        );
        assert_eq!(normalize("verdict:  normal."), "verdict : normal .");
    }

    #[test]
    fn vocab_examples() {
        let v = Vocabulary::build(["a a b"], 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);

        let v2 = Vocabulary::build(["a a b"], 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert_eq!(v2.id("b"), UNK);
        let seq = encode("a b", &v2, 8).unwrap();
        assert_eq!(&seq.ids[..3], &[START, 4, UNK]);

        let c = ["x y z x", "z z q"];
        assert_eq!(
            Vocabulary::build(c, 1).unwrap().to_tsv(),
            Vocabulary::build(c, 1).unwrap().to_tsv()
        );
        assert!(matches!(
            Vocabulary::build(Vec::<String>::new(), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ids_follow_count_then_token() {
        let v = Vocabulary::build(["b b c a a"], 1).unwrap();
        assert_eq!([v.id("a"), v.id("b"), v.id("c")], [4, 5, 6]);
    }

    #[test]
    fn tsv_roundtrip() {
        let v = Vocabulary::build(["is edema present ? yes ."], 1).unwrap();
        let tsv = v.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        let mut sorted = lines.clone();
        sorted.sort();
        assert_eq!(lines, sorted);
        assert_eq!(Vocabulary::from_tsv(&tsv).unwrap(), v);
        assert!(Vocabulary::from_tsv("a\t7\n").is_err());
    }

    #[test]
    fn encode_cases() {
        let v = Vocabulary::build(["one two three four five"], 1).unwrap();
        let e = encode("", &v, 6).unwrap();
        assert_eq!(e.ids, vec![START, PAD, PAD, PAD, PAD, PAD]);
        assert!(e.maskable.iter().all(|m| !m));

        let long = encode("one two three four five one two", &v, 4).unwrap();
        assert_eq!(long.ids.len(), 4);
        assert_eq!(long.content_len(), 4);
        assert_eq!(long.maskable, vec![false, true, true, true]);

        let text = "Two ONE five.";
        let s = encode(text, &Vocabulary::build([text], 1).unwrap(), 10).unwrap();
        assert_eq!(decode(&s.ids, &Vocabulary::build([text], 1).unwrap()), normalize(text));
        assert!(encode("x", &v, 1).is_err());
    }

    #[test]
    fn reserved_never_maskable() {
        let v = Vocabulary::build(["a b"], 1).unwrap();
        let s = encode("a zz b [MASK]", &v, 12).unwrap();
        for (id, m) in s.ids.iter().zip(&s.maskable) {
            assert_eq!(*m, *id >= RESERVED.len());
        }
    }
}
