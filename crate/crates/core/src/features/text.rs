//! Text cleaning, tokenization and the word vocabulary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{PAD_ID, UNK_ID};

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

const STRIPPED: &[char] = &[
    '.', ',', '?', '!', ';', ':', '"', '\'', '(', ')', '\u{2018}', '\u{2019}', '\u{201c}',
    '\u{201d}',
];
const DASHES: &[char] = &['\u{2014}', '\u{2013}'];

/// Lowercases, removes punctuation and splits on whitespace. Apostrophes are
/// dropped in place, so "don't" becomes "dont". Dashes separate words.
pub fn clean_and_tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| !STRIPPED.contains(c))
        .map(|c| if DASHES.contains(&c) { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// Token ↔ id map with [`PAD_ID`] and [`UNK_ID`] reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds from an ordered token list that does not contain the reserved
    /// entries.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()];
        all.extend(tokens.into_iter().map(Into::into));
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= UNK_ID + 1
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[UNK_ID + 1..]
    }

    /// One `token<TAB>id` line per entry, reserved entries included.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            let _ = writeln!(out, "{t}\t{i}");
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut words = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let parse_err = |detail: &str| Error::Parse {
                line: n + 1,
                detail: detail.to_owned(),
            };
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| parse_err("expected token<TAB>id"))?;
            let id: usize = id.parse().map_err(|_| parse_err("id is not an integer"))?;
            if id != n {
                return Err(parse_err("ids must be consecutive from 0"));
            }
            match n {
                PAD_ID if tok != PAD_TOKEN => return Err(parse_err("id 0 must be <pad>")),
                UNK_ID if tok != UNK_TOKEN => return Err(parse_err("id 1 must be <unk>")),
                PAD_ID | UNK_ID => {}
                _ => words.push(tok.to_owned()),
            }
        }
        Self::from_tokens(words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tsv(&text)
    }
}

/// Counts tokens over the corpus and assigns ids by descending frequency,
/// ties broken by token order. Tokens seen fewer than `min_count` times are
/// left out and encode to UNK.
pub fn build_vocab<I, S>(texts: I, min_count: usize) -> Vocab
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for tok in clean_and_tokenize(text.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_count && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(entries.into_iter().map(|(t, _)| t)).expect("counted tokens are unique")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &[&str]) -> Vec<String> {
        s.iter().map(|t| t.to_string()).collect()
    }

    #[test]
    fn tokenizes_question_examples() {
        assert_eq!(
            clean_and_tokenize("Did you attend the meeting?"),
            toks(&["did", "you", "attend", "the", "meeting"])
        );
        assert_eq!(
            clean_and_tokenize("any other questions?"),
            toks(&["any", "other", "questions"])
        );
        assert!(clean_and_tokenize("").is_empty());
    }

    #[test]
    fn contractions_and_dashes() {
        assert_eq!(
            clean_and_tokenize("I don't know"),
            toks(&["i", "dont", "know"])
        );
        assert_eq!(
            clean_and_tokenize("well\u{2014}maybe (later)!"),
            toks(&["well", "maybe", "later"])
        );
    }

    #[test]
    fn vocab_ids_follow_frequency_then_token() {
        let v = build_vocab(["a b", "a"], 1);
        assert_eq!(v.id("a"), 2);
        assert_eq!(v.id("b"), 3);
        assert_eq!(v.encode(&["c"]), vec![UNK_ID]);
        assert_eq!(v.len(), 4);
        let v2 = build_vocab(["a b", "a"], 1);
        assert_eq!(v, v2);
        let tie = build_vocab(["z y x"], 1);
        assert_eq!(tie.words(), &toks(&["x", "y", "z"])[..]);
    }

    #[test]
    fn min_count_drops_rare_tokens() {
        let v = build_vocab(["a b", "a"], 2);
        assert_eq!(v.words(), &toks(&["a"])[..]);
        assert_eq!(v.id("b"), UNK_ID);
    }

    #[test]
    fn tsv_round_trip() {
        let v = build_vocab(["the cat sat", "the dog"], 1);
        let text = v.to_tsv();
        assert!(text.starts_with("<pad>\t0\n<unk>\t1\nthe\t2\n"));
        assert_eq!(Vocab::from_tsv(&text).unwrap(), v);
        assert!(matches!(
            Vocab::from_tsv("<pad>\t0\n<unk>\t1\nx\t5\n"),
            Err(Error::Parse { line: 3, .. })
        ));
    }

    proptest! {
        #[test]
        fn tokenizer_is_idempotent(s in "[A-Za-z ,.?!'();:\"-]{0,60}") {
            let once = clean_and_tokenize(&s);
            let twice = clean_and_tokenize(&once.join(" "));
            prop_assert_eq!(once, twice);
        }
    }
}
