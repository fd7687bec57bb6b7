use std::collections::HashMap;
use std::path::Path;

use crate::data::lexicon;
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const OOV_ID: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const OOV_TOKEN: &str = "[UNK]";

/// Token list where the line number is the id; ids 0 and 1 are padding and out-of-vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens = vec![PAD_TOKEN.to_string(), OOV_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), PAD_ID);
        index.insert(OOV_TOKEN.to_string(), OOV_ID);
        for w in words {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Validation(format!("invalid vocabulary token {w:?}")));
            }
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len());
            tokens.push(w);
        }
        Ok(Vocabulary { tokens, index })
    }

    /// Vocabulary covering every word the synthetic generator emits.
    pub fn builtin() -> Self {
        Vocabulary::from_tokens(lexicon::all_words()).expect("lexicon words are valid tokens")
    }

    /// Reads a token-per-line file. The first two lines must be the reserved tokens.
    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < 2 || lines[0] != PAD_TOKEN || lines[1] != OOV_TOKEN {
            return Err(Error::schema(
                "vocabulary",
                format!("lines 0 and 1 must be {PAD_TOKEN} and {OOV_TOKEN}"),
            ));
        }
        let words: Vec<String> = lines[2..].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::from_tokens(words)?;
        if v.len() != lines.len() {
            return Err(Error::schema("vocabulary", "duplicate tokens"));
        }
        Ok(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(OOV_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(OOV_TOKEN, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Lower-cases and splits on whitespace, separating punctuation into its own
/// tokens (apostrophes inside words are kept).
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_ascii_punctuation() && ch != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    pub ids: Vec<usize>,
    pub words: Vec<String>,
    /// Token count before truncation.
    pub original_len: usize,
    pub truncated: bool,
}

pub fn tokenize(raw_text: &str, vocab: &Vocabulary, max_len: usize) -> Result<Tokenized> {
    if raw_text.trim().is_empty() {
        return Err(Error::Validation("command text is empty".into()));
    }
    if max_len == 0 {
        return Err(Error::Config("max token length must be positive".into()));
    }
    let mut words = split_words(raw_text);
    let original_len = words.len();
    let truncated = original_len > max_len;
    words.truncate(max_len);
    let ids = words.iter().map(|w| vocab.id(w)).collect();
    Ok(Tokenized {
        ids,
        words,
        original_len,
        truncated,
    })
}

pub fn detokenize(ids: &[usize], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&i| i != PAD_ID)
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Pads a batch of id sequences to the longest one; returns ids and liveness masks.
pub fn pad_batch(seqs: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<bool>>) {
    let max = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut ids = s.clone();
            ids.resize(max, PAD_ID);
            let mask = (0..max).map(|i| i < s.len()).collect();
            (ids, mask)
        })
        .unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn splits_punctuation() {
        let v = Vocabulary::builtin();
        let t = tokenize("Park here.", &v, 60).unwrap();
        assert_eq!(t.words, vec!["park", "here", "."]);
        assert_eq!(t.ids[0], v.id("park"));
        assert_ne!(t.ids[0], OOV_ID);
    }

    #[test]
    fn truncates_to_max_len() {
        let v = Vocabulary::builtin();
        let text = vec!["car"; 70].join(" ");
        let t = tokenize(&text, &v, 60).unwrap();
        assert_eq!(t.ids.len(), 60);
        assert!(t.truncated);
        assert_eq!(t.original_len, 70);
    }

    #[test]
    fn oov_round_trip() {
        let v = Vocabulary::builtin();
        let t = tokenize("zeppelin", &v, 60).unwrap();
        assert_eq!(t.ids, vec![OOV_ID]);
        assert_eq!(detokenize(&t.ids, &v), OOV_TOKEN);
    }

    #[test]
    fn empty_text_rejected() {
        assert!(matches!(
            tokenize("   ", &Vocabulary::builtin(), 60),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let v = Vocabulary::builtin();
        let back = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(Vocabulary::from_text("car\n[UNK]\n").is_err());
    }

    #[test]
    fn padding_masks() {
        let (ids, masks) = pad_batch(&[vec![5, 6, 7], vec![8]]);
        assert_eq!(ids[1], vec![8, PAD_ID, PAD_ID]);
        assert_eq!(masks[1], vec![true, false, false]);
    }
}
