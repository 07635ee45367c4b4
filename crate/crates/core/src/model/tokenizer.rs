//! Closed-vocabulary word-level tokenizer.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const UNK: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;

const RESERVED: [&str; 7] = ["<unk>", "<bos>", "<eos>", ".", "!", "?", "\n"];

/// Words whose trailing period does not end a sentence.
pub const ABBREVIATIONS: [&str; 10] = [
    "e.g.", "i.e.", "etc.", "vs.", "mr.", "mrs.", "dr.", "st.", "approx.", "no.",
];

const SPLIT_PUNCT: [char; 7] = ['.', ',', '!', '?', ';', ':', ')'];

#[derive(Debug, Clone, PartialEq)]
pub struct Tokenizer {
    vocab: HashMap<String, TokenId>,
    words: Vec<String>,
}

impl Tokenizer {
    /// Builds a vocabulary from texts, assigning IDs in first-seen order after the reserved set.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self::from_words(std::iter::empty::<&str>());
        for text in texts {
            for piece in split_pieces(text) {
                tok.insert(&piece);
            }
        }
        tok
    }

    pub fn from_words<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tok = Self {
            vocab: HashMap::new(),
            words: Vec::new(),
        };
        for w in RESERVED {
            tok.insert(w);
        }
        for w in words {
            tok.insert(w);
        }
        tok
    }

    fn insert(&mut self, word: &str) {
        if !self.vocab.contains_key(word) {
            let id = self.words.len() as TokenId;
            self.vocab.insert(word.to_string(), id);
            self.words.push(word.to_string());
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.vocab.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        split_pieces(text)
            .iter()
            .map(|p| self.vocab.get(p.as_str()).copied().unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == EOS || t == BOS {
                continue;
            }
            push_word(&mut out, self.word(t));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let ordered: std::collections::BTreeMap<&str, TokenId> =
            self.vocab.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        Ok(serde_json::to_string_pretty(&ordered)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let vocab: HashMap<String, TokenId> = serde_json::from_str(json)?;
        let mut words = vec![String::new(); vocab.len()];
        for (w, &id) in &vocab {
            let slot = words
                .get_mut(id as usize)
                .ok_or_else(|| Error::format("vocabulary", format!("id {id} out of range")))?;
            if !slot.is_empty() {
                return Err(Error::format("vocabulary", format!("duplicate id {id}")));
            }
            *slot = w.clone();
        }
        for (id, w) in RESERVED.iter().enumerate() {
            if words.get(id).map(String::as_str) != Some(*w) {
                return Err(Error::format("vocabulary", format!("reserved id {id} must be {w:?}")));
            }
        }
        Ok(Self { vocab, words })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Appends a word to detokenized text using the spacing rules of [`Tokenizer::detokenize`].
pub fn push_word(out: &mut String, word: &str) {
    let attach = word == "\n"
        || out.is_empty()
        || out.ends_with('\n')
        || (word.len() == 1 && SPLIT_PUNCT.contains(&word.chars().next().unwrap_or(' ')));
    if !attach {
        out.push(' ');
    }
    out.push_str(word);
}

fn split_pieces(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for (i, line) in text.split('\n').enumerate() {
        if i > 0 {
            out.push("\n".to_string());
        }
        for chunk in line.split_whitespace() {
            if ABBREVIATIONS.contains(&chunk.to_lowercase().as_str()) {
                out.push(chunk.to_string());
                continue;
            }
            let mut word = chunk;
            let mut trailing = Vec::new();
            while let Some(c) = word.chars().last() {
                if SPLIT_PUNCT.contains(&c) && word.len() > 1 && !is_enumerator(word) {
                    trailing.push(c.to_string());
                    word = &word[..word.len() - c.len_utf8()];
                } else {
                    break;
                }
            }
            out.push(word.to_string());
            out.extend(trailing.into_iter().rev());
        }
    }
    out
}

// "(1)" style list markers stay whole.
fn is_enumerator(word: &str) -> bool {
    word.starts_with('(') && word.ends_with(')') && word[1..word.len() - 1].chars().all(|c| c.is_ascii_digit())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_in_vocabulary_text() {
        let text = "Verona was founded in 1203. It is red, e.g. crimson!\nNext line?";
        let tok = Tokenizer::from_texts([text]);
        let ids = tok.tokenize(text);
        assert!(!ids.contains(&UNK));
        assert_eq!(tok.detokenize(&ids), text);
    }

    #[test]
    fn reserved_ids_are_fixed() {
        let tok = Tokenizer::from_texts(["hello world."]);
        assert_eq!(tok.id("<eos>"), Some(EOS));
        assert_eq!(tok.id("."), Some(3));
        assert_eq!(tok.id("\n"), Some(6));
        assert_eq!(tok.tokenize("unseen"), vec![UNK]);
    }

    #[test]
    fn enumerators_stay_whole() {
        let tok = Tokenizer::from_texts(["statements: (1) a (2) b"]);
        let ids = tok.tokenize("statements: (1) a (2) b");
        assert_eq!(tok.word(ids[2]), "(1)");
        assert_eq!(tok.detokenize(&ids), "statements: (1) a (2) b");
    }

    #[test]
    fn json_round_trip() {
        let tok = Tokenizer::from_texts(["a b c."]);
        let back = Tokenizer::from_json(&tok.to_json().unwrap()).unwrap();
        assert_eq!(back.tokenize("c b a."), tok.tokenize("c b a."));
        assert_eq!(back.vocab_size(), tok.vocab_size());
    }
}
