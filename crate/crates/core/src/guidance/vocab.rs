//! Whitespace tokenizer over a fixed vocabulary file (one token per line,
//! line number = id).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Rare token reserved for the personalized subject.
pub const SUBJECT_TOKEN: &str = "sks";

const DEFAULT_TOKENS: &[&str] = &[
    "<pad>", "a", "photo", "of", "person", "sks", "face", "hand", "full", "body", "standing", "in", "clothes",
    "the", "front", "back", "side", "view",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid vocabulary entry {t:?} on line {}", i + 1)));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
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

    pub fn subject_id(&self) -> Option<u32> {
        self.id(SUBJECT_TOKEN)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                let w = w.to_lowercase();
                self.id(&w)
                    .ok_or_else(|| Error::Config(format!("unknown token {w:?}")))
            })
            .collect()
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&i| i as usize >= self.len()) {
            Some(bad) => Err(Error::Domain(format!("token id {bad} outside vocabulary of {}", self.len()))),
            None => Ok(()),
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(|l| l.trim_end_matches('\r').to_string()).filter(|l| !l.is_empty()).collect())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new(DEFAULT_TOKENS.iter().map(|s| s.to_string()).collect()).expect("builtin vocabulary is valid")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip_keeps_ids() {
        let v = Vocabulary::default();
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        assert_eq!(back, v);
        for i in 0..v.len() as u32 {
            assert_eq!(back.id(back.token(i).unwrap()), Some(i));
        }
    }

    #[test]
    fn unknown_tokens_fail() {
        let v = Vocabulary::default();
        assert!(v.tokenize("a photo of zebra").is_err());
        assert_eq!(v.tokenize("A photo of sks person").unwrap().len(), 5);
        assert!(v.check_ids(&[999]).is_err());
    }
}
