use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{GwqError, Result};

/// Maps text to token ids.
///
/// `Byte` uses raw UTF-8 bytes (vocab 256). `Whitespace` splits on whitespace
/// and keeps the most frequent words; id 0 is reserved for unknown words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Tokenizer {
    Byte,
    Whitespace { vocab: Vec<String> },
}

pub const UNKNOWN_WORD: &str = "<unk>";

impl Tokenizer {
    /// Build a whitespace vocabulary of at most `vocab_size` entries from `text`.
    /// Ties in frequency are broken lexicographically.
    pub fn whitespace_from_corpus(text: &str, vocab_size: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(GwqError::Config(
                "whitespace vocabulary needs room for <unk> and one word".into(),
            ));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for w in text.split_whitespace() {
            *counts.entry(w).or_default() += 1;
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let mut vocab = vec![UNKNOWN_WORD.to_string()];
        vocab.extend(ranked.into_iter().take(vocab_size - 1).map(|(w, _)| w.to_string()));
        Ok(Tokenizer::Whitespace { vocab })
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Tokenizer::Byte => 256,
            Tokenizer::Whitespace { vocab } => vocab.len(),
        }
    }

    /// Encode `text`; every id must fit below `vocab_limit`.
    pub fn encode(&self, text: &str, vocab_limit: usize) -> Result<Vec<u32>> {
        let ids: Vec<u32> = match self {
            Tokenizer::Byte => text.bytes().map(u32::from).collect(),
            Tokenizer::Whitespace { vocab } => {
                let index: HashMap<&str, u32> = vocab
                    .iter()
                    .enumerate()
                    .map(|(i, w)| (w.as_str(), i as u32))
                    .collect();
                text.split_whitespace()
                    .map(|w| index.get(w).copied().unwrap_or(0))
                    .collect()
            }
        };
        if let Some(pos) = ids.iter().position(|&id| id as usize >= vocab_limit) {
            return Err(GwqError::Input(format!(
                "token {} at position {pos} exceeds vocab size {vocab_limit}",
                ids[pos]
            )));
        }
        Ok(ids)
    }

    pub fn to_metadata(&self) -> String {
        serde_json::to_string(self).expect("tokenizer serializes")
    }

    /// A missing entry means the byte tokenizer.
    pub fn from_metadata(value: Option<&str>) -> Result<Self> {
        match value {
            None => Ok(Tokenizer::Byte),
            Some(s) => serde_json::from_str(s)
                .map_err(|e| GwqError::Input(format!("bad `tokenizer` metadata: {e}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_and_limit() {
        assert_eq!(Tokenizer::Byte.encode("Ab", 256).unwrap(), vec![65, 98]);
        assert!(matches!(Tokenizer::Byte.encode("z", 100), Err(GwqError::Input(_))));
    }

    #[test]
    fn whitespace_vocab_is_capped_and_ranked() {
        let t = Tokenizer::whitespace_from_corpus("b a b c b a", 3).unwrap();
        assert_eq!(
            t,
            Tokenizer::Whitespace {
                vocab: vec!["<unk>".into(), "b".into(), "a".into()]
            }
        );
        assert_eq!(t.encode("a c b", 3).unwrap(), vec![2, 0, 1]);
        let back = Tokenizer::from_metadata(Some(&t.to_metadata())).unwrap();
        assert_eq!(back, t);
        assert_eq!(Tokenizer::from_metadata(None).unwrap(), Tokenizer::Byte);
    }
}
