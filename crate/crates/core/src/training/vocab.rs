use std::collections::HashMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::TrainError;

pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";

/// Lowercases, splits on whitespace and drops every token that contains a
/// non-alphabetic character.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(str::to_lowercase)
        .filter(|t| t.chars().all(char::is_alphabetic))
        .collect()
}

/// Token ↔ id bijection. Words come first, ordered by descending corpus
/// frequency then ascending token; `<unk>`, `<bos>` and `<eos>` follow.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    threshold: usize,
}

impl Vocabulary {
    /// Words occurring fewer than `threshold` times map to `<unk>`.
    pub fn build<'a>(
        captions: impl IntoIterator<Item = &'a str>,
        threshold: usize,
    ) -> Result<Self, TrainError> {
        if threshold == 0 {
            return Err(TrainError::Contract(
                "vocabulary threshold must be at least 1".into(),
            ));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut seen_any = false;
        for caption in captions {
            seen_any = true;
            for tok in tokenize(caption) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if !seen_any {
            return Err(TrainError::Contract(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, n)| *n >= threshold)
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = words.into_iter().map(|(w, _)| w).collect();
        Self::from_tokens(tokens, threshold)
    }

    /// Rebuilds from an ordered word list (specials are appended).
    pub fn from_tokens(words: Vec<String>, threshold: usize) -> Result<Self, TrainError> {
        let mut tokens = words;
        tokens.retain(|t| t != UNK && t != BOS && t != EOS);
        tokens.extend([UNK, BOS, EOS].map(String::from));
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || index.insert(t.clone(), i).is_some() {
                return Err(TrainError::Contract(format!(
                    "invalid or duplicate vocabulary token {t:?}"
                )));
            }
        }
        Ok(Self {
            tokens,
            index,
            threshold,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    /// Regular words, without the special tokens.
    pub fn words(&self) -> &[String] {
        &self.tokens[..self.tokens.len() - 3]
    }

    pub fn unk(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn bos(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_special(&self, id: usize) -> bool {
        id >= self.unk()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids of a caption, unknown words as `<unk>`, cut to `max_words`.
    pub fn encode(&self, caption: &str, max_words: usize) -> Vec<usize> {
        tokenize(caption)
            .iter()
            .take(max_words)
            .map(|t| self.id(t).unwrap_or(self.unk()))
            .collect()
    }

    /// Space-joined tokens, stopping at `<eos>` and skipping `<bos>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .filter(|&&i| i != self.bos())
            .map(|&i| self.token(i).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    words: Vec<String>,
    threshold: usize,
}

impl Serialize for Vocabulary {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        VocabularyFile {
            words: self.words().to_vec(),
            threshold: self.threshold,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Vocabulary {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let file = VocabularyFile::deserialize(d)?;
        Vocabulary::from_tokens(file.words, file.threshold).map_err(serde::de::Error::custom)
    }
}
