use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const SPECIAL_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Word-level vocabulary; ids 0..3 are the special tokens, the rest are
/// sorted lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens<'a, I: IntoIterator<Item = &'a String>>(tokens: I) -> Self {
        let words: BTreeSet<&str> = tokens
            .into_iter()
            .map(String::as_str)
            .filter(|t| !SPECIAL_TOKENS.contains(t))
            .collect();
        let all: Vec<String> = SPECIAL_TOKENS
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::from_list(all).expect("constructed list is valid")
    }

    /// Rebuilds from an id-ordered list, which must start with the specials.
    pub fn from_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens[..4].iter().zip(SPECIAL_TOKENS).any(|(a, b)| a != b) {
            return Err(Error::Validation(
                "vocabulary must start with <pad> <bos> <eos> <sep>".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| {
                self.id(t.as_ref())
                    .ok_or_else(|| Error::UnknownToken(t.as_ref().to_string()))
            })
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_string)
                    .ok_or_else(|| Error::InvalidArgument(format!("token id {i} outside vocabulary")))
            })
            .collect()
    }

    /// Space-joined rendering that drops special tokens.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIAL_TOKENS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Returns a vocabulary with `extra` tokens merged in, re-sorted.
    pub fn with_extra<S: AsRef<str>>(&self, extra: &[S]) -> Self {
        let merged: Vec<String> = self
            .tokens
            .iter()
            .cloned()
            .chain(extra.iter().map(|s| s.as_ref().to_string()))
            .collect();
        Self::from_tokens(merged.iter())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.tokens).expect("token list serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let tokens: Vec<String> = serde_json::from_str(&s).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_list(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_come_first() {
        let words: Vec<String> = ["b", "a", "<eos>", "a"].iter().map(|s| s.to_string()).collect();
        let v = Vocabulary::from_tokens(&words);
        assert_eq!(v.tokens(), ["<pad>", "<bos>", "<eos>", "<sep>", "a", "b"]);
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<sep>"), Some(SEP));
        assert!(matches!(v.encode(&["c"]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn list_must_start_with_specials() {
        assert!(Vocabulary::from_list(vec!["x".into()]).is_err());
    }
}
