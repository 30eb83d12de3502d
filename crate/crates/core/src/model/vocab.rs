use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
pub const SEP: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<eos>", "<unk>", "<sep>"];

/// Whitespace-token vocabulary with reserved ids 0..=3 for
/// pad / end-of-sequence / unknown / instruction separator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Data(
                "vocabulary must start with the four reserved tokens".into(),
            ));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl Vocabulary {
    /// Every whitespace token seen at least once, in sorted order after the
    /// reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<&str> = texts
            .into_iter()
            .flat_map(str::split_whitespace)
            .filter(|w| !SPECIALS.contains(w))
            .collect();
        let tokens: Vec<String> = SPECIALS
            .iter()
            .copied()
            .chain(words)
            .map(str::to_string)
            .collect();
        Self::try_from(tokens).expect("fresh vocabulary is well formed")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens
            .get(id)
            .map(String::as_str)
            .unwrap_or(SPECIALS[UNK])
    }

    pub fn encode_words(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    /// Joins tokens with single spaces, stopping at end-of-sequence and
    /// skipping padding and separators.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != SEP)
            .map(|&id| self.token(id))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_lookup() {
        let v = Vocabulary::build(["b a", "c a"]);
        assert_eq!(v.len(), 7);
        assert_eq!(v.token(PAD), "<pad>");
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.decode(&[4, 5, EOS, 6]), "a b");
    }

    #[test]
    fn persists_as_json_array() {
        let v = Vocabulary::build(["x y"]);
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(json, r#"["<pad>","<eos>","<unk>","<sep>","x","y"]"#);
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x"]"#).is_err());
    }
}
