use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SLOT: &str = "{label}";

/// Instruction pattern with a single `{label}` slot and one phrase per label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub pattern: String,
    pub label_phrases: BTreeMap<String, String>,
}

impl PromptTemplate {
    pub fn new(
        pattern: impl Into<String>,
        label_phrases: BTreeMap<String, String>,
    ) -> Result<Self> {
        let t = Self {
            pattern: pattern.into(),
            label_phrases,
        };
        t.validate()?;
        Ok(t)
    }

    /// Template whose phrase for each label is the label itself.
    pub fn identity(pattern: impl Into<String>, labels: &[&str]) -> Result<Self> {
        let phrases = labels
            .iter()
            .map(|l| (l.to_string(), l.to_string()))
            .collect();
        Self::new(pattern, phrases)
    }

    pub fn validate(&self) -> Result<()> {
        let slots = self.pattern.matches(SLOT).count();
        if slots != 1 {
            return Err(Error::Config(format!(
                "template pattern must contain exactly one {SLOT} slot, found {slots}"
            )));
        }
        if self.label_phrases.is_empty() {
            return Err(Error::Config("template declares no labels".into()));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text)?;
        t.validate()?;
        Ok(t)
    }

    pub fn labels(&self) -> Vec<String> {
        self.label_phrases.keys().cloned().collect()
    }

    /// Substitutes the label's phrase into the pattern, keeping everything
    /// around the slot (trailing colon and whitespace) verbatim.
    pub fn render(&self, label: &str) -> Result<String> {
        let phrase = self
            .label_phrases
            .get(label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))?;
        Ok(self.pattern.replacen(SLOT, phrase, 1))
    }

    pub fn spam() -> Self {
        Self::identity("write a {label} e-mail:", &["spam", "non-spam"]).expect("valid builtin")
    }

    pub fn swmh() -> Self {
        Self::identity(
            "write a post to the {label} community:",
            &[
                "anxiety",
                "bipolar",
                "depression",
                "offmychest",
                "suicidewatch",
            ],
        )
        .expect("valid builtin")
    }

    pub fn thumbs_up() -> Self {
        Self::identity(
            "write a {label} negative app review: ",
            &["mild", "notable", "concerning", "serious", "hot"],
        )
        .expect("valid builtin")
    }

    pub fn webmd() -> Self {
        Self::identity(
            "write a {label} medicine review: ",
            &["terrible", "poor", "neutral", "good", "great"],
        )
        .expect("valid builtin")
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "spam" => Some(Self::spam()),
            "swmh" => Some(Self::swmh()),
            "thumbs-up" | "thumbs_up" | "thumbsup" => Some(Self::thumbs_up()),
            "webmd" => Some(Self::webmd()),
            _ => None,
        }
    }
}
