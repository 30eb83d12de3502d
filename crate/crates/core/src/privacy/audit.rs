//! Group privacy and per-author contribution auditing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::LabeledText;
use crate::error::{Error, Result};

use super::budget::{epsilon_serde, PrivacyBudget};

/// Degrades an (ε, δ) guarantee to groups of `k` records:
/// `(k·ε, min(1, k·e^{(k−1)ε}·δ))`. Non-private budgets pass through.
pub fn group_privacy(budget: PrivacyBudget, group_size: usize) -> Result<PrivacyBudget> {
    if group_size < 1 {
        return Err(Error::Domain("group size must be at least 1".into()));
    }
    if !budget.is_private() {
        return Ok(budget);
    }
    if group_size == 1 {
        return Ok(budget);
    }
    let k = group_size as f64;
    let delta = (k * ((k - 1.0) * budget.epsilon).exp() * budget.delta).min(1.0);
    Ok(PrivacyBudget {
        epsilon: k * budget.epsilon,
        delta,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorCount {
    pub author: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditReport {
    pub k_max: usize,
    pub authors_known: bool,
    pub offending_authors: Vec<AuthorCount>,
    /// Records without an author id.
    pub missing_author_ids: usize,
}

/// Counts records per author.
///
/// When some records lack an author id the report is marked
/// `authors_known = false`; `k_max` is then a lower bound taken over the
/// records that do carry ids.
pub fn audit_author_contributions(dataset: &[LabeledText]) -> AuditReport {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut missing = 0;
    for record in dataset {
        match record.author_id.as_deref() {
            Some(id) => *counts.entry(id).or_default() += 1,
            None => missing += 1,
        }
    }
    let k_max = counts.values().copied().max().unwrap_or(1).max(1);
    let mut offending_authors: Vec<AuthorCount> = counts
        .into_iter()
        .filter(|(_, c)| *c > 1)
        .map(|(a, c)| AuthorCount {
            author: a.to_string(),
            count: c,
        })
        .collect();
    offending_authors.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.author.cmp(&b.author)));
    AuditReport {
        k_max,
        authors_known: missing == 0,
        offending_authors,
        missing_author_ids: missing,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectiveBudget {
    pub budget: PrivacyBudget,
    pub group_size: usize,
    /// False when author ids were missing, so the group size is unverified.
    pub verifiable: bool,
}

pub fn effective_budget(claimed: PrivacyBudget, report: &AuditReport) -> Result<EffectiveBudget> {
    Ok(EffectiveBudget {
        budget: group_privacy(claimed, report.k_max)?,
        group_size: report.k_max,
        verifiable: report.authors_known,
    })
}

/// The JSON document written as `audit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDocument {
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
    pub k_max: usize,
    pub authors_known: bool,
    pub offending_authors: Vec<AuthorCount>,
    #[serde(with = "epsilon_serde")]
    pub claimed_epsilon: f64,
    pub claimed_delta: f64,
    pub missing_author_ids: usize,
    pub verifiable: bool,
}

impl AuditDocument {
    pub fn new(claimed: PrivacyBudget, report: &AuditReport, effective: &EffectiveBudget) -> Self {
        Self {
            epsilon: effective.budget.epsilon,
            delta: effective.budget.delta,
            k_max: report.k_max,
            authors_known: report.authors_known,
            offending_authors: report.offending_authors.clone(),
            claimed_epsilon: claimed.epsilon,
            claimed_delta: claimed.delta,
            missing_author_ids: report.missing_author_ids,
            verifiable: effective.verifiable,
        }
    }
}
