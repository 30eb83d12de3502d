//! Corpus ingestion, instruction templates, label balancing, stratified
//! splitting and synthetic toy corpora.

mod template;
mod toy;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};

pub use template::PromptTemplate;
pub use toy::{make_toy_dataset, AuthorPolicy, ToyGrammar, ToySpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub author_id: Option<String>,
}

impl LabeledText {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            label: label.into(),
            author_id: None,
        }
    }
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    text: Option<String>,
    label: Option<String>,
    #[serde(default)]
    author_id: Option<String>,
}

/// Parses a JSONL corpus. Every malformed line is collected and reported.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<LabeledText>> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&content)
}

pub fn parse_jsonl(content: &str) -> Result<Vec<LabeledText>> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                errors.push(LineError {
                    line: line_no,
                    message: format!("invalid JSON: {e}"),
                });
                continue;
            }
        };
        let mut problems = Vec::new();
        match &raw.text {
            None => problems.push("missing \"text\""),
            Some(t) if t.trim().is_empty() => problems.push("empty \"text\""),
            _ => {}
        }
        match &raw.label {
            None => problems.push("missing \"label\""),
            Some(l) if l.is_empty() => problems.push("empty \"label\""),
            _ => {}
        }
        if !problems.is_empty() {
            errors.push(LineError {
                line: line_no,
                message: problems.join(", "),
            });
            continue;
        }
        records.push(LabeledText {
            text: raw.text.unwrap_or_default(),
            label: raw.label.unwrap_or_default(),
            author_id: raw.author_id,
        });
    }
    if errors.is_empty() {
        Ok(records)
    } else {
        Err(Error::Schema(errors))
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Labels in first-appearance order.
pub fn label_set(data: &[LabeledText]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    data.iter()
        .filter(|r| seen.insert(r.label.as_str()))
        .map(|r| r.label.clone())
        .collect()
}

pub fn label_counts(data: &[LabeledText]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in data {
        *counts.entry(r.label.clone()).or_default() += 1;
    }
    counts
}

fn indices_by_label<'a>(
    data: &[LabeledText],
    labels: &'a [String],
) -> Result<Vec<(&'a str, Vec<usize>)>> {
    let mut groups: Vec<(&str, Vec<usize>)> =
        labels.iter().map(|l| (l.as_str(), Vec::new())).collect();
    for (i, r) in data.iter().enumerate() {
        match groups.iter_mut().find(|(l, _)| *l == r.label) {
            Some((_, idx)) => idx.push(i),
            None => return Err(Error::UnknownLabel(r.label.clone())),
        }
    }
    Ok(groups)
}

/// Uniformly down-samples every declared label to the rarest label's count.
/// Surviving records keep their original relative order.
pub fn balance_labels<R: Rng + ?Sized>(
    data: &[LabeledText],
    labels: &[String],
    rng: &mut R,
) -> Result<Vec<LabeledText>> {
    let mut groups = indices_by_label(data, labels)?;
    if let Some((label, _)) = groups.iter().find(|(_, idx)| idx.is_empty()) {
        return Err(Error::Data(format!(
            "declared label {label:?} has no examples"
        )));
    }
    let min = groups.iter().map(|(_, idx)| idx.len()).min().unwrap_or(0);
    let mut keep = Vec::with_capacity(min * groups.len());
    for (_, idx) in &mut groups {
        idx.shuffle(rng);
        keep.extend_from_slice(&idx[..min]);
    }
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| data[i].clone()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<LabeledText>,
    pub validation: Vec<LabeledText>,
    pub test: Vec<LabeledText>,
    pub split_seed: u64,
}

/// Stratified split into `ratios.len()` parts (2 → train/test,
/// 3 → train/validation/test).
///
/// Records are ordered by their fractional rank inside their label after a
/// seeded shuffle, then cut at `round(n · cumulative ratio)`. Overall part
/// sizes are exact up to rounding; each label lands in each part in
/// proportion, up to one record.
pub fn split(data: &[LabeledText], ratios: &[f64], split_seed: u64) -> Result<DatasetSplit> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(split_seed);
    let mut parts = split_parts(data, ratios, &mut rng)?;
    let ds = match parts.len() {
        2 => {
            let test = parts.pop().unwrap_or_default();
            let train = parts.pop().unwrap_or_default();
            DatasetSplit {
                train,
                validation: Vec::new(),
                test,
                split_seed,
            }
        }
        3 => {
            let test = parts.pop().unwrap_or_default();
            let validation = parts.pop().unwrap_or_default();
            let train = parts.pop().unwrap_or_default();
            DatasetSplit {
                train,
                validation,
                test,
                split_seed,
            }
        }
        n => {
            return Err(Error::Domain(format!(
                "expected 2 or 3 split ratios, got {n}"
            )))
        }
    };
    Ok(ds)
}

pub fn split_parts<R: Rng + ?Sized>(
    data: &[LabeledText],
    ratios: &[f64],
    rng: &mut R,
) -> Result<Vec<Vec<LabeledText>>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::Domain("split ratios must be positive".into()));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Domain(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let labels = label_set(data);
    let mut groups = indices_by_label(data, &labels)?;
    if let Some((label, idx)) = groups.iter().find(|(_, idx)| idx.len() < ratios.len()) {
        return Err(Error::Data(format!(
            "label {label:?} has {} examples, fewer than {} split parts",
            idx.len(),
            ratios.len()
        )));
    }
    // (fractional rank, label position, record index)
    let mut keyed: Vec<(f64, usize, usize)> = Vec::with_capacity(data.len());
    for (li, (_, idx)) in groups.iter_mut().enumerate() {
        idx.shuffle(rng);
        let c = idx.len() as f64;
        for (rank, &i) in idx.iter().enumerate() {
            keyed.push(((rank as f64 + 0.5) / c, li, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let n = data.len();
    let mut cuts = Vec::with_capacity(ratios.len());
    let mut cum = 0.0;
    for r in &ratios[..ratios.len() - 1] {
        cum += r;
        cuts.push((cum * n as f64).round() as usize);
    }
    cuts.push(n);
    let mut parts = Vec::with_capacity(ratios.len());
    let mut start = 0;
    for &end in &cuts {
        let mut idx: Vec<usize> = keyed[start..end].iter().map(|k| k.2).collect();
        idx.sort_unstable();
        parts.push(idx.into_iter().map(|i| data[i].clone()).collect());
        start = end;
    }
    Ok(parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dataset(counts: &[(&str, usize)]) -> Vec<LabeledText> {
        let mut out = Vec::new();
        for (label, n) in counts {
            for i in 0..*n {
                out.push(LabeledText::new(format!("{label} text {i}"), *label));
            }
        }
        out
    }

    fn labels(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn jsonl_empty_and_schema_errors() {
        assert!(parse_jsonl("").unwrap().is_empty());
        let err = parse_jsonl("{\"text\":\"a\",\"label\":\"x\"}\n{\"text\":\"b\"}\nnot json\n")
            .unwrap_err();
        match err {
            Error::Schema(lines) => {
                assert_eq!(lines.iter().map(|l| l.line).collect::<Vec<_>>(), vec![2, 3]);
                assert!(lines[0].message.contains("label"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let records: Vec<LabeledText> = (0..100)
            .map(|i| LabeledText {
                text: format!("record \"{i}\" with ünïcode"),
                label: if rng.random_bool(0.5) {
                    "a".into()
                } else {
                    "b".into()
                },
                author_id: (i % 3 != 0).then(|| format!("author{}", i % 7)),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        write_jsonl(&path, &records).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), records);
        assert!(matches!(
            load_jsonl(dir.path().join("missing.jsonl")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn balance_by_downsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = balance_labels(
            &dataset(&[("A", 10), ("B", 10)]),
            &labels(&["A", "B"]),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out.len(), 20);
        let out = balance_labels(
            &dataset(&[("A", 100), ("B", 10)]),
            &labels(&["A", "B"]),
            &mut rng,
        )
        .unwrap();
        let c = label_counts(&out);
        assert_eq!((c["A"], c["B"]), (10, 10));
        assert!(balance_labels(&dataset(&[("A", 3)]), &labels(&["A", "B"]), &mut rng).is_err());
    }

    #[test]
    fn balance_thumbs_up_shaped_fixture() {
        let names = ["mild", "notable", "concerning", "serious", "hot"];
        let fixture = dataset(&[
            ("mild", 40_000),
            ("notable", 35_500),
            ("concerning", 30_933),
            ("serious", 31_000),
            ("hot", 33_000),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = balance_labels(&fixture, &labels(&names), &mut rng).unwrap();
        for (_, c) in label_counts(&out) {
            assert_eq!(c, 30_933);
        }
    }

    #[test]
    fn balance_is_seed_deterministic() {
        let data = dataset(&[("A", 50), ("B", 20)]);
        let l = labels(&["A", "B"]);
        let a = balance_labels(&data, &l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = balance_labels(&data, &l, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_sizes() {
        let data = dataset(&[("A", 50), ("B", 50)]);
        let s = split(&data, &[0.8, 0.2], 1).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (80, 0, 20)
        );
        let data = dataset(&[("A", 600), ("B", 400)]);
        let s = split(&data, &[0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!(
            (s.train.len(), s.validation.len(), s.test.len()),
            (800, 100, 100)
        );
        let c = label_counts(&s.validation);
        assert_eq!((c["A"], c["B"]), (60, 40));
        assert_eq!(s, split(&data, &[0.8, 0.1, 0.1], 1).unwrap());
    }

    #[test]
    fn split_errors() {
        let data = dataset(&[("A", 50), ("B", 2)]);
        assert!(split(&data, &[0.8, 0.1, 0.1], 0).is_err());
        assert!(split(&data, &[0.5, 0.4], 0).is_err());
        assert!(split(&data, &[1.2, -0.2], 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn split_partitions_the_input(a in 3usize..60, b in 3usize..60, c in 3usize..30, seed in any::<u64>()) {
                let data = dataset(&[("A", a), ("B", b), ("C", c)]);
                let ratios = [0.8, 0.1, 0.1];
                let s = split(&data, &ratios, seed).unwrap();
                let mut union: Vec<_> = s.train.iter().chain(&s.validation).chain(&s.test).cloned().collect();
                let mut orig = data.clone();
                union.sort();
                orig.sort();
                prop_assert_eq!(union, orig);
                let n = data.len() as f64;
                for (part, r) in [(&s.train, 0.8), (&s.validation, 0.1), (&s.test, 0.1)] {
                    prop_assert!((part.len() as f64 - r * n).abs() <= 1.0);
                }
            }

            #[test]
            fn balance_yields_equal_counts(a in 1usize..80, b in 1usize..80, seed in any::<u64>()) {
                let data = dataset(&[("A", a), ("B", b)]);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let out = balance_labels(&data, &labels(&["A", "B"]), &mut rng).unwrap();
                let c = label_counts(&out);
                prop_assert_eq!(c["A"], a.min(b));
                prop_assert_eq!(c["B"], a.min(b));
            }
        }
    }
}
