use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Summary;
use crate::privacy::parse_epsilon;

use super::config::{ExperimentConfig, ModelKind};
use super::run::{run_experiment, ExperimentMetrics};

/// One value of the ε axis: a number or `"inf"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonValue {
    Number(f64),
    Text(String),
}

impl EpsilonValue {
    pub fn value(&self) -> Result<f64> {
        match self {
            Self::Number(v) => Ok(*v),
            Self::Text(t) => parse_epsilon(t),
        }
    }
}

/// A sweep file: a list of base experiment configs, optionally crossed with
/// model kinds and ε values. Paths resolve against the sweep file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub configs: Vec<PathBuf>,
    #[serde(default)]
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub epsilons: Vec<EpsilonValue>,
    #[serde(default = "default_sweep_dir")]
    pub output_dir: PathBuf,
}

fn default_sweep_dir() -> PathBuf {
    PathBuf::from("sweep")
}

impl SweepConfig {
    /// Loads the sweep file and expands it into one config per cell.
    pub fn load(path: impl AsRef<Path>) -> Result<(Vec<ExperimentConfig>, PathBuf)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let sweep: Self = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let bases = sweep
            .configs
            .iter()
            .map(|p| ExperimentConfig::load(base.join(p)))
            .collect::<Result<Vec<_>>>()?;
        let epsilons = sweep
            .epsilons
            .iter()
            .map(EpsilonValue::value)
            .collect::<Result<Vec<_>>>()?;
        Ok((
            expand_grid(&bases, &sweep.models, &epsilons),
            base.join(&sweep.output_dir),
        ))
    }
}

pub fn epsilon_label(eps: f64) -> String {
    if eps.is_infinite() {
        "inf".into()
    } else {
        format!("{eps}")
    }
}

/// Crosses every base config with the model and ε axes; an empty axis keeps
/// the base value.
pub fn expand_grid(
    bases: &[ExperimentConfig],
    models: &[ModelKind],
    epsilons: &[f64],
) -> Vec<ExperimentConfig> {
    let mut cells = Vec::new();
    for base in bases {
        let models: Vec<ModelKind> = if models.is_empty() {
            vec![base.model]
        } else {
            models.to_vec()
        };
        let epsilons: Vec<f64> = if epsilons.is_empty() {
            vec![base.epsilon]
        } else {
            epsilons.to_vec()
        };
        for &m in &models {
            for &e in &epsilons {
                let mut cfg = base.clone();
                cfg.model = m;
                cfg.epsilon = e;
                cells.push(cfg);
            }
        }
    }
    cells
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellOutcome {
    Done { metrics: ExperimentMetrics },
    Failed { reason: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub dataset: String,
    pub model: ModelKind,
    pub epsilon: String,
    pub directory: String,
    pub outcome: CellOutcome,
}

fn failure_reason(e: &Error) -> &'static str {
    match e {
        Error::Unsatisfiable(_) => "calibration",
        Error::Config(_) => "config",
        Error::Schema(_) | Error::Data(_) | Error::UnknownLabel(_) => "data",
        Error::PrivateCorpus(_) => "private corpus",
        Error::Io { .. } | Error::Json(_) => "io",
        Error::Numeric(_) => "numeric",
        Error::Domain(_) | Error::Contract(_) => "contract",
    }
}

fn cell_dir_name(cfg: &ExperimentConfig, index: usize) -> String {
    let raw = format!(
        "{:02}-{}-{}-eps{}",
        index,
        cfg.data.display_name(),
        cfg.model.as_str(),
        epsilon_label(cfg.epsilon)
    );
    raw.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Runs every cell into its own subdirectory of `output_dir`. A failing
/// cell is recorded and the sweep moves on. Writes `table.md` and
/// `sweep.json`.
pub fn sweep(cells: &[ExperimentConfig], output_dir: &Path) -> Result<Vec<SweepRow>> {
    if cells.is_empty() {
        return Err(Error::Config("a sweep needs at least one config".into()));
    }
    fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let dir_name = cell_dir_name(cell, i);
        let mut cfg = cell.clone();
        cfg.output_dir = output_dir.join(&dir_name);
        let outcome = match run_experiment(&cfg) {
            Ok(summary) => CellOutcome::Done {
                metrics: summary.metrics,
            },
            Err(e) => {
                log::error!("sweep cell {dir_name} failed: {e}");
                CellOutcome::Failed {
                    reason: failure_reason(&e).into(),
                    message: e.to_string(),
                }
            }
        };
        rows.push(SweepRow {
            dataset: cfg.data.display_name(),
            model: cfg.model,
            epsilon: epsilon_label(cfg.epsilon),
            directory: dir_name,
            outcome,
        });
    }
    let table = render_table(&rows);
    let path = output_dir.join("table.md");
    fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
    let path = output_dir.join("sweep.json");
    fs::write(&path, serde_json::to_string_pretty(&rows)? + "\n")
        .map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

fn cell(s: &Summary, scale: f64) -> String {
    format!("{:.2} (± {:.2})", s.mean * scale, s.std * scale)
}

/// Markdown table with one row per cell; accuracy and macro-F1 in percent.
pub fn render_table(rows: &[SweepRow]) -> String {
    let mut out =
        String::from("| Dataset | Model | ε | Acc | MF1 | PPL |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let (acc, f1, ppl) = match &r.outcome {
            CellOutcome::Done { metrics } => {
                let rep = &metrics.report;
                (
                    cell(&rep.accuracy, 100.0),
                    cell(&rep.macro_f1, 100.0),
                    rep.perplexity
                        .as_ref()
                        .map_or_else(|| "n/a".to_string(), |p| cell(p, 1.0)),
                )
            }
            CellOutcome::Failed { reason, .. } => {
                let f = format!("failed: {reason}");
                (f.clone(), f.clone(), f)
            }
        };
        let _ = writeln!(
            out,
            "| {} | {} | {} | {acc} | {f1} | {ppl} |",
            r.dataset,
            r.model.as_str(),
            r.epsilon
        );
    }
    out
}
