use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    balance_labels, label_set, load_jsonl, make_toy_dataset, split, write_jsonl, DatasetSplit,
    LabeledText, PromptTemplate,
};
use crate::dpsgd::{train, Checkpoint, TrainOutcome};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, generate_corpus, multi_seed_report, perplexity, train_downstream_classifier,
    EpochEval, EvalReport, GenerationSpec, Provenance, SeedMetrics, TextGenerator, TokenScorer,
};
use crate::model::{
    encode, encode_pair, span_pretrain, ArModel, ArNet, DiffusionModel, DiffusionNet,
    PretrainSettings, PublicCorpus, Vocabulary,
};
use crate::privacy::{
    audit_author_contributions, effective_budget, epsilon_serde, AuditDocument, AuditReport,
    PrivacyBudget,
};
use crate::seed::{derive_seed, rng_for};

use super::config::{ExperimentConfig, ModelKind, PublicCorpusConfig};

/// Train, validation and test data plus everything derived from them once
/// per experiment.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub split: DatasetSplit,
    pub template: PromptTemplate,
    pub labels: Vec<String>,
    pub vocab: Vocabulary,
    pub public_corpus: Option<PublicCorpus>,
}

fn load_source(cfg: &ExperimentConfig) -> Result<Vec<LabeledText>> {
    match (&cfg.data.path, &cfg.data.toy) {
        (Some(p), _) => load_jsonl(cfg.resolve_path(p)),
        (None, Some(spec)) => Ok(make_toy_dataset(
            spec,
            &mut rng_for(cfg.data.seed, "toy", 0),
        )),
        (None, None) => Err(Error::Config("no data source".into())),
    }
}

fn load_public(
    cfg: &ExperimentConfig,
    pc: &PublicCorpusConfig,
    private_texts: &BTreeSet<&str>,
) -> Result<PublicCorpus> {
    let (name, records) = match (&pc.path, &pc.toy) {
        (Some(p), _) => (p.display().to_string(), load_jsonl(cfg.resolve_path(p))?),
        (None, Some(spec)) => (
            "public-toy".to_string(),
            make_toy_dataset(spec, &mut rng_for(pc.seed, "public", 0)),
        ),
        (None, None) => return Err(Error::Config("pretraining corpus has no source".into())),
    };
    let before = records.len();
    let texts: Vec<String> = records
        .into_iter()
        .map(|r| r.text)
        .filter(|t| !private_texts.contains(t.as_str()))
        .collect();
    if texts.len() < before {
        log::info!(
            "dropped {} public texts that also occur in the private data",
            before - texts.len()
        );
    }
    Ok(PublicCorpus {
        name,
        texts,
        private: pc.private,
    })
}

/// Loads, balances and splits the data, resolves the template and builds
/// the shared vocabulary.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let mut data = load_source(cfg)?;
    let template = match &cfg.data.template {
        Some(src) => src.resolve(&cfg.base_dir)?,
        None => {
            let labels = label_set(&data);
            let refs: Vec<&str> = labels.iter().map(String::as_str).collect();
            PromptTemplate::identity("write a {label} text:", &refs)?
        }
    };
    let labels = template.labels();
    for r in &data {
        if !labels.contains(&r.label) {
            return Err(Error::UnknownLabel(r.label.clone()));
        }
    }
    if cfg.data.balance {
        data = balance_labels(
            &data,
            &labels,
            &mut rng_for(cfg.data.split_seed, "balance", 0),
        )?;
    }
    let split = split(&data, &cfg.data.split, cfg.data.split_seed)?;

    let private_texts: BTreeSet<&str> = data.iter().map(|r| r.text.as_str()).collect();
    let public_corpus = match (cfg.model, &cfg.diffusion.pretrain) {
        (ModelKind::Diffusion, Some(p)) => Some(load_public(cfg, &p.corpus, &private_texts)?),
        _ => None,
    };

    let prompts: Vec<String> = labels
        .iter()
        .map(|l| template.render(l))
        .collect::<Result<_>>()?;
    let mut texts: Vec<&str> = split.train.iter().map(|r| r.text.as_str()).collect();
    texts.extend(prompts.iter().map(String::as_str));
    if let Some(pc) = &public_corpus {
        texts.extend(pc.texts.iter().map(String::as_str));
    }
    let vocab = Vocabulary::build(texts);
    Ok(PreparedData {
        split,
        template,
        labels,
        vocab,
        public_corpus,
    })
}

/// A trained generator of either kind.
pub enum TrainedGenerator {
    Autoregressive(ArModel),
    Diffusion(DiffusionModel),
}

impl TrainedGenerator {
    fn as_generator(&self) -> &dyn TextGenerator {
        match self {
            Self::Autoregressive(m) => m,
            Self::Diffusion(m) => m,
        }
    }
}

pub struct TrainedRun {
    pub generator: TrainedGenerator,
    pub outcome: TrainOutcome,
    pub checkpoint: Checkpoint,
    /// Checkpoint after public pretraining, before private fine-tuning.
    pub pretrained: Option<Checkpoint>,
}

/// Trains the configured generator on the private train split.
pub fn train_generator(
    cfg: &ExperimentConfig,
    data: &PreparedData,
    budget: PrivacyBudget,
    seed: u64,
) -> Result<TrainedRun> {
    let name = format!("{}-{}-seed{seed}", cfg.name, cfg.model.as_str());
    let train_seed = derive_seed(seed, "train", 0);
    let mut init_rng = rng_for(seed, "init", 0);
    match cfg.model {
        ModelKind::Autoregressive => {
            let model_cfg = cfg.autoregressive.model_config(data.vocab.len());
            let (net, params) = ArNet::init(model_cfg.clone(), &mut init_rng)?;
            let examples = data
                .split
                .train
                .iter()
                .map(|r| {
                    encode(
                        &data.vocab,
                        &data.template.render(&r.label)?,
                        &r.text,
                        model_cfg.max_sequence_length,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let outcome = train(&net, params, &examples, &cfg.training, budget, train_seed)?;
            let checkpoint = Checkpoint::from_state(
                ModelKind::Autoregressive.as_str(),
                &outcome.state,
                outcome.config.map(|c| c.noise_multiplier),
                serde_json::to_value(&model_cfg)?,
            );
            let model = ArModel {
                net,
                params: outcome.state.params.clone(),
                vocab: data.vocab.clone(),
                sampling: cfg.generation.decoding,
                name,
            };
            Ok(TrainedRun {
                generator: TrainedGenerator::Autoregressive(model),
                outcome,
                checkpoint,
                pretrained: None,
            })
        }
        ModelKind::Diffusion => {
            let model_cfg = cfg.diffusion.model_config(data.vocab.len());
            let (net, mut params) = DiffusionNet::init(model_cfg.clone(), &mut init_rng)?;
            let config_value = serde_json::json!({
                "model": model_cfg,
                "schedule": net.schedule(),
            });
            let mut pretrained = None;
            if let (Some(p), Some(corpus)) = (&cfg.diffusion.pretrain, &data.public_corpus) {
                let settings = PretrainSettings {
                    span_fraction: p.span_fraction,
                    train: p.training.clone(),
                };
                let out = span_pretrain(
                    &net,
                    params,
                    &data.vocab,
                    corpus,
                    &settings,
                    derive_seed(seed, "pretrain", 0),
                )?;
                pretrained = Some(Checkpoint::from_state(
                    "diffusion-pretrained",
                    &out.state,
                    None,
                    config_value.clone(),
                ));
                params = out.state.params;
            }
            let examples = data
                .split
                .train
                .iter()
                .map(|r| {
                    encode_pair(
                        &data.vocab,
                        &data.template.render(&r.label)?,
                        &r.text,
                        &model_cfg,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let outcome = train(&net, params, &examples, &cfg.training, budget, train_seed)?;
            let checkpoint = Checkpoint::from_state(
                ModelKind::Diffusion.as_str(),
                &outcome.state,
                outcome.config.map(|c| c.noise_multiplier),
                config_value,
            );
            let model = DiffusionModel {
                net,
                params: outcome.state.params.clone(),
                vocab: data.vocab.clone(),
                name,
            };
            Ok(TrainedRun {
                generator: TrainedGenerator::Diffusion(model),
                outcome,
                checkpoint,
                pretrained,
            })
        }
    }
}

/// Non-private reference LM over plain texts, disjoint from the private data.
pub fn train_reference(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Option<ArModel>> {
    if !cfg.reference.enabled {
        return Ok(None);
    }
    let private: BTreeSet<&str> = data.split.train.iter().map(|r| r.text.as_str()).collect();
    let texts: Vec<String> = match &cfg.data.toy {
        Some(spec) => {
            let mut spec = spec.clone();
            spec.n_per_label = cfg.reference.n_per_label;
            make_toy_dataset(&spec, &mut rng_for(cfg.data.seed, "reference-corpus", 0))
                .into_iter()
                .map(|r| r.text)
                .filter(|t| !private.contains(t.as_str()))
                .collect()
        }
        None => data
            .split
            .validation
            .iter()
            .map(|r| r.text.clone())
            .collect(),
    };
    if texts.is_empty() {
        return Err(Error::Data("reference corpus is empty".into()));
    }
    let model_cfg = cfg.reference.model.model_config(data.vocab.len());
    let root = derive_seed(cfg.data.seed, "reference", 0);
    let (net, params) = ArNet::init(model_cfg.clone(), &mut rng_for(root, "init", 0))?;
    let examples = texts
        .iter()
        .map(|t| encode(&data.vocab, "", t, model_cfg.max_sequence_length))
        .collect::<Result<Vec<_>>>()?;
    let out = train(
        &net,
        params,
        &examples,
        &cfg.reference.training,
        PrivacyBudget::non_private(),
        root,
    )?;
    Ok(Some(ArModel {
        net,
        params: out.state.params,
        vocab: data.vocab.clone(),
        sampling: cfg.generation.decoding,
        name: "reference".into(),
    }))
}

/// Per-seed `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub metrics: SeedMetrics,
    pub realized: PrivacyBudget,
    pub noise_multiplier: Option<f64>,
    pub steps: u64,
    pub best_epoch: usize,
    pub classifier_history: Vec<EpochEval>,
}

/// Aggregate `metrics.json`, mirroring the Acc/MF1/PPL table columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub name: String,
    pub dataset: String,
    pub model: ModelKind,
    #[serde(with = "epsilon_serde")]
    pub epsilon: f64,
    pub delta: f64,
    pub k_max: usize,
    /// Group-privacy budget implied by `k_max`.
    pub effective: PrivacyBudget,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accounting {
    pub noise_multiplier: Option<f64>,
    pub sample_rate: Option<f64>,
    pub steps: u64,
    pub delta: f64,
    #[serde(with = "epsilon_serde")]
    pub target_epsilon: f64,
    #[serde(with = "epsilon_serde")]
    pub realized_epsilon: f64,
    pub best_order: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub dataset: String,
    pub model: ModelKind,
    pub train_size: usize,
    pub realized: PrivacyBudget,
    pub accounting: Accounting,
    pub audit: AuditReport,
    pub files: Vec<ManifestFile>,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub manifest: Manifest,
    pub metrics: ExperimentMetrics,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SHA-256 over the canonical JSON form of the config.
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let text = serde_json::to_string(cfg)?;
    Ok(hex::encode(Sha256::digest(text.as_bytes())))
}

fn prepare_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty {
            if !dir.join(RUN_MARKER).exists() && !dir.join("manifest.json").exists() {
                return Err(Error::Config(format!(
                    "output directory {} is not empty and holds no previous run",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let marker = dir.join(RUN_MARKER);
    fs::write(&marker, b"").map_err(|e| Error::io(&marker, e))
}

/// Marks a directory as owned by a run until the manifest replaces it.
const RUN_MARKER: &str = ".dpsynth-run";

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<ManifestFile>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let rel = p.strip_prefix(root).unwrap_or(&p);
            out.push(ManifestFile {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
    }
    Ok(())
}

/// Runs the whole pipeline for every configured seed and writes the run
/// directory: per-seed audit, checkpoints, logs, corpus and metrics, then
/// the aggregate metrics and a manifest listing every file.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    let n = data.split.train.len();
    let delta = if cfg.epsilon.is_finite() {
        cfg.delta.resolve(n)?
    } else {
        0.0
    };
    let budget = if cfg.epsilon.is_finite() {
        PrivacyBudget::new(cfg.epsilon, delta)?
    } else {
        PrivacyBudget::non_private()
    };

    let audit = audit_author_contributions(&data.split.train);
    if audit.k_max > 1 || !audit.authors_known {
        if cfg.require_unique_authors {
            return Err(Error::Data(format!(
                "author audit failed: k_max = {} (authors known: {}) but unique authors are required",
                audit.k_max, audit.authors_known
            )));
        }
        log::warn!(
            "author audit: k_max = {} (authors known: {}); the guarantee degrades to group privacy",
            audit.k_max,
            audit.authors_known
        );
    }
    let effective = effective_budget(budget, &audit)?;
    let audit_doc = AuditDocument::new(budget, &audit, &effective);

    let out_dir = cfg.resolve_path(&cfg.output_dir);
    prepare_output_dir(&out_dir)?;
    write_json(&out_dir.join("config.json"), cfg)?;
    data.vocab.save(out_dir.join("vocab.json"))?;

    let reference = train_reference(cfg, &data)?;
    let mut seed_reports = Vec::with_capacity(cfg.seeds.len());
    let mut accounting = None;
    for &seed in &cfg.seeds {
        let seed_dir = out_dir.join(format!("seed-{seed}"));
        fs::create_dir_all(&seed_dir).map_err(|e| Error::io(&seed_dir, e))?;
        write_json(&seed_dir.join("audit.json"), &audit_doc)?;

        let run = train_generator(cfg, &data, budget, seed)?;
        run.checkpoint.save(seed_dir.join("checkpoint.json"))?;
        if let Some(p) = &run.pretrained {
            p.save(seed_dir.join("pretrained_checkpoint.json"))?;
        }
        write_jsonl(seed_dir.join("train_log.jsonl"), &run.outcome.log)?;
        if budget.is_private() {
            write_json(
                &seed_dir.join("accountant.json"),
                &run.outcome.state.accountant_curve,
            )?;
        }
        let this_accounting = Accounting {
            noise_multiplier: run.outcome.config.map(|c| c.noise_multiplier),
            sample_rate: run.outcome.config.map(|c| c.sample_rate),
            steps: run.outcome.state.step,
            delta: run.outcome.realized.delta,
            target_epsilon: budget.epsilon,
            realized_epsilon: run.outcome.realized.epsilon,
            best_order: run.outcome.best_order,
        };
        match &accounting {
            None => accounting = Some(this_accounting),
            Some(a) if *a != this_accounting => {
                return Err(Error::Contract(
                    "seeds disagree on privacy accounting".into(),
                ));
            }
            Some(_) => {}
        }

        let spec = GenerationSpec {
            n_per_label: cfg.generation.n_per_label,
            decoding: cfg.generation.decoding,
            seed: derive_seed(seed, "generate", 0),
        };
        let provenance = Provenance {
            epsilon: run.outcome.realized.epsilon,
            delta: run.outcome.realized.delta,
            k_max: audit.k_max,
        };
        let corpus = generate_corpus(
            run.generator.as_generator(),
            &data.template,
            &spec,
            provenance,
        )?;
        corpus.save_jsonl(seed_dir.join("corpus.jsonl"))?;

        let clf = train_downstream_classifier(
            &corpus.labeled(),
            &data.labels,
            &data.split.validation,
            &cfg.classifier,
            derive_seed(seed, "classifier", 0),
        )?;
        let scores = evaluate(&clf.classifier, &data.split.test)?;
        let ppl = match &reference {
            Some(r) => score_perplexity(r, &corpus.texts())?,
            None => None,
        };
        let report = SeedReport {
            metrics: SeedMetrics {
                seed,
                accuracy: scores.accuracy,
                macro_f1: scores.macro_f1,
                perplexity: ppl,
                failed_generations: corpus.failed_count(),
            },
            realized: run.outcome.realized,
            noise_multiplier: run.outcome.config.map(|c| c.noise_multiplier),
            steps: run.outcome.state.step,
            best_epoch: clf.best_epoch,
            classifier_history: clf.history,
        };
        write_json(&seed_dir.join("metrics.json"), &report)?;
        seed_reports.push(report);
    }

    let runs: Vec<SeedMetrics> = seed_reports.iter().map(|r| r.metrics.clone()).collect();
    let metrics = ExperimentMetrics {
        name: cfg.name.clone(),
        dataset: cfg.data.display_name(),
        model: cfg.model,
        epsilon: budget.epsilon,
        delta: budget.delta,
        k_max: audit.k_max,
        effective: effective.budget,
        report: multi_seed_report(&runs)?,
    };
    write_json(&out_dir.join("metrics.json"), &metrics)?;

    let accounting = accounting.ok_or_else(|| Error::Contract("no seeds were run".into()))?;
    let marker = out_dir.join(RUN_MARKER);
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    let mut files = Vec::new();
    collect_files(&out_dir, &out_dir, &mut files)?;
    let manifest = Manifest {
        name: cfg.name.clone(),
        config_hash: config_hash(cfg)?,
        seeds: cfg.seeds.clone(),
        dataset: cfg.data.display_name(),
        model: cfg.model,
        train_size: n,
        realized: seed_reports[0].realized,
        accounting,
        audit,
        files,
    };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(RunSummary {
        output_dir: out_dir,
        manifest,
        metrics,
    })
}

/// Perplexity when the corpus has any text, `None` otherwise.
fn score_perplexity<S: TokenScorer>(scorer: &S, texts: &[String]) -> Result<Option<f64>> {
    if texts.iter().all(|t| t.trim().is_empty()) {
        log::warn!("synthetic corpus is empty; perplexity undefined");
        return Ok(None);
    }
    perplexity(scorer, texts).map(Some)
}
