use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use lamole::data::{self, DataError, Dataset, PropertyOracle, Split};
use lamole::editor::{self, CampaignResult, EditContext, EditMode, EditorError, KeyModel};
use lamole::encoder::{self, EncoderError, EncoderParams, SelfcheckReport, SplitMetrics};
use lamole::explain::{self, ExplainError, ExplanationConfig, ExplanationReport, Method};
use lamole::grammar::{build_vocabulary, GrammarError, GroupRegistry, Label, MoleculeString, Vocabulary};
use lamole::rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::reports::{self, EvalRow, MetricsRow};

/// Largest relative error `selfcheck` accepts.
pub const SELFCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grammar(#[from] GrammarError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Editor(#[from] EditorError),
    #[error("{path}: {reason}")]
    File { path: PathBuf, reason: String },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("self-check failed: max relative error {0:e} exceeds {SELFCHECK_TOLERANCE:e}")]
    SelfcheckFailed(f64),
    #[error("thread pool: {0}")]
    Pool(String),
}

fn file_error(path: &Path, e: impl ToString) -> RunError {
    RunError::File {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn create_parent(path: &Path) -> Result<(), RunError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => std::fs::create_dir_all(dir).map_err(|e| file_error(dir, e)),
        _ => Ok(()),
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, RunError> {
    let dir = &cfg.paths.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| file_error(dir, e))?;
    Ok(dir.join(name))
}

/// Runs `f` on a pool of `jobs` threads. Parallel collects keep input order.
fn in_pool<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> Result<R, RunError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    Ok(pool.install(f))
}

pub fn parse_split(s: &str) -> Result<Split, ConfigError> {
    Split::ALL.into_iter().find(|sp| sp.name() == s).ok_or_else(|| ConfigError::InvalidValue {
        key: "--split".into(),
        reason: format!("{s:?} is not one of train, val, test"),
    })
}

/// The dataset named by the config, with the vocabulary built from all of it.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Vocabulary), RunError> {
    let registry = GroupRegistry::load(&cfg.paths.registry)?;
    let dataset = data::load(&cfg.paths.dataset, &registry).map_err(|e| match e {
        DataError::Io(io) => file_error(&cfg.paths.dataset, io),
        other => other.into(),
    })?;
    let vocab = build_vocabulary(&dataset.all_molecules()?, 1)?;
    Ok((dataset, vocab))
}

fn split_records(dataset: &Dataset, split: Split) -> Result<Vec<(u64, MoleculeString)>, RunError> {
    dataset
        .split(split)
        .map(|r| Ok((r.id, r.molecule(&dataset.registry)?)))
        .collect()
}

fn load_checkpoint(path: &Path, vocab: &Vocabulary) -> Result<EncoderParams<f64>, RunError> {
    let (params, saved) = encoder::load_model::<f64>(path)?;
    if saved != *vocab {
        return Err(RunError::Mismatch(format!("{} was trained on a different vocabulary", path.display())));
    }
    Ok(params)
}

pub struct GenSummary {
    pub records: usize,
    pub annotated: usize,
}

/// Generates the planted-motif dataset and writes it with its registry and oracle.
pub fn gen_data(cfg: &RunConfig) -> Result<GenSummary, RunError> {
    let (dataset, oracle) = data::generate(&cfg.data)?;
    let p = &cfg.paths;
    for path in [&p.dataset, &p.registry, &p.oracle] {
        create_parent(path)?;
    }
    data::save(&dataset, &p.dataset).map_err(|e| file_error(&p.dataset, e))?;
    dataset.registry.save(&p.registry).map_err(|e| file_error(&p.registry, e))?;
    let json = serde_json::to_string_pretty(&oracle).expect("oracle serialises");
    std::fs::write(&p.oracle, json + "\n").map_err(|e| file_error(&p.oracle, e))?;
    Ok(GenSummary {
        records: dataset.records.len(),
        annotated: dataset.records.iter().filter(|r| r.mask.is_some()).count(),
    })
}

/// Masked-token pretraining over every molecule of the dataset; returns the epoch losses.
pub fn pretrain(cfg: &RunConfig) -> Result<Vec<f64>, RunError> {
    let Some(dest) = &cfg.paths.pretrained else {
        return Err(ConfigError::InvalidValue {
            key: "paths.pretrained".into(),
            reason: "pretrain needs an output path".into(),
        }
        .into());
    };
    let (dataset, vocab) = load_dataset(cfg)?;
    let corpus: Vec<MoleculeString> = dataset.all_molecules()?.iter().map(|m| MoleculeString::unlabeled(m.tokens().to_vec())).collect();
    let params = EncoderParams::<f64>::init(&cfg.encoder_for(vocab.len()))?;
    let out = encoder::mlm_pretrain(params, &vocab, &corpus, &cfg.pretrain)?;
    create_parent(dest)?;
    encoder::save_model(dest, &out.params, &vocab)?;
    Ok(out.losses)
}

pub struct TrainSummary {
    /// Validation metrics per epoch, then the test split after the last epoch.
    pub rows: Vec<MetricsRow>,
    pub test: SplitMetrics,
    pub alignment_active_steps: usize,
}

/// Fine-tunes on the train split, writes `metrics.csv` and the checkpoint.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary, RunError> {
    let (dataset, vocab) = load_dataset(cfg)?;
    let enc_cfg = cfg.encoder_for(vocab.len());
    let params = match &cfg.paths.pretrained {
        Some(path) => {
            let p = load_checkpoint(path, &vocab)?;
            if p.config != enc_cfg {
                return Err(RunError::Mismatch(format!("{} has a different encoder shape", path.display())));
            }
            p
        }
        None => EncoderParams::<f64>::init(&enc_cfg)?,
    };
    let train_set = dataset.molecules(Split::Train)?;
    let val = dataset.molecules(Split::Val)?;
    let test = dataset.molecules(Split::Test)?;
    let out = encoder::train(params, &vocab, &train_set, &val, &cfg.train, &cfg.explain)?;
    let test_metrics = encoder::evaluate(&out.params, &vocab, &test, &cfg.explain)?;

    let mut rows: Vec<MetricsRow> = out.history.iter().map(MetricsRow::from).collect();
    rows.push(MetricsRow::new(cfg.train.epochs, "test", &test_metrics));
    let path = out_file(cfg, "metrics.csv")?;
    reports::write_metrics_file(&path, &rows).map_err(|e| file_error(&path, e))?;
    create_parent(&cfg.paths.checkpoint)?;
    encoder::save_model(&cfg.paths.checkpoint, &out.params, &vocab)?;
    Ok(TrainSummary {
        rows,
        test: test_metrics,
        alignment_active_steps: out.alignment_active_steps,
    })
}

/// Explains every molecule of `split` with the saved model and writes `explanations.jsonl`.
pub fn explain(cfg: &RunConfig, split: Split, jobs: usize) -> Result<Vec<ExplanationReport>, RunError> {
    let (dataset, vocab) = load_dataset(cfg)?;
    let params = load_checkpoint(&cfg.paths.checkpoint, &vocab)?;
    let records = split_records(&dataset, split)?;
    let reports = in_pool(jobs, || {
        records
            .par_iter()
            .map(|(id, m)| explain::explain_molecule(&params, &vocab, m, *id, &cfg.explain))
            .collect::<Result<Vec<_>, _>>()
    })??;
    let path = out_file(cfg, "explanations.jsonl")?;
    reports::write_explanations_file(&path, &reports).map_err(|e| file_error(&path, e))?;
    Ok(reports)
}

/// Per molecule: fidelity of removing the top-ranked tokens and of removing
/// as many uniformly chosen tokens. The random draws come from one stream
/// walked in molecule order.
pub fn paired_fidelity(
    params: &EncoderParams<f64>,
    vocab: &Vocabulary,
    molecules: &[MoleculeString],
    explain_cfg: &ExplanationConfig,
    seed: u64,
) -> Result<Vec<(f64, f64)>, RunError> {
    let mut rng = rng::stream(seed, "eval.random_removal");
    let mut out = Vec::with_capacity(molecules.len());
    for m in molecules {
        let (_, trace) = encoder::predict(params, m, vocab)?;
        let label = match m.label() {
            Some(Label::Class(c)) => Some(c),
            _ => None,
        };
        let target = encoder::explanation_target(params, &trace, label);
        let grads = encoder::layer_gradients(params, &trace, target)?;
        let scores = explain::importance(&trace, &grads, explain_cfg)?;
        let top = explain::fidelity(params, m, &scores, explain_cfg.removal_ratio, vocab)?;
        let random = explain::random_fidelity(params, m, &scores, explain_cfg.removal_ratio, vocab, &mut rng)?;
        out.push((top, random));
    }
    Ok(out)
}

/// Scores the saved model on `split` under every explanation method, plus a
/// `random` row whose fidelity removes uniformly chosen tokens. Writes
/// `eval_metrics.csv`; the checkpoint is only read.
pub fn eval(cfg: &RunConfig, split: Split, jobs: usize) -> Result<Vec<EvalRow>, RunError> {
    let (dataset, vocab) = load_dataset(cfg)?;
    let params = load_checkpoint(&cfg.paths.checkpoint, &vocab)?;
    let molecules = dataset.molecules(split)?;
    let per_method = in_pool(jobs, || {
        Method::ALL
            .par_iter()
            .map(|&method| {
                let ec = ExplanationConfig {
                    method,
                    ..cfg.explain.clone()
                };
                encoder::evaluate(&params, &vocab, &molecules, &ec).map(|m| (method, m))
            })
            .collect::<Result<Vec<_>, _>>()
    })??;
    let mut rows: Vec<EvalRow> = per_method
        .into_iter()
        .map(|(method, m)| EvalRow {
            method: method.name().to_string(),
            split: split.name().to_string(),
            accuracy: m.accuracy,
            exp_auc: m.exp_auc,
            mean_ep: m.mean_ep,
            mean_fidelity: m.mean_fidelity,
            mean_spurious_ratio: m.mean_spurious_ratio,
        })
        .collect();
    let pairs = paired_fidelity(&params, &vocab, &molecules, &cfg.explain, cfg.seed)?;
    rows.push(EvalRow {
        method: "random".into(),
        split: split.name().to_string(),
        accuracy: None,
        exp_auc: None,
        mean_ep: None,
        mean_fidelity: (!pairs.is_empty()).then(|| pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64),
        mean_spurious_ratio: None,
    });
    let path = out_file(cfg, "eval_metrics.csv")?;
    reports::write_eval(BufWriter::new(File::create(&path).map_err(|e| file_error(&path, e))?), &rows)
        .map_err(|e| file_error(&path, e))?;
    Ok(rows)
}

pub fn load_oracle(path: &Path) -> Result<PropertyOracle, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| file_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| file_error(path, e))
}

/// Evolves seeds drawn from the test split. Guided mode explains with the
/// saved model. Writes `history.csv`, `hits.json` and `population.jsonl`.
pub fn edit(cfg: &RunConfig) -> Result<CampaignResult, RunError> {
    let (dataset, vocab) = load_dataset(cfg)?;
    let oracle = load_oracle(&cfg.paths.oracle)?;
    let params = match cfg.ea.mode {
        EditMode::Guided => Some(load_checkpoint(&cfg.paths.checkpoint, &vocab)?),
        EditMode::Unguided => None,
    };
    let seeds = dataset.molecules(Split::Test)?;
    let ctx = EditContext {
        registry: &dataset.registry,
        oracle: &oracle,
        model: params.as_ref().map(|p| KeyModel { params: p, vocab: &vocab }),
    };
    let result = editor::run_campaign(&seeds, &cfg.ea, &ctx)?;

    let path = out_file(cfg, "history.csv")?;
    let f = File::create(&path).map_err(|e| file_error(&path, e))?;
    editor::write_history(BufWriter::new(f), &result.history).map_err(|e| file_error(&path, e))?;
    let path = out_file(cfg, "hits.json")?;
    let f = File::create(&path).map_err(|e| file_error(&path, e))?;
    editor::write_hits(BufWriter::new(f), &result).map_err(|e| file_error(&path, e))?;
    let path = out_file(cfg, "population.jsonl")?;
    let f = File::create(&path).map_err(|e| file_error(&path, e))?;
    data::write_records(BufWriter::new(f), &result.final_records()).map_err(|e| file_error(&path, e))?;
    Ok(result)
}

/// Finite-difference gradient check. The caller judges the report against
/// [`SELFCHECK_TOLERANCE`].
pub fn selfcheck(cfg: &RunConfig) -> Result<SelfcheckReport, RunError> {
    Ok(encoder::selfcheck(&cfg.selfcheck)?)
}
