//! End-to-end runs: subsample, build, train, evaluate, and persist.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::derive_seed;
use crate::data::{
    load_pretrained_embeddings, read_vector_words, render_predictions, subsample_corpus,
    write_atomic, Corpus, Task, Vocab,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Evaluation, Metrics, Prf};
use crate::model::{ModelConfig, ModelMode, NerModel};
use crate::report::{mean_std, render_csv, ModeSummary, RankingReport};
use crate::sharing::TtnConfig;
use crate::train::{train, EpochLog, TrainConfig, TrainData, TrainOutcome};

/// Word vectors used to initialize the word table.
#[derive(Debug, Clone)]
pub struct PretrainedSource {
    pub path: PathBuf,
    /// Lowercased words present in the file.
    pub words: HashSet<String>,
}

impl PretrainedSource {
    pub fn open(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let words = read_vector_words(&path)?;
        Ok(PretrainedSource { path, words })
    }
}

/// Corpora shared by every run of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    /// Full target training set; runs subsample it.
    pub target_train: Corpus,
    pub target_dev: Corpus,
    pub target_test: Corpus,
    pub source_train: Option<Corpus>,
    pub pretrained: Option<PretrainedSource>,
}

/// Everything that distinguishes one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Share of target training sentences kept, in `(0, 1]`.
    pub fraction: f64,
    pub seed: u64,
}

impl RunSpec {
    pub fn with_mode(&self, mode: ModelMode) -> RunSpec {
        let mut spec = self.clone();
        spec.model.mode = mode;
        spec
    }

    pub fn with_seed(&self, seed: u64) -> RunSpec {
        RunSpec {
            seed,
            ..self.clone()
        }
    }

    /// `<mode>_<fraction>_<seed>` with filesystem-safe mode names.
    pub fn run_name(&self) -> String {
        let mode = self.model.mode.to_string().replace([':', '-'], "_");
        format!("{mode}_{}_{}", self.fraction, self.seed)
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: NerModel,
    pub outcome: TrainOutcome,
    pub test: Evaluation,
    pub target_train_sentences: usize,
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mode: ModelMode,
    pub fraction: f64,
    pub seed: u64,
    pub target_train_sentences: usize,
    pub num_parameters: usize,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub dev: Metrics,
    pub test: Metrics,
}

impl RunResult {
    pub fn metrics(&self, spec: &RunSpec) -> RunMetrics {
        RunMetrics {
            mode: spec.model.mode,
            fraction: spec.fraction,
            seed: spec.seed,
            target_train_sentences: self.target_train_sentences,
            num_parameters: self.model.num_parameters(),
            best_epoch: self.outcome.best_epoch,
            epochs_run: self.outcome.epochs_run,
            dev: self.outcome.best_dev.clone(),
            test: self.test.metrics.clone(),
        }
    }
}

fn pretrained_extra_words(data: &ExperimentData) -> Vec<String> {
    let Some(p) = &data.pretrained else {
        return Vec::new();
    };
    let words: BTreeSet<String> = data
        .target_dev
        .sentences
        .iter()
        .chain(&data.target_test.sentences)
        .flat_map(|s| s.tokens.iter().map(|t| t.to_lowercase()))
        .filter(|w| p.words.contains(w))
        .collect();
    words.into_iter().collect()
}

/// Builds a model for `spec` without training it.
pub fn prepare_model(data: &ExperimentData, spec: &RunSpec) -> Result<(NerModel, Corpus)> {
    spec.model.validate()?;
    spec.train.validate()?;
    let uses_source = spec.model.mode.uses_source();
    if uses_source && data.source_train.is_none() {
        return Err(Error::Data(format!(
            "mode {} needs a source training corpus",
            spec.model.mode
        )));
    }
    let target = subsample_corpus(
        &data.target_train,
        spec.fraction,
        derive_seed(spec.seed, "subsample"),
    )?;
    let source = if uses_source {
        data.source_train.as_ref()
    } else {
        None
    };
    let extra = pretrained_extra_words(data);
    let vocab = Vocab::build(&target, source, extra.iter().map(String::as_str));
    let mut model = NerModel::new(spec.model.clone(), vocab, derive_seed(spec.seed, "init"))?;
    if let Some(p) = &data.pretrained {
        let table = load_pretrained_embeddings(
            &p.path,
            &model.vocab.words,
            spec.model.word_dim,
            derive_seed(spec.seed, "embeddings"),
        )?;
        model.set_word_embeddings(&table.matrix)?;
    }
    Ok((model, target))
}

/// Trains one model and evaluates it on the target test set.
pub fn run_experiment(
    data: &ExperimentData,
    spec: &RunSpec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    run_experiment_with_diagnostics(data, spec, None, on_epoch)
}

/// As [`run_experiment`]; on divergence the failing parameters are saved
/// as a checkpoint at `diagnostics` before the error is returned.
pub fn run_experiment_with_diagnostics(
    data: &ExperimentData,
    spec: &RunSpec,
    diagnostics: Option<&Path>,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<RunResult> {
    let (mut model, target) = prepare_model(data, spec)?;
    let target_enc = target
        .sentences
        .iter()
        .map(|s| model.vocab.encode(Task::Target, s))
        .collect::<Result<Vec<_>>>()?;
    let source_enc = match (spec.model.mode.uses_source(), &data.source_train) {
        (true, Some(src)) => src
            .sentences
            .iter()
            .map(|s| model.vocab.encode(Task::Source, s))
            .collect::<Result<Vec<_>>>()?,
        _ => Vec::new(),
    };
    let train_data = TrainData {
        target: &target_enc,
        source: &source_enc,
        target_dev: &data.target_dev,
    };
    let outcome = match train(
        &mut model,
        &train_data,
        &spec.train,
        derive_seed(spec.seed, "train"),
        on_epoch,
    ) {
        Ok(o) => o,
        Err(e @ Error::Divergence { .. }) => {
            if let Some(path) = diagnostics {
                if let Some(parent) = path.parent() {
                    fs::create_dir_all(parent).map_err(|io| Error::io(parent, io))?;
                }
                model.save(path)?;
                log::error!("{e}; diagnostic checkpoint written to {}", path.display());
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let test = evaluate(&model, &data.target_test)?;
    Ok(RunResult {
        model,
        outcome,
        test,
        target_train_sentences: target.len(),
    })
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.conll";

pub(crate) fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Serde(e.to_string()))
}

pub(crate) fn log_lines(log: &[EpochLog]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Serde(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

pub(crate) fn staging_dir(dir: &Path) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    dir.with_file_name(name)
}

/// Writes the run directory through a staging directory renamed into
/// place, so a failed run leaves nothing behind.
pub fn write_run_outputs(
    dir: &Path,
    data: &ExperimentData,
    spec: &RunSpec,
    result: &RunResult,
) -> Result<()> {
    let staging = staging_dir(dir);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    result.model.save(staging.join(CHECKPOINT_FILE))?;
    write_atomic(
        staging.join(LOG_FILE),
        log_lines(&result.outcome.log)?.as_bytes(),
    )?;
    write_atomic(
        staging.join(METRICS_FILE),
        to_json_pretty(&result.metrics(spec))?.as_bytes(),
    )?;
    write_atomic(
        staging.join(PREDICTIONS_FILE),
        render_predictions(&data.target_test, &result.test.predictions).as_bytes(),
    )?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
}

/// One (mode, seed) cell of a grid.
#[derive(Debug, Clone, Serialize)]
pub struct GridRun {
    pub mode: ModelMode,
    pub seed: u64,
    pub outcome: std::result::Result<RunMetrics, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridResult {
    pub runs: Vec<GridRun>,
}

impl GridResult {
    /// Per-mode test scores averaged over successful seeds, in run order.
    pub fn summaries(&self) -> Vec<ModeSummary> {
        let mut modes: Vec<ModelMode> = Vec::new();
        for r in &self.runs {
            if !modes.contains(&r.mode) {
                modes.push(r.mode);
            }
        }
        modes
            .into_iter()
            .map(|mode| {
                let runs: Vec<&GridRun> = self.runs.iter().filter(|r| r.mode == mode).collect();
                let ok: Vec<&Prf> = runs
                    .iter()
                    .filter_map(|r| r.outcome.as_ref().ok())
                    .map(|m| &m.test.micro)
                    .collect();
                let avg =
                    |f: fn(&Prf) -> f64| mean_std(&ok.iter().map(|p| f(p)).collect::<Vec<_>>());
                ModeSummary {
                    mode,
                    seeds: ok.len(),
                    failed: runs.len() - ok.len(),
                    mean: Prf {
                        precision: avg(|p| p.precision).0,
                        recall: avg(|p| p.recall).0,
                        f1: avg(|p| p.f1).0,
                    },
                    f1_std: avg(|p| p.f1).1,
                }
            })
            .collect()
    }

    pub fn report(&self) -> RankingReport {
        RankingReport::new(&self.summaries())
    }

    pub fn runs_csv(&self) -> Result<String> {
        let rows = self.runs.iter().map(|r| {
            let mut row = vec![r.mode.to_string(), r.seed.to_string()];
            match &r.outcome {
                Ok(m) => row.extend([
                    "ok".to_string(),
                    format!("{:.4}", m.test.micro.precision),
                    format!("{:.4}", m.test.micro.recall),
                    format!("{:.4}", m.test.micro.f1),
                    format!("{:.4}", m.dev.micro.f1),
                    m.best_epoch.to_string(),
                    String::new(),
                ]),
                Err(e) => row.extend([
                    "failed".to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    e.clone(),
                ]),
            }
            row
        });
        render_csv(
            &[
                "mode",
                "seed",
                "status",
                "test_precision",
                "test_recall",
                "test_f1",
                "dev_f1",
                "best_epoch",
                "error",
            ],
            rows,
        )
    }

    pub fn summary_csv(&self) -> Result<String> {
        let rows = self.summaries().into_iter().map(|s| {
            vec![
                s.mode.to_string(),
                s.seeds.to_string(),
                s.failed.to_string(),
                format!("{:.4}", s.mean.precision),
                format!("{:.4}", s.mean.recall),
                format!("{:.4}", s.mean.f1),
                format!("{:.4}", s.f1_std),
            ]
        });
        render_csv(
            &[
                "mode",
                "seeds",
                "failed",
                "precision",
                "recall",
                "f1",
                "f1_std",
            ],
            rows,
        )
    }
}

/// Every mode to run in a grid: the 27 sharing configurations followed by
/// `extra` (for example the gated modes).
pub fn grid_modes(extra: &[ModelMode]) -> Vec<ModelMode> {
    TtnConfig::all()
        .into_iter()
        .map(ModelMode::Ttn)
        .chain(extra.iter().copied())
        .collect()
}

/// Runs `modes × seeds`. A failing run is recorded and the grid continues.
pub fn run_grid(
    data: &ExperimentData,
    base: &RunSpec,
    modes: &[ModelMode],
    seeds: &[u64],
    mut on_run: impl FnMut(&GridRun, Option<&RunResult>),
) -> GridResult {
    let mut runs = Vec::new();
    for &mode in modes {
        for &seed in seeds {
            let spec = base.with_mode(mode).with_seed(seed);
            let result = run_experiment(data, &spec, |_| {});
            let run = GridRun {
                mode,
                seed,
                outcome: result
                    .as_ref()
                    .map(|r| r.metrics(&spec))
                    .map_err(|e| e.to_string()),
            };
            if let Err(e) = &result {
                log::warn!("{} seed {seed} failed: {e}", mode);
            }
            on_run(&run, result.as_ref().ok());
            runs.push(run);
        }
    }
    GridResult { runs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SynthCorpora, SynthSpec};

    fn tiny() -> (ExperimentData, RunSpec) {
        let spec = SynthSpec {
            source_sentences: 40,
            target_sentences: 40,
            dev_sentences: 10,
            test_sentences: 10,
            ..SynthSpec::default()
        };
        let c = SynthCorpora::generate(&spec, 5).unwrap();
        let data = ExperimentData {
            target_train: c.target_train,
            target_dev: c.target_dev,
            target_test: c.target_test,
            source_train: Some(c.source_train),
            pretrained: None,
        };
        let run = RunSpec {
            model: ModelConfig {
                word_dim: 6,
                char_dim: 3,
                tag_dim: 3,
                char_hidden: 3,
                word_hidden: 4,
                decoder_hidden: 4,
                dropout: 0.1,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                max_epochs: 2,
                patience: 1,
                ..TrainConfig::default()
            },
            fraction: 0.5,
            seed: 3,
        };
        (data, run)
    }

    #[test]
    fn run_writes_complete_directory() {
        let (data, spec) = tiny();
        let spec = spec.with_mode("ttn:HSI".parse().unwrap());
        assert_eq!(spec.run_name(), "ttn_HSI_0.5_3");
        let result = run_experiment(&data, &spec, |_| {}).unwrap();
        assert_eq!(result.target_train_sentences, 20);
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join(spec.run_name());
        write_run_outputs(&dir, &data, &spec, &result).unwrap();
        for f in [CHECKPOINT_FILE, LOG_FILE, METRICS_FILE, PREDICTIONS_FILE] {
            assert!(dir.join(f).is_file(), "{f}");
        }
        assert!(!staging_dir(&dir).exists());
        let metrics: RunMetrics =
            serde_json::from_str(&fs::read_to_string(dir.join(METRICS_FILE)).unwrap()).unwrap();
        assert_eq!(metrics, result.metrics(&spec));
        let reloaded = NerModel::load(dir.join(CHECKPOINT_FILE)).unwrap();
        let again = evaluate(&reloaded, &data.target_test).unwrap();
        assert_eq!(again.predictions, result.test.predictions);
    }

    #[test]
    fn grid_records_failures_and_summarizes() {
        let (mut data, spec) = tiny();
        let modes = ["ttn:III", "ttn:SSS", "baseline"].map(|m| m.parse().unwrap());
        let grid = run_grid(&data, &spec, &modes, &[1, 2], |_, _| {});
        assert_eq!(grid.runs.len(), 6);
        assert!(grid.runs.iter().all(|r| r.outcome.is_ok()));
        let s = grid.summaries();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].seeds, 2);
        let report = grid.report();
        assert_eq!(report.ranked.len(), 2);
        assert!(report.other(ModelMode::Baseline).is_some());
        assert_eq!(grid.runs_csv().unwrap().lines().count(), 7);

        data.source_train = None;
        let grid = run_grid(&data, &spec, &modes, &[1], |_, _| {});
        let failed: Vec<_> = grid
            .runs
            .iter()
            .filter(|r| r.outcome.is_err())
            .map(|r| r.mode)
            .collect();
        assert_eq!(failed.len(), 2);
        assert!(grid.runs_csv().unwrap().contains("failed"));
        let s = grid.summaries();
        assert_eq!((s[0].seeds, s[0].failed), (0, 1));
    }

    #[test]
    fn grid_modes_cover_all_codes() {
        let modes = grid_modes(&[ModelMode::Dtn, ModelMode::DtnHs]);
        assert_eq!(modes.len(), 29);
        assert_eq!(modes[0].to_string(), "ttn:III");
    }
}
