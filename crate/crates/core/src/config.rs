//! TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_conll_columns, Corpus, Split, SynthCorpora, SynthSpec};
use crate::error::{Error, Result};
use crate::experiment::{ExperimentData, PretrainedSource, RunSpec};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Tagging scheme of input files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagScheme {
    Bio,
    #[default]
    Iobes,
}

impl std::str::FromStr for TagScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bio" => Ok(TagScheme::Bio),
            "iobes" => Ok(TagScheme::Iobes),
            _ => Err(Error::Config(format!(
                "unknown tag scheme {s:?}; expected bio or iobes"
            ))),
        }
    }
}

/// Column-format corpora on disk. Relative paths resolve against the
/// configuration file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub target_train: PathBuf,
    pub target_dev: PathBuf,
    pub target_test: PathBuf,
    pub source_train: Option<PathBuf>,
    /// Whitespace-separated word vectors, one word per line.
    pub embeddings: Option<PathBuf>,
    #[serde(default)]
    pub token_column: usize,
    #[serde(default = "default_tag_column")]
    pub tag_column: usize,
    /// Tag column of the source corpus when it differs.
    pub source_tag_column: Option<usize>,
    #[serde(default)]
    pub scheme: TagScheme,
}

fn default_tag_column() -> usize {
    1
}

fn default_fraction() -> f64 {
    1.0
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// One experiment: data, model, optimizer and run identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    #[serde(default)]
    pub seed: u64,
    /// Seeds for grid runs; defaults to `[seed]`.
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub data: Option<FileData>,
    pub synth: Option<SynthSpec>,
    /// Seed of the synthetic corpora.
    #[serde(default)]
    pub synth_seed: u64,
}

impl ExperimentConfig {
    /// Parses TOML text; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(d) = &mut cfg.data {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            resolve(&mut d.target_train);
            resolve(&mut d.target_dev);
            resolve(&mut d.target_test);
            d.source_train.as_mut().map(resolve);
            d.embeddings.as_mut().map(resolve);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Checks settings and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fraction {} outside (0, 1]",
                self.fraction
            )));
        }
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => Err(Error::Config(
                "give either [data] or [synth], not both".into(),
            )),
            (None, None) => Err(Error::Config("missing [data] or [synth] section".into())),
            (None, Some(spec)) => spec.validate(),
            (Some(d), None) => {
                let paths = [
                    Some(&d.target_train),
                    Some(&d.target_dev),
                    Some(&d.target_test),
                    d.source_train.as_ref(),
                    d.embeddings.as_ref(),
                ];
                for p in paths.into_iter().flatten() {
                    if !p.is_file() {
                        return Err(Error::io(
                            p,
                            std::io::Error::new(std::io::ErrorKind::NotFound, "file not found"),
                        ));
                    }
                }
                Ok(())
            }
        }
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            model: self.model.clone(),
            train: self.train.clone(),
            fraction: self.fraction,
            seed: self.seed,
        }
    }

    pub fn grid_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    /// Reads or generates the corpora, converting to IOBES when needed.
    pub fn load_data(&self) -> Result<ExperimentData> {
        if let Some(spec) = &self.synth {
            let c = SynthCorpora::generate(spec, self.synth_seed)?;
            return Ok(ExperimentData {
                target_train: c.target_train,
                target_dev: c.target_dev,
                target_test: c.target_test,
                source_train: Some(c.source_train),
                pretrained: None,
            });
        }
        let d = self.data.as_ref().expect("validated");
        let read = |path: &Path, tag_col: usize, split: Split| -> Result<Corpus> {
            let mut c = read_conll_columns(path, d.token_column, tag_col)?;
            c.split = split;
            if d.scheme == TagScheme::Bio {
                c = c.to_iobes()?.0;
            }
            for (i, s) in c.sentences.iter().enumerate() {
                if !crate::data::is_valid_iobes(&s.tags) {
                    return Err(Error::Data(format!(
                        "{}: sentence {} is not valid IOBES",
                        path.display(),
                        i + 1
                    )));
                }
            }
            Ok(c)
        };
        Ok(ExperimentData {
            target_train: read(&d.target_train, d.tag_column, Split::Train)?,
            target_dev: read(&d.target_dev, d.tag_column, Split::Dev)?,
            target_test: read(&d.target_test, d.tag_column, Split::Test)?,
            source_train: d
                .source_train
                .as_ref()
                .map(|p| read(p, d.source_tag_column.unwrap_or(d.tag_column), Split::Train))
                .transpose()?,
            pretrained: d
                .embeddings
                .as_ref()
                .map(PretrainedSource::open)
                .transpose()?,
        })
    }
}
