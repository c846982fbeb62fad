use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tags::{bio_to_iobes, entity_type, ConversionStats};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>, tags: Vec<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != tags.len() {
            return Err(Error::Data(format!(
                "sentence needs equal, nonzero token and tag counts (got {} and {})",
                tokens.len(),
                tags.len()
            )));
        }
        Ok(Sentence { tokens, tags })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    pub split: Split,
    pub sentences: Vec<Sentence>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, split: Split, sentences: Vec<Sentence>) -> Self {
        Corpus {
            name: name.into(),
            split,
            sentences,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Sentence::len).sum()
    }

    /// Distinct tags observed in the corpus.
    pub fn tag_set(&self) -> BTreeSet<String> {
        self.sentences
            .iter()
            .flat_map(|s| s.tags.iter().cloned())
            .collect()
    }

    /// Distinct entity types observed in the corpus.
    pub fn entity_types(&self) -> BTreeSet<String> {
        self.sentences
            .iter()
            .flat_map(|s| {
                s.tags
                    .iter()
                    .filter_map(|t| entity_type(t).map(str::to_string))
            })
            .collect()
    }

    /// Converts every sentence from BIO to IOBES.
    pub fn to_iobes(&self) -> Result<(Corpus, ConversionStats)> {
        let mut total = ConversionStats::default();
        let mut sentences = Vec::with_capacity(self.len());
        for s in &self.sentences {
            let (tags, st) = bio_to_iobes(&s.tags)?;
            total.tokens += st.tokens;
            total.repaired += st.repaired;
            total.singletons += st.singletons;
            total.ends += st.ends;
            sentences.push(Sentence {
                tokens: s.tokens.clone(),
                tags,
            });
        }
        Ok((Corpus::new(self.name.clone(), self.split, sentences), total))
    }
}

/// Reads whitespace-separated column text: one token per line, blank lines
/// between sentences. `-DOCSTART-` lines are dropped.
pub fn read_conll_columns(
    path: impl AsRef<Path>,
    token_col: usize,
    tag_col: usize,
) -> Result<Corpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut corpus = parse_conll_columns(&text, token_col, tag_col, &path.display().to_string())?;
    corpus.name = name;
    Ok(corpus)
}

pub fn parse_conll_columns(
    text: &str,
    token_col: usize,
    tag_col: usize,
    origin: &str,
) -> Result<Corpus> {
    let need = token_col.max(tag_col) + 1;
    let mut sentences = Vec::new();
    let (mut tokens, mut tags) = (Vec::new(), Vec::new());
    let mut width: Option<usize> = None;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: origin.to_string(),
        line,
        msg,
    };

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            if !tokens.is_empty() {
                sentences.push(Sentence {
                    tokens: std::mem::take(&mut tokens),
                    tags: std::mem::take(&mut tags),
                });
            }
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() < need {
            return Err(parse_err(
                line_no,
                format!("expected at least {need} columns, found {}", cols.len()),
            ));
        }
        match width {
            None => width = Some(cols.len()),
            Some(w) if w != cols.len() => {
                return Err(parse_err(
                    line_no,
                    format!(
                        "ragged row: {} columns where earlier rows have {w}",
                        cols.len()
                    ),
                ))
            }
            _ => {}
        }
        tokens.push(cols[token_col].to_string());
        tags.push(cols[tag_col].to_string());
    }
    if !tokens.is_empty() {
        sentences.push(Sentence { tokens, tags });
    }
    if sentences.is_empty() {
        return Err(Error::Data(format!("{origin}: empty corpus")));
    }
    Ok(Corpus::new("", Split::Train, sentences))
}

/// Two-column `token tag` rendering; blank line after each sentence.
pub fn render_conll(corpus: &Corpus) -> String {
    let mut out = String::new();
    for s in &corpus.sentences {
        for (tok, tag) in s.tokens.iter().zip(&s.tags) {
            out.push_str(tok);
            out.push(' ');
            out.push_str(tag);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}

/// Writes to a temporary sibling and renames into place, so a failed
/// write never leaves a partial file at `path`.
pub fn write_atomic(path: impl AsRef<Path>, contents: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension(format!(
        "{}.partial",
        path.extension()
            .map(|e| e.to_string_lossy())
            .unwrap_or_default()
    ));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(contents).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_conll(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path, render_conll(corpus).as_bytes())
}

/// Three-column `token gold predicted` output.
pub fn render_predictions(corpus: &Corpus, predictions: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (s, pred) in corpus.sentences.iter().zip(predictions) {
        for ((tok, gold), p) in s.tokens.iter().zip(&s.tags).zip(pred) {
            out.push_str(&format!("{tok} {gold} {p}\n"));
        }
        out.push('\n');
    }
    out
}

/// Uniform sentence-level sample of `⌈fraction · N⌉` sentences without
/// replacement. The sample keeps the corpus order.
pub fn subsample_corpus(corpus: &Corpus, fraction: f64, seed: u64) -> Result<Corpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction {fraction} outside (0, 1]")));
    }
    let n = corpus.len();
    if fraction == 1.0 {
        return Ok(corpus.clone());
    }
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    let sentences = picked
        .into_iter()
        .map(|i| corpus.sentences[i].clone())
        .collect();
    Ok(Corpus::new(corpus.name.clone(), corpus.split, sentences))
}
