use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::vocab::{Index, PAD};
use crate::error::{Error, Result};
use crate::numeric::Tensor;

/// Range of the uniform draw for words without a pretrained vector.
pub const OOV_BOUND: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    /// Vocabulary entries excluding PAD and UNK.
    pub words: usize,
    pub found: usize,
}

impl Coverage {
    pub fn fraction(&self) -> f64 {
        if self.words == 0 {
            0.0
        } else {
            self.found as f64 / self.words as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    /// `[vocab × dim]` initial values for the word table.
    pub matrix: Tensor,
    pub coverage: Coverage,
}

fn parse_vector_line(line: &str) -> Option<(&str, impl Iterator<Item = &str>)> {
    let mut parts = line.split_whitespace();
    let word = parts.next()?;
    Some((word, parts))
}

/// Lowercased words that have a vector in a text-format embedding file.
pub fn read_vector_words(path: impl AsRef<Path>) -> Result<HashSet<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(parse_vector_line)
        .map(|(w, _)| w.to_lowercase())
        .collect())
}

/// Builds the initial word table from a `word v1 ... vd` text file.
///
/// Words are matched lowercased and the first vector for a word wins. The PAD
/// row is zero; every other row without a vector is drawn uniformly from
/// `(−0.25, 0.25)`.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    words: &Index,
    dim: usize,
    seed: u64,
) -> Result<Pretrained> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    pretrained_from_text(&text, words, dim, seed, &path.display().to_string())
}

pub fn pretrained_from_text(
    text: &str,
    words: &Index,
    dim: usize,
    seed: u64,
    origin: &str,
) -> Result<Pretrained> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values: Vec<f64> = (0..words.len() * dim)
        .map(|_| rng.random_range(-OOV_BOUND..OOV_BOUND))
        .collect();
    values[PAD * dim..(PAD + 1) * dim].fill(0.0);
    let mut seen = vec![false; words.len()];
    for (i, line) in text.lines().enumerate() {
        let Some((word, rest)) = parse_vector_line(line) else {
            continue;
        };
        let row: Vec<&str> = rest.collect();
        if row.len() != dim {
            return Err(Error::Config(format!(
                "{origin}:{}: vector has {} dims, model expects {dim}",
                i + 1,
                row.len()
            )));
        }
        let Some(id) = words.get(&word.to_lowercase()) else {
            continue;
        };
        if id == PAD || seen[id] {
            continue;
        }
        for (slot, s) in values[id * dim..(id + 1) * dim].iter_mut().zip(row) {
            *slot = s.parse().map_err(|_| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("bad number {s:?}"),
            })?;
        }
        seen[id] = true;
    }
    let found = seen.iter().skip(2).filter(|&&s| s).count();
    let coverage = Coverage {
        words: words.len().saturating_sub(2),
        found,
    };
    log::info!(
        "pretrained coverage {}/{} ({:.1}%)",
        coverage.found,
        coverage.words,
        100.0 * coverage.fraction()
    );
    Ok(Pretrained {
        matrix: Tensor::matrix(words.len(), dim, values)?,
        coverage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(words: &[&str]) -> Index {
        let mut idx = Index::with_specials();
        for w in words {
            idx.insert(w);
        }
        idx
    }

    #[test]
    fn copies_known_rows() {
        let idx = index(&["the", "cat", "zzz"]);
        let p = pretrained_from_text("The 0.5 -1\ncat 2 3\ncat 9 9\n", &idx, 2, 1, "mem").unwrap();
        assert_eq!(p.matrix.row(idx.get("the").unwrap()), &[0.5, -1.0]);
        assert_eq!(p.matrix.row(idx.get("cat").unwrap()), &[2.0, 3.0]);
        assert_eq!(p.matrix.row(PAD), &[0.0, 0.0]);
        assert_eq!(p.coverage, Coverage { words: 3, found: 2 });
    }

    #[test]
    fn all_oov_rows_in_range() {
        let idx = index(&["a", "b", "c", "d"]);
        let p = pretrained_from_text("x 1 1 1\n", &idx, 3, 7, "mem").unwrap();
        assert!(p.matrix.values().iter().all(|v| v.abs() < OOV_BOUND));
        assert_eq!(p.coverage.found, 0);
    }

    #[test]
    fn dim_mismatch_is_config_error() {
        let idx = index(&["a"]);
        assert!(matches!(
            pretrained_from_text("a 1 2 3\n", &idx, 2, 0, "mem"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn coverage_matches_line_scan() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vec.txt");
        let words: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let file: String = words
            .iter()
            .step_by(3)
            .map(|w| format!("{w} 0.1 0.2\n"))
            .collect();
        fs::write(&path, &file).unwrap();
        let idx = index(&words.iter().map(String::as_str).collect::<Vec<_>>());
        let p = load_pretrained_embeddings(&path, &idx, 2, 0).unwrap();
        let in_file = read_vector_words(&path).unwrap();
        let expected = words.iter().filter(|w| in_file.contains(*w)).count();
        assert_eq!(p.coverage.found, expected);
        assert_eq!(expected, 14);
    }
}
