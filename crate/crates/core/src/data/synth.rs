//! Template-grammar generator for paired source/target corpora.
//!
//! Each entity type owns a lexicon of pseudo-word surface forms per task. A
//! fraction `overlap` of every shared type's lexicon, and of the sentence
//! templates, is identical across the two tasks. Entity types are only
//! weakly marked by spelling (a type suffix on a fraction of forms), so
//! recognizing a form's type mostly requires having seen it.

use std::collections::HashSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, Sentence, Split};
use super::tags::{spans_to_iobes, Span};
use super::vocab::Task;
use crate::error::{Error, Result};
use crate::layers::fnv1a;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    /// Types present in both tasks.
    pub shared_types: Vec<String>,
    pub source_only_types: Vec<String>,
    pub target_only_types: Vec<String>,
    /// Fraction of lexicon entries and templates common to both tasks.
    pub overlap: f64,
    /// Surface forms per type per task.
    pub lexicon_size: usize,
    /// Context words available to templates.
    pub filler_vocab: usize,
    /// Templates per task.
    pub templates: usize,
    /// Context-word count per template, inclusive range.
    pub min_context: usize,
    pub max_context: usize,
    pub max_slots: usize,
    pub max_entity_len: usize,
    /// Probability that a surface form carries its type's suffix.
    pub suffix_rate: f64,
    /// Probability of replacing a context word by a random filler.
    pub context_noise: f64,
    /// Seeds the lexicons and templates (the grammar).
    pub grammar_seed: u64,
    pub source_sentences: usize,
    pub target_sentences: usize,
    pub dev_sentences: usize,
    pub test_sentences: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            shared_types: vec!["DRUG".into(), "DOSE".into(), "FREQ".into()],
            source_only_types: vec!["ROUTE".into()],
            target_only_types: vec!["FORM".into()],
            overlap: 0.8,
            lexicon_size: 120,
            filler_vocab: 150,
            templates: 40,
            min_context: 2,
            max_context: 6,
            max_slots: 2,
            max_entity_len: 2,
            suffix_rate: 0.3,
            context_noise: 0.1,
            grammar_seed: 17,
            source_sentences: 5000,
            target_sentences: 5000,
            dev_sentences: 300,
            test_sentences: 500,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if !(0.0..=1.0).contains(&self.overlap) {
            return fail("overlap must be in [0, 1]");
        }
        for (name, p) in [
            ("suffix_rate", self.suffix_rate),
            ("context_noise", self.context_noise),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return fail(&format!("{name} must be in [0, 1]"));
            }
        }
        if self.shared_types.is_empty()
            && (self.source_only_types.is_empty() || self.target_only_types.is_empty())
        {
            return fail("each task needs at least one entity type");
        }
        let mut seen = HashSet::new();
        for t in self
            .types(Task::Source)
            .chain(self.target_only_types.iter())
        {
            if t.is_empty() || t.contains(char::is_whitespace) || t.contains('-') {
                return fail(&format!("bad type name {t:?}"));
            }
            if !seen.insert(t) {
                return fail(&format!("type {t} listed twice"));
            }
        }
        if self.lexicon_size == 0 || self.filler_vocab == 0 || self.templates == 0 {
            return fail("lexicon_size, filler_vocab and templates must be positive");
        }
        if self.min_context > self.max_context || self.max_slots == 0 || self.max_entity_len == 0 {
            return fail("need min_context <= max_context and positive max_slots, max_entity_len");
        }
        Ok(())
    }

    pub fn types(&self, task: Task) -> impl Iterator<Item = &String> {
        let own = match task {
            Task::Source => &self.source_only_types,
            Task::Target => &self.target_only_types,
        };
        self.shared_types.iter().chain(own)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: SynthSpec =
            toml::from_str(text).map_err(|e| Error::Config(format!("synthetic spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Word(String),
    /// Allowed types; empty means any type of the task using the template.
    Entity(Vec<String>),
}

#[derive(Debug, Clone)]
struct TaskGrammar {
    types: Vec<String>,
    lexicons: Vec<Vec<Vec<String>>>,
    templates: Vec<Vec<Slot>>,
}

/// Lexicons and templates for both tasks, fixed by the grammar seed.
#[derive(Debug, Clone)]
pub struct Grammar {
    target: TaskGrammar,
    source: TaskGrammar,
    fillers: Vec<String>,
    noise: f64,
}

const ONSETS: &[&str] = &[
    "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr", "st", "pl",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];

struct WordMill {
    rng: ChaCha8Rng,
    used: HashSet<String>,
}

impl WordMill {
    fn fresh(&mut self, syllables: usize, suffix: &str) -> String {
        for attempt in 0.. {
            // Lengthen words once short combinations run out.
            let syllables = syllables + attempt / 200;
            let mut w: String = (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}",
                        ONSETS.choose(&mut self.rng).unwrap(),
                        VOWELS.choose(&mut self.rng).unwrap()
                    )
                })
                .collect();
            w.push_str(suffix);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
        unreachable!()
    }

    fn form(&mut self, max_len: usize, suffix: &str, suffix_rate: f64) -> Vec<String> {
        let len = self.rng.random_range(1..=max_len);
        let marked = self.rng.random_bool(suffix_rate);
        (0..len)
            .map(|i| {
                let sfx = if marked && i + 1 == len { suffix } else { "" };
                let syl = self.rng.random_range(2..=3);
                self.fresh(syl, sfx)
            })
            .collect()
    }
}

fn type_suffix(ty: &str) -> String {
    let h = fnv1a(ty.as_bytes());
    let cons = ["x", "q", "j", "w", "h", "c", "y"];
    format!(
        "{}{}",
        cons[(h % cons.len() as u64) as usize],
        cons[((h >> 8) % cons.len() as u64) as usize]
    )
}

impl Grammar {
    pub fn new(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let mut mill = WordMill {
            rng: ChaCha8Rng::seed_from_u64(spec.grammar_seed),
            used: HashSet::new(),
        };
        let fillers: Vec<String> = (0..spec.filler_vocab)
            .map(|i| mill.fresh(1 + i % 2, ""))
            .collect();

        let n_shared = (spec.overlap * spec.lexicon_size as f64).round() as usize;
        let mut lex_target = Vec::new();
        let mut lex_source = Vec::new();
        for ty in &spec.shared_types {
            let sfx = type_suffix(ty);
            let mut form = || mill.form(spec.max_entity_len, &sfx, spec.suffix_rate);
            let common: Vec<_> = (0..n_shared).map(|_| form()).collect();
            let mut src = common.clone();
            src.extend((n_shared..spec.lexicon_size).map(|_| form()));
            let mut tgt = common;
            tgt.extend((n_shared..spec.lexicon_size).map(|_| form()));
            lex_source.push(src);
            lex_target.push(tgt);
        }
        for (own, lex) in [
            (&spec.source_only_types, &mut lex_source),
            (&spec.target_only_types, &mut lex_target),
        ] {
            for ty in own {
                let sfx = type_suffix(ty);
                lex.push(
                    (0..spec.lexicon_size)
                        .map(|_| mill.form(spec.max_entity_len, &sfx, spec.suffix_rate))
                        .collect(),
                );
            }
        }

        let mut rng = mill.rng;
        let mut template = |types: &[String]| -> Vec<Slot> {
            let n_ctx = rng.random_range(spec.min_context..=spec.max_context);
            let n_slots = rng.random_range(1..=spec.max_slots);
            let mut slots: Vec<Slot> = (0..n_ctx)
                .map(|_| Slot::Word(fillers.choose(&mut rng).unwrap().clone()))
                .collect();
            for _ in 0..n_slots {
                let allowed = if types.is_empty() {
                    Vec::new()
                } else {
                    let k = rng.random_range(1..=types.len().min(2));
                    types.choose_multiple(&mut rng, k).cloned().collect()
                };
                let at = rng.random_range(0..=slots.len());
                slots.insert(at, Slot::Entity(allowed));
            }
            slots
        };
        let n_shared_tpl = (spec.overlap * spec.templates as f64).round() as usize;
        let common: Vec<_> = (0..n_shared_tpl)
            .map(|_| template(&spec.shared_types))
            .collect();
        let source_types: Vec<String> = spec.types(Task::Source).cloned().collect();
        let target_types: Vec<String> = spec.types(Task::Target).cloned().collect();
        let mut src_tpl = common.clone();
        src_tpl.extend((n_shared_tpl..spec.templates).map(|_| template(&source_types)));
        let mut tgt_tpl = common;
        tgt_tpl.extend((n_shared_tpl..spec.templates).map(|_| template(&target_types)));

        Ok(Grammar {
            target: TaskGrammar {
                types: target_types,
                lexicons: lex_target,
                templates: tgt_tpl,
            },
            source: TaskGrammar {
                types: source_types,
                lexicons: lex_source,
                templates: src_tpl,
            },
            fillers,
            noise: spec.context_noise,
        })
    }

    fn task(&self, task: Task) -> &TaskGrammar {
        match task {
            Task::Target => &self.target,
            Task::Source => &self.source,
        }
    }

    /// Every surface form (joined by spaces) of `ty` in `task`'s lexicon.
    pub fn lexicon(&self, task: Task, ty: &str) -> Vec<String> {
        let g = self.task(task);
        g.types
            .iter()
            .position(|t| t == ty)
            .map(|i| g.lexicons[i].iter().map(|f| f.join(" ")).collect())
            .unwrap_or_default()
    }

    pub fn sentence(&self, task: Task, rng: &mut impl Rng) -> Sentence {
        let g = self.task(task);
        let template = g
            .templates
            .choose(rng)
            .expect("templates validated non-empty");
        let mut tokens = Vec::new();
        let mut spans = Vec::new();
        for slot in template {
            match slot {
                Slot::Word(w) => {
                    let w = if rng.random_bool(self.noise) {
                        self.fillers.choose(rng).unwrap()
                    } else {
                        w
                    };
                    tokens.push(w.clone());
                }
                Slot::Entity(allowed) => {
                    let ty = if allowed.is_empty() {
                        g.types.choose(rng).unwrap()
                    } else {
                        allowed.choose(rng).unwrap()
                    };
                    let i = g.types.iter().position(|t| t == ty).unwrap();
                    let form = g.lexicons[i].choose(rng).unwrap();
                    let start = tokens.len();
                    tokens.extend(form.iter().cloned());
                    spans.push(Span::new(start, tokens.len() - 1, ty.clone()));
                }
            }
        }
        let tags = spans_to_iobes(&spans, tokens.len());
        Sentence { tokens, tags }
    }

    pub fn corpus(&self, task: Task, split: Split, n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sentences = (0..n).map(|_| self.sentence(task, &mut rng)).collect();
        Corpus::new(format!("{task}_{split}"), split, sentences)
    }
}

/// `n` training sentences for each task.
pub fn synth_generate(spec: &SynthSpec, n_sentences: usize, seed: u64) -> Result<(Corpus, Corpus)> {
    let g = Grammar::new(spec)?;
    let source = g.corpus(
        Task::Source,
        Split::Train,
        n_sentences,
        derive_seed(seed, "source/train"),
    );
    let target = g.corpus(
        Task::Target,
        Split::Train,
        n_sentences,
        derive_seed(seed, "target/train"),
    );
    Ok((source, target))
}

/// Train/dev/test corpora for both tasks at the configured sizes.
#[derive(Debug, Clone)]
pub struct SynthCorpora {
    pub source_train: Corpus,
    pub source_dev: Corpus,
    pub source_test: Corpus,
    pub target_train: Corpus,
    pub target_dev: Corpus,
    pub target_test: Corpus,
}

impl SynthCorpora {
    pub fn generate(spec: &SynthSpec, seed: u64) -> Result<Self> {
        let g = Grammar::new(spec)?;
        let make = |task: Task, split: Split, n: usize| {
            g.corpus(
                task,
                split,
                n,
                derive_seed(seed, &format!("{task}/{split}")),
            )
        };
        Ok(SynthCorpora {
            source_train: make(Task::Source, Split::Train, spec.source_sentences),
            source_dev: make(Task::Source, Split::Dev, spec.dev_sentences),
            source_test: make(Task::Source, Split::Test, spec.test_sentences),
            target_train: make(Task::Target, Split::Train, spec.target_sentences),
            target_dev: make(Task::Target, Split::Dev, spec.dev_sentences),
            target_test: make(Task::Target, Split::Test, spec.test_sentences),
        })
    }

    pub fn all(&self) -> [&Corpus; 6] {
        [
            &self.source_train,
            &self.source_dev,
            &self.source_test,
            &self.target_train,
            &self.target_dev,
            &self.target_test,
        ]
    }
}

pub(crate) fn derive_seed(seed: u64, label: &str) -> u64 {
    seed ^ fnv1a(label.as_bytes()).rotate_left(17)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tags::{iobes_to_spans, is_valid_iobes};

    fn small(overlap: f64) -> SynthSpec {
        SynthSpec {
            overlap,
            lexicon_size: 30,
            source_sentences: 200,
            target_sentences: 200,
            dev_sentences: 20,
            test_sentences: 20,
            ..SynthSpec::default()
        }
    }

    fn entity_forms(c: &Corpus) -> HashSet<String> {
        c.sentences
            .iter()
            .flat_map(|s| {
                iobes_to_spans(&s.tags)
                    .into_iter()
                    .map(|sp| s.tokens[sp.start..=sp.end].join(" "))
                    .collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn tags_always_valid() {
        let c = SynthCorpora::generate(&small(0.5), 3).unwrap();
        for corpus in c.all() {
            assert!(corpus.sentences.iter().all(|s| is_valid_iobes(&s.tags)));
            assert!(corpus
                .sentences
                .iter()
                .all(|s| s.tokens.len() == s.tags.len()));
        }
        assert!(c.source_train.entity_types().contains("ROUTE"));
        assert!(!c.target_train.entity_types().contains("ROUTE"));
        assert!(c.target_train.entity_types().contains("FORM"));
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = small(0.8);
        let (a, b) = synth_generate(&spec, 50, 9).unwrap();
        let (c, d) = synth_generate(&spec, 50, 9).unwrap();
        assert_eq!((&a, &b), (&c, &d));
        let (e, _) = synth_generate(&spec, 50, 10).unwrap();
        assert_ne!(e, c);
    }

    #[test]
    fn full_overlap_shares_lexicons() {
        let g = Grammar::new(&small(1.0)).unwrap();
        for ty in ["DRUG", "DOSE", "FREQ"] {
            assert_eq!(g.lexicon(Task::Source, ty), g.lexicon(Task::Target, ty));
        }
    }

    #[test]
    fn zero_overlap_disjoint_forms() {
        let spec = small(0.0);
        let g = Grammar::new(&spec).unwrap();
        let all = |task| -> HashSet<String> {
            spec.types(task).flat_map(|t| g.lexicon(task, t)).collect()
        };
        assert!(all(Task::Source).is_disjoint(&all(Task::Target)));
        let (s, t) = synth_generate(&spec, 300, 1).unwrap();
        assert!(entity_forms(&s).is_disjoint(&entity_forms(&t)));
    }

    #[test]
    fn partial_overlap_fraction() {
        let spec = small(0.8);
        let g = Grammar::new(&spec).unwrap();
        let s: HashSet<_> = g.lexicon(Task::Source, "DRUG").into_iter().collect();
        let t: HashSet<_> = g.lexicon(Task::Target, "DRUG").into_iter().collect();
        assert_eq!(s.intersection(&t).count(), 24);
    }

    #[test]
    fn validation() {
        assert!(SynthSpec {
            overlap: 1.5,
            ..small(0.0)
        }
        .validate()
        .is_err());
        assert!(SynthSpec::from_toml("overlap = 0.3\nbogus = 1\n").is_err());
        let spec = SynthSpec::from_toml("overlap = 0.3\nlexicon_size = 10\n").unwrap();
        assert_eq!(spec.lexicon_size, 10);
        assert_eq!(spec.templates, SynthSpec::default().templates);
    }
}
