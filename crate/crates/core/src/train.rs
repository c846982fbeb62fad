//! Dual-task training with shuffled task-pure batches, masked updates and
//! early stopping on the target development set.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Encoded, Task};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Metrics};
use crate::layers::Mode;
use crate::model::NerModel;
use crate::numeric::{
    clip_grad_norm, AdamConfig, AdamState, ParamStore, Partition, PartitionSet, Tape,
};
use crate::sharing::soft_penalty_var;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the soft-sharing penalty.
    pub lambda: f64,
    pub optimizer: AdamConfig,
    /// Sentences per batch.
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without dev improvement before stopping.
    pub patience: usize,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.01,
            optimizer: AdamConfig::default(),
            batch_size: 16,
            max_epochs: 100,
            patience: 5,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda {} must be a non-negative number",
                self.lambda
            )));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 || self.clip_norm < 0.0 {
            return Err(Error::Config(
                "learning rate must be positive and clip_norm non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Sentence indices of one task-pure batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Batch {
    pub task: Task,
    pub indices: Vec<usize>,
}

/// One epoch of batches from both tasks in seeded random order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSchedule {
    pub batches: Vec<Batch>,
}

impl BatchSchedule {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn count(&self, task: Task) -> usize {
        self.batches.iter().filter(|b| b.task == task).count()
    }
}

/// Shuffles each corpus, cuts it into batches of `batch_size` (the last may
/// be shorter), then shuffles the batch order across tasks.
pub fn make_schedule(
    source_len: usize,
    target_len: usize,
    batch_size: usize,
    seed: u64,
) -> Result<BatchSchedule> {
    if batch_size < 1 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if target_len == 0 {
        return Err(Error::Data("target training corpus is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut batches = Vec::new();
    for (task, n) in [(Task::Source, source_len), (Task::Target, target_len)] {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        batches.extend(order.chunks(batch_size).map(|c| Batch {
            task,
            indices: c.to_vec(),
        }));
    }
    batches.shuffle(&mut rng);
    Ok(BatchSchedule { batches })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Tracks the best dev score; signals a stop after `patience` epochs
/// without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: None,
            stale: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((_, best)) if score <= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.stale = 0;
                StopDecision::Improved
            }
        }
    }

    /// `(epoch, score)` of the best observation.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub target_batches: usize,
    pub source_batches: usize,
    /// Mean cross-entropy per token.
    pub target_loss: f64,
    pub source_loss: f64,
    /// Penalty value before the last update of the epoch.
    pub share_penalty: f64,
    pub dev_micro_f1: f64,
    pub dev_macro_f1: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_dev: Metrics,
    pub epochs_run: usize,
    pub log: Vec<EpochLog>,
}

/// Training inputs. `source` is empty for single-task training.
pub struct TrainData<'a> {
    pub target: &'a [Encoded],
    pub source: &'a [Encoded],
    pub target_dev: &'a Corpus,
}

fn focus_mask(task: Task) -> PartitionSet {
    let own = match task {
        Task::Target => Partition::Target,
        Task::Source => Partition::Source,
    };
    PartitionSet::of(&[Partition::Shared, own])
}

/// Trains `model` in place and leaves it at the best dev epoch.
///
/// `on_epoch` sees each log line as soon as the epoch ends. A non-finite
/// loss aborts with [`Error::Divergence`], leaving the model at the state
/// that produced it.
pub fn train(
    model: &mut NerModel,
    data: &TrainData,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if !data.source.is_empty() && model.is_target_only() {
        return Err(Error::Config(
            "source data given to a model without a source side".into(),
        ));
    }
    if data.source.is_empty() && model.config.mode.uses_source() {
        return Err(Error::Data(format!(
            "mode {} needs source training data",
            model.config.mode
        )));
    }
    let mut adam = AdamState::new(&model.store, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut best_store: Option<ParamStore> = None;
    let mut best_dev: Option<Metrics> = None;
    let mut log = Vec::new();

    for epoch in 1..=cfg.max_epochs {
        let schedule = make_schedule(
            data.source.len(),
            data.target.len(),
            cfg.batch_size,
            crate::data::synth::derive_seed(seed, &format!("schedule/{epoch}")),
        )?;
        let mut loss_sum = [0.0; 2];
        let mut tokens = [0usize; 2];
        let mut penalty = 0.0;
        for (b, batch) in schedule.batches.iter().enumerate() {
            let corpus = match batch.task {
                Task::Target => data.target,
                Task::Source => data.source,
            };
            let mut batch_loss = 0.0;
            for &i in &batch.indices {
                let grads = {
                    let mut tape = Tape::with_store(&model.store);
                    let loss = model.forward_train(
                        &mut tape,
                        batch.task,
                        &corpus[i],
                        Mode::Train,
                        &mut rng,
                    )?;
                    batch_loss += tape.scalar(loss);
                    tape.backward(loss)?
                };
                model.store.accumulate(&grads);
                tokens[batch.task as usize] += corpus[i].words.len();
            }
            if cfg.lambda > 0.0 && !model.soft.is_empty() {
                let grads = {
                    let mut tape = Tape::with_store(&model.store);
                    let p =
                        soft_penalty_var(&mut tape, &model.soft)?.expect("registry is non-empty");
                    penalty = tape.scalar(p);
                    let weighted = tape.scale(p, cfg.lambda)?;
                    tape.backward(weighted)?
                };
                model.store.accumulate(&grads);
            }
            if !batch_loss.is_finite() || !penalty.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    msg: format!("{} batch loss {batch_loss}, penalty {penalty}", batch.task),
                });
            }
            loss_sum[batch.task as usize] += batch_loss;
            let mask = focus_mask(batch.task);
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut model.store, mask, cfg.clip_norm);
            }
            adam.step(&mut model.store, mask)?;
        }

        let dev = evaluate(model, data.target_dev)?.metrics;
        let decision = stopper.observe(epoch, dev.micro.f1);
        let mean = |t: Task| {
            let n = tokens[t as usize];
            if n == 0 {
                0.0
            } else {
                loss_sum[t as usize] / n as f64
            }
        };
        let entry = EpochLog {
            epoch,
            target_batches: schedule.count(Task::Target),
            source_batches: schedule.count(Task::Source),
            target_loss: mean(Task::Target),
            source_loss: mean(Task::Source),
            share_penalty: penalty,
            dev_micro_f1: dev.micro.f1,
            dev_macro_f1: dev.macro_avg.f1,
            improved: decision == StopDecision::Improved,
        };
        log::info!(
            "epoch {epoch}: target loss {:.4}, source loss {:.4}, dev F1 {:.2}",
            entry.target_loss,
            entry.source_loss,
            entry.dev_micro_f1
        );
        on_epoch(&entry);
        log.push(entry);
        if decision == StopDecision::Improved {
            best_store = Some(model.store.clone());
            best_dev = Some(dev);
        }
        if decision == StopDecision::Stop {
            break;
        }
    }

    let (best_epoch, _) = stopper.best().expect("at least one epoch ran");
    if let Some(store) = best_store {
        model.store = store;
        model.store.zero_grads();
    }
    Ok(TrainOutcome {
        best_epoch,
        best_dev: best_dev.expect("first epoch always improves"),
        epochs_run: log.len(),
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Sentence, Split, Vocab};
    use crate::model::{ModelConfig, ModelMode};
    use crate::sharing::parse_config_code;

    #[test]
    fn schedule_contains_every_batch_once() {
        let s = make_schedule(48, 32, 16, 7).unwrap();
        assert_eq!(s.len(), 5);
        assert_eq!((s.count(Task::Source), s.count(Task::Target)), (3, 2));
        for (task, n) in [(Task::Source, 48), (Task::Target, 32)] {
            let mut idx: Vec<usize> = s
                .batches
                .iter()
                .filter(|b| b.task == task)
                .flat_map(|b| b.indices.clone())
                .collect();
            idx.sort();
            assert_eq!(idx, (0..n).collect::<Vec<_>>());
        }
        assert_eq!(s, make_schedule(48, 32, 16, 7).unwrap());
        assert_eq!(make_schedule(0, 5, 2, 0).unwrap().count(Task::Source), 0);
        assert!(matches!(make_schedule(3, 3, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn first_batch_frequency_tracks_batch_ratio() {
        let trials = 1000;
        let first_source = (0..trials)
            .filter(|&seed| {
                make_schedule(48, 32, 16, seed).unwrap().batches[0].task == Task::Source
            })
            .count();
        let p = 3.0 / 5.0;
        let sd = (p * (1.0 - p) / trials as f64).sqrt();
        let observed = first_source as f64 / trials as f64;
        assert!((observed - p).abs() < 4.0 * sd, "{observed} vs {p}");
    }

    #[test]
    fn early_stopping_semantics() {
        let mut s = EarlyStopper::new(2);
        let seq = [50.0, 60.0, 59.0, 58.0];
        let decisions: Vec<_> = seq
            .iter()
            .enumerate()
            .map(|(i, &f)| s.observe(i + 1, f))
            .collect();
        assert_eq!(
            decisions,
            [
                StopDecision::Improved,
                StopDecision::Improved,
                StopDecision::Continue,
                StopDecision::Stop
            ]
        );
        assert_eq!(s.best(), Some((2, 60.0)));
    }

    fn memo_corpus() -> Corpus {
        let rows = [
            ("take aspirin daily", "O S-DRUG S-FREQ"),
            ("two tabs of ibu pro", "B-DOSE E-DOSE O B-DRUG E-DRUG"),
            ("stop warfarin now", "O S-DRUG O"),
            ("one pill twice daily", "B-DOSE E-DOSE B-FREQ E-FREQ"),
            ("no meds", "O O"),
        ];
        let sentences = rows
            .iter()
            .map(|(t, g)| {
                Sentence::new(
                    t.split(' ').map(str::to_string).collect(),
                    g.split(' ').map(str::to_string).collect(),
                )
                .unwrap()
            })
            .collect();
        Corpus::new("memo", Split::Train, sentences)
    }

    fn small_config(mode: ModelMode) -> ModelConfig {
        ModelConfig {
            word_dim: 8,
            char_dim: 4,
            tag_dim: 4,
            char_hidden: 4,
            word_hidden: 8,
            decoder_hidden: 8,
            dropout: 0.0,
            mode,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn memorizes_small_corpus() {
        let corpus = memo_corpus();
        let vocab = Vocab::build(&corpus, None, []);
        let mut model = NerModel::new(small_config(ModelMode::Baseline), vocab, 1).unwrap();
        let enc: Vec<_> = corpus
            .sentences
            .iter()
            .map(|s| model.vocab.encode(Task::Target, s).unwrap())
            .collect();
        let cfg = TrainConfig {
            batch_size: 2,
            max_epochs: 200,
            patience: 200,
            optimizer: AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            },
            ..TrainConfig::default()
        };
        let data = TrainData {
            target: &enc,
            source: &[],
            target_dev: &corpus,
        };
        let outcome = train(&mut model, &data, &cfg, 3, |_| {}).unwrap();
        assert_eq!(outcome.best_dev.micro.f1, 100.0);
        for s in &corpus.sentences {
            assert_eq!(model.greedy_decode(&s.tokens).unwrap(), s.tags);
        }
        assert!(outcome
            .log
            .iter()
            .filter(|e| e.improved)
            .all(|e| e.dev_micro_f1 <= outcome.best_dev.micro.f1));
    }

    #[test]
    fn masking_and_determinism() {
        let target = memo_corpus();
        let source = memo_corpus();
        let vocab = Vocab::build(&target, Some(&source), []);
        let mode = ModelMode::Ttn(parse_config_code("ISS").unwrap());
        let fresh = NerModel::new(small_config(mode), vocab, 2).unwrap();
        let tenc: Vec<_> = target
            .sentences
            .iter()
            .map(|s| fresh.vocab.encode(Task::Target, s).unwrap())
            .collect();
        let senc: Vec<_> = source
            .sentences
            .iter()
            .map(|s| fresh.vocab.encode(Task::Source, s).unwrap())
            .collect();

        // Target batches only: source-labeled parameters must not move.
        let mut model = fresh.clone();
        let data = TrainData {
            target: &tenc,
            source: &senc[..0],
            target_dev: &target,
        };
        let cfg = TrainConfig {
            max_epochs: 2,
            ..TrainConfig::default()
        };
        let err = train(&mut model, &data, &cfg, 1, |_| {});
        assert!(matches!(err, Err(Error::Data(_))));
        let mut adam = AdamState::new(&model.store, cfg.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            for s in &tenc {
                let grads = {
                    let mut tape = Tape::with_store(&model.store);
                    let ce = model
                        .forward_train(&mut tape, Task::Target, s, Mode::Train, &mut rng)
                        .unwrap();
                    let l = model.total_loss(&mut tape, ce, 0.5).unwrap();
                    tape.backward(l).unwrap()
                };
                model.store.accumulate(&grads);
            }
            adam.step(&mut model.store, focus_mask(Task::Target))
                .unwrap();
        }
        for ((_, a), (_, b)) in fresh.store.iter().zip(model.store.iter()) {
            if a.partition == Partition::Source {
                assert_eq!(a.tensor.values(), b.tensor.values(), "{}", a.name);
            }
        }

        let run = || {
            let mut m = fresh.clone();
            let data = TrainData {
                target: &tenc,
                source: &senc,
                target_dev: &target,
            };
            let out = train(&mut m, &data, &cfg, 4, |_| {}).unwrap();
            (
                serde_json::to_string(&out.log).unwrap(),
                m.to_json().unwrap(),
            )
        };
        assert_eq!(run(), run());
    }
}
