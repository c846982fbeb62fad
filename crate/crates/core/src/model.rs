//! Hierarchical tagger: character BiLSTM → word BiLSTM → LSTM decoder with
//! previous-tag feedback, assembled as a baseline, tunable or gated
//! transfer network.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::data::{write_atomic, Encoded, Task, Vocab};
use crate::error::{Error, Result};
use crate::layers::{dropout_apply, BiLstm, EmbeddingTable, Init, LinearLayer, LstmCell, Mode};
use crate::numeric::{
    finite_diff_check, Coords, GradCheckReport, ParamId, ParamStore, Partition, Shape, Tape,
    Tensor, Var,
};
use crate::sharing::{
    dtn_forward_target, parse_config_code, soft_penalty_var, Component, ComponentKind,
    ComponentScheme, DtnVariant, GateClamp, GateDims, GateMode, GateValues, Route, SharingScheme,
    SoftRegistry, TtnConfig,
};

/// Which network is built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelMode {
    /// Target task only; no transfer.
    Baseline,
    Ttn(TtnConfig),
    Dtn,
    DtnHs,
}

impl ModelMode {
    pub fn scheme(&self, kind: ComponentKind) -> ComponentScheme {
        match self {
            ModelMode::Baseline => ComponentScheme::Ttn(SharingScheme::Independent),
            ModelMode::Ttn(cfg) => ComponentScheme::Ttn(cfg.scheme(kind)),
            ModelMode::Dtn => ComponentScheme::Dtn(DtnVariant::Full),
            ModelMode::DtnHs => ComponentScheme::Dtn(DtnVariant::Hs),
        }
    }

    pub fn is_dtn(&self) -> bool {
        matches!(self, ModelMode::Dtn | ModelMode::DtnHs)
    }

    pub fn uses_source(&self) -> bool {
        !matches!(self, ModelMode::Baseline)
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelMode::Baseline => f.write_str("baseline"),
            ModelMode::Ttn(cfg) => write!(f, "ttn:{cfg}"),
            ModelMode::Dtn => f.write_str("dtn"),
            ModelMode::DtnHs => f.write_str("dtn-hs"),
        }
    }
}

impl FromStr for ModelMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        match lower.as_str() {
            "baseline" => Ok(ModelMode::Baseline),
            "dtn" => Ok(ModelMode::Dtn),
            "dtn-hs" | "dtn_hs" => Ok(ModelMode::DtnHs),
            _ => match lower.strip_prefix("ttn:") {
                Some(code) => parse_config_code(code).map(ModelMode::Ttn),
                None => Err(Error::Config(format!(
                    "unknown mode {s:?} (expected baseline, ttn:CODE, dtn or dtn-hs)"
                ))),
            },
        }
    }
}

impl Serialize for ModelMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ModelMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub word_dim: usize,
    pub char_dim: usize,
    pub tag_dim: usize,
    /// Per direction.
    pub char_hidden: usize,
    /// Per direction.
    pub word_hidden: usize,
    pub decoder_hidden: usize,
    pub dropout: f64,
    pub mode: ModelMode,
    pub gate_mode: GateMode,
    pub freeze_word_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            word_dim: 100,
            char_dim: 25,
            tag_dim: 50,
            char_hidden: 50,
            word_hidden: 100,
            decoder_hidden: 50,
            dropout: 0.5,
            mode: ModelMode::Baseline,
            gate_mode: GateMode::Vector,
            freeze_word_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("word_dim", self.word_dim),
            ("char_dim", self.char_dim),
            ("tag_dim", self.tag_dim),
            ("char_hidden", self.char_hidden),
            ("word_hidden", self.word_hidden),
            ("decoder_hidden", self.decoder_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, d)| *d == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn char_out(&self) -> usize {
        2 * self.char_hidden
    }

    pub fn word_in(&self) -> usize {
        self.char_out() + self.word_dim
    }

    pub fn word_out(&self) -> usize {
        2 * self.word_hidden
    }

    pub fn decoder_in(&self) -> usize {
        self.word_out() + self.tag_dim
    }
}

/// Character embeddings plus a BiLSTM whose final states encode a word.
#[derive(Debug, Clone)]
pub struct CharCore {
    pub emb: EmbeddingTable,
    pub rnn: BiLstm,
}

impl CharCore {
    pub fn encode(&self, tape: &mut Tape, chars: &[usize]) -> Result<Var> {
        if chars.is_empty() {
            return Err(Error::Precondition("word without characters".into()));
        }
        let xs = self.emb.lookup(tape, chars)?;
        self.rnn.final_state(tape, &xs)
    }
}

/// Tag embeddings, start tag and output projection of one task.
#[derive(Debug, Clone)]
pub struct Head {
    pub tag_emb: EmbeddingTable,
    pub bos: ParamId,
    pub out: LinearLayer,
}

impl Head {
    fn register(
        store: &mut ParamStore,
        init: &Init,
        task: Task,
        tags: usize,
        cfg: &ModelConfig,
    ) -> Result<Self> {
        let part = match task {
            Task::Target => Partition::Target,
            Task::Source => Partition::Source,
        };
        let p = format!("head.{task}");
        let tag_emb = EmbeddingTable::register(
            store,
            init,
            &format!("{p}.tag_emb"),
            part,
            tags,
            cfg.tag_dim,
        )?;
        let bos_name = format!("{p}.bos");
        let bound = (3.0 / cfg.tag_dim as f64).sqrt();
        let bos = store.register(
            &bos_name,
            part,
            init.uniform(&bos_name, Shape::Vector(cfg.tag_dim), bound),
        )?;
        let out = LinearLayer::register(
            store,
            init,
            &format!("{p}.out"),
            part,
            cfg.decoder_hidden,
            tags,
        )?;
        Ok(Head { tag_emb, bos, out })
    }
}

/// How the decoder's previous-tag input is chosen.
#[derive(Debug, Clone, Copy)]
pub enum Feed<'a> {
    /// Gold tags (teacher forcing); the pass also returns the loss.
    Teacher(&'a [usize]),
    /// The model's own argmax.
    Greedy,
}

/// Gate activations at one token of one component.
#[derive(Debug, Clone, PartialEq)]
pub struct GateAt {
    pub token_index: usize,
    pub component: ComponentKind,
    pub g1: Vec<f64>,
    pub g2: Option<Vec<f64>>,
}

/// Result of one forward pass over a sentence.
#[derive(Debug, Clone)]
pub struct Pass {
    /// Summed token cross-entropy (teacher forcing only).
    pub loss: Option<Var>,
    pub logits: Vec<Var>,
    pub predicted: Vec<usize>,
    pub gates: Vec<GateAt>,
}

struct PassCtx<'r> {
    task: Task,
    mode: Mode,
    capture: bool,
    rng: &'r mut ChaCha8Rng,
    gates: Vec<GateAt>,
}

impl PassCtx<'_> {
    fn record(&mut self, tape: &Tape, t: usize, component: ComponentKind, g: GateValues) {
        if self.capture {
            self.gates.push(GateAt {
                token_index: t,
                component,
                g1: tape.value(g.g1).to_vec(),
                g2: g.g2.map(|v| tape.value(v).to_vec()),
            });
        }
    }
}

enum DecoderState {
    Single(Var),
    Gated(Vec<Var>),
}

const CHECKPOINT_FORMAT: &str = "transfer-ner-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    seed: u64,
    target_only: bool,
    vocab: Vocab,
    tensors: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    partition: Partition,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// A complete tagger with its parameters and vocabularies.
#[derive(Debug, Clone)]
pub struct NerModel {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub word_emb: EmbeddingTable,
    pub char_enc: Component<CharCore>,
    pub word_enc: Component<BiLstm>,
    pub decoder: Component<LstmCell>,
    pub target_head: Head,
    pub source_head: Option<Head>,
    pub soft: SoftRegistry,
    /// Gate overrides applied in every forward pass.
    pub clamp: GateClamp,
    seed: u64,
    target_only: bool,
}

impl NerModel {
    /// Builds the network for `config.mode`. Every tensor is initialized
    /// from `seed` and its own name.
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let target_only = !config.mode.uses_source();
        Self::build(config, vocab, seed, target_only)
    }

    fn build(config: ModelConfig, vocab: Vocab, seed: u64, target_only: bool) -> Result<Self> {
        config.validate()?;
        if vocab.target_tags.is_empty() {
            return Err(Error::Config("target tag vocabulary is empty".into()));
        }
        let init = Init::new(seed);
        let mut store = ParamStore::new();
        let cfg = &config;

        let mut word_emb = EmbeddingTable::register(
            &mut store,
            &init,
            "word_emb",
            Partition::Shared,
            vocab.words.len(),
            cfg.word_dim,
        )?;
        word_emb.frozen_row = Some(crate::data::vocab::PAD);
        store.tensor_mut(word_emb.id).values_mut()[..cfg.word_dim].fill(0.0);
        store.param_mut(word_emb.id).trainable = !cfg.freeze_word_embeddings;

        let n_chars = vocab.chars.len();
        let mut char_core = |s: &mut ParamStore, p: &str, part: Partition| -> Result<CharCore> {
            let mut emb = EmbeddingTable::register(
                s,
                &init,
                &format!("{p}.emb"),
                part,
                n_chars,
                cfg.char_dim,
            )?;
            emb.frozen_row = Some(crate::data::vocab::PAD);
            let rnn = BiLstm::register(
                s,
                &init,
                &format!("{p}.rnn"),
                part,
                cfg.char_dim,
                cfg.char_hidden,
            )?;
            Ok(CharCore { emb, rnn })
        };
        let char_enc = Component::register(
            &mut store,
            ComponentKind::CharEnc.as_str(),
            cfg.mode.scheme(ComponentKind::CharEnc),
            target_only,
            GateDims {
                d_out: cfg.char_out(),
                d_in: cfg.char_dim,
                mode: cfg.gate_mode,
            },
            &mut char_core,
        )?;

        let mut word_core = |s: &mut ParamStore, p: &str, part: Partition| {
            BiLstm::register(
                s,
                &init,
                &format!("{p}.rnn"),
                part,
                cfg.word_in(),
                cfg.word_hidden,
            )
        };
        let word_enc = Component::register(
            &mut store,
            ComponentKind::WordEnc.as_str(),
            cfg.mode.scheme(ComponentKind::WordEnc),
            target_only,
            GateDims {
                d_out: cfg.word_out(),
                d_in: cfg.word_in(),
                mode: cfg.gate_mode,
            },
            &mut word_core,
        )?;

        let mut dec_core = |s: &mut ParamStore, p: &str, part: Partition| {
            LstmCell::register(
                s,
                &init,
                &format!("{p}.rnn"),
                part,
                cfg.decoder_in(),
                cfg.decoder_hidden,
            )
        };
        let decoder = Component::register(
            &mut store,
            ComponentKind::Decoder.as_str(),
            cfg.mode.scheme(ComponentKind::Decoder),
            target_only,
            GateDims {
                d_out: cfg.decoder_hidden,
                d_in: cfg.decoder_in(),
                mode: cfg.gate_mode,
            },
            &mut dec_core,
        )?;

        let target_head = Head::register(
            &mut store,
            &init,
            Task::Target,
            vocab.target_tags.len(),
            cfg,
        )?;
        let source_head = if target_only {
            None
        } else {
            if vocab.source_tags.is_empty() {
                return Err(Error::Config("source tag vocabulary is empty".into()));
            }
            Some(Head::register(
                &mut store,
                &init,
                Task::Source,
                vocab.source_tags.len(),
                cfg,
            )?)
        };

        let mut soft = SoftRegistry::default();
        let prefixes = [
            char_enc.soft_prefixes(ComponentKind::CharEnc.as_str()),
            word_enc.soft_prefixes(ComponentKind::WordEnc.as_str()),
            decoder.soft_prefixes(ComponentKind::Decoder.as_str()),
        ];
        for (a, b) in prefixes.into_iter().flatten() {
            soft.add(&store, &a, &b)?;
        }

        Ok(NerModel {
            config,
            vocab,
            store,
            word_emb,
            char_enc,
            word_enc,
            decoder,
            target_head,
            source_head,
            soft,
            clamp: GateClamp::default(),
            seed,
            target_only,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_target_only(&self) -> bool {
        self.target_only
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_values()
    }

    /// Replaces the word table's values (e.g. with pretrained vectors).
    pub fn set_word_embeddings(&mut self, matrix: &Tensor) -> Result<()> {
        let t = self.store.tensor_mut(self.word_emb.id);
        if t.shape() != matrix.shape() {
            return Err(Error::dim(
                "set_word_embeddings",
                &matrix.shape().dims(),
                &t.shape().dims(),
            ));
        }
        t.values_mut().copy_from_slice(matrix.values());
        Ok(())
    }

    fn head(&self, task: Task) -> Result<&Head> {
        match task {
            Task::Target => Ok(&self.target_head),
            Task::Source => self
                .source_head
                .as_ref()
                .ok_or_else(|| Error::Precondition("this model has no source head".into())),
        }
    }

    fn encode_word(
        &self,
        tape: &mut Tape,
        ctx: &mut PassCtx,
        t: usize,
        chars: &[usize],
    ) -> Result<Var> {
        match self.char_enc.route(ctx.task)? {
            Route::Single(core) => core.encode(tape, chars),
            Route::DtnTarget(unit) => {
                let embedded = unit.hard.emb.lookup(tape, chars)?;
                let a = tape.mean(&embedded)?;
                let (out, g) =
                    dtn_forward_target(tape, unit, a, self.clamp, |tape, c| c.encode(tape, chars))?;
                ctx.record(tape, t, ComponentKind::CharEnc, g);
                Ok(out)
            }
            Route::DtnSource(unit) => {
                crate::sharing::dtn_forward_source(tape, unit, |tape, c| c.encode(tape, chars))
            }
        }
    }

    fn encode_sentence(&self, tape: &mut Tape, ctx: &mut PassCtx, ms: &[Var]) -> Result<Vec<Var>> {
        match self.word_enc.route(ctx.task)? {
            Route::Single(core) => core.full(tape, ms),
            Route::DtnTarget(unit) => {
                let soft = unit.soft_target.full(tape, ms)?;
                let hard = unit.hard.full(tape, ms)?;
                let ind = unit.ind.as_ref().map(|c| c.full(tape, ms)).transpose()?;
                (0..ms.len())
                    .map(|t| {
                        let hi = ind.as_ref().map(|v| v[t]);
                        let (out, g) =
                            unit.combine_target(tape, soft[t], hard[t], hi, ms[t], self.clamp)?;
                        ctx.record(tape, t, ComponentKind::WordEnc, g);
                        Ok(out)
                    })
                    .collect()
            }
            Route::DtnSource(unit) => {
                let source = unit
                    .soft_source
                    .as_ref()
                    .expect("route checked the source branch");
                let soft = source.full(tape, ms)?;
                let hard = unit.hard.full(tape, ms)?;
                soft.into_iter()
                    .zip(hard)
                    .map(|(s, h)| unit.combine_source(tape, s, h))
                    .collect()
            }
        }
    }

    fn decoder_start(&self, tape: &mut Tape, task: Task) -> Result<DecoderState> {
        Ok(match self.decoder.route(task)? {
            Route::Single(cell) => DecoderState::Single(cell.zero_state(tape)),
            Route::DtnTarget(unit) => {
                let mut states = vec![
                    unit.soft_target.zero_state(tape),
                    unit.hard.zero_state(tape),
                ];
                if let Some(ind) = &unit.ind {
                    states.push(ind.zero_state(tape));
                }
                DecoderState::Gated(states)
            }
            Route::DtnSource(unit) => DecoderState::Gated(vec![
                unit.soft_source
                    .as_ref()
                    .expect("route checked")
                    .zero_state(tape),
                unit.hard.zero_state(tape),
            ]),
        })
    }

    fn decoder_step(
        &self,
        tape: &mut Tape,
        ctx: &mut PassCtx,
        t: usize,
        x: Var,
        state: &mut DecoderState,
    ) -> Result<Var> {
        let route = self.decoder.route(ctx.task)?;
        match (route, state) {
            (Route::Single(cell), DecoderState::Single(s)) => {
                *s = cell.step(tape, x, *s)?;
                cell.hidden(tape, *s)
            }
            (Route::DtnTarget(unit), DecoderState::Gated(states)) => {
                let mut cells = vec![&unit.soft_target, &unit.hard];
                cells.extend(unit.ind.as_ref());
                let outs = cells
                    .into_iter()
                    .zip(states.iter_mut())
                    .map(|(cell, s)| {
                        *s = cell.step(tape, x, *s)?;
                        cell.hidden(tape, *s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let (out, g) = unit.combine_target(
                    tape,
                    outs[0],
                    outs[1],
                    outs.get(2).copied(),
                    x,
                    self.clamp,
                )?;
                ctx.record(tape, t, ComponentKind::Decoder, g);
                Ok(out)
            }
            (Route::DtnSource(unit), DecoderState::Gated(states)) => {
                let source = unit.soft_source.as_ref().expect("route checked");
                let outs = [source, &unit.hard]
                    .into_iter()
                    .zip(states.iter_mut())
                    .map(|(cell, s)| {
                        *s = cell.step(tape, x, *s)?;
                        cell.hidden(tape, *s)
                    })
                    .collect::<Result<Vec<_>>>()?;
                unit.combine_source(tape, outs[0], outs[1])
            }
            _ => Err(Error::State(
                "decoder state does not match its route".into(),
            )),
        }
    }

    /// One forward pass over an encoded sentence.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        task: Task,
        input: &Encoded,
        feed: Feed,
        mode: Mode,
        capture_gates: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Pass> {
        let n = input.words.len();
        if n == 0 || input.chars.len() != n {
            return Err(Error::Precondition(format!(
                "sentence needs matching nonzero word and char sequences (got {} and {})",
                n,
                input.chars.len()
            )));
        }
        if let Feed::Teacher(gold) = feed {
            if gold.len() != n {
                return Err(Error::Data(format!(
                    "{} gold tags for {n} tokens",
                    gold.len()
                )));
            }
        }
        let head = self.head(task)?;
        let rate = self.config.dropout;
        let mut ctx = PassCtx {
            task,
            mode,
            capture: capture_gates,
            rng,
            gates: Vec::new(),
        };

        let word_vecs = self.word_emb.lookup(tape, &input.words)?;
        let mut ms = Vec::with_capacity(n);
        for (t, (chars, &w)) in input.chars.iter().zip(&word_vecs).enumerate() {
            let hc = self.encode_word(tape, &mut ctx, t, chars)?;
            let hc = dropout_apply(tape, hc, rate, ctx.mode, ctx.rng)?;
            let w = dropout_apply(tape, w, rate, ctx.mode, ctx.rng)?;
            ms.push(tape.concat(&[hc, w], 0)?);
        }
        let hs = self.encode_sentence(tape, &mut ctx, &ms)?;

        let mut state = self.decoder_start(tape, task)?;
        let mut prev = tape.param(head.bos);
        let mut logits = Vec::with_capacity(n);
        let mut predicted = Vec::with_capacity(n);
        let mut losses = Vec::new();
        for (t, &h) in hs.iter().enumerate() {
            let h = dropout_apply(tape, h, rate, ctx.mode, ctx.rng)?;
            let x = tape.concat(&[h, prev], 0)?;
            let o = self.decoder_step(tape, &mut ctx, t, x, &mut state)?;
            let o = dropout_apply(tape, o, rate, ctx.mode, ctx.rng)?;
            let z = head.out.forward(tape, o)?;
            let best = argmax(tape.value(z));
            let next = match feed {
                Feed::Teacher(gold) => {
                    let (ce, _) = tape.softmax_cross_entropy(z, gold[t])?;
                    losses.push(ce);
                    gold[t]
                }
                Feed::Greedy => best,
            };
            logits.push(z);
            predicted.push(best);
            if t + 1 < n {
                prev = head.tag_emb.lookup(tape, &[next])?[0];
            }
        }
        let loss = if losses.is_empty() {
            None
        } else {
            Some(tape.add_all(&losses)?)
        };
        Ok(Pass {
            loss,
            logits,
            predicted,
            gates: ctx.gates,
        })
    }

    /// Summed cross-entropy of one sentence under teacher forcing.
    pub fn forward_train(
        &self,
        tape: &mut Tape,
        task: Task,
        input: &Encoded,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let pass = self.forward(
            tape,
            task,
            input,
            Feed::Teacher(&input.tags),
            mode,
            false,
            rng,
        )?;
        Ok(pass.loss.expect("teacher forcing always yields a loss"))
    }

    /// `ce + λ·L_share` on the same tape. The penalty term is omitted when
    /// the model has no soft pairs.
    pub fn total_loss(&self, tape: &mut Tape, ce: Var, lambda: f64) -> Result<Var> {
        if lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda {lambda} must be non-negative"
            )));
        }
        match soft_penalty_var(tape, &self.soft)? {
            Some(p) if lambda > 0.0 => {
                let scaled = tape.scale(p, lambda)?;
                tape.add(ce, scaled)
            }
            _ => Ok(ce),
        }
    }

    /// Summed batch cross-entropy plus the weighted penalty, on one tape.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        task: Task,
        batch: &[Encoded],
        lambda: f64,
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let ces = batch
            .iter()
            .map(|s| self.forward_train(tape, task, s, mode, rng))
            .collect::<Result<Vec<_>>>()?;
        let ce = tape.add_all(&ces)?;
        self.total_loss(tape, ce, lambda)
    }

    /// Compares the analytic gradient of [`NerModel::batch_loss`] with
    /// central differences. Dropout masks are replayed from `rng_seed` so
    /// every evaluation sees the same network.
    pub fn gradient_check(
        &self,
        task: Task,
        batch: &[Encoded],
        lambda: f64,
        rng_seed: u64,
        coords: Coords,
        step: f64,
    ) -> Result<GradCheckReport> {
        let mut store = self.store.clone();
        store.zero_grads();
        let grads = {
            let mut tape = Tape::with_store(&store);
            let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
            let loss = self.batch_loss(&mut tape, task, batch, lambda, Mode::Train, &mut rng)?;
            tape.backward(loss)?
        };
        store.accumulate(&grads);
        finite_diff_check(
            &mut store,
            |s| {
                let mut tape = Tape::with_store(s);
                let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
                let loss =
                    self.batch_loss(&mut tape, task, batch, lambda, Mode::Train, &mut rng)?;
                Ok(tape.scalar(loss))
            },
            coords,
            step,
        )
    }

    fn eval_rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    /// Greedy target-task decoding with the previous prediction fed back.
    pub fn decode_ids(&self, input: &Encoded) -> Result<Vec<usize>> {
        let mut tape = Tape::with_store(&self.store);
        let pass = self.forward(
            &mut tape,
            Task::Target,
            input,
            Feed::Greedy,
            Mode::Eval,
            false,
            &mut Self::eval_rng(),
        )?;
        Ok(pass.predicted)
    }

    pub fn greedy_decode<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<String>> {
        if tokens.is_empty() {
            return Err(Error::Precondition(
                "cannot decode an empty sentence".into(),
            ));
        }
        let ids = self.decode_ids(&self.vocab.encode_tokens(tokens))?;
        ids.into_iter()
            .map(|i| self.vocab.tag_name(Task::Target, i).map(str::to_string))
            .collect()
    }

    /// Greedy decoding that also returns the gate activations seen at
    /// each token (empty for models without gates).
    pub fn decode_with_gates<S: AsRef<str>>(
        &self,
        tokens: &[S],
    ) -> Result<(Vec<String>, Vec<GateAt>)> {
        if tokens.is_empty() {
            return Err(Error::Precondition(
                "cannot decode an empty sentence".into(),
            ));
        }
        let input = self.vocab.encode_tokens(tokens);
        let mut tape = Tape::with_store(&self.store);
        let pass = self.forward(
            &mut tape,
            Task::Target,
            &input,
            Feed::Greedy,
            Mode::Eval,
            true,
            &mut Self::eval_rng(),
        )?;
        let tags = pass
            .predicted
            .into_iter()
            .map(|i| self.vocab.tag_name(Task::Target, i).map(str::to_string))
            .collect::<Result<_>>()?;
        Ok((tags, pass.gates))
    }

    /// A copy with every source-only parameter removed.
    pub fn extract_target_model(&self) -> Result<NerModel> {
        let mut pruned = Self::build(self.config.clone(), self.vocab.clone(), self.seed, true)?;
        pruned.clamp = self.clamp;
        let names: Vec<String> = pruned.store.names().map(str::to_string).collect();
        for name in names {
            let src = self.store.by_name(&name).ok_or_else(|| {
                Error::State(format!("pruned model has unknown parameter {name}"))
            })?;
            let values = src.tensor.values().to_vec();
            let trainable = src.trainable;
            let id = pruned.store.require(&name)?;
            pruned
                .store
                .tensor_mut(id)
                .values_mut()
                .copy_from_slice(&values);
            pruned.store.param_mut(id).trainable = trainable;
        }
        Ok(pruned)
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            seed: self.seed,
            target_only: self.target_only,
            vocab: self.vocab.clone(),
            tensors: self
                .store
                .iter()
                .map(|(_, p)| TensorRecord {
                    name: p.name.clone(),
                    partition: p.partition,
                    shape: p.tensor.shape().dims(),
                    values: p.tensor.values().to_vec(),
                })
                .collect(),
        };
        serde_json::to_string(&ck).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<NerModel> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Serde(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "unsupported checkpoint {} v{} (expected {CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION})",
                ck.format, ck.version
            )));
        }
        let mut model = Self::build(ck.config, ck.vocab, ck.seed, ck.target_only)?;
        if ck.tensors.len() != model.store.len() {
            return Err(Error::Serde(format!(
                "checkpoint has {} tensors, architecture has {}",
                ck.tensors.len(),
                model.store.len()
            )));
        }
        for rec in ck.tensors {
            let id = model
                .store
                .id(&rec.name)
                .ok_or_else(|| Error::Serde(format!("unexpected tensor {}", rec.name)))?;
            let p = model.store.param_mut(id);
            if p.tensor.shape().dims() != rec.shape
                || p.partition != rec.partition
                || rec.values.len() != p.tensor.len()
            {
                return Err(Error::Serde(format!(
                    "tensor {} does not match the architecture",
                    rec.name
                )));
            }
            p.tensor.values_mut().copy_from_slice(&rec.values);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<NerModel> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
