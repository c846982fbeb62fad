//! Embeddings, LSTM cells and runners, linear projections and dropout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Partition, Shape, Tape, Tensor, Var};

/// Deterministic per-parameter initialization.
///
/// Each tensor draws from a generator seeded by the base seed and the
/// parameter's name, so values do not depend on registration order. Two
/// models that register a parameter under the same name with the same
/// seed start from identical values.
#[derive(Debug, Clone, Copy)]
pub struct Init {
    pub seed: u64,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    /// Glorot/Xavier uniform matrix.
    pub fn xavier(&self, name: &str, rows: usize, cols: usize) -> Tensor {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let mut rng = self.rng_for(name);
        let values = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::matrix(rows, cols, values).expect("sized by construction")
    }

    pub fn uniform(&self, name: &str, shape: Shape, bound: f64) -> Tensor {
        let mut rng = self.rng_for(name);
        let values = (0..shape.numel())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape, values).expect("sized by construction")
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub vocab: usize,
    pub dim: usize,
    /// Row that never receives gradient (usually PAD).
    pub frozen_row: Option<usize>,
}

impl EmbeddingTable {
    pub fn register(
        store: &mut ParamStore,
        init: &Init,
        name: &str,
        partition: Partition,
        vocab: usize,
        dim: usize,
    ) -> Result<Self> {
        let bound = (3.0 / dim as f64).sqrt();
        let table = init.uniform(name, Shape::Matrix(vocab, dim), bound);
        let id = store.register(name, partition, table)?;
        Ok(EmbeddingTable {
            id,
            vocab,
            dim,
            frozen_row: None,
        })
    }

    pub fn lookup(&self, tape: &mut Tape, ids: &[usize]) -> Result<Vec<Var>> {
        let table = tape.param(self.id);
        ids.iter()
            .map(|&id| {
                if id >= self.vocab {
                    return Err(Error::Index {
                        what: "embedding vocabulary",
                        index: id,
                        len: self.vocab,
                    });
                }
                if self.frozen_row == Some(id) {
                    let row = tape.tensor(table).row(id).to_vec();
                    return Ok(tape.constant(Tensor::vector(row)));
                }
                tape.gather(table, id)
            })
            .collect()
    }

    /// Looked-up rows stacked into a `[len × dim]` matrix.
    pub fn lookup_matrix(&self, tape: &mut Tape, ids: &[usize]) -> Result<Var> {
        let rows = self.lookup(tape, ids)?;
        tape.stack_rows(&rows)
    }
}

/// Single-layer LSTM cell without peepholes. Gate blocks in the fused
/// weights are ordered input, forget, output, candidate.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
}

impl LstmCell {
    pub fn register(
        store: &mut ParamStore,
        init: &Init,
        prefix: &str,
        partition: Partition,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let h4 = 4 * hidden_dim;
        let name = |s: &str| format!("{prefix}.{s}");
        let w_x = store.register(
            name("w_x"),
            partition,
            init.xavier(&name("w_x"), input_dim, h4),
        )?;
        let w_h = store.register(
            name("w_h"),
            partition,
            init.xavier(&name("w_h"), hidden_dim, h4),
        )?;
        let mut bias = vec![0.0; h4];
        bias[hidden_dim..2 * hidden_dim]
            .iter_mut()
            .for_each(|b| *b = 1.0);
        let b = store.register(name("b"), partition, Tensor::vector(bias))?;
        Ok(LstmCell {
            input_dim,
            hidden_dim,
            w_x,
            w_h,
            b,
        })
    }

    /// Zero state `[h ‖ c]`.
    pub fn zero_state(&self, tape: &mut Tape) -> Var {
        tape.constant(Tensor::zeros(Shape::Vector(2 * self.hidden_dim)))
    }

    /// Advances the state `[h ‖ c]` by one input.
    pub fn step(&self, tape: &mut Tape, x: Var, state: Var) -> Result<Var> {
        if tape.shape(x) != Shape::Vector(self.input_dim) {
            return Err(Error::dim(
                "lstm_step",
                &tape.shape(x).dims(),
                &[self.input_dim],
            ));
        }
        let (wx, wh, b) = (
            tape.param(self.w_x),
            tape.param(self.w_h),
            tape.param(self.b),
        );
        tape.lstm_cell(x, state, wx, wh, b)
    }

    /// The hidden part of a state.
    pub fn hidden(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        tape.slice(state, 0, self.hidden_dim)
    }

    /// Memory-cell part of a state.
    pub fn memory(&self, tape: &mut Tape, state: Var) -> Result<Var> {
        tape.slice(state, self.hidden_dim, self.hidden_dim)
    }

    fn final_hidden(&self, tape: &mut Tape, xs: &[Var], reverse: bool) -> Result<Var> {
        let mut state = self.zero_state(tape);
        for t in 0..xs.len() {
            let t = if reverse { xs.len() - 1 - t } else { t };
            state = self.step(tape, xs[t], state)?;
        }
        self.hidden(tape, state)
    }

    /// Runs over `xs` (right to left when `reverse`); returns the hidden
    /// state at each input position, in input order.
    pub fn run(&self, tape: &mut Tape, xs: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let mut state = self.zero_state(tape);
        let mut out = vec![state; xs.len()];
        for t in 0..xs.len() {
            let t = if reverse { xs.len() - 1 - t } else { t };
            state = self.step(tape, xs[t], state)?;
            out[t] = self.hidden(tape, state)?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub fwd: LstmCell,
    pub bwd: LstmCell,
}

impl BiLstm {
    pub fn register(
        store: &mut ParamStore,
        init: &Init,
        prefix: &str,
        partition: Partition,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        Ok(BiLstm {
            fwd: LstmCell::register(
                store,
                init,
                &format!("{prefix}.fwd"),
                partition,
                input_dim,
                hidden_dim,
            )?,
            bwd: LstmCell::register(
                store,
                init,
                &format!("{prefix}.bwd"),
                partition,
                input_dim,
                hidden_dim,
            )?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim + self.bwd.hidden_dim
    }

    pub fn final_state(&self, tape: &mut Tape, xs: &[Var]) -> Result<Var> {
        run_bilstm_final(tape, &self.fwd, &self.bwd, xs)
    }

    pub fn full(&self, tape: &mut Tape, xs: &[Var]) -> Result<Vec<Var>> {
        run_bilstm_full(tape, &self.fwd, &self.bwd, xs)
    }
}

/// `[→h_L ‖ ←h_1]`: the last forward state and the backward state after it
/// has consumed the whole reversed sequence.
pub fn run_bilstm_final(
    tape: &mut Tape,
    fwd: &LstmCell,
    bwd: &LstmCell,
    xs: &[Var],
) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::Precondition(
            "bidirectional LSTM over an empty sequence".into(),
        ));
    }
    let f = fwd.final_hidden(tape, xs, false)?;
    let b = bwd.final_hidden(tape, xs, true)?;
    tape.concat(&[f, b], 0)
}

/// Per-position `[→h_t ‖ ←h_t]`.
pub fn run_bilstm_full(
    tape: &mut Tape,
    fwd: &LstmCell,
    bwd: &LstmCell,
    xs: &[Var],
) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Precondition(
            "bidirectional LSTM over an empty sequence".into(),
        ));
    }
    let f = fwd.run(tape, xs, false)?;
    let b = bwd.run(tape, xs, true)?;
    f.into_iter()
        .zip(b)
        .map(|(hf, hb)| tape.concat(&[hf, hb], 0))
        .collect()
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl LinearLayer {
    pub fn register(
        store: &mut ParamStore,
        init: &Init,
        prefix: &str,
        partition: Partition,
        input_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        let wn = format!("{prefix}.w");
        let w = store.register(&wn, partition, init.xavier(&wn, input_dim, output_dim))?;
        let b = store.register(
            format!("{prefix}.b"),
            partition,
            Tensor::zeros(Shape::Vector(output_dim)),
        )?;
        Ok(LinearLayer {
            w,
            b,
            input_dim,
            output_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Inverted dropout. Identity when `rate == 0` or in eval mode.
pub fn dropout_apply<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - rate;
    let shape = tape.shape(x);
    let mask = (0..shape.numel())
        .map(|_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}
