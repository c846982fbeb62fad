//! Per-component parameter sharing between the two tasks: fixed schemes
//! (independent, hard, soft) and the gated dynamic unit.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Partition, Shape, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SharingScheme {
    Independent,
    Hard,
    Soft,
}

impl SharingScheme {
    pub const ALL: [SharingScheme; 3] = [
        SharingScheme::Independent,
        SharingScheme::Hard,
        SharingScheme::Soft,
    ];

    pub fn letter(self) -> char {
        match self {
            SharingScheme::Independent => 'I',
            SharingScheme::Hard => 'H',
            SharingScheme::Soft => 'S',
        }
    }

    pub fn from_letter(c: char) -> Option<Self> {
        match c.to_ascii_uppercase() {
            'I' => Some(SharingScheme::Independent),
            'H' => Some(SharingScheme::Hard),
            'S' => Some(SharingScheme::Soft),
            _ => None,
        }
    }
}

/// The three schemed components, in code order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComponentKind {
    CharEnc,
    WordEnc,
    Decoder,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 3] = [
        ComponentKind::CharEnc,
        ComponentKind::WordEnc,
        ComponentKind::Decoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::CharEnc => "char_enc",
            ComponentKind::WordEnc => "word_enc",
            ComponentKind::Decoder => "decoder",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ComponentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown component {s:?}")))
    }
}

/// Scheme triple for (char encoder, word encoder, decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TtnConfig {
    pub char_enc: SharingScheme,
    pub word_enc: SharingScheme,
    pub decoder: SharingScheme,
}

impl TtnConfig {
    pub fn new(char_enc: SharingScheme, word_enc: SharingScheme, decoder: SharingScheme) -> Self {
        TtnConfig {
            char_enc,
            word_enc,
            decoder,
        }
    }

    pub fn code(&self) -> String {
        [self.char_enc, self.word_enc, self.decoder]
            .iter()
            .map(|s| s.letter())
            .collect()
    }

    pub fn scheme(&self, kind: ComponentKind) -> SharingScheme {
        match kind {
            ComponentKind::CharEnc => self.char_enc,
            ComponentKind::WordEnc => self.word_enc,
            ComponentKind::Decoder => self.decoder,
        }
    }

    /// All 27 configurations in lexicographic I < H < S order.
    pub fn all() -> Vec<TtnConfig> {
        let mut out = Vec::with_capacity(27);
        for c in SharingScheme::ALL {
            for w in SharingScheme::ALL {
                for d in SharingScheme::ALL {
                    out.push(TtnConfig::new(c, w, d));
                }
            }
        }
        out
    }

    pub fn has_soft(&self) -> bool {
        [self.char_enc, self.word_enc, self.decoder].contains(&SharingScheme::Soft)
    }
}

pub fn parse_config_code(code: &str) -> Result<TtnConfig> {
    let letters: Vec<char> = code.chars().collect();
    if letters.len() != 3 {
        return Err(Error::Config(format!(
            "config code {code:?} must have 3 letters"
        )));
    }
    let mut schemes = [SharingScheme::Independent; 3];
    for (slot, &c) in schemes.iter_mut().zip(&letters) {
        *slot = SharingScheme::from_letter(c).ok_or_else(|| {
            Error::Config(format!("config code {code:?}: {c:?} is not one of I, H, S"))
        })?;
    }
    Ok(TtnConfig::new(schemes[0], schemes[1], schemes[2]))
}

impl fmt::Display for TtnConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.code())
    }
}

impl FromStr for TtnConfig {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        parse_config_code(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DtnVariant {
    /// Both gates and the target-independent branch.
    Full,
    /// Hard and soft branches with the first gate only.
    Hs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// One gate value per output unit.
    #[default]
    Vector,
    /// One gate value broadcast over the output.
    Scalar,
}

/// Overrides gate values with constants. Used to probe saturation limits.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GateClamp {
    pub g1: Option<f64>,
    pub g2: Option<f64>,
}

/// `g = σ(x₁ᵀP₁ + x₂ᵀP₂ + aᵀP_a + b)`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub first: ParamId,
    pub second: ParamId,
    pub input: ParamId,
    pub bias: ParamId,
    pub width: usize,
}

impl Gate {
    /// Zero-initialized, so the gate starts at 0.5.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        names: [&str; 3],
        d_out: usize,
        d_in: usize,
        mode: GateMode,
    ) -> Result<Self> {
        let width = match mode {
            GateMode::Vector => d_out,
            GateMode::Scalar => 1,
        };
        let mut reg = |name: &str, shape: Shape| {
            store.register(
                format!("{prefix}.{name}"),
                Partition::Target,
                Tensor::zeros(shape),
            )
        };
        Ok(Gate {
            first: reg(names[0], Shape::Matrix(d_out, width))?,
            second: reg(names[1], Shape::Matrix(d_out, width))?,
            input: reg(names[2], Shape::Matrix(d_in, width))?,
            bias: reg("b", Shape::Vector(width))?,
            width,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        x1: Var,
        x2: Var,
        a: Var,
        clamp: Option<f64>,
    ) -> Result<Var> {
        if let Some(v) = clamp {
            return Ok(tape.constant(Tensor::vector(vec![v; self.width])));
        }
        let mut z = tape.param(self.bias);
        for (x, p) in [(x1, self.first), (x2, self.second), (a, self.input)] {
            let w = tape.param(p);
            let term = tape.matmul(x, w)?;
            z = tape.add(z, term)?;
        }
        tape.sigmoid(z)
    }
}

/// Gate activations produced at one position of one component.
#[derive(Debug, Clone, Copy)]
pub struct GateValues {
    pub g1: Var,
    pub g2: Option<Var>,
}

/// Gated combination of hard, soft and independent branches.
///
/// Branch parameters are named `{prefix}.soft.target`, `{prefix}.soft.source`,
/// `{prefix}.hard.shared` and `{prefix}.ind.target`; gates live under
/// `{prefix}.gate1` and `{prefix}.gate2`.
#[derive(Debug, Clone)]
pub struct DtnUnit<C> {
    pub variant: DtnVariant,
    pub soft_target: C,
    pub soft_source: Option<C>,
    pub hard: C,
    pub ind: Option<C>,
    pub gate1: Gate,
    pub gate2: Option<Gate>,
}

impl<C> DtnUnit<C> {
    /// `o_target` from branch outputs at one position.
    ///
    /// `o_shared = (1−g₁)h_hard + g₁h_soft`; the full variant returns
    /// `(1−g₂)h_ind + g₂o_shared`, the HS variant returns `o_shared`.
    pub fn combine_target(
        &self,
        tape: &mut Tape,
        h_soft: Var,
        h_hard: Var,
        h_ind: Option<Var>,
        a: Var,
        clamp: GateClamp,
    ) -> Result<(Var, GateValues)> {
        let g1 = self.gate1.forward(tape, h_soft, h_hard, a, clamp.g1)?;
        let shared = tape.blend(g1, h_hard, h_soft)?;
        match (&self.gate2, h_ind) {
            (Some(gate2), Some(h_ind)) => {
                let g2 = gate2.forward(tape, h_ind, shared, a, clamp.g2)?;
                let out = tape.blend(g2, h_ind, shared)?;
                Ok((out, GateValues { g1, g2: Some(g2) }))
            }
            (None, None) => Ok((shared, GateValues { g1, g2: None })),
            _ => Err(Error::Precondition(
                "independent branch output must be given exactly when the unit has a second gate"
                    .into(),
            )),
        }
    }

    /// `o_source = h_hard + h_soft_source`.
    pub fn combine_source(&self, tape: &mut Tape, h_soft_source: Var, h_hard: Var) -> Result<Var> {
        tape.add(h_hard, h_soft_source)
    }
}

/// Runs every target-side branch with `run` and gates the results.
pub fn dtn_forward_target<C>(
    tape: &mut Tape,
    unit: &DtnUnit<C>,
    a_target: Var,
    clamp: GateClamp,
    mut run: impl FnMut(&mut Tape, &C) -> Result<Var>,
) -> Result<(Var, GateValues)> {
    let h_soft = run(tape, &unit.soft_target)?;
    let h_hard = run(tape, &unit.hard)?;
    let h_ind = unit.ind.as_ref().map(|c| run(tape, c)).transpose()?;
    unit.combine_target(tape, h_soft, h_hard, h_ind, a_target, clamp)
}

pub fn dtn_forward_source<C>(
    tape: &mut Tape,
    unit: &DtnUnit<C>,
    mut run: impl FnMut(&mut Tape, &C) -> Result<Var>,
) -> Result<Var> {
    let source = unit
        .soft_source
        .as_ref()
        .ok_or_else(|| Error::Precondition("source branch was pruned from this model".into()))?;
    let h_soft = run(tape, source)?;
    let h_hard = run(tape, &unit.hard)?;
    unit.combine_source(tape, h_soft, h_hard)
}

/// How a component is shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ComponentScheme {
    Ttn(SharingScheme),
    Dtn(DtnVariant),
}

/// One schemed component holding cores of type `C`.
#[derive(Debug, Clone)]
pub enum Component<C> {
    Independent { target: C, source: Option<C> },
    Hard { shared: C },
    Soft { target: C, source: Option<C> },
    Dtn(DtnUnit<C>),
}

/// Which cores a forward pass for one task goes through.
pub enum Route<'a, C> {
    Single(&'a C),
    DtnTarget(&'a DtnUnit<C>),
    DtnSource(&'a DtnUnit<C>),
}

/// Dimensions a DTN gate needs: branch output width and gate-input width.
#[derive(Debug, Clone, Copy)]
pub struct GateDims {
    pub d_out: usize,
    pub d_in: usize,
    pub mode: GateMode,
}

pub type CoreBuilder<'a, C> = dyn FnMut(&mut ParamStore, &str, Partition) -> Result<C> + 'a;

impl<C> Component<C> {
    /// Registers the cores for `scheme` under `prefix`. With `target_only`,
    /// parameters that only serve the source task are not created.
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        scheme: ComponentScheme,
        target_only: bool,
        gate: GateDims,
        build: &mut CoreBuilder<'_, C>,
    ) -> Result<Self> {
        let source_side = |store: &mut ParamStore,
                           build: &mut CoreBuilder<'_, C>,
                           name: String|
         -> Result<Option<C>> {
            if target_only {
                Ok(None)
            } else {
                build(store, &name, Partition::Source).map(Some)
            }
        };
        Ok(match scheme {
            ComponentScheme::Ttn(SharingScheme::Independent) => {
                let target = build(store, &format!("{prefix}.ind.target"), Partition::Target)?;
                let source = source_side(store, build, format!("{prefix}.ind.source"))?;
                Component::Independent { target, source }
            }
            ComponentScheme::Ttn(SharingScheme::Hard) => Component::Hard {
                shared: build(store, &format!("{prefix}.hard.shared"), Partition::Shared)?,
            },
            ComponentScheme::Ttn(SharingScheme::Soft) => {
                let target = build(store, &format!("{prefix}.soft.target"), Partition::Target)?;
                let source = source_side(store, build, format!("{prefix}.soft.source"))?;
                Component::Soft { target, source }
            }
            ComponentScheme::Dtn(variant) => {
                let p = format!("{prefix}.dtn");
                let soft_target = build(store, &format!("{p}.soft.target"), Partition::Target)?;
                let soft_source = source_side(store, build, format!("{p}.soft.source"))?;
                let hard = build(store, &format!("{p}.hard.shared"), Partition::Shared)?;
                let gate1 = Gate::register(
                    store,
                    &format!("{p}.gate1"),
                    ["q", "r", "s"],
                    gate.d_out,
                    gate.d_in,
                    gate.mode,
                )?;
                let (ind, gate2) = match variant {
                    DtnVariant::Full => (
                        Some(build(store, &format!("{p}.ind.target"), Partition::Target)?),
                        Some(Gate::register(
                            store,
                            &format!("{p}.gate2"),
                            ["t", "u", "v"],
                            gate.d_out,
                            gate.d_in,
                            gate.mode,
                        )?),
                    ),
                    DtnVariant::Hs => (None, None),
                };
                Component::Dtn(DtnUnit {
                    variant,
                    soft_target,
                    soft_source,
                    hard,
                    ind,
                    gate1,
                    gate2,
                })
            }
        })
    }

    pub fn route(&self, task: Task) -> Result<Route<'_, C>> {
        let pruned =
            || Error::Precondition("source-side parameters were pruned from this model".into());
        Ok(match (self, task) {
            (
                Component::Independent { target, .. } | Component::Soft { target, .. },
                Task::Target,
            ) => Route::Single(target),
            (
                Component::Independent { source, .. } | Component::Soft { source, .. },
                Task::Source,
            ) => Route::Single(source.as_ref().ok_or_else(pruned)?),
            (Component::Hard { shared }, _) => Route::Single(shared),
            (Component::Dtn(unit), Task::Target) => Route::DtnTarget(unit),
            (Component::Dtn(unit), Task::Source) => {
                if unit.soft_source.is_none() {
                    return Err(pruned());
                }
                Route::DtnSource(unit)
            }
        })
    }

    /// Name prefixes of the soft pair's recurrent weights, if both sides exist.
    pub fn soft_prefixes(&self, prefix: &str) -> Option<(String, String)> {
        match self {
            Component::Soft {
                source: Some(_), ..
            } => Some((
                format!("{prefix}.soft.target.rnn."),
                format!("{prefix}.soft.source.rnn."),
            )),
            Component::Dtn(DtnUnit {
                soft_source: Some(_),
                ..
            }) => Some((
                format!("{prefix}.dtn.soft.target.rnn."),
                format!("{prefix}.dtn.soft.source.rnn."),
            )),
            _ => None,
        }
    }
}

/// Matched (target, source) recurrent parameters of every soft pair.
#[derive(Debug, Clone, Default)]
pub struct SoftRegistry {
    pub pairs: Vec<(ParamId, ParamId)>,
}

impl SoftRegistry {
    pub fn add(
        &mut self,
        store: &ParamStore,
        target_prefix: &str,
        source_prefix: &str,
    ) -> Result<()> {
        let mut pairs = store.pair_subsets(target_prefix, source_prefix)?;
        if pairs.is_empty() {
            return Err(Error::Pairing(format!(
                "no parameters under {target_prefix}"
            )));
        }
        pairs.sort();
        self.pairs.extend(pairs);
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `Σ ‖θ_target − θ_source‖²` over the registry. λ is applied by the caller.
pub fn soft_penalty_total(store: &ParamStore, registry: &SoftRegistry) -> Result<f64> {
    store.l2_distance_sq(&registry.pairs)
}

/// The same penalty built on a tape, so it can be differentiated.
pub fn soft_penalty_var(tape: &mut Tape, registry: &SoftRegistry) -> Result<Option<Var>> {
    if registry.is_empty() {
        return Ok(None);
    }
    let terms = registry
        .pairs
        .iter()
        .map(|&(a, b)| {
            let (va, vb) = (tape.param(a), tape.param(b));
            tape.sq_dist(va, vb)
        })
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms).map(Some)
}

/// Gate activations at one token of one component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTraceRecord {
    pub sentence_id: usize,
    pub token_index: usize,
    pub token: String,
    pub gold_tag: String,
    pub component: ComponentKind,
    pub task: Task,
    pub g1: Vec<f64>,
    pub g2: Option<Vec<f64>>,
}

impl GateTraceRecord {
    pub fn mean(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{Init, LstmCell};
    use crate::numeric::{AdamConfig, AdamState, PartitionSet};

    fn cell_component(
        scheme: ComponentScheme,
        target_only: bool,
    ) -> (ParamStore, Component<LstmCell>) {
        let mut store = ParamStore::new();
        let init = Init::new(3);
        let mut build = |s: &mut ParamStore, p: &str, part| {
            LstmCell::register(s, &init, &format!("{p}.rnn"), part, 3, 2)
        };
        let gate = GateDims {
            d_out: 2,
            d_in: 3,
            mode: GateMode::Vector,
        };
        let c =
            Component::register(&mut store, "comp", scheme, target_only, gate, &mut build).unwrap();
        (store, c)
    }

    fn run_cell(tape: &mut Tape, cell: &LstmCell, x: &[f64]) -> Result<Var> {
        let x = tape.constant(Tensor::vector(x.to_vec()));
        let s0 = cell.zero_state(tape);
        let s1 = cell.step(tape, x, s0)?;
        cell.hidden(tape, s1)
    }

    /// Runs `task` once and applies one masked Adam step.
    fn train_step(store: &mut ParamStore, comp: &Component<LstmCell>, task: Task) {
        let grads = {
            let mut tape = Tape::with_store(store);
            let cell = match comp.route(task).unwrap() {
                Route::Single(c) => c,
                _ => unreachable!(),
            };
            let h = run_cell(&mut tape, cell, &[0.3, -0.2, 0.9]).unwrap();
            let loss = tape.sum(h).unwrap();
            tape.backward(loss).unwrap()
        };
        store.accumulate(&grads);
        let own = match task {
            Task::Target => Partition::Target,
            Task::Source => Partition::Source,
        };
        let mut adam = AdamState::new(store, AdamConfig::default());
        adam.step(store, PartitionSet::of(&[Partition::Shared, own]))
            .unwrap();
    }

    fn snapshot(store: &ParamStore) -> Vec<(String, Vec<f64>)> {
        store
            .iter()
            .map(|(_, p)| (p.name.clone(), p.tensor.values().to_vec()))
            .collect()
    }

    #[test]
    fn config_codes() {
        let c = parse_config_code("IIS").unwrap();
        assert_eq!(
            (c.char_enc, c.word_enc, c.decoder),
            (
                SharingScheme::Independent,
                SharingScheme::Independent,
                SharingScheme::Soft
            )
        );
        assert_eq!(parse_config_code("hhh").unwrap().code(), "HHH");
        assert!(parse_config_code("XII").is_err());
        assert!(parse_config_code("II").is_err());
        assert!(parse_config_code("IIII").is_err());
        let all = TtnConfig::all();
        assert_eq!(all.len(), 27);
        let codes: std::collections::HashSet<_> = all.iter().map(TtnConfig::code).collect();
        assert_eq!(codes.len(), 27);
        for c in all {
            assert_eq!(parse_config_code(&c.code()).unwrap(), c);
        }
    }

    #[test]
    fn hard_updates_alias_one_storage() {
        let (mut store, comp) = cell_component(ComponentScheme::Ttn(SharingScheme::Hard), false);
        assert_eq!(store.len(), 3);
        let before = snapshot(&store);
        train_step(&mut store, &comp, Task::Target);
        let after_target = snapshot(&store);
        assert_ne!(before, after_target);
        train_step(&mut store, &comp, Task::Source);
        assert_ne!(after_target, snapshot(&store));
        let (Route::Single(a), Route::Single(b)) = (
            comp.route(Task::Target).unwrap(),
            comp.route(Task::Source).unwrap(),
        ) else {
            unreachable!()
        };
        assert_eq!(a.w_x, b.w_x);
    }

    #[test]
    fn independent_source_updates_leave_target_untouched() {
        let (mut store, comp) =
            cell_component(ComponentScheme::Ttn(SharingScheme::Independent), false);
        let target_before: Vec<_> = snapshot(&store)
            .into_iter()
            .filter(|(n, _)| n.contains(".target."))
            .collect();
        for _ in 0..3 {
            train_step(&mut store, &comp, Task::Source);
        }
        let target_after: Vec<_> = snapshot(&store)
            .into_iter()
            .filter(|(n, _)| n.contains(".target."))
            .collect();
        assert_eq!(target_before, target_after);
    }

    #[test]
    fn soft_pairs_registered_once() {
        let (store, comp) = cell_component(ComponentScheme::Ttn(SharingScheme::Soft), false);
        let (a, b) = comp.soft_prefixes("comp").unwrap();
        let mut reg = SoftRegistry::default();
        reg.add(&store, &a, &b).unwrap();
        assert_eq!(reg.pairs.len(), 3);
        let mut ids: Vec<_> = reg.pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), store.len());
        for (_, p) in store.iter() {
            assert!(p.name.starts_with("comp.soft."));
        }
    }

    #[test]
    fn penalty_zero_iff_equal_and_descends() {
        assert_eq!(
            soft_penalty_total(&ParamStore::new(), &SoftRegistry::default()).unwrap(),
            0.0
        );
        let (mut store, comp) = cell_component(ComponentScheme::Ttn(SharingScheme::Soft), false);
        let (a, b) = comp.soft_prefixes("comp").unwrap();
        let mut reg = SoftRegistry::default();
        reg.add(&store, &a, &b).unwrap();
        let mut last = soft_penalty_total(&store, &reg).unwrap();
        assert!(last > 0.0);
        for _ in 0..10 {
            let grads = {
                let mut tape = Tape::with_store(&store);
                let p = soft_penalty_var(&mut tape, &reg).unwrap().unwrap();
                assert!((tape.scalar(p) - last).abs() < 1e-12);
                tape.backward(p).unwrap()
            };
            store.accumulate(&grads);
            for p in store.iter_mut() {
                let (v, g) = p.tensor.values_and_grad();
                v.iter_mut().zip(g).for_each(|(v, g)| *v -= 0.05 * g);
            }
            store.zero_grads();
            let now = soft_penalty_total(&store, &reg).unwrap();
            assert!(now < last, "{now} !< {last}");
            last = now;
        }
        for &(a, b) in &reg.pairs {
            let v = store.tensor(a).values().to_vec();
            store.tensor_mut(b).values_mut().copy_from_slice(&v);
        }
        assert_eq!(soft_penalty_total(&store, &reg).unwrap(), 0.0);
    }

    fn dtn_outputs(
        clamp: GateClamp,
        bias: Option<(f64, f64)>,
    ) -> (Vec<f64>, [Vec<f64>; 3], Vec<f64>) {
        let (mut store, comp) = cell_component(ComponentScheme::Dtn(DtnVariant::Full), false);
        let Component::Dtn(unit) = comp else {
            unreachable!()
        };
        if let Some((b1, b2)) = bias {
            store.tensor_mut(unit.gate1.bias).values_mut().fill(b1);
            store
                .tensor_mut(unit.gate2.as_ref().unwrap().bias)
                .values_mut()
                .fill(b2);
        }
        let x = [0.5, -1.0, 0.25];
        let mut tape = Tape::with_store(&store);
        let a = tape.constant(Tensor::vector(x.to_vec()));
        let (out, _) =
            dtn_forward_target(&mut tape, &unit, a, clamp, |t, c| run_cell(t, c, &x)).unwrap();
        let out = tape.value(out).to_vec();
        let branch = |c: &LstmCell, tape: &mut Tape| {
            let v = run_cell(tape, c, &x).unwrap();
            tape.value(v).to_vec()
        };
        let soft = branch(&unit.soft_target, &mut tape);
        let hard = branch(&unit.hard, &mut tape);
        let ind = branch(unit.ind.as_ref().unwrap(), &mut tape);
        let src = dtn_forward_source(&mut tape, &unit, |t, c| run_cell(t, c, &x)).unwrap();
        (out, [soft, hard, ind], tape.value(src).to_vec())
    }

    #[test]
    fn zero_gates_mix_branches() {
        let (out, [soft, hard, ind], _) = dtn_outputs(GateClamp::default(), None);
        for i in 0..2 {
            let want = 0.5 * ind[i] + 0.25 * hard[i] + 0.25 * soft[i];
            assert!((out[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_gates_select_branches() {
        let (out, [soft, _, _], _) = dtn_outputs(GateClamp::default(), Some((50.0, 50.0)));
        for i in 0..2 {
            assert!((out[i] - soft[i]).abs() < 1e-12);
        }
        let (out, [_, _, ind], _) = dtn_outputs(GateClamp::default(), Some((50.0, -50.0)));
        for i in 0..2 {
            assert!((out[i] - ind[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn source_path_is_hard_plus_soft_source() {
        let (store, comp) = cell_component(ComponentScheme::Dtn(DtnVariant::Full), false);
        let Component::Dtn(unit) = comp else {
            unreachable!()
        };
        let x = [0.1, 0.2, 0.3];
        let mut tape = Tape::with_store(&store);
        let src = dtn_forward_source(&mut tape, &unit, |t, c| run_cell(t, c, &x)).unwrap();
        let s = run_cell(&mut tape, unit.soft_source.as_ref().unwrap(), &x).unwrap();
        let h = run_cell(&mut tape, &unit.hard, &x).unwrap();
        let want: Vec<f64> = tape
            .value(s)
            .iter()
            .zip(tape.value(h))
            .map(|(a, b)| a + b)
            .collect();
        assert_eq!(tape.value(src), &want[..]);
        let loss = tape.sum(src).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut store = store.clone();
        store.accumulate(&grads);
        for (_, p) in store.iter() {
            let touched = p.tensor.grad().unwrap().iter().any(|g| *g != 0.0);
            let on_path = p.name.contains(".hard.") || p.name.contains(".soft.source.");
            // A single step from the zero state leaves w_h without gradient.
            if !p.name.ends_with(".w_h") {
                assert_eq!(touched, on_path, "{}", p.name);
            } else {
                assert!(!touched);
            }
        }
    }

    #[test]
    fn zero_weights_give_zero_source_output() {
        let (mut store, comp) = cell_component(ComponentScheme::Dtn(DtnVariant::Hs), false);
        for p in store.iter_mut() {
            p.tensor.values_mut().fill(0.0);
        }
        let Component::Dtn(unit) = comp else {
            unreachable!()
        };
        assert!(unit.ind.is_none() && unit.gate2.is_none());
        let mut tape = Tape::with_store(&store);
        let src =
            dtn_forward_source(&mut tape, &unit, |t, c| run_cell(t, c, &[1.0, 2.0, 3.0])).unwrap();
        assert!(tape.value(src).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_only_drops_source_branches() {
        for scheme in [
            ComponentScheme::Ttn(SharingScheme::Independent),
            ComponentScheme::Ttn(SharingScheme::Soft),
            ComponentScheme::Dtn(DtnVariant::Full),
        ] {
            let (full, _) = cell_component(scheme, false);
            let (pruned, comp) = cell_component(scheme, true);
            assert!(pruned.len() < full.len());
            assert!(pruned.names().all(|n| !n.contains(".source.")));
            assert!(comp.route(Task::Source).is_err());
            assert!(comp.route(Task::Target).is_ok());
        }
    }

    #[test]
    fn scalar_gate_broadcasts() {
        let mut store = ParamStore::new();
        let init = Init::new(1);
        let mut build = |s: &mut ParamStore, p: &str, part| {
            LstmCell::register(s, &init, &format!("{p}.rnn"), part, 3, 2)
        };
        let gate = GateDims {
            d_out: 2,
            d_in: 3,
            mode: GateMode::Scalar,
        };
        let Component::Dtn(unit) = Component::register(
            &mut store,
            "c",
            ComponentScheme::Dtn(DtnVariant::Hs),
            false,
            gate,
            &mut build,
        )
        .unwrap() else {
            unreachable!()
        };
        let mut tape = Tape::with_store(&store);
        let a = tape.constant(Tensor::vector(vec![1.0, 0.0, 0.0]));
        let (out, g) = dtn_forward_target(&mut tape, &unit, a, GateClamp::default(), |t, c| {
            run_cell(t, c, &[1.0, 0.0, 0.0])
        })
        .unwrap();
        assert_eq!(tape.value(g.g1), &[0.5]);
        assert_eq!(tape.shape(out), Shape::Vector(2));
    }
}
