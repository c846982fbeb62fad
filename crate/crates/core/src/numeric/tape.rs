//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the record is topologically sorted by
//! construction and [`Tape::backward`] is a single reverse sweep.
//!
//! Trainable tensors are not copied onto the tape: [`Tape::param`] records a
//! reference into a borrowed [`ParamStore`], and their gradients come back in
//! [`Gradients`] for [`ParamStore::accumulate`]. Embedding lookups into a
//! parameter table produce sparse row gradients instead of a dense buffer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::params::{ParamId, ParamStore};
use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(usize, usize),
    Binary(Binary, usize, usize),
    Unary(Unary, usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    Slice {
        src: usize,
        start: usize,
    },
    Gather {
        table: usize,
        row: usize,
    },
    StackRows(Vec<usize>),
    Row {
        src: usize,
        row: usize,
    },
    Mean(Vec<usize>),
    SoftmaxCe {
        logits: usize,
        gold: usize,
        probs: Vec<f64>,
    },
    /// Inputs and the activated gates `[i, f, o, g]` kept for the backward pass.
    LstmCell {
        x: usize,
        state: usize,
        w_x: usize,
        w_h: usize,
        b: usize,
        gates: Vec<f64>,
    },
    Blend {
        gate: usize,
        a: usize,
        b: usize,
    },
    Scale(usize, f64),
    Sum(usize),
    SqDist(usize, usize),
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub struct Tape<'s> {
    id: u32,
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Tape<'s> {
    /// A tape with no parameter store; only leaves and constants.
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_store(store: &'s ParamStore) -> Self {
        Tape {
            store: Some(store),
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(shape.numel() == value.len() || matches!(op, Op::Param(_)));
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { shape, value, op });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tape(format!(
                "variable {v:?} is not on tape {}",
                self.id
            )));
        }
        Ok(v.index())
    }

    fn val_at(&self, i: usize) -> &[f64] {
        let node = &self.nodes[i];
        match node.op {
            Op::Param(id) => self
                .store
                .expect("param node without store")
                .tensor(id)
                .values(),
            _ => &node.value,
        }
    }

    pub fn value(&self, v: Var) -> &[f64] {
        self.val_at(v.index())
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.index()].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// Records an input tensor. Gradients with respect to it are reported
    /// by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let shape = t.shape();
        self.push(shape, t.into_values(), Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&i) = self.param_nodes.get(&id) {
            return Var {
                tape: self.id,
                idx: i as u32,
            };
        }
        let store = self
            .store
            .expect("Tape::param requires a tape built with_store");
        let shape = store.tensor(id).shape();
        let v = self.push(shape, Vec::new(), Op::Param(id));
        self.param_nodes.insert(id, v.index());
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape, self.nodes[ib].shape);
        let (m, k, vector_out) = match sa {
            Shape::Vector(k) => (1, k, true),
            Shape::Matrix(m, k) => (m, k, false),
        };
        let n = match sb {
            Shape::Matrix(k2, n) if k2 == k => n,
            _ => return Err(Error::dim("matmul", &sa.dims(), &sb.dims())),
        };
        let (av, bv) = (self.val_at(ia), self.val_at(ib));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let orow = &mut out[r * n..(r + 1) * n];
            for (i, &x) in av[r * k..(r + 1) * k].iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                for (o, &w) in orow.iter_mut().zip(&bv[i * n..(i + 1) * n]) {
                    *o += x * w;
                }
            }
        }
        let shape = if vector_out {
            Shape::Vector(n)
        } else {
            Shape::Matrix(m, n)
        };
        Ok(self.push(shape, out, Op::MatMul(ia, ib)))
    }

    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape, self.nodes[ib].shape);
        if sa != sb {
            let name = match op {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
            };
            return Err(Error::dim(name, &sa.dims(), &sb.dims()));
        }
        let (av, bv) = (self.val_at(ia), self.val_at(ib));
        let out: Vec<f64> = match op {
            Binary::Add => av.iter().zip(bv).map(|(x, y)| x + y).collect(),
            Binary::Sub => av.iter().zip(bv).map(|(x, y)| x - y).collect(),
            Binary::Mul => av.iter().zip(bv).map(|(x, y)| x * y).collect(),
        };
        Ok(self.push(sa, out, Op::Binary(op, ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let out: Vec<f64> = match op {
            Unary::Sigmoid => self.val_at(ia).iter().map(|&x| sigmoid(x)).collect(),
            Unary::Tanh => self.val_at(ia).iter().map(|x| x.tanh()).collect(),
        };
        let shape = self.nodes[ia].shape;
        Ok(self.push(shape, out, Op::Unary(op, ia)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    /// Concatenates along `axis` (0 for vectors; 0 or 1 for matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Precondition("concat of zero parts".into()));
        };
        let s0 = self.nodes[first].shape;
        let mismatch = |s: Shape| Error::dim("concat", &s0.dims(), &s.dims());
        let shape = match (s0, axis) {
            (Shape::Vector(_), 0) => {
                let mut n = 0;
                for &i in &idx {
                    match self.nodes[i].shape {
                        Shape::Vector(k) => n += k,
                        s => return Err(mismatch(s)),
                    }
                }
                Shape::Vector(n)
            }
            (Shape::Matrix(_, c), 0) => {
                let mut r = 0;
                for &i in &idx {
                    match self.nodes[i].shape {
                        Shape::Matrix(ri, ci) if ci == c => r += ri,
                        s => return Err(mismatch(s)),
                    }
                }
                Shape::Matrix(r, c)
            }
            (Shape::Matrix(r, _), 1) => {
                let mut c = 0;
                for &i in &idx {
                    match self.nodes[i].shape {
                        Shape::Matrix(ri, ci) if ri == r => c += ci,
                        s => return Err(mismatch(s)),
                    }
                }
                Shape::Matrix(r, c)
            }
            _ => {
                return Err(Error::Config(format!(
                    "concat axis {axis} invalid for shape {:?}",
                    s0.dims()
                )))
            }
        };
        let mut out = Vec::with_capacity(shape.numel());
        if let (Shape::Matrix(r, _), 1) = (shape, axis) {
            for row in 0..r {
                for &i in &idx {
                    let ci = match self.nodes[i].shape {
                        Shape::Matrix(_, ci) => ci,
                        Shape::Vector(_) => unreachable!(),
                    };
                    out.extend_from_slice(&self.val_at(i)[row * ci..(row + 1) * ci]);
                }
            }
        } else {
            for &i in &idx {
                out.extend_from_slice(self.val_at(i));
            }
        }
        Ok(self.push(shape, out, Op::Concat { parts: idx, axis }))
    }

    /// Contiguous sub-vector `[start, start + len)` of a vector.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let n = match self.nodes[ia].shape {
            Shape::Vector(n) => n,
            s => return Err(Error::dim("slice", &s.dims(), &[start, len])),
        };
        if len == 0 || start + len > n {
            return Err(Error::Index {
                what: "slice",
                index: start + len,
                len: n,
            });
        }
        let out = self.val_at(ia)[start..start + len].to_vec();
        Ok(self.push(Shape::Vector(len), out, Op::Slice { src: ia, start }))
    }

    /// Row `row` of a matrix as a vector; gradient is scattered back to
    /// that row only.
    pub fn gather(&mut self, table: Var, row: usize) -> Result<Var> {
        let it = self.check(table)?;
        let (rows, cols) = match self.nodes[it].shape {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(Error::dim("gather", &s.dims(), &[row])),
        };
        if row >= rows {
            return Err(Error::Index {
                what: "embedding table",
                index: row,
                len: rows,
            });
        }
        let out = self.val_at(it)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Shape::Vector(cols), out, Op::Gather { table: it, row }))
    }

    pub fn row(&mut self, m: Var, row: usize) -> Result<Var> {
        let im = self.check(m)?;
        let (rows, cols) = match self.nodes[im].shape {
            Shape::Matrix(r, c) => (r, c),
            s => return Err(Error::dim("row", &s.dims(), &[row])),
        };
        if row >= rows {
            return Err(Error::Index {
                what: "matrix rows",
                index: row,
                len: rows,
            });
        }
        let out = self.val_at(im)[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Shape::Vector(cols), out, Op::Row { src: im, row }))
    }

    /// Stacks equal-length vectors into a `[len × d]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = rows.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Precondition("stack of zero rows".into()));
        };
        let d = match self.nodes[first].shape {
            Shape::Vector(d) => d,
            s => return Err(Error::dim("stack_rows", &s.dims(), &[])),
        };
        let mut out = Vec::with_capacity(d * idx.len());
        for &i in &idx {
            if self.nodes[i].shape != Shape::Vector(d) {
                return Err(Error::dim("stack_rows", &[d], &self.nodes[i].shape.dims()));
            }
            out.extend_from_slice(self.val_at(i));
        }
        let shape = Shape::Matrix(idx.len(), d);
        Ok(self.push(shape, out, Op::StackRows(idx)))
    }

    /// Elementwise mean of equal-shape tensors.
    pub fn mean(&mut self, parts: &[Var]) -> Result<Var> {
        let idx: Vec<usize> = parts
            .iter()
            .map(|&p| self.check(p))
            .collect::<Result<_>>()?;
        let Some(&first) = idx.first() else {
            return Err(Error::Precondition("mean of zero parts".into()));
        };
        let shape = self.nodes[first].shape;
        let mut out = vec![0.0; shape.numel()];
        for &i in &idx {
            if self.nodes[i].shape != shape {
                return Err(Error::dim(
                    "mean",
                    &shape.dims(),
                    &self.nodes[i].shape.dims(),
                ));
            }
            for (o, x) in out.iter_mut().zip(self.val_at(i)) {
                *o += x;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        Ok(self.push(shape, out, Op::Mean(idx)))
    }

    /// Max-shifted softmax followed by negative log-likelihood of `gold`.
    /// Returns the scalar loss and the probability vector.
    pub fn softmax_cross_entropy(&mut self, logits: Var, gold: usize) -> Result<(Var, Vec<f64>)> {
        let il = self.check(logits)?;
        let n = match self.nodes[il].shape {
            Shape::Vector(n) => n,
            s => return Err(Error::dim("softmax_cross_entropy", &s.dims(), &[])),
        };
        if gold >= n {
            return Err(Error::Index {
                what: "tag set",
                index: gold,
                len: n,
            });
        }
        let probs = softmax(self.val_at(il));
        let lv = self.val_at(il);
        let max = lv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + lv.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let loss = log_z - lv[gold];
        let out = probs.clone();
        let v = self.push(
            Shape::scalar(),
            vec![loss],
            Op::SoftmaxCe {
                logits: il,
                gold,
                probs,
            },
        );
        Ok((v, out))
    }

    /// Fused LSTM cell nonlinearity. `z` holds pre-activations for the
    /// input, forget, output and candidate gates in that order; the result
    /// is `[h ‖ c]`.
    /// One LSTM step over the state `[h ‖ c]`, returning the next state.
    ///
    /// `z = x·w_x + h·w_h + b` is split into input, forget, output and
    /// candidate blocks; `c' = f ⊙ c + i ⊙ g` and `h' = o ⊙ tanh(c')`.
    pub fn lstm_cell(&mut self, x: Var, state: Var, w_x: Var, w_h: Var, b: Var) -> Result<Var> {
        let (ix, is, iwx, iwh, ib) = (
            self.check(x)?,
            self.check(state)?,
            self.check(w_x)?,
            self.check(w_h)?,
            self.check(b)?,
        );
        let (sx, ss) = (self.nodes[ix].shape, self.nodes[is].shape);
        let (Shape::Vector(d), Shape::Vector(h2)) = (sx, ss) else {
            return Err(Error::dim("lstm_cell", &sx.dims(), &ss.dims()));
        };
        let h = h2 / 2;
        if h2 % 2 != 0
            || self.nodes[iwx].shape != Shape::Matrix(d, 4 * h)
            || self.nodes[iwh].shape != Shape::Matrix(h, 4 * h)
            || self.nodes[ib].shape != Shape::Vector(4 * h)
        {
            return Err(Error::dim(
                "lstm_cell",
                &self.nodes[iwx].shape.dims(),
                &[d, 4 * h],
            ));
        }
        let n = 4 * h;
        let (xv, sv) = (self.val_at(ix), self.val_at(is));
        let (wxv, whv, bv) = (self.val_at(iwx), self.val_at(iwh), self.val_at(ib));
        let mut zx = vec![0.0; n];
        for (p, &xp) in xv.iter().enumerate() {
            if xp != 0.0 {
                for (z, &w) in zx.iter_mut().zip(&wxv[p * n..(p + 1) * n]) {
                    *z += xp * w;
                }
            }
        }
        let mut zh = vec![0.0; n];
        for (p, &hp) in sv[..h].iter().enumerate() {
            if hp != 0.0 {
                for (z, &w) in zh.iter_mut().zip(&whv[p * n..(p + 1) * n]) {
                    *z += hp * w;
                }
            }
        }
        let mut gates = vec![0.0; n];
        let mut out = vec![0.0; 2 * h];
        for j in 0..h {
            let z = |k: usize| zx[k * h + j] + zh[k * h + j] + bv[k * h + j];
            let (i, f, o, g) = (sigmoid(z(0)), sigmoid(z(1)), sigmoid(z(2)), z(3).tanh());
            let c = f * sv[h + j] + i * g;
            out[j] = o * c.tanh();
            out[h + j] = c;
            gates[j] = i;
            gates[h + j] = f;
            gates[2 * h + j] = o;
            gates[3 * h + j] = g;
        }
        Ok(self.push(
            Shape::Vector(2 * h),
            out,
            Op::LstmCell {
                x: ix,
                state: is,
                w_x: iwx,
                w_h: iwh,
                b: ib,
                gates,
            },
        ))
    }

    /// `(1 − gate) ⊙ a + gate ⊙ b`. A one-element gate broadcasts.
    pub fn blend(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let (ig, ia, ib) = (self.check(gate)?, self.check(a)?, self.check(b)?);
        let (sg, sa, sb) = (
            self.nodes[ig].shape,
            self.nodes[ia].shape,
            self.nodes[ib].shape,
        );
        if sa != sb {
            return Err(Error::dim("blend", &sa.dims(), &sb.dims()));
        }
        if sg != sa && sg != Shape::scalar() {
            return Err(Error::dim("blend gate", &sg.dims(), &sa.dims()));
        }
        let (gv, av, bv) = (self.val_at(ig), self.val_at(ia), self.val_at(ib));
        let out = (0..av.len())
            .map(|j| {
                let g = if gv.len() == 1 { gv[0] } else { gv[j] };
                (1.0 - g) * av[j] + g * bv[j]
            })
            .collect();
        Ok(self.push(
            sa,
            out,
            Op::Blend {
                gate: ig,
                a: ia,
                b: ib,
            },
        ))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let out = self.val_at(ia).iter().map(|x| x * factor).collect();
        let shape = self.nodes[ia].shape;
        Ok(self.push(shape, out, Op::Scale(ia, factor)))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let s = self.val_at(ia).iter().sum();
        Ok(self.push(Shape::scalar(), vec![s], Op::Sum(ia)))
    }

    /// Sums a list of scalars.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let Some((&first, rest)) = terms.split_first() else {
            return Ok(self.constant(Tensor::scalar(0.0)));
        };
        let mut acc = first;
        for &t in rest {
            acc = self.add(acc, t)?;
        }
        Ok(acc)
    }

    /// `Σ (a − b)²`.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (sa, sb) = (self.nodes[ia].shape, self.nodes[ib].shape);
        if sa != sb {
            return Err(Error::dim("sq_dist", &sa.dims(), &sb.dims()));
        }
        let d = self
            .val_at(ia)
            .iter()
            .zip(self.val_at(ib))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Shape::scalar(), vec![d], Op::SqDist(ia, ib)))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.check(loss)?;
        if self.nodes[il].shape != Shape::scalar() {
            return Err(Error::Tape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[il].shape.dims()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; il + 1];
        let mut sparse = Vec::new();
        grads[il] = Some(vec![1.0]);

        for i in (0..=il).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, &mut sparse);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        for (&pid, &node) in &self.param_nodes {
            if node <= il && grads[node].is_some() {
                params.push((pid, node));
            }
        }
        params.sort();
        Ok(Gradients {
            tape: self.id,
            nodes: grads,
            params,
            sparse,
        })
    }

    fn propagate(
        &self,
        i: usize,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        sparse: &mut Vec<(ParamId, usize, Vec<f64>)>,
    ) {
        fn acc(grads: &mut [Option<Vec<f64>>], j: usize, n: usize) -> &mut Vec<f64> {
            grads[j].get_or_insert_with(|| vec![0.0; n])
        }
        let numel = |j: usize| self.nodes[j].shape.numel();

        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (av, bv) = (self.val_at(a), self.val_at(b));
                let (m, k) = match self.nodes[a].shape {
                    Shape::Vector(k) => (1, k),
                    Shape::Matrix(m, k) => (m, k),
                };
                let n = g.len() / m;
                {
                    let da = acc(grads, a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                let db = acc(grads, b, k * n);
                for r in 0..m {
                    let grow = &g[r * n..(r + 1) * n];
                    for p in 0..k {
                        let x = av[r * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *d += x * gv;
                        }
                    }
                }
            }
            &Op::Binary(op, a, b) => match op {
                Binary::Add | Binary::Sub => {
                    let sign = if op == Binary::Add { 1.0 } else { -1.0 };
                    acc(grads, a, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                    acc(grads, b, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += sign * x);
                }
                Binary::Mul => {
                    let bv = self.val_at(b);
                    acc(grads, a, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(d, (x, y))| *d += x * y);
                    let av = self.val_at(a);
                    acc(grads, b, g.len())
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(d, (x, y))| *d += x * y);
                }
            },
            &Op::Unary(op, a) => {
                let y = &self.nodes[i].value;
                let da = acc(grads, a, g.len());
                match op {
                    Unary::Sigmoid => {
                        for ((d, gv), s) in da.iter_mut().zip(g).zip(y) {
                            *d += gv * s * (1.0 - s);
                        }
                    }
                    Unary::Tanh => {
                        for ((d, gv), t) in da.iter_mut().zip(g).zip(y) {
                            *d += gv * (1.0 - t * t);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].shape;
                if let (Shape::Matrix(r, c), 1) = (shape, *axis) {
                    let mut offset = 0;
                    for &p in parts {
                        let ci = match self.nodes[p].shape {
                            Shape::Matrix(_, ci) => ci,
                            Shape::Vector(_) => unreachable!(),
                        };
                        let dp = acc(grads, p, r * ci);
                        for row in 0..r {
                            for col in 0..ci {
                                dp[row * ci + col] += g[row * c + offset + col];
                            }
                        }
                        offset += ci;
                    }
                } else {
                    let mut offset = 0;
                    for &p in parts {
                        let n = numel(p);
                        acc(grads, p, n)
                            .iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, x)| *d += x);
                        offset += n;
                    }
                }
            }
            &Op::Slice { src, start } => {
                let n = numel(src);
                acc(grads, src, n)[start..start + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += x);
            }
            &Op::Gather { table, row } => {
                if let Op::Param(pid) = self.nodes[table].op {
                    sparse.push((pid, row, g.to_vec()));
                } else {
                    let n = numel(table);
                    let w = g.len();
                    acc(grads, table, n)[row * w..(row + 1) * w]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += x);
                }
            }
            &Op::Row { src, row } => {
                let n = numel(src);
                let w = g.len();
                acc(grads, src, n)[row * w..(row + 1) * w]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += x);
            }
            Op::StackRows(rows) => {
                let w = g.len() / rows.len();
                for (r, &p) in rows.iter().enumerate() {
                    acc(grads, p, w)
                        .iter_mut()
                        .zip(&g[r * w..(r + 1) * w])
                        .for_each(|(d, x)| *d += x);
                }
            }
            Op::Mean(parts) => {
                let inv = 1.0 / parts.len() as f64;
                for &p in parts {
                    acc(grads, p, g.len())
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, x)| *d += inv * x);
                }
            }
            Op::SoftmaxCe {
                logits,
                gold,
                probs,
            } => {
                let dl = acc(grads, *logits, probs.len());
                for (j, (d, p)) in dl.iter_mut().zip(probs).enumerate() {
                    let onehot = if j == *gold { 1.0 } else { 0.0 };
                    *d += g[0] * (p - onehot);
                }
            }
            Op::LstmCell {
                x,
                state,
                w_x,
                w_h,
                b,
                gates,
            } => {
                let (x, state, w_x, w_h, b) = (*x, *state, *w_x, *w_h, *b);
                let h = g.len() / 2;
                let n = 4 * h;
                let (xv, sv) = (self.val_at(x), self.val_at(state));
                let out = &self.nodes[i].value;
                let mut dz = vec![0.0; n];
                let mut dstate = vec![0.0; 2 * h];
                for j in 0..h {
                    let (ig, fg, og, cand) =
                        (gates[j], gates[h + j], gates[2 * h + j], gates[3 * h + j]);
                    let tc = out[h + j].tanh();
                    let dh = g[j];
                    let dc = g[h + j] + dh * og * (1.0 - tc * tc);
                    dz[j] = dc * cand * ig * (1.0 - ig);
                    dz[h + j] = dc * sv[h + j] * fg * (1.0 - fg);
                    dz[2 * h + j] = dh * tc * og * (1.0 - og);
                    dz[3 * h + j] = dc * ig * (1.0 - cand * cand);
                    dstate[h + j] = dc * fg;
                }
                let (wxv, whv) = (self.val_at(w_x), self.val_at(w_h));
                let dot = |w: &[f64], p: usize| {
                    w[p * n..(p + 1) * n]
                        .iter()
                        .zip(&dz)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                };
                for (p, d) in dstate[..h].iter_mut().enumerate() {
                    *d = dot(whv, p);
                }
                let dx: Vec<f64> = (0..xv.len()).map(|p| dot(wxv, p)).collect();
                acc(grads, x, xv.len())
                    .iter_mut()
                    .zip(&dx)
                    .for_each(|(d, v)| *d += v);
                acc(grads, state, 2 * h)
                    .iter_mut()
                    .zip(&dstate)
                    .for_each(|(d, v)| *d += v);
                let outer = |grads: &mut [Option<Vec<f64>>], w: usize, input: &[f64]| {
                    let dw = acc(grads, w, input.len() * n);
                    for (p, &xp) in input.iter().enumerate() {
                        if xp != 0.0 {
                            for (d, &zj) in dw[p * n..(p + 1) * n].iter_mut().zip(&dz) {
                                *d += xp * zj;
                            }
                        }
                    }
                };
                outer(grads, w_x, xv);
                outer(grads, w_h, &sv[..h]);
                acc(grads, b, n)
                    .iter_mut()
                    .zip(&dz)
                    .for_each(|(d, v)| *d += v);
            }
            &Op::Blend { gate, a, b } => {
                let (gv, av, bv) = (self.val_at(gate), self.val_at(a), self.val_at(b));
                let scalar_gate = gv.len() == 1;
                let mut dgate = vec![0.0; gv.len()];
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for j in 0..g.len() {
                    let gj = if scalar_gate { gv[0] } else { gv[j] };
                    da[j] = g[j] * (1.0 - gj);
                    db[j] = g[j] * gj;
                    dgate[if scalar_gate { 0 } else { j }] += g[j] * (bv[j] - av[j]);
                }
                acc(grads, gate, dgate.len())
                    .iter_mut()
                    .zip(&dgate)
                    .for_each(|(d, x)| *d += x);
                acc(grads, a, da.len())
                    .iter_mut()
                    .zip(&da)
                    .for_each(|(d, x)| *d += x);
                acc(grads, b, db.len())
                    .iter_mut()
                    .zip(&db)
                    .for_each(|(d, x)| *d += x);
            }
            &Op::Scale(a, f) => {
                acc(grads, a, g.len())
                    .iter_mut()
                    .zip(g)
                    .for_each(|(d, x)| *d += f * x);
            }
            &Op::Sum(a) => {
                let n = numel(a);
                acc(grads, a, n).iter_mut().for_each(|d| *d += g[0]);
            }
            &Op::SqDist(a, b) => {
                let diff: Vec<f64> = self
                    .val_at(a)
                    .iter()
                    .zip(self.val_at(b))
                    .map(|(x, y)| 2.0 * g[0] * (x - y))
                    .collect();
                acc(grads, a, diff.len())
                    .iter_mut()
                    .zip(&diff)
                    .for_each(|(d, x)| *d += x);
                acc(grads, b, diff.len())
                    .iter_mut()
                    .zip(&diff)
                    .for_each(|(d, x)| *d -= x);
            }
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Result of one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    tape: u32,
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, usize)>,
    sparse: Vec<(ParamId, usize, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a node, or `None` if the loss does not
    /// depend on it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        if v.tape != self.tape {
            return None;
        }
        self.nodes.get(v.index()).and_then(|g| g.as_deref())
    }

    pub(crate) fn dense_params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|&(pid, node)| self.nodes[node].as_deref().map(|g| (pid, g)))
    }

    pub(crate) fn sparse_rows(&self) -> impl Iterator<Item = (ParamId, usize, &[f64])> {
        self.sparse
            .iter()
            .map(|(pid, row, g)| (*pid, *row, g.as_slice()))
    }
}
