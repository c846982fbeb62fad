use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Which task's batches may update a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Target,
    Source,
    Shared,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Target => "target",
            Partition::Source => "source",
            Partition::Shared => "shared",
        })
    }
}

/// Small set of partitions used as an optimizer mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PartitionSet {
    target: bool,
    source: bool,
    shared: bool,
}

impl PartitionSet {
    pub fn of(parts: &[Partition]) -> Self {
        let mut set = PartitionSet::default();
        for p in parts {
            set.insert(*p);
        }
        set
    }

    pub fn all() -> Self {
        PartitionSet {
            target: true,
            source: true,
            shared: true,
        }
    }

    pub fn insert(&mut self, p: Partition) {
        match p {
            Partition::Target => self.target = true,
            Partition::Source => self.source = true,
            Partition::Shared => self.shared = true,
        }
    }

    pub fn contains(&self, p: Partition) -> bool {
        match p {
            Partition::Target => self.target,
            Partition::Source => self.source,
            Partition::Shared => self.shared,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub partition: Partition,
    pub tensor: Tensor,
    /// Frozen parameters still receive gradients but are never updated.
    pub trainable: bool,
}

/// Named trainable tensors, each tagged with a [`Partition`].
///
/// Every registered tensor carries a gradient buffer. Names are unique and
/// registration order is stable, so a [`ParamId`] is just an index.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        partition: Partition,
        mut tensor: Tensor,
    ) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        tensor.track();
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            partition,
            tensor,
            trainable: true,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.param(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn zero_grads(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Adds the parameter gradients from one backward pass into the
    /// store's buffers.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (id, g) in grads.dense_params() {
            let buf = self.params[id.0].tensor.track();
            for (b, x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        }
        for (id, row, g) in grads.sparse_rows() {
            let p = &mut self.params[id.0].tensor;
            let width = g.len();
            let buf = p.track();
            for (b, x) in buf[row * width..(row + 1) * width].iter_mut().zip(g) {
                *b += x;
            }
        }
    }

    /// Global L2 norm of gradients over the partitions in `mask`.
    pub fn grad_norm(&self, mask: PartitionSet) -> f64 {
        self.params
            .iter()
            .filter(|p| mask.contains(p.partition))
            .filter_map(|p| p.tensor.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, mask: PartitionSet, factor: f64) {
        for p in self
            .params
            .iter_mut()
            .filter(|p| mask.contains(p.partition))
        {
            p.tensor.track().iter_mut().for_each(|g| *g *= factor);
        }
    }

    /// Pairs every parameter under `prefix_a` with the parameter under
    /// `prefix_b` that has the same remaining name and shape.
    pub fn pair_subsets(&self, prefix_a: &str, prefix_b: &str) -> Result<Vec<(ParamId, ParamId)>> {
        let side = |prefix: &str| -> Vec<(String, ParamId)> {
            self.iter()
                .filter_map(|(id, p)| {
                    p.name
                        .strip_prefix(prefix)
                        .map(|rest| (rest.to_string(), id))
                })
                .collect()
        };
        let a = side(prefix_a);
        let b: HashMap<String, ParamId> = side(prefix_b).into_iter().collect();
        if a.len() != b.len() {
            return Err(Error::Pairing(format!(
                "{prefix_a}* has {} tensors but {prefix_b}* has {}",
                a.len(),
                b.len()
            )));
        }
        let mut pairs = Vec::with_capacity(a.len());
        for (rest, ia) in a {
            let ib = *b.get(&rest).ok_or_else(|| {
                Error::Pairing(format!(
                    "{prefix_a}{rest} has no counterpart under {prefix_b}"
                ))
            })?;
            let (sa, sb) = (self.tensor(ia).shape(), self.tensor(ib).shape());
            if sa != sb {
                return Err(Error::Pairing(format!(
                    "{prefix_a}{rest} shape {:?} != {prefix_b}{rest} shape {:?}",
                    sa.dims(),
                    sb.dims()
                )));
            }
            pairs.push((ia, ib));
        }
        Ok(pairs)
    }

    /// Sum of squared element differences over matched parameter pairs.
    pub fn l2_distance_sq(&self, pairs: &[(ParamId, ParamId)]) -> Result<f64> {
        let mut total = 0.0;
        for &(a, b) in pairs {
            let (ta, tb) = (self.tensor(a), self.tensor(b));
            if ta.shape() != tb.shape() {
                return Err(Error::Pairing(format!(
                    "{} vs {}: shapes {:?} and {:?}",
                    self.param(a).name,
                    self.param(b).name,
                    ta.shape().dims(),
                    tb.shape().dims()
                )));
            }
            total += ta
                .values()
                .iter()
                .zip(tb.values())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>();
        }
        Ok(total)
    }
}
