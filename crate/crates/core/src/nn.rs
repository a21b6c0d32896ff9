//! Parameter storage and the small set of layers the model is built from.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{BatchNormMode, BatchStats, Gradients, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    /// Buffers (running statistics) are stored and checkpointed but never
    /// receive gradients.
    pub trainable: bool,
}

/// Named parameter tensors shared by every forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.push(name.into(), tensor.with_grad(), true)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, mut tensor: Tensor) -> ParamId {
        tensor.set_requires_grad(false);
        self.push(name.into(), tensor, false)
    }

    fn push(&mut self, name: String, tensor: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry { name, tensor, trainable });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    /// Number of trainable scalars whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Replaces tensor values from another store with identical layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.entries.len() != self.entries.len() {
            return Err(Error::Format(format!("{} stored tensors, model has {}", other.entries.len(), self.entries.len())));
        }
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            if dst.name != src.name || dst.tensor.shape() != src.tensor.shape() {
                return Err(Error::Format(format!("tensor {} {:?} does not match {} {:?}", src.name, src.tensor.shape(), dst.name, dst.tensor.shape())));
            }
            dst.tensor.data_mut().copy_from_slice(src.tensor.data());
        }
        Ok(())
    }
}

/// Dense per-parameter gradients (absent entries are zero).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamGrads {
    pub grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn zeros(n: usize) -> Self {
        Self { grads: vec![None; n] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(src) = src {
                match dst {
                    Some(d) => d.iter_mut().zip(src).for_each(|(a, b)| *a += b),
                    None => *dst = Some(src.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= c);
        }
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map(|g| g.iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(0.0)
    }
}

/// One forward pass: a private graph over shared parameters.
pub struct Forward<'a> {
    pub g: Graph<'a>,
    params: &'a ParamStore,
    bound: Vec<Option<Var>>,
    train: bool,
    /// Outside training, normalize set-level batch norms with the current
    /// cloud's own statistics instead of the running averages.
    eval_batch_stats: bool,
    bn_stats: Vec<(ParamId, BatchStats)>,
}

impl<'a> Forward<'a> {
    pub fn new(params: &'a ParamStore, train: bool) -> Self {
        Self { g: Graph::new(), params, bound: vec![None; params.len()], train, eval_batch_stats: false, bn_stats: Vec::new() }
    }

    pub fn with_eval_batch_stats(mut self, on: bool) -> Self {
        self.eval_batch_stats = on;
        self
    }

    pub fn is_training(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    /// Binds a parameter into the graph, once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.g.leaf(self.params.get(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn take_bn_stats(&mut self) -> Vec<(ParamId, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    /// Gradients of `loss` for every bound parameter.
    pub fn param_grads(&self, loss: Var) -> Result<ParamGrads> {
        let mut grads: Gradients = self.g.backward(loss)?;
        let mut out = ParamGrads::zeros(self.params.len());
        for (i, v) in self.bound.iter().enumerate() {
            if let Some(v) = v {
                out.grads[i] = grads.take(*v);
            }
        }
        Ok(out)
    }
}

pub(crate) fn uniform_tensor(rng: &mut impl Rng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("valid init shape")
}

pub(crate) fn gaussian_tensor(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect();
    Tensor::new(shape, data).expect("valid init shape")
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, outputs: usize, bias: bool) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform_tensor(rng, vec![inputs, outputs], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs])));
        Self { w, b, inputs, outputs }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.w);
        let b = self.b.map(|b| f.param(b));
        f.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Normalize with running statistics even while training. Used where a
    /// graph sees a single row, which has no usable batch statistics.
    pub running_only: bool,
}

pub const BN_MOMENTUM: f64 = 0.9;

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, running_only: bool) -> Self {
        let mut ones = Tensor::zeros(vec![width]);
        ones.data_mut().fill(1.0);
        let gamma = store.add(format!("{name}.gamma"), ones.clone());
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![width]));
        let running_mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![width]));
        let running_var = store.add_buffer(format!("{name}.running_var"), ones);
        Self { gamma, beta, running_mean, running_var, running_only }
    }

    pub fn forward(&self, f: &mut Forward<'_>, x: Var) -> Result<Var> {
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let params = f.params;
        let mode = if (f.train || f.eval_batch_stats) && !self.running_only {
            BatchNormMode::Batch
        } else {
            BatchNormMode::Running { mean: params.get(self.running_mean).data(), var: params.get(self.running_var).data() }
        };
        let (y, stats) = f.g.batch_norm(x, gamma, beta, mode)?;
        if f.train {
            f.bn_stats.push((self.running_mean, stats));
        }
        Ok(y)
    }
}

/// Folds pooled batch statistics into the running averages.
pub fn update_running_stats(store: &mut ParamStore, observed: &[(ParamId, BatchStats)]) {
    let mut pooled: Vec<(ParamId, BatchStats)> = Vec::new();
    for (id, s) in observed {
        match pooled.iter_mut().find(|(p, _)| p == id) {
            Some((_, acc)) => acc.merge(s),
            None => pooled.push((*id, s.clone())),
        }
    }
    for (mean_id, stats) in pooled {
        let (mean, var) = stats.moments();
        // running_var is always registered right after running_mean
        let var_id = ParamId(mean_id.0 + 1);
        for (r, m) in store.get_mut(mean_id).data_mut().iter_mut().zip(&mean) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
        }
        for (r, v) in store.get_mut(var_id).data_mut().iter_mut().zip(&var) {
            *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
        }
    }
}

/// Point-wise shared MLP: `linear -> batchnorm -> relu` per layer.
#[derive(Clone, Debug)]
pub struct SharedMlp {
    pub layers: Vec<(Dense, BatchNorm)>,
}

impl SharedMlp {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, inputs: usize, units: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(units.len());
        let mut width = inputs;
        for (i, &u) in units.iter().enumerate() {
            let dense = Dense::new(store, rng, &format!("{name}.{i}"), width, u, false);
            let bn = BatchNorm::new(store, &format!("{name}.{i}.bn"), u, false);
            layers.push((dense, bn));
            width = u;
        }
        Self { layers }
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map(|(d, _)| d.outputs).unwrap_or(0)
    }

    pub fn forward(&self, f: &mut Forward<'_>, mut x: Var) -> Result<Var> {
        for (dense, bn) in &self.layers {
            let h = dense.forward(f, x)?;
            let h = bn.forward(f, h)?;
            x = f.g.relu(h);
        }
        Ok(x)
    }
}
