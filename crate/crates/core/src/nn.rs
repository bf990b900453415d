//! Parameter storage and per-forward-pass state shared by blocks and networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BatchMoments, Graph, NormMode, Tensor, Var};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BufferId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether weight decay applies (affine and conv weights only).
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

/// Flat, ordered store of trainable parameters and non-trainable buffers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Buffer {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    /// Weight tensor drawn from `U(-b, b)` with `b = sqrt(6 / fan_in)`.
    pub fn add_weight(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut ChaCha8Rng) -> ParamId {
        let fan_in: usize = shape[1..].iter().product();
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let value = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
        self.add(name, value, true)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> ParamId {
        self.add(name, Tensor::zeros(&[len]), false)
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Folds observed batch moments into running statistics:
    /// `running = (1 - momentum) * running + momentum * batch`, with the
    /// unbiased batch variance.
    pub fn update_running_stats(&mut self, observed: &[(BatchNorm, BatchMoments)], momentum: f64) {
        for (bn, m) in observed {
            let correction = if m.count > 1 {
                m.count as f64 / (m.count - 1) as f64
            } else {
                1.0
            };
            for (r, b) in self.buffers[bn.running_mean.0].value.data_mut().iter_mut().zip(&m.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in self.buffers[bn.running_var.0].value.data_mut().iter_mut().zip(&m.var) {
                *r = (1.0 - momentum) * *r + momentum * b * correction;
            }
        }
    }
}

/// Batch normalization over axis 1 with its parameters and running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::ones(&[channels]), false),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[channels]), false),
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
            channels,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// State of one forward pass: the graph, parameter bindings, observed
/// batch-norm moments, the drop-mask cache and the pass's random stream.
pub struct Session<'a> {
    pub graph: &'a mut Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    track_grads: bool,
    moments: Vec<(BatchNorm, BatchMoments)>,
    pub masks: crate::blocks::MaskCache,
    pub rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(graph: &'a mut Graph, store: &'a ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            graph,
            store,
            bound: vec![None; store.params().len()],
            mode,
            track_grads: mode == Mode::Train,
            moments: Vec::new(),
            masks: crate::blocks::MaskCache::default(),
            rng,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Track gradients of parameters regardless of mode.
    pub fn track_grads(mut self, on: bool) -> Self {
        self.track_grads = on;
        self
    }

    /// Graph variable of a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = if self.track_grads {
            self.graph.param(value)
        } else {
            self.graph.constant(value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Uses an existing graph variable for a parameter.
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Parameters that were used in this pass, with their variables.
    pub fn bindings(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Result<Var> {
        let (gamma, beta) = (self.param(bn.gamma), self.param(bn.beta));
        match self.mode {
            Mode::Train => {
                let (y, m) = self
                    .graph
                    .batch_norm(x, gamma, beta, NormMode::Batch { eps: BN_EPS })?;
                if let Some(m) = m {
                    self.moments.push((*bn, m));
                }
                Ok(y)
            }
            Mode::Eval => {
                let store = self.store;
                let mode = NormMode::Running {
                    mean: store.buffer(bn.running_mean).data(),
                    var: store.buffer(bn.running_var).data(),
                    eps: BN_EPS,
                };
                Ok(self.graph.batch_norm(x, gamma, beta, mode)?.0)
            }
        }
    }

    pub fn take_moments(&mut self) -> Vec<(BatchNorm, BatchMoments)> {
        std::mem::take(&mut self.moments)
    }
}

/// Looks up a parameter by name.
pub fn find_param(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .params()
        .iter()
        .position(|p| p.name == name)
        .map(ParamId)
        .ok_or_else(|| Error::Checkpoint(format!("no parameter named {name}")))
}
