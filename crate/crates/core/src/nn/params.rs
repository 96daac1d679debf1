use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Named {
    pub name: String,
    pub value: Tensor,
}

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics), both addressed by stable ids and unique dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Named>,
    buffers: Vec<Named>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Named { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        self.buffers.push(Named {
            name: name.into(),
            value,
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0].value
    }

    pub fn params(&self) -> &[Named] {
        &self.params
    }

    pub fn buffers(&self) -> &[Named] {
        &self.buffers
    }

    /// Total scalar parameter count (buffers excluded).
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replace every tensor (parameters, then buffers) by name, checking shapes.
    pub fn load_named(&mut self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for p in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            let t = lookup(&p.name).ok_or_else(|| Error::Integrity(format!("missing tensor `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::ParamShape {
                    name: p.name.clone(),
                    expected: p.value.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for p in self.params.iter_mut().chain(self.buffers.iter_mut()) {
            p.value.round_to_f32();
        }
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Builds parameters under a dotted name prefix.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Run `f` with `name` appended to the prefix.
    pub fn scope<T>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> T) -> T {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        let mut sub = Init {
            store: self.store,
            rng: self.rng,
            prefix,
        };
        f(&mut sub)
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn param(&mut self, name: &str, mut value: Tensor) -> ParamId {
        value.round_to_f32();
        let n = self.full_name(name);
        self.store.add(n, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        let n = self.full_name(name);
        self.store.add_buffer(n, value)
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| self.rng.trunc_normal(std));
        self.param(name, t)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::from_fn(shape, |_| self.rng.normal() * std);
        self.param(name, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::ones(shape))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalization; running statistics are updated.
    Train,
    /// Running statistics in normalization.
    Eval,
}

/// One forward pass: the tape, read access to parameters, and the pending
/// running-statistic updates produced along the way.
pub struct Ctx<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    mode: Mode,
    stat_updates: Vec<(BufferId, Tensor)>,
    trainable: bool,
}

/// Everything a finished forward/backward pass hands back.
#[derive(Debug)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<Option<Tensor>>,
    pub stat_updates: Vec<(BufferId, Tensor)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            mode,
            stat_updates: Vec::new(),
            trainable: true,
        }
    }

    /// Forward pass where parameters are recorded as constants (no gradients).
    pub fn inference(store: &'a ParamStore, mode: Mode) -> Self {
        let mut cx = Self::new(store, mode);
        cx.trainable = false;
        cx
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Leaf for a parameter; repeated calls return the same variable.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let t = self.store.get(id).clone();
        let v = if self.trainable {
            self.tape.leaf(t)
        } else {
            self.tape.constant(t)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        self.store.buffer(id)
    }

    pub fn record_stat(&mut self, id: BufferId, value: Tensor) {
        self.stat_updates.push((id, value));
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.tape.shape(v).to_vec()
    }

    pub fn into_stat_updates(self) -> Vec<(BufferId, Tensor)> {
        self.stat_updates
    }

    /// Backward from `loss`, collecting per-parameter gradients.
    pub fn backward(self, loss: Var) -> Result<StepOutput> {
        let Ctx {
            tape,
            vars,
            stat_updates,
            ..
        } = self;
        let value = tape.value(loss).data().first().copied().unwrap_or(f64::NAN);
        let mut g = tape.backward(loss)?;
        let grads = vars
            .iter()
            .map(|v| v.and_then(|v| g.take(v)))
            .collect();
        Ok(StepOutput {
            loss: value,
            grads,
            stat_updates,
        })
    }
}

impl ParamStore {
    pub fn apply_stat_updates(&mut self, updates: Vec<(BufferId, Tensor)>) {
        for (id, t) in updates {
            self.buffers[id.0].value = t;
        }
    }
}
