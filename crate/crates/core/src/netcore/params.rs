use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{ParamId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
    /// False for buffers such as batch-norm running moments.
    pub trainable: bool,
}

/// Named parameters of a model, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        shape: &[usize],
        data: Vec<f64>,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidConfig(format!(
                "duplicate parameter name `{name}`"
            )));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` shape {shape:?} vs {} values",
                data.len()
            )));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data: Arc::new(data),
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.id(name).map(|id| self.entry(id))
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.entries[id.0].data)
    }

    /// Replaces the values of `name`, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown parameter `{name}`")))?;
        if self.entries[id.0].data.len() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter `{name}` size changed"
            )));
        }
        self.entries[id.0].data = Arc::new(data);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, e)| e.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    /// Total number of scalar values, buffers included.
    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.data.len())
            .sum()
    }

    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for e in &mut self.entries {
            if e.name.starts_with(prefix)
                && !e.name.ends_with(".running_mean")
                && !e.name.ends_with(".running_var")
            {
                e.trainable = trainable;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, dropout randomness, whether parameters are
/// differentiated, and batch-norm running-moment updates waiting to be
/// committed.
#[derive(Debug, Clone)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub track_params: bool,
    rng: ChaCha8Rng,
    bn_updates: Vec<(ParamId, Vec<f64>)>,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            track_params: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_updates: Vec::new(),
        }
    }

    pub fn eval() -> Self {
        ForwardCtx {
            mode: Mode::Eval,
            track_params: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    /// Tensor view of a stored parameter; differentiable only when the
    /// context tracks parameters and the entry is trainable.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        let e = store.entry(id);
        if self.track_params && e.trainable {
            Tensor::variable(id, &e.shape, e.data.clone()).expect("stored shapes are consistent")
        } else {
            Tensor::from_shared(&e.shape, e.data.clone()).expect("stored shapes are consistent")
        }
    }

    pub fn param_by_name(&self, store: &ParamStore, name: &str) -> Result<Tensor> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))?;
        Ok(self.param(store, id))
    }

    pub(crate) fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub(crate) fn push_update(&mut self, id: ParamId, value: Vec<f64>) {
        self.bn_updates.push((id, value));
    }

    /// Writes pending running-moment updates into `store`.
    pub fn commit(&mut self, store: &mut ParamStore) {
        for (id, v) in self.bn_updates.drain(..) {
            *store.data_mut(id) = v;
        }
    }

    pub fn pending_updates(&self) -> usize {
        self.bn_updates.len()
    }
}

/// Uniform initialization with bound sqrt(6 / fan_in), suited to ReLU nets.
pub fn kaiming_uniform(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Uniform initialization with bound 1 / sqrt(fan_in).
pub fn fan_in_uniform(rng: &mut impl Rng, fan_in: usize, len: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}
