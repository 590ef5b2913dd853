use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Index of a parameter in a `ParamStore` (or of a free variable).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Reverse-mode rule for one operation.
///
/// `needs[i]` tells whether parent `i` requires a gradient; entries for
/// parents that do not may be `None`.
pub(crate) trait BackwardOp: Send + Sync {
    fn backward(
        &self,
        grad_out: &[f64],
        out: &[f64],
        parents: &[Tensor],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

enum Origin {
    Constant,
    Param(ParamId),
    Op {
        op: Box<dyn BackwardOp>,
        parents: Vec<Tensor>,
    },
}

struct Inner {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    origin: Origin,
}

/// Immutable n-dimensional array of `f64`, optionally carrying the record
/// needed to backpropagate through it.
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Arc<Vec<f64>>, origin: Origin) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            inner: Arc::new(Inner {
                shape,
                data,
                origin,
            }),
        }
    }

    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::from_shared(shape, Arc::new(data))
    }

    pub fn from_shared(shape: &[usize], data: Arc<Vec<f64>>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self::build(shape.to_vec(), data, Origin::Constant))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::build(
            shape.to_vec(),
            Arc::new(vec![0.0; numel(shape)]),
            Origin::Constant,
        )
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::build(Vec::new(), Arc::new(vec![v]), Origin::Constant)
    }

    /// A leaf that receives a gradient under `id`.
    pub fn variable(id: ParamId, shape: &[usize], data: Arc<Vec<f64>>) -> Result<Tensor> {
        let t = Self::from_shared(shape, data)?;
        Ok(Self::build(
            t.inner.shape.clone(),
            t.inner.data.clone(),
            Origin::Param(id),
        ))
    }

    /// Result of an operation. Becomes a constant when no parent needs a
    /// gradient, so inference builds no graph.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        op: impl BackwardOp + 'static,
        parents: Vec<Tensor>,
    ) -> Tensor {
        let origin = if parents.iter().any(Tensor::requires_grad) {
            Origin::Op {
                op: Box::new(op),
                parents,
            }
        } else {
            Origin::Constant
        };
        Self::build(shape, Arc::new(data), origin)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.inner.data
    }

    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        self.inner.data.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        !matches!(self.inner.origin, Origin::Constant)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        Ok(self.inner.data[0])
    }

    pub fn detach(&self) -> Tensor {
        Self::build(
            self.inner.shape.clone(),
            self.inner.data.clone(),
            Origin::Constant,
        )
    }

    fn key(&self) -> usize {
        Arc::as_ptr(&self.inner) as usize
    }

    /// Backpropagates from a scalar and returns gradients by parameter id.
    pub fn backward(&self) -> Result<Gradients> {
        if self.len() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }
        let mut grads = Gradients::default();
        if !self.requires_grad() {
            return Ok(grads);
        }

        // Post-order DFS gives a topological order of grad-requiring nodes.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.key()) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Origin::Op { parents, .. } = &node.inner.origin {
                for p in parents.iter().rev() {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }

        let mut pending: HashMap<usize, Vec<f64>> = HashMap::new();
        pending.insert(self.key(), vec![1.0]);
        for node in order.iter().rev() {
            let Some(g) = pending.remove(&node.key()) else {
                continue;
            };
            match &node.inner.origin {
                Origin::Constant => {}
                Origin::Param(id) => grads.accumulate(*id, &g),
                Origin::Op { op, parents } => {
                    let needs: Vec<bool> = parents.iter().map(Tensor::requires_grad).collect();
                    let pg = op.backward(&g, node.data(), parents, &needs);
                    for ((p, need), pgrad) in parents.iter().zip(&needs).zip(pg) {
                        if !need {
                            continue;
                        }
                        let pgrad = pgrad.expect("gradient for a parent that requires it");
                        debug_assert_eq!(pgrad.len(), p.len());
                        match pending.get_mut(&p.key()) {
                            Some(acc) => add_into(acc, &pgrad),
                            None => {
                                pending.insert(p.key(), pgrad);
                            }
                        }
                    }
                }
            }
        }
        Ok(grads)
    }
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

/// Gradients keyed by parameter id.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: HashMap<ParamId, Vec<f64>>,
}

impl Gradients {
    fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        match self.map.get_mut(&id) {
            Some(acc) => add_into(acc, g),
            None => {
                self.map.insert(id, g.to_vec());
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.map.get(&id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.map.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sum of squares over every gradient entry.
    pub fn norm_sq(&self) -> f64 {
        self.map.values().flatten().map(|g| g * g).sum()
    }
}
