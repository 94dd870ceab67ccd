//! Named parameter storage.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in store order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Rc<Tensor>,
    trainable: bool,
}

/// Parameters keyed by stable hierarchical names such as
/// `encoder.layer0.selfattn.WQ`, kept in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, true)
    }

    /// A stored tensor that is saved and loaded but never updated.
    pub fn add_frozen(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.insert(name.into(), value, false)
    }

    fn insert(&mut self, name: String, value: Tensor, trainable: bool) -> ParamId {
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(Entry {
            name,
            value: Rc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Glorot-uniform matrix: entries uniform in `±sqrt(6 / (fan_in + fan_out))`,
    /// drawn from the parameter's own stream of `seed`.
    pub fn glorot(&mut self, name: &str, shape: &[usize], fan_in: usize, fan_out: usize, seed: u64) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut r = rng::for_name(seed, name);
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.random_range(-limit..limit)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("glorot shape"))
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::ones(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }

    /// Number of scalars in trainable parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    pub fn count_trainable(&self) -> usize {
        self.count_prefix("")
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::Input(format!("unknown parameter {name}")))?;
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::dim("set parameter", cur.shape(), value.shape()));
        }
        self.entries[id.0].value = Rc::new(value);
        Ok(())
    }

    /// Enters every parameter into `g`; trainable ones as differentiable leaves.
    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(Rc::clone(&e.value))
                } else {
                    g.constant_shared(Rc::clone(&e.value))
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Parameters as graph variables, indexed by [`ParamId`].
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    /// Wraps variables that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var<'g>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// Gradients after a backward sweep, in store order (`None` for parameters
    /// the loss does not reach).
    pub fn grads(&self) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.grad()).collect()
    }
}
