//! Named parameter storage and the per-evaluation binding context.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use seld_autodiff::{pack::Pack, BatchStats, Graph, Tensor, Var};

use crate::error::{invalid, Result, SeldError};

/// Learnable parameters plus non-learnable buffers (batch-norm running
/// statistics), both keyed by dotted module path.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Arc<Tensor>>,
    buffers: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), Arc::new(t));
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor) {
        self.buffers.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Arc<Tensor>> {
        self.params.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor>> {
        self.params
            .get(name)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| invalid(format!("unknown buffer {name}")))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.buffers
            .get_mut(name)
            .ok_or_else(|| invalid(format!("unknown buffer {name}")))
    }

    /// Mutable access for optimizer updates (clones on write if shared).
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| invalid(format!("unknown parameter {name}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Writes parameters under `param.` and buffers under `buffer.`.
    pub fn to_pack(&self, pack: &mut Pack) -> Result<()> {
        for (k, v) in &self.params {
            pack.insert(format!("param.{k}"), (**v).clone())?;
        }
        for (k, v) in &self.buffers {
            pack.insert(format!("buffer.{k}"), v.clone())?;
        }
        Ok(())
    }

    /// Restores values from a pack. Every parameter and buffer of `self` must
    /// be present with an identical shape, and the pack may not carry extras.
    pub fn load_pack(&mut self, pack: &Pack) -> Result<()> {
        let mut expected = 0;
        for (k, v) in self.params.iter_mut() {
            let t = lookup(pack, &format!("param.{k}"), v.shape())?;
            *v = Arc::new(t);
            expected += 1;
        }
        for (k, v) in self.buffers.iter_mut() {
            *v = lookup(pack, &format!("buffer.{k}"), v.shape())?;
            expected += 1;
        }
        let present = pack
            .names()
            .filter(|n| n.starts_with("param.") || n.starts_with("buffer."))
            .count();
        if present != expected {
            return Err(SeldError::Checkpoint(format!(
                "checkpoint holds {present} model tensors, model expects {expected}"
            )));
        }
        Ok(())
    }
}

fn lookup(pack: &Pack, key: &str, shape: &[usize]) -> Result<Tensor> {
    let t = pack
        .get(key)
        .ok_or_else(|| SeldError::Checkpoint(format!("missing {key}")))?;
    if t.shape() != shape {
        return Err(SeldError::Checkpoint(format!(
            "{key}: stored shape {:?}, model expects {shape:?}",
            t.shape()
        )));
    }
    Ok(t.clone())
}

/// One forward evaluation: a graph plus the parameters bound into it.
///
/// In training mode parameters become trainable leaves and batch-norm layers
/// use batch statistics; otherwise parameters are constants and running
/// statistics are used.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    store: Option<&'a ParamStore>,
    bound: HashMap<String, Var>,
    pub train: bool,
    bn_stats: Vec<(String, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, store: &'a ParamStore, train: bool) -> Self {
        Self {
            g,
            store: Some(store),
            bound: HashMap::new(),
            train,
            bn_stats: Vec::new(),
        }
    }

    /// Context whose parameters are already-recorded variables. Used by
    /// gradient checks, where the checker owns the leaves.
    pub fn with_vars(g: &'a mut Graph, vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            g,
            store: None,
            bound: vars.into_iter().collect(),
            train: true,
            bn_stats: Vec::new(),
        }
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let store = self
            .store
            .ok_or_else(|| invalid(format!("parameter {name} not bound")))?;
        let t = store.require(name)?.clone();
        let v = if self.train {
            self.g.param(t)
        } else {
            self.g.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'a Tensor> {
        self.store
            .ok_or_else(|| invalid(format!("buffer {name} not available")))?
            .buffer(name)
    }

    pub fn record_bn(&mut self, prefix: &str, stats: BatchStats) {
        self.bn_stats.push((prefix.to_string(), stats));
    }

    pub fn take_bn_stats(&mut self) -> Vec<(String, BatchStats)> {
        std::mem::take(&mut self.bn_stats)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound parameter after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .iter()
            .filter_map(|(k, v)| self.g.grad(*v).map(|t| (k.clone(), t.clone())))
            .collect()
    }
}

// ---- initializers ---------------------------------------------------------

/// Uniform(-b, b) with b = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(rng, shape, bound)
}

/// Kaiming-normal for ReLU fan-in.
pub fn kaiming_normal(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| n.sample(rng))
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(shape, |_| u.sample(rng))
}
