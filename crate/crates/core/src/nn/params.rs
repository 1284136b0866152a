use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cell::RefCell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tape::{Gradients, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether decoupled weight decay applies; never for rank < 2.
    pub decay: bool,
}

/// Flat, named parameter collection of a model.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn insert(&mut self, name: String, value: Tensor<T>, decay: bool) -> ParamId {
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let decay = decay && value.rank() >= 2;
        self.params.push(Param {
            name,
            value: value.detach(),
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Replaces a value; the new tensor must keep the old dims.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dims() != value.dims() {
            return Err(shape_err!(
                "parameter {}: expected dims {:?}, got {:?}",
                p.name,
                p.value.dims(),
                value.dims()
            ));
        }
        p.value = value.detach();
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Total elements of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }
}

/// FNV-1a, used to derive per-component random streams.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Random stream for one named component. Components initialize
/// identically for a given seed no matter what else the model contains.
pub fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_hash(component));
    rng
}

/// Scoped parameter initializer.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.into(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.into()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.into()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn tensor(&mut self, name: &str, value: Tensor<T>, decay: bool) -> ParamId {
        let n = self.full_name(name);
        self.store.insert(n, value, decay)
    }

    pub fn normal(&mut self, name: &str, dims: &[usize], std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("finite std");
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| T::lit(dist.sample(rng)));
        self.tensor(name, t, true)
    }

    pub fn uniform(&mut self, name: &str, dims: &[usize], bound: f64) -> ParamId {
        let dist = Uniform::new_inclusive(-bound, bound);
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(dims, |_| T::lit(dist.sample(rng)));
        self.tensor(name, t, true)
    }

    pub fn constant(&mut self, name: &str, dims: &[usize], value: f64) -> ParamId {
        self.tensor(name, Tensor::full(dims, T::lit(value)), false)
    }

    pub fn zeros(&mut self, name: &str, dims: &[usize]) -> ParamId {
        self.constant(name, dims, 0.0)
    }
}

/// Per-forward binding of a parameter store to a tape. Parameters become
/// tape leaves on first use.
pub struct Ctx<'a, T> {
    pub tape: &'a Tape<T>,
    params: &'a ParamStore<T>,
    bound: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a Tape<T>, params: &'a ParamStore<T>) -> Self {
        let mut bound = Vec::new();
        bound.resize_with(params.len(), || None);
        Self {
            tape,
            params,
            bound: RefCell::new(bound),
        }
    }

    pub fn params(&self) -> &ParamStore<T> {
        self.params
    }

    pub fn p(&self, id: ParamId) -> Tensor<T> {
        let mut bound = self.bound.borrow_mut();
        bound[id.0]
            .get_or_insert_with(|| self.tape.leaf(self.params.value(id)))
            .clone()
    }

    /// Gradient per parameter, in store order; `None` for parameters the
    /// forward never touched.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.bound
            .borrow()
            .iter()
            .map(|b| b.as_ref().and_then(|t| grads.get(t)))
            .collect()
    }
}
