//! Named parameters and the per-pass binding context.
//!
//! Models keep parameter *names*; the values live in a [`ParamStore`]. A
//! forward pass runs inside a [`Ctx`], which binds each parameter onto the
//! pass's tape the first time a layer asks for it.

use std::cell::{RefCell, RefMut};
use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gradcheck::{gradcheck_with, GradcheckOptions, GradcheckReport};
use crate::tensor::Tensor;

/// Parameter tensors keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    /// Replaces a value, keeping the shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "ParamStore::set",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Sets every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Binding context for one forward (and optional backward) pass.
pub struct Ctx<'a> {
    tape: Tape,
    store: &'a ParamStore,
    bound: RefCell<BTreeMap<String, Var>>,
    differentiable: bool,
    training: bool,
    rng: RefCell<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Parameters are bound as leaves so their gradients can be read back.
    pub fn train(store: &'a ParamStore, seed: u64) -> Self {
        Self::build(store, true, true, seed)
    }

    /// Parameters are bound as constants; dropout is off.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self::build(store, false, false, 0)
    }

    /// Leaves, but with dropout off. Used for gradient checks.
    pub fn differentiable(store: &'a ParamStore) -> Self {
        Self::build(store, true, false, 0)
    }

    fn build(store: &'a ParamStore, differentiable: bool, training: bool, seed: u64) -> Self {
        Ctx {
            tape: Tape::new(),
            store,
            bound: RefCell::new(BTreeMap::new()),
            differentiable,
            training,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Runs on an existing tape with some parameters pre-bound.
    pub fn with_bindings(tape: &Tape, store: &'a ParamStore, bindings: BTreeMap<String, Var>) -> Self {
        Ctx {
            tape: tape.clone(),
            store,
            bound: RefCell::new(bindings),
            differentiable: true,
            training: false,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn rng(&self) -> RefMut<'_, ChaCha8Rng> {
        self.rng.borrow_mut()
    }

    /// The tape variable for parameter `name`, binding it on first use.
    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let value = self.store.get(name)?.clone();
        let v = if self.differentiable {
            self.tape.leaf(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    pub fn input(&self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Gradients of every bound parameter after `backward`. Parameters not
    /// reached by the loss get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .map(|(name, v)| {
                let g = v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Fixed pseudo-random weights used to turn a tensor output into a scalar
/// for gradient checks. A plain sum would make normalization layers look
/// flat.
pub fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::randn(shape, 1.0, &mut rng)
}

/// `Σ out ⊙ projection(out.shape)`.
pub fn project(out: &Var, seed: u64) -> Result<Var> {
    let p = out.tape().constant(projection(&out.shape(), seed));
    Ok(out.mul(&p)?.sum())
}

/// Gradient check of a layer with respect to both its inputs and every
/// parameter in `store` whose name starts with `prefix`.
pub fn gradcheck_module<F>(
    store: &ParamStore,
    prefix: &str,
    inputs: &[Tensor],
    opts: &GradcheckOptions,
    f: F,
) -> Result<GradcheckReport>
where
    F: Fn(&Ctx, &[Var]) -> Result<Var>,
{
    let names: Vec<String> = store.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect();
    let mut points: Vec<Tensor> = inputs.to_vec();
    for n in &names {
        points.push(store.get(n)?.clone());
    }
    let n_inputs = inputs.len();
    gradcheck_with(
        |tape, vars| {
            let bindings = names.iter().cloned().zip(vars[n_inputs..].iter().cloned()).collect();
            let ctx = Ctx::with_bindings(tape, store, bindings);
            f(&ctx, &vars[..n_inputs])
        },
        &points,
        opts,
    )
}
