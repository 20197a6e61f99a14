//! Flat named parameter storage and the per-forward graph context.
//!
//! Parameters live outside any tape as plain tensors. Each forward pass
//! inserts the ones it touches into a fresh tape, as differentiable params
//! or constant leaves depending on the trainable mask (stage-2 freezing).

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{lit, Scalar, Tape, Tensor, Var};

/// Ordered collection of named tensors.
#[derive(Clone, Debug)]
pub struct ParamSet<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id])
    }

    pub fn by_id(&self, id: usize) -> &Tensor<T> {
        &self.tensors[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.tensors[id]
    }

    /// Copies values from another set with identical names and shapes.
    pub fn copy_from(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("parameter sets have different layouts"));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("parameter shape mismatch in copy_from"));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.tensors.iter())
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Sum over parameters matching a name-prefix filter.
    pub fn count_matching(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| pred(n))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }
}

/// Truncated-normal-ish initializer used by every projection.
pub fn normal_init<T: Scalar>(
    shape: &[usize],
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        // Box-Muller on the seeded stream keeps init reproducible
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        lit::<T>(z.clamp(-3.0, 3.0) * std)
    })
}

/// One forward pass: a tape plus lazy insertion of parameters.
pub struct GraphCtx<'a, T: Scalar> {
    pub tape: Tape<T>,
    params: &'a ParamSet<T>,
    trainable: Option<&'a [bool]>,
    cache: Vec<Option<Var>>,
}

impl<'a, T: Scalar> GraphCtx<'a, T> {
    /// `trainable`: per-parameter mask; `None` marks everything
    /// differentiable (training stage 1 / gradient checking).
    pub fn new(params: &'a ParamSet<T>, trainable: Option<&'a [bool]>) -> Self {
        GraphCtx {
            tape: Tape::new(),
            params,
            trainable,
            cache: vec![None; params.len()],
        }
    }

    /// Inference context: parameters enter as constant leaves.
    pub fn inference(params: &'a ParamSet<T>) -> Self {
        static EMPTY: [bool; 0] = [];
        let mut ctx = GraphCtx::new(params, None);
        ctx.trainable = Some(&EMPTY); // sentinel: nothing trainable
        ctx
    }

    fn is_trainable(&self, id: usize) -> bool {
        match self.trainable {
            None => true,
            Some(mask) => mask.get(id).copied().unwrap_or(false),
        }
    }

    /// Var for a named parameter, inserting it on first use.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        if let Some(v) = self.cache[id] {
            return Ok(v);
        }
        let tensor = self.params.by_id(id).clone();
        let v = if self.is_trainable(id) {
            self.tape.param(tensor)
        } else {
            self.tape.leaf(tensor)
        };
        self.cache[id] = Some(v);
        Ok(v)
    }

    /// Var of the parameter if it was used in this forward.
    pub fn used_param(&self, id: usize) -> Option<Var> {
        self.cache[id]
    }

    /// Linear layer: x @ w + b.
    pub fn linear(&mut self, x: Var, w_name: &str, b_name: &str) -> Result<Var> {
        let w = self.p(w_name)?;
        let b = self.p(b_name)?;
        let h = self.tape.matmul(x, w)?;
        self.tape.add(h, b)
    }
}
