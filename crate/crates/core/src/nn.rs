//! Parameter storage and the small set of layers the models are built from.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    /// Xavier/Glorot uniform over `(fan_in, fan_out)`.
    Xavier {
        fan_in: usize,
        fan_out: usize,
    },
    Normal {
        std: f64,
    },
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn init(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data: Vec<T> = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Xavier { fan_in, fan_out } => {
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let u = Uniform::new_inclusive(-a, a).expect("valid xavier bound");
                (0..n).map(|_| T::c(u.sample(rng))).collect()
            }
            Init::Normal { std } => {
                let d = Normal::new(0.0, std).expect("valid std");
                (0..n).map(|_| T::c(d.sample(rng))).collect()
            }
        };
        self.add(name, Tensor::new(shape, data).expect("init shape"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// All parameter values concatenated in store order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Inverse of [`ParamStore::flatten`].
    pub fn unflatten(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.num_scalars() {
            return Err(Error::dim(format!(
                "expected {} parameter values, got {}",
                self.num_scalars(),
                values.len()
            )));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Replaces the tensor of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape() != value.shape() {
            return Err(Error::dim(format!(
                "parameter {name}: expected shape {:?}, got {:?}",
                self.tensors[id.0].shape(),
                value.shape()
            )));
        }
        self.tensors[id.0] = value;
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// A tape bound to a parameter store. Parameters become tape leaves on first
/// use; with `track` set they are variables and collect gradients.
pub struct Graph<'p, T> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let t = self.params.get(id).clone();
        let v = if self.track {
            self.tape.variable(t)
        } else {
            self.tape.constant(t)
        };
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.tape.value(v)
    }

    /// Runs the reverse pass and returns one gradient per parameter
    /// (zeros for parameters that were not used).
    pub fn backward(&mut self, loss: Var) -> Result<Vec<Tensor<T>>> {
        self.tape.backward(loss)?;
        Ok(self
            .params
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| self.tape.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()))
            })
            .collect())
    }
}

/// Affine map `x·W + b` over the trailing dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.init(format!("{name}.weight"), &[fan_in, fan_out], init, rng);
        let bias = store.init(format!("{name}.bias"), &[fan_out], Init::Zeros, rng);
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn xavier<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, fan_in, fan_out, Init::Xavier { fan_in, fan_out }, rng)
    }

    pub fn zeros<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self::new(store, name, fan_in, fan_out, Init::Zeros, rng)
    }

    /// `x` is `n×fan_in`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let h = g.tape.matmul(x, w)?;
        g.tape.add_row(h, b)
    }
}

/// Splits an `1×(k·D)` row into `k` row vectors of length `D`.
pub fn chunk_row<T: Scalar>(g: &mut Graph<'_, T>, row: Var, k: usize) -> Result<Vec<Var>> {
    let n = g.value(row).numel();
    if n % k != 0 {
        return Err(Error::dim(format!("cannot split {n} values into {k} chunks")));
    }
    let d = n / k;
    (0..k)
        .map(|i| g.tape.gather(row, (i * d..(i + 1) * d).collect(), &[d]))
        .collect()
}

/// `x ⊙ (1 + scale) + shift` with row-broadcast `scale`/`shift`.
pub fn modulate<T: Scalar>(g: &mut Graph<'_, T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = g.tape.add_scalar(scale, T::one());
    let h = g.tape.mul_row(x, s1)?;
    g.tape.add_row(h, shift)
}
