//! Named parameter storage and shared-MLP helpers.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NumericError, Tape, Tensor, Var};

/// Ordered, named parameter set. Order is insertion order and stays stable
/// across binding, gradient collection, optimizer state and checkpoints.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<usize, NumericError> {
        if self.by_name.contains_key(name) {
            return Err(NumericError::DuplicateParam { name: name.into() });
        }
        let idx = self.tensors.len();
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.by_name.insert(name.to_string(), idx);
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, NumericError> {
        self.by_name
            .get(name)
            .map(|&i| &self.tensors[i])
            .ok_or_else(|| NumericError::UnknownParam { name: name.into() })
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.tensors[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.tensors[idx]
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }
}

/// All parameters of a store registered as leaves on one tape.
pub struct BoundParams {
    vars: Vec<Var>,
    by_name: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, store: &ParamStore) -> Result<Self, NumericError> {
        let mut vars = Vec::with_capacity(store.len());
        let mut by_name = HashMap::with_capacity(store.len());
        for (name, tensor) in store.iter() {
            let var = tape.leaf(tensor.clone())?;
            vars.push(var);
            by_name.insert(name.to_string(), var);
        }
        Ok(Self { vars, by_name })
    }

    pub fn var(&self, name: &str) -> Result<Var, NumericError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| NumericError::UnknownParam { name: name.into() })
    }

    /// Gradients in store order, zeros for untouched parameters.
    pub fn gradients(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()
    }
}

/// FNV-1a; stable across platforms so per-parameter init streams are
/// reproducible from (seed, name) alone.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Uniform init in +-sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..=bound))
        .collect();
    Tensor::new(vec![fan_in, fan_out], data).unwrap()
}

/// A shared MLP: a chain of linear layers with ReLU after every layer.
/// Parameters are registered as `{name}.{i}.w` / `{name}.{i}.b`.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub name: String,
    pub in_dim: usize,
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(name: impl Into<String>, in_dim: usize, widths: &[usize]) -> Self {
        Self {
            name: name.into(),
            in_dim,
            widths: widths.to_vec(),
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap_or(&self.in_dim)
    }

    pub fn register(&self, store: &mut ParamStore, seed: u64) -> Result<(), NumericError> {
        let mut fan_in = self.in_dim;
        for (i, &fan_out) in self.widths.iter().enumerate() {
            let wname = format!("{}.{i}.w", self.name);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(wname.as_bytes()));
            store.insert(&wname, xavier_uniform(&mut rng, fan_in, fan_out))?;
            store.insert(&format!("{}.{i}.b", self.name), Tensor::zeros(vec![fan_out]))?;
            fan_in = fan_out;
        }
        Ok(())
    }

    pub fn bind(&self, params: &BoundParams) -> Result<BoundMlp, NumericError> {
        let mut layers = Vec::with_capacity(self.widths.len());
        for i in 0..self.widths.len() {
            layers.push((
                params.var(&format!("{}.{i}.w", self.name))?,
                params.var(&format!("{}.{i}.b", self.name))?,
            ));
        }
        Ok(BoundMlp { layers })
    }
}

/// Tape-bound MLP ready to apply.
pub struct BoundMlp {
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn apply(&self, tape: &mut Tape, mut x: Var) -> Result<Var, NumericError> {
        for &(w, b) in &self.layers {
            x = tape.linear(x, w, b)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }
}
