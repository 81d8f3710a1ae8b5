use rand::Rng;

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape leaves for every parameter of a store, valid for one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor.with_requires_grad(true));
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a `[fan_in, fan_out]` matrix drawn from U(−1/√fan_in, 1/√fan_in).
    pub fn add_uniform(&mut self, name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::new([fan_in, fan_out], data).expect("positive dims"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape.to_vec()).expect("positive dims"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every parameter onto `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }

    /// Adds the tape gradients into each parameter's grad buffer. Bound
    /// parameters that did not influence the loss receive zeros.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients) -> Result<()> {
        if bound.vars.len() != self.tensors.len() {
            return Err(Error::Contract("binding belongs to a different store".into()));
        }
        for (t, &v) in self.tensors.iter_mut().zip(&bound.vars) {
            match grads.get(v) {
                Some(g) => t.accumulate_grad(g)?,
                None => {
                    let zeros = vec![0.0; t.len()];
                    t.accumulate_grad(&zeros)?;
                }
            }
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Rescales all gradients together so their joint L2 norm is at most
    /// `max_norm`. Returns the norm before rescaling.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self
            .tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > max_norm {
            let factor = max_norm / norm;
            self.tensors.iter_mut().for_each(|t| t.scale_grad(factor));
        }
        norm
    }

    /// L2 norm of each parameter's gradient (0 when absent).
    pub fn grad_norms(&self) -> Vec<(String, f64)> {
        self.iter()
            .map(|(n, t)| {
                let norm = t.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
                (n.to_string(), norm)
            })
            .collect()
    }

    /// FNV-1a over names, shapes and value bits; used to check that
    /// evaluation leaves parameters untouched.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for (name, t) in self.iter() {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}
