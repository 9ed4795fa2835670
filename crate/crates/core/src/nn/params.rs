use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

/// Non-trainable persistent state (e.g. power-iteration vectors).
#[derive(Debug, Clone, PartialEq)]
pub struct Buffer {
    pub name: String,
    pub value: Vec<f64>,
}

/// Named trainable tensors with paired gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    buffers: Vec<Buffer>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
    requires_grad: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            index: HashMap::new(),
            buffer_index: HashMap::new(),
            requires_grad: true,
        }
    }

    /// Registers a parameter. Panics on duplicate names or wrong init length;
    /// both are construction-time programming errors.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> ParamId {
        let name = name.into();
        let len: usize = shape.iter().product();
        assert_eq!(value.len(), len, "init length for {name}");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; len],
            value,
        });
        ParamId(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Vec<f64>) -> BufferId {
        let name = name.into();
        assert!(!self.buffer_index.contains_key(&name), "duplicate buffer {name}");
        let id = self.buffers.len();
        self.buffer_index.insert(name.clone(), id);
        self.buffers.push(Buffer { name, value });
        BufferId(id)
    }

    /// Frozen stores skip parameter-gradient work in backward passes.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].grad
    }

    pub fn buffer(&self, id: BufferId) -> &[f64] {
        &self.buffers[id.0].value
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut [f64] {
        &mut self.buffers[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Overwrites values and buffers by name from another store with the
    /// same layout (used when restoring checkpoints).
    pub fn load_named(&mut self, name: &str, values: &[f64]) -> Result<()> {
        if let Some(&i) = self.index.get(name) {
            let p = &mut self.params[i];
            if p.value.len() != values.len() {
                return Err(Error::shape("ParamStore::load_named", p.value.len(), values.len()));
            }
            p.value.copy_from_slice(values);
            return Ok(());
        }
        if let Some(&i) = self.buffer_index.get(name) {
            let b = &mut self.buffers[i];
            if b.value.len() != values.len() {
                return Err(Error::shape("ParamStore::load_named", b.value.len(), values.len()));
            }
            b.value.copy_from_slice(values);
            return Ok(());
        }
        Err(Error::InvalidInput(format!("unknown tensor {name}")))
    }
}

/// Uniform(-b, b) with b = gain·sqrt(3 / fan_in), i.e. variance gain²/fan_in.
pub fn init_uniform(rng: &mut impl Rng, len: usize, fan_in: usize, gain: f64) -> Vec<f64> {
    let bound = gain * (3.0 / fan_in.max(1) as f64).sqrt();
    if bound == 0.0 {
        return vec![0.0; len];
    }
    (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Unit-norm random vector (power-iteration seeds).
pub fn init_unit(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter_mut().for_each(|x| *x /= n);
    v
}
