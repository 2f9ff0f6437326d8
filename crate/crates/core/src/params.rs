//! Named parameter storage.
//!
//! Parameters persist across steps as plain buffers; each training step binds
//! them onto a fresh [`Tape`] as `requires_grad` leaves and reads gradients
//! back after `backward`. Registration order is deterministic, which fixes
//! the checkpoint layout and the init stream consumption order.

use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorRef};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::ops::Index;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Handle for the i-th registered parameter; registration order is stable.
pub fn index_id(index: usize) -> ParamId {
    ParamId(index)
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal(0, std) with samples outside two standard deviations redrawn.
    TruncNormal { std: f64 },
    /// Truncated normal with std = sqrt(2 / (fan_in + fan_out)); keeps deep
    /// unnormalized stacks (the graph convolutions) at unit scale, where a
    /// flat 0.02 leaves their outputs orders of magnitude too small to
    /// train against.
    Glorot,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        let numel: usize = shape.iter().product();
        let trunc_normal = |std: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("valid std");
            (0..numel)
                .map(|_| loop {
                    let v: f64 = dist.sample(rng);
                    if v.abs() <= 2.0 * std {
                        break v;
                    }
                })
                .collect()
        };
        let data = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::TruncNormal { std } => trunc_normal(std, rng),
            Init::Glorot => {
                let (fan_out, fan_in) = match shape {
                    [n] => (*n, *n),
                    [rows, cols] => (*cols, *rows),
                    _ => {
                        let cols = *shape.last().unwrap();
                        (cols, numel / cols)
                    }
                };
                trunc_normal((2.0 / (fan_in + fan_out) as f64).sqrt(), rng)
            }
        };
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            shape: shape.to_vec(),
            data,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].data
    }

    /// Replace a parameter's data, shape-checked by name.
    pub fn restore(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::contract("restore", format!("unknown parameter {name}")))?;
        if entry.shape != shape {
            return Err(Error::dimension("restore", &entry.shape, shape));
        }
        entry.data = data;
        Ok(())
    }

    /// Bind every parameter onto the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Bindings> {
        self.bind_with(tape, true)
    }

    /// Bind as constants for inference; no grad buffers get allocated.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Result<Bindings> {
        self.bind_with(tape, false)
    }

    fn bind_with(&self, tape: &mut Tape, requires_grad: bool) -> Result<Bindings> {
        let mut refs = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            refs.push(tape.leaf(e.data.clone(), &e.shape, requires_grad)?);
        }
        Ok(Bindings { refs })
    }
}

/// Tape handles for every parameter of one step, indexed by [`ParamId`].
pub struct Bindings {
    refs: Vec<TensorRef>,
}

impl Index<ParamId> for Bindings {
    type Output = TensorRef;
    fn index(&self, id: ParamId) -> &TensorRef {
        &self.refs[id.0]
    }
}

impl Bindings {
    pub fn refs(&self) -> &[TensorRef] {
        &self.refs
    }

    /// Build bindings from handles in registration order; used by
    /// verification code that packs all parameters into one flat leaf.
    pub fn from_refs(refs: Vec<TensorRef>) -> Self {
        Bindings { refs }
    }
}
