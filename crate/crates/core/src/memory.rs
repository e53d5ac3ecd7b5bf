//! Shared pool of memory units with key-based retrieval and per-task chunks.
//!
//! The pool holds `M` (`L_m × D × N_m` memory units), `K` (`N_m × D` keys)
//! and `A` (`D × N_m` query modulation). For a query `q`, unit `i` gets the
//! weight `wᵢ = cos(q ⊙ A[:, i], K[i])` and the readout is `Σᵢ wᵢ M[:, :, i]`.
//! Every unit contributes; there is no top-k selection.
//!
//! Units are split into `n_tasks` equal chunks. While training task `t`
//! only chunk `t` of `M`, `K` and `A` receives updates.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::Parameterized;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{GradientMask, Tensor};

pub const MEMORY_TAG: u8 = 1;
pub const UNITS: &str = "memory.units";
pub const KEYS: &str = "memory.keys";
pub const MODULATION: &str = "memory.modulation";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolShape {
    /// N_m
    pub n_units: usize,
    /// L_m
    pub length: usize,
    /// D
    pub dim: usize,
    pub n_tasks: usize,
}

impl PoolShape {
    pub fn validate(&self) -> Result<()> {
        if self.n_units == 0 || self.length == 0 || self.dim == 0 || self.n_tasks == 0 {
            return Err(Error::Config(format!("pool extents must be positive: {self:?}")));
        }
        if !self.n_units.is_multiple_of(self.n_tasks) {
            return Err(Error::Config(format!(
                "{} memory units do not split into {} equal task chunks",
                self.n_units, self.n_tasks
            )));
        }
        if !self.length.is_multiple_of(2) {
            return Err(Error::Config(format!("memory length {} must be even", self.length)));
        }
        Ok(())
    }

    pub fn chunk_size(&self) -> usize {
        self.n_units / self.n_tasks
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryPool {
    shape: PoolShape,
    store: ParamStore,
    units: ParamId,
    keys: ParamId,
    modulation: ParamId,
    frozen_chunks: BTreeSet<usize>,
}

impl Parameterized for MemoryPool {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

/// Result of one retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryReadout {
    /// Per-unit retrieval weights, each in [-1, 1].
    pub weights: Vec<f64>,
    /// `L_m × D` combined unit.
    pub combined: Tensor,
}

impl MemoryPool {
    /// Pool with `M`, `K`, `A` drawn from `U[-1/√D, 1/√D]`.
    pub fn new(shape: PoolShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (shape.dim as f64).sqrt();
        let mut store = ParamStore::with_tag(MEMORY_TAG);
        let units = store.add_uniform(UNITS, &[shape.length, shape.dim, shape.n_units], scale, &mut rng);
        let keys = store.add_uniform(KEYS, &[shape.n_units, shape.dim], scale, &mut rng);
        let modulation = store.add_uniform(MODULATION, &[shape.dim, shape.n_units], scale, &mut rng);
        Ok(Self { shape, store, units, keys, modulation, frozen_chunks: BTreeSet::new() })
    }

    /// Pool with explicit tensors (shapes must match `shape`).
    pub fn from_tensors(shape: PoolShape, units: Tensor, keys: Tensor, modulation: Tensor) -> Result<Self> {
        shape.validate()?;
        let expect = [
            (UNITS, &units, vec![shape.length, shape.dim, shape.n_units]),
            (KEYS, &keys, vec![shape.n_units, shape.dim]),
            (MODULATION, &modulation, vec![shape.dim, shape.n_units]),
        ];
        for (name, t, s) in &expect {
            if t.shape() != s.as_slice() {
                return Err(Error::Shape(format!("{name}: expected {s:?}, got {:?}", t.shape())));
            }
        }
        let mut store = ParamStore::with_tag(MEMORY_TAG);
        let units = store.add(UNITS, units);
        let keys = store.add(KEYS, keys);
        let modulation = store.add(MODULATION, modulation);
        Ok(Self { shape, store, units, keys, modulation, frozen_chunks: BTreeSet::new() })
    }

    pub fn shape(&self) -> PoolShape {
        self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn units(&self) -> &Tensor {
        self.store.get(self.units)
    }

    pub fn keys(&self) -> &Tensor {
        self.store.get(self.keys)
    }

    pub fn modulation(&self) -> &Tensor {
        self.store.get(self.modulation)
    }

    pub fn frozen_chunks(&self) -> &BTreeSet<usize> {
        &self.frozen_chunks
    }

    /// Half-open unit range owned by task `t` (0-based).
    pub fn chunk_bounds(&self, t: usize) -> Result<Range<usize>> {
        chunk_bounds(&self.shape, t)
    }

    /// Freezes every chunk except the one owned by task `t`.
    pub fn freeze_for_task(&mut self, t: usize) -> Result<()> {
        self.chunk_bounds(t)?;
        self.frozen_chunks = (0..self.shape.n_tasks).filter(|&c| c != t).collect();
        Ok(())
    }

    /// Replaces the frozen set, e.g. when restoring a checkpoint.
    pub fn set_frozen_chunks(&mut self, chunks: BTreeSet<usize>) -> Result<()> {
        if let Some(&c) = chunks.iter().find(|&&c| c >= self.shape.n_tasks) {
            return Err(Error::Index(format!("chunk {c} of {}", self.shape.n_tasks)));
        }
        self.frozen_chunks = chunks;
        Ok(())
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen_chunks.clear();
    }

    /// Gradient masks covering every frozen chunk of `M`, `K` and `A`.
    pub fn frozen_masks(&self) -> Vec<GradientMask> {
        let units: Vec<usize> =
            self.frozen_chunks.iter().flat_map(|&c| chunk_bounds(&self.shape, c).expect("valid chunk")).collect();
        if units.is_empty() {
            return Vec::new();
        }
        vec![
            GradientMask::last_axis(UNITS, self.units().shape(), units.iter().copied()),
            GradientMask::rows(KEYS, self.keys().shape(), units.iter().copied()),
            GradientMask::last_axis(MODULATION, self.modulation().shape(), units.iter().copied()),
        ]
    }

    /// Records retrieval on `tape`; returns `(weights [N_m], combined [L_m×D])`.
    pub fn retrieve_on(&self, tape: &mut Tape, query: Var) -> Result<(Var, Var)> {
        let s = self.shape;
        if tape.shape(query).iter().product::<usize>() != s.dim {
            return Err(Error::Shape(format!("query of shape {:?} for pool dimension {}", tape.shape(query), s.dim)));
        }
        let units = tape.param(&self.store, self.units);
        let keys = tape.param(&self.store, self.keys);
        let modulation = tape.param(&self.store, self.modulation);
        retrieval_graph(tape, &s, units, keys, modulation, query)
    }

    pub fn retrieve(&self, query: &Tensor) -> Result<MemoryReadout> {
        let mut tape = Tape::new();
        let q = tape.constant(query);
        let (w, m) = self.retrieve_on(&mut tape, q)?;
        Ok(MemoryReadout { weights: tape.value(w).to_vec(), combined: tape.tensor(m) })
    }
}

/// Retrieval over arbitrary tape values for `M`, `K`, `A` and the query.
pub fn retrieval_graph(
    tape: &mut Tape,
    shape: &PoolShape,
    units: Var,
    keys: Var,
    modulation: Var,
    query: Var,
) -> Result<(Var, Var)> {
    let per_unit = tape.transpose(modulation)?; // N_m × D, row i = A[:, i]
    let modulated = tape.mul_row(per_unit, query)?;
    let weights = tape.cosine_rows(modulated, keys)?;
    let flat_units = tape.reshape(units, &[shape.length * shape.dim, shape.n_units])?;
    let w_col = tape.reshape(weights, &[shape.n_units, 1])?;
    let combined = tape.matmul(flat_units, w_col)?;
    let combined = tape.reshape(combined, &[shape.length, shape.dim])?;
    Ok((weights, combined))
}

pub fn chunk_bounds(shape: &PoolShape, t: usize) -> Result<Range<usize>> {
    if t >= shape.n_tasks {
        return Err(Error::Index(format!("task {t} out of range for {} task chunks", shape.n_tasks)));
    }
    let j = shape.chunk_size();
    Ok(t * j..(t + 1) * j)
}
