//! Proposal ranking head and the localized memory query.
//!
//! The ranking head scores each proposal with one shared linear layer and
//! softmax-normalizes the scores into weights α. The memory query is the
//! α-weighted sum of proposals; with uniform α it is the proposal mean.
//! Training pushes α toward the proposals picked by Hungarian matching.

use crate::error::{Error, Result};
use crate::gradcheck;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const RANKER_TAG: u8 = 2;
pub const RANK_WEIGHT: &str = "ranker.weight";
pub const RANK_BIAS: &str = "ranker.bias";

#[derive(Clone, Debug, PartialEq)]
pub struct RankingHead {
    store: ParamStore,
    weight: ParamId,
    bias: ParamId,
}

impl gradcheck::Parameterized for RankingHead {
    fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        vec![&mut self.store]
    }
}

impl RankingHead {
    /// Zero-initialized head: every proposal starts with equal weight.
    pub fn new(dim: usize) -> Self {
        Self::from_tensors(Tensor::zeros(&[dim, 1]), Tensor::zeros(&[1]))
    }

    pub fn from_tensors(weight: Tensor, bias: Tensor) -> Self {
        let mut store = ParamStore::with_tag(RANKER_TAG);
        let weight = store.add(RANK_WEIGHT, weight);
        let bias = store.add(RANK_BIAS, bias);
        Self { store, weight, bias }
    }

    pub fn dim(&self) -> usize {
        self.store.get(self.weight).shape()[0]
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// α = softmax(proposals · w + b) over the P proposals.
    pub fn rank_on(&self, tape: &mut Tape, proposals: Var) -> Result<Var> {
        let (p, d) = match tape.shape(proposals) {
            [p, d] => (*p, *d),
            s => return Err(Error::Shape(format!("proposals must be P×D, got {s:?}"))),
        };
        if d != self.dim() {
            return Err(Error::Shape(format!("proposal width {d} vs head width {}", self.dim())));
        }
        let w = tape.param(&self.store, self.weight);
        let b = tape.param(&self.store, self.bias);
        let scores = tape.matmul(proposals, w)?;
        let scores = tape.add_row(scores, b)?;
        let scores = tape.reshape(scores, &[p])?;
        tape.softmax_rows(scores)
    }

    pub fn rank(&self, proposals: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let p = tape.constant(proposals);
        let alpha = self.rank_on(&mut tape, p)?;
        Ok(tape.value(alpha).to_vec())
    }
}

/// Σᵢ αᵢ · proposalᵢ as a length-D vector.
pub fn localized_query_on(tape: &mut Tape, proposals: Var, alpha: Var) -> Result<Var> {
    let (p, d) = match tape.shape(proposals) {
        [p, d] => (*p, *d),
        s => return Err(Error::Shape(format!("proposals must be P×D, got {s:?}"))),
    };
    if tape.value(alpha).len() != p {
        return Err(Error::Shape(format!("{} weights for {p} proposals", tape.value(alpha).len())));
    }
    let row = tape.reshape(alpha, &[1, p])?;
    let q = tape.matmul(row, proposals)?;
    tape.reshape(q, &[d])
}

pub fn localized_query(proposals: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.constant(proposals);
    let a = tape.constant(&Tensor::vector(alpha.to_vec()));
    let q = localized_query_on(&mut tape, p, a)?;
    Ok(tape.tensor(q))
}

/// Cross-entropy between α and the uniform distribution over `matched`:
/// `-(1/|matched|) Σ_{j ∈ matched} log αⱼ`.
pub fn query_loss_on(tape: &mut Tape, alpha: Var, matched: &[usize]) -> Result<Var> {
    if matched.is_empty() {
        return Err(Error::NoTarget("no matched proposals for the query loss".into()));
    }
    let picked = tape.select(alpha, matched)?;
    let picked = tape.clamp_min(picked, 1e-300)?;
    let logs = tape.log(picked)?;
    let mean = tape.mean(logs)?;
    tape.scale(mean, -1.0)
}

pub fn query_loss(alpha: &[f64], matched: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.constant(&Tensor::vector(alpha.to_vec()));
    let l = query_loss_on(&mut tape, a, matched)?;
    Ok(tape.scalar(l))
}
