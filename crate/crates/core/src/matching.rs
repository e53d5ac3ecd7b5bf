//! Minimum-cost assignment of ground-truth objects to proposals.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou, Annotation, BBox};
use crate::detector::Prediction;
use crate::error::{Error, Result};

/// Weights of the pairwise matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCost {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Score term is `-log p` instead of `-p`.
    pub log_prob: bool,
}

impl Default for MatchCost {
    fn default() -> Self {
        Self { class: 1.0, l1: 5.0, giou: 2.0, log_prob: false }
    }
}

/// Ground-truth to proposal pairs. Proposals not listed are background.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// (proposal, ground truth), ordered by ground-truth index.
    pub pairs: Vec<(usize, usize)>,
}

impl Assignment {
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn matched_proposals(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(p, _)| p).collect()
    }

    pub fn proposal_of(&self, truth: usize) -> Option<usize> {
        self.pairs.iter().find(|&&(_, g)| g == truth).map(|&(p, _)| p)
    }

    /// Proposals left for background, in index order.
    pub fn unmatched(&self, proposals: usize) -> Vec<usize> {
        let mut used = vec![false; proposals];
        for &(p, _) in &self.pairs {
            used[p] = true;
        }
        (0..proposals).filter(|&p| !used[p]).collect()
    }

    /// Σ cost[truth][proposal] over the pairs, in ground-truth order.
    pub fn total_cost(&self, cost: &[Vec<f64>]) -> f64 {
        self.pairs.iter().map(|&(p, g)| cost[g][p]).sum()
    }
}

pub fn l1_distance(a: &BBox, b: &BBox) -> f64 {
    a.as_array().iter().zip(b.as_array()).map(|(x, y)| (x - y).abs()).sum()
}

/// Cost matrix with one row per ground-truth object and one column per
/// proposal.
pub fn cost_matrix(predictions: &[Prediction], truth: &[Annotation], weights: &MatchCost) -> Result<Vec<Vec<f64>>> {
    truth
        .iter()
        .map(|gt| {
            predictions
                .iter()
                .map(|p| {
                    let s = *p
                        .scores
                        .get(gt.class)
                        .ok_or_else(|| Error::Index(format!("class {} of {} scores", gt.class, p.scores.len())))?;
                    let class = if weights.log_prob { -s.max(1e-12).ln() } else { -s };
                    let box_cost =
                        weights.l1 * l1_distance(&p.bbox, &gt.bbox) + weights.giou * (1.0 - giou(&p.bbox, &gt.bbox)?);
                    Ok(weights.class * class + box_cost)
                })
                .collect()
        })
        .collect()
}

/// Solves the rectangular assignment problem for `rows ≤ cols`, returning
/// the column of every row. Shortest augmenting paths with potentials,
/// O(rows² · cols). Ties go to the lowest column index.
pub fn solve(cost: &[Vec<f64>]) -> Result<Vec<usize>> {
    let n = cost.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let m = cost[0].len();
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if n > m {
        return Err(Error::Capacity { ground_truth: n, proposals: m });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("assignment cost"));
    }
    // 1-based arrays; column 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    Ok(out)
}

/// Optimal injection of the ground truth into the proposals.
pub fn hungarian_match(predictions: &[Prediction], truth: &[Annotation], weights: &MatchCost) -> Result<Assignment> {
    if truth.len() > predictions.len() {
        return Err(Error::Capacity { ground_truth: truth.len(), proposals: predictions.len() });
    }
    let cost = cost_matrix(predictions, truth, weights)?;
    let cols = solve(&cost)?;
    Ok(Assignment { pairs: cols.into_iter().enumerate().map(|(g, p)| (p, g)).collect() })
}
