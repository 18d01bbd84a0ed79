//! Minimum-cost one-to-one assignment of rows (ground truths) to columns
//! (predictions) by the shortest augmenting path method with potentials.

use crate::error::{FlowDetError, Result};
use crate::scalar::Scalar;

/// Ground truth `g` is paired with prediction `assignment[g]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub assignment: Vec<usize>,
    /// Predictions left without a ground truth, ascending.
    pub unmatched: Vec<usize>,
}

impl MatchResult {
    /// Sum of the assigned entries, accumulated in row order.
    pub fn total_cost<T: Scalar>(&self, cost: &[Vec<T>]) -> T {
        self.assignment
            .iter()
            .enumerate()
            .map(|(g, &p)| cost[g][p])
            .fold(T::zero(), |a, b| a + b)
    }

    /// Inverse map: for each prediction, its ground truth if any.
    pub fn by_prediction(&self, n_pred: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_pred];
        for (g, &p) in self.assignment.iter().enumerate() {
            out[p] = Some(g);
        }
        out
    }
}

/// Exact minimum-cost matching for a `G × P` matrix with `G ≤ P`.
pub fn hungarian_match<T: Scalar>(cost: &[Vec<T>]) -> Result<MatchResult> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(FlowDetError::InvalidCost("ragged cost matrix".into()));
    }
    if rows > cols {
        return Err(FlowDetError::Infeasible { rows, cols });
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(FlowDetError::InvalidCost("non-finite entry".into()));
    }
    if rows == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            unmatched: (0..cols).collect(),
        });
    }

    let a = |i: usize, j: usize| cost[i - 1][j - 1].to_f64_lossy();
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0f64; rows + 1];
    let mut v = vec![0.0f64; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=cols {
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

    let mut assignment = vec![0; rows];
    let mut unmatched = Vec::new();
    for j in 1..=cols {
        if owner[j] == 0 {
            unmatched.push(j - 1);
        } else {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(MatchResult { assignment, unmatched })
}
