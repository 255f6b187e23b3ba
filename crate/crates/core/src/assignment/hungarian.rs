//! Exact minimum-cost one-to-one assignment (shortest augmenting paths with
//! dual potentials), `O(r² c)` for `r ≤ c`.

use crate::error::{Error, Result};

/// One-to-one matching of prediction rows to ground-truth columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column matched to each row, or `None` for the no-object padding.
    pub sigma: Vec<Option<usize>>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty(rows: usize) -> Self {
        Self {
            sigma: vec![None; rows],
            total_cost: 0.0,
        }
    }

    /// `(row, column)` pairs in row order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sigma.iter().enumerate().filter_map(|(i, s)| s.map(|j| (i, j)))
    }

    pub fn matched(&self) -> usize {
        self.sigma.iter().flatten().count()
    }
}

/// Minimum-cost assignment for a row-major `rows × cols` matrix. Every row is
/// matched when `rows ≤ cols`, otherwise every column is.
pub fn hungarian(cost: &[f64], rows: usize, cols: usize) -> Result<Assignment> {
    if cost.len() != rows * cols {
        return Err(Error::Assignment(format!(
            "cost matrix has {} entries, expected {rows}×{cols}",
            cost.len()
        )));
    }
    if let Some(at) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::Assignment(format!(
            "non-finite cost at ({}, {})",
            at / cols,
            at % cols
        )));
    }
    if rows == 0 || cols == 0 {
        return Ok(Assignment::empty(rows));
    }
    let sigma = if rows <= cols {
        solve(rows, cols, |i, j| cost[i * cols + j])
    } else {
        let by_col = solve(cols, rows, |j, i| cost[i * cols + j]);
        let mut sigma = vec![None; rows];
        for (j, i) in by_col.into_iter().enumerate() {
            sigma[i.expect("every column matched")] = Some(j);
        }
        sigma
    };
    let total_cost = sigma
        .iter()
        .enumerate()
        .filter_map(|(i, s)| s.map(|j| cost[i * cols + j]))
        .sum();
    Ok(Assignment { sigma, total_cost })
}

/// Assigns each of `n ≤ m` rows to a distinct column.
fn solve(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<Option<usize>> {
    // 1-based arrays; index 0 is the virtual source row/column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
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
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
    let mut sigma = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            sigma[owner[j] - 1] = Some(j - 1);
        }
    }
    sigma
}

/// Minimum total cost over all one-to-one maps by enumeration; test oracle.
pub fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn rec(cost: &[f64], rows: usize, cols: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        let remaining_rows = rows - row;
        let free_cols = used.iter().filter(|u| !**u).count();
        if row == rows || free_cols == 0 {
            *best = best.min(acc);
            return;
        }
        for j in 0..cols {
            if !used[j] {
                used[j] = true;
                rec(cost, rows, cols, row + 1, used, acc + cost[row * cols + j], best);
                used[j] = false;
            }
        }
        // A row may stay unmatched only when there are more rows than columns.
        if remaining_rows > free_cols {
            rec(cost, rows, cols, row + 1, used, acc, best);
        }
    }
    let mut best = f64::INFINITY;
    rec(cost, rows, cols, 0, &mut vec![false; cols], 0.0, &mut best);
    best
}
