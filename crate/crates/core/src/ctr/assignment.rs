//! Rectangular linear assignment: a shortest-augmenting-path Hungarian
//! solver and an exhaustive oracle for small instances.

use crate::error::{Error, Result};

/// Largest `min(rows, cols)` accepted by [`brute_force_match`].
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Dense row-major cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                actual: format!("{} entries", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("cost", "ragged rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn transposed(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(k) => Err(Error::non_finite(format!(
                "cost entry ({}, {})",
                k / self.cols,
                k % self.cols
            ))),
            None => Ok(()),
        }
    }
}

/// One-to-one partial assignment of rows to columns, sorted by row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Matching {
    pairs: Vec<(usize, usize)>,
}

impl Matching {
    /// Builds a matching, rejecting pairs that reuse a row or a column.
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Result<Self> {
        pairs.sort_unstable();
        let mut cols: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        cols.sort_unstable();
        let dup = |v: &[usize]| v.windows(2).any(|w| w[0] == w[1]);
        let rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        if dup(&rows) || dup(&cols) {
            return Err(Error::invalid("pairs", "matching is not one-to-one"));
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs
            .binary_search_by_key(&row, |p| p.0)
            .ok()
            .map(|k| self.pairs[k].1)
    }

    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.0)
    }

    pub fn cols(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.iter().map(|p| p.1)
    }

    /// Total cost, summed in row order.
    pub fn cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(i, j)| cost.get(i, j)).sum()
    }

    fn swapped(&self) -> Self {
        let mut pairs: Vec<_> = self.pairs.iter().map(|&(i, j)| (j, i)).collect();
        pairs.sort_unstable();
        Self { pairs }
    }
}

/// Minimum-cost matching of size `min(rows, cols)`.
pub fn hungarian(cost: &CostMatrix) -> Result<Matching> {
    cost.check_finite()?;
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Matching::default());
    }
    if cost.rows > cost.cols {
        return Ok(solve_wide(&cost.transposed()).swapped());
    }
    Ok(solve_wide(cost))
}

/// Potentials-based solver for `rows <= cols`; 1-based internally with
/// column 0 as the virtual source.
fn solve_wide(cost: &CostMatrix) -> Matching {
    let (n, m) = (cost.rows, cost.cols);
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut pairs: Vec<(usize, usize)> = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    Matching { pairs }
}

/// Exhaustive minimum-cost matching of size `min(rows, cols)`.
///
/// Injections from the smaller side are enumerated in lexicographic order
/// and the first one reaching the minimum is kept.
pub fn brute_force_match(cost: &CostMatrix) -> Result<Matching> {
    cost.check_finite()?;
    let small = cost.rows.min(cost.cols);
    if small > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            limit: BRUTE_FORCE_LIMIT,
            actual: small,
        });
    }
    if small == 0 {
        return Ok(Matching::default());
    }
    if cost.rows > cost.cols {
        return Ok(brute_wide(&cost.transposed()).swapped());
    }
    Ok(brute_wide(cost))
}

fn brute_wide(cost: &CostMatrix) -> Matching {
    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Option<(f64, Vec<usize>)>,
    }
    impl Search<'_> {
        fn go(&mut self, row: usize) {
            if row == self.cost.rows {
                let total: f64 = self
                    .current
                    .iter()
                    .enumerate()
                    .map(|(i, &j)| self.cost.get(i, j))
                    .sum();
                if self.best.as_ref().is_none_or(|b| total < b.0) {
                    self.best = Some((total, self.current.clone()));
                }
                return;
            }
            for j in 0..self.cost.cols {
                if !self.used[j] {
                    self.used[j] = true;
                    self.current.push(j);
                    self.go(row + 1);
                    self.current.pop();
                    self.used[j] = false;
                }
            }
        }
    }
    let mut search = Search {
        cost,
        used: vec![false; cost.cols],
        current: Vec::with_capacity(cost.rows),
        best: None,
    };
    search.go(0);
    let (_, cols) = search.best.expect("at least one injection");
    Matching {
        pairs: cols.into_iter().enumerate().collect(),
    }
}
