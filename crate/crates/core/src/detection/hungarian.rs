//! Minimum-cost one-to-one assignment (shortest augmenting paths with
//! row/column potentials), followed by a lexicographic pass so that ties
//! between optimal assignments always resolve the same way.

use crate::error::{invalid, Result};

/// Row-major `rows x cols` cost table. Either extent may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(invalid!(
                "cost entry ({}, {}) is not finite",
                i / cols.max(1),
                i % cols.max(1)
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid!("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }
}

/// One-to-one assignment of queries (rows) to ground-truth objects (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// `(query, gt)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Matching {
    pub fn gt_for_query(&self, query: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == query).map(|p| p.1)
    }
}

/// Optimal assignment value and pairs for a sub-table selected by row and column lists.
#[allow(clippy::needless_range_loop)]
fn solve(cost: &CostMatrix, rows: &[usize], cols: &[usize]) -> (f64, Vec<(usize, usize)>) {
    if rows.is_empty() || cols.is_empty() {
        return (0.0, Vec::new());
    }
    // The potential method needs n <= m; transpose otherwise.
    let transposed = rows.len() > cols.len();
    let (n, m) = if transposed {
        (cols.len(), rows.len())
    } else {
        (rows.len(), cols.len())
    };
    let a = |i: usize, j: usize| {
        if transposed {
            cost.at(rows[j], cols[i])
        } else {
            cost.at(rows[i], cols[j])
        }
    };
    // 1-based arrays; p[j] = row matched to column j, 0 = free.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
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
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs = Vec::with_capacity(n);
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            let (i, jj) = (p[j] - 1, j - 1);
            total += a(i, jj);
            pairs.push(if transposed {
                (rows[jj], cols[i])
            } else {
                (rows[i], cols[jj])
            });
        }
    }
    (total, pairs)
}

/// Minimum-total-cost assignment. Among optimal assignments the one whose
/// query-sorted pair list is lexicographically smallest is returned.
pub fn hungarian_match(cost: &CostMatrix) -> Matching {
    let all_rows: Vec<usize> = (0..cost.rows).collect();
    let all_cols: Vec<usize> = (0..cost.cols).collect();
    let (best, _) = solve(cost, &all_rows, &all_cols);
    let target = cost.rows.min(cost.cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut pairs = Vec::with_capacity(target);
    let mut free_cols = all_cols;
    let mut spent = 0.0;
    for q in 0..cost.rows {
        if pairs.len() == target {
            break;
        }
        let rest_rows: Vec<usize> = (q + 1..cost.rows).collect();
        let mut chosen = None;
        for (ci, &g) in free_cols.iter().enumerate() {
            let rest_cols: Vec<usize> = free_cols.iter().copied().filter(|&c| c != g).collect();
            let needed = target - pairs.len() - 1;
            if rest_rows.len().min(rest_cols.len()) != needed {
                continue;
            }
            let (sub, _) = solve(cost, &rest_rows, &rest_cols);
            if spent + cost.at(q, g) + sub <= best + tol {
                chosen = Some(ci);
                break;
            }
        }
        if let Some(ci) = chosen {
            let g = free_cols.remove(ci);
            spent += cost.at(q, g);
            pairs.push((q, g));
        }
    }
    let total_cost = pairs.iter().map(|&(q, g)| cost.at(q, g)).sum();
    Matching { pairs, total_cost }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Exhaustive search over all injective maps from the smaller side.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, row: usize, used: &mut Vec<bool>, transposed: bool) -> f64 {
            let (n, m) = if transposed {
                (cost.cols(), cost.rows())
            } else {
                (cost.rows(), cost.cols())
            };
            if row == n {
                return 0.0;
            }
            let mut best = f64::INFINITY;
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    let c = if transposed { cost.at(j, row) } else { cost.at(row, j) };
                    best = best.min(c + rec(cost, row + 1, used, transposed));
                    used[j] = false;
                }
            }
            best
        }
        let transposed = cost.rows() > cost.cols();
        let m = cost.rows().max(cost.cols());
        rec(cost, 0, &mut vec![false; m], transposed)
    }

    #[test]
    fn diagonal_optimum() {
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let m = hungarian_match(&c);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(m.total_cost, 0.0);
    }

    #[test]
    fn forced_single() {
        let c = CostMatrix::from_rows(&[vec![7.0]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 0)]);
    }

    #[test]
    fn empty_sides() {
        assert!(hungarian_match(&CostMatrix::new(0, 3, vec![]).unwrap())
            .pairs
            .is_empty());
        assert!(hungarian_match(&CostMatrix::new(4, 0, vec![]).unwrap())
            .pairs
            .is_empty());
    }

    #[test]
    fn rejects_non_finite() {
        assert!(CostMatrix::from_rows(&[vec![1.0, f64::NAN]]).is_err());
        assert!(CostMatrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = CostMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(0, 0), (1, 1)]);
        let c = CostMatrix::from_rows(&[vec![5.0], vec![2.0], vec![2.0]]).unwrap();
        assert_eq!(hungarian_match(&c).pairs, vec![(1, 0)]);
    }

    #[test]
    fn random_5x7_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        for _ in 0..50 {
            let data: Vec<f64> = (0..35).map(|_| rng.random_range(0.0..10.0)).collect();
            let c = CostMatrix::new(5, 7, data).unwrap();
            let m = hungarian_match(&c);
            assert_eq!(m.pairs.len(), 5);
            assert!((m.total_cost - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn every_index_used_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-3.0..3.0)).collect();
            let cost = CostMatrix::new(r, c, data).unwrap();
            let m = hungarian_match(&cost);
            assert_eq!(m.pairs.len(), r.min(c));
            let mut qs: Vec<_> = m.pairs.iter().map(|p| p.0).collect();
            let mut gs: Vec<_> = m.pairs.iter().map(|p| p.1).collect();
            qs.dedup();
            gs.sort();
            gs.dedup();
            assert_eq!(qs.len(), m.pairs.len());
            assert_eq!(gs.len(), m.pairs.len());
            assert!((m.total_cost - brute_force(&cost)).abs() < 1e-9);
        }
    }
}
