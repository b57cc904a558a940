//! Minimum-cost perfect assignment (Hungarian method with potentials,
//! O(n^3)), refined to the lexicographically smallest optimal mapping.

use crate::error::{Error, Result};

/// Solves the square assignment problem on a row-major `n x n` matrix.
/// Returns `mapping` with row `i` assigned to column `mapping[i]`; among all
/// optimal assignments the lexicographically smallest mapping is returned.
pub fn solve(n: usize, cost: &[f64]) -> Result<Vec<usize>> {
    if cost.len() != n * n {
        return Err(Error::shape("cost matrix", &[n, n], &[cost.len()]));
    }
    if let Some(pos) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("cost matrix entry ({}, {})", pos / n, pos % n),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (mut row_of_col, u, v) = potentials(n, cost);
    let tol = tie_tolerance(n, cost);
    let tight = |i: usize, j: usize| cost[i * n + j] - u[i] - v[j] <= tol;
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    lexicographic(n, &tight, &mut col_of_row, &mut row_of_col);
    Ok(col_of_row)
}

/// Cost differences up to this size are treated as ties.
pub(crate) fn tie_tolerance(n: usize, cost: &[f64]) -> f64 {
    let scale = cost.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    1e-12 * scale * n as f64
}

/// Optimal assignment plus dual potentials `u` (rows) and `v` (columns)
/// with `u[i] + v[j] <= cost[i][j]`, equality on the assignment.
fn potentials(n: usize, a: &[f64]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let at = |i: usize, j: usize| a[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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
    let row_of_col = (1..=n).map(|j| p[j] - 1).collect();
    (row_of_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Every optimal assignment is a perfect matching on tight edges. Fix rows
/// in order to their smallest feasible column, repairing the matching along
/// an alternating path when the column is taken.
fn lexicographic(n: usize, tight: &dyn Fn(usize, usize) -> bool, col_of_row: &mut [usize], row_of_col: &mut [usize]) {
    for i in 0..n {
        for j in 0..n {
            if row_of_col[j] < i || !tight(i, j) {
                continue;
            }
            if col_of_row[i] == j {
                break;
            }
            if let Some(path) = reroute(n, i, j, tight, col_of_row, row_of_col) {
                let target = col_of_row[i];
                let r = row_of_col[j];
                col_of_row[i] = j;
                row_of_col[j] = i;
                // path: columns taken in turn by r and its successors
                let mut row = r;
                for &c in &path {
                    let next = row_of_col[c];
                    col_of_row[row] = c;
                    row_of_col[c] = row;
                    row = next;
                }
                debug_assert_eq!(*path.last().expect("non-empty"), target);
                break;
            }
        }
    }
}

/// Alternating path for handing column `j` to row `i`: the row displaced
/// from `j` must reach the column `i` gives up, through unfixed rows and
/// tight edges. Returns the sequence of columns the displaced rows take.
fn reroute(
    n: usize,
    i: usize,
    j: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    col_of_row: &[usize],
    row_of_col: &[usize],
) -> Option<Vec<usize>> {
    let target = col_of_row[i];
    let start = row_of_col[j];
    let mut prev_col: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    seen[j] = true;
    let mut queue = std::collections::VecDeque::new();
    // (row, column it came from)
    queue.push_back((start, j));
    while let Some((row, from)) = queue.pop_front() {
        for c in 0..n {
            if seen[c] || row_of_col[c] < i || !tight(row, c) {
                continue;
            }
            if row_of_col[c] == i && c != target {
                continue;
            }
            seen[c] = true;
            prev_col[c] = Some(from);
            if c == target {
                let mut path = vec![c];
                let mut at = from;
                while at != j {
                    path.push(at);
                    at = prev_col[at].expect("visited");
                }
                path.reverse();
                return Some(path);
            }
            queue.push_back((row_of_col[c], c));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(n: usize, c: &[f64]) -> (f64, Vec<usize>) {
        fn rec(n: usize, c: &[f64], row: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut Option<(f64, Vec<usize>)>) {
            if row == n {
                let s: f64 = cur.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
                if best.as_ref().map_or(true, |(b, _)| s < *b) {
                    *best = Some((s, cur.clone()));
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(n, c, row + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = None;
        rec(n, c, 0, &mut vec![false; n], &mut Vec::new(), &mut best);
        best.unwrap()
    }

    #[test]
    fn hand_matrix() {
        let c = [4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0];
        let m = solve(3, &c).unwrap();
        assert_eq!(m, vec![1, 0, 2]);
        assert_eq!(m.iter().enumerate().map(|(i, &j)| c[i * 3 + j]).sum::<f64>(), 5.0);
    }

    #[test]
    fn all_ties_give_identity() {
        assert_eq!(solve(4, &[7.0; 16]).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn lexicographic_among_optima() {
        // optima: (1,0,2) and (0,2,1)... both cost 2; smallest is (0,2,1)
        let c = [1.0, 0.0, 9.0, 1.0, 9.0, 0.0, 9.0, 1.0, 1.0];
        let (bc, bm) = brute(3, &c);
        let m = solve(3, &c).unwrap();
        assert_eq!(m, bm);
        assert_eq!(bc, 2.0);
    }

    #[test]
    fn small_integer_matrices_match_brute_force() {
        let mut rng = crate::rng::Stream::new(17);
        for _ in 0..300 {
            let n = 1 + rng.below(5) as usize;
            let c: Vec<f64> = (0..n * n).map(|_| rng.below(4) as f64).collect();
            let (bc, bm) = brute(n, &c);
            let m = solve(n, &c).unwrap();
            let mc: f64 = m.iter().enumerate().map(|(i, &j)| c[i * n + j]).sum();
            assert_eq!(mc, bc);
            assert_eq!(m, bm, "{c:?}");
        }
    }

    #[test]
    fn rejects_nan() {
        assert!(solve(2, &[0.0, f64::NAN, 1.0, 1.0]).is_err());
    }
}
