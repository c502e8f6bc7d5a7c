use crate::{Error, Result};

/// Result of a minimum-cost assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Column matched to each row; `None` when the row was matched to padding.
    pub row_to_col: Vec<Option<usize>>,
    pub total_cost: f64,
}

/// Minimum-cost perfect matching (Kuhn-Munkres with potentials, O(n³)).
///
/// Rectangular inputs are padded with zero-cost dummy rows or columns.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Matching> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != cols) {
        return Err(Error::dim("cost matrix rows differ in length"));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::arg("cost matrix must be finite"));
    }
    if rows == 0 || cols == 0 {
        return Ok(Matching {
            row_to_col: vec![None; rows],
            total_cost: 0.0,
        });
    }
    let n = rows.max(cols);
    let at = |i: usize, j: usize| if i < rows && j < cols { cost[i][j] } else { 0.0 };

    // 1-based arrays as in the classical formulation; index 0 is a sentinel.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
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
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![None; rows];
    for j in 1..=n {
        let i = col_owner[j];
        if i >= 1 && i - 1 < rows && j - 1 < cols {
            row_to_col[i - 1] = Some(j - 1);
        }
    }
    let total_cost = row_to_col
        .iter()
        .enumerate()
        .filter_map(|(i, c)| c.map(|j| cost[i][j]))
        .sum();
    Ok(Matching { row_to_col, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases() {
        let m = hungarian(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(m.row_to_col, vec![Some(0), Some(1)]);
        assert_eq!(m.total_cost, 0.0);
        let m = hungarian(&[vec![4.5]]).unwrap();
        assert_eq!(m.row_to_col, vec![Some(0)]);
        assert_eq!(m.total_cost, 4.5);
    }

    #[test]
    fn three_by_three_matches_brute_force() {
        let c = vec![vec![4.0, 1.0, 3.0], vec![2.0, 0.0, 5.0], vec![3.0, 2.0, 2.0]];
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .map(|p| (0..3).map(|i| c[i][p[i]]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(hungarian(&c).unwrap().total_cost, best);
    }

    #[test]
    fn rectangular_is_padded() {
        let m = hungarian(&[vec![5.0, 1.0, 9.0]]).unwrap();
        assert_eq!(m.row_to_col, vec![Some(1)]);
        let m = hungarian(&[vec![3.0], vec![1.0], vec![2.0]]).unwrap();
        assert_eq!(m.row_to_col, vec![None, Some(0), None]);
        assert_eq!(m.total_cost, 1.0);
    }

    #[test]
    fn rejects_non_finite() {
        assert!(hungarian(&[vec![f64::NAN]]).is_err());
    }
}
