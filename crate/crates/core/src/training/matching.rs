use crate::error::{Error, Result};

/// A perfect matching of rows (queries) to columns (padded ground truths).
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// `assignment[query] = column`.
    pub assignment: Vec<usize>,
    /// Sum of matched costs, accumulated in query order.
    pub total_cost: f64,
}

impl MatchResult {
    /// `(query, column)` pairs whose column is a real ground truth (`< num_real`).
    pub fn real_pairs(&self, num_real: usize) -> Vec<(usize, usize)> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|&(_, &j)| j < num_real)
            .map(|(i, &j)| (i, j))
            .collect()
    }
}

/// Minimum-cost perfect matching on a square matrix given as rows.
///
/// Among optimal assignments the lexicographically smallest one (by query
/// index, then column index) is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<MatchResult> {
    let n = cost.len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Shape(format!(
                "cost matrix row {i} has {} entries, expected {n}",
                row.len()
            )));
        }
        if let Some(j) = row.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!("cost[{i}][{j}] = {}", row[j])));
        }
    }
    if n == 0 {
        return Ok(MatchResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        });
    }
    let (mut row_of_col, u, v) = solve(cost);
    lexicographic_minimum(cost, &u, &v, &mut row_of_col);
    let mut assignment = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        assignment[i] = j;
    }
    let total_cost = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Ok(MatchResult {
        assignment,
        total_cost,
    })
}

/// Shortest augmenting path assignment (Jonker-Volgenant style potentials).
/// Returns the row matched to each column and the dual potentials.
fn solve(cost: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let n = cost.len();
    // 1-based with column 0 as the virtual source.
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

/// Rewrites an optimal matching into the lexicographically smallest optimal one.
///
/// Every optimal matching uses only tight edges (zero reduced cost under optimal
/// potentials), so this is the lexicographically smallest perfect matching of the
/// tight subgraph: rows are fixed in order, each to the smallest column reachable
/// through an alternating cycle among the unfixed rows.
fn lexicographic_minimum(cost: &[Vec<f64>], u: &[f64], v: &[f64], row_of_col: &mut [usize]) {
    let n = cost.len();
    let scale = cost.iter().flatten().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-12 * scale * n as f64;
    let tight: Vec<Vec<bool>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| (cost[i][j] - u[i] - v[j]).abs() <= tol)
                .collect()
        })
        .collect();
    let mut col_of_row = vec![0; n];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    for i in 0..n {
        let current = col_of_row[i];
        for j in 0..current {
            if !tight[i][j] || row_of_col[j] < i {
                continue;
            }
            // Re-home the row holding `j` so that `current` becomes free.
            if let Some(path) =
                alternating_path(&tight, row_of_col, &col_of_row, row_of_col[j], current, i)
            {
                // path: rows r_0..r_k, each taking a new column; r_k takes `current`.
                for (r, c) in path {
                    col_of_row[r] = c;
                    row_of_col[c] = r;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                break;
            }
        }
    }
}

/// BFS for a sequence of reassignments starting at row `start` that ends with some
/// row taking column `target`. Rows `<= fixed_upto` never move. Returns the
/// `(row, new column)` moves.
fn alternating_path(
    tight: &[Vec<bool>],
    row_of_col: &[usize],
    col_of_row: &[usize],
    start: usize,
    target: usize,
    fixed_upto: usize,
) -> Option<Vec<(usize, usize)>> {
    let n = tight.len();
    // parent[col] = row that would move into col.
    let mut parent = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([start]);
    let mut seen_row = vec![false; n];
    seen_row[start] = true;
    while let Some(r) = queue.pop_front() {
        for c in 0..n {
            if !tight[r][c] || parent[c] != usize::MAX || c == col_of_row[r] {
                continue;
            }
            let owner = row_of_col[c];
            if c != target && (owner <= fixed_upto || seen_row[owner]) {
                continue;
            }
            parent[c] = r;
            if c == target {
                let mut moves = Vec::new();
                let mut col = c;
                loop {
                    let row = parent[col];
                    moves.push((row, col));
                    if row == start {
                        return Some(moves);
                    }
                    col = col_of_row[row];
                }
            }
            seen_row[owner] = true;
            queue.push_back(owner);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive search; ties resolved to the lexicographically first permutation.
    fn brute_force(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
        fn rec(
            cost: &[Vec<f64>],
            i: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            best: &mut Option<(Vec<usize>, f64)>,
        ) {
            let n = cost.len();
            if i == n {
                let total: f64 = cur.iter().enumerate().map(|(r, &c)| cost[r][c]).sum();
                if best.as_ref().map_or(true, |(_, b)| total < *b) {
                    *best = Some((cur.clone(), total));
                }
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    rec(cost, i + 1, used, cur, best);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = None;
        rec(
            cost,
            0,
            &mut vec![false; cost.len()],
            &mut Vec::new(),
            &mut best,
        );
        best.unwrap()
    }

    #[test]
    fn diagonal_optimum() {
        let m = hungarian_match(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(m.assignment, vec![0, 1]);
        assert_eq!(m.total_cost, 2.0);
    }

    #[test]
    fn ties_go_to_lowest_indices() {
        let m = hungarian_match(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(m.assignment, vec![0, 1]);
        let m = hungarian_match(&vec![vec![0.0; 5]; 5]).unwrap();
        assert_eq!(m.assignment, vec![0, 1, 2, 3, 4]);
        // anti-diagonal optimum forced for row 0, then ties
        let c = vec![
            vec![5.0, 5.0, 0.0],
            vec![0.0, 0.0, 5.0],
            vec![0.0, 0.0, 5.0],
        ];
        assert_eq!(hungarian_match(&c).unwrap().assignment, vec![2, 0, 1]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            hungarian_match(&[vec![1.0, 2.0]]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            hungarian_match(&[vec![1.0, f64::NAN], vec![0.0, 0.0]]),
            Err(Error::NonFinite(_))
        ));
        assert_eq!(
            hungarian_match(&[]).unwrap().assignment,
            Vec::<usize>::new()
        );
    }

    #[test]
    fn integer_ties_match_brute_force_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.gen_range(1..=6);
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0..3) as f64).collect())
                .collect();
            let (perm, total) = brute_force(&c);
            let m = hungarian_match(&c).unwrap();
            assert_eq!(m.total_cost, total);
            assert_eq!(m.assignment, perm, "{c:?}");
        }
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..=7);
            let c: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect())
                .collect();
            let (perm, total) = brute_force(&c);
            let m = hungarian_match(&c).unwrap();
            assert_eq!(m.total_cost, total);
            assert_eq!(m.assignment, perm);
        }
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_assignment(
            vals in prop::collection::vec(0.0f64..10.0, 36),
            shift in -100.0f64..100.0,
        ) {
            let c: Vec<Vec<f64>> = vals.chunks(6).map(|r| r.to_vec()).collect();
            let shifted: Vec<Vec<f64>> = c.iter().map(|r| r.iter().map(|x| x + shift).collect()).collect();
            prop_assert_eq!(hungarian_match(&c).unwrap().assignment, hungarian_match(&shifted).unwrap().assignment);
        }
    }
}
