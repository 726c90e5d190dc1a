//! Exact linear assignment.
//!
//! Shortest augmenting paths with dual potentials (the Jonker–Volgenant family, in
//! the dense form popularized by Crouse). After the optimum is found, ties are
//! resolved toward the lexicographically smallest optimal permutation by walking
//! alternating cycles on the zero-reduced-cost subgraph.

use super::cost::CostMatrix;

const NONE: usize = usize::MAX;

struct Solution {
    col4row: Vec<usize>,
    row4col: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

fn shortest_augmenting_path(c: &CostMatrix) -> Solution {
    let n = c.n();
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut path = vec![NONE; n];
    let mut shortest = vec![f64::INFINITY; n];
    let mut remaining = vec![0usize; n];
    let mut sr = vec![false; n];
    let mut sc = vec![false; n];

    // Column reduction: each column's minimum becomes its potential and, when that
    // row is still free, an initial tight match.
    for j in 0..n {
        let (mut best, mut arg) = (f64::INFINITY, 0);
        for i in 0..n {
            let x = c.get(i, j);
            if x < best {
                best = x;
                arg = i;
            }
        }
        v[j] = best;
        if col4row[arg] == NONE {
            col4row[arg] = j;
            row4col[j] = arg;
        }
    }

    for cur_row in 0..n {
        if col4row[cur_row] != NONE {
            continue;
        }
        shortest.fill(f64::INFINITY);
        sr.fill(false);
        sc.fill(false);
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = n - it - 1;
        }
        let mut num_remaining = n;
        let mut min_val = 0.0;
        let mut i = cur_row;
        let sink;
        loop {
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            sr[i] = true;
            let row = &c.row(i)[..n];
            let base = min_val - u[i];
            let (v, shortest, path, row4col) = (&v[..n], &mut shortest[..n], &mut path[..n], &row4col[..n]);
            for (it, &j) in remaining[..num_remaining].iter().enumerate() {
                let r = base + row[j] - v[j];
                let mut s = shortest[j];
                if r < s {
                    path[j] = i;
                    shortest[j] = r;
                    s = r;
                }
                if s < lowest || (s == lowest && row4col[j] == NONE) {
                    lowest = s;
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
            if row4col[j] == NONE {
                sink = j;
                break;
            }
            i = row4col[j];
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if sr[r] && r != cur_row {
                u[r] += min_val - shortest[col4row[r]];
            }
        }
        for j in 0..n {
            if sc[j] {
                v[j] -= min_val - shortest[j];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    Solution { col4row, row4col, u, v }
}

/// Rewrites an optimal assignment into the lexicographically smallest optimal one.
fn lexicographic_repair(c: &CostMatrix, sol: &mut Solution) {
    let n = c.n();
    let scale = c.data().iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-11 * scale;
    let tight = |sol: &Solution, i: usize, j: usize| c.get(i, j) - sol.u[i] - sol.v[j] <= tol;

    let mut fixed_col = vec![false; n];
    let mut visited = vec![false; n];
    for i in 0..n {
        let cur = sol.col4row[i];
        for j in 0..cur {
            if fixed_col[j] || !tight(sol, i, j) {
                continue;
            }
            // Row currently holding j must move, ending on the column i releases.
            let r = sol.row4col[j];
            visited.fill(false);
            visited[j] = true;
            let mut moves = Vec::new();
            if find_alternating(c, sol, &tight, r, cur, &fixed_col, &mut visited, &mut moves) {
                sol.col4row[i] = j;
                sol.row4col[j] = i;
                for (row, col) in moves {
                    sol.col4row[row] = col;
                    sol.row4col[col] = row;
                }
                break;
            }
        }
        fixed_col[sol.col4row[i]] = true;
    }
}

#[allow(clippy::too_many_arguments)]
fn find_alternating(
    c: &CostMatrix,
    sol: &Solution,
    tight: &impl Fn(&Solution, usize, usize) -> bool,
    row: usize,
    target: usize,
    fixed_col: &[bool],
    visited: &mut [bool],
    moves: &mut Vec<(usize, usize)>,
) -> bool {
    for col in 0..c.n() {
        if fixed_col[col] || visited[col] || !tight(sol, row, col) {
            continue;
        }
        visited[col] = true;
        if col == target {
            moves.push((row, col));
            return true;
        }
        let next = sol.row4col[col];
        if find_alternating(c, sol, tight, next, target, fixed_col, visited, moves) {
            moves.push((row, col));
            return true;
        }
    }
    false
}

/// Minimum-cost permutation `σ` (row `i` ↦ column `σ[i]`); the lexicographically
/// smallest one among optimal ties.
pub fn solve_exact(c: &CostMatrix) -> Vec<usize> {
    if c.n() == 0 {
        return Vec::new();
    }
    let mut sol = shortest_augmenting_path(c);
    lexicographic_repair(c, &mut sol);
    sol.col4row
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::otcore::CostMode;
    use rand::{Rng, SeedableRng};

    fn cm(n: usize, data: Vec<f64>) -> CostMatrix {
        CostMatrix::from_vec(n, data, CostMode::SquaredEuclidean).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    /// Lexicographically smallest minimizer by enumeration.
    fn brute_force(c: &CostMatrix) -> (Vec<usize>, f64) {
        let mut perms = permutations(c.n());
        perms.sort();
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in perms {
            let cost = c.assignment_cost(&p);
            if best.as_ref().is_none_or(|(_, b)| cost < b - 1e-12) {
                best = Some((p, cost));
            }
        }
        best.unwrap()
    }

    #[test]
    fn small_examples() {
        assert_eq!(solve_exact(&cm(2, vec![0.0, 1.0, 1.0, 0.0])), vec![0, 1]);
        assert_eq!(solve_exact(&cm(2, vec![1.0, 0.0, 0.0, 1.0])), vec![1, 0]);
        let n = 5;
        let diag: Vec<f64> = (0..n * n).map(|k| if k / n == k % n { -1.0 } else { 3.0 }).collect();
        assert_eq!(solve_exact(&cm(n, diag)), vec![0, 1, 2, 3, 4]);
        assert_eq!(solve_exact(&cm(1, vec![7.0])), vec![0]);
        assert!(solve_exact(&cm(0, vec![])).is_empty());
    }

    #[test]
    fn ties_resolve_lexicographically() {
        assert_eq!(solve_exact(&cm(4, vec![2.5; 16])), vec![0, 1, 2, 3]);
        // Every permutation of the two blocks is optimal.
        let c = cm(
            4,
            vec![
                5.0, 5.0, 0.0, 0.0, //
                5.0, 5.0, 0.0, 0.0, //
                0.0, 0.0, 5.0, 5.0, //
                0.0, 0.0, 5.0, 5.0,
            ],
        );
        assert_eq!(solve_exact(&c), vec![2, 3, 0, 1]);
    }

    #[test]
    fn matches_brute_force_on_random_and_integer_matrices() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for trial in 0..300 {
            let n = rng.gen_range(1..=7);
            let data: Vec<f64> = (0..n * n)
                .map(|_| {
                    if trial % 2 == 0 {
                        rng.gen_range(-5.0..5.0)
                    } else {
                        rng.gen_range(0..4) as f64
                    }
                })
                .collect();
            let c = cm(n, data);
            let got = solve_exact(&c);
            let (want, want_cost) = brute_force(&c);
            assert!((c.assignment_cost(&got) - want_cost).abs() < 1e-9);
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn invariant_under_row_and_column_shifts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.gen_range(2..=12);
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let c = cm(n, data.clone());
            let base = solve_exact(&c);
            let (r, k, s) = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(-3.0..3.0));
            let mut shifted = data;
            for j in 0..n {
                shifted[r * n + j] += s;
            }
            for i in 0..n {
                shifted[i * n + k] -= 2.0 * s;
            }
            let c2 = cm(n, shifted);
            let other = solve_exact(&c2);
            assert!((c.assignment_cost(&other) - c.assignment_cost(&base)).abs() < 1e-9);
            assert_eq!(base, other);
        }
    }

    #[test]
    fn larger_instance_is_a_permutation_and_beats_greedy() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let c = cm(n, data);
        let s = solve_exact(&c);
        let mut seen = vec![false; n];
        for &j in &s {
            assert!(!seen[j]);
            seen[j] = true;
        }
        let ident: Vec<usize> = (0..n).collect();
        assert!(c.assignment_cost(&s) <= c.assignment_cost(&ident));
    }
}
