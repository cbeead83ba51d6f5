//! Maximum-weight perfect matching on square score matrices.

/// Threshold up to which [`solve_max`] enumerates permutations.
pub const EXHAUSTIVE_MAX: usize = 6;

/// `result[row] = column` maximizing the summed scores.
pub fn solve_max(scores: &[Vec<f64>]) -> Vec<usize> {
    if scores.len() <= EXHAUSTIVE_MAX {
        exhaustive_max(scores)
    } else {
        hungarian_max(scores)
    }
}

/// Enumerates all permutations; the first one found in lexicographic order
/// wins ties.
pub fn exhaustive_max(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    let mut best = (0..n).collect::<Vec<_>>();
    let mut best_sum = f64::NEG_INFINITY;
    let mut perm = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn go(
        scores: &[Vec<f64>],
        perm: &mut Vec<usize>,
        used: &mut [bool],
        acc: f64,
        best: &mut Vec<usize>,
        best_sum: &mut f64,
    ) {
        let row = perm.len();
        if row == scores.len() {
            if acc > *best_sum {
                *best_sum = acc;
                best.clone_from(perm);
            }
            return;
        }
        for col in 0..scores.len() {
            if !used[col] {
                used[col] = true;
                perm.push(col);
                go(scores, perm, used, acc + scores[row][col], best, best_sum);
                perm.pop();
                used[col] = false;
            }
        }
    }
    go(scores, &mut perm, &mut used, 0.0, &mut best, &mut best_sum);
    best
}

/// O(n³) shortest-augmenting-path Hungarian method with potentials,
/// run on negated scores.
pub fn hungarian_max(scores: &[Vec<f64>]) -> Vec<usize> {
    let n = scores.len();
    if n == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -scores[i][j];
    // 1-based rows/columns; index 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
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
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[row_of[j] - 1] = j - 1;
    }
    out
}
