//! Permutation-aligned error metrics: estimated endmembers come out in an
//! arbitrary order, so all scores are computed after matching estimates to
//! ground truth by mean absolute difference.

use nalgebra::DMatrix;

use crate::error::{Result, ScmError};

/// A matched scoring of an estimate against ground truth. `permutation[j]`
/// is the truth index assigned to estimate `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedErrors {
    pub permutation: Vec<usize>,
    pub endmember_error: f64,
    pub abundance_error: f64,
}

fn check_same_shape(est: &DMatrix<f64>, truth: &DMatrix<f64>, what: &str) -> Result<()> {
    if est.nrows() != truth.nrows() || est.ncols() != truth.ncols() {
        return Err(ScmError::dim(
            what,
            format!("{}x{}", truth.nrows(), truth.ncols()),
            format!("{}x{}", est.nrows(), est.ncols()),
        ));
    }
    Ok(())
}

/// Pairwise mean-absolute-difference cost between estimate rows and truth rows.
fn cost_matrix(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> DMatrix<f64> {
    let m = est.nrows();
    let b = est.ncols();
    DMatrix::from_fn(m, m, |j, t| {
        let mut acc = 0.0;
        for k in 0..b {
            acc += (est[(j, k)] - truth[(t, k)]).abs();
        }
        acc / b as f64
    })
}

/// The permutation minimizing the endmember error. Exhaustive for `M <= 8`
/// (lexicographically smallest on ties), Hungarian assignment above that.
pub fn best_permutation(est: &DMatrix<f64>, truth: &DMatrix<f64>) -> Result<Vec<usize>> {
    check_same_shape(est, truth, "endmember matrices")?;
    let m = est.nrows();
    let cost = cost_matrix(est, truth);
    if m <= 8 {
        Ok(exhaustive_min(&cost))
    } else {
        Ok(hungarian(&cost))
    }
}

/// Exhaustive search over all `M!` permutations; the verification oracle for
/// the Hungarian route.
pub fn best_permutation_exhaustive(
    est: &DMatrix<f64>,
    truth: &DMatrix<f64>,
) -> Result<Vec<usize>> {
    check_same_shape(est, truth, "endmember matrices")?;
    let m = est.nrows();
    if m > 12 {
        return Err(ScmError::InvalidArgument(format!(
            "exhaustive matching is limited to M <= 12, got {m}"
        )));
    }
    Ok(exhaustive_min(&cost_matrix(est, truth)))
}

/// Lexicographic enumeration with strict improvement keeps the
/// lexicographically smallest minimizer.
fn exhaustive_min(cost: &DMatrix<f64>) -> Vec<usize> {
    let m = cost.nrows();
    let mut perm: Vec<usize> = (0..m).collect();
    let mut best = perm.clone();
    let mut best_cost = perm_cost(cost, &perm);
    while next_permutation(&mut perm) {
        let c = perm_cost(cost, &perm);
        if c < best_cost {
            best_cost = c;
            best = perm.clone();
        }
    }
    best
}

fn perm_cost(cost: &DMatrix<f64>, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(j, &t)| cost[(j, t)]).sum()
}

/// Standard in-place next lexicographic permutation; false when exhausted.
fn next_permutation(p: &mut [usize]) -> bool {
    let n = p.len();
    if n < 2 {
        return false;
    }
    let mut i = n - 1;
    while i > 0 && p[i - 1] >= p[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = n - 1;
    while p[j] <= p[i - 1] {
        j -= 1;
    }
    p.swap(i - 1, j);
    p[i..].reverse();
    true
}

/// O(n^3) shortest-augmenting-path assignment (minimization). Returns the
/// column assigned to each row.
fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    // potentials and matching, 1-based sentinel formulation
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1]; // p[col] = row matched to col (1-based)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
    let mut out = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// `(1/MB) sum |est[j,k] - truth[perm[j],k]|`.
pub fn endmember_error(
    est: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    perm: &[usize],
) -> Result<f64> {
    check_same_shape(est, truth, "endmember matrices")?;
    check_perm(perm, est.nrows())?;
    let (m, b) = (est.nrows(), est.ncols());
    let mut acc = 0.0;
    for j in 0..m {
        for k in 0..b {
            acc += (est[(j, k)] - truth[(perm[j], k)]).abs();
        }
    }
    Ok(acc / (m * b) as f64)
}

/// `(1/NM) sum |est[i,j] - truth[i,perm[j]]|` (the permutation found on the
/// endmembers is applied to the abundance columns).
pub fn abundance_error(
    est: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    perm: &[usize],
) -> Result<f64> {
    check_same_shape(est, truth, "abundance matrices")?;
    check_perm(perm, est.ncols())?;
    let (n, m) = (est.nrows(), est.ncols());
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..m {
            acc += (est[(i, j)] - truth[(i, perm[j])]).abs();
        }
    }
    Ok(acc / (n * m) as f64)
}

fn check_perm(perm: &[usize], m: usize) -> Result<()> {
    if perm.len() != m {
        return Err(ScmError::dim(
            "permutation",
            format!("{m} entries"),
            format!("{}", perm.len()),
        ));
    }
    let mut seen = vec![false; m];
    for &t in perm {
        if t >= m || seen[t] {
            return Err(ScmError::InvalidArgument(
                "permutation is not a bijection".into(),
            ));
        }
        seen[t] = true;
    }
    Ok(())
}

/// Matches on the endmembers, then scores both errors with that permutation.
pub fn align_and_score(
    est_r: &DMatrix<f64>,
    true_r: &DMatrix<f64>,
    est_a: &DMatrix<f64>,
    true_a: &DMatrix<f64>,
) -> Result<AlignedErrors> {
    let permutation = best_permutation(est_r, true_r)?;
    let endmember_error = endmember_error(est_r, true_r, &permutation)?;
    let abundance_error = abundance_error(est_a, true_a, &permutation)?;
    Ok(AlignedErrors {
        permutation,
        endmember_error,
        abundance_error,
    })
}
