//! The two constraint projections of the solver: `phi` maps abundance rows
//! onto the probability simplex (sort-and-threshold), `psi` maps symmetric
//! matrices onto the SPD cone with an eigenvalue floor.

use nalgebra::DMatrix;

use crate::error::{Result, ScmError};
use crate::par;
use crate::types::{symmetrize, AbundanceMatrix};

/// Euclidean projection of one row onto `{a >= 0, sum a = 1}`.
///
/// Sorts descending (ties by original column index), finds the largest `k`
/// with `a'_k - (sum_{l<=k} a'_l - 1)/k > 0`, and thresholds at
/// `theta = (sum_{l<=K} a'_l - 1)/K`.
pub fn project_simplex_row(row: &[f64]) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) {
        return Err(ScmError::NonFiniteInput(
            "simplex projection input".into(),
        ));
    }
    let m = row.len();
    let mut order: Vec<usize> = (0..m).collect();
    // stable descending sort; equal values keep original column order
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));

    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        let v = row[idx];
        cumsum += v;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if v - candidate > 0.0 {
            theta = candidate;
        }
    }
    Ok(row.iter().map(|&v| (v - theta).max(0.0)).collect())
}

/// Row-wise simplex projection of an `N x M` matrix.
pub fn project_simplex_rows(x: &DMatrix<f64>) -> Result<AbundanceMatrix> {
    let rows = collect_projected_rows(x, true)?;
    assemble(x.nrows(), x.ncols(), rows)
}

/// Single-threaded variant of [`project_simplex_rows`]; the fallback used by
/// the non-rayon build and the baseline in the benchmark suite.
pub fn project_simplex_rows_seq(x: &DMatrix<f64>) -> Result<AbundanceMatrix> {
    let rows = collect_projected_rows(x, false)?;
    assemble(x.nrows(), x.ncols(), rows)
}

fn collect_projected_rows(x: &DMatrix<f64>, parallel: bool) -> Result<Vec<Result<Vec<f64>>>> {
    let n = x.nrows();
    let m = x.ncols();
    let project = |i: usize| {
        let mut row = vec![0.0; m];
        for c in 0..m {
            row[c] = x[(i, c)];
        }
        project_simplex_row(&row)
    };
    Ok(if parallel {
        par::map_indexed(n, project)
    } else {
        (0..n).map(project).collect()
    })
}

fn assemble(n: usize, m: usize, rows: Vec<Result<Vec<f64>>>) -> Result<AbundanceMatrix> {
    let mut out = DMatrix::zeros(n, m);
    for (i, row) in rows.into_iter().enumerate() {
        let row = row?;
        for c in 0..m {
            out[(i, c)] = row[c];
        }
    }
    AbundanceMatrix::new(out)
}

/// Projection onto the SPD cone with eigenvalue floor: symmetrizes, then
/// replaces each eigenvalue `lambda_i` by `max(lambda_i, floor)`.
pub fn project_spd_floor(x: &DMatrix<f64>, floor: f64) -> Result<DMatrix<f64>> {
    if !(floor > 0.0) || !floor.is_finite() {
        return Err(ScmError::InvalidArgument(format!(
            "eigenvalue floor must be positive and finite, got {floor}"
        )));
    }
    if x.nrows() != x.ncols() {
        return Err(ScmError::dim(
            "SPD projection input",
            "square matrix".to_string(),
            format!("{}x{}", x.nrows(), x.ncols()),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(ScmError::NonFiniteInput("SPD projection input".into()));
    }
    let mut sym = x.clone();
    symmetrize(&mut sym);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .ok_or_else(|| ScmError::EigenFailure("SPD floor projection".into()))?;
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&clamped);
    let mut out = scaled * eig.eigenvectors.transpose();
    symmetrize(&mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn feasible_row_is_unchanged() {
        let out = project_simplex_row(&[0.2, 0.8]).unwrap();
        assert_abs_diff_eq!(out[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.8, epsilon = 1e-15);
    }

    #[test]
    fn symmetric_row_gets_equal_shares() {
        let out = project_simplex_row(&[0.5, 0.5, 0.5]).unwrap();
        for v in &out {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn vertex_projection_matches_grid_oracle() {
        let input = [1.2, -0.3];
        let out = project_simplex_row(&input).unwrap();
        assert_abs_diff_eq!(out[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.0, epsilon = 1e-15);

        // brute-force oracle over the 1-simplex at resolution 1e-4
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let a = k as f64 * 1e-4;
            let d = (a - input[0]).powi(2) + ((1.0 - a) - input[1]).powi(2);
            if d < best.0 {
                best = (d, a);
            }
        }
        assert!((out[0] - best.1).abs() < 2e-4);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(project_simplex_row(&[f64::NAN, 0.5]).is_err());
        let x = DMatrix::from_row_slice(1, 2, &[f64::INFINITY, 0.0]);
        assert!(project_simplex_rows(&x).is_err());
    }

    #[test]
    fn row_and_matrix_projections_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = DMatrix::from_fn(40, 5, |_, _| rng.random_range(-2.0..2.0));
        let par = project_simplex_rows(&x).unwrap();
        let seq = project_simplex_rows_seq(&x).unwrap();
        assert_eq!(par.matrix(), seq.matrix());
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_feasible(row in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
            let once = project_simplex_row(&row).unwrap();
            let twice = project_simplex_row(&once).unwrap();
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
            let sum: f64 = once.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12 * row.len() as f64);
            prop_assert!(once.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn projection_is_non_expansive(
            x in proptest::collection::vec(-3.0f64..3.0, 4),
            y in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let px = project_simplex_row(&x).unwrap();
            let py = project_simplex_row(&y).unwrap();
            let d_in: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
            let d_out: f64 = px.iter().zip(&py).map(|(a, b)| (a - b).powi(2)).sum();
            prop_assert!(d_out <= d_in + 1e-12);
        }
    }

    #[test]
    fn spd_floor_keeps_matrices_above_floor() {
        let x = DMatrix::identity(3, 3);
        let out = project_spd_floor(&x, 0.5).unwrap();
        assert_abs_diff_eq!((out - DMatrix::identity(3, 3)).norm(), 0.0, epsilon = 1e-12);

        let x = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        let out = project_spd_floor(&x, 0.01).unwrap();
        assert_abs_diff_eq!(out[(0, 0)], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(1, 1)], 0.01, epsilon = 1e-12);
        assert_abs_diff_eq!(out[(0, 1)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn spd_floor_is_idempotent_and_floored() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let raw = DMatrix::from_fn(4, 4, |_, _| rng.random_range(-1.0..1.0));
            let sym = (&raw + raw.transpose()) * 0.5;
            let floor = 0.05;
            let once = project_spd_floor(&sym, floor).unwrap();
            let twice = project_spd_floor(&once, floor).unwrap();
            assert_abs_diff_eq!((&once - &twice).norm(), 0.0, epsilon = 1e-10);
            let eig = crate::types::symmetric_eigenvalues(&once).unwrap();
            for &ev in eig.iter() {
                assert!(ev >= floor - 1e-10);
            }
        }
    }

    #[test]
    fn spd_floor_is_nearest_in_the_shared_eigenbasis() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let raw = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let sym = (&raw + raw.transpose()) * 0.5;
            let floor = 0.1;
            let out = project_spd_floor(&sym, floor).unwrap();
            let dist = (&out - &sym).norm();

            let eig = nalgebra::SymmetricEigen::new(sym.clone());
            for _ in 0..200 {
                // random feasible eigenvalue vector in the same eigenbasis
                let vals = nalgebra::DVector::from_fn(3, |_, _| rng.random_range(floor..2.0));
                let cand = &eig.eigenvectors
                    * DMatrix::from_diagonal(&vals)
                    * eig.eigenvectors.transpose();
                assert!((cand - &sym).norm() >= dist - 1e-10);
            }
        }
    }

    #[test]
    fn spd_floor_is_optimal_on_2x2_grid() {
        // grid-search all symmetric 2x2 candidates near the projection and
        // verify none with eigenvalues >= floor is closer
        let x = DMatrix::from_row_slice(2, 2, &[0.3, 0.4, 0.4, -0.2]);
        let floor = 0.05;
        let out = project_spd_floor(&x, floor).unwrap();
        let best = (&out - &x).norm();
        let step = 0.02;
        for ia in -60..=60 {
            for ib in -60..=60 {
                for ic in -60..=60 {
                    let (a, b, c) = (ia as f64 * step, ib as f64 * step, ic as f64 * step);
                    // eigenvalues of [[a, c], [c, b]]
                    let tr = a + b;
                    let det = a * b - c * c;
                    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
                    let lmin = tr / 2.0 - disc;
                    if lmin < floor {
                        continue;
                    }
                    let cand = DMatrix::from_row_slice(2, 2, &[a, c, c, b]);
                    let d = (cand - &x).norm();
                    assert!(d >= best - 1e-9, "grid candidate beat the projection");
                }
            }
        }
    }

    #[test]
    fn spd_floor_rejects_bad_input() {
        let x = DMatrix::from_row_slice(2, 2, &[f64::NAN, 0.0, 0.0, 1.0]);
        assert!(project_spd_floor(&x, 0.1).is_err());
        let x = DMatrix::identity(2, 2);
        assert!(project_spd_floor(&x, 0.0).is_err());
    }
}
