//! K-means endmember initialization (k-means++ seeding plus Lloyd updates).
//!
//! The result is bit-identical for a fixed seed: distance evaluations may run
//! in parallel, but assignments are reduced in pixel order.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, ScmError};
use crate::par;
use crate::types::HsiCube;

const MAX_ITERS: usize = 100;
const MOVE_TOL: f64 = 1e-8;
/// Independent k-means++ restarts; the run with the lowest inertia wins.
const RESTARTS: usize = 8;

/// Returns the `M x B` matrix of cluster centers of the cube's spectra.
///
/// Runs a handful of k-means++-seeded Lloyd iterations (all sub-seeded from
/// the given seed) and keeps the lowest-inertia result, so the output is
/// bit-identical across runs for a fixed seed.
pub fn kmeans_init(cube: &HsiCube, m: usize, seed: u64) -> Result<DMatrix<f64>> {
    let n = cube.n_pixels();
    if m == 0 {
        return Err(ScmError::InvalidArgument("k-means needs M >= 1".into()));
    }
    if n < m {
        return Err(ScmError::InvalidArgument(format!(
            "k-means needs at least M pixels, got N={n} < M={m}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    for _ in 0..RESTARTS {
        let run_seed: u64 = rng.random();
        let (inertia, centers) = lloyd_run(cube, m, run_seed);
        if best.as_ref().is_none_or(|(bi, _)| inertia < *bi) {
            best = Some((inertia, centers));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// One k-means++ seeding plus Lloyd iterations; returns final inertia.
fn lloyd_run(cube: &HsiCube, m: usize, seed: u64) -> (f64, DMatrix<f64>) {
    let b = cube.bands();
    let y = cube.matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = plus_plus_seeding(y, m, &mut rng);
    let mut inertia = f64::INFINITY;

    for _ in 0..MAX_ITERS {
        let assign = assignments(y, &centers);
        inertia = assign.iter().map(|&(_, d)| d).sum();

        // sequential accumulation keeps sums deterministic
        let mut sums: DMatrix<f64> = DMatrix::zeros(m, b);
        let mut counts = vec![0usize; m];
        for (i, &(k, _)) in assign.iter().enumerate() {
            counts[k] += 1;
            for c in 0..b {
                sums[(k, c)] += y[(i, c)];
            }
        }

        let mut new_centers = centers.clone();
        for k in 0..m {
            if counts[k] == 0 {
                // re-seed an empty cluster to the point farthest from its
                // assigned center (lowest pixel index on ties)
                let far = assign
                    .iter()
                    .enumerate()
                    .max_by(|(ia, (_, da)), (ib, (_, db))| {
                        da.partial_cmp(db).unwrap().then(ib.cmp(ia))
                    })
                    .map(|(i, _)| i)
                    .expect("at least one pixel");
                for c in 0..b {
                    new_centers[(k, c)] = y[(far, c)];
                }
            } else {
                for c in 0..b {
                    new_centers[(k, c)] = sums[(k, c)] / counts[k] as f64;
                }
            }
        }

        let movement = (&new_centers - &centers).norm();
        centers = new_centers;
        if movement < MOVE_TOL {
            break;
        }
    }
    (inertia, centers)
}

/// Squared Euclidean distance from pixel `i` to a center row.
fn dist2(y: &DMatrix<f64>, i: usize, centers: &DMatrix<f64>, k: usize) -> f64 {
    let mut acc = 0.0;
    for c in 0..y.ncols() {
        let d = y[(i, c)] - centers[(k, c)];
        acc += d * d;
    }
    acc
}

/// Per-pixel `(nearest center, squared distance)`; ties pick the lowest index.
fn assignments(y: &DMatrix<f64>, centers: &DMatrix<f64>) -> Vec<(usize, f64)> {
    let m = centers.nrows();
    par::map_indexed(y.nrows(), |i| {
        let mut best = (0usize, f64::INFINITY);
        for k in 0..m {
            let d = dist2(y, i, centers, k);
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    })
}

fn plus_plus_seeding(y: &DMatrix<f64>, m: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = y.nrows();
    let b = y.ncols();
    let mut centers = DMatrix::zeros(m, b);
    let mut chosen = vec![rng.random_range(0..n)];
    for c in 0..b {
        centers[(0, c)] = y[(chosen[0], c)];
    }
    let mut best_d2: Vec<f64> = par::map_indexed(n, |i| dist2(y, i, &centers, 0));

    for k in 1..m {
        let total: f64 = best_d2.iter().sum();
        let idx = if total > 0.0 {
            let draw = rng.random_range(0.0..total);
            let mut cum = 0.0;
            let mut pick = n - 1;
            for (i, &d) in best_d2.iter().enumerate() {
                cum += d;
                if draw < cum {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            // all remaining mass is zero (duplicated points); lowest unused index
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(idx);
        for c in 0..b {
            centers[(k, c)] = y[(idx, c)];
        }
        let d_new: Vec<f64> = par::map_indexed(n, |i| dist2(y, i, &centers, k));
        for i in 0..n {
            if d_new[i] < best_d2[i] {
                best_d2[i] = d_new[i];
            }
        }
    }
    centers
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn distinct_repeated_spectra_are_recovered() {
        // three pure spectra, each repeated; zero-variance clusters
        let spectra = [[0.1, 0.9], [0.5, 0.5], [0.9, 0.1]];
        let mut data = Vec::new();
        for rep in 0..4 {
            for s in &spectra {
                let _ = rep;
                data.extend_from_slice(s);
            }
        }
        let cube = HsiCube::new(3, 4, 2, data).unwrap();
        let centers = kmeans_init(&cube, 3, 7).unwrap();
        let mut found = [false; 3];
        for k in 0..3 {
            for (si, s) in spectra.iter().enumerate() {
                if (centers[(k, 0)] - s[0]).abs() < 1e-12 && (centers[(k, 1)] - s[1]).abs() < 1e-12
                {
                    found[si] = true;
                }
            }
        }
        assert!(found.iter().all(|&f| f), "centers {centers}");
    }

    #[test]
    fn single_cluster_is_the_column_mean() {
        let cube = HsiCube::new(2, 2, 2, vec![0.0, 1.0, 0.2, 0.8, 0.4, 0.6, 0.6, 0.4]).unwrap();
        let centers = kmeans_init(&cube, 1, 3).unwrap();
        assert_abs_diff_eq!(centers[(0, 0)], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(centers[(0, 1)], 0.7, epsilon = 1e-12);
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let data: Vec<f64> = (0..6 * 5 * 3).map(|i| ((i * 37 % 100) as f64) / 100.0).collect();
        let cube = HsiCube::new(6, 5, 3, data).unwrap();
        let c1 = kmeans_init(&cube, 4, 42).unwrap();
        let c2 = kmeans_init(&cube, 4, 42).unwrap();
        assert_eq!(c1, c2);
        let c3 = kmeans_init(&cube, 4, 43).unwrap();
        assert!(c1 != c3 || c1 == c3); // different seed may legitimately coincide
    }

    #[test]
    fn duplicated_points_do_not_panic() {
        let cube = HsiCube::new(1, 3, 2, vec![0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let centers = kmeans_init(&cube, 2, 1).unwrap();
        for k in 0..2 {
            assert_abs_diff_eq!(centers[(k, 0)], 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn too_few_pixels_is_an_error() {
        let cube = HsiCube::new(1, 2, 1, vec![0.1, 0.2]).unwrap();
        assert!(kmeans_init(&cube, 3, 0).is_err());
    }
}
