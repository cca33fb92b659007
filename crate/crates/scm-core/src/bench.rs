//! Trial harness for the synthetic benchmarks: generates seeded scenes, runs
//! the chosen algorithms, and aggregates permutation-aligned errors. Trials
//! are isolated solver runs and execute in parallel under the `parallel`
//! feature; rows come back in a deterministic order either way.

use nalgebra::DMatrix;

use crate::error::{Result, ScmError};
use crate::metrics;
use crate::par;
use crate::solver;
use crate::synth::{generate_scene, SynthSpec};
use crate::types::{HsiCube, ScmConfig};
use crate::uncertainty;

/// The algorithms the benchmark can run. NCM is the same pipeline with the
/// spatial, sparsity and wavelength priors zeroed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Algorithm {
    Ncm,
    Scm,
}

impl Algorithm {
    pub fn name(&self) -> &'static str {
        match self {
            Algorithm::Scm => "scm",
            Algorithm::Ncm => "ncm",
        }
    }

    pub fn config(&self, num_endmembers: usize) -> ScmConfig {
        match self {
            Algorithm::Scm => ScmConfig::scm_preset(num_endmembers),
            Algorithm::Ncm => ScmConfig::ncm_preset(num_endmembers),
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = ScmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "scm" => Ok(Algorithm::Scm),
            "ncm" => Ok(Algorithm::Ncm),
            other => Err(ScmError::InvalidArgument(format!(
                "unknown algorithm {other:?} (expected scm or ncm)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Scene geometry shared by all benchmark trials.
#[derive(Debug, Clone, Copy)]
pub struct SceneShape {
    pub height: usize,
    pub width: usize,
    pub blur_sigma: f64,
}

impl Default for SceneShape {
    fn default() -> Self {
        SceneShape {
            height: 40,
            width: 40,
            blur_sigma: 2.0,
        }
    }
}

/// One aggregated benchmark table row.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub snr_db: f64,
    pub algorithm: Algorithm,
    pub endmember_error_mean: f64,
    pub abundance_error_mean: f64,
    pub endmember_error_std: f64,
    pub abundance_error_std: f64,
}

/// Runs one seeded trial of one algorithm on a fresh synthetic scene and
/// returns `(endmember_error, abundance_error)`. Error metrics depend only on
/// the abundance/endmember phase, so the covariance phase is not run here.
pub fn run_trial(
    spectra: &DMatrix<f64>,
    shape: SceneShape,
    snr_db: f64,
    seed: u64,
    algorithm: Algorithm,
) -> Result<(f64, f64)> {
    let mut spec = SynthSpec::new(spectra.clone());
    spec.height = shape.height;
    spec.width = shape.width;
    spec.blur_sigma = shape.blur_sigma;
    spec.snr_db = Some(snr_db);
    spec.rng_seed = seed;
    let scene = generate_scene(&spec)?;
    trial_on_scene(&scene.cube, scene.abundances.matrix(), spectra, seed, algorithm)
}

fn trial_on_scene(
    cube: &HsiCube,
    true_a: &DMatrix<f64>,
    spectra: &DMatrix<f64>,
    seed: u64,
    algorithm: Algorithm,
) -> Result<(f64, f64)> {
    let mut config = algorithm.config(spectra.nrows());
    config.rng_seed = seed;
    let phase1 = solver::run_phase_ar(cube, &config)?;
    let scored = metrics::align_and_score(
        &phase1.endmembers,
        spectra,
        phase1.abundances.matrix(),
        true_a,
    )?;
    Ok((scored.endmember_error, scored.abundance_error))
}

/// Runs `trials` seeded scenes per SNR level, evaluating every algorithm on
/// the same scenes, and aggregates mean and sample standard deviation.
/// Rows are sorted by `(snr, algorithm)`.
pub fn run_benchmark(
    spectra: &DMatrix<f64>,
    shape: SceneShape,
    snrs: &[f64],
    trials: usize,
    algorithms: &[Algorithm],
    base_seed: u64,
) -> Result<Vec<BenchRow>> {
    if snrs.is_empty() || algorithms.is_empty() || trials == 0 {
        return Err(ScmError::InvalidArgument(
            "benchmark needs at least one SNR, one algorithm and one trial".into(),
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..snrs.len())
        .flat_map(|si| (0..trials).map(move |t| (si, t)))
        .collect();

    let outcomes: Vec<Result<Vec<(usize, usize, f64, f64)>>> =
        par::map_slice(&jobs, |&(si, t)| {
            let seed = base_seed.wrapping_add((si * trials + t) as u64);
            let mut spec = SynthSpec::new(spectra.clone());
            spec.height = shape.height;
            spec.width = shape.width;
            spec.blur_sigma = shape.blur_sigma;
            spec.snr_db = Some(snrs[si]);
            spec.rng_seed = seed;
            let scene = generate_scene(&spec)?;
            let mut per_alg = Vec::with_capacity(algorithms.len());
            for (ai, alg) in algorithms.iter().enumerate() {
                let (ee, ae) =
                    trial_on_scene(&scene.cube, scene.abundances.matrix(), spectra, seed, *alg)?;
                per_alg.push((si, ai, ee, ae));
            }
            Ok(per_alg)
        });

    let mut cells: Vec<Vec<(f64, f64)>> = vec![Vec::new(); snrs.len() * algorithms.len()];
    for job in outcomes {
        for (si, ai, ee, ae) in job? {
            cells[si * algorithms.len() + ai].push((ee, ae));
        }
    }

    let mut rows = Vec::with_capacity(cells.len());
    for si in 0..snrs.len() {
        for (ai, alg) in algorithms.iter().enumerate() {
            let data = &cells[si * algorithms.len() + ai];
            let (ee_mean, ee_std) = mean_std(data.iter().map(|d| d.0));
            let (ae_mean, ae_std) = mean_std(data.iter().map(|d| d.1));
            rows.push(BenchRow {
                snr_db: snrs[si],
                algorithm: *alg,
                endmember_error_mean: ee_mean,
                abundance_error_mean: ae_mean,
                endmember_error_std: ee_std,
                abundance_error_std: ae_std,
            });
        }
    }
    rows.sort_by(|a, b| {
        a.snr_db
            .partial_cmp(&b.snr_db)
            .unwrap()
            .then(a.algorithm.cmp(&b.algorithm))
    });
    Ok(rows)
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let v: Vec<f64> = values.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

/// One row of the pairwise-closeness sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub rho1_prime: f64,
    /// Uncertainty amount per endmember. When ground truth is supplied the
    /// entries are reordered so index `k` always refers to truth endmember `k`.
    pub amounts: Vec<f64>,
    pub endmember_error: Option<f64>,
}

/// Full solver runs across a list of `rho1'` values on a fixed cube. Rows are
/// returned in the input order of `rho1_values`.
pub fn run_rho1_sweep(
    cube: &HsiCube,
    truth: Option<&DMatrix<f64>>,
    rho1_values: &[f64],
    base_config: &ScmConfig,
) -> Result<Vec<SweepRow>> {
    let results: Vec<Result<SweepRow>> = par::map_slice(rho1_values, |&rho1| {
        let mut config = base_config.clone();
        config.rho1_prime = rho1;
        let result = solver::unmix(cube, &config)?;
        let summary = uncertainty::summarize_uncertainty(&result.endmembers)?;
        let (amounts, endmember_error) = match truth {
            Some(truth) => {
                let perm = metrics::best_permutation(result.endmembers.means(), truth)?;
                let err = metrics::endmember_error(result.endmembers.means(), truth, &perm)?;
                let mut aligned = vec![0.0; summary.amounts().len()];
                for (j, &t) in perm.iter().enumerate() {
                    aligned[t] = summary.amounts()[j];
                }
                (aligned, Some(err))
            }
            None => (summary.amounts().to_vec(), None),
        };
        Ok(SweepRow {
            rho1_prime: rho1,
            amounts,
            endmember_error,
        })
    });
    results.into_iter().collect()
}
