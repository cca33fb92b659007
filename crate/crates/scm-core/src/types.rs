//! Validated domain types shared by all modules.
//!
//! Everything here is immutable after construction and safe to share across
//! threads for reading. Constructors enforce the shape and feasibility
//! invariants; numerical code inside the solver works on raw matrices and
//! converts back to these types at the boundaries.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ScmError};

/// Tolerance for simplex feasibility checks (entries and row sums).
pub const TOL_SIMPLEX: f64 = 1e-12;

/// Symmetry tolerance for covariance/precision matrices.
pub const TOL_SYMMETRY: f64 = 1e-10;

/// A hyperspectral cube: `N = height * width` pixels by `B` bands.
///
/// Pixels are stored in raster order, `i = row * width + col`; row `i` of
/// `data` is the spectrum of pixel `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    height: usize,
    width: usize,
    bands: usize,
    data: DMatrix<f64>,
}

impl HsiCube {
    /// Builds a cube from `height * width * bands` reflectance values laid out
    /// raster row-major, band-fastest.
    pub fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> Result<Self> {
        if height < 1 || width < 1 || bands < 1 {
            return Err(ScmError::InvalidArgument(format!(
                "cube dimensions must be at least 1, got {height}x{width}x{bands}"
            )));
        }
        let expected = height * width * bands;
        if data.len() != expected {
            return Err(ScmError::dim(
                "cube data",
                format!("{expected} values"),
                format!("{} values", data.len()),
            ));
        }
        let data = DMatrix::from_row_slice(height * width, bands, &data);
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    /// Wraps an existing `N x B` matrix as a cube with the given grid shape.
    pub fn from_matrix(height: usize, width: usize, data: DMatrix<f64>) -> Result<Self> {
        if height < 1 || width < 1 || data.ncols() < 1 {
            return Err(ScmError::InvalidArgument(
                "cube dimensions must be at least 1".into(),
            ));
        }
        if data.nrows() != height * width {
            return Err(ScmError::dim(
                "cube matrix rows",
                format!("{}", height * width),
                format!("{}", data.nrows()),
            ));
        }
        let bands = data.ncols();
        Ok(HsiCube {
            height,
            width,
            bands,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn n_pixels(&self) -> usize {
        self.height * self.width
    }

    /// The `N x B` reflectance matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    /// Raster pixel index for a grid position.
    pub fn pixel_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Spectrum of pixel `i` as an owned column vector.
    pub fn spectrum(&self, i: usize) -> DVector<f64> {
        self.data.row(i).transpose()
    }

    /// Data in serialization order (raster row-major, band-fastest).
    pub fn raster_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_pixels() * self.bands);
        for i in 0..self.n_pixels() {
            for b in 0..self.bands {
                out.push(self.data[(i, b)]);
            }
        }
        out
    }
}

/// An `N x M` abundance matrix on the product of probability simplices.
#[derive(Debug, Clone, PartialEq)]
pub struct AbundanceMatrix {
    values: DMatrix<f64>,
}

impl AbundanceMatrix {
    /// Validates nonnegativity (within `TOL_SIMPLEX`) and unit row sums
    /// (within `TOL_SIMPLEX * M`).
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let m = values.ncols();
        for (i, row) in values.row_iter().enumerate() {
            let mut sum = 0.0;
            for &v in row.iter() {
                if !v.is_finite() {
                    return Err(ScmError::NonFiniteInput(format!(
                        "abundance row {i} contains a non-finite value"
                    )));
                }
                if v < -TOL_SIMPLEX {
                    return Err(ScmError::InvalidArgument(format!(
                        "abundance row {i} has negative entry {v}"
                    )));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > TOL_SIMPLEX * m as f64 {
                return Err(ScmError::InvalidArgument(format!(
                    "abundance row {i} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(AbundanceMatrix { values })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.values
    }

    pub fn n_pixels(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_endmembers(&self) -> usize {
        self.values.ncols()
    }
}

/// Estimated endmembers: means `R` (`M x B`), per-endmember covariances
/// `Sigma_j` (`B x B`), and the noise standard deviation `mu`.
#[derive(Debug, Clone)]
pub struct EndmemberSet {
    means: DMatrix<f64>,
    covariances: Vec<DMatrix<f64>>,
    noise_std: f64,
    negative_mean_entries: usize,
}

impl EndmemberSet {
    /// Validates symmetry and the positive semidefinite cap
    /// `eigenvalues(Sigma_j) in [0, sigma_max^2 + 1e-8]`. Negative entries in
    /// the means are counted, not rejected: the endmember update has no
    /// positivity projection.
    pub fn new(
        means: DMatrix<f64>,
        covariances: Vec<DMatrix<f64>>,
        noise_std: f64,
        sigma_max: f64,
    ) -> Result<Self> {
        let (m, b) = (means.nrows(), means.ncols());
        if covariances.len() != m {
            return Err(ScmError::dim(
                "covariance list",
                format!("{m} matrices"),
                format!("{}", covariances.len()),
            ));
        }
        if !(noise_std >= 0.0) {
            return Err(ScmError::InvalidArgument(format!(
                "noise_std must be >= 0, got {noise_std}"
            )));
        }
        let cap = sigma_max * sigma_max + 1e-8;
        for (j, sigma) in covariances.iter().enumerate() {
            check_symmetric(sigma, b, &format!("Sigma_{j}"))?;
            let eig = symmetric_eigenvalues(sigma)?;
            for &ev in eig.iter() {
                if ev < -1e-10 || ev > cap {
                    return Err(ScmError::InvalidArgument(format!(
                        "Sigma_{j} eigenvalue {ev} outside [0, {cap}]"
                    )));
                }
            }
        }
        let negative_mean_entries = means.iter().filter(|&&v| v < 0.0).count();
        Ok(EndmemberSet {
            means,
            covariances,
            noise_std,
            negative_mean_entries,
        })
    }

    pub fn means(&self) -> &DMatrix<f64> {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn n_endmembers(&self) -> usize {
        self.means.nrows()
    }

    pub fn bands(&self) -> usize {
        self.means.ncols()
    }

    /// Number of negative entries in the means (diagnostic; see `new`).
    pub fn negative_mean_entries(&self) -> usize {
        self.negative_mean_entries
    }
}

/// Precision-side parameterization used by the covariance phase:
/// `S_j = mu^2 Sigma_j^{-1}` and `gamma = mu^{-2}`.
#[derive(Debug, Clone)]
pub struct PrecisionSet {
    matrices: Vec<DMatrix<f64>>,
    gamma: f64,
}

impl PrecisionSet {
    /// Validates that each `S_j` is symmetric positive definite with smallest
    /// eigenvalue at least `1/(gamma sigma_max^2) - 1e-10`.
    pub fn new(matrices: Vec<DMatrix<f64>>, gamma: f64, sigma_max: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return Err(ScmError::InvalidArgument(format!(
                "gamma must be positive and finite, got {gamma}"
            )));
        }
        let floor = 1.0 / (gamma * sigma_max * sigma_max) - 1e-10;
        for (j, s) in matrices.iter().enumerate() {
            check_symmetric(s, s.nrows(), &format!("S_{j}"))?;
            let eig = symmetric_eigenvalues(s)?;
            let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
            if min <= 0.0 {
                return Err(ScmError::NotPositiveDefinite(format!("S_{j}")));
            }
            if min < floor {
                return Err(ScmError::InvalidArgument(format!(
                    "S_{j} smallest eigenvalue {min} below floor {floor}"
                )));
            }
        }
        Ok(PrecisionSet { matrices, gamma })
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn noise_std(&self) -> f64 {
        self.gamma.powf(-0.5)
    }

    /// Converts to covariances `Sigma_j = S_j^{-1} / gamma` with means `R`.
    pub fn to_endmember_set(&self, means: DMatrix<f64>, sigma_max: f64) -> Result<EndmemberSet> {
        let mut covs = Vec::with_capacity(self.matrices.len());
        for (j, s) in self.matrices.iter().enumerate() {
            let chol = nalgebra::Cholesky::new(s.clone())
                .ok_or_else(|| ScmError::NotPositiveDefinite(format!("S_{j}")))?;
            let mut sigma = chol.inverse() / self.gamma;
            symmetrize(&mut sigma);
            covs.push(sigma);
        }
        EndmemberSet::new(means, covs, self.noise_std(), sigma_max)
    }
}

/// Grid connectivity for the spatial prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Neighborhood {
    Four,
    Eight,
}

impl std::fmt::Display for Neighborhood {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Neighborhood::Four => write!(f, "4"),
            Neighborhood::Eight => write!(f, "8"),
        }
    }
}

/// Solver configuration. The primed hyperparameters are the scale-free values
/// of the model; the solver converts them to `gamma`-ratios internally.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmConfig {
    pub num_endmembers: usize,
    pub eta: f64,
    pub beta1_prime: f64,
    pub beta2_prime: f64,
    pub rho1_prime: f64,
    pub rho2_prime: f64,
    pub sigma0: f64,
    pub sigma_max: f64,
    pub neighborhood: Neighborhood,
    pub max_outer_iters: usize,
    pub max_inner_iters: usize,
    pub energy_rel_tol: f64,
    pub rng_seed: u64,
    /// Optional region labels (one per pixel) for the segmentation-driven
    /// spatial weights.
    pub segmentation: Option<Vec<u32>>,
    /// Clamp negative endmember entries to zero after each R-step.
    pub clamp_r: bool,
}

impl ScmConfig {
    /// Full SCM configuration with the fixed values used throughout the
    /// synthetic experiments: `eta = 0.05`, `beta1' = 0.01`, `beta2' = 0`,
    /// `rho1' = 0.005`, `rho2' = 0`, `sigma0 = 0.1`, `sigma_max = 1`.
    pub fn scm_preset(num_endmembers: usize) -> Self {
        ScmConfig {
            num_endmembers,
            eta: 0.05,
            beta1_prime: 0.01,
            beta2_prime: 0.0,
            rho1_prime: 0.005,
            rho2_prime: 0.0,
            sigma0: 0.1,
            sigma_max: 1.0,
            neighborhood: Neighborhood::Four,
            max_outer_iters: 500,
            max_inner_iters: 100,
            energy_rel_tol: 1e-6,
            rng_seed: 0,
            segmentation: None,
            clamp_r: false,
        }
    }

    /// The NCM baseline: identical pipeline with the spatial, sparsity and
    /// wavelength priors zeroed (`beta1' = beta2' = rho2' = 0`).
    pub fn ncm_preset(num_endmembers: usize) -> Self {
        ScmConfig {
            beta1_prime: 0.0,
            beta2_prime: 0.0,
            rho2_prime: 0.0,
            ..ScmConfig::scm_preset(num_endmembers)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_endmembers < 2 {
            return Err(ScmError::InvalidArgument(format!(
                "num_endmembers must be >= 2, got {}",
                self.num_endmembers
            )));
        }
        if !(self.eta > 0.0) {
            return Err(ScmError::InvalidArgument(format!(
                "eta must be > 0, got {}",
                self.eta
            )));
        }
        for (name, v) in [
            ("beta1_prime", self.beta1_prime),
            ("beta2_prime", self.beta2_prime),
            ("rho1_prime", self.rho1_prime),
            ("rho2_prime", self.rho2_prime),
        ] {
            if !(v >= 0.0) {
                return Err(ScmError::InvalidArgument(format!(
                    "{name} must be >= 0, got {v}"
                )));
            }
        }
        if !(self.sigma0 > 0.0) || !(self.sigma_max >= self.sigma0) {
            return Err(ScmError::InvalidArgument(format!(
                "need sigma_max >= sigma0 > 0, got sigma0={}, sigma_max={}",
                self.sigma0, self.sigma_max
            )));
        }
        if !(self.energy_rel_tol > 0.0) {
            return Err(ScmError::InvalidArgument(format!(
                "energy_rel_tol must be > 0, got {}",
                self.energy_rel_tol
            )));
        }
        Ok(())
    }
}

/// Ratio diagnostics and bookkeeping flags attached to a solver result.
#[derive(Debug, Clone, Default)]
pub struct Diagnostics {
    /// `gamma z' Q^{-1} z / (gamma ||Y - AR||_F^2)`; `None` for an exact fit.
    pub ratio_quad: Option<f64>,
    /// `(log|Q| - sum_j log|S_j|) / (gamma ||Y - AR||_F^2)`; `None` for an exact fit.
    pub ratio_logdet: Option<f64>,
    /// Negative entries in the estimated endmember means.
    pub negative_endmember_entries: usize,
    /// Whether the gamma update hit its positivity clamp at least once.
    pub gamma_clamped: bool,
    pub phase1_iterations: usize,
    pub phase2_iterations: usize,
    pub phase1_converged: bool,
    pub phase2_converged: bool,
}

/// Output of a full solver run.
#[derive(Debug, Clone)]
pub struct ScmResult {
    pub endmembers: EndmemberSet,
    pub abundances: AbundanceMatrix,
    /// Phase-1 energy values (one per outer iteration), nonincreasing.
    pub energy_trace: Vec<f64>,
    /// Phase-2 energy values (one per sweep), nonincreasing.
    pub covariance_energy_trace: Vec<f64>,
    pub diagnostics: Diagnostics,
    pub iterations_used: usize,
}

pub(crate) fn check_symmetric(m: &DMatrix<f64>, expected_dim: usize, name: &str) -> Result<()> {
    if m.nrows() != expected_dim || m.ncols() != expected_dim {
        return Err(ScmError::dim(
            name,
            format!("{expected_dim}x{expected_dim}"),
            format!("{}x{}", m.nrows(), m.ncols()),
        ));
    }
    for i in 0..m.nrows() {
        for k in (i + 1)..m.ncols() {
            if (m[(i, k)] - m[(k, i)]).abs() > TOL_SYMMETRY {
                return Err(ScmError::InvalidArgument(format!(
                    "{name} is not symmetric at ({i},{k})"
                )));
            }
        }
    }
    Ok(())
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for k in (i + 1)..n {
            let v = 0.5 * (m[(i, k)] + m[(k, i)]);
            m[(i, k)] = v;
            m[(k, i)] = v;
        }
    }
}

pub(crate) fn symmetric_eigenvalues(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    let mut sym = m.clone();
    symmetrize(&mut sym);
    nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
        .map(|e| e.eigenvalues)
        .ok_or_else(|| ScmError::EigenFailure("symmetric eigenvalue iteration stalled".into()))
}
