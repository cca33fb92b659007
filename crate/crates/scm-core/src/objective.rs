//! Reduced energies and analytic gradients.
//!
//! The likelihood of the cube couples all pixels through an `NB x NB`
//! covariance. Everything here works with the reduced `MB x MB` matrix
//! `Q = [delta_ij S_j] + A'A (x) I_B` and the vector `z = vec((Y - AR)'A)`
//! instead, which the Woodbury identity and Sylvester's determinant theorem
//! make exact. `Q^{-1}` is never formed; every use goes through one Cholesky
//! factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ScmError};
use crate::laplacian::Graphs;
use crate::solver::ScaledParams;
use crate::types::{symmetrize, PrecisionSet};

/// Term-by-term value of the full reduced energy.
///
/// `quad_correction` and `sum_logdet_s` are stored as the (positive)
/// magnitudes that enter the total with a minus sign; `gamma_term` carries its
/// own sign (`-NB log gamma`).
#[derive(Debug, Clone)]
pub struct EnergyBreakdown {
    pub least_squares: f64,
    pub quad_correction: f64,
    pub logdet_q: f64,
    pub sum_logdet_s: f64,
    pub gamma_term: f64,
    pub prior_a: f64,
    pub prior_r_pairwise: f64,
    pub prior_r_smooth: f64,
    pub total_e1: f64,
}

impl EnergyBreakdown {
    /// Recombines the parts; equals `total_e1` up to rounding.
    pub fn total_from_parts(&self) -> f64 {
        self.least_squares - self.quad_correction + self.logdet_q - self.sum_logdet_s
            + self.gamma_term
            + self.prior_a
            + self.prior_r_pairwise
            + self.prior_r_smooth
    }
}

/// Assembles `Q = [delta_ij S_j] + A'A (x) I_B` from the precision blocks and
/// the `M x M` Gram matrix `A'A`.
pub fn assemble_q(s_blocks: &[DMatrix<f64>], ata: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = s_blocks.len();
    if ata.nrows() != m || ata.ncols() != m {
        return Err(ScmError::dim(
            "A'A",
            format!("{m}x{m}"),
            format!("{}x{}", ata.nrows(), ata.ncols()),
        ));
    }
    let b = s_blocks.first().map_or(0, |s| s.nrows());
    for (j, s) in s_blocks.iter().enumerate() {
        if s.nrows() != b || s.ncols() != b {
            return Err(ScmError::dim(
                format!("S_{j}"),
                format!("{b}x{b}"),
                format!("{}x{}", s.nrows(), s.ncols()),
            ));
        }
    }
    let mb = m * b;
    let mut q = DMatrix::zeros(mb, mb);
    for i in 0..m {
        for j in 0..m {
            let g = ata[(i, j)];
            if i == j {
                let s = &s_blocks[i];
                for r in 0..b {
                    for c in 0..b {
                        q[(i * b + r, j * b + c)] = s[(r, c)];
                    }
                    q[(i * b + r, j * b + r)] += g;
                }
            } else if g != 0.0 {
                for r in 0..b {
                    q[(i * b + r, j * b + r)] = g;
                }
            }
        }
    }
    Ok(q)
}

/// `z = vec((Y - AR)'A)`: column `j` of `(Y - AR)'A` occupies entries
/// `[jB, (j+1)B)`.
pub fn assemble_z(y: &DMatrix<f64>, a: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DVector<f64>> {
    check_shapes(y, a, r)?;
    let resid = y - a * r;
    let rta = resid.transpose() * a; // B x M
    Ok(DVector::from_column_slice(rta.as_slice()))
}

fn check_shapes(y: &DMatrix<f64>, a: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    if a.nrows() != y.nrows() || r.ncols() != y.ncols() || a.ncols() != r.nrows() {
        return Err(ScmError::dim(
            "Y/A/R shapes",
            format!("Y {}x{}, A {}xM, R Mx{}", y.nrows(), y.ncols(), y.nrows(), y.ncols()),
            format!(
                "A {}x{}, R {}x{}",
                a.nrows(),
                a.ncols(),
                r.nrows(),
                r.ncols()
            ),
        ));
    }
    Ok(())
}

/// Cholesky factorization of `Q` with cached log-determinant and block
/// extraction helpers.
pub struct QFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    logdet: f64,
    m: usize,
    b: usize,
}

impl QFactor {
    pub fn new(q: DMatrix<f64>, m: usize, b: usize) -> Result<Self> {
        debug_assert_eq!(q.nrows(), m * b);
        let chol = nalgebra::Cholesky::new(q)
            .ok_or_else(|| ScmError::NotPositiveDefinite("Q".into()))?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(QFactor { chol, logdet, m, b })
    }

    pub fn from_blocks(s_blocks: &[DMatrix<f64>], ata: &DMatrix<f64>) -> Result<Self> {
        let m = s_blocks.len();
        let b = s_blocks.first().map_or(0, |s| s.nrows());
        QFactor::new(assemble_q(s_blocks, ata)?, m, b)
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    pub fn solve_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(v)
    }

    /// `z' Q^{-1} z`, computed as `||L^{-1} z||^2` so it is nonnegative by
    /// construction.
    pub fn quad(&self, z: &DVector<f64>) -> f64 {
        let w = self
            .chol
            .l_dirty()
            .solve_lower_triangular(z)
            .expect("Cholesky factor has positive diagonal");
        w.norm_squared()
    }

    /// The `j`th diagonal `B x B` block of `Q^{-1}`.
    pub fn inverse_block(&self, j: usize) -> DMatrix<f64> {
        let mb = self.m * self.b;
        let mut rhs = DMatrix::zeros(mb, self.b);
        for c in 0..self.b {
            rhs[(j * self.b + c, c)] = 1.0;
        }
        let sol = self.chol.solve(&rhs);
        let mut block = sol.rows(j * self.b, self.b).into_owned();
        symmetrize(&mut block);
        block
    }
}

/// The approximate energy minimized over `A` and `R` (least squares plus the
/// gamma-scaled priors). `Tr(A'KA)` is kept as its two separate traces so a
/// zero `beta1` needs no special casing.
pub fn energy_e2(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    graphs: &Graphs,
    scaled: &ScaledParams,
) -> f64 {
    let resid = y - a * r;
    let mut e = resid.norm_squared();
    if scaled.beta1_over_gamma > 0.0 {
        e += scaled.beta1_over_gamma * graphs.spatial.quad_form(a);
    }
    if scaled.beta2_over_gamma > 0.0 {
        e -= scaled.beta2_over_gamma * a.norm_squared();
    }
    if scaled.rho1_over_gamma > 0.0 {
        e += scaled.rho1_over_gamma * (&graphs.endmember * r).dot(r);
    }
    if scaled.rho2_over_gamma > 0.0 {
        e += scaled.rho2_over_gamma * graphs.wavelength.quad_form_rows(r);
    }
    e
}

/// `dE2/dA = 2(-YR' + ARR' + (beta1/gamma) LA - (beta2/gamma) A)`.
pub fn grad_a(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    graphs: &Graphs,
    scaled: &ScaledParams,
) -> DMatrix<f64> {
    let rt = r.transpose();
    let rrt = r * &rt;
    let mut g = a * rrt - y * rt;
    if scaled.beta1_over_gamma > 0.0 {
        g += graphs.spatial.apply(a) * scaled.beta1_over_gamma;
    }
    if scaled.beta2_over_gamma > 0.0 {
        g -= a * scaled.beta2_over_gamma;
    }
    g * 2.0
}

/// Full reduced energy with every term reported separately.
///
/// The unscaled prior weights are reconstructed from the gamma in
/// `precisions` (`beta1 = gamma * beta1/gamma`, etc.), so
/// `total_e1 = gamma * E2 - quad_correction + logdet_q - sum_logdet_s + gamma_term`.
pub fn energy_e1(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    precisions: &PrecisionSet,
    graphs: &Graphs,
    scaled: &ScaledParams,
) -> Result<EnergyBreakdown> {
    check_shapes(y, a, r)?;
    energy_e1_raw(y, a, r, precisions.matrices(), precisions.gamma(), graphs, scaled)
}

pub(crate) fn energy_e1_raw(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    s_blocks: &[DMatrix<f64>],
    gamma: f64,
    graphs: &Graphs,
    scaled: &ScaledParams,
) -> Result<EnergyBreakdown> {
    let nb = (y.nrows() * y.ncols()) as f64;
    let resid = y - a * r;
    let d2 = resid.norm_squared();
    let z = {
        let rta = resid.transpose() * a;
        DVector::from_column_slice(rta.as_slice())
    };
    let ata = a.tr_mul(a);
    let qf = QFactor::from_blocks(s_blocks, &ata)?;
    let quad = gamma * qf.quad(&z);
    let sum_logdet_s = sum_logdet(s_blocks)?;

    let mut prior_a = 0.0;
    if scaled.beta1_over_gamma > 0.0 {
        prior_a += gamma * scaled.beta1_over_gamma * graphs.spatial.quad_form(a);
    }
    if scaled.beta2_over_gamma > 0.0 {
        prior_a -= gamma * scaled.beta2_over_gamma * a.norm_squared();
    }
    let prior_r_pairwise = if scaled.rho1_over_gamma > 0.0 {
        gamma * scaled.rho1_over_gamma * (&graphs.endmember * r).dot(r)
    } else {
        0.0
    };
    let prior_r_smooth = if scaled.rho2_over_gamma > 0.0 {
        gamma * scaled.rho2_over_gamma * graphs.wavelength.quad_form_rows(r)
    } else {
        0.0
    };

    let mut out = EnergyBreakdown {
        least_squares: gamma * d2,
        quad_correction: quad,
        logdet_q: qf.logdet(),
        sum_logdet_s,
        gamma_term: -nb * gamma.ln(),
        prior_a,
        prior_r_pairwise,
        prior_r_smooth,
        total_e1: 0.0,
    };
    out.total_e1 = out.total_from_parts();
    Ok(out)
}

pub(crate) fn sum_logdet(s_blocks: &[DMatrix<f64>]) -> Result<f64> {
    let mut acc = 0.0;
    for (j, s) in s_blocks.iter().enumerate() {
        let chol = nalgebra::Cholesky::new(s.clone())
            .ok_or_else(|| ScmError::NotPositiveDefinite(format!("S_{j}")))?;
        acc += 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    }
    Ok(acc)
}

/// `dE1/dS_j = (gamma Q^{-1} z z' Q^{-1})_j - S_j^{-1} + (Q^{-1})_j`.
pub fn grad_sj(
    precisions: &PrecisionSet,
    a: &DMatrix<f64>,
    z: &DVector<f64>,
    j: usize,
) -> Result<DMatrix<f64>> {
    let ata = a.tr_mul(a);
    let qf = QFactor::from_blocks(precisions.matrices(), &ata)?;
    grad_sj_with_factor(&qf, precisions.matrices(), precisions.gamma(), z, j)
}

pub(crate) fn grad_sj_with_factor(
    qf: &QFactor,
    s_blocks: &[DMatrix<f64>],
    gamma: f64,
    z: &DVector<f64>,
    j: usize,
) -> Result<DMatrix<f64>> {
    let b = s_blocks[j].nrows();
    let w = qf.solve_vec(z);
    let wj = w.rows(j * b, b).into_owned();
    let s_inv = nalgebra::Cholesky::new(s_blocks[j].clone())
        .ok_or_else(|| ScmError::NotPositiveDefinite(format!("S_{j}")))?
        .inverse();
    let mut g = &wj * wj.transpose() * gamma;
    g -= s_inv;
    g += qf.inverse_block(j);
    symmetrize(&mut g);
    Ok(g)
}
