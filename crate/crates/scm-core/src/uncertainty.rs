//! Uncertainty summaries derived from the estimated covariances, and the
//! magnitude diagnostics that justify dropping the reduction terms during the
//! abundance/endmember phase.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ScmError};
use crate::objective::{self, QFactor};
use crate::types::EndmemberSet;

/// Per-endmember uncertainty in eigen form: the amount is the square root of
/// the largest eigenvalue of `Sigma_j`, the direction its unit eigenvector,
/// and the range the band envelope `r_j +/- 2 sigma_j u_j`.
#[derive(Debug, Clone)]
pub struct UncertaintySummary {
    amounts: Vec<f64>,
    directions: Vec<DVector<f64>>,
    band_lower: Vec<DVector<f64>>,
    band_upper: Vec<DVector<f64>>,
}

impl UncertaintySummary {
    pub fn amounts(&self) -> &[f64] {
        &self.amounts
    }

    pub fn directions(&self) -> &[DVector<f64>] {
        &self.directions
    }

    /// `r_j - 2 sigma_j u_j` per endmember.
    pub fn band_lower(&self) -> &[DVector<f64>] {
        &self.band_lower
    }

    /// `r_j + 2 sigma_j u_j` per endmember.
    pub fn band_upper(&self) -> &[DVector<f64>] {
        &self.band_upper
    }

    pub fn n_endmembers(&self) -> usize {
        self.amounts.len()
    }
}

/// Extracts the top eigenpair of every covariance. The eigenvector sign is
/// fixed so its largest-magnitude component is positive, which makes the
/// summary deterministic under eigenvector sign flips.
pub fn summarize_uncertainty(endmembers: &EndmemberSet) -> Result<UncertaintySummary> {
    let m = endmembers.n_endmembers();
    let mut amounts = Vec::with_capacity(m);
    let mut directions = Vec::with_capacity(m);
    let mut band_lower = Vec::with_capacity(m);
    let mut band_upper = Vec::with_capacity(m);
    for j in 0..m {
        let sigma = &endmembers.covariances()[j];
        let mut sym = sigma.clone();
        crate::types::symmetrize(&mut sym);
        let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)
            .ok_or_else(|| ScmError::EigenFailure(format!("Sigma_{j} eigenpair")))?;
        let (mut top, mut top_val) = (0usize, f64::NEG_INFINITY);
        for (k, &ev) in eig.eigenvalues.iter().enumerate() {
            if ev > top_val {
                top = k;
                top_val = ev;
            }
        }
        let mut u = eig.eigenvectors.column(top).into_owned();
        let mut arg = 0usize;
        for k in 1..u.nrows() {
            if u[k].abs() > u[arg].abs() {
                arg = k;
            }
        }
        if u[arg] < 0.0 {
            u.neg_mut();
        }
        let amount = top_val.max(0.0).sqrt();
        let r = endmembers.means().row(j).transpose();
        band_lower.push(&r - &u * (2.0 * amount));
        band_upper.push(&r + &u * (2.0 * amount));
        amounts.push(amount);
        directions.push(u);
    }
    Ok(UncertaintySummary {
        amounts,
        directions,
        band_lower,
        band_upper,
    })
}

/// Fraction of bands (per endmember) where the matched ground-truth spectrum
/// lies inside the uncertainty range. The band interval is taken between the
/// pointwise min and max of the two envelope curves.
pub fn coverage_fraction(
    summary: &UncertaintySummary,
    truth: &DMatrix<f64>,
    matching: &[usize],
) -> Result<Vec<f64>> {
    let m = summary.n_endmembers();
    if truth.nrows() != m || matching.len() != m {
        return Err(ScmError::dim(
            "coverage inputs",
            format!("{m} endmembers"),
            format!("truth {}, matching {}", truth.nrows(), matching.len()),
        ));
    }
    let b = truth.ncols();
    let mut out = Vec::with_capacity(m);
    for j in 0..m {
        let lower = &summary.band_lower()[j];
        let upper = &summary.band_upper()[j];
        if lower.nrows() != b {
            return Err(ScmError::dim(
                "coverage bands",
                format!("{b}"),
                format!("{}", lower.nrows()),
            ));
        }
        let t = matching[j];
        let mut covered = 0usize;
        for k in 0..b {
            let (lo, hi) = if lower[k] <= upper[k] {
                (lower[k], upper[k])
            } else {
                (upper[k], lower[k])
            };
            let v = truth[(t, k)];
            if v >= lo && v <= hi {
                covered += 1;
            }
        }
        out.push(covered as f64 / b as f64);
    }
    Ok(out)
}

/// The two magnitude ratios from the reduction analysis:
/// `ratio_quad = gamma z'Q^{-1}z / (gamma ||Y-AR||_F^2)` and
/// `ratio_logdet = (log|Q| - sum_j log|S_j|) / (gamma ||Y-AR||_F^2)`.
#[derive(Debug, Clone, Copy)]
pub struct AppendixDiagnostics {
    pub ratio_quad: f64,
    pub ratio_logdet: f64,
}

pub fn appendix_diagnostics(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    precisions: &crate::types::PrecisionSet,
) -> Result<AppendixDiagnostics> {
    let d2 = (y - a * r).norm_squared();
    if d2 == 0.0 {
        return Err(ScmError::InvalidArgument(
            "diagnostics undefined for exact fit".into(),
        ));
    }
    let z = objective::assemble_z(y, a, r)?;
    let qf = QFactor::from_blocks(precisions.matrices(), &a.tr_mul(a))?;
    let quad = qf.quad(&z);
    let logdet_gap = qf.logdet() - objective::sum_logdet(precisions.matrices())?;
    let gamma = precisions.gamma();
    Ok(AppendixDiagnostics {
        ratio_quad: quad / d2,
        ratio_logdet: logdet_gap / (gamma * d2),
    })
}
