//! The two-phase block-coordinate solver.
//!
//! Phase 1 alternates a projected-gradient abundance step with a closed-form
//! endmember step (a Sylvester equation) on the approximate energy. Phase 2
//! holds `A`, `R` fixed and alternates projected-gradient precision updates
//! with the closed-form noise update on the full reduced energy.
//!
//! A single run is sequential by nature (block-coordinate dependencies);
//! independent runs parallelize freely, see [`crate::bench`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ScmError};
use crate::kmeans::kmeans_init;
use crate::laplacian::Graphs;
use crate::objective::{self, QFactor};
use crate::projection::project_simplex_rows;
use crate::types::{
    AbundanceMatrix, Diagnostics, HsiCube, PrecisionSet, ScmConfig, ScmResult,
};

/// Ridge added to `RR'` in the abundance initialization.
const INIT_EPSILON: f64 = 1e-6;

/// Cap on step-size decade expansions in one adaptive line search.
const MAX_STEP_DECADES: usize = 100;

/// Cap on abundance gradient steps within one outer iteration. The abundance
/// subproblem is minimized (not just nudged) before each endmember update;
/// see [`run_phase_ar`].
const MAX_A_INNER_STEPS: usize = 2;

/// Value `gamma^{-1}` is clamped to when the noise bracket is nonpositive.
const GAMMA_INV_CLAMP: f64 = 1e-20;

/// Cap on `lambda_max(S_j) / lambda_min(S_j)` during the covariance phase.
/// Directions carrying no uncertainty would otherwise grow without bound,
/// and eigenvalue spreads beyond ~1e9 make the floor projection and the
/// final validation numerically meaningless (covariances below
/// `sigma_max^2 / SPREAD_CAP` read as zero uncertainty).
const SPREAD_CAP: f64 = 1e9;

/// Relative inflation of the working eigenvalue floor so that projection
/// round-off cannot drop the true spectrum below the nominal floor.
const FLOOR_MARGIN: f64 = 1e-3;

/// The gamma-ratios of the prior weights, per the magnitude-invariant scaling
/// `beta/gamma = beta' B/M`, `rho1/gamma = rho1' N/M^2`, `rho2/gamma = rho2' N/M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledParams {
    pub beta1_over_gamma: f64,
    pub beta2_over_gamma: f64,
    pub rho1_over_gamma: f64,
    pub rho2_over_gamma: f64,
}

impl ScaledParams {
    pub fn zero() -> Self {
        ScaledParams {
            beta1_over_gamma: 0.0,
            beta2_over_gamma: 0.0,
            rho1_over_gamma: 0.0,
            rho2_over_gamma: 0.0,
        }
    }
}

/// Converts the primed hyperparameters into gamma-ratios for a problem of
/// size `N x B` with `M` endmembers.
pub fn scale_params(config: &ScmConfig, n: usize, m: usize, b: usize) -> ScaledParams {
    let (n, m, b) = (n as f64, m as f64, b as f64);
    ScaledParams {
        beta1_over_gamma: config.beta1_prime * b / m,
        beta2_over_gamma: config.beta2_prime * b / m,
        rho1_over_gamma: config.rho1_prime * n / (m * m),
        rho2_over_gamma: config.rho2_prime * n / m,
    }
}

/// `A0 = phi(Y R' (R R' + eps I)^{-1})`: ridge least squares rows projected
/// onto the simplex.
pub fn init_abundances(
    y: &DMatrix<f64>,
    r: &DMatrix<f64>,
    epsilon: f64,
) -> Result<AbundanceMatrix> {
    let m = r.nrows();
    let gram = r * r.transpose() + DMatrix::identity(m, m) * epsilon;
    let chol = nalgebra::Cholesky::new(gram)
        .ok_or_else(|| ScmError::NotPositiveDefinite("RR' + eps I".into()))?;
    let yrt = y * r.transpose(); // N x M
    // X = YR' G^{-1}  <=>  G X' = (YR')'
    let xt = chol.solve(&yrt.transpose());
    project_simplex_rows(&xt.transpose())
}

/// One adaptive projected-gradient step on `A`.
///
/// Returns the new abundances, their energy, and the step size used (0 when
/// no trial step improved the energy). The caller passes the current energy
/// so accepted candidates compare against exactly the traced value.
pub fn step_a(
    y: &DMatrix<f64>,
    a: &AbundanceMatrix,
    r: &DMatrix<f64>,
    graphs: &Graphs,
    scaled: &ScaledParams,
    current_e2: f64,
) -> Result<(AbundanceMatrix, f64, f64)> {
    let grad = objective::grad_a(y, a.matrix(), r, graphs, scaled);
    let grad_norm = grad.norm();
    if grad_norm == 0.0 {
        return Ok((a.clone(), current_e2, 0.0));
    }
    let tau_eps = 1e-4 / f64::max(1.0, grad_norm / a.matrix().norm());

    let candidate = |tau: f64| -> Result<(AbundanceMatrix, f64)> {
        let trial = a.matrix() - &grad * (tau / 2.0);
        let projected = project_simplex_rows(&trial)?;
        let e = objective::energy_e2(y, projected.matrix(), r, graphs, scaled);
        Ok((projected, e))
    };

    let (first, first_e) = candidate(tau_eps)?;
    if !(first_e < current_e2) {
        return Ok((a.clone(), current_e2, 0.0));
    }
    let mut best = (first, first_e, tau_eps);
    let mut tau = tau_eps;
    for _ in 0..MAX_STEP_DECADES {
        tau *= 10.0;
        let (cand, e) = candidate(tau)?;
        if e >= best.1 {
            break;
        }
        best = (cand, e, tau);
    }
    Ok((best.0, best.1, best.2))
}

/// Cached quadratic form of the abundance subproblem for a fixed `R`:
/// `||Y - AR||_F^2 = ||Y||^2 - 2<A, YR'> + <A RR', A>`, so inner iterations
/// cost `N M^2` instead of `N M B`. Values match [`objective::energy_e2`] up
/// to rounding.
struct AbundanceQuad<'a> {
    yrt: DMatrix<f64>,
    rrt: DMatrix<f64>,
    y_norm2: f64,
    /// The `R`-only prior terms, constant while `A` moves.
    r_prior: f64,
    graphs: &'a Graphs,
    scaled: &'a ScaledParams,
}

impl<'a> AbundanceQuad<'a> {
    fn new(
        y: &DMatrix<f64>,
        r: &DMatrix<f64>,
        graphs: &'a Graphs,
        scaled: &'a ScaledParams,
    ) -> Self {
        let mut r_prior = 0.0;
        if scaled.rho1_over_gamma > 0.0 {
            r_prior += scaled.rho1_over_gamma * (&graphs.endmember * r).dot(r);
        }
        if scaled.rho2_over_gamma > 0.0 {
            r_prior += scaled.rho2_over_gamma * graphs.wavelength.quad_form_rows(r);
        }
        AbundanceQuad {
            yrt: y * r.transpose(),
            rrt: r * r.transpose(),
            y_norm2: y.norm_squared(),
            r_prior,
            graphs,
            scaled,
        }
    }

    fn energy(&self, a: &DMatrix<f64>) -> f64 {
        let arr = a * &self.rrt;
        let mut e = self.y_norm2 - 2.0 * a.dot(&self.yrt) + arr.dot(a) + self.r_prior;
        if self.scaled.beta1_over_gamma > 0.0 {
            e += self.scaled.beta1_over_gamma * self.graphs.spatial.quad_form(a);
        }
        if self.scaled.beta2_over_gamma > 0.0 {
            e -= self.scaled.beta2_over_gamma * a.norm_squared();
        }
        e
    }

    fn grad(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = a * &self.rrt - &self.yrt;
        if self.scaled.beta1_over_gamma > 0.0 {
            g += self.graphs.spatial.apply(a) * self.scaled.beta1_over_gamma;
        }
        if self.scaled.beta2_over_gamma > 0.0 {
            g -= a * self.scaled.beta2_over_gamma;
        }
        g * 2.0
    }
}

/// Minimizes the abundance subproblem for fixed `R` by repeated adaptive
/// projected-gradient steps. Every accepted candidate strictly lowers the
/// cached energy; the loop stops when a sweep stalls or the relative
/// improvement falls below `rel_tol`.
fn minimize_a(
    quad: &AbundanceQuad<'_>,
    mut a: AbundanceMatrix,
    rel_tol: f64,
    warm: &mut Option<f64>,
) -> Result<AbundanceMatrix> {
    let mut e = quad.energy(a.matrix());
    let mut warm_tau: Option<f64> = *warm;
    for _ in 0..MAX_A_INNER_STEPS {
        let grad = quad.grad(a.matrix());
        let grad_norm = grad.norm();
        if grad_norm == 0.0 {
            break;
        }
        let tau_base = 1e-4 / f64::max(1.0, grad_norm / a.matrix().norm());
        let candidate = |tau: f64| -> Result<(AbundanceMatrix, f64)> {
            let trial = a.matrix() - &grad * (tau / 2.0);
            let projected = project_simplex_rows(&trial)?;
            let e = quad.energy(projected.matrix());
            Ok((projected, e))
        };
        // try the warm-started step first, fall back to the small base step
        let mut start = None;
        if let Some(tau) = warm_tau {
            let (cand, ce) = candidate(tau)?;
            if ce < e {
                start = Some((cand, ce, tau));
            }
        }
        if start.is_none() {
            let (cand, ce) = candidate(tau_base)?;
            if ce < e {
                start = Some((cand, ce, tau_base));
            }
        }
        let Some(mut best) = start else { break };
        let mut tau = best.2;
        for _ in 0..MAX_STEP_DECADES {
            tau *= 10.0;
            let (cand, ce) = candidate(tau)?;
            if ce >= best.1 {
                break;
            }
            best = (cand, ce, tau);
        }
        let improvement = e - best.1;
        a = best.0;
        e = best.1;
        warm_tau = Some(best.2 / 10.0);
        if improvement < rel_tol * f64::max(e.abs(), 1e-30) {
            break;
        }
    }
    *warm = warm_tau;
    Ok(a)
}

/// Closed-form endmember update: solves the Sylvester equation
/// `(A'A + (rho1/gamma) H) R + (rho2/gamma) R G = A'Y`.
///
/// With `rho2 = 0` this is a dense `M x M` solve. Otherwise the symmetric
/// left matrix is eigendecomposed and each transformed column is a shifted
/// tridiagonal solve against `G`.
pub fn step_r(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    graphs: &Graphs,
    scaled: &ScaledParams,
) -> Result<DMatrix<f64>> {
    let m = a.ncols();
    let b = y.ncols();
    let mut p = a.tr_mul(a);
    if scaled.rho1_over_gamma > 0.0 {
        p += &graphs.endmember * scaled.rho1_over_gamma;
    }
    let c = a.tr_mul(y); // M x B

    if scaled.rho2_over_gamma == 0.0 {
        let chol = nalgebra::Cholesky::new(p).ok_or_else(|| {
            ScmError::SingularSystem("R-step singular; increase rho1' or check A rank".into())
        })?;
        return Ok(chol.solve(&c));
    }

    let eig = nalgebra::SymmetricEigen::try_new(p, f64::EPSILON, 0)
        .ok_or_else(|| ScmError::EigenFailure("R-step eigendecomposition".into()))?;
    let u = &eig.eigenvectors;
    // transformed right-hand side D = Y'(A U), one column per eigenvalue
    let d = y.tr_mul(&(a * u)); // B x M
    let mut w = DMatrix::zeros(b, m);
    let mut rhs = vec![0.0; b];
    for i in 0..m {
        let lambda = eig.eigenvalues[i];
        if lambda <= 0.0 {
            return Err(ScmError::SingularSystem(
                "R-step singular; increase rho1' or check A rank".into(),
            ));
        }
        for k in 0..b {
            rhs[k] = d[(k, i)];
        }
        let col = graphs
            .wavelength
            .solve_scaled_shifted(scaled.rho2_over_gamma, lambda, &rhs)?;
        for k in 0..b {
            w[(k, i)] = col[k];
        }
    }
    // R' = W U'
    Ok((w * u.transpose()).transpose())
}

/// Output of the abundance/endmember phase.
#[derive(Debug, Clone)]
pub struct PhaseArOutput {
    pub abundances: AbundanceMatrix,
    pub endmembers: DMatrix<f64>,
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Runs phase 1: k-means endmember seeding, ridge abundance initialization,
/// then alternating `A`/`R` steps until the relative energy change drops
/// below `energy_rel_tol`.
pub fn run_phase_ar(cube: &HsiCube, config: &ScmConfig) -> Result<PhaseArOutput> {
    config.validate().map_err(|e| e.in_phase("init"))?;
    let graphs = Graphs::build(cube, config).map_err(|e| e.in_phase("init"))?;
    run_phase_ar_with_graphs(cube, config, &graphs)
}

pub(crate) fn run_phase_ar_with_graphs(
    cube: &HsiCube,
    config: &ScmConfig,
    graphs: &Graphs,
) -> Result<PhaseArOutput> {
    let y = cube.matrix();
    let m = config.num_endmembers;
    let scaled = scale_params(config, cube.n_pixels(), m, cube.bands());

    let mut r = kmeans_init(cube, m, config.rng_seed).map_err(|e| e.in_phase("init"))?;
    let mut a =
        init_abundances(y, &r, INIT_EPSILON).map_err(|e| e.in_phase("init"))?;

    let mut e2 = objective::energy_e2(y, a.matrix(), &r, graphs, &scaled);
    let mut trace = vec![e2];
    let mut converged = false;
    let mut iterations = 0;
    let mut warm_tau: Option<f64> = None;

    for _ in 0..config.max_outer_iters {
        iterations += 1;
        // take a few damped abundance steps for the current R, then the
        // closed-form endmember update
        let quad = AbundanceQuad::new(y, &r, graphs, &scaled);
        a = minimize_a(&quad, a, config.energy_rel_tol, &mut warm_tau)
            .map_err(|e| e.in_phase("phase1-ar"))?;
        let mut r_new = step_r(y, a.matrix(), graphs, &scaled)
            .map_err(|e| e.in_phase("phase1-ar"))?;
        if config.clamp_r {
            // optional positivity clamp; may break strict energy descent
            r_new.apply(|v| *v = v.max(0.0));
        }
        r = r_new;
        let e2_new = objective::energy_e2(y, a.matrix(), &r, graphs, &scaled);
        trace.push(e2_new);
        let rel = (e2 - e2_new).abs() / f64::max(e2, 1e-30);
        e2 = e2_new;
        if rel < config.energy_rel_tol {
            converged = true;
            break;
        }
    }

    Ok(PhaseArOutput {
        abundances: a,
        endmembers: r,
        energy_trace: trace,
        iterations,
        converged,
    })
}

/// Result of one noise-level update.
#[derive(Debug, Clone, Copy)]
pub struct GammaUpdate {
    pub gamma: f64,
    /// True when the bracket `||Y-AR||_F^2 - z'Q^{-1}z` was nonpositive and
    /// `gamma^{-1}` was clamped.
    pub clamped: bool,
}

/// `gamma^{-1} = (||Y - AR||_F^2 - z'Q^{-1}z) / NB`, clamped to stay positive.
pub fn update_gamma(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    precisions: &PrecisionSet,
) -> Result<GammaUpdate> {
    let d2 = (y - a * r).norm_squared();
    let z = objective::assemble_z(y, a, r)?;
    let qf = QFactor::from_blocks(precisions.matrices(), &a.tr_mul(a))?;
    Ok(gamma_from_bracket(
        d2 - qf.quad(&z),
        (y.nrows() * y.ncols()) as f64,
    ))
}

fn gamma_from_bracket(bracket: f64, nb: f64) -> GammaUpdate {
    if bracket <= 0.0 {
        GammaUpdate {
            gamma: 1.0 / GAMMA_INV_CLAMP,
            clamped: true,
        }
    } else {
        GammaUpdate {
            gamma: nb / bracket,
            clamped: false,
        }
    }
}

/// Output of the covariance phase.
#[derive(Debug, Clone)]
pub struct CovarianceOutput {
    pub precisions: PrecisionSet,
    pub energy_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub gamma_clamped: bool,
}

/// Runs phase 2 with `A`, `R` fixed: initializes `gamma^{-1}` from the mean
/// squared residual and `S_j = 1/(gamma sigma0^2) I`, then sweeps
/// projected-gradient updates over the `S_j` followed by the closed-form
/// gamma update, until the energy stalls.
///
/// The returned trace is the part of the reduced energy this phase can
/// change (the priors are constant here); it is maintained by accumulating
/// the exactly evaluated deltas of the accepted steps, so it is nonincreasing
/// by construction.
pub fn run_phase_covariance(
    y: &DMatrix<f64>,
    a: &DMatrix<f64>,
    r: &DMatrix<f64>,
    config: &ScmConfig,
) -> Result<CovarianceOutput> {
    let phase = "phase2-covariance";
    let m = a.ncols();
    let b = y.ncols();
    let nb = (y.nrows() * y.ncols()) as f64;
    let sigma_max2 = config.sigma_max * config.sigma_max;

    let d2 = (y - a * r).norm_squared();
    let z = objective::assemble_z(y, a, r).map_err(|e| e.in_phase(phase))?;
    let ata = a.tr_mul(a);

    let init = gamma_from_bracket(d2, nb);
    let mut gamma = init.gamma;
    let mut gamma_clamped = init.clamped;
    let mut s: Vec<DMatrix<f64>> = (0..m)
        .map(|_| DMatrix::identity(b, b) / (gamma * config.sigma0 * config.sigma0))
        .collect();

    // starting value of the phase energy (likelihood part of the reduced
    // objective; the priors do not move in this phase)
    let qf = QFactor::from_blocks(&s, &ata).map_err(|e| e.in_phase(phase))?;
    let mut e1 = gamma * d2 - gamma * qf.quad(&z) + qf.logdet()
        - objective::sum_logdet(&s).map_err(|e| e.in_phase(phase))?
        - nb * gamma.ln();
    let mut trace = vec![e1];
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..config.max_inner_iters {
        iterations += 1;
        let floor = (1.0 + FLOOR_MARGIN) / (gamma * sigma_max2);

        for j in 0..m {
            let qf = QFactor::from_blocks(&s, &ata).map_err(|e| e.in_phase(phase))?;
            let grad = objective::grad_sj_with_factor(&qf, &s, gamma, &z, j)
                .map_err(|e| e.in_phase(phase))?;
            let grad_norm = grad.norm();
            if grad_norm == 0.0 {
                continue;
            }
            let w = qf.solve_vec(&z);
            let wj = w.rows(j * b, b).into_owned();
            let xj = qf.inverse_block(j);
            let evaluator = match BlockDelta::new(&s[j], &xj, &wj, gamma) {
                Some(ev) => ev,
                None => continue, // block too ill-conditioned to update safely
            };

            let tau_eps = 1e-4 / f64::max(1.0, grad_norm / s[j].norm());
            let candidate = |tau: f64| -> Option<(DMatrix<f64>, f64)> {
                let trial = &s[j] - &grad * tau;
                let (projected, logdet) = psi_capped(&trial, floor)?;
                let delta = evaluator.delta_e1(&projected, logdet)?;
                Some((projected, delta))
            };

            let first = candidate(tau_eps);
            let Some((cand, delta)) = first else { continue };
            if !(delta < 0.0) {
                continue;
            }
            let mut best = (cand, delta);
            let mut tau = tau_eps;
            for _ in 0..MAX_STEP_DECADES {
                tau *= 10.0;
                match candidate(tau) {
                    Some((cand, delta)) if delta < best.1 => best = (cand, delta),
                    _ => break,
                }
            }
            s[j] = best.0;
            e1 += best.1;
        }

        // gamma update from the current precision set
        let qf = QFactor::from_blocks(&s, &ata).map_err(|e| e.in_phase(phase))?;
        let bracket = d2 - qf.quad(&z);
        let update = gamma_from_bracket(bracket, nb);
        gamma_clamped |= update.clamped;
        let gamma_new = update.gamma;
        if gamma_new != gamma {
            e1 += (gamma_new - gamma) * bracket - nb * (gamma_new / gamma).ln();
            gamma = gamma_new;
        }

        trace.push(e1);
        let prev = trace[trace.len() - 2];
        // the -NB log(gamma) constant dwarfs the moving terms, so the change
        // is measured against the natural scale of the likelihood part
        let scale = f64::max(nb, prev.abs() * 1e-6);
        if (prev - e1).abs() / scale < config.energy_rel_tol {
            converged = true;
            break;
        }
    }

    // the floor moves with gamma; re-project once so the output satisfies the
    // constraint at the final gamma
    let final_floor = (1.0 + FLOOR_MARGIN) / (gamma * sigma_max2);
    for sj in s.iter_mut() {
        if let Some((projected, _)) = psi_capped(sj, final_floor) {
            *sj = projected;
        }
        ensure_min_eigenvalue(sj, 1.0 / (gamma * sigma_max2));
    }

    let precisions = PrecisionSet::new(s, gamma, config.sigma_max).map_err(|e| e.in_phase(phase))?;
    Ok(CovarianceOutput {
        precisions,
        energy_trace: trace,
        iterations,
        converged,
        gamma_clamped,
    })
}

/// Eigenvalue-floor projection with the spread cap, returning the
/// log-determinant of the result (the eigenvalues are already in hand).
fn psi_capped(x: &DMatrix<f64>, floor: f64) -> Option<(DMatrix<f64>, f64)> {
    if x.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let mut sym = x.clone();
    crate::types::symmetrize(&mut sym);
    let eig = nalgebra::SymmetricEigen::try_new(sym, f64::EPSILON, 0)?;
    let ceil = floor * SPREAD_CAP;
    let clamped = eig.eigenvalues.map(|l| l.clamp(floor, ceil));
    let logdet = clamped.iter().map(|l| l.ln()).sum();
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&clamped);
    let mut out = scaled * eig.eigenvectors.transpose();
    crate::types::symmetrize(&mut out);
    Some((out, logdet))
}

/// Shifts the whole spectrum up by a multiple of the identity if rounding
/// left the smallest eigenvalue below `floor`. The shift is exact, so no
/// further eigen round-off can undo it.
fn ensure_min_eigenvalue(s: &mut DMatrix<f64>, floor: f64) {
    if let Ok(eigs) = crate::types::symmetric_eigenvalues(s) {
        let min = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = eigs.iter().cloned().fold(0.0f64, f64::max);
        let margin = 1e-11 * (1.0 + max);
        if min < floor + margin {
            let bump = floor + margin - min;
            for i in 0..s.nrows() {
                s[(i, i)] += bump;
            }
        }
    }
}

/// Exact energy change under replacing one diagonal block of `Q`.
///
/// With `Q' = Q + E_j (T - S_j) E_j'` and `X_j = (Q^{-1})_jj`:
/// `log|Q'| - log|Q| = log|I + L_x' (T - S_j) L_x|` (`X_j = L_x L_x'`), and
/// `z'Q'^{-1}z - z'Q^{-1}z = -w_j' (I + (T - S_j) X_j)^{-1} (T - S_j) w_j`.
struct BlockDelta {
    s_logdet: f64,
    xj: DMatrix<f64>,
    lx: DMatrix<f64>,
    wj: DVector<f64>,
    gamma: f64,
    s_ref: DMatrix<f64>,
}

impl BlockDelta {
    fn new(s_j: &DMatrix<f64>, xj: &DMatrix<f64>, wj: &DVector<f64>, gamma: f64) -> Option<Self> {
        let s_chol = nalgebra::Cholesky::new(s_j.clone())?;
        let s_logdet = 2.0 * s_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let lx = nalgebra::Cholesky::new(xj.clone())?.unpack();
        Some(BlockDelta {
            s_logdet,
            xj: xj.clone(),
            lx,
            wj: wj.clone(),
            gamma,
            s_ref: s_j.clone(),
        })
    }

    /// Energy delta for candidate block `t` whose log-determinant is known.
    /// `None` means the candidate would make `Q` lose positive definiteness.
    fn delta_e1(&self, t: &DMatrix<f64>, t_logdet: f64) -> Option<f64> {
        let b = t.nrows();
        let diff = t - &self.s_ref;
        // log|Q'| - log|Q| via the symmetric similarity |I + Lx' D Lx|
        let inner = DMatrix::identity(b, b) + self.lx.tr_mul(&(&diff * &self.lx));
        let chol = nalgebra::Cholesky::new(inner)?;
        let dlogdet_q = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        // quadratic-term delta via the rank-B update inverse
        let m_mat = DMatrix::identity(b, b) + &diff * &self.xj;
        let rhs = &diff * &self.wj;
        let sol = m_mat.lu().solve(&rhs)?;
        let quad_delta = self.gamma * self.wj.dot(&sol);
        let out = quad_delta + dlogdet_q - (t_logdet - self.s_logdet);
        out.is_finite().then_some(out)
    }
}

/// Full pipeline: parameter scaling, k-means initialization, the `A`/`R`
/// phase, the covariance phase, and conversion back to covariance form.
pub fn unmix(cube: &HsiCube, config: &ScmConfig) -> Result<ScmResult> {
    config.validate().map_err(|e| e.in_phase("init"))?;
    let graphs = Graphs::build(cube, config).map_err(|e| e.in_phase("init"))?;
    let phase1 = run_phase_ar_with_graphs(cube, config, &graphs)?;
    let y = cube.matrix();
    let a = phase1.abundances.matrix();
    let r = &phase1.endmembers;

    let phase2 = run_phase_covariance(y, a, r, config)?;

    let endmembers = phase2
        .precisions
        .to_endmember_set(r.clone(), config.sigma_max)
        .map_err(|e| e.in_phase("phase2-covariance"))?;

    let (ratio_quad, ratio_logdet) =
        match crate::uncertainty::appendix_diagnostics(y, a, r, &phase2.precisions) {
            Ok(d) => (Some(d.ratio_quad), Some(d.ratio_logdet)),
            Err(_) => (None, None), // exact fit: ratios undefined
        };

    let diagnostics = Diagnostics {
        ratio_quad,
        ratio_logdet,
        negative_endmember_entries: endmembers.negative_mean_entries(),
        gamma_clamped: phase2.gamma_clamped,
        phase1_iterations: phase1.iterations,
        phase2_iterations: phase2.iterations,
        phase1_converged: phase1.converged,
        phase2_converged: phase2.converged,
    };
    Ok(ScmResult {
        endmembers,
        abundances: phase1.abundances,
        energy_trace: phase1.energy_trace,
        covariance_energy_trace: phase2.energy_trace,
        diagnostics,
        iterations_used: phase1.iterations + phase2.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::laplacian;
    use crate::types::Neighborhood;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn graphs_for(cube: &HsiCube, m: usize) -> Graphs {
        Graphs {
            spatial: laplacian::build_spatial_laplacian(cube, 0.05, Neighborhood::Four, None)
                .unwrap(),
            endmember: laplacian::build_endmember_laplacian(m).unwrap(),
            wavelength: laplacian::build_wavelength_laplacian(cube.bands()).unwrap(),
        }
    }

    fn rand_cube(rng: &mut ChaCha8Rng, h: usize, w: usize, b: usize) -> HsiCube {
        let data: Vec<f64> = (0..h * w * b).map(|_| rng.random_range(0.0..1.0)).collect();
        HsiCube::new(h, w, b, data).unwrap()
    }

    #[test]
    fn scaling_matches_reported_values() {
        let mut config = ScmConfig::scm_preset(4);
        config.rho1_prime = 0.005;
        let s = scale_params(&config, 1600, 4, 200);
        // beta1' = 0.01, B/M = 50 -> 0.5
        assert_abs_diff_eq!(s.beta1_over_gamma, 0.5, epsilon = 1e-15);
        // rho1' = 0.005, N/M^2 = 100 -> 0.5
        assert_abs_diff_eq!(s.rho1_over_gamma, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.beta2_over_gamma, 0.0);
        assert_abs_diff_eq!(s.rho2_over_gamma, 0.0);

        let mut zero = config.clone();
        zero.beta1_prime = 0.0;
        zero.rho1_prime = 0.0;
        let s0 = scale_params(&zero, 1600, 4, 200);
        assert_eq!(s0, ScaledParams::zero());

        // doubling B doubles beta1/gamma exactly
        let s2 = scale_params(&config, 1600, 4, 400);
        assert_abs_diff_eq!(s2.beta1_over_gamma, 2.0 * s.beta1_over_gamma);
    }

    #[test]
    fn init_abundances_recovers_one_hot_rows() {
        // pixels equal the endmembers themselves
        let r = DMatrix::from_row_slice(2, 3, &[0.9, 0.1, 0.2, 0.1, 0.8, 0.7]);
        let y = r.clone();
        let a = init_abundances(&y, &r, 1e-6).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(a.matrix()[(i, j)], want, epsilon = 1e-3);
            }
        }
    }

    #[test]
    fn init_abundances_single_endmember_is_all_ones() {
        let r = DMatrix::from_row_slice(1, 3, &[0.3, 0.5, 0.7]);
        let y = DMatrix::from_row_slice(2, 3, &[0.2, 0.4, 0.6, 0.35, 0.55, 0.75]);
        let a = init_abundances(&y, &r, 1e-6).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(a.matrix()[(i, 0)], 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn init_abundances_matches_row_wise_simplex_regression_oracle() {
        // brute-force oracle: per row, grid-search the 1-simplex for the
        // ridge least-squares minimizer, then compare
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let r = DMatrix::from_fn(2, 4, |_, _| rng.random_range(0.0..1.0));
        let y = DMatrix::from_fn(6, 4, |_, _| rng.random_range(0.0..1.0));
        let eps = 1e-6;
        let a = init_abundances(&y, &r, eps).unwrap();
        for i in 0..6 {
            // unprojected ridge solution for this row
            let gram = &r * r.transpose() + DMatrix::identity(2, 2) * eps;
            let rhs = &r * y.row(i).transpose();
            let x = gram.lu().solve(&rhs).unwrap();
            let proj = crate::projection::project_simplex_row(x.as_slice()).unwrap();
            for j in 0..2 {
                assert_abs_diff_eq!(a.matrix()[(i, j)], proj[j], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn step_a_returns_zero_step_at_stationarity() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let cube = rand_cube(&mut rng, 2, 2, 3);
        let graphs = graphs_for(&cube, 2);
        let a = AbundanceMatrix::new(DMatrix::from_row_slice(
            4,
            2,
            &[1.0, 0.0, 0.0, 1.0, 0.5, 0.5, 0.3, 0.7],
        ))
        .unwrap();
        let r = DMatrix::from_fn(2, 3, |_, _| rng.random_range(0.0..1.0));
        let y = a.matrix() * &r; // exact fit, zero priors -> gradient 0
        let scaled = ScaledParams::zero();
        let e2 = objective::energy_e2(&y, a.matrix(), &r, &graphs, &scaled);
        let (a_new, e_new, tau) = step_a(&y, &a, &r, &graphs, &scaled, e2).unwrap();
        assert_eq!(tau, 0.0);
        assert_eq!(e_new, e2);
        assert_eq!(a_new.matrix(), a.matrix());
    }

    #[test]
    fn step_a_accepted_steps_strictly_decrease_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        let cube = rand_cube(&mut rng, 3, 3, 4);
        let graphs = graphs_for(&cube, 3);
        let y = cube.matrix().clone();
        let r = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
        let a0 = init_abundances(&y, &r, 1e-6).unwrap();
        let scaled = ScaledParams {
            beta1_over_gamma: 0.1,
            ..ScaledParams::zero()
        };
        let e2 = objective::energy_e2(&y, a0.matrix(), &r, &graphs, &scaled);
        let (_, e_new, tau) = step_a(&y, &a0, &r, &graphs, &scaled, e2).unwrap();
        if tau > 0.0 {
            assert!(e_new < e2);
        } else {
            assert_eq!(e_new, e2);
        }
    }

    #[test]
    fn step_a_matches_dense_tau_grid_oracle() {
        // 1-pixel, 2-endmember toy whose optimum sits where the projection
        // path saturates, so the decade ladder and a dense grid agree exactly
        let y = DMatrix::from_row_slice(1, 2, &[1.3, -0.3]);
        let r = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let a = AbundanceMatrix::new(DMatrix::from_row_slice(1, 2, &[0.1, 0.9])).unwrap();
        // spatial graph is irrelevant for a single pixel; use a 2-pixel dummy
        let dummy = HsiCube::new(1, 2, 2, vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let graphs = graphs_for(&dummy, 2);
        let scaled = ScaledParams::zero();
        let e2 = {
            let resid = &y - a.matrix() * &r;
            resid.norm_squared()
        };
        let (a_new, e_new, _tau) = step_a(&y, &a, &r, &graphs, &scaled, e2).unwrap();

        let grad = objective::grad_a(&y, a.matrix(), &r, &graphs, &scaled);
        let mut best = e2;
        for k in 1..=10_000 {
            let tau = k as f64 * 1e-3;
            let trial = a.matrix() - &grad * (tau / 2.0);
            let proj = crate::projection::project_simplex_rows(&trial).unwrap();
            let e = (&y - proj.matrix() * &r).norm_squared();
            if e < best {
                best = e;
            }
        }
        assert!(
            e_new <= best + 1e-9,
            "adaptive step {e_new} vs grid best {best}"
        );
        let _ = a_new;
    }

    #[test]
    fn step_r_identity_abundances_returns_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let y = DMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
        let a = DMatrix::identity(3, 3);
        let dummy = HsiCube::new(1, 2, 4, vec![0.0; 8]).unwrap();
        let graphs = graphs_for(&dummy, 3);
        let r = step_r(&y, &a, &graphs, &ScaledParams::zero()).unwrap();
        assert_abs_diff_eq!((r - y).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn step_r_scalar_chain_case_matches_elimination() {
        // M=1, B=2: (a'a) r + (rho2/gamma) r G = a'y, solved by hand:
        // with q = a'a, c = rho2/gamma, G = [[1,-1],[-1,1]]:
        // (q + c) r1 - c r2 = t1 ; -c r1 + (q + c) r2 = t2
        let y = DMatrix::from_row_slice(2, 2, &[0.5, 0.9, 0.3, 0.7]);
        let a = DMatrix::from_column_slice(2, 1, &[0.8, 0.6]);
        let dummy = HsiCube::new(1, 2, 2, vec![0.0; 4]).unwrap();
        let mut graphs = graphs_for(&dummy, 2);
        graphs.endmember = laplacian::build_endmember_laplacian(2).unwrap(); // unused (rho1=0)
        let scaled = ScaledParams {
            rho2_over_gamma: 0.3,
            ..ScaledParams::zero()
        };
        let r = step_r(&y, &a, &graphs, &scaled).unwrap();

        let q = 0.8f64 * 0.8 + 0.6 * 0.6;
        let c = 0.3;
        let t = a.tr_mul(&y);
        let det = (q + c) * (q + c) - c * c;
        let r1 = ((q + c) * t[(0, 0)] + c * t[(0, 1)]) / det;
        let r2 = (c * t[(0, 0)] + (q + c) * t[(0, 1)]) / det;
        assert_abs_diff_eq!(r[(0, 0)], r1, epsilon = 1e-12);
        assert_abs_diff_eq!(r[(0, 1)], r2, epsilon = 1e-12);
    }

    #[test]
    fn step_r_residual_is_tiny_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        for trial in 0..20 {
            let (n, m, b) = (12, 3, 6);
            let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.05..1.0));
            let y = DMatrix::from_fn(n, b, |_, _| rng.random_range(0.0..1.0));
            let dummy = rand_cube(&mut rng, 1, 2, b);
            let graphs = graphs_for(&dummy, m);
            let scaled = ScaledParams {
                rho1_over_gamma: if trial % 2 == 0 { 0.2 } else { 0.0 },
                rho2_over_gamma: if trial % 3 == 0 { 0.0 } else { 0.4 },
                ..ScaledParams::zero()
            };
            let r = step_r(&y, &a, &graphs, &scaled).unwrap();
            let mut p = a.tr_mul(&a);
            if scaled.rho1_over_gamma > 0.0 {
                p += &graphs.endmember * scaled.rho1_over_gamma;
            }
            let lhs = &p * &r + &r * graphs.wavelength.to_dense() * scaled.rho2_over_gamma;
            let rhs = a.tr_mul(&y);
            let rel = (lhs - &rhs).norm() / rhs.norm();
            assert!(rel < 1e-10, "residual {rel}");
        }
    }

    #[test]
    fn step_r_singular_system_is_reported() {
        // rank-deficient A with rho1 = rho2 = 0
        let a = DMatrix::from_row_slice(4, 2, &[0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]);
        let y = DMatrix::from_element(4, 3, 0.2);
        let dummy = HsiCube::new(1, 2, 3, vec![0.0; 6]).unwrap();
        let graphs = graphs_for(&dummy, 2);
        let err = step_r(&y, &a, &graphs, &ScaledParams::zero()).unwrap_err();
        assert!(err.to_string().contains("R-step singular"), "{err}");
    }

    #[test]
    fn least_squares_special_case_holds() {
        // all prior weights zero, A = I: R must be the least-squares solution
        let mut rng = ChaCha8Rng::seed_from_u64(49);
        let y = DMatrix::from_fn(4, 3, |_, _| rng.random_range(0.0..1.0));
        let a = DMatrix::identity(4, 4);
        let dummy = HsiCube::new(1, 2, 3, vec![0.0; 6]).unwrap();
        let graphs = graphs_for(&dummy, 4);
        let r = step_r(&y, &a, &graphs, &ScaledParams::zero()).unwrap();
        let ls = (a.tr_mul(&a)).lu().solve(&a.tr_mul(&y)).unwrap();
        assert_abs_diff_eq!((r - ls).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn gamma_update_matches_trivial_and_degenerate_cases() {
        // z = 0, ||Y-AR||^2 = NB  ->  gamma = 1
        let y = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let a = DMatrix::zeros(2, 1);
        let r = DMatrix::zeros(1, 2);
        let precisions = PrecisionSet::new(vec![DMatrix::identity(2, 2)], 1.0, 10.0).unwrap();
        let up = update_gamma(&y, &a, &r, &precisions).unwrap();
        assert!(!up.clamped);
        assert_abs_diff_eq!(up.gamma, 1.0, epsilon = 1e-12);

        // perfect fit: bracket 0 -> clamped
        let a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let r = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let up = update_gamma(&y, &a, &r, &precisions).unwrap();
        assert!(up.clamped);
        assert!(up.gamma >= 1e19);
    }

    #[test]
    fn gamma_bracket_matches_dense_quadratic_form() {
        // the bracket equals the dense Mahalanobis residual divided by gamma
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let (n, m, b) = (4, 2, 2);
        let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(0.1..0.9));
        let r = DMatrix::from_fn(m, b, |_, _| rng.random_range(0.0..1.0));
        let y = DMatrix::from_fn(n, b, |_, _| rng.random_range(0.0..1.0));
        let gamma = 2.5;
        let mu2 = 1.0 / gamma;
        let sigmas: Vec<DMatrix<f64>> = (0..m)
            .map(|_| {
                let q = DMatrix::from_fn(b, b, |_, _| rng.random_range(-0.5..0.5));
                &q * q.transpose() * 0.05 + DMatrix::identity(b, b) * 0.02
            })
            .collect();
        let s_blocks: Vec<DMatrix<f64>> = sigmas
            .iter()
            .map(|sig| sig.clone().try_inverse().unwrap() * mu2)
            .collect();
        let precisions = PrecisionSet::new(s_blocks, gamma, 100.0).unwrap();
        let up = update_gamma(&y, &a, &r, &precisions).unwrap();

        // dense oracle
        let mut kron = DMatrix::zeros(n * b, m * b);
        for i in 0..n {
            for j in 0..m {
                for p in 0..b {
                    kron[(i * b + p, j * b + p)] = a[(i, j)];
                }
            }
        }
        let mut blockdiag = DMatrix::zeros(m * b, m * b);
        for (j, sig) in sigmas.iter().enumerate() {
            blockdiag.view_mut((j * b, j * b), (b, b)).copy_from(sig);
        }
        let sigma_y = &kron * blockdiag * kron.transpose() + DMatrix::identity(n * b, n * b) * mu2;
        let resid = &y - &a * &r;
        let resid_vec = {
            let t = resid.transpose();
            nalgebra::DVector::from_column_slice(t.as_slice())
        };
        let mahal = (resid_vec.transpose() * sigma_y.try_inverse().unwrap() * &resid_vec)[(0, 0)];
        // bracket = mahal / gamma  ->  gamma_new = NB / bracket
        let bracket = mahal / gamma;
        assert_abs_diff_eq!(
            up.gamma,
            (n * b) as f64 / bracket,
            epsilon = 1e-6 * up.gamma
        );
    }

    #[test]
    fn covariance_phase_energy_matches_full_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let cube = rand_cube(&mut rng, 3, 3, 4);
        let y = cube.matrix().clone();
        let mut config = ScmConfig::scm_preset(2);
        config.max_inner_iters = 5;
        let graphs = graphs_for(&cube, 2);
        let phase1 = run_phase_ar_with_graphs(&cube, &config, &graphs).unwrap();
        let out = run_phase_covariance(&y, phase1.abundances.matrix(), &phase1.endmembers, &config)
            .unwrap();

        // recompute the final energy from scratch and compare to the running value
        let a = phase1.abundances.matrix();
        let d2 = (&y - a * &phase1.endmembers).norm_squared();
        let z = objective::assemble_z(&y, a, &phase1.endmembers).unwrap();
        let qf = QFactor::from_blocks(out.precisions.matrices(), &a.tr_mul(a)).unwrap();
        let gamma = out.precisions.gamma();
        let nb = (y.nrows() * y.ncols()) as f64;
        let full = gamma * d2 - gamma * qf.quad(&z) + qf.logdet()
            - objective::sum_logdet(out.precisions.matrices()).unwrap()
            - nb * gamma.ln();
        let running = *out.energy_trace.last().unwrap();
        let rel = (full - running).abs() / full.abs().max(1.0);
        assert!(rel < 1e-8, "running {running} vs full {full}");

        for w in out.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn exact_fit_drives_uncertainty_to_zero() {
        // Y = AR exactly: the covariance phase should push every Sigma_j to
        // (numerically) nothing
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let a_raw = DMatrix::from_fn(9, 2, |_, _| rng.random_range(0.0..1.0));
        let a = crate::projection::project_simplex_rows(&a_raw).unwrap();
        let r = DMatrix::from_fn(2, 3, |_, _| rng.random_range(0.1..0.9));
        let y = a.matrix() * &r;
        let mut config = ScmConfig::scm_preset(2);
        config.max_inner_iters = 30;
        let out = run_phase_covariance(&y, a.matrix(), &r, &config).unwrap();
        assert!(out.gamma_clamped);
        let set = out
            .precisions
            .to_endmember_set(r.clone(), config.sigma_max)
            .unwrap();
        let summary = crate::uncertainty::summarize_uncertainty(&set).unwrap();
        for amt in summary.amounts() {
            assert!(*amt < 1e-3, "uncertainty amount {amt}");
        }
    }

    #[test]
    fn phase1_recovers_endmembers_on_separable_data() {
        // noiseless strip scene with pure interiors and blurred boundaries;
        // a tiny rho1 keeps the R-step well posed
        let truth = DMatrix::from_fn(2, 6, |i, k| {
            let x = k as f64 / 5.0;
            if i == 0 {
                0.7 - 0.3 * x
            } else {
                0.1 + 0.1 * x + 0.4 * (-((x - 0.5) / 0.2).powi(2)).exp()
            }
        });
        let mut spec = crate::synth::SynthSpec::new(truth.clone());
        spec.height = 10;
        spec.width = 10;
        spec.blur_sigma = 0.8;
        spec.snr_db = None;
        let scene = crate::synth::generate_scene(&spec).unwrap();

        let mut config = ScmConfig::ncm_preset(2);
        config.rho1_prime = 1e-6;
        config.max_outer_iters = 2000;
        config.energy_rel_tol = 1e-12;
        let out = run_phase_ar(&scene.cube, &config).unwrap();

        let perm = crate::metrics::best_permutation(&out.endmembers, &truth).unwrap();
        let err = crate::metrics::endmember_error(&out.endmembers, &truth, &perm).unwrap();
        assert!(err < 1e-3, "mean abs endmember error {err}");

        for w in out.energy_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9);
        }
    }

    #[test]
    fn unmix_is_deterministic_for_fixed_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(54);
        let cube = rand_cube(&mut rng, 4, 4, 5);
        let mut config = ScmConfig::scm_preset(2);
        config.max_outer_iters = 40;
        config.max_inner_iters = 10;
        let r1 = unmix(&cube, &config).unwrap();
        let r2 = unmix(&cube, &config).unwrap();
        assert_eq!(r1.abundances.matrix(), r2.abundances.matrix());
        assert_eq!(r1.endmembers.means(), r2.endmembers.means());
        assert_eq!(r1.energy_trace, r2.energy_trace);
        assert_eq!(r1.covariance_energy_trace, r2.covariance_energy_trace);
    }

    #[test]
    fn unmix_reports_phase_on_failure() {
        let cube = HsiCube::new(1, 2, 3, vec![0.1; 6]).unwrap();
        let mut config = ScmConfig::scm_preset(4); // M > N
        config.max_outer_iters = 5;
        let err = unmix(&cube, &config).unwrap_err();
        assert!(err.to_string().starts_with("init:"), "{err}");
    }
}
