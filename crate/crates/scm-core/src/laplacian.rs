//! The three graph Laplacians of the model: spatial (`L`, sparse, over the
//! pixel grid), endmember pairwise closeness (`H`, dense `M x M`), and
//! wavelength smoothness (`G`, tridiagonal `B x B`).

use nalgebra::DMatrix;

use crate::error::{Result, ScmError};
use crate::par;
use crate::types::{HsiCube, Neighborhood};

/// Symmetric sparse graph Laplacian `L = diag(sum_k w_ik) - [w_ij]`.
///
/// All grid edges are stored, including zero weights, so the diagonal is the
/// exact floating-point sum of the stored off-diagonals and row sums are zero
/// by construction. Edges are kept in a deterministic raster order; assembly
/// is independent of weight evaluation order.
#[derive(Debug, Clone)]
pub struct SparseLaplacian {
    n: usize,
    /// Undirected edges `(i, j, w)` with `i < j`, raster-ordered.
    edges: Vec<(u32, u32, f64)>,
    /// Diagonal: sum of incident edge weights per node.
    degrees: Vec<f64>,
}

impl SparseLaplacian {
    fn from_edges(n: usize, edges: Vec<(u32, u32, f64)>) -> Self {
        let mut degrees = vec![0.0; n];
        for &(i, j, w) in &edges {
            degrees[i as usize] += w;
            degrees[j as usize] += w;
        }
        SparseLaplacian { n, edges, degrees }
    }

    pub fn dimension(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    /// `L * A` for an `n x m` matrix `A`.
    pub fn apply(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(a.nrows(), self.n, "Laplacian/matrix dimension mismatch");
        let m = a.ncols();
        let mut out = DMatrix::zeros(self.n, m);
        for &(i, j, w) in &self.edges {
            let (i, j) = (i as usize, j as usize);
            for c in 0..m {
                let d = w * (a[(i, c)] - a[(j, c)]);
                out[(i, c)] += d;
                out[(j, c)] -= d;
            }
        }
        out
    }

    /// `Tr(A' L A) = sum_edges w_ij ||a_i - a_j||^2`.
    pub fn quad_form(&self, a: &DMatrix<f64>) -> f64 {
        assert_eq!(a.nrows(), self.n, "Laplacian/matrix dimension mismatch");
        let m = a.ncols();
        let mut acc = 0.0;
        for &(i, j, w) in &self.edges {
            let (i, j) = (i as usize, j as usize);
            let mut d2 = 0.0;
            for c in 0..m {
                let d = a[(i, c)] - a[(j, c)];
                d2 += d * d;
            }
            acc += w * d2;
        }
        acc
    }

    /// Dense realization, for small-instance checks.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, self.n);
        for &(i, j, w) in &self.edges {
            let (i, j) = (i as usize, j as usize);
            out[(i, j)] -= w;
            out[(j, i)] -= w;
        }
        for i in 0..self.n {
            out[(i, i)] = self.degrees[i];
        }
        out
    }
}

/// Grid edges in raster order for the given connectivity.
fn grid_edges(height: usize, width: usize, neighborhood: Neighborhood) -> Vec<(u32, u32)> {
    let mut edges = Vec::new();
    let idx = |r: usize, c: usize| (r * width + c) as u32;
    for r in 0..height {
        for c in 0..width {
            let i = idx(r, c);
            if c + 1 < width {
                edges.push((i, idx(r, c + 1)));
            }
            if r + 1 < height {
                edges.push((i, idx(r + 1, c)));
                if neighborhood == Neighborhood::Eight {
                    if c + 1 < width {
                        edges.push((i, idx(r + 1, c + 1)));
                    }
                    if c > 0 {
                        edges.push((i, idx(r + 1, c - 1)));
                    }
                }
            }
        }
    }
    edges
}

/// Builds the spatial abundance prior `L` over the pixel grid.
///
/// Without segmentation, neighboring pixels get
/// `w_ij = exp(-||y_i - y_j||^2 / (2 B eta^2))`; with segmentation labels the
/// weight is 1 for same-region neighbors and 0 otherwise.
pub fn build_spatial_laplacian(
    cube: &HsiCube,
    eta: f64,
    neighborhood: Neighborhood,
    segmentation: Option<&[u32]>,
) -> Result<SparseLaplacian> {
    let n = cube.n_pixels();
    if n < 2 {
        return Err(ScmError::InvalidArgument(
            "graph needs at least 2 pixels".into(),
        ));
    }
    if !(eta > 0.0) {
        return Err(ScmError::InvalidArgument(format!(
            "eta must be > 0, got {eta}"
        )));
    }
    if let Some(labels) = segmentation {
        if labels.len() != n {
            return Err(ScmError::dim(
                "segmentation labels",
                format!("{n}"),
                format!("{}", labels.len()),
            ));
        }
    }
    let pairs = grid_edges(cube.height(), cube.width(), neighborhood);
    let y = cube.matrix();
    let denom = 2.0 * cube.bands() as f64 * eta * eta;
    let weights: Vec<f64> = par::map_slice(&pairs, |&(i, j)| match segmentation {
        Some(labels) => {
            if labels[i as usize] == labels[j as usize] {
                1.0
            } else {
                0.0
            }
        }
        None => {
            let mut d2 = 0.0;
            for b in 0..y.ncols() {
                let d = y[(i as usize, b)] - y[(j as usize, b)];
                d2 += d * d;
            }
            (-d2 / denom).exp()
        }
    });
    let edges = pairs
        .into_iter()
        .zip(weights)
        .map(|((i, j), w)| (i, j, w))
        .collect();
    Ok(SparseLaplacian::from_edges(n, edges))
}

/// The pairwise-closeness Laplacian `H`: diagonal `M - 1`, off-diagonal `-1`
/// (complete graph with unit weights).
pub fn build_endmember_laplacian(m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(ScmError::InvalidArgument(format!(
            "endmember Laplacian needs M >= 2, got {m}"
        )));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            (m - 1) as f64
        } else {
            -1.0
        }
    }))
}

/// Symmetric tridiagonal matrix, stored as its diagonal and off-diagonal.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl Tridiagonal {
    pub fn dimension(&self) -> usize {
        self.diag.len()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off(&self) -> &[f64] {
        &self.off
    }

    /// `x' T x` via the tridiagonal action.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.diag.len());
        let n = x.len();
        let mut acc = 0.0;
        for k in 0..n {
            let mut tx = self.diag[k] * x[k];
            if k > 0 {
                tx += self.off[k - 1] * x[k - 1];
            }
            if k + 1 < n {
                tx += self.off[k] * x[k + 1];
            }
            acc += x[k] * tx;
        }
        acc
    }

    /// Sum of `x' T x` over the rows of an `m x n` matrix: `Tr(X T X')`.
    pub fn quad_form_rows(&self, x: &DMatrix<f64>) -> f64 {
        let mut acc = 0.0;
        let mut row = vec![0.0; x.ncols()];
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                row[c] = x[(r, c)];
            }
            acc += self.quad_form(&row);
        }
        acc
    }

    /// Solves `(scale * T + shift * I) y = rhs` by the Thomas algorithm.
    ///
    /// The shifted matrix must be positive definite (it is whenever
    /// `scale >= 0`, `shift > 0` and `T` is PSD); a vanishing pivot reports a
    /// singular system.
    pub fn solve_scaled_shifted(&self, scale: f64, shift: f64, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.diag.len();
        assert_eq!(rhs.len(), n);
        let mut c_prime = vec![0.0; n];
        let mut d_prime = vec![0.0; n];
        let d0 = scale * self.diag[0] + shift;
        if d0.abs() < 1e-300 {
            return Err(ScmError::SingularSystem(
                "tridiagonal solve hit a zero pivot".into(),
            ));
        }
        c_prime[0] = scale * self.off.first().copied().unwrap_or(0.0) / d0;
        d_prime[0] = rhs[0] / d0;
        for k in 1..n {
            let a = scale * self.off[k - 1];
            let denom = scale * self.diag[k] + shift - a * c_prime[k - 1];
            if denom.abs() < 1e-300 {
                return Err(ScmError::SingularSystem(
                    "tridiagonal solve hit a zero pivot".into(),
                ));
            }
            let c = if k + 1 < n { scale * self.off[k] } else { 0.0 };
            c_prime[k] = c / denom;
            d_prime[k] = (rhs[k] - a * d_prime[k - 1]) / denom;
        }
        let mut y = vec![0.0; n];
        y[n - 1] = d_prime[n - 1];
        for k in (0..n - 1).rev() {
            y[k] = d_prime[k] - c_prime[k] * y[k + 1];
        }
        Ok(y)
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.diag.len();
        let mut out = DMatrix::zeros(n, n);
        for k in 0..n {
            out[(k, k)] = self.diag[k];
            if k + 1 < n {
                out[(k, k + 1)] = self.off[k];
                out[(k + 1, k)] = self.off[k];
            }
        }
        out
    }
}

/// The wavelength-smoothness Laplacian `G`: the chain graph over bands, with
/// 1 at both diagonal ends, 2 inside, and -1 on the sub/super-diagonals.
pub fn build_wavelength_laplacian(b: usize) -> Result<Tridiagonal> {
    if b < 2 {
        return Err(ScmError::InvalidArgument(format!(
            "wavelength Laplacian needs B >= 2, got {b}"
        )));
    }
    let mut diag = vec![2.0; b];
    diag[0] = 1.0;
    diag[b - 1] = 1.0;
    Ok(Tridiagonal {
        diag,
        off: vec![-1.0; b - 1],
    })
}

/// The three Laplacians a solver run needs, built once per run.
#[derive(Debug, Clone)]
pub struct Graphs {
    pub spatial: SparseLaplacian,
    pub endmember: DMatrix<f64>,
    pub wavelength: Tridiagonal,
}

impl Graphs {
    pub fn build(cube: &HsiCube, config: &crate::types::ScmConfig) -> Result<Graphs> {
        Ok(Graphs {
            spatial: build_spatial_laplacian(
                cube,
                config.eta,
                config.neighborhood,
                config.segmentation.as_deref(),
            )?,
            endmember: build_endmember_laplacian(config.num_endmembers)?,
            wavelength: build_wavelength_laplacian(cube.bands())?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn laplacian_sanity(l: &DMatrix<f64>) {
        let n = l.nrows();
        for i in 0..n {
            let row_sum: f64 = (0..n).map(|j| l[(i, j)]).sum();
            assert_abs_diff_eq!(row_sum, 0.0, epsilon = 1e-10);
            assert!(l[(i, i)] >= 0.0);
            for j in 0..n {
                assert_abs_diff_eq!(l[(i, j)], l[(j, i)], epsilon = 1e-12);
                if i != j {
                    assert!(l[(i, j)] <= 0.0);
                }
            }
        }
        if n <= 50 {
            let eig = crate::types::symmetric_eigenvalues(l).unwrap();
            for &ev in eig.iter() {
                assert!(ev >= -1e-10, "eigenvalue {ev} negative");
            }
        }
    }

    #[test]
    fn identical_pixels_give_unit_weight() {
        let cube = HsiCube::new(1, 2, 2, vec![0.3, 0.4, 0.3, 0.4]).unwrap();
        let l = build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, None).unwrap();
        let dense = l.to_dense();
        assert_abs_diff_eq!(dense[(0, 0)], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dense[(0, 1)], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dense[(1, 1)], 1.0, epsilon = 1e-15);
        laplacian_sanity(&dense);
    }

    #[test]
    fn weight_matches_hand_evaluated_formula() {
        // B=1, |y_0 - y_1| = 0.1, eta = 0.05:
        // w = exp(-0.01 / (2 * 1 * 0.0025)) = exp(-2)
        let cube = HsiCube::new(1, 2, 1, vec![0.0, 0.1]).unwrap();
        let l = build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, None).unwrap();
        let w = l.edges()[0].2;
        assert_abs_diff_eq!(w, (-2.0f64).exp(), epsilon = 1e-15);
    }

    #[test]
    fn cross_region_weight_is_zero() {
        let cube = HsiCube::new(1, 2, 1, vec![0.5, 0.5]).unwrap();
        let labels = [0u32, 1u32];
        let l = build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, Some(&labels)).unwrap();
        let dense = l.to_dense();
        assert_eq!(dense, DMatrix::zeros(2, 2));
    }

    #[test]
    fn single_pixel_rejected() {
        let cube = HsiCube::new(1, 1, 1, vec![0.5]).unwrap();
        assert!(build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, None).is_err());
    }

    #[test]
    fn eight_connected_adds_diagonal_edges() {
        let cube = HsiCube::new(3, 3, 1, vec![0.1; 9]).unwrap();
        let l4 = build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, None).unwrap();
        let l8 = build_spatial_laplacian(&cube, 0.05, Neighborhood::Eight, None).unwrap();
        assert_eq!(l4.edges().len(), 12);
        assert_eq!(l8.edges().len(), 20);
        laplacian_sanity(&l8.to_dense());
    }

    #[test]
    fn endmember_laplacian_matches_description() {
        let h2 = build_endmember_laplacian(2).unwrap();
        assert_eq!(h2, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        let h3 = build_endmember_laplacian(3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 2.0 } else { -1.0 };
                assert_eq!(h3[(i, j)], want);
            }
        }
        laplacian_sanity(&h3);

        for m in 2..7 {
            let h = build_endmember_laplacian(m).unwrap();
            let ones = DMatrix::from_element(m, 1, 1.0);
            let prod = &h * &ones;
            assert_abs_diff_eq!(prod.norm(), 0.0, epsilon = 1e-12);
        }
        assert!(build_endmember_laplacian(1).is_err());
    }

    #[test]
    fn wavelength_laplacian_matches_description() {
        let g3 = build_wavelength_laplacian(3).unwrap().to_dense();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(g3, want);

        let g2 = build_wavelength_laplacian(2).unwrap().to_dense();
        assert_eq!(g2, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));

        laplacian_sanity(&build_wavelength_laplacian(12).unwrap().to_dense());
        assert!(build_wavelength_laplacian(1).is_err());
    }

    #[test]
    fn wavelength_quad_form_is_sum_of_squared_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for b in [2usize, 3, 8, 33] {
            let g = build_wavelength_laplacian(b).unwrap();
            let x: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
            // independent oracle: direct first-difference sum
            let oracle: f64 = (0..b - 1).map(|k| (x[k + 1] - x[k]).powi(2)).sum();
            assert_abs_diff_eq!(g.quad_form(&x), oracle, epsilon = 1e-12);
        }
    }

    #[test]
    fn spatial_quad_form_matches_dense_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..4 * 3 * 2).map(|_| rng.random_range(0.0..1.0)).collect();
        let cube = HsiCube::new(4, 3, 2, data).unwrap();
        let l = build_spatial_laplacian(&cube, 0.1, Neighborhood::Four, None).unwrap();
        let a = DMatrix::from_fn(12, 3, |_, _| rng.random_range(-1.0..1.0));

        // route 1: edge-sum quadratic form
        let via_edges = l.quad_form(&a);
        // route 2: dense Tr(A' L A)
        let dense = l.to_dense();
        let via_trace = (a.transpose() * &dense * &a).trace();
        assert_abs_diff_eq!(via_edges, via_trace, epsilon = 1e-10);

        // and L * A agrees with the dense product
        let lhs = l.apply(&a);
        let rhs = &dense * &a;
        assert_abs_diff_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-10);

        laplacian_sanity(&dense);
    }

    #[test]
    fn constant_rows_are_in_the_kernel() {
        let cube = HsiCube::new(3, 3, 2, vec![0.2; 18]).unwrap();
        let l = build_spatial_laplacian(&cube, 0.05, Neighborhood::Four, None).unwrap();
        let a = DMatrix::from_fn(9, 3, |_, c| 0.1 * (c as f64 + 1.0));
        assert_abs_diff_eq!(l.quad_form(&a), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn tridiagonal_solver_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in [2usize, 5, 17] {
            let g = build_wavelength_laplacian(b).unwrap();
            let rhs: Vec<f64> = (0..b).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (scale, shift) = (0.7, 1.3);
            let y = g.solve_scaled_shifted(scale, shift, &rhs).unwrap();
            let dense = g.to_dense() * scale + DMatrix::identity(b, b) * shift;
            let y_dense = dense
                .lu()
                .solve(&nalgebra::DVector::from_vec(rhs.clone()))
                .unwrap();
            for k in 0..b {
                assert_abs_diff_eq!(y[k], y_dense[k], epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn tridiagonal_singular_system_is_reported() {
        let g = build_wavelength_laplacian(4).unwrap();
        // scale * G with shift 0 is singular (constants in the kernel)
        assert!(g.solve_scaled_shifted(1.0, 0.0, &[1.0; 4]).is_err());
    }
}
