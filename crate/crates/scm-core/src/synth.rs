//! Synthetic scene generation: blocky pure-material abundance maps, Gaussian
//! boundary blurring, and additive noise at a requested SNR.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, ScmError};
use crate::types::{AbundanceMatrix, HsiCube};

/// Bundled synthetic stand-in spectra (4 materials, 200 bands). These are
/// hand-drawn smooth curves shaped like rock/man-made reflectances, not
/// measurements from any spectral library.
const BUNDLED_SPECTRA: &str = include_str!("../data/synthetic_spectra.csv");

/// Parameters of one synthetic scene.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// `M x B` endmember spectra.
    pub endmember_spectra: DMatrix<f64>,
    /// Standard deviation of the boundary blur, in pixels. Zero disables it.
    pub blur_sigma: f64,
    /// Noise level in decibels; `None` renders a noiseless cube.
    pub snr_db: Option<f64>,
    pub rng_seed: u64,
}

impl SynthSpec {
    pub fn new(endmember_spectra: DMatrix<f64>) -> Self {
        SynthSpec {
            height: 40,
            width: 40,
            endmember_spectra,
            blur_sigma: 2.0,
            snr_db: Some(40.0),
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.endmember_spectra.nrows();
        if m < 1 {
            return Err(ScmError::InvalidArgument("need at least 1 endmember".into()));
        }
        if self.height < 1 || self.width < 1 {
            return Err(ScmError::InvalidArgument("scene must be at least 1x1".into()));
        }
        if m != 4 && self.width < m {
            return Err(ScmError::InvalidArgument(format!(
                "strip layout needs width >= M, got width={} M={m}",
                self.width
            )));
        }
        if let Some(snr) = self.snr_db {
            if !(0.0..=120.0).contains(&snr) {
                return Err(ScmError::InvalidArgument(format!(
                    "snr_db must lie in [0, 120], got {snr}"
                )));
            }
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(ScmError::InvalidArgument(format!(
                "blur_sigma must be >= 0, got {}",
                self.blur_sigma
            )));
        }
        Ok(())
    }
}

/// Region label per pixel: four quadrants in reading order when `M = 4`,
/// otherwise `M` vertical strips.
pub fn region_labels(height: usize, width: usize, m: usize) -> Vec<u32> {
    let mut labels = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let label = if m == 4 {
                let top = r < height / 2;
                let left = c < width / 2;
                match (top, left) {
                    (true, true) => 0,
                    (true, false) => 1,
                    (false, true) => 2,
                    (false, false) => 3,
                }
            } else {
                ((c * m) / width).min(m - 1) as u32
            };
            labels.push(label);
        }
    }
    labels
}

/// One-hot abundance maps per region, blurred by a normalized isotropic
/// Gaussian kernel (radius `ceil(3 sigma)`, replicate padding), then
/// defensively row-renormalized. Also returns the region label map.
pub fn generate_abundances(spec: &SynthSpec) -> Result<(AbundanceMatrix, Vec<u32>)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let m = spec.endmember_spectra.nrows();
    let labels = region_labels(h, w, m);

    let mut maps = DMatrix::zeros(h * w, m);
    for (i, &l) in labels.iter().enumerate() {
        maps[(i, l as usize)] = 1.0;
    }

    if spec.blur_sigma > 0.0 {
        let radius = (3.0 * spec.blur_sigma).ceil() as usize;
        if 2 * radius + 1 > h || 2 * radius + 1 > w {
            return Err(ScmError::InvalidArgument(format!(
                "blur kernel of size {} is larger than the {h}x{w} image",
                2 * radius + 1
            )));
        }
        let kernel = gaussian_kernel(spec.blur_sigma, radius);
        for j in 0..m {
            let blurred = blur_map(&maps, j, h, w, &kernel);
            for i in 0..h * w {
                maps[(i, j)] = blurred[i];
            }
        }
        // rows already sum to 1 by linearity; renormalize to absorb rounding
        for i in 0..h * w {
            let sum: f64 = (0..m).map(|j| maps[(i, j)]).sum();
            for j in 0..m {
                maps[(i, j)] /= sum;
            }
        }
    }
    Ok((AbundanceMatrix::new(maps)?, labels))
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let mut k: Vec<f64> = (0..=2 * radius)
        .map(|t| {
            let d = t as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable convolution of one abundance map with replicate padding.
fn blur_map(maps: &DMatrix<f64>, j: usize, h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = kernel.len() / 2;
    let at = |r: usize, c: usize| maps[(r * w + c, j)];
    // horizontal pass
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let cc = (c + t).saturating_sub(radius).min(w - 1);
                acc += k * at(r, cc);
            }
            tmp[r * w + c] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            for (t, &k) in kernel.iter().enumerate() {
                let rr = (r + t).saturating_sub(radius).min(h - 1);
                acc += k * tmp[rr * w + c];
            }
            out[r * w + c] = acc;
        }
    }
    out
}

/// Renders `Y = A M + N` with i.i.d. zero-mean Gaussian noise at
/// `sigma_Y = rms(AM) * 10^(-snr/20)`; negatives are not clipped. Returns the
/// cube and the noise standard deviation used.
pub fn render_cube(
    height: usize,
    width: usize,
    abundances: &AbundanceMatrix,
    spectra: &DMatrix<f64>,
    snr_db: Option<f64>,
    seed: u64,
) -> Result<(HsiCube, f64)> {
    if abundances.n_endmembers() != spectra.nrows() {
        return Err(ScmError::dim(
            "abundances/spectra",
            format!("{} endmembers", spectra.nrows()),
            format!("{}", abundances.n_endmembers()),
        ));
    }
    if abundances.n_pixels() != height * width {
        return Err(ScmError::dim(
            "abundances",
            format!("{} rows", height * width),
            format!("{}", abundances.n_pixels()),
        ));
    }
    let mut clean = abundances.matrix() * spectra;
    let (n, b) = (clean.nrows(), clean.ncols());
    let sigma_y = match snr_db {
        None => 0.0,
        Some(snr) => {
            let rms = (clean.norm_squared() / (n * b) as f64).sqrt();
            rms * 10f64.powf(-snr / 20.0)
        }
    };
    if sigma_y > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // noise drawn in raster band-fastest order
        for i in 0..n {
            for k in 0..b {
                let g: f64 = StandardNormal.sample(&mut rng);
                clean[(i, k)] += sigma_y * g;
            }
        }
    }
    Ok((HsiCube::from_matrix(height, width, clean)?, sigma_y))
}

/// A fully rendered synthetic scene with its ground truth.
#[derive(Debug, Clone)]
pub struct Scene {
    pub cube: HsiCube,
    pub abundances: AbundanceMatrix,
    pub labels: Vec<u32>,
    pub sigma_y: f64,
}

pub fn generate_scene(spec: &SynthSpec) -> Result<Scene> {
    let (abundances, labels) = generate_abundances(spec)?;
    let (cube, sigma_y) = render_cube(
        spec.height,
        spec.width,
        &abundances,
        &spec.endmember_spectra,
        spec.snr_db,
        spec.rng_seed,
    )?;
    Ok(Scene {
        cube,
        abundances,
        labels,
        sigma_y,
    })
}

/// Parses a spectra CSV: a header of material names, then one row per band.
/// `strict_range` additionally requires reflectances in `[0, 1]` (the library
/// semantic); estimated endmembers may fall outside it.
pub fn parse_spectra(
    content: &str,
    origin: &str,
    strict_range: bool,
) -> Result<(DMatrix<f64>, Vec<String>)> {
    let mut names: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let lineno = lineno + 1;
        match &names {
            None => {
                let parsed: Vec<String> = line.split(',').map(|s| s.trim().to_string()).collect();
                if parsed.iter().any(|s| s.is_empty()) {
                    return Err(ScmError::Parse {
                        path: origin.into(),
                        line: lineno,
                        message: "empty material name in header".into(),
                    });
                }
                names = Some(parsed);
            }
            Some(names) => {
                let fields: Vec<&str> = line.split(',').map(|s| s.trim()).collect();
                if fields.len() != names.len() {
                    return Err(ScmError::Parse {
                        path: origin.into(),
                        line: lineno,
                        message: format!(
                            "band row {}: expected {} columns, got {}",
                            rows.len() + 1,
                            names.len(),
                            fields.len()
                        ),
                    });
                }
                let mut row = Vec::with_capacity(fields.len());
                for f in fields {
                    let v: f64 = f.parse().map_err(|_| ScmError::Parse {
                        path: origin.into(),
                        line: lineno,
                        message: format!("not a number: {f:?}"),
                    })?;
                    if strict_range && !(0.0..=1.0).contains(&v) {
                        return Err(ScmError::Parse {
                            path: origin.into(),
                            line: lineno,
                            message: format!("reflectance {v} outside [0, 1]"),
                        });
                    }
                    row.push(v);
                }
                rows.push(row);
            }
        }
    }
    let names = names.ok_or_else(|| ScmError::Parse {
        path: origin.into(),
        line: 1,
        message: "missing header row".into(),
    })?;
    if rows.is_empty() {
        return Err(ScmError::Parse {
            path: origin.into(),
            line: 2,
            message: "no band rows".into(),
        });
    }
    let (m, b) = (names.len(), rows.len());
    let matrix = DMatrix::from_fn(m, b, |j, k| rows[k][j]);
    Ok((matrix, names))
}

/// Loads an `M x B` spectra matrix plus material names from a CSV file.
pub fn load_spectra_library(path: &std::path::Path) -> Result<(DMatrix<f64>, Vec<String>)> {
    let content = std::fs::read_to_string(path)?;
    parse_spectra(&content, &path.display().to_string(), true)
}

/// Serializes spectra in the library CSV layout (9 significant digits).
pub fn spectra_to_csv(matrix: &DMatrix<f64>, names: &[String]) -> String {
    let mut out = String::new();
    out.push_str(&names.join(","));
    out.push('\n');
    for k in 0..matrix.ncols() {
        let row: Vec<String> = (0..matrix.nrows())
            .map(|j| format!("{:.8e}", matrix[(j, k)]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn save_spectra_library(
    path: &std::path::Path,
    matrix: &DMatrix<f64>,
    names: &[String],
) -> Result<()> {
    std::fs::write(path, spectra_to_csv(matrix, names))?;
    Ok(())
}

/// The spectra shipped with the crate (synthetic stand-ins; see
/// `data/synthetic_spectra.csv`).
pub fn bundled_spectra() -> (DMatrix<f64>, Vec<String>) {
    parse_spectra(BUNDLED_SPECTRA, "bundled spectra", true)
        .expect("bundled spectra must parse")
}
