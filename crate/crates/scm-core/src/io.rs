//! File formats: the binary cube container, plain-text run configuration,
//! CSV result tables, covariance blobs, and a minimal ENVI reader for real
//! cubes.
//!
//! All CSV output uses a header row, '.' decimals and 9 significant digits.

use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, ScmError};
use crate::metrics::AlignedErrors;
use crate::types::{HsiCube, Neighborhood, ScmConfig};
use crate::uncertainty::UncertaintySummary;

const CUBE_MAGIC: &[u8; 4] = b"SCMC";
const CUBE_VERSION: u16 = 1;

/// Formats a float with 9 significant digits.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

// ---------------------------------------------------------------------------
// cube container: magic, version u16, height u32, width u32, bands u32,
// then h*w*b little-endian f32 in raster row-major, band-fastest order
// ---------------------------------------------------------------------------

pub fn write_cube(path: &Path, cube: &HsiCube) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + cube.n_pixels() * cube.bands() * 4);
    buf.extend_from_slice(CUBE_MAGIC);
    buf.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cube.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(cube.width() as u32).to_le_bytes());
    buf.extend_from_slice(&(cube.bands() as u32).to_le_bytes());
    for v in cube.raster_values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_cube(path: &Path) -> Result<HsiCube> {
    let mut file = std::fs::File::open(path)?;
    let mut header = [0u8; 18];
    file.read_exact(&mut header)?;
    if &header[0..4] != CUBE_MAGIC {
        return Err(ScmError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: "bad magic, not a cube file".into(),
        });
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CUBE_VERSION {
        return Err(ScmError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!("unsupported cube version {version}"),
        });
    }
    let height = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let bands = u32::from_le_bytes(header[14..18].try_into().unwrap()) as usize;
    let expected = height * width * bands * 4;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(ScmError::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "payload length {} does not match header ({expected} bytes expected)",
                payload.len()
            ),
        });
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    HsiCube::new(height, width, bands, data)
}

// ---------------------------------------------------------------------------
// run configuration: `key = value` lines, '#' comments, unknown keys rejected
// ---------------------------------------------------------------------------

pub fn serialize_config(config: &ScmConfig) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "num_endmembers = {}", config.num_endmembers);
    let _ = writeln!(out, "eta = {}", config.eta);
    let _ = writeln!(out, "beta1_prime = {}", config.beta1_prime);
    let _ = writeln!(out, "beta2_prime = {}", config.beta2_prime);
    let _ = writeln!(out, "rho1_prime = {}", config.rho1_prime);
    let _ = writeln!(out, "rho2_prime = {}", config.rho2_prime);
    let _ = writeln!(out, "sigma0 = {}", config.sigma0);
    let _ = writeln!(out, "sigma_max = {}", config.sigma_max);
    let _ = writeln!(out, "neighborhood = {}", config.neighborhood);
    let _ = writeln!(out, "max_outer_iters = {}", config.max_outer_iters);
    let _ = writeln!(out, "max_inner_iters = {}", config.max_inner_iters);
    let _ = writeln!(out, "energy_rel_tol = {}", config.energy_rel_tol);
    let _ = writeln!(out, "rng_seed = {}", config.rng_seed);
    let _ = writeln!(out, "clamp_r = {}", config.clamp_r);
    if let Some(seg) = &config.segmentation {
        let ids: Vec<String> = seg.iter().map(|v| v.to_string()).collect();
        let _ = writeln!(out, "segmentation = {}", ids.join(","));
    }
    out
}

pub fn parse_config(content: &str, origin: &str) -> Result<ScmConfig> {
    // start from the SCM preset so a file may override only some keys
    let mut config = ScmConfig::scm_preset(4);
    for (lineno, raw) in content.lines().enumerate() {
        let lineno = lineno + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| ScmError::Parse {
            path: origin.into(),
            line: lineno,
            message: "expected `key = value`".into(),
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| ScmError::Parse {
            path: origin.into(),
            line: lineno,
            message: format!("invalid {what}: {value:?}"),
        };
        match key {
            "num_endmembers" => config.num_endmembers = value.parse().map_err(|_| bad(key))?,
            "eta" => config.eta = value.parse().map_err(|_| bad(key))?,
            "beta1_prime" => config.beta1_prime = value.parse().map_err(|_| bad(key))?,
            "beta2_prime" => config.beta2_prime = value.parse().map_err(|_| bad(key))?,
            "rho1_prime" => config.rho1_prime = value.parse().map_err(|_| bad(key))?,
            "rho2_prime" => config.rho2_prime = value.parse().map_err(|_| bad(key))?,
            "sigma0" => config.sigma0 = value.parse().map_err(|_| bad(key))?,
            "sigma_max" => config.sigma_max = value.parse().map_err(|_| bad(key))?,
            "neighborhood" => {
                config.neighborhood = match value {
                    "4" => Neighborhood::Four,
                    "8" => Neighborhood::Eight,
                    _ => return Err(bad("neighborhood (expected 4 or 8)")),
                }
            }
            "max_outer_iters" => config.max_outer_iters = value.parse().map_err(|_| bad(key))?,
            "max_inner_iters" => config.max_inner_iters = value.parse().map_err(|_| bad(key))?,
            "energy_rel_tol" => config.energy_rel_tol = value.parse().map_err(|_| bad(key))?,
            "rng_seed" => config.rng_seed = value.parse().map_err(|_| bad(key))?,
            "clamp_r" => config.clamp_r = value.parse().map_err(|_| bad(key))?,
            "segmentation" => {
                let ids: std::result::Result<Vec<u32>, _> =
                    value.split(',').map(|s| s.trim().parse()).collect();
                config.segmentation = Some(ids.map_err(|_| bad(key))?);
            }
            unknown => {
                return Err(ScmError::Parse {
                    path: origin.into(),
                    line: lineno,
                    message: format!("unknown key {unknown:?}"),
                })
            }
        }
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ScmConfig> {
    let content = std::fs::read_to_string(path)?;
    parse_config(&content, &path.display().to_string())
}

pub fn save_config(path: &Path, config: &ScmConfig) -> Result<()> {
    std::fs::write(path, serialize_config(config))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// CSV tables
// ---------------------------------------------------------------------------

/// Abundances: one row per pixel, one column per endmember.
pub fn write_abundance_csv(path: &Path, a: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..a.ncols()).map(|j| format!("em_{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| fmt_float(a[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_abundance_csv(path: &Path) -> Result<DMatrix<f64>> {
    let content = std::fs::read_to_string(path)?;
    let origin = path.display().to_string();
    let mut lines = content.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| ScmError::Parse {
        path: origin.clone(),
        line: 1,
        message: "empty file".into(),
    })?;
    let m = header.split(',').count();
    let mut rows = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m {
            return Err(ScmError::Parse {
                path: origin.clone(),
                line: lineno + 1,
                message: format!("expected {m} columns, got {}", fields.len()),
            });
        }
        let mut row = Vec::with_capacity(m);
        for f in fields {
            row.push(f.trim().parse::<f64>().map_err(|_| ScmError::Parse {
                path: origin.clone(),
                line: lineno + 1,
                message: format!("not a number: {f:?}"),
            })?);
        }
        rows.push(row);
    }
    let n = rows.len();
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// Uncertainty table: one row per band with `mean`, `lower`, `upper` columns
/// per endmember.
pub fn write_uncertainty_csv(
    path: &Path,
    means: &DMatrix<f64>,
    summary: &UncertaintySummary,
) -> Result<()> {
    let m = means.nrows();
    let b = means.ncols();
    let mut out = String::from("band");
    for j in 0..m {
        let _ = write!(out, ",em_{j}_mean,em_{j}_lower,em_{j}_upper");
    }
    out.push('\n');
    for k in 0..b {
        let _ = write!(out, "{k}");
        for j in 0..m {
            let _ = write!(
                out,
                ",{},{},{}",
                fmt_float(means[(j, k)]),
                fmt_float(summary.band_lower()[j][k]),
                fmt_float(summary.band_upper()[j][k]),
            );
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Energy traces of both phases, one row per iteration.
pub fn write_energy_trace_csv(path: &Path, phase1: &[f64], phase2: &[f64]) -> Result<()> {
    let mut out = String::from("phase,iteration,energy\n");
    for (i, e) in phase1.iter().enumerate() {
        let _ = writeln!(out, "1,{i},{}", fmt_float(*e));
    }
    for (i, e) in phase2.iter().enumerate() {
        let _ = writeln!(out, "2,{i},{}", fmt_float(*e));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_bench_csv(path: &Path, rows: &[crate::bench::BenchRow]) -> Result<()> {
    let mut out = String::from(
        "snr_db,algorithm,endmember_error_mean,abundance_error_mean,endmember_error_std,abundance_error_std\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_float(r.snr_db),
            r.algorithm,
            fmt_float(r.endmember_error_mean),
            fmt_float(r.abundance_error_mean),
            fmt_float(r.endmember_error_std),
            fmt_float(r.abundance_error_std),
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[crate::bench::SweepRow]) -> Result<()> {
    let m = rows.first().map_or(0, |r| r.amounts.len());
    let mut out = String::from("rho1_prime");
    for j in 0..m {
        let _ = write!(out, ",uncertainty_em_{j}");
    }
    out.push_str(",endmember_error\n");
    for r in rows {
        let _ = write!(out, "{}", fmt_float(r.rho1_prime));
        for v in &r.amounts {
            let _ = write!(out, ",{}", fmt_float(*v));
        }
        match r.endmember_error {
            Some(e) => {
                let _ = writeln!(out, ",{}", fmt_float(e));
            }
            None => out.push_str(",\n"),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn eval_csv(errors: &AlignedErrors) -> String {
    let perm: Vec<String> = errors.permutation.iter().map(|t| t.to_string()).collect();
    format!(
        "endmember_error,abundance_error,permutation\n{},{},{}\n",
        fmt_float(errors.endmember_error),
        fmt_float(errors.abundance_error),
        perm.join(" "),
    )
}

// ---------------------------------------------------------------------------
// covariance blobs: one f32 little-endian row-major B x B file per endmember
// plus an index file
// ---------------------------------------------------------------------------

pub fn write_covariances(dir: &Path, covariances: &[DMatrix<f64>]) -> Result<()> {
    let mut index = String::from("endmember,file,bands\n");
    for (j, cov) in covariances.iter().enumerate() {
        let name = format!("cov_{j:03}.bin");
        let b = cov.nrows();
        let mut buf = Vec::with_capacity(b * b * 4);
        for r in 0..b {
            for c in 0..b {
                buf.extend_from_slice(&(cov[(r, c)] as f32).to_le_bytes());
            }
        }
        std::fs::write(dir.join(&name), buf)?;
        let _ = writeln!(index, "{j},{name},{b}");
    }
    std::fs::write(dir.join("covariances.idx"), index)?;
    Ok(())
}

pub fn read_covariances(dir: &Path) -> Result<Vec<DMatrix<f64>>> {
    let idx_path = dir.join("covariances.idx");
    let content = std::fs::read_to_string(&idx_path)?;
    let origin = idx_path.display().to_string();
    let mut entries: Vec<(usize, String, usize)> = Vec::new();
    for (lineno, line) in content.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(ScmError::Parse {
                path: origin.clone(),
                line: lineno + 1,
                message: "expected `endmember,file,bands`".into(),
            });
        }
        let parse_usize = |s: &str| {
            s.trim().parse::<usize>().map_err(|_| ScmError::Parse {
                path: origin.clone(),
                line: lineno + 1,
                message: format!("not an integer: {s:?}"),
            })
        };
        entries.push((parse_usize(fields[0])?, fields[1].trim().to_string(), parse_usize(fields[2])?));
    }
    entries.sort_by_key(|e| e.0);
    let mut out = Vec::with_capacity(entries.len());
    for (_, name, b) in entries {
        let bytes = std::fs::read(dir.join(&name))?;
        if bytes.len() != b * b * 4 {
            return Err(ScmError::Parse {
                path: name.clone(),
                line: 1,
                message: format!("expected {} bytes for a {b}x{b} matrix", b * b * 4),
            });
        }
        let vals: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        out.push(DMatrix::from_fn(b, b, |r, c| vals[r * b + c]));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// key-value sidecars
// ---------------------------------------------------------------------------

/// Plain `key = value` metadata file.
pub fn write_key_values(path: &Path, pairs: &[(&str, String)]) -> Result<()> {
    let mut out = String::new();
    for (k, v) in pairs {
        let _ = writeln!(out, "{k} = {v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Flat JSON-style object for the diagnostics file.
pub fn diagnostics_json(pairs: &[(&str, String)]) -> String {
    let mut out = String::from("{\n");
    for (i, (k, v)) in pairs.iter().enumerate() {
        let comma = if i + 1 < pairs.len() { "," } else { "" };
        let _ = writeln!(out, "  \"{k}\": {v}{comma}");
    }
    out.push_str("}\n");
    out
}

// ---------------------------------------------------------------------------
// minimal ENVI reader (BSQ/BIL/BIP, data type 4 = f32 or 5 = f64, byte order 0)
// ---------------------------------------------------------------------------

pub fn read_envi(hdr_path: &Path) -> Result<HsiCube> {
    let origin = hdr_path.display().to_string();
    let content = std::fs::read_to_string(hdr_path)?;
    let mut samples = 0usize; // width
    let mut lines_n = 0usize; // height
    let mut bands = 0usize;
    let mut data_type = 0usize;
    let mut interleave = String::new();
    let mut byte_order = 0usize;
    let mut header_offset = 0usize;
    for line in content.lines() {
        let Some((k, v)) = line.split_once('=') else {
            continue;
        };
        let (k, v) = (k.trim().to_ascii_lowercase(), v.trim());
        match k.as_str() {
            "samples" => samples = v.parse().unwrap_or(0),
            "lines" => lines_n = v.parse().unwrap_or(0),
            "bands" => bands = v.parse().unwrap_or(0),
            "data type" => data_type = v.parse().unwrap_or(0),
            "interleave" => interleave = v.to_ascii_lowercase(),
            "byte order" => byte_order = v.parse().unwrap_or(0),
            "header offset" => header_offset = v.parse().unwrap_or(0),
            _ => {}
        }
    }
    let parse_err = |message: String| ScmError::Parse {
        path: origin.clone(),
        line: 1,
        message,
    };
    if samples == 0 || lines_n == 0 || bands == 0 {
        return Err(parse_err("missing samples/lines/bands".into()));
    }
    if byte_order != 0 {
        return Err(parse_err("only little-endian (byte order = 0) supported".into()));
    }
    let elem = match data_type {
        4 => 4usize,
        5 => 8usize,
        other => return Err(parse_err(format!("unsupported data type {other}"))),
    };
    let data_path = hdr_path.with_extension("");
    let raw = std::fs::read(&data_path)?;
    let n_values = samples * lines_n * bands;
    if raw.len() < header_offset + n_values * elem {
        return Err(parse_err(format!(
            "data file too small: {} bytes for {n_values} values",
            raw.len()
        )));
    }
    let body = &raw[header_offset..header_offset + n_values * elem];
    let value = |idx: usize| -> f64 {
        let off = idx * elem;
        if elem == 4 {
            f32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(body[off..off + 8].try_into().unwrap())
        }
    };
    let n = samples * lines_n;
    let mut data = vec![0.0f64; n * bands];
    for row in 0..lines_n {
        for col in 0..samples {
            let pix = row * samples + col;
            for band in 0..bands {
                let idx = match interleave.as_str() {
                    "bsq" => band * n + pix,
                    "bil" => row * (bands * samples) + band * samples + col,
                    "bip" => pix * bands + band,
                    other => {
                        return Err(parse_err(format!("unsupported interleave {other:?}")))
                    }
                };
                data[pix * bands + band] = value(idx);
            }
        }
    }
    HsiCube::new(lines_n, samples, bands, data)
}

/// Convenience: file names used by the synth/unmix commands.
pub mod names {
    pub const CUBE: &str = "cube.scmc";
    pub const TRUE_ABUNDANCES: &str = "true_abundances.csv";
    pub const TRUE_ENDMEMBERS: &str = "true_endmembers.csv";
    pub const METADATA: &str = "metadata.txt";
    pub const ENDMEMBERS: &str = "endmembers.csv";
    pub const ABUNDANCES: &str = "abundances.csv";
    pub const UNCERTAINTY: &str = "uncertainty.csv";
    pub const ENERGY_TRACE: &str = "energy_trace.csv";
    pub const DIAGNOSTICS: &str = "diagnostics.json";
}
