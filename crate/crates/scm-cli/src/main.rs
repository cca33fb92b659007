//! Command-line interface: synthetic scene generation, unmixing, scoring,
//! the SNR benchmark table, and the pairwise-closeness sweep.
//!
//! Every command exits 0 on success and prints a single-line
//! `error: ...` to stderr on failure. `SCM_THREADS` caps the worker count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use scm_core::bench::{run_benchmark, run_rho1_sweep, Algorithm, SceneShape};
use scm_core::error::ScmError;
use scm_core::io::{self, names};
use scm_core::metrics;
use scm_core::solver;
use scm_core::synth;
use scm_core::types::ScmConfig;
use scm_core::uncertainty;

#[derive(Parser)]
#[command(name = "scm", version, about = "Spatial compositional model unmixing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cube plus ground-truth sidecar files.
    Synth(SynthArgs),
    /// Unmix a cube and write endmembers, abundances, covariances and
    /// uncertainty summaries.
    Unmix(UnmixArgs),
    /// Score an estimate directory against a truth directory.
    Eval(EvalArgs),
    /// SNR benchmark table over seeded synthetic trials.
    Bench(BenchArgs),
    /// Sweep the pairwise-closeness weight and report uncertainty amounts.
    SweepRho1(SweepArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Scene size as HxW, e.g. 40x40.
    #[arg(long, default_value = "40x40")]
    size: String,
    /// Noise level in dB (0..=120).
    #[arg(long, default_value_t = 40.0, allow_negative_numbers = true)]
    snr: f64,
    /// Render without noise (ignores --snr).
    #[arg(long)]
    no_noise: bool,
    /// Boundary blur standard deviation in pixels.
    #[arg(long, default_value_t = 2.0)]
    blur: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Endmember spectra CSV; the bundled synthetic set when omitted.
    #[arg(long)]
    spectra: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct UnmixArgs {
    /// Input cube (SCMC container, or an ENVI .hdr file).
    #[arg(long)]
    cube: PathBuf,
    /// Run configuration file; overrides the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parameter preset.
    #[arg(long, default_value = "scm")]
    preset: String,
    /// Number of endmembers.
    #[arg(short = 'M', long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Clamp negative endmember entries to zero after each update.
    #[arg(long)]
    clamp_r: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory with estimated endmembers.csv and abundances.csv.
    #[arg(long)]
    estimate: PathBuf,
    /// Directory with ground-truth sidecars (from `scm synth`).
    #[arg(long)]
    truth: PathBuf,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated SNR list in dB, e.g. 20,30,40,50,60.
    #[arg(long, default_value = "20,30,40,50,60")]
    snr: String,
    /// Trials per SNR level.
    #[arg(long, default_value_t = 20)]
    trials: usize,
    /// Comma-separated algorithms (scm, ncm).
    #[arg(long, default_value = "scm,ncm")]
    algs: String,
    #[arg(long, default_value = "40x40")]
    size: String,
    #[arg(long, default_value_t = 2.0)]
    blur: f64,
    /// Base seed; trial seeds are derived from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Endmember spectra CSV; the bundled synthetic set when omitted.
    #[arg(long)]
    spectra: Option<PathBuf>,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Input cube (SCMC container).
    #[arg(long)]
    cube: PathBuf,
    /// Comma-separated rho1' values, echoed in input order.
    #[arg(long)]
    rho1: String,
    /// Truth directory (for the endmember-error column and alignment).
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value = "scm")]
    preset: String,
    #[arg(short = 'M', long, default_value_t = 4)]
    endmembers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    configure_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Unmix(args) => cmd_unmix(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bench(args) => cmd_bench(args),
        Command::SweepRho1(args) => cmd_sweep_rho1(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(feature = "parallel")]
fn configure_threads() {
    if let Ok(v) = std::env::var("SCM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

#[cfg(not(feature = "parallel"))]
fn configure_threads() {}

fn parse_size(s: &str) -> Result<(usize, usize), ScmError> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| ScmError::InvalidArgument(format!("--size expects HxW, got {s:?}")))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .map_err(|_| ScmError::InvalidArgument(format!("--size expects HxW, got {s:?}")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>, ScmError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| ScmError::InvalidArgument(format!("bad {what} value {v:?}")))
        })
        .collect()
}

fn load_spectra(path: &Option<PathBuf>) -> Result<(DMatrix<f64>, Vec<String>), ScmError> {
    match path {
        Some(p) => synth::load_spectra_library(p),
        None => Ok(synth::bundled_spectra()),
    }
}

fn read_cube_any(path: &Path) -> Result<scm_core::HsiCube, ScmError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("hdr") => io::read_envi(path),
        _ => io::read_cube(path),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<(), ScmError> {
    let (height, width) = parse_size(&args.size)?;
    let (spectra, spectra_names) = load_spectra(&args.spectra)?;
    let mut spec = synth::SynthSpec::new(spectra.clone());
    spec.height = height;
    spec.width = width;
    spec.blur_sigma = args.blur;
    spec.snr_db = if args.no_noise { None } else { Some(args.snr) };
    spec.rng_seed = args.seed;
    spec.validate()?;

    let scene = synth::generate_scene(&spec)?;
    std::fs::create_dir_all(&args.out)?;
    io::write_cube(&args.out.join(names::CUBE), &scene.cube)?;
    io::write_abundance_csv(&args.out.join(names::TRUE_ABUNDANCES), scene.abundances.matrix())?;
    synth::save_spectra_library(
        &args.out.join(names::TRUE_ENDMEMBERS),
        &spectra,
        &spectra_names,
    )?;
    io::write_key_values(
        &args.out.join(names::METADATA),
        &[
            ("height", height.to_string()),
            ("width", width.to_string()),
            ("bands", spectra.ncols().to_string()),
            ("endmembers", spectra.nrows().to_string()),
            (
                "layout",
                if spectra.nrows() == 4 {
                    "quadrants".into()
                } else {
                    "strips".into()
                },
            ),
            (
                "snr_db",
                match spec.snr_db {
                    Some(s) => s.to_string(),
                    None => "none".into(),
                },
            ),
            ("sigma_y", format!("{:.8e}", scene.sigma_y)),
            ("blur_sigma", args.blur.to_string()),
            ("blur_kernel_radius", ((3.0 * args.blur).ceil() as usize).to_string()),
            ("seed", args.seed.to_string()),
        ],
    )?;
    Ok(())
}

fn preset_config(preset: &str, m: usize) -> Result<ScmConfig, ScmError> {
    match preset.to_ascii_lowercase().as_str() {
        "scm" => Ok(ScmConfig::scm_preset(m)),
        "ncm" => Ok(ScmConfig::ncm_preset(m)),
        other => Err(ScmError::InvalidArgument(format!(
            "unknown preset {other:?} (expected scm or ncm)"
        ))),
    }
}

fn cmd_unmix(args: UnmixArgs) -> Result<(), ScmError> {
    let cube = read_cube_any(&args.cube)?;
    let mut config = match &args.config {
        Some(path) => io::load_config(path)?,
        None => preset_config(&args.preset, args.endmembers)?,
    };
    if args.config.is_none() {
        config.rng_seed = args.seed;
        config.clamp_r = args.clamp_r;
    }
    let result = solver::unmix(&cube, &config)?;
    let summary = uncertainty::summarize_uncertainty(&result.endmembers)?;

    std::fs::create_dir_all(&args.out)?;
    let em_names: Vec<String> = (0..config.num_endmembers).map(|j| format!("em_{j}")).collect();
    synth::save_spectra_library(
        &args.out.join(names::ENDMEMBERS),
        result.endmembers.means(),
        &em_names,
    )?;
    io::write_abundance_csv(&args.out.join(names::ABUNDANCES), result.abundances.matrix())?;
    io::write_covariances(&args.out, result.endmembers.covariances())?;
    io::write_uncertainty_csv(
        &args.out.join(names::UNCERTAINTY),
        result.endmembers.means(),
        &summary,
    )?;
    io::write_energy_trace_csv(
        &args.out.join(names::ENERGY_TRACE),
        &result.energy_trace,
        &result.covariance_energy_trace,
    )?;

    let d = &result.diagnostics;
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:.8e}"),
        None => "null".into(),
    };
    let diag_text = io::diagnostics_json(&[
        ("noise_std", format!("{:.8e}", result.endmembers.noise_std())),
        ("ratio_quad", fmt_opt(d.ratio_quad)),
        ("ratio_logdet", fmt_opt(d.ratio_logdet)),
        ("negative_endmember_entries", d.negative_endmember_entries.to_string()),
        ("gamma_clamped", d.gamma_clamped.to_string()),
        ("phase1_iterations", d.phase1_iterations.to_string()),
        ("phase2_iterations", d.phase2_iterations.to_string()),
        ("phase1_converged", d.phase1_converged.to_string()),
        ("phase2_converged", d.phase2_converged.to_string()),
        ("iterations_used", result.iterations_used.to_string()),
    ]);
    std::fs::write(args.out.join(names::DIAGNOSTICS), diag_text)?;
    Ok(())
}

/// Accepts either the estimate or the truth sidecar naming.
fn read_pair(dir: &Path) -> Result<(DMatrix<f64>, DMatrix<f64>), ScmError> {
    let endmembers = ["endmembers.csv", "true_endmembers.csv"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            ScmError::InvalidArgument(format!("no endmembers CSV found in {}", dir.display()))
        })?;
    let abundances = ["abundances.csv", "true_abundances.csv"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.exists())
        .ok_or_else(|| {
            ScmError::InvalidArgument(format!("no abundances CSV found in {}", dir.display()))
        })?;
    let (r, _) = {
        let content = std::fs::read_to_string(&endmembers)?;
        synth::parse_spectra(&content, &endmembers.display().to_string(), false)?
    };
    let a = io::read_abundance_csv(&abundances)?;
    Ok((r, a))
}

fn cmd_eval(args: EvalArgs) -> Result<(), ScmError> {
    let (est_r, est_a) = read_pair(&args.estimate)?;
    let (true_r, true_a) = read_pair(&args.truth)?;
    let errors = metrics::align_and_score(&est_r, &true_r, &est_a, &true_a)?;
    let csv = io::eval_csv(&errors);
    match &args.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn parse_algorithms(s: &str) -> Result<Vec<Algorithm>, ScmError> {
    s.split(',').map(|v| v.parse::<Algorithm>()).collect()
}

fn cmd_bench(args: BenchArgs) -> Result<(), ScmError> {
    let (height, width) = parse_size(&args.size)?;
    let snrs = parse_list(&args.snr, "--snr")?;
    for &snr in &snrs {
        if !(0.0..=120.0).contains(&snr) {
            return Err(ScmError::InvalidArgument(format!(
                "snr_db must lie in [0, 120], got {snr}"
            )));
        }
    }
    let algorithms = parse_algorithms(&args.algs)?;
    let (spectra, _) = load_spectra(&args.spectra)?;
    let shape = SceneShape {
        height,
        width,
        blur_sigma: args.blur,
    };
    let rows = run_benchmark(&spectra, shape, &snrs, args.trials, &algorithms, args.seed)?;
    match &args.out {
        Some(path) => io::write_bench_csv(path, &rows)?,
        None => {
            let tmp = std::env::temp_dir().join(format!("scm-bench-{}.csv", std::process::id()));
            io::write_bench_csv(&tmp, &rows)?;
            print!("{}", std::fs::read_to_string(&tmp)?);
            let _ = std::fs::remove_file(&tmp);
        }
    }
    Ok(())
}

fn cmd_sweep_rho1(args: SweepArgs) -> Result<(), ScmError> {
    let cube = read_cube_any(&args.cube)?;
    let rho1 = parse_list(&args.rho1, "--rho1")?;
    if rho1.is_empty() {
        return Err(ScmError::InvalidArgument("--rho1 needs at least one value".into()));
    }
    let mut config = preset_config(&args.preset, args.endmembers)?;
    config.rng_seed = args.seed;
    let truth = match &args.truth {
        Some(dir) => Some(read_pair(dir)?.0),
        None => None,
    };
    let rows = run_rho1_sweep(&cube, truth.as_ref(), &rho1, &config)?;
    match &args.out {
        Some(path) => io::write_sweep_csv(path, &rows)?,
        None => {
            let tmp = std::env::temp_dir().join(format!("scm-sweep-{}.csv", std::process::id()));
            io::write_sweep_csv(&tmp, &rows)?;
            print!("{}", std::fs::read_to_string(&tmp)?);
            let _ = std::fs::remove_file(&tmp);
        }
    }
    Ok(())
}
