use scm_core::bench::Algorithm;
use scm_core::solver;
use scm_core::synth::{bundled_spectra, generate_scene, SynthSpec};
use std::time::Instant;

fn main() {
    let (spectra, _) = bundled_spectra();
    for snr in [20.0, 40.0, 60.0] {
        for seed in [3u64, 7] {
            for alg in [Algorithm::Scm, Algorithm::Ncm] {
                let mut spec = SynthSpec::new(spectra.clone());
                spec.snr_db = Some(snr);
                spec.rng_seed = seed;
                let scene = generate_scene(&spec).unwrap();
                let mut c = alg.config(4);
                c.rng_seed = seed;
                let t = Instant::now();
                let r = solver::unmix(&scene.cube, &c).unwrap();
                println!(
                    "snr {snr} seed {seed} {alg}: p1 {} p2 {} quad {:.5} logdet {:.7} conv2 {} ({:?})",
                    r.diagnostics.phase1_iterations,
                    r.diagnostics.phase2_iterations,
                    r.diagnostics.ratio_quad.unwrap(),
                    r.diagnostics.ratio_logdet.unwrap(),
                    r.diagnostics.phase2_converged,
                    t.elapsed()
                );
                // trace monotonicity
                for w in r.energy_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "E2 trace increased");
                }
                for w in r.covariance_energy_trace.windows(2) {
                    assert!(w[1] <= w[0] + 1e-9, "E1 trace increased");
                }
            }
        }
    }
}
