// Scratch diagnostics: random-start solve success rates (not shipped).
use cislunar::cr3bp::SystemParams;
use cislunar::halo::HaloFamily;
use cislunar::nlp::{self, SolveStatus, SolverConfig};
use cislunar::transcribe::{DecisionVector, ProblemConfig, ProblemSpec};
use rand::{Rng, SeedableRng};
use rayon::prelude::*;

fn uniform_x(spec: &ProblemSpec, seed: u64) -> DecisionVector {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = spec.bounds();
    let flat: Vec<f64> = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| rng.random_range(*l..=*h))
        .collect();
    DecisionVector::from_flat(spec.layout(), &flat).unwrap()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let variant = args.get(1).map(|s| s.as_str()).unwrap_or("hybrid");
    let n_runs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(12);
    let family = HaloFamily::new(SystemParams::earth_moon());
    let mut cfg = match variant {
        "variable" => ProblemConfig::variable_terminal(0.5),
        _ => ProblemConfig::hybrid(0.8),
    };
    cfg.n_segments = 10;
    let spec = ProblemSpec::new(cfg, &family).unwrap();
    let scfg = SolverConfig {
        max_wall_time_s: 60.0,
        ..SolverConfig::default()
    };

    let t0 = std::time::Instant::now();
    let results: Vec<_> = (0..n_runs as u64)
        .collect::<Vec<_>>()
        .par_iter()
        .map(|seed| {
            let x0 = uniform_x(&spec, *seed);
            let out = nlp::solve(&x0, &spec, &scfg);
            (*seed, out)
        })
        .collect();
    for (seed, out) in &results {
        println!(
            "seed {seed}: {:?} J={:.4} feas={:.2e} kkt={:.2e} inner={} outer={} evals={} {:.1}s{}",
            out.status,
            out.objective,
            out.feas_residual,
            out.kkt_residual,
            out.iterations,
            out.outer_iterations,
            out.n_evals,
            out.wall_time_s,
            out.failure.as_deref().map(|f| format!(" [{f}]")).unwrap_or_default()
        );
    }
    let n_opt = results.iter().filter(|(_, o)| o.status == SolveStatus::Optimal).count();
    let n_feas = results
        .iter()
        .filter(|(_, o)| matches!(o.status, SolveStatus::Optimal | SolveStatus::Feasible))
        .count();
    println!(
        "=== {variant}: optimal {n_opt}/{n_runs}, feasible-or-better {n_feas}/{n_runs}, wall {:?}",
        t0.elapsed()
    );
}
