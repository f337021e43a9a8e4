//! Fits every estimator to one simulated replication and reports timings.
//!
//! `cargo run --release --example single_replication -- <case> <lambda> <seed> [rep]`

use std::time::Instant;

use plsp::simulation::{generate_scenario, Case, ScenarioConfig};
use plsp::{fit, select_bandwidth, FitOptions, Method};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let case = Case::try_from(args.first().map_or(Ok(2), |s| s.parse())?)?;
    let lambda: f64 = args.get(1).map_or(Ok(0.2), |s| s.parse())?;
    let seed: u64 = args.get(2).map_or(Ok(1), |s| s.parse())?;
    let rep: usize = args.get(3).map_or(Ok(0), |s| s.parse())?;

    let cfg = ScenarioConfig::new(case, lambda, 1, seed);
    let (data, w) = generate_scenario(&cfg, rep)?;
    let t = Instant::now();
    let b = select_bandwidth(&data)?;
    println!("bandwidth {:.4} ({:.2?})", b.value(), t.elapsed());
    let options = FitOptions {
        bandwidth: Some(b),
        ..FitOptions::default()
    };
    for method in Method::ALL {
        let t = Instant::now();
        match fit(method, &data, &w, &options) {
            Ok(f) => {
                let evals: usize = f.optimizer_trace.iter().map(|s| s.evaluations).sum();
                println!(
                    "{method:6} {:?} q={:.3e} evals={evals} unconverged={} ({:.2?})",
                    f.parameter_names.iter().zip(&f.estimates).map(|(n, v)| format!("{n}={v:.3}")).collect::<Vec<_>>(),
                    f.q_min,
                    f.unconverged_profiles,
                    t.elapsed()
                );
            }
            Err(e) => println!("{method:6} failed: {e} ({:.2?})", t.elapsed()),
        }
    }
    Ok(())
}
