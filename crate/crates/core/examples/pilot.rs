//! Pilot sweep used to freeze the convergence and hyper-cleaning thresholds
//! of the acceptance suite. `cargo run --release --example pilot`.

use bilevel::analysis::fit_rate;
use bilevel::linalg;
use bilevel::optimizers::{run, Algorithm, RunOptions, ScheduleParams, Variant};
use bilevel::oracle::{BilevelOracle, Point};
use bilevel::problems::quadratic::make_quadratic;
use bilevel::problems::NoiseLevels;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let sigma: f64 = args.get(1).map_or(0.1, |s| s.parse().unwrap());
    let mu: f64 = args.get(2).map_or(0.5, |s| s.parse().unwrap());
    let lg: f64 = args.get(3).map_or(2.0, |s| s.parse().unwrap());
    let which = args.get(4).map_or("moduli", |s| s.as_str()).to_string();
    let iters = 10_000u64;
    let prob = make_quadratic::<f64>(10, 10, mu, lg, NoiseLevels::uniform(sigma), 7).unwrap();
    let c = prob.constants();
    let params = match which.as_str() {
        "theory" => ScheduleParams::theory(&c, iters, Variant::FiniteDifference, 1.0).unwrap(),
        _ => ScheduleParams::from_moduli(&c, iters).unwrap(),
    };
    println!("{params:?}");
    let mut ratios = Vec::new();
    let mut avg = vec![0.0; iters as usize];
    let seeds = 20;
    for seed in 0..seeds {
        let opts = RunOptions { diag_every: 1, ..RunOptions::new(seed) };
        let trace = run(Algorithm::FdeHbo, &prob, &params, &opts).unwrap();
        let g0 = trace.records[0].grad_phi_norm_sq.unwrap();
        let x = &trace.state.current.x;
        let gt = prob.ground_truth(&Point::new(x.clone(), vec![0.0; 10])).unwrap();
        ratios.push(linalg::norm_sq(&gt.grad_phi) / g0);
        for (a, r) in avg.iter_mut().zip(&trace.records) {
            *a += r.grad_phi_norm_sq.unwrap() / seeds as f64;
        }
    }
    let series: Vec<(f64, f64)> = avg.iter().enumerate().map(|(t, v)| (t as f64, *v)).collect();
    let fit = fit_rate(&series, (100.0, 10_000.0)).unwrap();
    println!("sigma={sigma} mu={mu} L={lg} {which}: median ratio {:.3e}, max {:.3e}, slope {:.3} r2 {:.3}",
        median(ratios.clone()), ratios.iter().cloned().fold(0.0, f64::max), fit.slope, fit.r_squared);
    for t in [0usize, 10, 100, 1000, 3000, 9999] {
        println!("  t={t} avg {:.3e}", avg[t]);
    }
}
