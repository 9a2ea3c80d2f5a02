//! Hyper-cleaning pilot: outer loss and clean-test accuracy per algorithm.
//! `cargo run --release --example pilot_hc -- SEP W C_BETA C_LAMBDA C_ETA`

use bilevel::optimizers::{run, Algorithm, Init, RunOptions, ScheduleParams};
use bilevel::oracle::{BilevelOracle, Point, Sample};
use bilevel::problems::dataset::synth_gaussian_dataset;
use bilevel::problems::hypercleaning::{make_hypercleaning, DEFAULT_REG_C};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    let a: Vec<f64> = std::env::args().skip(1).map(|s| s.parse().unwrap()).collect();
    let (sep, w, cb, cl, ce) = (a[0], a[1], a[2], a[3], a[4]);
    let ds = synth_gaussian_dataset::<f64>(500, 200, 500, 5, sep, 1).unwrap();
    let hc = make_hypercleaning(&ds, 0.1, DEFAULT_REG_C, 2).unwrap();
    let w_ref = hc.solve_lower(&vec![0.0; 500], 1e-10).unwrap();
    println!("corrupted {} ref acc {:.4} ref val loss {:.4}", hc.corrupted_count(), hc.test_accuracy(&w_ref), hc.val_loss(&w_ref));
    let oracle_lambda: Vec<f64> = hc.corrupted().iter().map(|&c| if c { -30.0 } else { 30.0 }).collect();
    let w_clean = hc.solve_lower(&oracle_lambda, 1e-10).unwrap();
    println!("oracle-cleaned acc {:.4} val loss {:.4}", hc.test_accuracy(&w_clean), hc.val_loss(&w_clean));
    let params = ScheduleParams { w, c_beta: cb, c_lambda: cl, c_eta_f: ce, c_eta_g: ce, c_eta_r: ce, r_v: 100.0, delta_eps: 1e-4, iterations: 5000 };
    for alg in [Algorithm::FdeHbo, Algorithm::Fmbo, Algorithm::BaselineFo] {
        let mut loss = Vec::new();
        let mut acc = Vec::new();
        let mut acc_star = Vec::new();
        let mut cleaned = Vec::new();
        for seed in 0..5 {
            let opts = RunOptions { init: Init::Zeros, ..RunOptions::new(seed) };
            let tr = run(alg, &hc, &params, &opts).unwrap();
            let s = &tr.state.current;
            loss.push(hc.f_value(&Point::new(s.x.clone(), s.y.clone()), Sample::Full).unwrap());
            acc.push(hc.test_accuracy(&s.y));
            let ws = hc.solve_lower(&s.x, 1e-10).unwrap();
            acc_star.push(hc.test_accuracy(&ws));
            let corrupt_mean: f64 = s.x.iter().zip(hc.corrupted()).filter(|(_, &c)| c).map(|(x, _)| *x).sum::<f64>() / hc.corrupted_count() as f64;
            let clean_mean: f64 = s.x.iter().zip(hc.corrupted()).filter(|(_, &c)| !c).map(|(x, _)| *x).sum::<f64>() / (500 - hc.corrupted_count()) as f64;
            cleaned.push(clean_mean - corrupt_mean);
        }
        println!("{alg}: loss {:.5} acc {:.4} acc(w*) {:.4} λ gap {:.3}", median(loss), median(acc), median(acc_star), median(cleaned));
    }
}
