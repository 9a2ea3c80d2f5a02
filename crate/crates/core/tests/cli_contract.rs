use std::path::Path;
use std::process::{Command, Stdio};

use bilevel::cli::{execute, RUN_COLUMNS};
use bilevel::config::{parse_config, InitKind, ProblemConfig, RunConfig, ScheduleConfig, ScheduleRule};
use bilevel::optimizers::Algorithm;
use bilevel::problems::NoiseLevels;
use proptest::prelude::*;

const QUADRATIC: &str = r#"
algorithm = "fdehbo"
seeds = [0, 1, 2]
diag_every = 5

[problem]
kind = "quadratic"
p = 4
q = 3
mu_g = 1.0
l_g = 2.0
seed = 3
noise = { upper = 0.1, lower = 0.1, ls = 0.1 }

[schedule]
iterations = 40
rule = "moduli"
"#;

fn quadratic(iterations: u64) -> RunConfig {
    let mut cfg = parse_config(QUADRATIC).unwrap();
    cfg.schedule.iterations = iterations;
    cfg
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (header, rows)
}

fn column(header: &[String], name: &str) -> usize {
    header.iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn single_iteration_writes_one_row_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let report = execute(&quadratic(1), dir.path(), Some(1)).unwrap();
    assert!(report.all_ok());
    for seed in 0..3 {
        let (header, rows) = read_csv(&dir.path().join(format!("run_{seed}.csv")));
        assert_eq!(header, RUN_COLUMNS);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0][0], "0");
    }
    let (_, summary) = read_csv(&dir.path().join("summary.csv"));
    assert_eq!(summary.len(), 1);
    assert_eq!(summary[0][1], "3");
    assert!(dir.path().join("meta.json").exists());
}

#[test]
fn repeated_runs_write_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = quadratic(40);
    execute(&cfg, a.path(), Some(1)).unwrap();
    execute(&cfg, b.path(), Some(3)).unwrap();
    for name in ["run_0.csv", "run_1.csv", "run_2.csv", "summary.csv"] {
        let x = std::fs::read(a.path().join(name)).unwrap();
        let y = std::fs::read(b.path().join(name)).unwrap();
        assert_eq!(x, y, "{name} differs");
    }
    let (header, rows) = read_csv(&a.path().join("run_0.csv"));
    assert_eq!(rows.len(), 40);
    // diagnostics every 5 iterations and at the last
    let g = column(&header, "grad_phi_norm_sq");
    let filled: Vec<usize> = rows.iter().enumerate().filter(|(_, r)| !r[g].is_empty()).map(|(t, _)| t).collect();
    assert_eq!(filled, vec![0, 5, 10, 15, 20, 25, 30, 35, 39]);
    for row in &rows {
        assert_eq!(row.len(), RUN_COLUMNS.len());
        for cell in row.iter().filter(|c| !c.is_empty()) {
            assert!(cell.parse::<f64>().unwrap().is_finite(), "{cell}");
        }
    }
}

fn final_median_loss(algorithm: Algorithm, iterations: u64) -> f64 {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/configs/hypercleaning.toml")).unwrap();
    let mut cfg = parse_config(&text).unwrap();
    cfg.algorithm = algorithm;
    cfg.schedule.iterations = iterations;
    cfg.diag_every = iterations;
    assert_eq!(cfg.seeds.len(), 5);
    let dir = tempfile::tempdir().unwrap();
    assert!(execute(&cfg, dir.path(), None).unwrap().all_ok());
    let (header, rows) = read_csv(&dir.path().join("summary.csv"));
    let col = column(&header, "outer_loss_median");
    rows.last().unwrap()[col].parse().unwrap()
}

#[test]
fn fdehbo_beats_first_order_baseline_on_hypercleaning() {
    let ours = final_median_loss(Algorithm::FdeHbo, 2000);
    let base = final_median_loss(Algorithm::BaselineFo, 2000);
    assert!(ours < base, "fdehbo {ours} vs baseline {base}");
}

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bilevel"));
    cmd.stdout(Stdio::null());
    cmd
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), QUADRATIC);
    let status = bin().args(["validate"]).arg(&good).status().unwrap();
    assert_eq!(status.code(), Some(0));

    let out = dir.path().join("out");
    let status = bin().arg("run").arg(&good).arg("-o").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert!(out.join("summary.csv").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, QUADRATIC.replace("mu_g = 1.0", "mu_g = -1.0")).unwrap();
    let status = bin().arg("validate").arg(&bad).status().unwrap();
    assert_eq!(status.code(), Some(2));
    let status = bin().arg("run").arg(dir.path().join("missing.toml")).status().unwrap();
    assert_eq!(status.code(), Some(2));

    let fmbo_fo = dir.path().join("fmbo.toml");
    std::fs::write(
        &fmbo_fo,
        QUADRATIC.replace("\"fdehbo\"", "\"fmbo\"").replace("seed = 3\n", "seed = 3\nfirst_order_only = true\n"),
    )
    .unwrap();
    let output = bin().arg("validate").arg(&fmbo_fo).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&output.stderr).contains("Hessian"));

    let diverging = dir.path().join("diverge.toml");
    std::fs::write(
        &diverging,
        QUADRATIC
            .replace("iterations = 40", "iterations = 2000")
            .replace("rule = \"moduli\"", "w = 1.0\nc_beta = 1e6\nc_lambda = 1e6"),
    )
    .unwrap();
    let status = bin().arg("run").arg(&diverging).arg("-o").arg(dir.path().join("d")).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("d/meta.json")).unwrap()).unwrap();
    assert_eq!(meta["runs"][0]["status"], "diverged");
}

#[test]
fn output_directory_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &QUADRATIC.replace("iterations = 40", "iterations = 2"));
    let env_out = dir.path().join("from_env");
    let flag_out = dir.path().join("from_flag");

    let status = bin().arg("run").arg(&cfg).env("BILEVEL_OUTPUT_DIR", &env_out).status().unwrap();
    assert!(status.success());
    assert!(env_out.join("summary.csv").exists());

    let status = bin()
        .arg("run")
        .arg(&cfg)
        .arg("--output")
        .arg(&flag_out)
        .env("BILEVEL_OUTPUT_DIR", dir.path().join("unused"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_out.join("summary.csv").exists());
    assert!(!dir.path().join("unused").exists());

    // without flag or env the default lands in the working directory
    let status = bin()
        .arg("run")
        .arg(&cfg)
        .current_dir(dir.path())
        .env_remove("BILEVEL_OUTPUT_DIR")
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("runs/summary.csv").exists());
}

fn noise() -> impl Strategy<Value = NoiseLevels> {
    (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64).prop_map(|(upper, lower, ls)| NoiseLevels { upper, lower, ls })
}

fn problem() -> impl Strategy<Value = ProblemConfig> {
    prop_oneof![
        (1usize..20, 1usize..20, 0.1..5.0f64, 1.0..3.0f64, 0..i64::MAX as u64, noise(), any::<bool>()).prop_map(
            |(p, q, mu_g, k, seed, noise, first_order_only)| ProblemConfig::Quadratic {
                p,
                q,
                mu_g,
                l_g: mu_g * k,
                seed,
                noise,
                first_order_only,
            }
        ),
        (1usize..20, 1usize..20, 1usize..30, 0.1..5.0f64, 0.1..5.0f64, 0..i64::MAX as u64, noise()).prop_map(
            |(p, q, terms, mu, scale, seed, noise)| ProblemConfig::Logistic {
                p,
                q,
                terms,
                mu,
                scale,
                seed,
                noise,
                first_order_only: false,
            }
        ),
        (10usize..500, 10usize..200, 1usize..10, 0.1..5.0f64, 0..i64::MAX as u64, 0.0..0.5f64, 1e-4..1.0f64, any::<bool>())
            .prop_map(|(n_train, n_val, dim, separation, seed, corruption_p, reg_c, reference_diagnostics)| {
                ProblemConfig::HyperCleaning {
                    n_train,
                    n_val,
                    n_test: n_val,
                    dim,
                    separation,
                    data_seed: seed,
                    corruption_p,
                    reg_c,
                    corruption_seed: seed.wrapping_add(1),
                    reference_diagnostics,
                    first_order_only: false,
                }
            }),
    ]
}

fn schedule() -> impl Strategy<Value = ScheduleConfig> {
    let opt = || prop::option::of(1e-3..1e3f64);
    (
        1u64..100_000,
        prop_oneof![Just(ScheduleRule::Manual), Just(ScheduleRule::Moduli), Just(ScheduleRule::Theory)],
        (opt(), opt(), opt(), opt(), opt()),
        (opt(), opt(), opt(), opt()),
    )
        .prop_map(|(iterations, rule, (w, c_beta, c_lambda, c_eta_f, c_eta_g), (c_eta_r, r_v, delta_eps, c_bar))| {
            ScheduleConfig {
                iterations,
                rule,
                w,
                c_beta,
                c_lambda,
                c_eta_f,
                c_eta_g,
                c_eta_r,
                r_v,
                delta_eps,
                c_bar,
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]
    #[test]
    fn config_survives_toml_round_trip(
        algorithm in prop_oneof![Just(Algorithm::FdeHbo), Just(Algorithm::Fmbo), Just(Algorithm::BaselineFo)],
        seeds in prop::collection::btree_set(0..i64::MAX as u64, 1..6),
        diag_every in 1u64..100,
        batch in 1u32..8,
        zeros in any::<bool>(),
        problem in problem(),
        schedule in schedule(),
    ) {
        prop_assume!(!(algorithm == Algorithm::Fmbo && !problem.has_second_order()));
        let cfg = RunConfig {
            algorithm,
            seeds: seeds.into_iter().collect(),
            diag_every,
            batch,
            init: if zeros { InitKind::Zeros } else { InitKind::Seeded },
            output_dir: None,
            problem,
            schedule,
        };
        let text = cfg.to_toml().unwrap();
        prop_assert_eq!(parse_config(&text).unwrap(), cfg);
    }
}
