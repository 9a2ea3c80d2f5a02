//! Run configuration: a TOML document naming the algorithm, the problem,
//! the schedule and the seeds.
//!
//! ```toml
//! algorithm = "fdehbo"          # fdehbo | fmbo | baseline-fo
//! seeds = [0, 1, 2]
//! diag_every = 10               # default 10
//! batch = 1                     # default 1
//! init = "seeded"               # seeded | zeros
//! output_dir = "runs/demo"      # optional
//!
//! [problem]
//! kind = "quadratic"            # quadratic | logistic | hyper-cleaning | csv-dataset
//! p = 10
//! q = 10
//! mu_g = 2.0
//! l_g = 4.0
//! seed = 7
//! noise = { upper = 0.1, lower = 0.1, ls = 0.1 }
//!
//! [schedule]
//! iterations = 1000
//! rule = "moduli"               # manual | moduli | theory
//! ```
//!
//! Any explicit schedule constant overrides the value the rule derives.
//! Unknown keys anywhere are an error. Every problem kind accepts
//! `first_order_only = true`, which hides its exact second-order products so
//! the run only ever sees gradients; `fmbo` is rejected on such a problem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{BilevelError, Result};
use crate::optimizers::{default_radius, Algorithm, ScheduleParams, Variant, DEFAULT_DELTA};
use crate::oracle::{BilevelOracle, FirstOrderOnly};
use crate::problems::dataset::{dataset_from_csv, synth_gaussian_dataset};
use crate::problems::hypercleaning::{make_hypercleaning, DEFAULT_REG_C};
use crate::problems::logistic::make_logistic;
use crate::problems::quadratic::make_quadratic;
use crate::problems::NoiseLevels;

pub const DEFAULT_DIAG_EVERY: u64 = 10;
pub const DEFAULT_BATCH: u32 = 1;

/// Manual-rule defaults.
pub const DEFAULT_W: f64 = 8.0;
pub const DEFAULT_C_STEP: f64 = 0.5;
pub const DEFAULT_C_ETA: f64 = 4.0;
/// Radius used when the problem certifies no bound on `v*`.
pub const DEFAULT_R_V: f64 = 10.0;

fn default_diag_every() -> u64 {
    DEFAULT_DIAG_EVERY
}

fn default_batch() -> u32 {
    DEFAULT_BATCH
}

fn default_reg_c() -> f64 {
    DEFAULT_REG_C
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    #[default]
    Seeded,
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    #[serde(default = "default_diag_every")]
    pub diag_every: u64,
    #[serde(default = "default_batch")]
    pub batch: u32,
    #[serde(default)]
    pub init: InitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub problem: ProblemConfig,
    pub schedule: ScheduleConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ProblemConfig {
    Quadratic {
        p: usize,
        q: usize,
        mu_g: f64,
        l_g: f64,
        seed: u64,
        #[serde(default)]
        noise: NoiseLevels,
        /// Hide exact second-order products from the optimizers.
        #[serde(default)]
        first_order_only: bool,
    },
    Logistic {
        p: usize,
        q: usize,
        terms: usize,
        mu: f64,
        scale: f64,
        seed: u64,
        #[serde(default)]
        noise: NoiseLevels,
        /// Hide exact second-order products from the optimizers.
        #[serde(default)]
        first_order_only: bool,
    },
    HyperCleaning {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        dim: usize,
        separation: f64,
        data_seed: u64,
        corruption_p: f64,
        #[serde(default = "default_reg_c")]
        reg_c: f64,
        corruption_seed: u64,
        /// Numerical `∇Φ` and error diagnostics (expensive).
        #[serde(default)]
        reference_diagnostics: bool,
        /// Hide exact second-order products from the optimizers.
        #[serde(default)]
        first_order_only: bool,
    },
    CsvDataset {
        path: PathBuf,
        n_train: usize,
        n_val: usize,
        corruption_p: f64,
        #[serde(default = "default_reg_c")]
        reg_c: f64,
        corruption_seed: u64,
        #[serde(default)]
        reference_diagnostics: bool,
        /// Hide exact second-order products from the optimizers.
        #[serde(default)]
        first_order_only: bool,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleRule {
    /// Documented defaults for every constant not given.
    #[default]
    Manual,
    /// [`ScheduleParams::from_moduli`]
    Moduli,
    /// [`ScheduleParams::theory`]
    Theory,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub iterations: u64,
    #[serde(default)]
    pub rule: ScheduleRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_eta_f: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_eta_g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_eta_r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_eps: Option<f64>,
    /// Slack constant of the theory rule (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_bar: Option<f64>,
}

/// A built problem plus the schedule resolved against its constants.
pub struct Resolved {
    pub oracle: Box<dyn BilevelOracle<f64>>,
    pub params: ScheduleParams<f64>,
    pub warnings: Vec<String>,
}

impl std::fmt::Debug for Resolved {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Resolved")
            .field("dims", &self.oracle.dims())
            .field("params", &self.params)
            .field("warnings", &self.warnings)
            .finish()
    }
}

fn config_err(field: &str, msg: impl std::fmt::Display) -> BilevelError {
    BilevelError::Config(format!("{field}: {msg}"))
}

/// Parses and validates a TOML document.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| BilevelError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_config(&text).map_err(|e| match e {
        BilevelError::Config(m) => BilevelError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| BilevelError::Config(e.to_string()))
    }

    /// Checks everything that can be checked without building the problem.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "must list at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(config_err("seeds", "contains duplicates"));
        }
        if self.diag_every == 0 {
            return Err(config_err("diag_every", "must be ≥ 1"));
        }
        if self.batch == 0 {
            return Err(config_err("batch", "must be ≥ 1"));
        }
        if self.schedule.iterations == 0 {
            return Err(config_err("schedule.iterations", "must be ≥ 1"));
        }
        let s = &self.schedule;
        let named = [
            ("schedule.w", s.w),
            ("schedule.c_beta", s.c_beta),
            ("schedule.c_lambda", s.c_lambda),
            ("schedule.c_eta_f", s.c_eta_f),
            ("schedule.c_eta_g", s.c_eta_g),
            ("schedule.c_eta_r", s.c_eta_r),
            ("schedule.r_v", s.r_v),
            ("schedule.delta_eps", s.delta_eps),
            ("schedule.c_bar", s.c_bar),
        ];
        for (name, v) in named {
            if let Some(v) = v {
                if !(v > 0.0) || !v.is_finite() {
                    return Err(config_err(name, format!("must be positive and finite, got {v}")));
                }
            }
        }
        if let Some(w) = s.w {
            if w < 1.0 {
                return Err(config_err("schedule.w", format!("must be ≥ 1, got {w}")));
            }
        }
        self.problem.validate()?;
        if self.algorithm.needs_second_order() && !self.problem.has_second_order() {
            return Err(config_err(
                "algorithm",
                format!(
                    "{} needs exact Hessian/Jacobian-vector products, which problem kind {} does not provide",
                    self.algorithm,
                    self.problem.kind()
                ),
            ));
        }
        Ok(())
    }

    /// Builds the problem and resolves the schedule.
    pub fn resolve(&self) -> Result<Resolved> {
        self.validate()?;
        let oracle = self.problem.build()?;
        if self.algorithm.needs_second_order() && !oracle.capabilities().second_order {
            return Err(config_err("algorithm", "problem lacks second-order capability"));
        }
        let (params, warnings) = self.schedule.resolve(oracle.as_ref())?;
        Ok(Resolved {
            oracle,
            params,
            warnings,
        })
    }
}

impl ProblemConfig {
    pub fn kind(&self) -> &'static str {
        match self {
            ProblemConfig::Quadratic { .. } => "quadratic",
            ProblemConfig::Logistic { .. } => "logistic",
            ProblemConfig::HyperCleaning { .. } => "hyper-cleaning",
            ProblemConfig::CsvDataset { .. } => "csv-dataset",
        }
    }

    /// Every shipped kind provides exact products unless `first_order_only` is set.
    pub fn has_second_order(&self) -> bool {
        let restricted = match self {
            ProblemConfig::Quadratic { first_order_only, .. }
            | ProblemConfig::Logistic { first_order_only, .. }
            | ProblemConfig::HyperCleaning { first_order_only, .. }
            | ProblemConfig::CsvDataset { first_order_only, .. } => *first_order_only,
        };
        !restricted
    }

    fn validate(&self) -> Result<()> {
        let noise_ok = |n: &NoiseLevels| {
            if n.is_valid() {
                Ok(())
            } else {
                Err(config_err("problem.noise", "standard deviations must be finite and ≥ 0"))
            }
        };
        match self {
            ProblemConfig::Quadratic { p, q, mu_g, l_g, noise, .. } => {
                if *p == 0 || *q == 0 {
                    return Err(config_err("problem.p/q", "dimensions must be ≥ 1"));
                }
                if !(*mu_g > 0.0) || !(l_g >= mu_g) || !l_g.is_finite() {
                    return Err(config_err("problem.mu_g/l_g", "need 0 < mu_g ≤ l_g"));
                }
                noise_ok(noise)
            }
            ProblemConfig::Logistic { p, q, terms, mu, scale, noise, .. } => {
                if *p == 0 || *q == 0 || *terms == 0 {
                    return Err(config_err("problem.p/q/terms", "must be ≥ 1"));
                }
                if !(*mu > 0.0) || !mu.is_finite() {
                    return Err(config_err("problem.mu", "must be positive"));
                }
                if !(*scale > 0.0) || !scale.is_finite() {
                    return Err(config_err("problem.scale", "must be positive"));
                }
                noise_ok(noise)
            }
            ProblemConfig::HyperCleaning { corruption_p, reg_c, separation, .. } => {
                check_cleaning(*corruption_p, *reg_c)?;
                if !(*separation > 0.0) || !separation.is_finite() {
                    return Err(config_err("problem.separation", "must be positive"));
                }
                Ok(())
            }
            ProblemConfig::CsvDataset { corruption_p, reg_c, .. } => check_cleaning(*corruption_p, *reg_c),
        }
    }

    pub fn build(&self) -> Result<Box<dyn BilevelOracle<f64>>> {
        let oracle = self.build_full()?;
        Ok(if self.has_second_order() {
            oracle
        } else {
            Box::new(FirstOrderOnly(oracle))
        })
    }

    fn build_full(&self) -> Result<Box<dyn BilevelOracle<f64>>> {
        Ok(match self {
            ProblemConfig::Quadratic { p, q, mu_g, l_g, seed, noise, .. } => {
                Box::new(make_quadratic(*p, *q, *mu_g, *l_g, *noise, *seed)?)
            }
            ProblemConfig::Logistic { p, q, terms, mu, scale, seed, noise, .. } => {
                Box::new(make_logistic(*p, *q, *terms, *mu, *scale, *noise, *seed)?)
            }
            ProblemConfig::HyperCleaning {
                n_train,
                n_val,
                n_test,
                dim,
                separation,
                data_seed,
                corruption_p,
                reg_c,
                corruption_seed,
                reference_diagnostics,
                ..
            } => {
                let ds = synth_gaussian_dataset(*n_train, *n_val, *n_test, *dim, *separation, *data_seed)?;
                Box::new(
                    make_hypercleaning(&ds, *corruption_p, *reg_c, *corruption_seed)?
                        .with_numerical_reference(*reference_diagnostics),
                )
            }
            ProblemConfig::CsvDataset {
                path,
                n_train,
                n_val,
                corruption_p,
                reg_c,
                corruption_seed,
                reference_diagnostics,
                ..
            } => {
                let ds = dataset_from_csv(path, *n_train, *n_val)?;
                Box::new(
                    make_hypercleaning(&ds, *corruption_p, *reg_c, *corruption_seed)?
                        .with_numerical_reference(*reference_diagnostics),
                )
            }
        })
    }
}

fn check_cleaning(corruption_p: f64, reg_c: f64) -> Result<()> {
    if !(0.0..1.0).contains(&corruption_p) {
        return Err(config_err("problem.corruption_p", "must lie in [0, 1)"));
    }
    if !(reg_c > 0.0) || !reg_c.is_finite() {
        return Err(config_err("problem.reg_c", "must be positive"));
    }
    Ok(())
}

impl ScheduleConfig {
    /// Resolves the rule against the problem's certified constants and
    /// applies explicit overrides. Returns the parameters and any warnings.
    pub fn resolve(&self, oracle: &dyn BilevelOracle<f64>) -> Result<(ScheduleParams<f64>, Vec<String>)> {
        let constants = oracle.constants();
        let mut warnings = Vec::new();
        let mut params = match self.rule {
            ScheduleRule::Manual => ScheduleParams {
                w: DEFAULT_W,
                c_beta: DEFAULT_C_STEP,
                c_lambda: DEFAULT_C_STEP,
                c_eta_f: DEFAULT_C_ETA,
                c_eta_g: DEFAULT_C_ETA,
                c_eta_r: DEFAULT_C_ETA,
                r_v: default_radius(&constants).unwrap_or(DEFAULT_R_V),
                delta_eps: DEFAULT_DELTA,
                iterations: self.iterations,
            },
            ScheduleRule::Moduli => ScheduleParams::from_moduli(&constants, self.iterations)
                .map_err(|e| config_err("schedule.rule", e))?,
            ScheduleRule::Theory => {
                let variant = Variant::FiniteDifference;
                ScheduleParams::theory(&constants, self.iterations, variant, self.c_bar.unwrap_or(1.0))
                    .map_err(|e| config_err("schedule.rule", e))?
            }
        };
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut params.w, self.w);
        set(&mut params.c_beta, self.c_beta);
        set(&mut params.c_lambda, self.c_lambda);
        set(&mut params.c_eta_f, self.c_eta_f);
        set(&mut params.c_eta_g, self.c_eta_g);
        set(&mut params.c_eta_r, self.c_eta_r);
        set(&mut params.r_v, self.r_v);
        match (self.delta_eps, params.delta_bound(&constants)) {
            (Some(d), Some(bound)) if d > bound => {
                params.delta_eps = d;
                warnings.push(format!("delta_eps = {d} exceeds the certified bound {bound}"));
            }
            (Some(d), _) => params.delta_eps = d,
            (None, Some(bound)) => params.delta_eps = DEFAULT_DELTA.min(bound),
            (None, None) => {
                params.delta_eps = DEFAULT_DELTA;
                if constants.l_gxy.is_none() {
                    warnings.push(format!(
                        "no certified L_gxy; using default delta_eps = {DEFAULT_DELTA}"
                    ));
                }
            }
        }
        if self.r_v.is_none() && default_radius(&constants).is_err() {
            warnings.push(format!("problem certifies no bound on v*; using r_v = {}", params.r_v));
        }
        if let Some(w) = params.radius_warning(&constants) {
            warnings.push(w);
        }
        params.validate().map_err(|e| config_err("schedule", e))?;
        Ok((params, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
algorithm = "fdehbo"
seeds = [1]

[problem]
kind = "quadratic"
p = 2
q = 3
mu_g = 1.0
l_g = 2.0
seed = 0

[schedule]
iterations = 5
"#;

    #[test]
    fn minimal_document_gets_defaults() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.diag_every, 10);
        assert_eq!(cfg.batch, 1);
        assert_eq!(cfg.init, InitKind::Seeded);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.params.delta_eps, 1e-4);
        assert_eq!(r.params.w, DEFAULT_W);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = MINIMAL.replace("seeds = [1]", "seeds = [1]\nbogus = 3");
        let err = parse_config(&doc).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let doc = MINIMAL.replace("seed = 0", "seed = 0\nsigma = 1.0");
        assert!(parse_config(&doc).is_err());
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_config("algorithm = \n").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn validation_names_the_field() {
        let err = parse_config(&MINIMAL.replace("seeds = [1]", "seeds = []")).unwrap_err();
        assert!(err.to_string().contains("seeds"));
        let err = parse_config(&MINIMAL.replace("iterations = 5", "iterations = 5\nw = 0.5")).unwrap_err();
        assert!(err.to_string().contains("schedule.w"));
        let err = parse_config(&MINIMAL.replace("seeds = [1]", "seeds = [1]\ndiag_every = 0")).unwrap_err();
        assert!(err.to_string().contains("diag_every"));
    }

    #[test]
    fn fmbo_on_first_order_problem_is_rejected() {
        let doc = MINIMAL
            .replace("\"fdehbo\"", "\"fmbo\"")
            .replace("seed = 0", "seed = 0\nfirst_order_only = true");
        let err = parse_config(&doc).unwrap_err().to_string();
        assert!(err.contains("fmbo") && err.contains("Hessian"), "{err}");
        let ok = parse_config(&doc.replace("\"fmbo\"", "\"fdehbo\"")).unwrap();
        assert!(!ok.resolve().unwrap().oracle.capabilities().second_order);
    }

    #[test]
    fn overrides_replace_rule_values() {
        let doc = MINIMAL.replace("iterations = 5", "iterations = 5\nrule = \"moduli\"\nc_beta = 0.125\nr_v = 3.0");
        let r = parse_config(&doc).unwrap().resolve().unwrap();
        assert_eq!(r.params.c_beta, 0.125);
        assert_eq!(r.params.r_v, 3.0);
        assert!(r.warnings.iter().any(|w| w.contains("r_v")));
    }

    #[test]
    fn hyper_cleaning_without_constants_warns() {
        let doc = r#"
algorithm = "fmbo"
seeds = [0]
[problem]
kind = "hyper-cleaning"
n_train = 20
n_val = 10
n_test = 10
dim = 2
separation = 2.0
data_seed = 1
corruption_p = 0.1
corruption_seed = 2
[schedule]
iterations = 3
"#;
        let cfg = parse_config(doc).unwrap();
        let ProblemConfig::HyperCleaning { reg_c, .. } = cfg.problem else { unreachable!() };
        assert_eq!(reg_c, 0.001);
        let r = cfg.resolve().unwrap();
        assert_eq!(r.params.r_v, DEFAULT_R_V);
        assert!(!r.warnings.is_empty());
    }
}
