//! Fully single-loop bilevel optimizers.
//!
//! Every iteration evaluates three recursive-momentum estimators at the
//! snapshot `(x_t, y_t, v_t)` (and, from `t = 1` on, at the previous snapshot
//! under the same sample) and then moves all three blocks once:
//!
//! ```text
//! y ← y − β_t h^g          h^g ≈ ∇_y g
//! v ← Π_{r_v}(v − λ_t h^R) h^R ≈ ∇²_yy g·v − ∇_y f
//! x ← x − α_t h^f          h^f ≈ ∇_x f − ∇²_xy g·v
//! ```
//!
//! [`Algorithm::FdeHbo`] forms the second-order products by central finite
//! differences of gradients; [`Algorithm::Fmbo`] asks the oracle for exact
//! products; [`Algorithm::BaselineFo`] drops the implicit term entirely.
//!
//! Samples are keyed by `(stream, seed, t)`: `ζ` for `h^g`, `ψ` for `h^R`
//! and `ξ` for `h^f`.

pub mod schedule;

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::estimation_errors;
use crate::error::{BilevelError, Result};
use crate::estimators::{self, project_ball, FdParams, MomentumBuffer};
use crate::linalg;
use crate::oracle::{Batched, BilevelOracle, Dims, Point, Sample, SampleKey, Stream};
use crate::scalar::Scalar;

pub use schedule::{default_radius, Schedule, ScheduleParams, Variant, DEFAULT_DELTA};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "fdehbo")]
    FdeHbo,
    #[serde(rename = "fmbo")]
    Fmbo,
    #[serde(rename = "baseline-fo")]
    BaselineFo,
}

impl Algorithm {
    pub fn needs_second_order(self) -> bool {
        self == Algorithm::Fmbo
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FdeHbo => "fdehbo",
            Algorithm::Fmbo => "fmbo",
            Algorithm::BaselineFo => "baseline-fo",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One `(x, y, v)` triple.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Iterate<T> {
    pub fn point(&self) -> Point<T> {
        Point::new(self.x.clone(), self.y.clone())
    }

    fn all_finite(&self) -> bool {
        linalg::all_finite(&self.x) && linalg::all_finite(&self.y) && linalg::all_finite(&self.v)
    }
}

/// Optimizer state after `t` iterations.
///
/// The buffers hold the estimates formed at `previous`, the snapshot the
/// last step started from; `current` is where the next step starts.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub current: Iterate<T>,
    pub previous: Option<Iterate<T>>,
    pub h_g: MomentumBuffer<T>,
    pub h_r: MomentumBuffer<T>,
    pub h_f: MomentumBuffer<T>,
    pub t: u64,
}

const INIT_TAG: u64 = 0x1417;

impl<T: Scalar> OptimizerState<T> {
    /// Starts from `init`, projecting `v` onto the ball of radius `r_v`.
    pub fn new(init: Iterate<T>, dims: Dims, r_v: T) -> Result<Self> {
        if init.x.len() != dims.p || init.y.len() != dims.q || init.v.len() != dims.q {
            return Err(BilevelError::InvalidArgument(format!(
                "initial iterate has dimensions ({}, {}, {}), problem needs ({}, {}, {})",
                init.x.len(),
                init.y.len(),
                init.v.len(),
                dims.p,
                dims.q,
                dims.q
            )));
        }
        if !init.all_finite() {
            return Err(BilevelError::InvalidArgument("initial iterate is not finite".into()));
        }
        let v = project_ball(&init.v, r_v)?;
        Ok(Self {
            current: Iterate { v, ..init },
            previous: None,
            h_g: MomentumBuffer::new(dims.q),
            h_r: MomentumBuffer::new(dims.q),
            h_f: MomentumBuffer::new(dims.p),
            t: 0,
        })
    }

    /// Standard-normal `x`, `y`, `v` drawn from `seed`.
    pub fn seeded(dims: Dims, r_v: T, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(crate::oracle::splitmix64(seed ^ INIT_TAG));
        let x = linalg::standard_normal(&mut rng, dims.p);
        let y = linalg::standard_normal(&mut rng, dims.q);
        let v = linalg::standard_normal(&mut rng, dims.q);
        Self::new(Iterate { x, y, v }, dims, r_v)
    }

    pub fn zeros(dims: Dims, r_v: T) -> Result<Self> {
        let z = Iterate {
            x: linalg::zeros(dims.p),
            y: linalg::zeros(dims.q),
            v: linalg::zeros(dims.q),
        };
        Self::new(z, dims, r_v)
    }

    /// The snapshot the buffers were formed at.
    pub fn buffer_snapshot(&self) -> &Iterate<T> {
        self.previous.as_ref().unwrap_or(&self.current)
    }
}

/// Per-iteration metrics. Schedule values and buffer norms refer to step
/// `t`; diagnostics, when present, are measured at the snapshot `x_t, y_t,
/// v_t` against the buffers formed there.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u64,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub eta_f: f64,
    pub eta_g: f64,
    pub eta_r: f64,
    pub norm_hf: f64,
    pub norm_hg: f64,
    pub norm_hr: f64,
    pub grad_phi_norm_sq: Option<f64>,
    /// Mean of every `grad_phi_norm_sq` measured so far in the run.
    pub grad_phi_running_avg: Option<f64>,
    pub err_y: Option<f64>,
    pub err_v: Option<f64>,
    pub err_f: Option<f64>,
    pub err_g: Option<f64>,
    pub err_r: Option<f64>,
    pub outer_loss: Option<f64>,
}

impl IterationRecord {
    pub fn all_finite(&self) -> bool {
        let fixed = [
            self.alpha,
            self.beta,
            self.lambda,
            self.eta_f,
            self.eta_g,
            self.eta_r,
            self.norm_hf,
            self.norm_hg,
            self.norm_hr,
        ];
        let optional = [
            self.grad_phi_norm_sq,
            self.grad_phi_running_avg,
            self.err_y,
            self.err_v,
            self.err_f,
            self.err_g,
            self.err_r,
            self.outer_loss,
        ];
        fixed.iter().all(|v| v.is_finite()) && optional.iter().flatten().all(|v| v.is_finite())
    }
}

/// Estimates of `∇_y g`, `∇_v R` and the hypergradient at one snapshot.
struct Estimates<T> {
    g: Vec<T>,
    r: Vec<T>,
    f: Vec<T>,
}

struct Keys {
    zeta: Sample,
    psi: Sample,
    xi: Sample,
}

impl Keys {
    fn at(seed: u64, t: u64) -> Self {
        Self {
            zeta: SampleKey::new(Stream::LowerZeta, seed, t).into(),
            psi: SampleKey::new(Stream::LsPsi, seed, t).into(),
            xi: SampleKey::new(Stream::UpperXi, seed, t).into(),
        }
    }
}

fn estimate<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    algorithm: Algorithm,
    oracle: &O,
    it: &Iterate<T>,
    fd: FdParams<T>,
    keys: &Keys,
) -> Result<Estimates<T>> {
    let pt = it.point();
    let g = oracle.grad_g_y(&pt, keys.zeta)?;
    let (r, f) = match algorithm {
        Algorithm::FdeHbo => (
            estimators::fo_ls_gradient(oracle, &pt, &it.v, fd, keys.psi)?,
            estimators::fo_hypergradient(oracle, &pt, &it.v, fd, keys.xi)?,
        ),
        Algorithm::Fmbo => (
            estimators::exact_ls_gradient(oracle, &pt, &it.v, keys.psi)?,
            estimators::exact_hypergradient_surrogate(oracle, &pt, &it.v, keys.xi)?,
        ),
        Algorithm::BaselineFo => (linalg::zeros(it.v.len()), oracle.grad_f_x(&pt, keys.xi)?),
    };
    Ok(Estimates { g, r, f })
}

fn eta_for<T: Scalar>(buf: &MomentumBuffer<T>, eta: T) -> T {
    if buf.is_initialized() {
        eta
    } else {
        T::one()
    }
}

fn divergence(t: u64, err: BilevelError) -> BilevelError {
    match err {
        BilevelError::NumericalOverflow(detail) => BilevelError::Divergence { iteration: t, detail },
        other => other,
    }
}

/// One iteration of `algorithm`. On error the state is left untouched.
pub fn step<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    algorithm: Algorithm,
    state: &mut OptimizerState<T>,
    oracle: &O,
    params: &ScheduleParams<T>,
    seed: u64,
) -> Result<IterationRecord> {
    if algorithm.needs_second_order() && !oracle.capabilities().second_order {
        return Err(BilevelError::UnsupportedCapability(
            "fmbo needs exact Hessian- and Jacobian-vector products".into(),
        ));
    }
    let t = state.t;
    let fd = FdParams::new(params.delta_eps)?;
    let sched = params.schedule_at(t);
    let keys = Keys::at(seed, t);
    let cur = &state.current;
    let now = estimate(algorithm, oracle, cur, fd, &keys).map_err(|e| divergence(t, e))?;

    let mut h_g = state.h_g.clone();
    let mut h_r = state.h_r.clone();
    let mut h_f = state.h_f.clone();
    let next = if algorithm == Algorithm::BaselineFo {
        h_g.set(now.g);
        h_f.set(now.f);
        Iterate {
            x: linalg::axpy(&cur.x, -sched.alpha, h_f.value()),
            y: linalg::axpy(&cur.y, -sched.beta, h_g.value()),
            v: cur.v.clone(),
        }
    } else {
        let prev = match &state.previous {
            Some(p) => estimate(algorithm, oracle, p, fd, &keys).map_err(|e| divergence(t, e))?,
            None => Estimates {
                g: now.g.clone(),
                r: now.r.clone(),
                f: now.f.clone(),
            },
        };
        let update = |buf: &mut MomentumBuffer<T>, eta: T, a: &[T], b: &[T]| {
            buf.update(eta_for(buf, eta), a, b).map_err(|e| divergence(t, e))
        };
        update(&mut h_g, sched.eta_g, &now.g, &prev.g)?;
        update(&mut h_r, sched.eta_r, &now.r, &prev.r)?;
        update(&mut h_f, sched.eta_f, &now.f, &prev.f)?;
        let w = linalg::axpy(&cur.v, -sched.lambda, h_r.value());
        Iterate {
            x: linalg::axpy(&cur.x, -sched.alpha, h_f.value()),
            y: linalg::axpy(&cur.y, -sched.beta, h_g.value()),
            v: project_ball(&w, params.r_v).map_err(|e| divergence(t, e))?,
        }
    };
    if !next.all_finite() {
        return Err(BilevelError::Divergence {
            iteration: t,
            detail: "iterate became non-finite".into(),
        });
    }
    let record = IterationRecord {
        t,
        alpha: sched.alpha.as_f64(),
        beta: sched.beta.as_f64(),
        lambda: sched.lambda.as_f64(),
        eta_f: sched.eta_f.as_f64(),
        eta_g: sched.eta_g.as_f64(),
        eta_r: sched.eta_r.as_f64(),
        norm_hf: linalg::norm(h_f.value()).as_f64(),
        norm_hg: linalg::norm(h_g.value()).as_f64(),
        norm_hr: linalg::norm(h_r.value()).as_f64(),
        ..Default::default()
    };
    let snapshot = std::mem::replace(&mut state.current, next);
    state.previous = Some(snapshot);
    state.h_g = h_g;
    state.h_r = h_r;
    state.h_f = h_f;
    state.t += 1;
    Ok(record)
}

/// One FdeHBO iteration: finite-difference products, first-order oracle only.
pub fn fdehbo_step<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    state: &mut OptimizerState<T>,
    oracle: &O,
    params: &ScheduleParams<T>,
    seed: u64,
) -> Result<IterationRecord> {
    step(Algorithm::FdeHbo, state, oracle, params, seed)
}

/// One FMBO iteration: exact Hessian- and Jacobian-vector products.
pub fn fmbo_step<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    state: &mut OptimizerState<T>,
    oracle: &O,
    params: &ScheduleParams<T>,
    seed: u64,
) -> Result<IterationRecord> {
    step(Algorithm::Fmbo, state, oracle, params, seed)
}

/// Alternating SGD on `g` in `y` and on `f` in `x`, ignoring the implicit
/// dependence of `y*` on `x`.
pub fn baseline_fo_step<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    state: &mut OptimizerState<T>,
    oracle: &O,
    params: &ScheduleParams<T>,
    seed: u64,
) -> Result<IterationRecord> {
    step(Algorithm::BaselineFo, state, oracle, params, seed)
}

/// Starting point of a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Init<T> {
    Zeros,
    /// Standard-normal draw from this seed.
    Seeded(u64),
    Given(Iterate<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions<T> {
    pub seed: u64,
    pub init: Init<T>,
    /// Diagnostics every this many iterations (and at the last one); 0 disables them.
    pub diag_every: u64,
    pub batch: u32,
}

impl<T> RunOptions<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            init: Init::Seeded(seed),
            diag_every: 0,
            batch: 1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunTrace<T> {
    pub records: Vec<IterationRecord>,
    pub state: OptimizerState<T>,
}

/// A run that stopped early; `trace` holds everything recorded before the failure.
#[derive(Debug)]
pub struct RunFailure<T> {
    pub error: BilevelError,
    pub trace: RunTrace<T>,
}

impl<T> fmt::Display for RunFailure<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} after {} records", self.error, self.trace.records.len())
    }
}

impl<T: fmt::Debug> std::error::Error for RunFailure<T> {}

fn fill_diagnostics<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    rec: &mut IterationRecord,
    state: &OptimizerState<T>,
    oracle: &O,
    phi_sum: &mut f64,
    phi_count: &mut u64,
) -> Result<()> {
    let snap = state.buffer_snapshot();
    rec.outer_loss = Some(oracle.f_value(&snap.point(), Sample::Full)?.as_f64());
    if oracle.capabilities().ground_truth {
        let errs = estimation_errors(state, oracle)?;
        rec.grad_phi_norm_sq = Some(errs.grad_phi_norm_sq);
        rec.err_y = Some(errs.err_y);
        rec.err_v = Some(errs.err_v);
        rec.err_g = Some(errs.err_g);
        rec.err_f = errs.err_f;
        rec.err_r = errs.err_r;
        *phi_sum += errs.grad_phi_norm_sq;
        *phi_count += 1;
        rec.grad_phi_running_avg = Some(*phi_sum / *phi_count as f64);
    }
    Ok(())
}

/// Runs `params.iterations` steps of `algorithm`.
pub fn run<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    algorithm: Algorithm,
    oracle: &O,
    params: &ScheduleParams<T>,
    opts: &RunOptions<T>,
) -> std::result::Result<RunTrace<T>, Box<RunFailure<T>>> {
    let batched = match Batched::new(oracle, opts.batch) {
        Ok(b) => b,
        Err(error) => return Err(early_failure(error, oracle)),
    };
    let setup = params.validate().and_then(|_| {
        let dims = oracle.dims();
        match &opts.init {
            Init::Zeros => OptimizerState::zeros(dims, params.r_v),
            Init::Seeded(s) => OptimizerState::seeded(dims, params.r_v, *s),
            Init::Given(it) => OptimizerState::new(it.clone(), dims, params.r_v),
        }
    });
    let mut state = match setup {
        Ok(s) => s,
        Err(error) => return Err(early_failure(error, oracle)),
    };
    let mut records = Vec::with_capacity(params.iterations as usize);
    let (mut phi_sum, mut phi_count) = (0.0, 0u64);
    for t in 0..params.iterations {
        let outcome = step(algorithm, &mut state, &batched, params, opts.seed).and_then(|mut rec| {
            let last = t + 1 == params.iterations;
            if opts.diag_every > 0 && (t % opts.diag_every == 0 || last) {
                fill_diagnostics(&mut rec, &state, oracle, &mut phi_sum, &mut phi_count)?;
            }
            if rec.all_finite() {
                Ok(rec)
            } else {
                Err(BilevelError::Divergence {
                    iteration: t,
                    detail: "non-finite metric".into(),
                })
            }
        });
        match outcome {
            Ok(rec) => records.push(rec),
            Err(error) => {
                return Err(Box::new(RunFailure {
                    error,
                    trace: RunTrace { records, state },
                }))
            }
        }
    }
    Ok(RunTrace { records, state })
}

fn early_failure<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    error: BilevelError,
    oracle: &O,
) -> Box<RunFailure<T>> {
    let dims = oracle.dims();
    let state = OptimizerState {
        current: Iterate {
            x: linalg::zeros(dims.p),
            y: linalg::zeros(dims.q),
            v: linalg::zeros(dims.q),
        },
        previous: None,
        h_g: MomentumBuffer::new(dims.q),
        h_r: MomentumBuffer::new(dims.q),
        h_f: MomentumBuffer::new(dims.p),
        t: 0,
    };
    Box::new(RunFailure {
        error,
        trace: RunTrace {
            records: Vec::new(),
            state,
        },
    })
}
