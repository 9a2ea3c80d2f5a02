//! The problem contract consumed by every optimizer.
//!
//! A bilevel problem exposes stochastic first-order gradients of the upper
//! objective `f(x, y; ξ)` and the lower objective `g(x, y; ζ)`. Samples are
//! addressed by a [`SampleKey`] rather than drawn from a stateful generator,
//! so two evaluations at different points under one key see the same sample.
//! That is what the recursive-momentum estimators rely on.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{BilevelError, Result};
use crate::linalg;
use crate::scalar::Scalar;

/// Independent sample streams, one per estimator family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stream {
    /// Upper-level samples ξ (hypergradient estimator).
    UpperXi,
    /// Lower-level samples ζ (y-update estimator).
    LowerZeta,
    /// Linear-system samples ψ (v-update estimator).
    LsPsi,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::UpperXi => 0x5849,
            Stream::LowerZeta => 0x5a45,
            Stream::LsPsi => 0x5053,
        }
    }
}

/// Deterministic address of one stochastic sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleKey {
    pub stream: Stream,
    pub seed: u64,
    pub index: u64,
    pub slot: u32,
}

impl SampleKey {
    pub fn new(stream: Stream, seed: u64, index: u64) -> Self {
        Self {
            stream,
            seed,
            index,
            slot: 0,
        }
    }

    pub fn with_slot(self, slot: u32) -> Self {
        Self { slot, ..self }
    }

    /// 64-bit digest of the key, salted with `tag`; slot included.
    pub fn digest(&self, tag: u64) -> u64 {
        let mut h = splitmix64(self.seed ^ 0x9e37_79b9_7f4a_7c15);
        h = splitmix64(h ^ self.stream.tag());
        h = splitmix64(h ^ self.index);
        h = splitmix64(h ^ u64::from(self.slot));
        splitmix64(h ^ tag)
    }

    /// Digest that ignores the slot, so consecutive slots can index a shared offset.
    pub fn family_digest(&self, tag: u64) -> u64 {
        self.with_slot(u32::MAX).digest(tag)
    }

    /// Fresh generator for the sub-stream `tag` of this key.
    pub fn rng(&self, tag: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.digest(tag))
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Which sample an oracle query evaluates: the population (noiseless,
/// full-batch) objective or one keyed stochastic draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sample {
    Full,
    Key(SampleKey),
}

impl From<SampleKey> for Sample {
    fn from(k: SampleKey) -> Self {
        Sample::Key(k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: Vec<T>, y: Vec<T>) -> Self {
        Self { x, y }
    }

    /// Same `x`, `y` shifted by `s·v`.
    pub fn shift_y(&self, s: T, v: &[T]) -> Self {
        Self {
            x: self.x.clone(),
            y: linalg::axpy(&self.y, s, v),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub p: usize,
    pub q: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Capabilities {
    /// Exact Hessian- and Jacobian-vector products.
    pub second_order: bool,
    /// Closed-form `y*`, `v*`, `Φ` and `∇Φ`.
    pub ground_truth: bool,
}

/// Regularity constants a problem can certify. Squared-norm bounds follow
/// the usual convention: `‖∇_y f‖² ≤ c_fy`, `‖∇²_{xy} g‖² ≤ c_gxy`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProblemConstants<T> {
    pub mu_g: Option<T>,
    pub l_g: Option<T>,
    pub l_gxy: Option<T>,
    pub l_gyy: Option<T>,
    pub l_fx: Option<T>,
    pub l_fy: Option<T>,
    pub c_fy: Option<T>,
    pub c_gxy: Option<T>,
    /// Radius of the `y`-ball over which `c_fy` holds (`None` = everywhere).
    pub y_radius: Option<T>,
}

impl<T: Scalar> ProblemConstants<T> {
    pub fn validate(&self) -> Result<()> {
        if let Some(mu) = self.mu_g {
            if !(mu > T::zero()) || !mu.is_finite() {
                return Err(BilevelError::InvalidArgument(format!(
                    "strong-convexity modulus must be positive, got {mu}"
                )));
            }
        }
        let rest = [
            self.l_g, self.l_gxy, self.l_gyy, self.l_fx, self.l_fy, self.c_fy, self.c_gxy,
        ];
        if rest.iter().flatten().any(|c| *c < T::zero() || !c.is_finite()) {
            return Err(BilevelError::InvalidArgument(
                "regularity constants must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    /// Projection radius `C_fy / μ_g` when both constants are certified.
    pub fn default_radius(&self) -> Option<T> {
        match (self.c_fy, self.mu_g) {
            (Some(c), Some(mu)) if c > T::zero() => Some(c / mu),
            _ => None,
        }
    }
}

/// Analytic solution data at a point.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth<T> {
    /// `y*(x)`
    pub y_star: Vec<T>,
    /// `[∇²_yy g(x,y)]⁻¹ ∇_y f(x,y)` at the queried `(x, y)`
    pub v_star: Vec<T>,
    pub phi: T,
    pub grad_phi: Vec<T>,
}

/// Kinds of oracle queries, used for argument validation and call accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Query {
    FValue,
    GValue,
    GradFx,
    GradFy,
    GradGx,
    GradGy,
    HessGyyVec,
    JacGxyVec,
}

impl Query {
    pub fn is_second_order(self) -> bool {
        matches!(self, Query::HessGyyVec | Query::JacGxyVec)
    }

    pub fn is_upper(self) -> bool {
        matches!(self, Query::FValue | Query::GradFx | Query::GradFy)
    }

    fn allowed_streams(self) -> &'static [Stream] {
        use Stream::*;
        match self {
            Query::FValue | Query::GValue => &[UpperXi, LowerZeta, LsPsi],
            Query::GradFx | Query::GradGx | Query::JacGxyVec => &[UpperXi],
            Query::GradFy | Query::HessGyyVec => &[LsPsi],
            Query::GradGy => &[LowerZeta, LsPsi],
        }
    }
}

/// Shared argument checks every oracle implementation runs first.
pub fn check_query<T: Scalar>(
    dims: Dims,
    pt: &Point<T>,
    v: Option<&[T]>,
    sample: Sample,
    query: Query,
) -> Result<()> {
    if pt.x.len() != dims.p || pt.y.len() != dims.q {
        return Err(BilevelError::InvalidArgument(format!(
            "{query:?}: point has dims (p={}, q={}), problem expects (p={}, q={})",
            pt.x.len(),
            pt.y.len(),
            dims.p,
            dims.q
        )));
    }
    if let Some(v) = v {
        if v.len() != dims.q {
            return Err(BilevelError::InvalidArgument(format!(
                "{query:?}: direction has length {}, expected {}",
                v.len(),
                dims.q
            )));
        }
    }
    if let Sample::Key(key) = sample {
        if !query.allowed_streams().contains(&key.stream) {
            return Err(BilevelError::ContractViolation(format!(
                "{query:?} queried under stream {:?}",
                key.stream
            )));
        }
    }
    Ok(())
}

pub(crate) fn unsupported<T>(what: &str) -> Result<T> {
    Err(BilevelError::UnsupportedCapability(what.to_string()))
}

/// Stochastic bilevel problem `min_x f(x, y*(x))`, `y*(x) = argmin_y g(x, y)`.
///
/// Implementations must be pure functions of `(point, sample)`.
pub trait BilevelOracle<T: Scalar>: Send + Sync {
    fn dims(&self) -> Dims;

    fn capabilities(&self) -> Capabilities;

    fn constants(&self) -> ProblemConstants<T> {
        ProblemConstants::default()
    }

    fn f_value(&self, pt: &Point<T>, sample: Sample) -> Result<T>;

    fn g_value(&self, pt: &Point<T>, sample: Sample) -> Result<T>;

    fn grad_f_x(&self, pt: &Point<T>, sample: Sample) -> Result<Vec<T>>;

    fn grad_f_y(&self, pt: &Point<T>, sample: Sample) -> Result<Vec<T>>;

    fn grad_g_x(&self, pt: &Point<T>, sample: Sample) -> Result<Vec<T>>;

    fn grad_g_y(&self, pt: &Point<T>, sample: Sample) -> Result<Vec<T>>;

    fn hess_g_yy_vec(&self, _pt: &Point<T>, _v: &[T], _sample: Sample) -> Result<Vec<T>> {
        unsupported("Hessian-vector products")
    }

    fn jac_g_xy_vec(&self, _pt: &Point<T>, _v: &[T], _sample: Sample) -> Result<Vec<T>> {
        unsupported("Jacobian-vector products")
    }

    fn ground_truth(&self, _pt: &Point<T>) -> Result<GroundTruth<T>> {
        unsupported("analytic ground truth")
    }
}

macro_rules! forward_oracle {
    ($($ty:ty),*) => {$(
        impl<T: Scalar, O: BilevelOracle<T> + ?Sized> BilevelOracle<T> for $ty {
            fn dims(&self) -> Dims { (**self).dims() }
            fn capabilities(&self) -> Capabilities { (**self).capabilities() }
            fn constants(&self) -> ProblemConstants<T> { (**self).constants() }
            fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> { (**self).f_value(pt, s) }
            fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> { (**self).g_value(pt, s) }
            fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> { (**self).grad_f_x(pt, s) }
            fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> { (**self).grad_f_y(pt, s) }
            fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> { (**self).grad_g_x(pt, s) }
            fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> { (**self).grad_g_y(pt, s) }
            fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> { (**self).hess_g_yy_vec(pt, v, s) }
            fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> { (**self).jac_g_xy_vec(pt, v, s) }
            fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> { (**self).ground_truth(pt) }
        }
    )*};
}

forward_oracle!(&O, Box<O>, std::sync::Arc<O>);

/// Minibatch adapter: a keyed query with slot `s` averages the inner oracle
/// over slots `s·B, …, s·B + B − 1` of the same key family.
#[derive(Debug, Clone)]
pub struct Batched<O> {
    inner: O,
    batch: u32,
}

impl<O> Batched<O> {
    pub fn new(inner: O, batch: u32) -> Result<Self> {
        if batch == 0 {
            return Err(BilevelError::InvalidArgument("batch size must be ≥ 1".into()));
        }
        Ok(Self { inner, batch })
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    fn average<T: Scalar, R>(
        &self,
        sample: Sample,
        mut eval: impl FnMut(Sample) -> Result<R>,
        mut acc: impl FnMut(Option<R>, R) -> R,
        finish: impl FnOnce(R, T) -> R,
    ) -> Result<R> {
        match sample {
            Sample::Full => eval(Sample::Full),
            Sample::Key(key) if self.batch == 1 => eval(Sample::Key(key)),
            Sample::Key(key) => {
                let base = key.slot.checked_mul(self.batch).ok_or_else(|| {
                    BilevelError::InvalidArgument("batch slot index overflow".into())
                })?;
                let mut total: Option<R> = None;
                for k in 0..self.batch {
                    let r = eval(Sample::Key(key.with_slot(base + k)))?;
                    total = Some(acc(total, r));
                }
                Ok(finish(total.expect("batch ≥ 1"), T::lit(f64::from(self.batch))))
            }
        }
    }

    fn avg_vec<T: Scalar>(
        &self,
        sample: Sample,
        eval: impl FnMut(Sample) -> Result<Vec<T>>,
    ) -> Result<Vec<T>> {
        self.average(
            sample,
            eval,
            |tot, r| match tot {
                None => r,
                Some(t) => linalg::add(&t, &r),
            },
            |t, n| linalg::scale(T::one() / n, &t),
        )
    }

    fn avg_scalar<T: Scalar>(
        &self,
        sample: Sample,
        eval: impl FnMut(Sample) -> Result<T>,
    ) -> Result<T> {
        self.average(sample, eval, |tot, r| tot.unwrap_or_else(T::zero) + r, |t, n| t / n)
    }
}

impl<T: Scalar, O: BilevelOracle<T>> BilevelOracle<T> for Batched<O> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn constants(&self) -> ProblemConstants<T> {
        self.inner.constants()
    }
    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.avg_scalar(s, |s| self.inner.f_value(pt, s))
    }
    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.avg_scalar(s, |s| self.inner.g_value(pt, s))
    }
    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.grad_f_x(pt, s))
    }
    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.grad_f_y(pt, s))
    }
    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.grad_g_x(pt, s))
    }
    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.grad_g_y(pt, s))
    }
    fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.hess_g_yy_vec(pt, v, s))
    }
    fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        self.avg_vec(s, |s| self.inner.jac_g_xy_vec(pt, v, s))
    }
    fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        self.inner.ground_truth(pt)
    }
}

/// Restricts an oracle to first-order access: second-order products report
/// an unsupported capability, ground truth passes through.
#[derive(Debug, Clone)]
pub struct FirstOrderOnly<O>(pub O);

impl<T: Scalar, O: BilevelOracle<T>> BilevelOracle<T> for FirstOrderOnly<O> {
    fn dims(&self) -> Dims {
        self.0.dims()
    }
    fn capabilities(&self) -> Capabilities {
        Capabilities {
            second_order: false,
            ..self.0.capabilities()
        }
    }
    fn constants(&self) -> ProblemConstants<T> {
        self.0.constants()
    }
    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.0.f_value(pt, s)
    }
    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.0.g_value(pt, s)
    }
    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.0.grad_f_x(pt, s)
    }
    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.0.grad_f_y(pt, s)
    }
    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.0.grad_g_x(pt, s)
    }
    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.0.grad_g_y(pt, s)
    }
    fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        self.0.ground_truth(pt)
    }
}

/// One logged oracle query.
#[derive(Debug, Clone, PartialEq)]
pub struct CallRecord {
    pub query: Query,
    pub sample: Sample,
    /// Bit patterns of the queried `(x, y)`, for snapshot identification.
    pub point_digest: u64,
}

/// Instrumented oracle that logs every query it forwards.
///
/// Test instrumentation only; the log sits behind a mutex.
#[derive(Debug)]
pub struct Recording<O> {
    inner: O,
    log: Mutex<Vec<CallRecord>>,
}

impl<O> Recording<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn take_log(&self) -> Vec<CallRecord> {
        std::mem::take(&mut *self.log.lock().expect("log mutex poisoned"))
    }

    pub fn count(&self, pred: impl Fn(&CallRecord) -> bool) -> usize {
        self.log
            .lock()
            .expect("log mutex poisoned")
            .iter()
            .filter(|c| pred(c))
            .count()
    }

    fn push<T: Scalar>(&self, query: Query, pt: &Point<T>, sample: Sample) {
        let mut h = 0xcbf2_9ce4_8422_2325_u64;
        for c in pt.x.iter().chain(&pt.y) {
            h = splitmix64(h ^ c.as_f64().to_bits());
        }
        self.log.lock().expect("log mutex poisoned").push(CallRecord {
            query,
            sample,
            point_digest: h,
        });
    }
}

impl<T: Scalar, O: BilevelOracle<T>> BilevelOracle<T> for Recording<O> {
    fn dims(&self) -> Dims {
        self.inner.dims()
    }
    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }
    fn constants(&self) -> ProblemConstants<T> {
        self.inner.constants()
    }
    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.push(Query::FValue, pt, s);
        self.inner.f_value(pt, s)
    }
    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        self.push(Query::GValue, pt, s);
        self.inner.g_value(pt, s)
    }
    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.push(Query::GradFx, pt, s);
        self.inner.grad_f_x(pt, s)
    }
    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.push(Query::GradFy, pt, s);
        self.inner.grad_f_y(pt, s)
    }
    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.push(Query::GradGx, pt, s);
        self.inner.grad_g_x(pt, s)
    }
    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        self.push(Query::GradGy, pt, s);
        self.inner.grad_g_y(pt, s)
    }
    fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        self.push(Query::HessGyyVec, pt, s);
        self.inner.hess_g_yy_vec(pt, v, s)
    }
    fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        self.push(Query::JacGxyVec, pt, s);
        self.inner.jac_g_xy_vec(pt, v, s)
    }
    fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        self.inner.ground_truth(pt)
    }
}
