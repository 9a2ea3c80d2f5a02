//! Building-block estimators: finite-difference Hessian/Jacobian-vector
//! products, first-order and exact linear-system gradients and
//! hypergradients, the recursive momentum update and the ball projection.

use crate::error::{BilevelError, Result};
use crate::linalg;
use crate::oracle::{BilevelOracle, Point, Sample, SampleKey, Stream};
use crate::scalar::Scalar;

/// Finite-difference perturbation `δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdParams<T> {
    delta: T,
}

impl<T: Scalar> FdParams<T> {
    pub fn new(delta: T) -> Result<Self> {
        if !(delta > T::zero()) || !delta.is_finite() {
            return Err(BilevelError::InvalidArgument(format!(
                "finite-difference delta must be positive and finite, got {delta}"
            )));
        }
        Ok(Self { delta })
    }

    pub fn delta(&self) -> T {
        self.delta
    }
}

fn finite_or_overflow<T: Scalar>(v: Vec<T>, what: &str) -> Result<Vec<T>> {
    if linalg::all_finite(&v) {
        Ok(v)
    } else {
        Err(BilevelError::NumericalOverflow(format!("{what} produced a non-finite value")))
    }
}

fn expect_stream(sample: Sample, stream: Stream, what: &str) -> Result<()> {
    match sample {
        Sample::Key(SampleKey { stream: s, .. }) if s != stream => Err(
            BilevelError::ContractViolation(format!("{what} needs stream {stream:?}, got {s:?}")),
        ),
        _ => Ok(()),
    }
}

fn central_difference<T: Scalar>(plus: &[T], minus: &[T], delta: T) -> Vec<T> {
    let inv = T::one() / (delta + delta);
    plus.iter().zip(minus).map(|(&a, &b)| (a - b) * inv).collect()
}

/// `[∇_y g(x, y+δv) − ∇_y g(x, y−δv)] / 2δ`, both gradients under one sample.
pub fn fd_hessian_vec<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    fd: FdParams<T>,
    sample: Sample,
) -> Result<Vec<T>> {
    if !linalg::all_finite(v) {
        return Err(BilevelError::InvalidArgument("direction v is not finite".into()));
    }
    let d = fd.delta();
    let plus = oracle.grad_g_y(&pt.shift_y(d, v), sample)?;
    let minus = oracle.grad_g_y(&pt.shift_y(-d, v), sample)?;
    finite_or_overflow(central_difference(&plus, &minus, d), "finite-difference Hessian-vector product")
}

/// `[∇_x g(x, y+δv) − ∇_x g(x, y−δv)] / 2δ`, both gradients under one sample.
pub fn fd_jacobian_vec<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    fd: FdParams<T>,
    sample: Sample,
) -> Result<Vec<T>> {
    if !linalg::all_finite(v) {
        return Err(BilevelError::InvalidArgument("direction v is not finite".into()));
    }
    let d = fd.delta();
    let plus = oracle.grad_g_x(&pt.shift_y(d, v), sample)?;
    let minus = oracle.grad_g_x(&pt.shift_y(-d, v), sample)?;
    finite_or_overflow(central_difference(&plus, &minus, d), "finite-difference Jacobian-vector product")
}

/// First-order linear-system gradient `H̃(x,y,v) − ∇_y f(x,y)` (three oracle calls).
pub fn fo_ls_gradient<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    fd: FdParams<T>,
    sample: Sample,
) -> Result<Vec<T>> {
    expect_stream(sample, Stream::LsPsi, "linear-system gradient")?;
    let hv = fd_hessian_vec(oracle, pt, v, fd, sample)?;
    let fy = oracle.grad_f_y(pt, sample)?;
    Ok(linalg::sub(&hv, &fy))
}

/// First-order hypergradient `∇_x f(x,y) − J̃(x,y,v)` (three oracle calls).
pub fn fo_hypergradient<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    fd: FdParams<T>,
    sample: Sample,
) -> Result<Vec<T>> {
    expect_stream(sample, Stream::UpperXi, "hypergradient")?;
    let fx = oracle.grad_f_x(pt, sample)?;
    let jv = fd_jacobian_vec(oracle, pt, v, fd, sample)?;
    Ok(linalg::sub(&fx, &jv))
}

/// Exact linear-system gradient `∇²_yy g·v − ∇_y f`.
pub fn exact_ls_gradient<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    sample: Sample,
) -> Result<Vec<T>> {
    expect_stream(sample, Stream::LsPsi, "linear-system gradient")?;
    let hv = oracle.hess_g_yy_vec(pt, v, sample)?;
    let fy = oracle.grad_f_y(pt, sample)?;
    Ok(linalg::sub(&hv, &fy))
}

/// Hypergradient surrogate `∇_x f − ∇²_xy g·v`.
pub fn exact_hypergradient_surrogate<T: Scalar, O: BilevelOracle<T> + ?Sized>(
    oracle: &O,
    pt: &Point<T>,
    v: &[T],
    sample: Sample,
) -> Result<Vec<T>> {
    expect_stream(sample, Stream::UpperXi, "hypergradient")?;
    let fx = oracle.grad_f_x(pt, sample)?;
    let jv = oracle.jac_g_xy_vec(pt, v, sample)?;
    Ok(linalg::sub(&fx, &jv))
}

/// Recursive-momentum estimator state.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer<T> {
    value: Vec<T>,
    initialized: bool,
}

impl<T: Scalar> MomentumBuffer<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            value: linalg::zeros(dim),
            initialized: false,
        }
    }

    pub fn value(&self) -> &[T] {
        &self.value
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    /// Overwrites the estimate; marks the buffer initialized.
    pub fn set(&mut self, value: Vec<T>) {
        self.value = value;
        self.initialized = true;
    }

    /// `h ← η·now + (1−η)(h + now − prev)`.
    ///
    /// `now` and `prev` must come from the same sample at consecutive
    /// iterates. An uninitialized buffer only accepts `η = 1`.
    pub fn update(&mut self, eta: T, grad_now: &[T], grad_prev: &[T]) -> Result<()> {
        if !(eta >= T::zero() && eta <= T::one()) {
            return Err(BilevelError::InvalidArgument(format!(
                "momentum weight must lie in [0, 1], got {eta}"
            )));
        }
        if !self.initialized && eta < T::one() {
            return Err(BilevelError::ContractViolation(
                "first momentum update must use eta = 1".into(),
            ));
        }
        if grad_now.len() != self.value.len() || grad_prev.len() != self.value.len() {
            return Err(BilevelError::InvalidArgument(
                "gradient length does not match the momentum buffer".into(),
            ));
        }
        let keep = T::one() - eta;
        let next: Vec<T> = self
            .value
            .iter()
            .zip(grad_now.iter().zip(grad_prev))
            .map(|(&h, (&now, &prev))| {
                if keep == T::zero() {
                    now
                } else {
                    eta * now + keep * (h + now - prev)
                }
            })
            .collect();
        if !linalg::all_finite(&next) {
            return Err(BilevelError::NumericalOverflow(
                "momentum estimate became non-finite".into(),
            ));
        }
        self.value = next;
        self.initialized = true;
        Ok(())
    }
}

/// Euclidean projection onto the ball of radius `r`.
pub fn project_ball<T: Scalar>(w: &[T], r: T) -> Result<Vec<T>> {
    if !(r > T::zero()) {
        return Err(BilevelError::InvalidArgument(format!(
            "projection radius must be positive, got {r}"
        )));
    }
    if !linalg::all_finite(w) {
        return Err(BilevelError::NumericalOverflow("projected vector is not finite".into()));
    }
    let nrm = linalg::norm(w);
    if nrm <= r {
        return Ok(w.to_vec());
    }
    let s = r / nrm;
    let mut out = linalg::scale(s, w);
    // rounding can leave the scaled vector a few ulps outside the ball
    while linalg::norm(&out) > r {
        out.iter_mut().for_each(|c| *c *= T::one() - T::eps());
    }
    Ok(out)
}
