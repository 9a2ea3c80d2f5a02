//! Non-quadratic lower level with logistic coupling:
//!
//! ```text
//! g(x, y) = ½ μ ‖y‖² + (1/m) Σᵢ softplus(aᵢᵀ y + bᵢᵀ x)
//! f(x, y) = ½ ‖x − x₀‖² + ½ ‖y − y₀‖²
//! ```
//!
//! Third derivatives are bounded through `max |σ''| = 1/(6√3)`, which gives
//! certified Hessian/Jacobian Lipschitz constants for the finite-difference
//! error audits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{additive_noise, sigmoid, sigmoid_prime, softplus, with_noise, NoiseLevels, NoiseSlot};
use crate::error::{BilevelError, Result};
use crate::linalg::{self, Matrix};
use crate::oracle::{
    check_query, BilevelOracle, Capabilities, Dims, Point, ProblemConstants, Query, Sample,
};
use crate::scalar::Scalar;

/// `max_z |σ''(z)|`
const SIGMOID_SECOND_MAX: f64 = 0.096_225_044_864_937_63;

#[derive(Debug, Clone)]
pub struct LogisticCoupledProblem<T> {
    mu: T,
    /// Rows aᵢ (m × q).
    a_rows: Matrix<T>,
    /// Rows bᵢ (m × p).
    b_rows: Matrix<T>,
    x_target: Vec<T>,
    y_target: Vec<T>,
    noise: NoiseLevels,
    constants: ProblemConstants<T>,
    dims: Dims,
}

impl<T: Scalar> LogisticCoupledProblem<T> {
    pub fn new(
        mu: T,
        a_rows: Matrix<T>,
        b_rows: Matrix<T>,
        x_target: Vec<T>,
        y_target: Vec<T>,
        noise: NoiseLevels,
        y_radius: T,
    ) -> Result<Self> {
        let m = a_rows.rows();
        let (q, p) = (a_rows.cols(), b_rows.cols());
        if m == 0 || b_rows.rows() != m || x_target.len() != p || y_target.len() != q || p == 0 || q == 0 {
            return Err(BilevelError::InvalidArgument(
                "logistic problem has inconsistent shapes".into(),
            ));
        }
        if !(mu > T::zero()) || !(y_radius > T::zero()) || !noise.is_valid() {
            return Err(BilevelError::InvalidArgument(
                "need mu > 0, y_radius > 0 and nonnegative noise".into(),
            ));
        }
        let inv_m = T::one() / T::lit(m as f64);
        let quarter = T::lit(0.25);
        let third = T::lit(SIGMOID_SECOND_MAX);
        let (mut lg, mut lgyy, mut lgxy, mut cgxy) = (T::zero(), T::zero(), T::zero(), T::zero());
        for i in 0..m {
            let na = linalg::norm(a_rows.row(i));
            let nb = linalg::norm(b_rows.row(i));
            let nab = (na * na + nb * nb).sqrt();
            lg += na * nab;
            lgyy += na * na * nab;
            lgxy += na * nb * nab;
            cgxy += na * nb;
        }
        let up = T::one() + T::lit(1e-9);
        let cfy = y_radius + linalg::norm(&y_target);
        let cgxy = quarter * inv_m * cgxy;
        let constants = ProblemConstants {
            mu_g: Some(mu),
            l_g: Some((mu + quarter * inv_m * lg) * up),
            l_gxy: Some(third * inv_m * lgxy * up),
            l_gyy: Some(third * inv_m * lgyy * up),
            l_fx: Some(T::one()),
            l_fy: Some(T::one()),
            c_fy: Some(cfy * cfy * up),
            c_gxy: Some(cgxy * cgxy * up),
            y_radius: Some(y_radius),
        };
        Ok(Self {
            mu,
            dims: Dims { p, q },
            a_rows,
            b_rows,
            x_target,
            y_target,
            noise,
            constants,
        })
    }

    fn logits(&self, pt: &Point<T>) -> Vec<T> {
        linalg::add(&self.a_rows.matvec(&pt.y), &self.b_rows.matvec(&pt.x))
    }

    fn inv_m(&self) -> T {
        T::one() / T::lit(self.a_rows.rows() as f64)
    }
}

/// Random instance: `aᵢ ~ N(0, s²/q)`, `bᵢ ~ N(0, s²/p)`, targets standard normal.
pub fn make_logistic<T: Scalar>(
    p: usize,
    q: usize,
    terms: usize,
    mu: T,
    scale: T,
    noise: NoiseLevels,
    seed: u64,
) -> Result<LogisticCoupledProblem<T>> {
    if p == 0 || q == 0 || terms == 0 {
        return Err(BilevelError::InvalidArgument("dimensions must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a_rows = Matrix::random_normal(&mut rng, terms, q).scaled(scale / T::lit(q as f64).sqrt());
    let b_rows = Matrix::random_normal(&mut rng, terms, p).scaled(scale / T::lit(p as f64).sqrt());
    let x_target = linalg::standard_normal(&mut rng, p);
    let y_target = linalg::standard_normal(&mut rng, q);
    LogisticCoupledProblem::new(mu, a_rows, b_rows, x_target, y_target, noise, T::lit(10.0))
}

impl<T: Scalar> BilevelOracle<T> for LogisticCoupledProblem<T> {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            second_order: true,
            ground_truth: false,
        }
    }

    fn constants(&self) -> ProblemConstants<T> {
        self.constants.clone()
    }

    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::FValue)?;
        let half = T::lit(0.5);
        let mut val = half * linalg::dist_sq(&pt.x, &self.x_target) + half * linalg::dist_sq(&pt.y, &self.y_target);
        if let Some(n) = additive_noise::<T>(&self.noise, s, NoiseSlot::Fx, self.dims.p) {
            val += linalg::dot(&n, &pt.x);
        }
        if let Some(n) = additive_noise::<T>(&self.noise, s, NoiseSlot::Fy, self.dims.q) {
            val += linalg::dot(&n, &pt.y);
        }
        Ok(val)
    }

    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::GValue)?;
        let sp = linalg::sum(self.logits(pt).into_iter().map(softplus));
        let mut val = T::lit(0.5) * self.mu * linalg::norm_sq(&pt.y) + self.inv_m() * sp;
        if let Some(n) = additive_noise::<T>(&self.noise, s, NoiseSlot::Gx, self.dims.p) {
            val += linalg::dot(&n, &pt.x);
        }
        if let Some(n) = additive_noise::<T>(&self.noise, s, NoiseSlot::Gy, self.dims.q) {
            val += linalg::dot(&n, &pt.y);
        }
        Ok(val)
    }

    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFx)?;
        Ok(with_noise(
            linalg::sub(&pt.x, &self.x_target),
            additive_noise(&self.noise, s, NoiseSlot::Fx, self.dims.p),
        ))
    }

    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFy)?;
        Ok(with_noise(
            linalg::sub(&pt.y, &self.y_target),
            additive_noise(&self.noise, s, NoiseSlot::Fy, self.dims.q),
        ))
    }

    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGx)?;
        let w: Vec<T> = self.logits(pt).into_iter().map(|z| sigmoid(z) * self.inv_m()).collect();
        Ok(with_noise(
            self.b_rows.tmatvec(&w),
            additive_noise(&self.noise, s, NoiseSlot::Gx, self.dims.p),
        ))
    }

    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGy)?;
        let w: Vec<T> = self.logits(pt).into_iter().map(|z| sigmoid(z) * self.inv_m()).collect();
        let g = linalg::axpy(&self.a_rows.tmatvec(&w), self.mu, &pt.y);
        Ok(with_noise(g, additive_noise(&self.noise, s, NoiseSlot::Gy, self.dims.q)))
    }

    fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::HessGyyVec)?;
        let av = self.a_rows.matvec(v);
        let w: Vec<T> = self
            .logits(pt)
            .into_iter()
            .zip(av)
            .map(|(z, a)| sigmoid_prime(z) * a * self.inv_m())
            .collect();
        Ok(linalg::axpy(&self.a_rows.tmatvec(&w), self.mu, v))
    }

    fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::JacGxyVec)?;
        let av = self.a_rows.matvec(v);
        let w: Vec<T> = self
            .logits(pt)
            .into_iter()
            .zip(av)
            .map(|(z, a)| sigmoid_prime(z) * a * self.inv_m())
            .collect();
        Ok(self.b_rows.tmatvec(&w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_second_derivative_bound() {
        // σ'' = σ(1−σ)(1−2σ), maximized at σ = ½ − 1/(2√3)
        let s = 0.5 - 0.5 / 3f64.sqrt();
        let peak = s * (1.0 - s) * (1.0 - 2.0 * s);
        assert!((peak - SIGMOID_SECOND_MAX).abs() < 1e-15);
        let grid_max = (-4000..4000)
            .map(|i| {
                let z = f64::from(i) * 1e-3;
                let s = sigmoid(z);
                (s * (1.0 - s) * (1.0 - 2.0 * s)).abs()
            })
            .fold(0.0, f64::max);
        assert!(grid_max <= SIGMOID_SECOND_MAX);
    }

    #[test]
    fn hessian_is_at_least_mu() {
        let prob = make_logistic::<f64>(3, 4, 20, 0.5, 2.0, NoiseLevels::default(), 8).unwrap();
        let pt = Point::new(vec![0.2, -0.1, 0.3], vec![1.0, 0.0, -1.0, 0.5]);
        let v = vec![0.3, -0.7, 0.1, 0.2];
        let hv = prob.hess_g_yy_vec(&pt, &v, Sample::Full).unwrap();
        assert!(linalg::dot(&v, &hv) >= 0.5 * linalg::norm_sq(&v));
    }

    #[test]
    fn gradient_matches_value_differences() {
        let prob = make_logistic::<f64>(2, 3, 10, 1.0, 1.5, NoiseLevels::default(), 2).unwrap();
        let pt = Point::new(vec![0.4, -0.3], vec![0.1, 0.2, -0.5]);
        let gy = prob.grad_g_y(&pt, Sample::Full).unwrap();
        let gx = prob.grad_g_x(&pt, Sample::Full).unwrap();
        let h = 1e-6;
        for j in 0..3 {
            let mut e = vec![0.0; 3];
            e[j] = h;
            let fd = (prob.g_value(&pt.shift_y(1.0, &e), Sample::Full).unwrap()
                - prob.g_value(&pt.shift_y(-1.0, &e), Sample::Full).unwrap())
                / (2.0 * h);
            assert!((fd - gy[j]).abs() < 1e-8);
        }
        for j in 0..2 {
            let mut xp = pt.clone();
            let mut xm = pt.clone();
            xp.x[j] += h;
            xm.x[j] -= h;
            let fd = (prob.g_value(&xp, Sample::Full).unwrap() - prob.g_value(&xm, Sample::Full).unwrap()) / (2.0 * h);
            assert!((fd - gx[j]).abs() < 1e-8);
        }
    }
}
