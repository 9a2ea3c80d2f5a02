//! Strongly convex quadratic bilevel family with closed-form ground truth.
//!
//! ```text
//! f(x, y) = ½ (x − a)ᵀ A (x − a) + ½ ‖y − b‖²
//! g(x, y) = ½ yᵀ Q y − yᵀ (P x + c)
//! ```
//!
//! so `y*(x) = Q⁻¹(Px + c)`, `∇²_xy g · v = −Pᵀ v` and
//! `∇Φ(x) = A(x − a) + Pᵀ Q⁻¹ (y*(x) − b)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{additive_noise, with_noise, NoiseLevels, NoiseSlot};
use crate::error::{BilevelError, Result};
use crate::linalg::{self, Cholesky, Matrix};
use crate::oracle::{
    check_query, BilevelOracle, Capabilities, Dims, GroundTruth, Point, ProblemConstants, Query,
    Sample,
};
use crate::scalar::Scalar;

/// Relative slack applied to certified constants to absorb rounding in the
/// spectral computations.
const CERT_SLACK: f64 = 1e-9;

/// Radius of the `y`-ball on which generated problems certify `C_fy`.
pub const DEFAULT_Y_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec<T> {
    /// Lower-level curvature, symmetric positive definite (q × q).
    pub q_mat: Matrix<T>,
    /// Coupling (q × p).
    pub p_mat: Matrix<T>,
    pub c: Vec<T>,
    /// Upper-level curvature, symmetric positive semidefinite (p × p).
    pub a_mat: Matrix<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub noise: NoiseLevels,
    /// `y`-region over which `C_fy` is certified.
    pub y_radius: T,
}

#[derive(Debug, Clone)]
pub struct QuadraticProblem<T> {
    spec: QuadraticSpec<T>,
    chol: Cholesky<T>,
    constants: ProblemConstants<T>,
    dims: Dims,
}

impl<T: Scalar> QuadraticProblem<T> {
    pub fn new(spec: QuadraticSpec<T>) -> Result<Self> {
        let q = spec.q_mat.rows();
        let p = spec.p_mat.cols();
        let shape_ok = spec.q_mat.cols() == q
            && spec.p_mat.rows() == q
            && spec.a_mat.rows() == p
            && spec.a_mat.cols() == p
            && spec.c.len() == q
            && spec.b.len() == q
            && spec.a.len() == p;
        if !shape_ok || p == 0 || q == 0 {
            return Err(BilevelError::InvalidArgument(
                "quadratic problem matrices/vectors have inconsistent shapes".into(),
            ));
        }
        if !spec.noise.is_valid() {
            return Err(BilevelError::InvalidArgument("noise levels must be ≥ 0".into()));
        }
        if !(spec.y_radius > T::zero()) {
            return Err(BilevelError::InvalidArgument("y_radius must be positive".into()));
        }
        let q_eig = linalg::symmetric_eigenvalues(&spec.q_mat)?;
        let a_eig = linalg::symmetric_eigenvalues(&spec.a_mat)?;
        let mu = q_eig[0];
        if !(mu > T::zero()) {
            return Err(BilevelError::InvalidArgument(
                "lower-level curvature Q must be positive definite".into(),
            ));
        }
        if a_eig[0] < -T::lit(1e-12) * (T::one() + a_eig[p - 1].abs()) {
            return Err(BilevelError::InvalidArgument(
                "upper-level curvature A must be positive semidefinite".into(),
            ));
        }
        let chol = Cholesky::new(&spec.q_mat)?;
        let l_q = q_eig[q - 1];
        let p_norm_sq = linalg::spectral_norm_sq(&spec.p_mat)?;
        let up = T::one() + T::lit(CERT_SLACK);
        let down = T::one() - T::lit(CERT_SLACK);
        let c_fy = spec.y_radius + linalg::norm(&spec.b);
        let constants = ProblemConstants {
            mu_g: Some(mu * down),
            l_g: Some((l_q * l_q + p_norm_sq).sqrt() * up),
            l_gxy: Some(T::zero()),
            l_gyy: Some(T::zero()),
            l_fx: Some(a_eig[p - 1].max(T::zero()) * up),
            l_fy: Some(T::one()),
            c_fy: Some(c_fy * c_fy * up),
            c_gxy: Some(p_norm_sq * up),
            y_radius: Some(spec.y_radius),
        };
        Ok(Self {
            dims: Dims { p, q },
            spec,
            chol,
            constants,
        })
    }

    pub fn spec(&self) -> &QuadraticSpec<T> {
        &self.spec
    }

    /// Lower-level minimizer `y*(x)`.
    pub fn y_star(&self, x: &[T]) -> Vec<T> {
        let rhs = linalg::add(&self.spec.p_mat.matvec(x), &self.spec.c);
        self.chol.solve(&rhs)
    }

    /// Solves `Q z = r`.
    pub fn solve_q(&self, r: &[T]) -> Vec<T> {
        self.chol.solve(r)
    }

    fn f_clean(&self, pt: &Point<T>) -> T {
        let dx = linalg::sub(&pt.x, &self.spec.a);
        let dy = linalg::sub(&pt.y, &self.spec.b);
        let half = T::lit(0.5);
        half * linalg::dot(&dx, &self.spec.a_mat.matvec(&dx)) + half * linalg::norm_sq(&dy)
    }
}

/// Random instance with `Q = U diag(λ) Uᵀ`, `λ` evenly spaced in `[mu_g, l_g]`.
///
/// `A` has spectrum in `[0.1, 1]`, `P` is Gaussian scaled by `1/√p`, and
/// `a`, `b`, `c` are standard normal.
pub fn make_quadratic<T: Scalar>(
    p: usize,
    q: usize,
    mu_g: T,
    l_g: T,
    noise: NoiseLevels,
    seed: u64,
) -> Result<QuadraticProblem<T>> {
    if p == 0 || q == 0 {
        return Err(BilevelError::InvalidArgument("dimensions must be ≥ 1".into()));
    }
    if !(mu_g > T::zero()) || !(l_g >= mu_g) || !l_g.is_finite() {
        return Err(BilevelError::InvalidArgument(format!(
            "need 0 < mu_g ≤ L_g, got mu_g={mu_g}, L_g={l_g}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_mat = if mu_g == l_g {
        Matrix::identity(q).scaled(mu_g)
    } else {
        let spectrum: Vec<T> = (0..q)
            .map(|i| {
                if q == 1 {
                    mu_g
                } else {
                    mu_g + (l_g - mu_g) * T::lit(i as f64 / (q - 1) as f64)
                }
            })
            .collect();
        conjugate(&linalg::random_orthogonal(&mut rng, q), &spectrum)
    };
    let p_mat = Matrix::<T>::random_normal(&mut rng, q, p).scaled(T::one() / T::lit(p as f64).sqrt());
    let a_spectrum: Vec<T> = (0..p)
        .map(|i| T::lit(if p == 1 { 1.0 } else { 0.1 + 0.9 * i as f64 / (p - 1) as f64 }))
        .collect();
    let a_mat = conjugate(&linalg::random_orthogonal(&mut rng, p), &a_spectrum);
    let c = linalg::standard_normal(&mut rng, q);
    let a = linalg::standard_normal(&mut rng, p);
    let b = linalg::standard_normal(&mut rng, q);
    QuadraticProblem::new(QuadraticSpec {
        q_mat,
        p_mat,
        c,
        a_mat,
        a,
        b,
        noise,
        y_radius: T::lit(DEFAULT_Y_RADIUS),
    })
}

/// Symmetric `U diag(d) Uᵀ`.
fn conjugate<T: Scalar>(u: &Matrix<T>, d: &[T]) -> Matrix<T> {
    let m = u.matmul(&Matrix::diag(d)).matmul(&u.transpose());
    let two = T::lit(2.0);
    Matrix::from_fn(m.rows(), m.cols(), |i, j| (m.get(i, j) + m.get(j, i)) / two)
}

impl<T: Scalar> BilevelOracle<T> for QuadraticProblem<T> {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            second_order: true,
            ground_truth: true,
        }
    }

    fn constants(&self) -> ProblemConstants<T> {
        self.constants.clone()
    }

    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::FValue)?;
        let mut val = self.f_clean(pt);
        if let Some(n) = additive_noise::<T>(&self.spec.noise, s, NoiseSlot::Fx, self.dims.p) {
            val += linalg::dot(&n, &pt.x);
        }
        if let Some(n) = additive_noise::<T>(&self.spec.noise, s, NoiseSlot::Fy, self.dims.q) {
            val += linalg::dot(&n, &pt.y);
        }
        Ok(val)
    }

    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::GValue)?;
        let half = T::lit(0.5);
        let lin = linalg::add(&self.spec.p_mat.matvec(&pt.x), &self.spec.c);
        let mut val = half * linalg::dot(&pt.y, &self.spec.q_mat.matvec(&pt.y)) - linalg::dot(&pt.y, &lin);
        if let Some(n) = additive_noise::<T>(&self.spec.noise, s, NoiseSlot::Gx, self.dims.p) {
            val += linalg::dot(&n, &pt.x);
        }
        if let Some(n) = additive_noise::<T>(&self.spec.noise, s, NoiseSlot::Gy, self.dims.q) {
            val += linalg::dot(&n, &pt.y);
        }
        Ok(val)
    }

    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFx)?;
        let dx = linalg::sub(&pt.x, &self.spec.a);
        Ok(with_noise(
            self.spec.a_mat.matvec(&dx),
            additive_noise(&self.spec.noise, s, NoiseSlot::Fx, self.dims.p),
        ))
    }

    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFy)?;
        Ok(with_noise(
            linalg::sub(&pt.y, &self.spec.b),
            additive_noise(&self.spec.noise, s, NoiseSlot::Fy, self.dims.q),
        ))
    }

    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGx)?;
        let g = linalg::scale(-T::one(), &self.spec.p_mat.tmatvec(&pt.y));
        Ok(with_noise(g, additive_noise(&self.spec.noise, s, NoiseSlot::Gx, self.dims.p)))
    }

    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGy)?;
        let lin = linalg::add(&self.spec.p_mat.matvec(&pt.x), &self.spec.c);
        let g = linalg::sub(&self.spec.q_mat.matvec(&pt.y), &lin);
        Ok(with_noise(g, additive_noise(&self.spec.noise, s, NoiseSlot::Gy, self.dims.q)))
    }

    fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::HessGyyVec)?;
        Ok(self.spec.q_mat.matvec(v))
    }

    fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::JacGxyVec)?;
        Ok(linalg::scale(-T::one(), &self.spec.p_mat.tmatvec(v)))
    }

    fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        check_query(self.dims, pt, None, Sample::Full, Query::FValue)?;
        let y_star = self.y_star(&pt.x);
        let v_star = self.chol.solve(&linalg::sub(&pt.y, &self.spec.b));
        let at_star = Point::new(pt.x.clone(), y_star.clone());
        let phi = self.f_clean(&at_star);
        let dx = linalg::sub(&pt.x, &self.spec.a);
        let implicit = self
            .spec
            .p_mat
            .tmatvec(&self.chol.solve(&linalg::sub(&y_star, &self.spec.b)));
        let grad_phi = linalg::add(&self.spec.a_mat.matvec(&dx), &implicit);
        Ok(GroundTruth {
            y_star,
            v_star,
            phi,
            grad_phi,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{SampleKey, Stream};

    fn simple(p_mat: Matrix<f64>, q_diag: &[f64]) -> QuadraticProblem<f64> {
        let p = p_mat.cols();
        let q = q_diag.len();
        QuadraticProblem::new(QuadraticSpec {
            q_mat: Matrix::diag(q_diag),
            p_mat,
            c: vec![0.0; q],
            a_mat: Matrix::identity(p),
            a: vec![1.0; p],
            b: vec![-1.0; q],
            noise: NoiseLevels::default(),
            y_radius: 5.0,
        })
        .unwrap()
    }

    #[test]
    fn degenerate_spectrum_is_exact_identity() {
        let prob = make_quadratic::<f64>(3, 4, 2.5, 2.5, NoiseLevels::default(), 1).unwrap();
        assert_eq!(prob.spec().q_mat, Matrix::identity(4).scaled(2.5));
    }

    #[test]
    fn rejects_bad_spectrum() {
        assert!(make_quadratic::<f64>(2, 2, 0.0, 1.0, NoiseLevels::default(), 0).is_err());
        assert!(make_quadratic::<f64>(2, 2, 2.0, 1.0, NoiseLevels::default(), 0).is_err());
        assert!(make_quadratic::<f64>(0, 2, 1.0, 2.0, NoiseLevels::default(), 0).is_err());
    }

    #[test]
    fn gradients_of_upper_level() {
        let prob = simple(Matrix::identity(2), &[1.0, 1.0]);
        let a = vec![1.0, 1.0];
        let pt = Point::new(a.clone(), vec![3.0, -2.0]);
        let key = SampleKey::new(Stream::UpperXi, 0, 0);
        assert_eq!(prob.grad_f_x(&pt, key.into()).unwrap(), vec![0.0, 0.0]);
        let pt = Point::new(vec![2.0, 1.0], vec![-1.0, -1.0]);
        assert_eq!(prob.grad_f_x(&pt, key.into()).unwrap(), vec![1.0, 0.0]);
        let psi = SampleKey::new(Stream::LsPsi, 0, 0);
        assert_eq!(prob.grad_f_y(&pt, psi.into()).unwrap(), vec![0.0, 0.0]);
        let pt = Point::new(vec![1.0, 1.0], vec![-1.0, 1.0]);
        assert_eq!(prob.grad_f_y(&pt, psi.into()).unwrap(), vec![0.0, 2.0]);
    }

    #[test]
    fn gradients_of_lower_level() {
        let prob = simple(Matrix::zeros(2, 2), &[2.0, 2.0]);
        let zeta = SampleKey::new(Stream::LowerZeta, 0, 0);
        let pt = Point::new(vec![0.3, 0.1], vec![1.0, 0.0]);
        assert_eq!(prob.grad_g_y(&pt, zeta.into()).unwrap(), vec![2.0, 0.0]);

        let coupled = simple(Matrix::identity(2), &[1.0, 1.0]);
        let xi = SampleKey::new(Stream::UpperXi, 0, 0);
        let pt = Point::new(vec![0.4, -0.2], vec![0.4, -0.2]);
        assert_eq!(coupled.grad_g_x(&pt, xi.into()).unwrap(), vec![-0.4, 0.2]);
        let pt = Point::new(vec![0.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(coupled.grad_g_x(&pt, xi.into()).unwrap(), vec![-1.0, 0.0]);
        // with P = I and y = x the lower-level y-gradient also vanishes
        let pt = Point::new(vec![0.4, -0.2], vec![0.4, -0.2]);
        assert_eq!(coupled.grad_g_y(&pt, zeta.into()).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn second_order_products() {
        let prob = simple(Matrix::identity(2), &[2.0, 4.0]);
        let pt = Point::new(vec![0.0, 0.0], vec![0.0, 0.0]);
        let psi = SampleKey::new(Stream::LsPsi, 0, 0);
        assert_eq!(prob.hess_g_yy_vec(&pt, &[1.0, 1.0], psi.into()).unwrap(), vec![2.0, 4.0]);
        assert_eq!(prob.hess_g_yy_vec(&pt, &[0.0, 0.0], psi.into()).unwrap(), vec![0.0, 0.0]);
        let xi = SampleKey::new(Stream::UpperXi, 0, 0);
        assert_eq!(prob.jac_g_xy_vec(&pt, &[0.5, -2.0], xi.into()).unwrap(), vec![-0.5, 2.0]);
    }

    #[test]
    fn v_star_is_diagonal_solve() {
        // ∇_y f = y − b = c at y = 0 with b = −c
        let prob = QuadraticProblem::new(QuadraticSpec {
            q_mat: Matrix::identity(2).scaled(4.0),
            p_mat: Matrix::identity(2),
            c: vec![0.0, 0.0],
            a_mat: Matrix::identity(2),
            a: vec![0.0, 0.0],
            b: vec![-2.0, 6.0],
            noise: NoiseLevels::default(),
            y_radius: 1.0,
        })
        .unwrap();
        let gt = prob.ground_truth(&Point::new(vec![0.3, 0.7], vec![0.0, 0.0])).unwrap();
        assert_eq!(gt.v_star, vec![0.5, -1.5]);
    }

    #[test]
    fn one_dimensional_hand_solve() {
        let prob = QuadraticProblem::new(QuadraticSpec {
            q_mat: Matrix::diag(&[2.0f64]),
            p_mat: Matrix::identity(1),
            c: vec![0.0],
            a_mat: Matrix::identity(1),
            a: vec![0.0],
            b: vec![0.0],
            noise: NoiseLevels::default(),
            y_radius: 1.0,
        })
        .unwrap();
        // y* = x/2, Φ(x) = ½x² + ⅛x², ∇Φ(x) = 1.25 x
        let gt = prob.ground_truth(&Point::new(vec![0.8], vec![0.0])).unwrap();
        assert!((gt.y_star[0] - 0.4).abs() < 1e-15);
        assert!((gt.phi - 0.4).abs() < 1e-15);
        assert!((gt.grad_phi[0] - 1.0).abs() < 1e-15);
        let gt0 = prob.ground_truth(&Point::new(vec![0.0], vec![0.0])).unwrap();
        let h = 1e-5;
        let phi = |x: f64| prob.ground_truth(&Point::new(vec![x], vec![0.0])).unwrap().phi;
        let fd = (phi(h) - phi(-h)) / (2.0 * h);
        assert!((gt0.grad_phi[0] - fd).abs() < 1e-8);
    }

    #[test]
    fn noise_is_keyed_and_point_independent() {
        let prob = make_quadratic::<f64>(3, 3, 1.0, 2.0, NoiseLevels::uniform(0.3), 4).unwrap();
        let zeta = SampleKey::new(Stream::LowerZeta, 11, 5);
        let p1 = Point::new(vec![0.0; 3], vec![0.0; 3]);
        let p2 = Point::new(vec![1.0; 3], vec![-1.0; 3]);
        let n1 = linalg::sub(
            &prob.grad_g_y(&p1, zeta.into()).unwrap(),
            &prob.grad_g_y(&p1, Sample::Full).unwrap(),
        );
        let n2 = linalg::sub(
            &prob.grad_g_y(&p2, zeta.into()).unwrap(),
            &prob.grad_g_y(&p2, Sample::Full).unwrap(),
        );
        for (a, b) in n1.iter().zip(&n2) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(linalg::norm(&n1) > 0.0);
        assert_eq!(
            prob.grad_g_y(&p2, zeta.into()).unwrap(),
            prob.grad_g_y(&p2, zeta.into()).unwrap()
        );
    }
}
