//! Data hyper-cleaning with a linear (binary logistic) classifier.
//!
//! Upper variable `x = λ ∈ ℝⁿ` holds one logit per training example, lower
//! variable `y = w ∈ ℝᵈ` the classifier weights:
//!
//! ```text
//! f(λ, w) = (1/|val|) Σ_val ℓ(wᵀxⱼ, sⱼ)
//! g(λ, w) = (1/n) Σ_train σ(λᵢ) ℓ(wᵀxᵢ, sᵢ) + C ‖w‖²
//! ```
//!
//! with `ℓ(z, s) = log(1 + e^{−sz})`, `s ∈ {−1, +1}`. The upper objective
//! does not depend on `λ` directly, so `∇_x f ≡ 0`.
//!
//! A keyed sample selects one training and one validation example; slot `k`
//! of a key family selects example `(offset + k) mod n`, so averaging over
//! `n` consecutive slots reproduces the full-batch objective exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{Dataset, Split};
use super::{sigmoid, sigmoid_prime, softplus};
use crate::error::{BilevelError, Result};
use crate::linalg::{self, Cholesky, Matrix};
use crate::oracle::{
    check_query, BilevelOracle, Capabilities, Dims, GroundTruth, Point, Query, Sample, SampleKey,
};
use crate::scalar::Scalar;

/// Regularization weight used by default.
pub const DEFAULT_REG_C: f64 = 0.001;

const TRAIN_TAG: u64 = 0x7472;
const VAL_TAG: u64 = 0x7661;
const CORRUPT_TAG: u64 = 0xc0;

#[derive(Debug, Clone)]
pub struct HyperCleaning<T> {
    train_x: Matrix<T>,
    /// Observed (possibly corrupted) training signs.
    train_s: Vec<T>,
    corrupted: Vec<bool>,
    val_x: Matrix<T>,
    val_s: Vec<T>,
    test: Split<T>,
    reg_c: T,
    dims: Dims,
    numerical_reference: bool,
}

fn signs<T: Scalar>(labels: &[usize]) -> Vec<T> {
    labels
        .iter()
        .map(|&l| if l == 1 { T::one() } else { -T::one() })
        .collect()
}

/// Builds the problem, flipping each training label to the other class with
/// probability `corruption_p` under `seed`.
pub fn make_hypercleaning<T: Scalar>(
    dataset: &Dataset<T>,
    corruption_p: f64,
    reg_c: T,
    seed: u64,
) -> Result<HyperCleaning<T>> {
    if !(0.0..1.0).contains(&corruption_p) {
        return Err(BilevelError::InvalidArgument(format!(
            "corruption probability must lie in [0, 1), got {corruption_p}"
        )));
    }
    if !(reg_c > T::zero()) || !reg_c.is_finite() {
        return Err(BilevelError::InvalidArgument(format!(
            "regularization C must be positive, got {reg_c}"
        )));
    }
    if dataset.train.is_empty() || dataset.val.is_empty() || dataset.test.is_empty() {
        return Err(BilevelError::InvalidArgument("dataset has an empty split".into()));
    }
    let d = dataset.train.dim();
    if d == 0 || dataset.val.dim() != d || dataset.test.dim() != d {
        return Err(BilevelError::InvalidArgument(
            "dataset splits disagree on the feature dimension".into(),
        ));
    }
    let all = [&dataset.train, &dataset.val, &dataset.test];
    if all.iter().any(|s| s.labels.iter().any(|&l| l > 1)) {
        return Err(BilevelError::InvalidArgument("labels must be 0 or 1".into()));
    }
    let first = dataset.val.labels[0];
    if dataset.val.labels.iter().all(|&l| l == first) {
        return Err(BilevelError::InvalidArgument(
            "validation split contains a single class".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ CORRUPT_TAG);
    let mut corrupted = Vec::with_capacity(dataset.train.len());
    let observed: Vec<usize> = dataset
        .train
        .labels
        .iter()
        .map(|&l| {
            let flip = corruption_p > 0.0 && rng.random_bool(corruption_p);
            corrupted.push(flip);
            if flip {
                1 - l
            } else {
                l
            }
        })
        .collect();
    Ok(HyperCleaning {
        train_x: dataset.train.features.clone(),
        train_s: signs(&observed),
        corrupted,
        val_x: dataset.val.features.clone(),
        val_s: signs(&dataset.val.labels),
        test: dataset.test.clone(),
        reg_c,
        dims: Dims {
            p: dataset.train.len(),
            q: d,
        },
        numerical_reference: false,
    })
}

fn pick(key: &SampleKey, n: usize, tag: u64) -> usize {
    let n64 = n as u64;
    ((key.family_digest(tag) % n64 + u64::from(key.slot) % n64) % n64) as usize
}

impl<T: Scalar> HyperCleaning<T> {
    /// Serves [`HyperCleaning::numerical_ground_truth`] through the oracle's
    /// ground-truth query, so run diagnostics can use it.
    pub fn with_numerical_reference(mut self, on: bool) -> Self {
        self.numerical_reference = on;
        self
    }

    pub fn n_train(&self) -> usize {
        self.dims.p
    }

    pub fn reg_c(&self) -> T {
        self.reg_c
    }

    /// Which training labels were flipped.
    pub fn corrupted(&self) -> &[bool] {
        &self.corrupted
    }

    pub fn corrupted_count(&self) -> usize {
        self.corrupted.iter().filter(|&&c| c).count()
    }

    /// Observed training labels in `{0, 1}`.
    pub fn observed_labels(&self) -> Vec<usize> {
        self.train_s.iter().map(|&s| usize::from(s > T::zero())).collect()
    }

    fn loss(x: &[T], s: T, w: &[T]) -> T {
        softplus(-s * linalg::dot(w, x))
    }

    /// `∇_w ℓ = −s σ(−s wᵀx) x`
    fn loss_grad(x: &[T], s: T, w: &[T]) -> Vec<T> {
        let m = s * linalg::dot(w, x);
        linalg::scale(-s * sigmoid(-m), x)
    }

    fn val_index(&self, sample: Sample) -> Option<usize> {
        match sample {
            Sample::Full => None,
            Sample::Key(k) => Some(pick(&k, self.val_x.rows(), VAL_TAG)),
        }
    }

    fn train_index(&self, sample: Sample) -> Option<usize> {
        match sample {
            Sample::Full => None,
            Sample::Key(k) => Some(pick(&k, self.train_x.rows(), TRAIN_TAG)),
        }
    }

    fn val_terms<R>(&self, sample: Sample, mut term: impl FnMut(usize) -> R, mean: impl FnOnce(Vec<R>) -> R) -> R {
        match self.val_index(sample) {
            Some(j) => term(j),
            None => mean((0..self.val_x.rows()).map(term).collect()),
        }
    }

    fn mean_vec(parts: Vec<Vec<T>>) -> Vec<T> {
        let n = T::lit(parts.len() as f64);
        let mut acc = linalg::zeros(parts[0].len());
        for p in &parts {
            acc = linalg::add(&acc, p);
        }
        linalg::scale(T::one() / n, &acc)
    }

    fn mean_scalar(parts: Vec<T>) -> T {
        let n = T::lit(parts.len() as f64);
        linalg::sum(parts) / n
    }

    /// Mean validation cross-entropy at weights `w`.
    pub fn val_loss(&self, w: &[T]) -> T {
        let n = T::lit(self.val_x.rows() as f64);
        linalg::sum((0..self.val_x.rows()).map(|j| Self::loss(self.val_x.row(j), self.val_s[j], w))) / n
    }

    /// Fraction of clean test examples classified correctly by `sign(wᵀx)`.
    pub fn test_accuracy(&self, w: &[T]) -> f64 {
        accuracy(&self.test, w)
    }

    /// Lower-level gradient and Hessian of the full objective at `(λ, w)`.
    fn lower_grad_hess(&self, lambda: &[T], w: &[T]) -> (Vec<T>, Matrix<T>) {
        let n = self.train_x.rows();
        let d = self.dims.q;
        let inv_n = T::one() / T::lit(n as f64);
        let two_c = self.reg_c + self.reg_c;
        let mut grad = linalg::scale(two_c, w);
        let mut hess = Matrix::identity(d).scaled(two_c);
        for i in 0..n {
            let x = self.train_x.row(i);
            let z = linalg::dot(w, x);
            let weight = sigmoid(lambda[i]) * inv_n;
            grad = linalg::axpy(&grad, weight, &Self::loss_grad(x, self.train_s[i], w));
            let curv = weight * sigmoid_prime(z);
            for a in 0..d {
                for b in 0..d {
                    let v = hess.get(a, b) + curv * x[a] * x[b];
                    hess.set(a, b, v);
                }
            }
        }
        (grad, hess)
    }

    fn lower_objective(&self, lambda: &[T], w: &[T]) -> T {
        let n = self.train_x.rows();
        let inv_n = T::one() / T::lit(n as f64);
        linalg::sum((0..n).map(|i| sigmoid(lambda[i]) * Self::loss(self.train_x.row(i), self.train_s[i], w))) * inv_n
            + self.reg_c * linalg::norm_sq(w)
    }

    /// Solves the lower level to `‖∇_w g‖ ≤ tol` by damped Newton.
    pub fn solve_lower(&self, lambda: &[T], tol: T) -> Result<Vec<T>> {
        if lambda.len() != self.dims.p {
            return Err(BilevelError::InvalidArgument("λ has the wrong length".into()));
        }
        let mut w = linalg::zeros(self.dims.q);
        for _ in 0..200 {
            let (grad, hess) = self.lower_grad_hess(lambda, &w);
            if linalg::norm(&grad) <= tol {
                return Ok(w);
            }
            let step = Cholesky::new(&hess)?.solve(&grad);
            let f0 = self.lower_objective(lambda, &w);
            let slope = linalg::dot(&grad, &step);
            let mut t = T::one();
            loop {
                let cand = linalg::axpy(&w, -t, &step);
                if self.lower_objective(lambda, &cand) <= f0 - T::lit(1e-4) * t * slope || t < T::lit(1e-10) {
                    w = cand;
                    break;
                }
                t *= T::lit(0.5);
            }
        }
        let (grad, _) = self.lower_grad_hess(lambda, &w);
        if linalg::norm(&grad) <= tol * T::lit(1e3) {
            Ok(w)
        } else {
            Err(BilevelError::NumericalOverflow(
                "lower-level Newton solve did not converge".into(),
            ))
        }
    }

    /// High-accuracy numerical ground truth: Newton for `w*`, direct solve for `v*`.
    ///
    /// Only advertised as a capability after
    /// [`HyperCleaning::with_numerical_reference`]; it is expensive and only
    /// as accurate as the Newton tolerance.
    pub fn numerical_ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        check_query(self.dims, pt, None, Sample::Full, Query::FValue)?;
        let tol = T::lit(1e-10);
        let y_star = self.solve_lower(&pt.x, tol)?;
        let (_, hess_at_y) = self.lower_grad_hess(&pt.x, &pt.y);
        let fy = self.grad_f_y_full(&pt.y);
        let v_star = Cholesky::new(&hess_at_y)?.solve(&fy);
        let (_, hess_star) = self.lower_grad_hess(&pt.x, &y_star);
        let v_opt = Cholesky::new(&hess_star)?.solve(&self.grad_f_y_full(&y_star));
        let at_star = Point::new(pt.x.clone(), y_star.clone());
        let grad_phi = linalg::scale(-T::one(), &self.jac_full(&at_star, &v_opt));
        Ok(GroundTruth {
            phi: self.val_loss(&y_star),
            y_star,
            v_star,
            grad_phi,
        })
    }

    fn grad_f_y_full(&self, w: &[T]) -> Vec<T> {
        Self::mean_vec(
            (0..self.val_x.rows())
                .map(|j| Self::loss_grad(self.val_x.row(j), self.val_s[j], w))
                .collect(),
        )
    }

    fn jac_full(&self, pt: &Point<T>, v: &[T]) -> Vec<T> {
        let inv_n = T::one() / T::lit(self.train_x.rows() as f64);
        (0..self.train_x.rows())
            .map(|i| self.jac_entry(pt, v, i) * inv_n)
            .collect()
    }

    /// `σ'(λᵢ) ∇ℓᵢ(w)ᵀ v`
    fn jac_entry(&self, pt: &Point<T>, v: &[T], i: usize) -> T {
        let g = Self::loss_grad(self.train_x.row(i), self.train_s[i], &pt.y);
        sigmoid_prime(pt.x[i]) * linalg::dot(&g, v)
    }
}

/// Accuracy of `sign(wᵀx)` against `split`'s labels.
pub fn accuracy<T: Scalar>(split: &Split<T>, w: &[T]) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    let correct = (0..split.len())
        .filter(|&i| {
            let z = linalg::dot(w, split.features.row(i));
            usize::from(z > T::zero()) == split.labels[i]
        })
        .count();
    correct as f64 / split.len() as f64
}

impl<T: Scalar> BilevelOracle<T> for HyperCleaning<T> {
    fn dims(&self) -> Dims {
        self.dims
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            second_order: true,
            ground_truth: self.numerical_reference,
        }
    }

    fn ground_truth(&self, pt: &Point<T>) -> Result<GroundTruth<T>> {
        if self.numerical_reference {
            self.numerical_ground_truth(pt)
        } else {
            Err(BilevelError::UnsupportedCapability(
                "hyper-cleaning ground truth is numerical; enable it with with_numerical_reference".into(),
            ))
        }
    }

    fn f_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::FValue)?;
        Ok(self.val_terms(
            s,
            |j| Self::loss(self.val_x.row(j), self.val_s[j], &pt.y),
            Self::mean_scalar,
        ))
    }

    fn g_value(&self, pt: &Point<T>, s: Sample) -> Result<T> {
        check_query(self.dims, pt, None, s, Query::GValue)?;
        Ok(match self.train_index(s) {
            Some(i) => {
                sigmoid(pt.x[i]) * Self::loss(self.train_x.row(i), self.train_s[i], &pt.y)
                    + self.reg_c * linalg::norm_sq(&pt.y)
            }
            None => self.lower_objective(&pt.x, &pt.y),
        })
    }

    fn grad_f_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFx)?;
        Ok(linalg::zeros(self.dims.p))
    }

    fn grad_f_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradFy)?;
        Ok(self.val_terms(
            s,
            |j| Self::loss_grad(self.val_x.row(j), self.val_s[j], &pt.y),
            Self::mean_vec,
        ))
    }

    fn grad_g_x(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGx)?;
        let entry = |i: usize| {
            sigmoid_prime(pt.x[i]) * Self::loss(self.train_x.row(i), self.train_s[i], &pt.y)
        };
        Ok(match self.train_index(s) {
            Some(i) => {
                let mut g = linalg::zeros(self.dims.p);
                g[i] = entry(i);
                g
            }
            None => {
                let inv_n = T::one() / T::lit(self.dims.p as f64);
                (0..self.dims.p).map(|i| entry(i) * inv_n).collect()
            }
        })
    }

    fn grad_g_y(&self, pt: &Point<T>, s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, None, s, Query::GradGy)?;
        let two_c = self.reg_c + self.reg_c;
        let term = |i: usize| {
            linalg::scale(
                sigmoid(pt.x[i]),
                &Self::loss_grad(self.train_x.row(i), self.train_s[i], &pt.y),
            )
        };
        let data = match self.train_index(s) {
            Some(i) => term(i),
            None => Self::mean_vec((0..self.dims.p).map(term).collect()),
        };
        Ok(linalg::axpy(&data, two_c, &pt.y))
    }

    fn hess_g_yy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::HessGyyVec)?;
        let two_c = self.reg_c + self.reg_c;
        let term = |i: usize| {
            let x = self.train_x.row(i);
            let z = linalg::dot(&pt.y, x);
            linalg::scale(sigmoid(pt.x[i]) * sigmoid_prime(z) * linalg::dot(x, v), x)
        };
        let data = match self.train_index(s) {
            Some(i) => term(i),
            None => Self::mean_vec((0..self.dims.p).map(term).collect()),
        };
        Ok(linalg::axpy(&data, two_c, v))
    }

    fn jac_g_xy_vec(&self, pt: &Point<T>, v: &[T], s: Sample) -> Result<Vec<T>> {
        check_query(self.dims, pt, Some(v), s, Query::JacGxyVec)?;
        Ok(match self.train_index(s) {
            Some(i) => {
                let mut g = linalg::zeros(self.dims.p);
                g[i] = self.jac_entry(pt, v, i);
                g
            }
            None => self.jac_full(pt, v),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::dataset::synth_gaussian_dataset;

    fn small() -> HyperCleaning<f64> {
        let ds = synth_gaussian_dataset(40, 12, 10, 3, 2.0, 5).unwrap();
        make_hypercleaning(&ds, 0.2, DEFAULT_REG_C, 1).unwrap()
    }

    #[test]
    fn no_corruption_keeps_labels() {
        let ds = synth_gaussian_dataset::<f64>(50, 10, 10, 2, 1.0, 3).unwrap();
        let hc = make_hypercleaning(&ds, 0.0, 0.001, 9).unwrap();
        assert_eq!(hc.observed_labels(), ds.train.labels);
        assert_eq!(hc.corrupted_count(), 0);
    }

    #[test]
    fn rejects_bad_arguments() {
        let ds = synth_gaussian_dataset::<f64>(10, 10, 10, 2, 1.0, 3).unwrap();
        assert!(make_hypercleaning(&ds, 1.0, 0.001, 0).is_err());
        assert!(make_hypercleaning(&ds, 0.1, 0.0, 0).is_err());
        let mut single = ds.clone();
        single.val.labels = vec![1; single.val.len()];
        assert!(make_hypercleaning(&single, 0.1, 0.001, 0).is_err());
        let mut empty = ds;
        empty.val = empty.val.slice(0..0);
        assert!(make_hypercleaning(&empty, 0.1, 0.001, 0).is_err());
    }

    #[test]
    fn newton_solves_lower_level() {
        let hc = small();
        let lambda = vec![0.3; hc.n_train()];
        let w = hc.solve_lower(&lambda, 1e-11).unwrap();
        let g = hc.grad_g_y(&Point::new(lambda, w), Sample::Full).unwrap();
        assert!(linalg::norm(&g) <= 1e-10);
    }

    #[test]
    fn numerical_hypergradient_matches_finite_differences() {
        let hc = small();
        let lambda: Vec<f64> = (0..hc.n_train()).map(|i| 0.1 * (i % 5) as f64 - 0.2).collect();
        let pt = Point::new(lambda.clone(), vec![0.0; 3]);
        let gt = hc.numerical_ground_truth(&pt).unwrap();
        let h = 1e-4;
        for i in [0, 7, 21] {
            let mut lp = lambda.clone();
            let mut lm = lambda.clone();
            lp[i] += h;
            lm[i] -= h;
            let fp = hc.val_loss(&hc.solve_lower(&lp, 1e-12).unwrap());
            let fm = hc.val_loss(&hc.solve_lower(&lm, 1e-12).unwrap());
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - gt.grad_phi[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{i}: {fd} vs {}", gt.grad_phi[i]);
        }
    }

    #[test]
    fn keyed_indices_cover_every_example() {
        let key = SampleKey::new(crate::oracle::Stream::LowerZeta, 3, 17);
        let mut seen: Vec<usize> = (0..40).map(|s| pick(&key.with_slot(s), 40, TRAIN_TAG)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..40).collect::<Vec<_>>());
    }
}
