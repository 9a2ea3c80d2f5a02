use bilevel::estimators::{fd_hessian_vec, fd_jacobian_vec, FdParams};
use bilevel::linalg::{self, Matrix};
use bilevel::oracle::{BilevelOracle, Point, Sample, SampleKey, Stream};
use bilevel::problems::dataset::synth_gaussian_dataset;
use bilevel::problems::hypercleaning::{make_hypercleaning, HyperCleaning};
use bilevel::problems::logistic::make_logistic;
use bilevel::problems::quadratic::{make_quadratic, QuadraticProblem, QuadraticSpec};
use bilevel::problems::NoiseLevels;
use bilevel::BilevelError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn key(stream: Stream, index: u64) -> Sample {
    Sample::Key(SampleKey::new(stream, 3, index))
}

fn small_cleaning(n_train: usize) -> HyperCleaning<f64> {
    let ds = synth_gaussian_dataset::<f64>(n_train, 6, 6, 3, 2.0, 5).unwrap();
    make_hypercleaning(&ds, 0.25, 0.001, 9).unwrap()
}

fn random_point(rng: &mut ChaCha8Rng, p: usize, q: usize) -> Point<f64> {
    Point::new(linalg::standard_normal(rng, p), linalg::standard_normal(rng, q))
}

fn rel_close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = linalg::norm(b).max(f64::MIN_POSITIVE);
    linalg::norm(&linalg::sub(a, b)) <= rel * scale
}

#[test]
fn hypercleaning_upper_gradient_matches_fd_of_sampled_loss() {
    let hc = small_cleaning(4);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-6;
    for i in 0..20 {
        let pt = random_point(&mut rng, 4, 3);
        let s = key(Stream::UpperXi, i);
        let grad = hc.grad_f_x(&pt, s).unwrap();
        for j in 0..4 {
            let mut xp = pt.x.clone();
            let mut xm = pt.x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (hc.f_value(&Point::new(xp, pt.y.clone()), s).unwrap()
                - hc.f_value(&Point::new(xm, pt.y.clone()), s).unwrap())
                / (2.0 * h);
            // the validation loss does not depend on the example weights
            assert_eq!(fd, 0.0);
            assert_eq!(grad[j], 0.0);
        }
    }
}

#[test]
fn hypercleaning_lower_x_gradient_matches_fd_of_sampled_loss() {
    let hc = small_cleaning(4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for i in 0..20 {
        let pt = random_point(&mut rng, 4, 3);
        let s = key(Stream::UpperXi, i);
        let grad = hc.grad_g_x(&pt, s).unwrap();
        let fd: Vec<f64> = (0..4)
            .map(|j| {
                let mut xp = pt.x.clone();
                let mut xm = pt.x.clone();
                xp[j] += h;
                xm[j] -= h;
                (hc.g_value(&Point::new(xp, pt.y.clone()), s).unwrap()
                    - hc.g_value(&Point::new(xm, pt.y.clone()), s).unwrap())
                    / (2.0 * h)
            })
            .collect();
        assert!(rel_close(&grad, &fd, 1e-5), "{grad:?} vs {fd:?}");
    }
}

#[test]
fn hypercleaning_y_gradients_match_fd() {
    let hc = small_cleaning(4);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for i in 0..20 {
        let pt = random_point(&mut rng, 4, 3);
        for (stream, upper) in [(Stream::LsPsi, true), (Stream::LowerZeta, false)] {
            let s = key(stream, i);
            let grad = if upper { hc.grad_f_y(&pt, s) } else { hc.grad_g_y(&pt, s) }.unwrap();
            let fd: Vec<f64> = (0..3)
                .map(|j| {
                    let mut yp = pt.y.clone();
                    let mut ym = pt.y.clone();
                    yp[j] += h;
                    ym[j] -= h;
                    let (a, b) = (Point::new(pt.x.clone(), yp), Point::new(pt.x.clone(), ym));
                    if upper {
                        (hc.f_value(&a, s).unwrap() - hc.f_value(&b, s).unwrap()) / (2.0 * h)
                    } else {
                        (hc.g_value(&a, s).unwrap() - hc.g_value(&b, s).unwrap()) / (2.0 * h)
                    }
                })
                .collect();
            assert!(rel_close(&grad, &fd, 1e-5), "{grad:?} vs {fd:?}");
        }
    }
}

#[test]
fn hypercleaning_full_batch_is_mean_of_all_slots() {
    let hc = small_cleaning(12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let pt = random_point(&mut rng, 12, 3);
    let v = linalg::standard_normal(&mut rng, 3);
    let avg = |n: usize, stream: Stream, f: &dyn Fn(Sample) -> Vec<f64>| {
        let base = SampleKey::new(stream, 77, 5);
        let mut acc = vec![0.0; f(Sample::Full).len()];
        for slot in 0..n as u32 {
            acc = linalg::add(&acc, &f(Sample::Key(base.with_slot(slot))));
        }
        linalg::scale(1.0 / n as f64, &acc)
    };
    type Query<'a> = Box<dyn Fn(Sample) -> Vec<f64> + 'a>;
    let checks: Vec<(usize, Stream, Query)> = vec![
        (6, Stream::LsPsi, Box::new(|s| hc.grad_f_y(&pt, s).unwrap())),
        (12, Stream::LowerZeta, Box::new(|s| hc.grad_g_y(&pt, s).unwrap())),
        (12, Stream::UpperXi, Box::new(|s| hc.grad_g_x(&pt, s).unwrap())),
        (12, Stream::LsPsi, Box::new(|s| hc.hess_g_yy_vec(&pt, &v, s).unwrap())),
        (12, Stream::UpperXi, Box::new(|s| hc.jac_g_xy_vec(&pt, &v, s).unwrap())),
    ];
    for (n, stream, f) in &checks {
        let mean = avg(*n, *stream, f.as_ref());
        let full = f(Sample::Full);
        for (a, b) in mean.iter().zip(&full) {
            assert!((a - b).abs() <= 1e-12, "{mean:?} vs {full:?}");
        }
    }
}

#[test]
fn quadratic_lower_gradient_is_unbiased() {
    let sigma = 0.1;
    let prob = make_quadratic::<f64>(10, 10, 2.0, 4.0, NoiseLevels::uniform(sigma), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pt = random_point(&mut rng, 10, 10);
    let exact = prob.grad_g_y(&pt, Sample::Full).unwrap();
    let n = 100_000u64;
    let mut acc = vec![0.0; 10];
    for i in 0..n {
        acc = linalg::add(&acc, &prob.grad_g_y(&pt, key(Stream::LowerZeta, i)).unwrap());
    }
    let mean = linalg::scale(1.0 / n as f64, &acc);
    let tol = 3.0 * sigma / (n as f64).sqrt();
    for (m, e) in mean.iter().zip(&exact) {
        assert!((m - e).abs() <= tol, "{m} vs {e}, tol {tol}");
    }
}

#[test]
fn streams_are_independent_under_one_seed() {
    // lower-level noise under ζ and ψ with equal (seed, index) must not coincide
    let prob = make_quadratic::<f64>(4, 4, 1.0, 2.0, NoiseLevels::uniform(1.0), 1).unwrap();
    let pt = Point::new(vec![0.0; 4], vec![0.0; 4]);
    let n = 4000u64;
    let mut cross = 0.0;
    for i in 0..n {
        let a = prob.grad_g_y(&pt, key(Stream::LowerZeta, i)).unwrap();
        let b = prob.grad_g_y(&pt, key(Stream::LsPsi, i)).unwrap();
        let full = prob.grad_g_y(&pt, Sample::Full).unwrap();
        cross += (a[0] - full[0]) * (b[0] - full[0]);
    }
    let corr = cross / n as f64;
    assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "correlation {corr}");
}

#[test]
fn equal_keys_give_bit_identical_gradients() {
    let prob = make_logistic::<f64>(3, 4, 5, 1.0, 0.5, NoiseLevels::uniform(0.2), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let pt = random_point(&mut rng, 3, 4);
    for stream in [Stream::LowerZeta, Stream::LsPsi] {
        let a = prob.grad_g_y(&pt, key(stream, 9)).unwrap();
        let b = prob.clone().grad_g_y(&pt.clone(), key(stream, 9)).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn ground_truth_matches_fd_of_phi_and_optimality() {
    let prob = make_quadratic::<f64>(6, 5, 0.5, 3.0, NoiseLevels::default(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    for _ in 0..100 {
        let x = linalg::standard_normal(&mut rng, 6);
        let y = linalg::standard_normal(&mut rng, 5);
        let gt = prob.ground_truth(&Point::new(x.clone(), y.clone())).unwrap();
        let phi = |x: Vec<f64>| prob.ground_truth(&Point::new(x, vec![0.0; 5])).unwrap().phi;
        for j in 0..6 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (phi(xp) - phi(xm)) / (2.0 * h);
            assert!(
                (fd - gt.grad_phi[j]).abs() <= 1e-6 * gt.grad_phi[j].abs().max(linalg::norm(&gt.grad_phi)),
                "coordinate {j}: {fd} vs {}",
                gt.grad_phi[j]
            );
        }
        let at_star = Point::new(x.clone(), gt.y_star.clone());
        assert!(linalg::norm(&prob.grad_g_y(&at_star, Sample::Full).unwrap()) <= 1e-10);
        // v* solves the linear system at the queried (x, y)
        let pt = Point::new(x, y);
        let hv = prob.hess_g_yy_vec(&pt, &gt.v_star, Sample::Full).unwrap();
        let fy = prob.grad_f_y(&pt, Sample::Full).unwrap();
        assert!(linalg::norm(&linalg::sub(&hv, &fy)) <= 1e-10);
    }
}

#[test]
fn v_star_of_isotropic_lower_level_is_scaled_upper_gradient() {
    let mu = 2.0;
    let c = vec![1.5f64, -3.0, 0.25];
    let prob = QuadraticProblem::new(QuadraticSpec {
        q_mat: Matrix::identity(3).scaled(mu),
        p_mat: Matrix::zeros(3, 2),
        c: vec![0.0; 3],
        a_mat: Matrix::identity(2),
        a: vec![0.0; 2],
        b: linalg::scale(-1.0, &c),
        noise: NoiseLevels::default(),
        y_radius: 1.0,
    })
    .unwrap();
    let gt = prob.ground_truth(&Point::new(vec![0.4, 0.1], vec![0.0; 3])).unwrap();
    for (a, b) in gt.v_star.iter().zip(linalg::scale(1.0 / mu, &c)) {
        assert!((a - b).abs() <= 1e-15f64, "{a} vs {b}");
    }
}

/// FD products at δ = 1e-5 agree with the advertised exact ones.
fn assert_capability_honest<O: BilevelOracle<f64>>(oracle: &O, seed: u64) {
    assert!(oracle.capabilities().second_order);
    let dims = oracle.dims();
    let fd = FdParams::new(1e-5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..100 {
        let pt = random_point(&mut rng, dims.p, dims.q);
        let dir: Vec<f64> = linalg::standard_normal(&mut rng, dims.q);
        let v = linalg::scale(rng.random::<f64>() / linalg::norm(&dir), &dir);
        let kh = key(Stream::LsPsi, i);
        let kj = key(Stream::UpperXi, i);
        let h_exact = oracle.hess_g_yy_vec(&pt, &v, kh).unwrap();
        let h_fd = fd_hessian_vec(oracle, &pt, &v, fd, kh).unwrap();
        let j_exact = oracle.jac_g_xy_vec(&pt, &v, kj).unwrap();
        let j_fd = fd_jacobian_vec(oracle, &pt, &v, fd, kj).unwrap();
        assert!(linalg::norm(&linalg::sub(&h_exact, &h_fd)) <= 1e-6 * (1.0 + linalg::norm(&h_exact)));
        assert!(linalg::norm(&linalg::sub(&j_exact, &j_fd)) <= 1e-6 * (1.0 + linalg::norm(&j_exact)));
    }
}

#[test]
fn second_order_capability_is_honest() {
    assert_capability_honest(&make_quadratic::<f64>(5, 4, 1.0, 3.0, NoiseLevels::uniform(0.3), 1).unwrap(), 10);
    assert_capability_honest(&make_logistic::<f64>(5, 4, 6, 1.0, 0.7, NoiseLevels::uniform(0.3), 2).unwrap(), 11);
    assert_capability_honest(&small_cleaning(30), 12);
}

#[test]
fn missing_capabilities_are_reported() {
    let hc = small_cleaning(4);
    let pt = Point::new(vec![0.0; 4], vec![0.0; 3]);
    assert!(matches!(hc.ground_truth(&pt), Err(BilevelError::UnsupportedCapability(_))));
    let wrapped = bilevel::oracle::FirstOrderOnly(hc);
    assert!(!wrapped.capabilities().second_order);
    assert!(matches!(
        wrapped.hess_g_yy_vec(&pt, &[0.0; 3], Sample::Full),
        Err(BilevelError::UnsupportedCapability(_))
    ));
}
