
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use sigma_traj::quadrature::{expect, fourier_hermite_fit, make_rule, moment_match, GaussianBelief, RuleFamily};

const FAMILIES: [RuleFamily; 3] = [RuleFamily::Ut3, RuleFamily::Ut5, RuleFamily::Gh3];

fn double_factorial_moment(k: usize) -> f64 {
    if k % 2 == 1 {
        return 0.0;
    }
    (1..k).step_by(2).map(|v| v as f64).product()
}

/// Every exponent vector of length `n` with total degree at most `deg`.
fn exponents(n: usize, deg: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..=deg {
        for mut rest in exponents(n - 1, deg - first) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// `∫ f(x) φ(x) dx` on `[-10, 10]` by composite Simpson.
fn dense_gaussian_integral(f: impl Fn(f64) -> f64) -> f64 {
    let n = 20_000;
    let (a, b) = (-10.0_f64, 10.0_f64);
    let h = (b - a) / n as f64;
    let phi = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = f(a) * phi(a) + f(b) * phi(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x) * phi(x);
    }
    s * h / 3.0
}

#[test]
fn rule_moments_hold_up_to_dimension_six() {
    for family in FAMILIES {
        for n in 1..=6 {
            let rule = make_rule::<f64>(family, n).unwrap();
            assert_eq!(Some(rule.len()), family.point_count(n));
            let w: f64 = rule.weights().iter().sum();
            assert!((w - 1.0).abs() < 1e-12, "{family} n={n}");
            let mut mean = DVector::<f64>::zeros(n);
            let mut second = DMatrix::<f64>::zeros(n, n);
            for (p, &w) in rule.points().column_iter().zip(rule.weights()) {
                mean += p * w;
                second += p * p.transpose() * w;
            }
            assert!(mean.amax() < 1e-12, "{family} n={n}");
            assert!((second - DMatrix::identity(n, n)).amax() < 1e-10, "{family} n={n}");
        }
    }
}

#[test]
fn rules_integrate_monomials_to_their_degree() {
    for family in FAMILIES {
        for n in 1..=3 {
            let rule = make_rule::<f64>(family, n).unwrap();
            for e in exponents(n, family.degree()) {
                let exact: f64 = e.iter().map(|&k| double_factorial_moment(k)).product();
                let quad: f64 = rule
                    .points()
                    .column_iter()
                    .zip(rule.weights())
                    .map(|(p, &w)| w * e.iter().enumerate().map(|(i, &k)| p[i].powi(k as i32)).product::<f64>())
                    .sum();
                assert!((quad - exact).abs() < 1e-9, "{family} n={n} {e:?}: {quad} vs {exact}");
            }
        }
    }
}

#[test]
fn gh3_fourth_moment_matches_dense_integration() {
    let rule = make_rule::<f64>(RuleFamily::Gh3, 1).unwrap();
    let b = GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let v = expect(&rule, &b, |x| DVector::from_element(1, x[0].powi(4))).unwrap()[0];
    let oracle = dense_gaussian_integral(|x| x.powi(4));
    assert!((v - oracle).abs() < 1e-8 && (v - 3.0).abs() < 1e-12);
}

#[test]
fn ut5_chi_square_moments_match_dense_integration() {
    let rule = make_rule::<f64>(RuleFamily::Ut5, 1).unwrap();
    let b = GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let mm = moment_match(&rule, &b, |x| DVector::from_element(1, x[0] * x[0])).unwrap();
    let mean = dense_gaussian_integral(|x| x * x);
    let var = dense_gaussian_integral(|x| (x * x - mean).powi(2));
    assert!((mm.mean[0] - mean).abs() < 1e-8);
    assert!((mm.covariance[(0, 0)] - var).abs() < 1e-8);
}

#[test]
fn gh3_cubic_gradient_coefficient_matches_dense_integration() {
    let rule = make_rule::<f64>(RuleFamily::Gh3, 1).unwrap();
    let b = GaussianBelief::new(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap();
    let fit = fourier_hermite_fit(&rule, &b, |x| x[0].powi(3)).unwrap();
    let oracle = dense_gaussian_integral(|x| x.powi(4));
    assert!((fit.gradient[0] - oracle).abs() < 1e-8);
}

fn pd_from(entries: &[f64], n: usize) -> DMatrix<f64> {
    let m = DMatrix::from_row_slice(n, n, &entries[..n * n]);
    &m * m.transpose() + DMatrix::identity(n, n) * 0.1
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fourier_hermite_recovers_quadratics(
        n in 1usize..=4,
        h in prop::collection::vec(-2.0f64..2.0, 16),
        g in prop::collection::vec(-2.0f64..2.0, 4),
        s in prop::collection::vec(-1.0f64..1.0, 16),
        mu in prop::collection::vec(-1.0f64..1.0, 4),
        c in -3.0f64..3.0,
    ) {
        let hm = DMatrix::from_row_slice(n, n, &h[..n * n]);
        let hm = (&hm + hm.transpose()) * 0.5;
        let gv = DVector::from_column_slice(&g[..n]);
        let mean = DVector::from_column_slice(&mu[..n]);
        let belief = GaussianBelief::new(mean.clone(), pd_from(&s, n)).unwrap();
        let f = |x: &DVector<f64>| c + gv.dot(x) + 0.5 * (&hm * x).dot(x);
        for family in [RuleFamily::Ut5, RuleFamily::Gh3] {
            let rule = make_rule::<f64>(family, n).unwrap();
            let fit = fourier_hermite_fit(&rule, &belief, f).unwrap();
            prop_assert!((fit.constant - f(&mean)).abs() < 1e-7);
            prop_assert!((&fit.gradient - (&gv + &hm * &mean)).amax() < 1e-7);
            prop_assert!((&fit.hessian - &hm).amax() < 1e-7);
            prop_assert_eq!(fit.hessian.clone(), fit.hessian.transpose());
        }
    }

    #[test]
    fn moment_match_is_exact_on_affine_maps(
        n in 1usize..=4,
        m in 1usize..=3,
        a in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        s in prop::collection::vec(-1.0f64..1.0, 16),
        mu in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let am = DMatrix::from_row_slice(m, n, &a[..m * n]);
        let bv = DVector::from_column_slice(&b[..m]);
        let cov = pd_from(&s, n);
        let mean = DVector::from_column_slice(&mu[..n]);
        let belief = GaussianBelief::new(mean.clone(), cov.clone()).unwrap();
        for family in [RuleFamily::Ut3, RuleFamily::Ut5, RuleFamily::Gh3] {
            let rule = make_rule::<f64>(family, n).unwrap();
            let mm = moment_match(&rule, &belief, |x| &am * x + &bv).unwrap();
            prop_assert!((&mm.mean - (&am * &mean + &bv)).amax() < 1e-10);
            prop_assert!((&mm.covariance - &am * &cov * am.transpose()).amax() < 1e-10);
            prop_assert!((&mm.cross_covariance - &cov * am.transpose()).amax() < 1e-10);
            prop_assert_eq!(mm.covariance.clone(), mm.covariance.transpose());
        }
    }
}

#[test]
fn gh3_is_refused_beyond_its_dimension_cap() {
    assert!(make_rule::<f64>(RuleFamily::Gh3, 18).is_err());
    assert_eq!(make_rule::<f64>(RuleFamily::Ut5, 18).unwrap().len(), 649);
    assert_eq!(make_rule::<f64>(RuleFamily::Ut3, 18).unwrap().len(), 37);
}

#[test]
fn single_precision_rules_hold_moments() {
    let rule = make_rule::<f32>(RuleFamily::Ut5, 3).unwrap();
    let w: f32 = rule.weights().iter().sum();
    assert!((w - 1.0).abs() < 1e-5);
}
