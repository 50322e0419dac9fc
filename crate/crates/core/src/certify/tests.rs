use std::sync::Arc;

use proptest::prelude::*;

use super::*;
use crate::barriers::build_barriers;
use crate::bundle::{coefficients, Convention, MetricWeights, Root, SubharmonicDatum};
use crate::grid::{ConformalFactor, DomainSpec};
use crate::solver::{residual_strong, residual_weak, TestBump};

fn disk(radius: f64, h: f64) -> DiscreteDomain {
    DomainSpec::disk(0.0, 0.0, radius, h).build().unwrap()
}

fn wavy(dom: &DiscreteDomain, r: usize, amp: f64, seed: f64) -> VField {
    VField::from_leading(
        (0..r - 1)
            .map(|j| {
                let p = seed + 1.3 * j as f64;
                ScalarField::from_fn(dom, move |x, y| amp * ((2.0 + p) * x + p).sin() * (1.5 * y - p).cos())
            })
            .collect(),
    )
}

fn rough_k(dom: &DiscreteDomain, r: usize) -> CoefficientSet {
    let mut k: Vec<ScalarField> = (0..r - 1)
        .map(|j| ScalarField::from_fn(dom, move |x, y| 1.0 + 0.3 * ((j + 1) as f64 * x - y).sin()))
        .collect();
    k.push(ScalarField::from_fn(dom, |x, y| (x - 0.05).hypot(y + 0.02)));
    CoefficientSet { k }
}

#[test]
fn certificate_pass_flag_matches_tolerance() {
    let c = Certificate::new("x", 0.5, None, 0.5);
    assert!(c.pass);
    assert!(!c.with_tolerance(0.49).pass);
    let mut buf = Vec::new();
    write_certificates_csv(&mut buf, &[c, Certificate::new("y", 0.0, Some((0.25, -1.0)), 1e-3)]).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "name,violation,tolerance,pass,x,y");
    assert_eq!(lines[1], "x,0.5,0.5,true,nan,nan");
    assert_eq!(lines[2], "y,0,0.001,true,0.25,-1");
}

#[test]
fn far_log_is_harmonic() {
    let d = disk(1.0, 1.0 / 32.0);
    let u = ScalarField::from_fn(&d, |x, y| (x - 60.0).hypot(y - 1.0).ln());
    let c = check_subharmonic(&u, &d, 1e-8, None).unwrap();
    assert!(c.pass, "{}", c.violation);
}

#[test]
fn concave_paraboloid_fails_by_four() {
    let d = disk(1.0, 1.0 / 16.0);
    let u = ScalarField::from_fn(&d, |x, y| -(x * x + y * y));
    let c = check_subharmonic(&u, &d, 1e-8, None).unwrap();
    assert!(!c.pass);
    assert!((c.violation - 4.0).abs() < 1e-9);
    // the convex one is fine
    let c = check_subharmonic(&u.map(|v| -v), &d, 1e-8, None).unwrap();
    assert!(c.pass);
}

#[test]
fn mollified_max_of_harmonics_passes() {
    let h = 1.0 / 32.0;
    let d = disk(1.0, h);
    let u = ScalarField::from_fn(&d, |x, y| (x * x - y * y).max(0.3 * x + 0.1 - 0.5 * y));
    let c = check_subharmonic(&u, &d, 1e-10, Some(4.0 * h)).unwrap();
    assert!(c.pass, "{}", c.violation);
    assert!(check_subharmonic(&u, &d, 1e-10, Some(4.0)).is_err());
}

#[test]
fn prop2_identity_case() {
    let d = disk(0.3, 1.0 / 32.0);
    let xi = wavy(&d, 3, 0.5, 1.0);
    let res = residual_strong(&xi, &rough_k(&d, 3), None, &d);
    let c = check_prop2(&xi, &xi, &res, &res, &d, 1e-12);
    assert!(c.pass);
    assert_eq!(c.violation, 0.0);
}

#[test]
fn prop2_two_starts() {
    let d = disk(0.3, 1.0 / 32.0);
    let k = rough_k(&d, 3);
    let eta = wavy(&d, 3, 0.3, 0.4);
    let o = SolveOptions::default();
    let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
    let a = solve_newton(&k, &eta, &d, Some(&b), Start::Plus, &o).unwrap();
    let c = solve_newton(&k, &eta, &d, Some(&b), Start::Minus, &o).unwrap();
    let z = VField::zeros(&d, 3);
    let cert = check_prop2(&a.xi, &c.xi, &z, &z, &d, 10.0 * d.h() * d.h());
    assert!(cert.pass, "{}", cert.violation);
}

#[test]
fn prop3_trivial_equality() {
    let d = disk(1.0, 1.0 / 16.0);
    let c = check_prop3(&VField::zeros(&d, 3), &CoefficientSet::unit(&d, 3), &d, 1e-12).unwrap();
    assert!(c.pass);
    assert!(c.violation.abs() < 1e-12);
}

#[test]
fn prop3_all_skipped_is_an_error() {
    let d = disk(1.0, 1.0 / 8.0);
    let mut k = CoefficientSet::unit(&d, 2);
    k.k[1] = ScalarField::zeros(&d);
    assert!(check_prop3(&VField::zeros(&d, 2), &k, &d, 1.0).is_err());
}

#[test]
fn prop3_at_radial_solution() {
    let d = disk(1.0, 1.0 / 64.0);
    let mut k = CoefficientSet::unit(&d, 2);
    k.k[1] = ScalarField::from_fn(&d, |x, y| x * x + y * y);
    let rep = solve_newton(&k, &VField::zeros(&d, 2), &d, None, Start::Zero, &SolveOptions::default()).unwrap();
    let tol = prop3_tolerance(&rep.xi, &k, &d);
    let c = check_prop3(&rep.xi, &k, &d, tol).unwrap();
    assert!(c.pass, "{} > {}", c.violation, tol);

    // the grid solution tracks the one-dimensional reference
    let oracle = radial_oracle(&RadialProblem {
        k: vec![Arc::new(|_t: f64| 1.0), Arc::new(|t: f64| t * t)],
        eta: vec![0.0, 0.0],
        radius: 1.0,
        n: 2048,
    })
    .unwrap();
    let mut worst: f64 = 0.0;
    for n in d.nodes() {
        let (x, y) = d.coords(n);
        worst = worst.max((rep.xi.comps[0].values[n] - oracle.eval(x.hypot(y))[0]).abs());
    }
    assert!(worst < 5e-3, "{worst}");
}

#[test]
fn prop3_catches_a_non_solution() {
    // log of the total mass is strictly concave here, the wrong way round
    let d = disk(0.5, 1.0 / 32.0);
    let xi = VField::from_leading(vec![ScalarField::from_fn(&d, |x, y| 2.0 * (x * x + y * y) - 1.0)]);
    let k = CoefficientSet::unit(&d, 2);
    let c = check_prop3(&xi, &k, &d, prop3_tolerance(&xi, &k, &d)).unwrap();
    assert!(!c.pass);
    assert!(c.violation > 1.0, "{}", c.violation);
}

#[test]
fn prop3_absorbs_lattice_artefacts_near_off_grid_roots() {
    let d = disk(0.25, 1.0 / 64.0);
    let datum = SubharmonicDatum::PolynomialPower {
        roots: vec![Root { re: 0.05, im: -0.02, mult: 1 }],
        power: 1,
    };
    let k = coefficients(&MetricWeights::flat(&d, 2), &datum, &d, Convention::Norm).unwrap();
    let eta = wavy(&d, 2, 0.3, 1.0);
    let rep = solve_newton(&k, &eta, &d, None, Start::Zero, &SolveOptions::default()).unwrap();
    let tol = prop3_tolerance(&rep.xi, &k, &d);
    let p = check_prop3_detailed(&rep.xi, &k, &d, tol).unwrap();
    assert!(p.corrected > 0 && p.max_defect > tol, "{} {}", p.corrected, p.max_defect);
    assert!(p.skipped_zero == 0);
    assert!(p.certificate.pass, "{} > {}", p.certificate.violation, tol);
    // the relaxed neighbourhood is also covered in the weak sense
    let bump = [TestBump { center: (0.05, -0.02), scale: 4.0 * d.h(), amplitude: 1.0 }];
    assert!(residual_weak(&rep.xi, &k, None, &d, &bump).max_abs() <= 1e-6);
}

#[test]
fn prop3_with_gaussian_conformal_factor() {
    let d = DomainSpec::disk(0.0, 0.0, 0.5, 1.0 / 32.0)
        .with_lambda(ConformalFactor::Gaussian { a: 1.0 })
        .build()
        .unwrap();
    let w = MetricWeights::flat(&d, 3);
    let datum = SubharmonicDatum::PolynomialPower {
        roots: vec![Root { re: 0.1, im: -0.05, mult: 1 }],
        power: 1,
    };
    for conv in [Convention::Norm, Convention::NormSquared] {
        let k = coefficients(&w, &datum, &d, conv).unwrap();
        let rep = solve_newton(&k, &VField::zeros(&d, 3), &d, None, Start::Zero, &SolveOptions::default()).unwrap();
        let tol = prop3_tolerance(&rep.xi, &k, &d);
        let c = check_prop3(&rep.xi, &k, &d, tol).unwrap();
        assert!(c.pass, "{conv}: {} > {}", c.violation, tol);
    }
}

#[test]
fn lemma1_collapses_to_precondition() {
    let d = disk(1.0, 1.0 / 32.0);
    let f = ScalarField::from_fn(&d, |x, y| (x + 0.3 * y).sin());
    let ft = euclidean_laplacian(&f, &d).map(|v| v + 0.1);
    let out = check_lemma1(&[f.clone(), f.clone(), f], &[ft.clone(), ft.clone(), ft], &d, 1e-10, None).unwrap();
    assert!(out.pass());
    // equal components: the log-sum-exp inequality has margin 0.1
    assert!(out.inequality.violation == 0.0);
}

#[test]
fn lemma1_precondition_failure_is_distinct() {
    let d = disk(1.0, 1.0 / 16.0);
    let f = ScalarField::from_fn(&d, |x, y| x * y);
    let ft = euclidean_laplacian(&f, &d).map(|v| v - 1.0);
    let out = check_lemma1(&[f.clone(), f], &[ft.clone(), ft], &d, 1e-10, None).unwrap();
    assert!(!out.precondition.pass);
    assert_eq!(out.precondition.name, "lemma1-precondition");
    assert!(!out.pass());
}

#[test]
fn lemma1_mollified_log_type() {
    let h = 1.0 / 32.0;
    let d = disk(1.0, h);
    let g = vec![
        ScalarField::from_fn(&d, move |x, y| 0.5 * ((x - 0.1).powi(2) + y * y + h * h).ln()),
        ScalarField::from_fn(&d, |x, y| x.max(0.5 * y) - 0.2),
        ScalarField::from_fn(&d, |x, y| (x + 0.2).hypot(y - 0.1) + 0.3 * x),
    ];
    let zero = vec![ScalarField::zeros(&d); 3];
    let out = check_lemma1(&g, &zero, &d, 1e-10, Some(4.0 * h)).unwrap();
    assert!(out.precondition.pass, "{}", out.precondition.violation);
    assert!(out.inequality.pass, "{}", out.inequality.violation);
}

#[test]
fn uniqueness_trivial_instance() {
    let d = disk(0.3, 1.0 / 32.0);
    let k = CoefficientSet::unit(&d, 3);
    let eta = VField::zeros(&d, 3);
    let o = SolveOptions::default();
    let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
    let u = uniqueness_probe(&k, &eta, &b, &d, &o, 1e-10).unwrap();
    assert!(u.difference.pass, "{}", u.difference.violation);
    assert!(u.prop2.pass);
}

#[test]
fn uniqueness_smooth_and_rough() {
    let d = disk(0.3, 1.0 / 32.0);
    let o = SolveOptions::default();
    for (k, tol) in [
        (
            CoefficientSet {
                k: vec![
                    ScalarField::from_fn(&d, |x, _| 1.0 + 0.5 * x),
                    ScalarField::from_fn(&d, |x, y| 1.2 + x * y),
                ],
            },
            1e-6,
        ),
        (rough_k(&d, 2), 1e-5),
    ] {
        let eta = wavy(&d, 2, 0.4, 2.0);
        let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
        let u = uniqueness_probe(&k, &eta, &b, &d, &o, tol).unwrap();
        assert!(u.difference.pass, "{}", u.difference.violation);
        assert!(u.prop2.pass, "{}", u.prop2.violation);
        let bumps = [
            TestBump { center: (0.05, -0.02), scale: 0.08, amplitude: 1.0 },
            TestBump { center: (-0.1, 0.05), scale: 0.1, amplitude: 1.0 },
        ];
        for xi in [&u.newton.xi, &u.picard.xi] {
            assert!(residual_weak(xi, &k, None, &d, &bumps).max_abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn prop2_holds_for_arbitrary_fields(a in 0.0f64..2.0, s1 in 0.0f64..6.0, s2 in 0.0f64..6.0, r in 2usize..5) {
        let d = disk(0.3, 1.0 / 16.0);
        let k = rough_k(&d, r);
        let xi = wavy(&d, r, a, s1);
        let xj = wavy(&d, r, 1.0, s2);
        let ri = residual_strong(&xi, &k, None, &d);
        let rj = residual_strong(&xj, &k, None, &d);
        let c = check_prop2(&xi, &xj, &ri, &rj, &d, 1e-9);
        prop_assert!(c.pass, "{}", c.violation);
    }

    #[test]
    fn certificates_are_monotone_in_tolerance(v in 0.0f64..1.0, t in 0.0f64..1.0, extra in 0.0f64..1.0) {
        let c = Certificate::new("p", v, None, t);
        if c.pass {
            prop_assert!(c.with_tolerance(t + extra).pass);
        }
    }
}
