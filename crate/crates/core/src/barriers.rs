//! Sub/supersolution pair `ξ⁻ = ρ + φ`, `ξ⁺ = -ρ + φ` and a discrete
//! verifier for its defining inequalities.

use std::io::Write;
use std::path::Path;

use crate::bundle::CoefficientSet;
use crate::elliptic::{solve_semilinear_kw, PoissonOperator, SolveStats, SolverOptions};
use crate::error::{Error, Result};
use crate::format::g17;
use crate::grid::{laplacian, DiscreteDomain, ScalarField, VField};

#[derive(Clone, Debug)]
pub struct BarrierPair {
    pub minus: VField,
    pub plus: VField,
    pub rho: ScalarField,
    pub phis: Vec<ScalarField>,
    pub f: ScalarField,
    pub stats: SolveStats,
}

impl BarrierPair {
    pub fn rank(&self) -> usize {
        self.phis.len()
    }
}

/// Harmonic extensions of each component of the boundary data.
pub fn boundary_harmonics(eta: &VField, dom: &DiscreteDomain, opts: &SolverOptions) -> Result<Vec<ScalarField>> {
    let defect = dom
        .boundary()
        .iter()
        .map(|&k| {
            let v = eta.at(k);
            v.iter().sum::<f64>().abs() / (1.0 + v.iter().map(|x| x.abs()).sum::<f64>())
        })
        .fold(0.0, f64::max);
    if defect > 1e-12 {
        return Err(Error::Invalid(format!("boundary data are not zero-sum (defect {defect:e})")));
    }
    let op = PoissonOperator::new(dom, opts)?;
    let zero = ScalarField::zeros(dom);
    eta.comps
        .iter()
        .map(|c| op.solve(&zero, c, None).map(|(u, _)| u))
        .collect()
}

/// Pointwise minimum of `-4 k_{j-1} e^{φ_j - φ_{j-1}}` and
/// `-4 k_j e^{φ_{j+1} - φ_j}` over all cyclic `j`.
pub fn envelope_f(k: &CoefficientSet, phis: &[ScalarField], dom: &DiscreteDomain) -> ScalarField {
    let r = k.rank();
    let mut f = ScalarField::zeros(dom);
    for n in dom.nodes() {
        let term = |a: usize, b: usize, kk: usize| -4.0 * k.k[kk].values[n] * (phis[b].values[n] - phis[a].values[n]).exp();
        let mut m = f64::INFINITY;
        for j in 0..r {
            let prev = (j + r - 1) % r;
            let next = (j + 1) % r;
            m = m.min(term(prev, j, prev)).min(term(j, next, j));
        }
        f.values[n] = m;
    }
    f
}

/// Builds the barrier pair for gauge-reduced coefficients.
pub fn build_barriers(k: &CoefficientSet, eta: &VField, dom: &DiscreteDomain, opts: &SolverOptions) -> Result<BarrierPair> {
    k.validate(dom)?;
    let r = k.rank();
    if eta.rank() != r {
        return Err(Error::Invalid("rank mismatch between coefficients and boundary data".into()));
    }
    let phis = boundary_harmonics(eta, dom, opts)?;
    let f = envelope_f(k, &phis, dom);
    let (rho, stats) = solve_semilinear_kw(&f, r as f64, dom, opts)?;
    let side = |sign: f64| {
        VField::from_leading(
            phis[..r - 1]
                .iter()
                .map(|p| p.zip_map(&rho, |a, b| a + sign * b))
                .collect(),
        )
    };
    Ok(BarrierPair {
        minus: side(1.0),
        plus: side(-1.0),
        rho,
        phis,
        f,
        stats,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BarrierCheck {
    pub id: String,
    /// Largest positive violation, normalized by `1 + |right-hand side|`.
    pub violation: f64,
    pub location: Option<(f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct BarrierReport {
    pub checks: Vec<BarrierCheck>,
    pub tol: f64,
}

impl BarrierReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.violation <= self.tol)
    }

    pub fn max_violation(&self) -> f64 {
        self.checks.iter().map(|c| c.violation).fold(0.0, f64::max)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "inequality-id,max-violation,node-x,node-y")?;
        for c in &self.checks {
            let (x, y) = c
                .location
                .map(|(x, y)| (g17(x), g17(y)))
                .unwrap_or_else(|| ("nan".into(), "nan".into()));
            writeln!(w, "{},{},{},{}", c.id, g17(c.violation), x, y)?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

pub fn default_barrier_tol(dom: &DiscreteDomain) -> f64 {
    10.0 * dom.h() * dom.h()
}

struct Acc {
    id: String,
    violation: f64,
    location: Option<(f64, f64)>,
}

impl Acc {
    fn new(id: impl Into<String>) -> Self {
        Acc {
            id: id.into(),
            violation: 0.0,
            location: None,
        }
    }

    /// Records a violation of `lhs ≤ rhs`.
    fn le(&mut self, lhs: f64, rhs: f64, at: (f64, f64)) {
        let v = (lhs - rhs) / (1.0 + rhs.abs());
        if v > self.violation || v.is_nan() {
            self.violation = if v.is_nan() { f64::INFINITY } else { v };
            self.location = Some(at);
        }
    }

    fn done(self) -> BarrierCheck {
        BarrierCheck {
            id: self.id,
            violation: self.violation,
            location: self.location,
        }
    }
}

/// Evaluates the barrier inequalities with the discrete Laplacian at interior
/// nodes, and the ordering and boundary conditions at every node.
pub fn verify_barriers(
    b: &BarrierPair,
    k: &CoefficientSet,
    eta: &VField,
    dom: &DiscreteDomain,
    tol: Option<f64>,
) -> BarrierReport {
    let r = k.rank();
    let lm: Vec<ScalarField> = b.minus.comps.iter().map(|c| laplacian(c, dom)).collect();
    let lp: Vec<ScalarField> = b.plus.comps.iter().map(|c| laplacian(c, dom)).collect();
    let mut c13 = Acc::new("iii-13");
    let mut c14: Vec<Acc> = (2..r).map(|j| Acc::new(format!("iii-14[{j}]"))).collect();
    let mut c15: Vec<Acc> = (1..r).map(|j| Acc::new(format!("iii-15[{j}]"))).collect();
    let mut ci: Vec<Acc> = (1..r).map(|j| Acc::new(format!("i[{j}]"))).collect();
    let mut civ: Vec<Acc> = (1..r).map(|j| Acc::new(format!("iv[{j}]"))).collect();
    let mut cv = Acc::new("v");
    let mut c19m: Vec<Acc> = (1..r).map(|j| Acc::new(format!("19-minus[{j}]"))).collect();
    let mut c19p: Vec<Acc> = (1..r).map(|j| Acc::new(format!("19-plus[{j}]"))).collect();
    // e^{-rρ} ≥ 1, so Δξ⁻ = f e^{-rρ} is bounded below by -sup|f| e^{r sup|ρ|}, not by f
    let bound = b.f.sup_norm(dom) * (r as f64 * b.rho.sup_norm(dom)).exp();
    for &n in dom.interior() {
        let at = dom.coords(n);
        let xm = b.minus.at(n);
        let xp = b.plus.at(n);
        let kk = |j: usize| k.k[j].values[n];
        c13.le(lm[0].values[n], -4.0 * kk(r - 1) * (xp[0] - xp[r - 1]).exp(), at);
        for j in 1..r - 1 {
            c14[j - 1].le(lm[j].values[n], -4.0 * kk(j - 1) * (xp[j] - xm[j - 1]).exp(), at);
        }
        for j in 0..r - 1 {
            c15[j].le(4.0 * kk(j) * (xp[j + 1] - xm[j]).exp(), lp[j].values[n], at);
            ci[j].le(lm[j].values[n] - lp[j].values[n], 0.0, at);
            c19m[j].le(-bound, lm[j].values[n], at);
            c19p[j].le(lp[j].values[n], bound, at);
        }
    }
    for n in dom.nodes() {
        let at = dom.coords(n);
        let xm = b.minus.at(n);
        let xp = b.plus.at(n);
        for j in 0..r - 1 {
            civ[j].le(xm[j], xp[j], at);
        }
    }
    for &n in dom.boundary() {
        let at = dom.coords(n);
        let e = eta.at(n);
        for (j, ej) in e.iter().enumerate() {
            cv.le((b.minus.comps[j].values[n] - ej).abs(), 0.0, at);
            cv.le((b.plus.comps[j].values[n] - ej).abs(), 0.0, at);
        }
    }
    let mut checks = vec![c13.done()];
    checks.extend(c14.into_iter().map(Acc::done));
    checks.extend(c15.into_iter().map(Acc::done));
    checks.extend(ci.into_iter().map(Acc::done));
    checks.extend(civ.into_iter().map(Acc::done));
    checks.push(cv.done());
    checks.extend(c19m.into_iter().map(Acc::done));
    checks.extend(c19p.into_iter().map(Acc::done));
    BarrierReport {
        checks,
        tol: tol.unwrap_or_else(|| default_barrier_tol(dom)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DomainSpec;
    use proptest::prelude::*;

    fn small_disk(h: f64) -> DiscreteDomain {
        DomainSpec::disk(0.0, 0.0, 0.3, h).build().unwrap()
    }

    fn wavy_eta(dom: &DiscreteDomain, r: usize, amp: f64, seed: f64) -> VField {
        VField::from_leading(
            (0..r - 1)
                .map(|j| {
                    let p = seed + j as f64;
                    ScalarField::from_fn(dom, move |x, y| amp * ((3.0 + p) * x + p).sin() * (2.0 * y - p).cos())
                })
                .collect(),
        )
    }

    #[test]
    fn zero_data_gives_zero_harmonics() {
        let d = small_disk(0.05);
        let phis = boundary_harmonics(&VField::zeros(&d, 3), &d, &SolverOptions::default()).unwrap();
        assert!(phis.iter().all(|p| p.values.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn affine_traces_extend_exactly() {
        let d = small_disk(0.05);
        let eta = VField::from_leading(vec![
            ScalarField::from_fn(&d, |x, y| x - 2.0 * y),
            ScalarField::from_fn(&d, |x, _| 0.5 + x),
        ]);
        let phis = boundary_harmonics(&eta, &d, &SolverOptions::default()).unwrap();
        for j in 0..3 {
            for n in d.nodes() {
                assert!((phis[j].values[n] - eta.comps[j].values[n]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_zero_sum_data_rejected() {
        let d = small_disk(0.05);
        let eta = VField {
            comps: vec![ScalarField::constant(&d, 1.0), ScalarField::constant(&d, 1.0)],
        };
        assert!(boundary_harmonics(&eta, &d, &SolverOptions::default()).is_err());
    }

    #[test]
    fn unit_envelope() {
        let d = small_disk(0.1);
        let f = envelope_f(&CoefficientSet::unit(&d, 4), &vec![ScalarField::zeros(&d); 4], &d);
        assert!(d.nodes().all(|n| f.values[n] == -4.0));
    }

    #[test]
    fn unit_barriers_bracket_zero() {
        let d = small_disk(1.0 / 32.0);
        let k = CoefficientSet::unit(&d, 3);
        let eta = VField::zeros(&d, 3);
        let b = build_barriers(&k, &eta, &d, &SolverOptions::default()).unwrap();
        for n in d.nodes() {
            for j in 0..2 {
                assert_eq!(b.minus.comps[j].values[n], b.rho.values[n]);
                assert_eq!(b.plus.comps[j].values[n], -b.rho.values[n]);
            }
            assert!(b.rho.values[n] <= 0.0);
        }
        for &n in d.boundary() {
            assert_eq!(b.rho.values[n], 0.0);
        }
        let rep = verify_barriers(&b, &k, &eta, &d, None);
        assert!(rep.max_violation() <= 1e-9, "{:?}", rep.checks);
        assert!(rep.pass());
    }

    #[test]
    fn rank_three_wavy_data_pass() {
        let d = small_disk(1.0 / 32.0);
        let eta = wavy_eta(&d, 3, 0.3, 0.7);
        let k = CoefficientSet {
            k: vec![
                ScalarField::constant(&d, 1.0),
                ScalarField::from_fn(&d, |x, _| 1.0 + 0.5 * x),
                ScalarField::from_fn(&d, |x, y| (x - 0.1).hypot(y).powi(2)),
            ],
        };
        let b = build_barriers(&k, &eta, &d, &SolverOptions::default()).unwrap();
        let rep = verify_barriers(&b, &k, &eta, &d, None);
        assert!(rep.pass(), "{:?}", rep.checks);
        for &n in d.boundary() {
            for j in 0..3 {
                assert_eq!(b.minus.comps[j].values[n], b.plus.comps[j].values[n]);
                assert!((b.minus.comps[j].values[n] - eta.comps[j].values[n]).abs() < 1e-12);
            }
        }
        let mut out = Vec::new();
        rep.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("inequality-id,max-violation,node-x,node-y\niii-13,"));
        assert_eq!(text.lines().count(), 1 + rep.checks.len());
    }

    #[test]
    fn verifier_catches_broken_pair() {
        let d = small_disk(1.0 / 32.0);
        let k = CoefficientSet::unit(&d, 2);
        let eta = VField::zeros(&d, 2);
        let mut b = build_barriers(&k, &eta, &d, &SolverOptions::default()).unwrap();
        std::mem::swap(&mut b.minus, &mut b.plus);
        let rep = verify_barriers(&b, &k, &eta, &d, None);
        assert!(!rep.pass());
        let iv = rep.checks.iter().find(|c| c.id == "iv[1]").unwrap();
        assert!(iv.violation > 0.0);
    }

    #[test]
    fn lower_laplacian_bound_needs_growth_factor() {
        let d = small_disk(1.0 / 16.0);
        let k = CoefficientSet::unit(&d, 2);
        let b = build_barriers(&k, &VField::zeros(&d, 2), &d, &SolverOptions::default()).unwrap();
        let lap = laplacian(&b.minus.comps[0], &d);
        let centre = d.interior().iter().copied().find(|&n| d.coords(n) == (0.0, 0.0)).unwrap();
        // f e^{-rρ} ≤ f wherever ρ < 0
        assert!(lap.values[centre] < b.f.values[centre]);
        let c = b.f.sup_norm(&d) * (2.0 * b.rho.sup_norm(&d)).exp();
        assert!(d.interior().iter().all(|&n| lap.values[n] >= -c * (1.0 + 1e-9)));
    }

    #[test]
    fn barrier_gap_positive_inside() {
        let d = small_disk(1.0 / 16.0);
        let k = CoefficientSet::unit(&d, 2);
        let b = build_barriers(&k, &VField::zeros(&d, 2), &d, &SolverOptions::default()).unwrap();
        for &n in d.interior() {
            assert!(b.plus.comps[0].values[n] - b.minus.comps[0].values[n] > 0.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn harmonics_sum_to_zero(amp in 0.0f64..2.0, seed in 0.0f64..10.0, r in 2usize..5) {
            let d = small_disk(0.05);
            let eta = wavy_eta(&d, r, amp, seed);
            let phis = boundary_harmonics(&eta, &d, &SolverOptions::default()).unwrap();
            for n in d.nodes() {
                let s: f64 = phis.iter().map(|p| p.values[n]).sum();
                prop_assert!(s.abs() <= 1e-9);
            }
        }

        #[test]
        fn envelope_matches_brute_force(
            vals in prop::collection::vec(0.0f64..3.0, 4), ph in prop::collection::vec(-1.0f64..1.0, 4),
        ) {
            let d = small_disk(0.1);
            let r = 4;
            let k = CoefficientSet { k: (0..r).map(|j| ScalarField::from_fn(&d, |x, y| vals[j] + 0.1 + x * y)).collect() };
            let phis: Vec<ScalarField> = (0..r).map(|j| ScalarField::from_fn(&d, |x, _| ph[j] * (1.0 + x))).collect();
            let f = envelope_f(&k, &phis, &d);
            for n in d.nodes() {
                let mut terms = Vec::new();
                for j in 1..=r {
                    let jm = if j == 1 { r } else { j - 1 };
                    let jp = if j == r { 1 } else { j + 1 };
                    let kv = |i: usize| k.k[i - 1].values[n];
                    let pv = |i: usize| phis[i - 1].values[n];
                    terms.push(-4.0 * kv(jm) * (pv(j) - pv(jm)).exp());
                    terms.push(-4.0 * kv(j) * (pv(jp) - pv(j)).exp());
                }
                let m = terms.iter().cloned().fold(f64::INFINITY, f64::min);
                prop_assert_eq!(f.values[n], m);
                prop_assert!(f.values[n] <= -4.0 * k.k[r - 1].values[n] * (phis[0].values[n] - phis[r - 1].values[n]).exp());
            }
        }

        #[test]
        fn larger_coefficients_deepen_barrier(scale in 1.0f64..2.0, amp in 0.0f64..0.3) {
            let d = small_disk(1.0 / 16.0);
            let k = CoefficientSet::unit(&d, 2);
            let eta = wavy_eta(&d, 2, amp, 1.0);
            let o = SolverOptions::default();
            let b1 = build_barriers(&k, &eta, &d, &o).unwrap();
            let b2 = build_barriers(&k.scaled(scale), &eta, &d, &o).unwrap();
            for n in d.nodes() {
                prop_assert!(b2.f.values[n] <= b1.f.values[n]);
                prop_assert!(b2.rho.values[n] <= b1.rho.values[n] + 1e-12);
            }
        }
    }
}
