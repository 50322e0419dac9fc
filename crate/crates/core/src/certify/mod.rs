//! Pointwise certificates for the a priori estimates and uniqueness, and an
//! independent radial reference solver.

mod radial;

use std::io::Write;
use std::path::Path;

use crate::barriers::BarrierPair;
use crate::bundle::CoefficientSet;
use crate::error::{Error, Result};
use crate::format::g17;
use crate::grid::{laplacian, mollify, DiscreteDomain, Mollifier, ScalarField, VField};
use crate::solver::{mass_terms, solve_newton, solve_picard, SolveOptions, SolveReport, Start};

pub use radial::{radial_oracle, RadialProblem, RadialProfile};

#[derive(Clone, Debug, PartialEq)]
pub struct Certificate {
    pub name: String,
    /// Largest positive violation; 0 when the inequality holds everywhere.
    pub violation: f64,
    pub location: Option<(f64, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

impl Certificate {
    pub fn new(name: impl Into<String>, violation: f64, location: Option<(f64, f64)>, tolerance: f64) -> Self {
        Certificate {
            name: name.into(),
            violation,
            location,
            tolerance,
            pass: violation <= tolerance,
        }
    }

    pub fn with_tolerance(&self, tolerance: f64) -> Self {
        Certificate::new(self.name.clone(), self.violation, self.location, tolerance)
    }
}

pub fn write_certificates_csv<W: Write>(mut w: W, certs: &[Certificate]) -> Result<()> {
    writeln!(w, "name,violation,tolerance,pass,x,y")?;
    for c in certs {
        let (x, y) = c
            .location
            .map(|(x, y)| (g17(x), g17(y)))
            .unwrap_or_else(|| ("nan".into(), "nan".into()));
        writeln!(w, "{},{},{},{},{},{}", c.name, g17(c.violation), g17(c.tolerance), c.pass, x, y)?;
    }
    Ok(())
}

pub fn save_certificates_csv(path: impl AsRef<Path>, certs: &[Certificate]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_certificates_csv(std::io::BufWriter::new(f), certs)
}

/// Running maximum of a violation over nodes.
struct MaxAt {
    value: f64,
    at: Option<(f64, f64)>,
    tested: usize,
}

impl MaxAt {
    fn new() -> Self {
        MaxAt {
            value: 0.0,
            at: None,
            tested: 0,
        }
    }

    fn push(&mut self, v: f64, at: (f64, f64)) {
        self.tested += 1;
        if v > self.value || v.is_nan() {
            self.value = if v.is_nan() { f64::INFINITY } else { v };
            self.at = Some(at);
        }
    }
}

/// `Δu ≤ 0` at interior nodes, optionally after mollifying at `scale`
/// (then only on the eroded interior where the mollification is defined).
pub fn check_subharmonic(u: &ScalarField, dom: &DiscreteDomain, tol: f64, scale: Option<f64>) -> Result<Certificate> {
    let (field, defined) = match scale {
        Some(s) => {
            let m = mollify(u, &Mollifier::new(s), dom)?;
            (m.field, m.defined)
        }
        None => (u.clone(), vec![true; u.len()]),
    };
    let lap = laplacian(&field, dom);
    let mut acc = MaxAt::new();
    for &n in dom.interior() {
        if defined[n] && dom.neighbours(n).iter().all(|&m| defined[m]) {
            acc.push(lap.values[n], dom.coords(n));
        }
    }
    if acc.tested == 0 {
        return Err(Error::Invalid("no node left to test after erosion".into()));
    }
    Ok(Certificate::new("subharmonic", acc.value, acc.at, tol))
}

fn euclid(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `Δ log Σ e^{ξ_j - ξ'_j} ≤ |res| + |res'|` at interior nodes.
pub fn check_prop2(
    xi: &VField,
    xi2: &VField,
    res: &VField,
    res2: &VField,
    dom: &DiscreteDomain,
    tol: f64,
) -> Certificate {
    let r = xi.rank();
    let s = ScalarField {
        values: (0..xi.comps[0].len())
            .map(|n| {
                let g: Vec<f64> = (0..r).map(|j| xi.comps[j].values[n] - xi2.comps[j].values[n]).collect();
                let gm = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                gm + g.iter().map(|v| (v - gm).exp()).sum::<f64>().ln()
            })
            .collect(),
    };
    let lap = laplacian(&s, dom);
    let mut acc = MaxAt::new();
    for &n in dom.interior() {
        let bound = euclid(&res.at(n)) + euclid(&res2.at(n));
        acc.push(lap.values[n] - bound, dom.coords(n));
    }
    Certificate::new("prop2", acc.value, acc.at, tol)
}

/// Outcome of the mass-term certificate with the nodes it left out.
#[derive(Clone, Debug)]
pub struct Prop3Check {
    pub certificate: Certificate,
    pub tested: usize,
    /// Nodes where some `k_j` vanishes at the node or a neighbour.
    pub skipped_zero: usize,
    /// Tested nodes where the sampled data is not discretely `F`-subharmonic
    /// and the bound was relaxed by that defect.
    pub corrected: usize,
    /// Largest such defect (lattice artefact of a nearby off-lattice zero).
    pub max_defect: f64,
}

/// `Δ log Σ m_j + |Σ m_j v_j|² / Σ m_j ≤ -Δ log λ` for a problem without
/// curvature term (after gauge reduction).
pub fn check_prop3(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain, tol: f64) -> Result<Certificate> {
    check_prop3_detailed(xi, k, dom, tol).map(|c| c.certificate)
}

/// Discretely the bound holds exactly up to `Σ_j q_j (Δ log k_j + Δ log λ)⁺`
/// with `q_j = m_j / Σ m`, the part of the data that fails to be
/// `F`-subharmonic on the lattice. That defect is added to the right side.
pub fn check_prop3_detailed(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain, tol: f64) -> Result<Prop3Check> {
    let r = xi.rank();
    let mt = mass_terms(xi, k, dom);
    let total = ScalarField {
        values: (0..xi.comps[0].len())
            .map(|n| mt.m.iter().map(|m| m.values[n]).sum::<f64>())
            .collect(),
    };
    let lap_t = laplacian(&total.map(f64::ln), dom);
    let loglam = ScalarField {
        values: dom.lambda().iter().map(|l| l.ln()).collect(),
    };
    let lap_l = laplacian(&loglam, dom);
    let lap_k: Vec<ScalarField> = k.k.iter().map(|kj| laplacian(&kj.map(f64::ln), dom)).collect();
    let mut acc = MaxAt::new();
    let (mut skipped_zero, mut corrected, mut max_defect) = (0, 0, 0.0f64);
    for &n in dom.interior() {
        let near_zero = k
            .k
            .iter()
            .any(|kj| kj.values[n] == 0.0 || dom.neighbours(n).iter().any(|&m| kj.values[m] == 0.0));
        if near_zero || !(total.values[n] > 0.0) {
            skipped_zero += 1;
            continue;
        }
        let defect: f64 = (0..r)
            .map(|j| mt.m[j].values[n] / total.values[n] * (lap_k[j].values[n] + lap_l.values[n]).max(0.0))
            .sum();
        if defect > 0.0 {
            corrected += 1;
            max_defect = max_defect.max(defect);
        }
        // Σ m_j v_j has component i equal to m_{i-1} - m_i
        let mv: Vec<f64> = (0..r)
            .map(|i| mt.m[(i + r - 1) % r].values[n] - mt.m[i].values[n])
            .collect();
        let q = mv.iter().map(|v| v * v).sum::<f64>() / total.values[n];
        acc.push(lap_t.values[n] + q + lap_l.values[n] - defect, dom.coords(n));
    }
    if acc.tested == 0 {
        return Err(Error::Invalid("every node skipped in the mass-term certificate".into()));
    }
    Ok(Prop3Check {
        certificate: Certificate::new("prop3", acc.value, acc.at, tol),
        tested: acc.tested,
        skipped_zero,
        corrected,
        max_defect,
    })
}

/// Default tolerance `10 h² (1 + max Σ m_j)` for [`check_prop3`].
pub fn prop3_tolerance(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain) -> f64 {
    let mt = mass_terms(xi, k, dom);
    let peak = dom
        .interior()
        .iter()
        .map(|&n| mt.m.iter().map(|m| m.values[n]).sum::<f64>())
        .fold(0.0, f64::max);
    10.0 * dom.h() * dom.h() * (1.0 + peak)
}

fn euclidean_laplacian(u: &ScalarField, dom: &DiscreteDomain) -> ScalarField {
    let mut l = laplacian(u, dom);
    for (v, lam) in l.values.iter_mut().zip(dom.lambda()) {
        *v *= lam;
    }
    l
}

#[derive(Clone, Debug)]
pub struct Lemma1Outcome {
    /// `Δ f_j ≤ f̃_j` for the inputs.
    pub precondition: Certificate,
    /// `Δ log Σ e^{f_j} ≤ Σ f̃_j e^{f_j} / Σ e^{f_j}`.
    pub inequality: Certificate,
}

impl Lemma1Outcome {
    pub fn pass(&self) -> bool {
        self.precondition.pass && self.inequality.pass
    }
}

/// Log-sum-exp inequality with the Euclidean Laplacian, evaluated where all
/// inputs are finite (and mollified at `scale` when given).
pub fn check_lemma1(
    g: &[ScalarField],
    g_tilde: &[ScalarField],
    dom: &DiscreteDomain,
    tol: f64,
    scale: Option<f64>,
) -> Result<Lemma1Outcome> {
    if g.len() != g_tilde.len() || g.is_empty() {
        return Err(Error::Invalid("lemma check needs matching nonempty component lists".into()));
    }
    let mut defined = vec![true; dom.len()];
    let fields: Vec<ScalarField> = match scale {
        Some(s) => {
            let m = Mollifier::new(s);
            let mut out = Vec::new();
            for f in g {
                let mf = mollify(f, &m, dom)?;
                for (d, ok) in defined.iter_mut().zip(&mf.defined) {
                    *d &= *ok;
                }
                out.push(mf.field);
            }
            out
        }
        None => g.to_vec(),
    };
    let usable = |n: usize| {
        defined[n]
            && fields.iter().all(|f| f.values[n].is_finite())
            && dom
                .neighbours(n)
                .iter()
                .all(|&m| defined[m] && fields.iter().all(|f| f.values[m].is_finite()))
    };
    let laps: Vec<ScalarField> = fields.iter().map(|f| euclidean_laplacian(f, dom)).collect();
    let lse = ScalarField {
        values: (0..dom.len())
            .map(|n| {
                let mx = fields.iter().map(|f| f.values[n]).fold(f64::NEG_INFINITY, f64::max);
                mx + fields.iter().map(|f| (f.values[n] - mx).exp()).sum::<f64>().ln()
            })
            .collect(),
    };
    let lap_lse = euclidean_laplacian(&lse, dom);
    let mut pre = MaxAt::new();
    let mut ineq = MaxAt::new();
    for &n in dom.interior() {
        if !usable(n) {
            continue;
        }
        let at = dom.coords(n);
        for (l, gt) in laps.iter().zip(g_tilde) {
            pre.push(l.values[n] - gt.values[n], at);
        }
        let mx = fields.iter().map(|f| f.values[n]).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = fields.iter().map(|f| (f.values[n] - mx).exp()).collect();
        let z: f64 = w.iter().sum();
        let rhs: f64 = w.iter().zip(g_tilde).map(|(wi, gt)| wi * gt.values[n]).sum::<f64>() / z;
        ineq.push(lap_lse.values[n] - rhs, at);
    }
    if ineq.tested == 0 {
        return Err(Error::Invalid("no node left to test".into()));
    }
    Ok(Lemma1Outcome {
        precondition: Certificate::new("lemma1-precondition", pre.value, pre.at, tol),
        inequality: Certificate::new("lemma1", ineq.value, ineq.at, tol),
    })
}

#[derive(Clone, Debug)]
pub struct UniquenessReport {
    pub difference: Certificate,
    pub prop2: Certificate,
    pub newton: SolveReport,
    pub picard: SolveReport,
}

/// Newton from `ξ⁺` and Picard from `ξ⁻`; compares the two limits.
pub fn uniqueness_probe(
    k: &CoefficientSet,
    eta: &VField,
    barriers: &BarrierPair,
    dom: &DiscreteDomain,
    opts: &SolveOptions,
    tol: f64,
) -> Result<UniquenessReport> {
    let newton = solve_newton(k, eta, dom, Some(barriers), Start::Plus, opts)?;
    let picard = solve_picard(k, eta, barriers, dom, Start::Minus, opts)?;
    for rep in [&newton, &picard] {
        if !rep.converged() {
            return Err(Error::MaxIterations {
                cap: rep.iterations,
                residual: rep.residual,
            });
        }
    }
    let diff = newton.xi.sub(&picard.xi);
    let mut worst = (0.0, None);
    for c in &diff.comps {
        for n in dom.nodes() {
            if c.values[n].abs() > worst.0 {
                worst = (c.values[n].abs(), Some(dom.coords(n)));
            }
        }
    }
    let res_n = crate::solver::residual_strong(&newton.xi, k, None, dom);
    let res_p = crate::solver::residual_strong(&picard.xi, k, None, dom);
    let prop2 = check_prop2(&newton.xi, &picard.xi, &res_n, &res_p, dom, 10.0 * dom.h() * dom.h());
    Ok(UniquenessReport {
        difference: Certificate::new("uniqueness", worst.0, worst.1, tol),
        prop2,
        newton,
        picard,
    })
}

#[cfg(test)]
mod tests;
