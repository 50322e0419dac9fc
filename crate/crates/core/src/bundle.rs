//! Rank data, background weights, subharmonic data and the coefficient
//! fields of the cyclic system, plus reduction to a flat background.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use crate::elliptic::{harmonic_extension, SolverOptions};
use crate::error::{Error, Result};
use crate::grid::{laplacian, mollify, DiscreteDomain, Mollifier, ScalarField, VField};

/// Rank and root vectors `v_j = u_{j+1} - u_j` (indices mod r).
#[derive(Clone, Debug, PartialEq)]
pub struct RankData {
    roots: Vec<Vec<f64>>,
}

pub fn root_vectors(r: usize) -> Result<RankData> {
    if r < 2 {
        return Err(Error::Invalid(format!("rank must be at least 2, got {r}")));
    }
    let roots = (0..r)
        .map(|j| {
            let mut v = vec![0.0; r];
            v[(j + 1) % r] += 1.0;
            v[j] -= 1.0;
            v
        })
        .collect();
    Ok(RankData { roots })
}

impl RankData {
    pub fn rank(&self) -> usize {
        self.roots.len()
    }

    /// Zero-based root vector `v_{j+1}`.
    pub fn root(&self, j: usize) -> &[f64] {
        &self.roots[j]
    }

    /// `(v_{j+1}, ξ)` for zero-based `j`.
    pub fn pair(&self, j: usize, xi: &[f64]) -> f64 {
        let r = self.rank();
        xi[(j + 1) % r] - xi[j]
    }
}

/// Log-weights of the diagonal metric in the chart frame.
#[derive(Clone, Debug)]
pub struct MetricWeights {
    pub w: Vec<ScalarField>,
    pub w_x: ScalarField,
}

impl MetricWeights {
    /// Zero weights of rank `r`.
    pub fn flat(dom: &DiscreteDomain, r: usize) -> Self {
        MetricWeights {
            w: vec![ScalarField::zeros(dom); r],
            w_x: lambda_weight(dom),
        }
    }

    /// Validates finiteness and flatness of the determinant.
    pub fn new(dom: &DiscreteDomain, w: Vec<ScalarField>) -> Result<Self> {
        if w.len() < 2 {
            return Err(Error::Invalid("metric weights need rank at least 2".into()));
        }
        for (j, wj) in w.iter().enumerate() {
            wj.ensure_finite(dom, &format!("weight w_{}", j + 1))?;
        }
        let mw = MetricWeights {
            w,
            w_x: lambda_weight(dom),
        };
        let defect = mw.flatness_defect(dom);
        let tol = 1e-8 / (dom.h() * dom.h());
        if defect > tol {
            return Err(Error::Invalid(format!(
                "sum of weights is not discrete-harmonic: |Δ Σw| = {defect:e} > {tol:e}"
            )));
        }
        Ok(mw)
    }

    pub fn rank(&self) -> usize {
        self.w.len()
    }

    pub fn flatness_defect(&self, dom: &DiscreteDomain) -> f64 {
        let mut sum = ScalarField::zeros(dom);
        for wj in &self.w {
            sum = sum.zip_map(wj, |a, b| a + b);
        }
        laplacian(&sum, dom).sup_norm(dom)
    }

    /// Weight of `H_{j+1}` for zero-based `j`.
    pub fn h_weight(&self, j: usize) -> ScalarField {
        let r = self.rank();
        let (a, b) = if j + 1 < r { (j, j + 1) } else { (r - 1, 0) };
        let d = self.w[b].zip_map(&self.w[a], |x, y| x - y);
        d.zip_map(&self.w_x, |x, y| x + y)
    }
}

fn lambda_weight(dom: &DiscreteDomain) -> ScalarField {
    ScalarField {
        values: dom.lambda().iter().map(|l| -l.ln()).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Root {
    pub re: f64,
    pub im: f64,
    pub mult: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMass {
    pub re: f64,
    pub im: f64,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub enum SubharmonicDatum {
    /// `φ = (1/N) log|q|² + w_{H_r}` with `q` the polynomial with these roots.
    PolynomialPower { roots: Vec<Root>, power: u32 },
    /// `φ = Σ w_i log|z - a_i| + smooth`.
    LogPotential {
        masses: Vec<PointMass>,
        smooth: Option<ScalarField>,
    },
    GridSampled(ScalarField),
}

fn cmp_root(a: &Root, b: &Root) -> Ordering {
    a.re.total_cmp(&b.re)
        .then(a.im.total_cmp(&b.im))
        .then(a.mult.cmp(&b.mult))
}

/// Evaluates φ on every node; `-inf` at zeros of the polynomial or at masses.
pub fn eval_phi(d: &SubharmonicDatum, w: &MetricWeights, dom: &DiscreteDomain) -> Result<ScalarField> {
    let phi = match d {
        SubharmonicDatum::PolynomialPower { roots, power } => {
            if *power == 0 {
                return Err(Error::Invalid("polynomial power must be at least 1".into()));
            }
            if roots.iter().any(|a| !a.re.is_finite() || !a.im.is_finite()) {
                return Err(Error::Invalid("non-finite root".into()));
            }
            let mut sorted = roots.clone();
            sorted.sort_by(cmp_root);
            let n = f64::from(*power);
            let coef: Vec<f64> = sorted.iter().map(|a| 2.0 * f64::from(a.mult) / n).collect();
            let hr = w.h_weight(w.rank() - 1);
            let mut phi = ScalarField::from_fn(dom, |x, y| {
                sorted
                    .iter()
                    .zip(&coef)
                    .map(|(a, c)| c * (x - a.re).hypot(y - a.im).ln())
                    .sum()
            });
            for k in 0..phi.len() {
                phi.values[k] += hr.values[k];
            }
            phi
        }
        SubharmonicDatum::LogPotential { masses, smooth } => {
            if masses.iter().any(|m| !(m.weight >= 0.0) || !m.re.is_finite() || !m.im.is_finite()) {
                return Err(Error::Invalid("point masses need finite centres and weights >= 0".into()));
            }
            let mut phi = ScalarField::from_fn(dom, |x, y| {
                masses
                    .iter()
                    .filter(|m| m.weight > 0.0)
                    .map(|m| m.weight * (x - m.re).hypot(y - m.im).ln())
                    .sum()
            });
            if let Some(s) = smooth {
                s.ensure_finite(dom, "smooth part of φ")?;
                phi = phi.zip_map(s, |a, b| a + b);
            }
            phi
        }
        SubharmonicDatum::GridSampled(f) => f.clone(),
    };
    let nodes: Vec<usize> = dom.nodes().collect();
    if nodes.iter().any(|&k| phi.values[k].is_nan() || phi.values[k] == f64::INFINITY) {
        return Err(Error::NonFinite("φ is NaN or +inf".into()));
    }
    if nodes.iter().all(|&k| phi.values[k] == f64::NEG_INFINITY) {
        return Err(Error::Invalid("φ is identically -inf".into()));
    }
    Ok(phi)
}

/// Whether `k'_j`, `j < r`, is the norm of the unit section or its square.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    Norm,
    NormSquared,
}

impl FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "norm" => Ok(Convention::Norm),
            "norm-squared" => Ok(Convention::NormSquared),
            _ => Err(Error::Config(format!("unknown convention `{s}`"))),
        }
    }
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Norm => "norm",
            Convention::NormSquared => "norm-squared",
        })
    }
}

/// Nonnegative coefficient fields `k'_1..k'_r`.
#[derive(Clone, Debug)]
pub struct CoefficientSet {
    pub k: Vec<ScalarField>,
}

impl CoefficientSet {
    pub fn rank(&self) -> usize {
        self.k.len()
    }

    pub fn unit(dom: &DiscreteDomain, r: usize) -> Self {
        CoefficientSet {
            k: vec![ScalarField::constant(dom, 1.0); r],
        }
    }

    pub fn validate(&self, dom: &DiscreteDomain) -> Result<()> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::Invalid("coefficient set needs rank at least 2".into()));
        }
        for (j, kj) in self.k.iter().enumerate() {
            for k in dom.nodes() {
                let v = kj.values[k];
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("coefficient k_{}", j + 1)));
                }
                if (j + 1 < r && v <= 0.0) || v < 0.0 {
                    let (x, y) = dom.coords(k);
                    return Err(Error::Invalid(format!(
                        "coefficient k_{} = {v} at ({x}, {y}) violates positivity",
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn scaled(&self, c: f64) -> Self {
        CoefficientSet {
            k: self.k.iter().map(|f| f.map(|v| v * c)).collect(),
        }
    }
}

pub fn coefficients(
    w: &MetricWeights,
    d: &SubharmonicDatum,
    dom: &DiscreteDomain,
    convention: Convention,
) -> Result<CoefficientSet> {
    let r = w.rank();
    for wj in w.w.iter().chain(std::iter::once(&w.w_x)) {
        wj.ensure_finite(dom, "metric weight")?;
    }
    let s = match convention {
        Convention::Norm => 0.5,
        Convention::NormSquared => 1.0,
    };
    let mut k: Vec<ScalarField> = (0..r - 1).map(|j| w.h_weight(j).map(|v| (s * v).exp())).collect();
    k.push(eval_phi(d, w, dom)?.map(f64::exp));
    let set = CoefficientSet { k };
    set.validate(dom)?;
    Ok(set)
}

/// `R_j = -Δ w_j`.
pub fn curvature_term(w: &MetricWeights, dom: &DiscreteDomain) -> VField {
    VField {
        comps: w.w.iter().map(|wj| laplacian(wj, dom).map(|v| -v)).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct GaugeReduction {
    pub k_hat: CoefficientSet,
    pub delta: VField,
    pub eta: VField,
}

impl GaugeReduction {
    /// Maps a solution of the flat problem back: `ξ = ξ̂ - δ`.
    pub fn restore(&self, xi_hat: &VField) -> VField {
        xi_hat.sub(&self.delta)
    }
}

/// Absorbs the curvature term into the coefficients.
pub fn gauge_reduce(
    w: &MetricWeights,
    k: &CoefficientSet,
    eta: &VField,
    dom: &DiscreteDomain,
    opts: &SolverOptions,
) -> Result<GaugeReduction> {
    let r = w.rank();
    if k.rank() != r || eta.rank() != r {
        return Err(Error::Invalid("rank mismatch in gauge reduction".into()));
    }
    let mut delta = Vec::with_capacity(r);
    for wj in &w.w {
        let hext = harmonic_extension(wj, dom, opts)?;
        let mut dj = ScalarField::zeros(dom);
        for &k in dom.interior() {
            dj.values[k] = wj.values[k] - hext.values[k];
        }
        delta.push(dj);
    }
    let delta = VField { comps: delta };
    let rd = root_vectors(r)?;
    let k_hat = CoefficientSet {
        k: (0..r)
            .map(|j| {
                let mut f = k.k[j].clone();
                for kk in 0..f.len() {
                    let pair = rd.pair(j, &delta.at(kk));
                    f.values[kk] *= (-pair).exp();
                }
                f
            })
            .collect(),
    };
    Ok(GaugeReduction {
        k_hat,
        delta,
        eta: eta.clone(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubharmonicReport {
    /// Largest positive value of `Δ(φ - w_{H_r})` over tested nodes.
    pub violation: f64,
    pub location: Option<(f64, f64)>,
    pub scale: Option<f64>,
    pub tested: usize,
    pub skipped: usize,
}

/// Checks `Δ(φ - w_{H_r}) ≤ 0`, optionally after mollifying at `scale`.
/// Nodes whose stencil touches a non-finite value are skipped.
pub fn check_fh_subharmonic(
    d: &SubharmonicDatum,
    w: &MetricWeights,
    dom: &DiscreteDomain,
    scale: Option<f64>,
) -> Result<SubharmonicReport> {
    let phi = eval_phi(d, w, dom)?;
    let hr = w.h_weight(w.rank() - 1);
    let mut g = phi.zip_map(&hr, |a, b| a - b);
    let mut defined = vec![true; g.len()];
    if let Some(s) = scale {
        let m = mollify(&g, &Mollifier::new(s), dom)?;
        g = m.field;
        defined = m.defined;
    }
    let lap = laplacian(&g, dom);
    let mut rep = SubharmonicReport {
        violation: 0.0,
        location: None,
        scale,
        tested: 0,
        skipped: 0,
    };
    for &k in dom.interior() {
        let ok = defined[k]
            && g.values[k].is_finite()
            && dom
                .neighbours(k)
                .iter()
                .all(|&m| defined[m] && g.values[m].is_finite());
        if !ok {
            rep.skipped += 1;
            continue;
        }
        rep.tested += 1;
        let v = lap.values[k];
        if v > rep.violation {
            rep.violation = v;
            rep.location = Some(dom.coords(k));
        }
    }
    if rep.tested == 0 {
        return Err(Error::Invalid("every node skipped in subharmonicity check".into()));
    }
    Ok(rep)
}
