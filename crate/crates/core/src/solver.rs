//! The nonlinear system `Δξ + Σ 4k_j e^{(v_j,ξ)} v_j = R`: residuals, the
//! Poisson-splitting map S with damped Picard iteration, and Newton.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::barriers::BarrierPair;
use crate::bundle::{root_vectors, CoefficientSet};
use crate::elliptic::{PoissonOperator, SolverOptions};
use crate::error::{Error, Result};
use crate::format::g17;
use crate::grid::{laplacian, DiscreteDomain, Mollifier, ScalarField, VField};
use crate::linalg::{
    BandedCholesky, BlockJacobi, CsrMatrix, KroneckerInverse, LinearMethod, Preconditioner, SpdSolver, DIRECT_LIMIT,
};
use crate::par;

/// Exponents are clamped to this magnitude before `exp`.
pub const EXP_CLAMP: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Newton,
    Picard,
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "newton" => Ok(Method::Newton),
            "picard" => Ok(Method::Picard),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected newton or picard)"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Newton => "newton",
            Method::Picard => "picard",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub tol_res: f64,
    pub tol_fp: f64,
    pub newton_max_iter: usize,
    pub picard_max_iter: usize,
    /// Initial Picard damping.
    pub theta: f64,
    pub min_theta: f64,
    /// Defaults to `10 h²`.
    pub tol_sandwich: Option<f64>,
    pub min_damping: f64,
    pub elliptic: SolverOptions,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol_res: 1e-9,
            tol_fp: 1e-10,
            newton_max_iter: 50,
            picard_max_iter: 2000,
            theta: 1.0,
            min_theta: 1.0 / 64.0,
            tol_sandwich: None,
            min_damping: 1.0 / 1024.0,
            elliptic: SolverOptions::default(),
        }
    }
}

impl SolveOptions {
    pub fn sandwich_tol(&self, dom: &DiscreteDomain) -> f64 {
        self.tol_sandwich.unwrap_or(10.0 * dom.h() * dom.h())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Converged,
    MaxIterations,
    Stagnated,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Converged => "converged",
            Status::MaxIterations => "max-iterations",
            Status::Stagnated => "stagnated",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub update_norm: f64,
    pub residual_norm: f64,
    pub sandwich_violation: f64,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub xi: VField,
    pub method: Method,
    pub status: Status,
    pub trace: Vec<TraceRow>,
    pub iterations: usize,
    pub residual: f64,
    pub update: f64,
    pub linear_iterations: usize,
    pub wall_time: Duration,
    /// Some exponent hit the clamp.
    pub clamped: bool,
    /// Some iterate left the barrier sandwich by more than the tolerance.
    pub left_c: bool,
    pub max_sandwich: f64,
    pub theta: f64,
    pub notes: Vec<String>,
}

impl SolveReport {
    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }

    pub fn write_trace_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,update_norm,residual_norm,sandwich_violation")?;
        for t in &self.trace {
            writeln!(
                w,
                "{},{},{},{}",
                t.step,
                g17(t.update_norm),
                g17(t.residual_norm),
                g17(t.sandwich_violation)
            )?;
        }
        Ok(())
    }

    pub fn save_trace_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_trace_csv(std::io::BufWriter::new(f))
    }
}

#[derive(Clone, Debug)]
pub struct MassTerms {
    pub m: Vec<ScalarField>,
    pub clamped: bool,
}

/// `m_j = 4 k_j e^{ξ_{j+1} - ξ_j}` on every domain node.
pub fn mass_terms(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain) -> MassTerms {
    let r = xi.rank();
    let mut clamped = false;
    let m = (0..r)
        .map(|j| {
            let (a, b) = (&xi.comps[j], &xi.comps[(j + 1) % r]);
            let mut out = ScalarField::zeros(dom);
            for n in dom.nodes() {
                let p = b.values[n] - a.values[n];
                let pc = p.clamp(-EXP_CLAMP, EXP_CLAMP);
                if pc != p {
                    clamped = true;
                }
                out.values[n] = 4.0 * k.k[j].values[n] * pc.exp();
            }
            out
        })
        .collect();
    MassTerms { m, clamped }
}

/// `Δξ + Σ m_j v_j - R` at interior nodes, zero elsewhere.
pub fn residual_strong(xi: &VField, k: &CoefficientSet, curvature: Option<&VField>, dom: &DiscreteDomain) -> VField {
    let r = xi.rank();
    let mt = mass_terms(xi, k, dom);
    let comps = (0..r)
        .map(|i| {
            let lap = laplacian(&xi.comps[i], dom);
            let (mp, mi) = (&mt.m[(i + r - 1) % r], &mt.m[i]);
            let mut out = ScalarField::zeros(dom);
            for &n in dom.interior() {
                let rv = curvature.map_or(0.0, |c| c.comps[i].values[n]);
                out.values[n] = lap.values[n] + mp.values[n] - mi.values[n] - rv;
            }
            out
        })
        .collect();
    VField { comps }
}

/// Sup-norm over interior nodes and all components.
pub fn interior_sup(v: &VField, dom: &DiscreteDomain) -> f64 {
    v.comps
        .iter()
        .map(|c| c.max_over(dom.interior()).abs().max(c.min_over(dom.interior()).abs()))
        .fold(0.0, f64::max)
}

fn interior_l2(v: &VField, dom: &DiscreteDomain) -> f64 {
    let interior = dom.interior();
    v.comps
        .iter()
        .map(|c| par::sum_by(interior.len(), |s| c.values[interior[s]].powi(2)))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestBump {
    pub center: (f64, f64),
    pub scale: f64,
    pub amplitude: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeakValue {
    pub center: (f64, f64),
    /// Zero-based direction `u_i - (1/r)·1`.
    pub direction: usize,
    pub value: f64,
}

#[derive(Clone, Debug, Default)]
pub struct WeakResidual {
    pub values: Vec<WeakValue>,
    pub skipped: Vec<(f64, f64)>,
}

impl WeakResidual {
    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.value.abs()).fold(0.0, f64::max)
    }
}

/// Weak form `Σ (ξ, Δφ) + (Σ m_j v_j - R, φ)` with area weights, for mollifier
/// bumps times each projected unit direction. Bumps whose support reaches a
/// non-interior node are skipped.
pub fn residual_weak(
    xi: &VField,
    k: &CoefficientSet,
    curvature: Option<&VField>,
    dom: &DiscreteDomain,
    bumps: &[TestBump],
) -> WeakResidual {
    let r = xi.rank();
    let h = dom.h();
    let mt = mass_terms(xi, k, dom);
    let (x0, y0) = dom.origin();
    let mut out = WeakResidual::default();
    'bumps: for b in bumps {
        let moll = Mollifier::new(b.scale);
        let reach = (b.scale / h).ceil() as i64 + 1;
        let ci = ((b.center.0 - x0) / h).round() as i64;
        let cj = ((b.center.1 - y0) / h).round() as i64;
        let mut phi: Vec<(usize, f64)> = Vec::new();
        for j in cj - reach..=cj + reach {
            for i in ci - reach..=ci + reach {
                let x = x0 + i as f64 * h;
                let y = y0 + j as f64 * h;
                let v = b.amplitude * moll.eval((x - b.center.0).hypot(y - b.center.1));
                if v == 0.0 {
                    continue;
                }
                let inside = i >= 0 && j >= 0 && (i as usize) < dom.nx() && (j as usize) < dom.ny();
                let n = j as usize * dom.nx() + i as usize;
                if !inside || dom.interior_slot(n).is_none() {
                    out.skipped.push(b.center);
                    continue 'bumps;
                }
                phi.push((n, v));
            }
        }
        let mut field = std::collections::HashMap::with_capacity(phi.len());
        for &(n, v) in &phi {
            field.insert(n, v);
        }
        let get = |n: usize| field.get(&n).copied().unwrap_or(0.0);
        // nodes where the stencil of φ is nonzero
        let mut touched: Vec<usize> = phi.iter().map(|p| p.0).collect();
        for &(n, _) in &phi {
            touched.extend(dom.neighbours(n));
        }
        touched.sort_unstable();
        touched.dedup();
        for i in 0..r {
            let mut value = 0.0;
            for &n in &touched {
                let nb = dom.neighbours(n);
                let stencil = 4.0 * get(n) - nb.iter().map(|&m| get(m)).sum::<f64>();
                value += xi.comps[i].values[n] * stencil;
            }
            for &(n, v) in &phi {
                let rv = curvature.map_or(0.0, |c| c.comps[i].values[n]);
                let force = mt.m[(i + r - 1) % r].values[n] - mt.m[i].values[n] - rv;
                value += force * v * dom.area_weight(n);
            }
            out.values.push(WeakValue {
                center: b.center,
                direction: i,
                value,
            });
        }
    }
    out
}

/// The two Poisson pieces of each leading component of `S(ξ)`.
#[derive(Clone, Debug)]
pub struct SParts {
    pub xi: VField,
    pub plus: Vec<ScalarField>,
    pub minus: Vec<ScalarField>,
    pub clamped: bool,
}

/// One application of S: for `j < r`, `Δξ'_{j,+} = m_j`, `Δξ'_{j,-} = -m_{j-1}`,
/// both with boundary values `η_j / 2`, and `ξ'_j` their sum.
pub fn apply_s_parts(
    xi: &VField,
    k: &CoefficientSet,
    eta: &VField,
    op: &PoissonOperator<'_>,
    warm: Option<&SParts>,
) -> Result<SParts> {
    let dom = op.domain();
    let r = xi.rank();
    let mt = mass_terms(xi, k, dom);
    let mut plus = Vec::with_capacity(r - 1);
    let mut minus = Vec::with_capacity(r - 1);
    for j in 0..r - 1 {
        let half = eta.comps[j].map(|v| 0.5 * v);
        let neg = mt.m[(j + r - 1) % r].map(|v| -v);
        let (p, _) = op.solve(&mt.m[j], &half, warm.map(|w| &w.plus[j]))?;
        let (m, _) = op.solve(&neg, &half, warm.map(|w| &w.minus[j]))?;
        plus.push(p);
        minus.push(m);
    }
    let leading = plus.iter().zip(&minus).map(|(p, m)| p.zip_map(m, |a, b| a + b)).collect();
    Ok(SParts {
        xi: VField::from_leading(leading),
        plus,
        minus,
        clamped: mt.clamped,
    })
}

pub fn apply_s(xi: &VField, k: &CoefficientSet, eta: &VField, dom: &DiscreteDomain, opts: &SolverOptions) -> Result<VField> {
    let op = PoissonOperator::new(dom, opts)?;
    Ok(apply_s_parts(xi, k, eta, &op, None)?.xi)
}

/// Largest violation of `Δξ'_{j,+} ≥ 0` and `Δξ'_{j,-} ≤ 0`.
pub fn s_sign_violation(parts: &SParts, dom: &DiscreteDomain) -> f64 {
    let mut v = 0.0f64;
    for (p, m) in parts.plus.iter().zip(&parts.minus) {
        let lp = laplacian(p, dom);
        let lm = laplacian(m, dom);
        for &n in dom.interior() {
            v = v.max(-lp.values[n]).max(lm.values[n]);
        }
    }
    v
}

/// Largest `max(ξ⁻_j - ξ_j, ξ_j - ξ⁺_j)` over nodes and `j < r`; negative when
/// strictly inside.
pub fn sandwich_violation(xi: &VField, b: &BarrierPair, dom: &DiscreteDomain) -> f64 {
    let r = xi.rank();
    let mut v = f64::NEG_INFINITY;
    for j in 0..r - 1 {
        for n in dom.nodes() {
            let x = xi.comps[j].values[n];
            v = v.max(b.minus.comps[j].values[n] - x).max(x - b.plus.comps[j].values[n]);
        }
    }
    v
}

#[derive(Clone, Copy, Debug)]
pub enum Start<'a> {
    /// Zero interior values with the boundary data.
    Zero,
    Minus,
    Plus,
    Field(&'a VField),
}

fn initial(start: Start<'_>, eta: &VField, barriers: Option<&BarrierPair>, dom: &DiscreteDomain) -> Result<VField> {
    let need = || barriers.ok_or_else(|| Error::Invalid("barrier start requested without barriers".into()));
    let mut xi = match start {
        Start::Zero => VField::zeros(dom, eta.rank()),
        Start::Minus => need()?.minus.clone(),
        Start::Plus => need()?.plus.clone(),
        Start::Field(f) => f.clone(),
    };
    if xi.rank() != eta.rank() {
        return Err(Error::Invalid("initial field has the wrong rank".into()));
    }
    for (c, e) in xi.comps.iter_mut().zip(&eta.comps) {
        for &n in dom.boundary() {
            c.values[n] = e.values[n];
        }
    }
    Ok(xi)
}

fn check_inputs(k: &CoefficientSet, eta: &VField, dom: &DiscreteDomain) -> Result<()> {
    k.validate(dom)?;
    if eta.rank() != k.rank() {
        return Err(Error::Invalid("rank mismatch between coefficients and boundary data".into()));
    }
    for c in &eta.comps {
        for &n in dom.boundary() {
            if !c.values[n].is_finite() {
                return Err(Error::NonFinite("boundary data".into()));
            }
        }
    }
    Ok(())
}

/// Damped Picard iteration `ξ ← (1-θ)ξ + θ S(ξ)`. The damping starts at
/// `opts.theta` and is halved whenever the update grows or flips sign.
pub fn solve_picard(
    k: &CoefficientSet,
    eta: &VField,
    barriers: &BarrierPair,
    dom: &DiscreteDomain,
    start: Start<'_>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let t0 = Instant::now();
    check_inputs(k, eta, dom)?;
    let op = PoissonOperator::new(dom, &opts.elliptic)?;
    let tol_sw = opts.sandwich_tol(dom);
    let mut xi = initial(start, eta, Some(barriers), dom)?;
    let mut theta = opts.theta;
    let mut report = SolveReport {
        xi: xi.clone(),
        method: Method::Picard,
        status: Status::MaxIterations,
        trace: Vec::new(),
        iterations: 0,
        residual: interior_sup(&residual_strong(&xi, k, None, dom), dom),
        update: f64::INFINITY,
        linear_iterations: 0,
        wall_time: Duration::ZERO,
        clamped: false,
        left_c: false,
        max_sandwich: sandwich_violation(&xi, barriers, dom),
        theta,
        notes: Vec::new(),
    };
    let mut warm: Option<SParts> = None;
    let mut prev_diff: Option<VField> = None;
    for step in 1..=opts.picard_max_iter {
        let parts = apply_s_parts(&xi, k, eta, &op, warm.as_ref())?;
        report.clamped |= parts.clamped;
        report.linear_iterations += 2 * (xi.rank() - 1);
        let diff = parts.xi.sub(&xi);
        let fp = diff.sup_norm(dom);
        if let Some(pd) = &prev_diff {
            let dot: f64 = diff
                .comps
                .iter()
                .zip(&pd.comps)
                .map(|(a, b)| dom.interior().iter().map(|&n| a.values[n] * b.values[n]).sum::<f64>())
                .sum();
            let grew = fp > 1.0001 * pd.sup_norm(dom);
            if (dot < 0.0 || grew) && theta > opts.min_theta {
                theta = (0.5 * theta).max(opts.min_theta);
                report.notes.push(format!("step {step}: damping reduced to {theta}"));
            }
        }
        xi = xi.blend(&parts.xi, theta);
        if !xi.sup_norm(dom).is_finite() {
            return Err(Error::NonFinite("picard iterate".into()));
        }
        let res = interior_sup(&residual_strong(&xi, k, None, dom), dom);
        let sw = sandwich_violation(&xi, barriers, dom);
        report.max_sandwich = report.max_sandwich.max(sw);
        if sw > tol_sw && !report.left_c {
            report.left_c = true;
            report.notes.push(format!("step {step}: iterate left the barrier sandwich by {sw:e}"));
        }
        let update = theta * fp;
        report.trace.push(TraceRow {
            step,
            update_norm: update,
            residual_norm: res,
            sandwich_violation: sw,
        });
        report.iterations = step;
        report.residual = res;
        report.update = update;
        prev_diff = Some(diff);
        warm = Some(parts);
        if fp <= opts.tol_fp && res <= opts.tol_res {
            report.status = Status::Converged;
            break;
        }
    }
    report.theta = theta;
    report.xi = xi;
    report.wall_time = t0.elapsed();
    Ok(report)
}

fn reduced_roots(r: usize) -> Result<Vec<Vec<f64>>> {
    let rd = root_vectors(r)?;
    Ok((0..r)
        .map(|j| {
            let v = rd.root(j);
            (0..r - 1).map(|i| v[i] - v[r - 1]).collect()
        })
        .collect())
}

/// `λh² Pᵀ F(ξ)` on interior nodes, with `Pᵀx = (x_i - x_r)_{i<r}`,
/// laid out as `[slot * (r-1) + i]`.
pub fn reduced_residual(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain) -> Vec<f64> {
    let r = xi.rank();
    let b = r - 1;
    let f = residual_strong(xi, k, None, dom);
    let interior = dom.interior();
    let h2 = dom.h() * dom.h();
    let lam = dom.lambda();
    par::map_range(interior.len() * b, |idx| {
        let (s, i) = (idx / b, idx % b);
        let n = interior[s];
        lam[n] * h2 * (f.comps[i].values[n] - f.comps[r - 1].values[n])
    })
}

/// Derivative of [`reduced_residual`] in the leading components:
/// `S ⊗ (I + 11ᵀ) + blockdiag(λh² Σ_j m_j a_j a_jᵀ)`, `a_j = Pᵀ v_j`.
pub fn jacobian(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain) -> Result<CsrMatrix> {
    let r = xi.rank();
    let b = r - 1;
    let a = reduced_roots(r)?;
    let mt = mass_terms(xi, k, dom);
    let interior = dom.interior();
    let h2 = dom.h() * dom.h();
    let lam = dom.lambda();
    let coupling = kron_coupling(b);
    Ok(CsrMatrix::stencil_system(dom, b, &coupling, |s, out| {
        let n = interior[s];
        for (j, aj) in a.iter().enumerate() {
            let w = lam[n] * h2 * mt.m[j].values[n];
            for c in 0..b {
                for c2 in 0..b {
                    out[c * b + c2] += w * aj[c] * aj[c2];
                }
            }
        }
    }))
}

fn kron_coupling(b: usize) -> Vec<f64> {
    let mut c = vec![1.0; b * b];
    for i in 0..b {
        c[i * b + i] = 2.0;
    }
    c
}

enum NewtonLinear {
    Direct,
    BlockJacobi,
    Kronecker(Arc<BandedCholesky>),
}

fn pick_newton_linear(dom: &DiscreteDomain, r: usize, method: LinearMethod) -> Result<NewtonLinear> {
    let n = dom.interior().len() * (r - 1);
    Ok(match method {
        LinearMethod::BandedCholesky => NewtonLinear::Direct,
        LinearMethod::ConjugateGradient => NewtonLinear::BlockJacobi,
        LinearMethod::Auto if n < DIRECT_LIMIT => NewtonLinear::Direct,
        LinearMethod::Auto => {
            let s = CsrMatrix::stencil_system(dom, 1, &[1.0], |_, _| {});
            if BandedCholesky::fits(&s) {
                NewtonLinear::Kronecker(Arc::new(BandedCholesky::factor(&s)?))
            } else {
                NewtonLinear::BlockJacobi
            }
        }
    })
}

/// Damped Newton on the reduced `(r-1)`-component system.
pub fn solve_newton(
    k: &CoefficientSet,
    eta: &VField,
    dom: &DiscreteDomain,
    barriers: Option<&BarrierPair>,
    start: Start<'_>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let t0 = Instant::now();
    check_inputs(k, eta, dom)?;
    let r = k.rank();
    let b = r - 1;
    let interior = dom.interior();
    let linear = pick_newton_linear(dom, r, opts.elliptic.linear_method)?;
    let coupling = kron_coupling(b);
    let mut xi = initial(start, eta, barriers, dom)?;
    let sw = |x: &VField| barriers.map_or(f64::NAN, |bp| sandwich_violation(x, bp, dom));
    let mut f = residual_strong(&xi, k, None, dom);
    let mut rn = interior_sup(&f, dom);
    let mut r2 = interior_l2(&f, dom);
    let mut report = SolveReport {
        xi: xi.clone(),
        method: Method::Newton,
        status: Status::MaxIterations,
        trace: vec![TraceRow {
            step: 0,
            update_norm: 0.0,
            residual_norm: rn,
            sandwich_violation: sw(&xi),
        }],
        iterations: 0,
        residual: rn,
        update: 0.0,
        linear_iterations: 0,
        wall_time: Duration::ZERO,
        clamped: false,
        left_c: false,
        max_sandwich: f64::NAN,
        theta: 1.0,
        notes: Vec::new(),
    };
    let mut step_vec = vec![0.0; interior.len() * b];
    for it in 1..=opts.newton_max_iter + 1 {
        if !rn.is_finite() {
            return Err(Error::NonFinite("newton residual".into()));
        }
        if rn <= opts.tol_res {
            report.status = Status::Converged;
            break;
        }
        if it > opts.newton_max_iter {
            break;
        }
        let jac = jacobian(&xi, k, dom)?;
        let g = reduced_residual(&xi, k, dom);
        let rhs: Vec<f64> = g.iter().map(|v| -v).collect();
        let ltol = (0.1 * rn).clamp(opts.elliptic.linear_tol, 1e-2);
        let solver = match &linear {
            NewtonLinear::Direct => SpdSolver::new(jac, b, LinearMethod::BandedCholesky)?,
            NewtonLinear::BlockJacobi => {
                let pre = Preconditioner::BlockJacobi(BlockJacobi::new(&jac, b)?);
                SpdSolver::preconditioned(jac, pre)
            }
            NewtonLinear::Kronecker(chol) => {
                let pre = Preconditioner::Kronecker(KroneckerInverse::new(chol.clone(), &coupling, b)?);
                SpdSolver::preconditioned(jac, pre)
            }
        };
        step_vec.iter_mut().for_each(|v| *v = 0.0);
        let lo = solver.solve(&rhs, &mut step_vec, ltol, opts.elliptic.linear_max_iter)?;
        report.linear_iterations += lo.iterations;
        let mut theta = 1.0;
        let accepted = loop {
            let mut trial = xi.clone();
            for (s, &n) in interior.iter().enumerate() {
                let mut sum = 0.0;
                for c in 0..b {
                    let d = theta * step_vec[s * b + c];
                    trial.comps[c].values[n] += d;
                    sum += d;
                }
                trial.comps[r - 1].values[n] -= sum;
            }
            let tf = residual_strong(&trial, k, None, dom);
            let t2 = interior_l2(&tf, dom);
            if t2.is_finite() && t2 < r2 {
                break Some((trial, tf, t2));
            }
            theta *= 0.5;
            if theta < opts.min_damping {
                break None;
            }
        };
        let Some((trial, tf, t2)) = accepted else {
            report.status = Status::Stagnated;
            report
                .notes
                .push(format!("step {it}: no residual decrease at damping {}; try --method picard", opts.min_damping));
            break;
        };
        let upd = theta
            * (0..interior.len())
                .map(|s| {
                    let blk = &step_vec[s * b..(s + 1) * b];
                    blk.iter().fold(blk.iter().sum::<f64>().abs(), |m, v| m.max(v.abs()))
                })
                .fold(0.0, f64::max);
        xi = trial;
        f = tf;
        r2 = t2;
        rn = interior_sup(&f, dom);
        report.clamped |= mass_terms(&xi, k, dom).clamped;
        report.theta = theta;
        report.iterations = it;
        report.update = upd;
        report.residual = rn;
        report.trace.push(TraceRow {
            step: it,
            update_norm: upd,
            residual_norm: rn,
            sandwich_violation: sw(&xi),
        });
    }
    if let Some(bp) = barriers {
        let v = sandwich_violation(&xi, bp, dom);
        report.max_sandwich = v;
        if v > opts.sandwich_tol(dom) {
            report.left_c = true;
            report.notes.push(format!("solution leaves the barrier sandwich by {v:e}"));
        }
    }
    report.residual = rn;
    report.xi = xi;
    report.wall_time = t0.elapsed();
    Ok(report)
}

/// Runs the chosen method; Picard requires barriers.
pub fn solve(
    method: Method,
    k: &CoefficientSet,
    eta: &VField,
    dom: &DiscreteDomain,
    barriers: Option<&BarrierPair>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    match method {
        Method::Newton => solve_newton(k, eta, dom, barriers, Start::Zero, opts),
        Method::Picard => {
            let bp = barriers.ok_or_else(|| Error::Invalid("picard iteration needs barriers".into()))?;
            solve_picard(k, eta, bp, dom, Start::Zero, opts)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::barriers::build_barriers;
    use crate::grid::DomainSpec;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_disk(h: f64) -> DiscreteDomain {
        DomainSpec::disk(0.0, 0.0, 0.3, h).build().unwrap()
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
        k.push(ScalarField::from_fn(dom, |x, y| (x - 0.05).hypot(y + 0.02).powi(2)));
        CoefficientSet { k }
    }

    #[test]
    fn mass_term_examples() {
        let d = small_disk(0.05);
        let m = mass_terms(&VField::zeros(&d, 3), &CoefficientSet::unit(&d, 3), &d);
        assert!(m.m.iter().all(|f| d.nodes().all(|n| f.values[n] == 4.0)));
        assert!(!m.clamped);
        let mut k = CoefficientSet::unit(&d, 2);
        let n0 = d.interior()[0];
        k.k[1].values[n0] = 0.0;
        let a = 0.3;
        let xi = VField::from_leading(vec![ScalarField::constant(&d, a)]);
        let m = mass_terms(&xi, &k, &d);
        assert_eq!(m.m[1].values[n0], 0.0);
        let n1 = d.interior()[1];
        assert!((m.m[0].values[n1] - 4.0 * (-2.0 * a).exp()).abs() < 1e-15);
        assert!((m.m[1].values[n1] - 4.0 * (2.0 * a).exp()).abs() < 1e-15);
    }

    #[test]
    fn exponent_clamp_is_flagged() {
        let d = small_disk(0.1);
        let xi = VField::from_leading(vec![ScalarField::constant(&d, 400.0)]);
        let m = mass_terms(&xi, &CoefficientSet::unit(&d, 2), &d);
        assert!(m.clamped);
        assert!(m.m[1].values[d.interior()[0]].is_finite());
    }

    #[test]
    fn residual_vanishes_for_constant_coefficients() {
        let d = small_disk(0.05);
        for c in [0.5, 1.0, 4.0] {
            let res = residual_strong(&VField::zeros(&d, 4), &CoefficientSet::unit(&d, 4).scaled(c), None, &d);
            assert_eq!(interior_sup(&res, &d), 0.0);
        }
    }

    #[test]
    fn manufactured_forcing_is_reproduced() {
        let d = small_disk(1.0 / 32.0);
        let xi = wavy(&d, 3, 0.5, 0.2);
        let k = rough_k(&d, 3);
        let curv = residual_strong(&xi, &k, None, &d);
        let res = residual_strong(&xi, &k, Some(&curv), &d);
        assert_eq!(interior_sup(&res, &d), 0.0);
    }

    #[test]
    fn weak_residual_of_zero_state_is_zero() {
        let d = small_disk(1.0 / 32.0);
        let w = residual_weak(
            &VField::zeros(&d, 3),
            &CoefficientSet::unit(&d, 3).scaled(2.0),
            None,
            &d,
            &[TestBump { center: (0.0, 0.0), scale: 0.1, amplitude: 1.0 }],
        );
        assert_eq!(w.values.len(), 3);
        assert_eq!(w.max_abs(), 0.0);
    }

    #[test]
    fn weak_residual_is_linear_and_summation_by_parts() {
        let d = small_disk(1.0 / 32.0);
        let xi = wavy(&d, 3, 0.4, 1.0);
        let k = rough_k(&d, 3);
        let bump = TestBump { center: (0.03, -0.02), scale: 0.12, amplitude: 1.0 };
        let w1 = residual_weak(&xi, &k, None, &d, &[bump]);
        let w2 = residual_weak(&xi, &k, None, &d, &[TestBump { amplitude: 2.0, ..bump }]);
        let strong = residual_strong(&xi, &k, None, &d);
        let moll = Mollifier::new(bump.scale);
        for (a, b) in w1.values.iter().zip(&w2.values) {
            assert!((2.0 * a.value - b.value).abs() <= 1e-12 * (1.0 + b.value.abs()));
            let direct: f64 = d
                .interior()
                .iter()
                .map(|&n| {
                    let (x, y) = d.coords(n);
                    let phi = moll.eval((x - 0.03).hypot(y + 0.02));
                    strong.comps[a.direction].values[n] * phi * d.area_weight(n)
                })
                .sum();
            assert!((a.value - direct).abs() < 1e-10, "{} {}", a.value, direct);
        }
    }

    #[test]
    fn weak_residual_skips_boundary_bumps() {
        let d = small_disk(1.0 / 32.0);
        let w = residual_weak(
            &VField::zeros(&d, 2),
            &CoefficientSet::unit(&d, 2),
            None,
            &d,
            &[TestBump { center: (0.28, 0.0), scale: 0.1, amplitude: 1.0 }],
        );
        assert!(w.values.is_empty());
        assert_eq!(w.skipped.len(), 1);
    }

    #[test]
    fn s_of_zero_is_zero() {
        let d = small_disk(0.05);
        let out = apply_s(
            &VField::zeros(&d, 3),
            &CoefficientSet::unit(&d, 3),
            &VField::zeros(&d, 3),
            &d,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(out.sup_norm(&d) < 1e-13);
    }

    #[test]
    fn s_output_solves_linear_problem() {
        let d = small_disk(1.0 / 32.0);
        let xi = wavy(&d, 3, 0.4, 0.5);
        let eta = wavy(&d, 3, 0.2, 2.0);
        let k = rough_k(&d, 3);
        let op = PoissonOperator::new(&d, &SolverOptions::default()).unwrap();
        let parts = apply_s_parts(&xi, &k, &eta, &op, None).unwrap();
        let mt = mass_terms(&xi, &k, &d);
        for i in 0..3 {
            let lap = laplacian(&parts.xi.comps[i], &d);
            for &n in d.interior() {
                let want = mt.m[i].values[n] - mt.m[(i + 2) % 3].values[n];
                assert!((lap.values[n] - want).abs() < 1e-8);
            }
            for &n in d.boundary() {
                assert!((parts.xi.comps[i].values[n] - eta.comps[i].values[n]).abs() < 1e-12);
            }
        }
        assert!(s_sign_violation(&parts, &d) < 1e-8);
        assert!(parts.xi.zero_sum_defect(&d) < 1e-12);
    }

    #[test]
    fn picard_trivial_instance_converges_immediately() {
        let d = small_disk(0.05);
        let k = CoefficientSet::unit(&d, 2);
        let eta = VField::zeros(&d, 2);
        let o = SolveOptions::default();
        let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
        let rep = solve_picard(&k, &eta, &b, &d, Start::Zero, &o).unwrap();
        assert!(rep.converged());
        assert_eq!(rep.iterations, 1);
        assert!(rep.xi.sup_norm(&d) < 1e-12);
    }

    #[test]
    fn two_starts_and_both_methods_agree() {
        let d = small_disk(1.0 / 32.0);
        let r = 3;
        let k = rough_k(&d, r);
        let eta = wavy(&d, r, 0.3, 0.9);
        let o = SolveOptions::default();
        let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
        let lo = solve_picard(&k, &eta, &b, &d, Start::Minus, &o).unwrap();
        let hi = solve_picard(&k, &eta, &b, &d, Start::Plus, &o).unwrap();
        let nw = solve_newton(&k, &eta, &d, Some(&b), Start::Zero, &o).unwrap();
        assert!(lo.converged() && hi.converged() && nw.converged());
        assert!(lo.xi.sub(&hi.xi).sup_norm(&d) < 1e-6);
        assert!(lo.xi.sub(&nw.xi).sup_norm(&d) < 1e-6);
        let tol = o.sandwich_tol(&d);
        assert!(!lo.left_c && !hi.left_c && !nw.left_c);
        assert!(lo.max_sandwich <= tol && hi.max_sandwich <= tol);
        for rep in [&lo, &hi] {
            let parts = apply_s(&rep.xi, &k, &eta, &d, &o.elliptic).unwrap();
            assert!(parts.sub(&rep.xi).sup_norm(&d) <= 2.0 * o.tol_fp);
        }
        assert!(nw.residual <= o.tol_res);
        let mut csv = Vec::new();
        lo.write_trace_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("step,update_norm,residual_norm,sandwich_violation\n1,"));
        assert_eq!(text.lines().count(), lo.trace.len() + 1);
    }

    #[test]
    fn newton_constant_coefficients_give_zero() {
        let d = DomainSpec::rectangle(0.0, 1.0, 0.0, 1.0, 1.0 / 32.0).build().unwrap();
        for r in [2, 3, 5] {
            let rep = solve_newton(
                &CoefficientSet::unit(&d, r).scaled(4.0),
                &VField::zeros(&d, r),
                &d,
                None,
                Start::Zero,
                &SolveOptions::default(),
            )
            .unwrap();
            assert!(rep.converged());
            assert!(rep.residual <= 1e-10);
            assert!(rep.xi.sup_norm(&d) <= 1e-8);
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let d = DomainSpec::rectangle(0.0, 1.0, 0.0, 1.0, 0.25).build().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for r in [2, 3] {
            for _ in 0..3 {
                let lead: Vec<ScalarField> = (0..r - 1)
                    .map(|_| ScalarField { values: (0..d.len()).map(|_| rng.gen_range(-1.0..1.0)).collect() })
                    .collect();
                let xi = VField::from_leading(lead);
                let k = CoefficientSet {
                    k: (0..r)
                        .map(|_| ScalarField { values: (0..d.len()).map(|_| rng.gen_range(0.1..2.0)).collect() })
                        .collect(),
                };
                let jac = jacobian(&xi, &k, &d).unwrap().to_dense();
                let b = r - 1;
                let t = 1e-6;
                for (s, &n) in d.interior().iter().enumerate() {
                    for c in 0..b {
                        let shift = |sign: f64| {
                            let mut x = xi.clone();
                            x.comps[c].values[n] += sign * t;
                            x.comps[r - 1].values[n] -= sign * t;
                            reduced_residual(&x, &k, &d)
                        };
                        let (gp, gm) = (shift(1.0), shift(-1.0));
                        let col = s * b + c;
                        let scale = jac.iter().map(|row| row[col].abs()).fold(1.0, f64::max);
                        for row in 0..gp.len() {
                            let fd = (gp[row] - gm[row]) / (2.0 * t);
                            assert!((fd - jac[row][col]).abs() <= 1e-6 * scale, "r={r} row={row} col={col}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn real_metric_symmetry() {
        let d = small_disk(1.0 / 32.0);
        let k12 = ScalarField::from_fn(&d, |x, y| 1.0 + 0.4 * x * y);
        let k = CoefficientSet {
            k: vec![k12.clone(), k12, ScalarField::from_fn(&d, |x, y| x.hypot(y).powi(2))],
        };
        let e1 = ScalarField::from_fn(&d, |x, y| 0.3 * (2.0 * x + y).sin());
        let eta = VField { comps: vec![e1.clone(), ScalarField::zeros(&d), e1.map(|v| -v)] };
        let o = SolveOptions::default();
        let rep = solve_newton(&k, &eta, &d, None, Start::Zero, &o).unwrap();
        assert!(rep.converged());
        for n in d.nodes() {
            assert!((rep.xi.comps[0].values[n] + rep.xi.comps[2].values[n]).abs() <= 10.0 * o.tol_res);
        }
    }

    #[test]
    fn weak_residual_small_after_newton() {
        let d = small_disk(1.0 / 32.0);
        let k = rough_k(&d, 2);
        let eta = wavy(&d, 2, 0.2, 0.0);
        let rep = solve_newton(&k, &eta, &d, None, Start::Zero, &SolveOptions::default()).unwrap();
        let bumps = [
            TestBump { center: (0.05, -0.02), scale: 0.1, amplitude: 1.0 },
            TestBump { center: (0.0, 0.1), scale: 0.08, amplitude: 1.0 },
        ];
        let w = residual_weak(&rep.xi, &k, None, &d, &bumps);
        assert_eq!(w.values.len(), 4);
        assert!(w.max_abs() <= 1e-6);
    }

    #[test]
    fn picard_needs_barriers() {
        let d = small_disk(0.1);
        let r = solve(Method::Picard, &CoefficientSet::unit(&d, 2), &VField::zeros(&d, 2), &d, None, &SolveOptions::default());
        assert!(r.is_err());
        assert_eq!("picard".parse::<Method>().unwrap(), Method::Picard);
        assert!("gauss".parse::<Method>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn residual_and_iterates_stay_zero_sum(amp in 0.0f64..1.0, seed in 0.0f64..6.0, r in 2usize..5) {
            let d = small_disk(1.0 / 16.0);
            let xi = wavy(&d, r, amp, seed);
            let k = rough_k(&d, r);
            let res = residual_strong(&xi, &k, None, &d);
            for &n in d.interior() {
                let s: f64 = res.comps.iter().map(|c| c.values[n]).sum();
                prop_assert!(s.abs() <= 1e-10 * (1.0 + interior_sup(&res, &d)));
            }
            let eta = wavy(&d, r, 0.5 * amp, seed + 1.0);
            let o = SolveOptions { picard_max_iter: 5, ..SolveOptions::default() };
            let b = build_barriers(&k, &eta, &d, &o.elliptic).unwrap();
            let rep = solve_picard(&k, &eta, &b, &d, Start::Minus, &o).unwrap();
            prop_assert!(rep.xi.zero_sum_defect(&d) <= 1e-10);
            let nw = solve_newton(&k, &eta, &d, None, Start::Zero, &o).unwrap();
            prop_assert!(nw.xi.zero_sum_defect(&d) <= 1e-10);
        }
    }
}
