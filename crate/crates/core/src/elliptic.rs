//! Dirichlet problems for the conformal Laplacian: Poisson, harmonic
//! extension, and the semilinear problem `Δρ = f e^{-rρ}` used by barriers.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::grid::{DiscreteDomain, NodeKind, ScalarField};
use crate::linalg::{CsrMatrix, LinearMethod, SpdSolver};
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KwMethod {
    /// Damped Newton from zero.
    #[default]
    Newton,
    /// Monotone fixed point `Δρ_{n+1} = f e^{-rρ_n}` from zero.
    MonotoneSweep,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub linear_tol: f64,
    pub linear_max_iter: usize,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    pub sweep_max_iter: usize,
    pub min_damping: f64,
    pub linear_method: LinearMethod,
    pub kw_method: KwMethod,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            linear_tol: 1e-12,
            linear_max_iter: 50_000,
            newton_tol: 1e-10,
            newton_max_iter: 60,
            sweep_max_iter: 5_000,
            min_damping: 1.0 / 1024.0,
            linear_method: LinearMethod::Auto,
            kw_method: KwMethod::Newton,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    pub residual: f64,
    pub wall_time: Duration,
}

/// Factored Dirichlet Laplacian on a fixed domain.
pub struct PoissonOperator<'d> {
    dom: &'d DiscreteDomain,
    solver: SpdSolver,
    linear_tol: f64,
    linear_max_iter: usize,
}

impl<'d> PoissonOperator<'d> {
    pub fn new(dom: &'d DiscreteDomain, opts: &SolverOptions) -> Result<Self> {
        let a = CsrMatrix::stencil_system(dom, 1, &[1.0], |_, _| {});
        Ok(PoissonOperator {
            dom,
            solver: SpdSolver::new(a, 1, opts.linear_method)?,
            linear_tol: opts.linear_tol,
            linear_max_iter: opts.linear_max_iter,
        })
    }

    pub fn domain(&self) -> &DiscreteDomain {
        self.dom
    }

    /// Solves `Δu = rhs` in the interior with `u = bc` on the boundary.
    /// `warm`, if given, seeds the iterative backend.
    pub fn solve(
        &self,
        rhs: &ScalarField,
        bc: &ScalarField,
        warm: Option<&ScalarField>,
    ) -> Result<(ScalarField, SolveStats)> {
        let start = Instant::now();
        let dom = self.dom;
        let h2 = dom.h() * dom.h();
        let lam = dom.lambda();
        let interior = dom.interior();
        let b = par::map_range(interior.len(), |s| {
            let k = interior[s];
            let mut v = lam[k] * h2 * rhs.values[k];
            for m in dom.neighbours(k) {
                if dom.kind(m) == NodeKind::Boundary {
                    v += bc.values[m];
                }
            }
            v
        });
        let mut x: Vec<f64> = match warm {
            Some(w) => interior.iter().map(|&k| w.values[k]).collect(),
            None => vec![0.0; interior.len()],
        };
        let out = self
            .solver
            .solve(&b, &mut x, self.linear_tol, self.linear_max_iter)?;
        let mut u = ScalarField::zeros(dom);
        for &k in dom.boundary() {
            u.values[k] = bc.values[k];
        }
        for (s, &k) in interior.iter().enumerate() {
            u.values[k] = x[s];
        }
        u.ensure_finite(dom, "poisson solution")?;
        Ok((
            u,
            SolveStats {
                iterations: out.iterations,
                residual: out.rel_residual,
                wall_time: start.elapsed(),
            },
        ))
    }
}

pub fn solve_poisson(
    rhs: &ScalarField,
    bc: &ScalarField,
    dom: &DiscreteDomain,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveStats)> {
    PoissonOperator::new(dom, opts)?.solve(rhs, bc, None)
}

/// Discrete harmonic function with the boundary values of `bc`.
pub fn harmonic_extension(bc: &ScalarField, dom: &DiscreteDomain, opts: &SolverOptions) -> Result<ScalarField> {
    let zero = ScalarField::zeros(dom);
    Ok(solve_poisson(&zero, bc, dom, opts)?.0)
}

fn kw_residual(rho: &ScalarField, f: &ScalarField, r: f64, dom: &DiscreteDomain) -> Vec<f64> {
    let lap = crate::grid::laplacian(rho, dom);
    let interior = dom.interior();
    par::map_range(interior.len(), |s| {
        let k = interior[s];
        lap.values[k] - f.values[k] * (-r * rho.values[k]).exp()
    })
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| if x.is_nan() { f64::NAN } else { m.max(x.abs()) })
}

/// Solves `Δρ = f e^{-rρ}` with `ρ = 0` on the boundary, for `f ≤ 0`.
///
/// With `f ≤ 0` this is a Gelfand-type problem and has a solution only when
/// `r·|f|` is small relative to the domain size; past that threshold Newton
/// meets an indefinite Jacobian and the sweep diverges, and both report it.
pub fn solve_semilinear_kw(
    f: &ScalarField,
    r: f64,
    dom: &DiscreteDomain,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveStats)> {
    if !(r > 0.0) {
        return Err(Error::Invalid(format!("exponent rate must be positive, got {r}")));
    }
    for &k in dom.interior() {
        let v = f.values[k];
        if !v.is_finite() {
            return Err(Error::NonFinite("barrier source".into()));
        }
        if v > 0.0 {
            let (x, y) = dom.coords(k);
            return Err(Error::Invalid(format!(
                "barrier source must be non-positive, found {v} at ({x}, {y})"
            )));
        }
    }
    match opts.kw_method {
        KwMethod::Newton => kw_newton(f, r, dom, opts),
        KwMethod::MonotoneSweep => kw_sweep(f, r, dom, opts),
    }
}

fn kw_newton(
    f: &ScalarField,
    r: f64,
    dom: &DiscreteDomain,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveStats)> {
    let start = Instant::now();
    let interior = dom.interior();
    let h2 = dom.h() * dom.h();
    let lam = dom.lambda();
    let scale = 1.0 + f.sup_norm(dom);
    let mut rho = ScalarField::zeros(dom);
    let mut res = kw_residual(&rho, f, r, dom);
    let mut norm2 = par::dot(&res, &res).sqrt();
    let mut trace = vec![sup(&res)];
    for it in 0..opts.newton_max_iter {
        let rn = sup(&res);
        if rn <= opts.newton_tol * scale {
            return Ok((
                rho,
                SolveStats {
                    iterations: it,
                    residual: rn,
                    wall_time: start.elapsed(),
                },
            ));
        }
        let a = CsrMatrix::stencil_system(dom, 1, &[1.0], |s, out| {
            let k = interior[s];
            out[0] = lam[k] * h2 * r * f.values[k] * (-r * rho.values[k]).exp();
        });
        let solver = SpdSolver::new(a, 1, opts.linear_method)?;
        let rhs: Vec<f64> = (0..interior.len())
            .map(|s| -lam[interior[s]] * h2 * res[s])
            .collect();
        let mut step = vec![0.0; interior.len()];
        let tol = opts.linear_tol.max(1e-2f64.min(rn / scale));
        solver.solve(&rhs, &mut step, tol, opts.linear_max_iter)?;
        let mut theta = 1.0;
        loop {
            let mut trial = rho.clone();
            for (s, &k) in interior.iter().enumerate() {
                trial.values[k] += theta * step[s];
            }
            let tres = kw_residual(&trial, f, r, dom);
            let tn = par::dot(&tres, &tres).sqrt();
            if tn.is_finite() && tn < norm2 {
                rho = trial;
                res = tres;
                norm2 = tn;
                break;
            }
            theta *= 0.5;
            if theta < opts.min_damping {
                return Err(Error::Stagnation { steps: it + 1, trace });
            }
        }
        trace.push(sup(&res));
    }
    Err(Error::MaxIterations {
        cap: opts.newton_max_iter,
        residual: sup(&res),
    })
}

fn kw_sweep(
    f: &ScalarField,
    r: f64,
    dom: &DiscreteDomain,
    opts: &SolverOptions,
) -> Result<(ScalarField, SolveStats)> {
    let start = Instant::now();
    let op = PoissonOperator::new(dom, opts)?;
    let zero = ScalarField::zeros(dom);
    let scale = 1.0 + f.sup_norm(dom);
    let mut rho = zero.clone();
    let mut trace = Vec::new();
    for it in 0..opts.sweep_max_iter {
        let src = f.zip_map(&rho, |fv, p| fv * (-r * p).exp());
        let (next, _) = op.solve(&src, &zero, Some(&rho))?;
        let delta = next.zip_map(&rho, |a, b| a - b).sup_norm(dom);
        rho = next;
        trace.push(delta);
        if !delta.is_finite() {
            return Err(Error::NonFinite("barrier sweep".into()));
        }
        // monotone divergence: increments stop shrinking
        if it >= 20 && delta >= trace[it - 10] {
            return Err(Error::Stagnation { steps: it + 1, trace });
        }
        let rn = sup(&kw_residual(&rho, f, r, dom));
        if rn <= opts.newton_tol * scale {
            return Ok((
                rho,
                SolveStats {
                    iterations: it + 1,
                    residual: rn,
                    wall_time: start.elapsed(),
                },
            ));
        }
    }
    Err(Error::MaxIterations {
        cap: opts.sweep_max_iter,
        residual: sup(&kw_residual(&rho, f, r, dom)),
    })
}
