//! Command implementations. Each returns a process exit code:
//! 0 success, 2 configuration error, 3 solver failure, 4 certificate failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use toda_core::barriers::{build_barriers, default_barrier_tol, verify_barriers, BarrierPair};
use toda_core::certify::{
    check_prop2, check_prop3, prop3_tolerance, radial_oracle, save_certificates_csv, Certificate, RadialProblem,
    RadialProfile,
};
use toda_core::format::{csv_row, g17};
use toda_core::grid::io::{save_csv, GridFile};
use toda_core::grid::{ScalarField, VField};
use toda_core::harness::{sweep, SweepSetup};
use toda_core::par;
use toda_core::solver::{residual_strong, sandwich_violation, solve, Method, SolveReport};
use toda_core::Error;

use crate::config::{Overrides, Problem};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_SOLVER: i32 = 3;
pub const EXIT_CERTIFICATE: i32 = 4;

#[derive(Clone, Debug)]
pub struct Context {
    pub config: PathBuf,
    pub out: PathBuf,
    pub jobs: usize,
    pub overrides: Overrides,
}

struct Failure {
    code: i32,
    msg: String,
}

type Outcome = std::result::Result<i32, Failure>;

fn config_failure(e: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        msg: e.to_string(),
    }
}

fn solver_failure(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_SOLVER,
        msg: e.to_string(),
    }
}

fn finish(ctx: &Context, f: impl FnOnce(&Context) -> Outcome + Send) -> i32 {
    match par::with_jobs(ctx.jobs, || f(ctx)) {
        Ok(code) => code,
        Err(fail) => {
            eprintln!("error: {}", fail.msg);
            fail.code
        }
    }
}

fn prepare(ctx: &Context) -> std::result::Result<Problem, Failure> {
    let p = Problem::load(&ctx.config, &ctx.overrides).map_err(config_failure)?;
    std::fs::create_dir_all(&ctx.out).map_err(|e| solver_failure(format!("{}: {e}", ctx.out.display())))?;
    Ok(p)
}

struct Report {
    lines: String,
}

impl Report {
    fn new(command: &str, p: &Problem) -> Self {
        let mut r = Report { lines: String::new() };
        r.line(format!("command: {command}"));
        r.line(format!("rank: {}", p.cfg.rank));
        r.line(format!(
            "lattice: {}x{} h={} interior={} boundary={}",
            p.dom.nx(),
            p.dom.ny(),
            g17(p.dom.h()),
            p.dom.interior().len(),
            p.dom.boundary().len()
        ));
        r.line(format!("convention: {}", p.convention));
        r
    }

    fn line(&mut self, s: impl AsRef<str>) {
        self.lines.push_str(s.as_ref());
        self.lines.push('\n');
    }

    fn certificates(&mut self, certs: &[Certificate]) {
        for c in certs {
            let _ = write!(
                self.lines,
                "certificate {}: {} violation={} tolerance={}",
                c.name,
                if c.pass { "pass" } else { "FAIL" },
                g17(c.violation),
                g17(c.tolerance)
            );
            if let Some((x, y)) = c.location {
                let _ = write!(self.lines, " at ({}, {})", g17(x), g17(y));
            }
            self.lines.push('\n');
        }
    }

    fn save(&self, dir: &Path) -> std::result::Result<(), Failure> {
        std::fs::write(dir.join("report.txt"), &self.lines).map_err(solver_failure)
    }
}

fn solve_summary(rep: &mut Report, s: &SolveReport) {
    rep.line(format!("method: {}", s.method));
    rep.line(format!("status: {}", s.status));
    rep.line(format!("iterations: {}", s.iterations));
    rep.line(format!("residual: {}", g17(s.residual)));
    rep.line(format!("last update: {}", g17(s.update)));
    rep.line(format!("linear iterations: {}", s.linear_iterations));
    rep.line(format!("wall time s: {:.3}", s.wall_time.as_secs_f64()));
    if s.method == Method::Picard {
        rep.line(format!("final damping: {}", g17(s.theta)));
    }
    if s.clamped {
        rep.line("warning: an exponent hit the clamp");
    }
    if s.left_c {
        rep.line(format!(
            "warning: an iterate left the barrier sandwich (max {})",
            g17(s.max_sandwich)
        ));
    }
    for n in &s.notes {
        rep.line(format!("note: {n}"));
    }
}

/// The certificate suite for a solution `xi` of the original problem.
pub fn solution_certificates(p: &Problem, xi: &VField, barriers: Option<&BarrierPair>) -> Vec<Certificate> {
    let dom = &p.dom;
    let h2 = dom.h() * dom.h();
    let res = residual_strong(xi, &p.k, Some(&p.curvature), dom);
    let mut worst = (0.0, None);
    for &n in dom.interior() {
        for c in &res.comps {
            let v = c.values[n].abs();
            if v > worst.0 || v.is_nan() {
                worst = (if v.is_nan() { f64::INFINITY } else { v }, Some(dom.coords(n)));
            }
        }
    }
    let mut certs = vec![Certificate::new("residual", worst.0, worst.1, p.tol_residual())];

    let mut bnd = (0.0, None);
    for &n in dom.boundary() {
        for (c, e) in xi.comps.iter().zip(&p.eta.comps) {
            let v = (c.values[n] - e.values[n]).abs();
            if v > bnd.0 || v.is_nan() {
                bnd = (if v.is_nan() { f64::INFINITY } else { v }, Some(dom.coords(n)));
            }
        }
    }
    certs.push(Certificate::new(
        "boundary",
        bnd.0,
        bnd.1,
        p.cfg.validate.tol_boundary.unwrap_or(1e-12),
    ));
    certs.push(Certificate::new("zero-sum", xi.zero_sum_defect(dom), None, 1e-12));

    let tol2 = p.cfg.validate.tol_prop2.unwrap_or(10.0 * h2);
    certs.push(check_prop2(xi, xi, &res, &res, dom, tol2));

    // mass terms are gauge invariant, so the reduced pair gives the same values
    let xi_hat = VField {
        comps: xi
            .comps
            .iter()
            .zip(&p.gauge.delta.comps)
            .map(|(a, d)| a.zip_map(d, |x, y| x + y))
            .collect(),
    };
    let tol3 = p
        .cfg
        .validate
        .tol_prop3
        .unwrap_or_else(|| prop3_tolerance(&xi_hat, &p.gauge.k_hat, dom));
    certs.push(match check_prop3(&xi_hat, &p.gauge.k_hat, dom, tol3) {
        Ok(c) => c,
        Err(_) => Certificate::new("prop3", f64::INFINITY, None, tol3),
    });
    if let Some(b) = barriers {
        certs.push(Certificate::new(
            "sandwich",
            sandwich_violation(&xi_hat, b, dom),
            None,
            p.opts.sandwich_tol(dom),
        ));
    }
    certs
}

fn oracle_profile(p: &Problem) -> Option<toda_core::Result<RadialProfile>> {
    let rd = p.radial.as_ref()?;
    let r = p.cfg.rank;
    let e = rd.exponent;
    let mut k: Vec<Arc<dyn Fn(f64) -> f64 + Send + Sync>> = (0..r - 1)
        .map(|_| Arc::new(|_t: f64| 1.0) as Arc<dyn Fn(f64) -> f64 + Send + Sync>)
        .collect();
    k.push(Arc::new(move |t: f64| if e == 0.0 { 1.0 } else { t.powf(e) }));
    Some(radial_oracle(&RadialProblem {
        k,
        eta: rd.eta.clone(),
        radius: rd.radius,
        n: p.cfg.oracle.n,
    }))
}

fn oracle_diff(p: &Problem, xi: &VField, prof: &RadialProfile) -> f64 {
    let (cx, cy) = match p.cfg.domain {
        crate::config::DomainConfig::Disk { center, .. } => (center[0], center[1]),
        _ => (0.0, 0.0),
    };
    let mut worst: f64 = 0.0;
    for n in p.dom.nodes() {
        let (x, y) = p.dom.coords(n);
        let o = prof.eval((x - cx).hypot(y - cy));
        for (c, v) in xi.comps.iter().zip(&o) {
            worst = worst.max((c.values[n] - v).abs());
        }
    }
    worst
}

fn write_barrier_artifacts(dir: &Path, p: &Problem, b: &BarrierPair) -> std::result::Result<Certificate, Failure> {
    let tol = default_barrier_tol(&p.dom);
    let rep = verify_barriers(b, &p.gauge.k_hat, &p.eta, &p.dom, Some(tol));
    rep.save_csv(dir.join("barriers.csv")).map_err(solver_failure)?;
    Ok(Certificate::new("barriers", rep.max_violation(), None, tol))
}

pub fn cmd_solve(ctx: &Context) -> i32 {
    finish(ctx, |ctx| {
        let p = prepare(ctx)?;
        let dir = &ctx.out;
        let mut rep = Report::new("solve", &p);
        let mut certs = Vec::new();
        let barriers = match build_barriers(&p.gauge.k_hat, &p.eta, &p.dom, &p.opts.elliptic) {
            Ok(b) => {
                rep.line(format!("barrier rho min: {}", g17(b.rho.min_over(p.dom.interior()))));
                certs.push(write_barrier_artifacts(dir, &p, &b)?);
                Some(b)
            }
            Err(e) => {
                rep.line(format!("barriers: not available ({e})"));
                if p.method == Method::Picard {
                    rep.save(dir)?;
                    return Err(solver_failure(format!("barrier construction failed: {e}")));
                }
                None
            }
        };
        let s = match solve(p.method, &p.gauge.k_hat, &p.eta, &p.dom, barriers.as_ref(), &p.opts) {
            Ok(s) => s,
            Err(e) => {
                rep.line(format!("solver error: {e}"));
                rep.save(dir)?;
                return Err(solver_failure(e));
            }
        };
        solve_summary(&mut rep, &s);
        s.save_trace_csv(dir.join("trace.csv")).map_err(solver_failure)?;
        if !s.converged() {
            rep.save(dir)?;
            return Err(solver_failure(format!(
                "{} stopped ({}) with residual {}",
                s.method,
                s.status,
                g17(s.residual)
            )));
        }
        let xi = p.gauge.restore(&s.xi);
        GridFile::from_vfield(&p.dom, &xi)
            .save(dir.join("solution.tdgrid"))
            .map_err(solver_failure)?;
        let refs: Vec<&ScalarField> = xi.comps.iter().collect();
        save_csv(dir.join("solution.csv"), &p.dom, &refs).map_err(solver_failure)?;
        rep.line(format!("sup norm: {}", g17(xi.sup_norm(&p.dom))));

        certs.extend(solution_certificates(&p, &xi, barriers.as_ref()));
        save_certificates_csv(dir.join("certificates.csv"), &certs).map_err(solver_failure)?;
        rep.certificates(&certs);
        match oracle_profile(&p) {
            Some(Ok(prof)) => rep.line(format!("oracle-diff: {}", g17(oracle_diff(&p, &xi, &prof)))),
            Some(Err(e)) => rep.line(format!("oracle-diff: unavailable ({e})")),
            None => {}
        }
        rep.save(dir)?;
        if certs.iter().all(|c| c.pass) {
            Ok(EXIT_OK)
        } else {
            let failed: Vec<&str> = certs.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
            eprintln!("certificate failure: {}", failed.join(", "));
            Ok(EXIT_CERTIFICATE)
        }
    })
}

pub fn cmd_validate(ctx: &Context, solution: &Path) -> i32 {
    finish(ctx, |ctx| {
        let p = prepare(ctx)?;
        let g = GridFile::load(solution).map_err(|e| Failure {
            code: EXIT_CONFIG,
            msg: format!("{}: {e}", solution.display()),
        })?;
        g.check_lattice(&p.dom).map_err(config_failure)?;
        if g.rank() != p.cfg.rank {
            return Err(Failure {
                code: EXIT_CONFIG,
                msg: format!("solution has rank {}, config has rank {}", g.rank(), p.cfg.rank),
            });
        }
        let xi = g.to_vfield();
        let mut rep = Report::new("validate", &p);
        rep.line(format!("solution: {}", solution.display()));
        let barriers = build_barriers(&p.gauge.k_hat, &p.eta, &p.dom, &p.opts.elliptic).ok();
        if barriers.is_none() {
            rep.line("barriers: not available, sandwich certificate skipped");
        }
        let certs = solution_certificates(&p, &xi, barriers.as_ref());
        save_certificates_csv(ctx.out.join("certificates.csv"), &certs).map_err(solver_failure)?;
        rep.certificates(&certs);
        rep.save(&ctx.out)?;
        Ok(if certs.iter().all(|c| c.pass) {
            EXIT_OK
        } else {
            EXIT_CERTIFICATE
        })
    })
}

pub fn cmd_barriers(ctx: &Context) -> i32 {
    finish(ctx, |ctx| {
        let p = prepare(ctx)?;
        let b = build_barriers(&p.gauge.k_hat, &p.eta, &p.dom, &p.opts.elliptic).map_err(solver_failure)?;
        let cert = write_barrier_artifacts(&ctx.out, &p, &b)?;
        let minus = p.gauge.restore(&b.minus);
        let plus = p.gauge.restore(&b.plus);
        let refs: Vec<&ScalarField> = minus.comps.iter().chain(&plus.comps).collect();
        GridFile::from_fields(&p.dom, &refs)
            .save(ctx.out.join("barriers.tdgrid"))
            .map_err(solver_failure)?;
        let mut rep = Report::new("barriers", &p);
        rep.line(format!("rho min: {}", g17(b.rho.min_over(p.dom.interior()))));
        rep.line(format!("rho max: {}", g17(b.rho.max_over(p.dom.interior()))));
        rep.line(format!("envelope f min: {}", g17(b.f.min_over(p.dom.interior()))));
        rep.certificates(std::slice::from_ref(&cert));
        rep.save(&ctx.out)?;
        Ok(if cert.pass { EXIT_OK } else { EXIT_CERTIFICATE })
    })
}

pub fn cmd_sweep(ctx: &Context) -> i32 {
    finish(ctx, |ctx| {
        let p = prepare(ctx)?;
        let Some(sc) = &p.cfg.sweep else {
            return Err(Failure {
                code: EXIT_CONFIG,
                msg: "config has no [sweep] section".into(),
            });
        };
        let center = p.cfg.domain.center();
        let (fam, caps) = sc.family(p.cfg.rank, center).map_err(config_failure)?;
        let setup = SweepSetup {
            weights: p.weights.clone(),
            eta: p.eta.clone(),
            convention: p.convention,
            method: p.method,
            solve: p.opts.clone(),
            cap_overrides: caps,
            out_dir: Some(ctx.out.clone()),
            jobs: ctx.jobs,
        };
        let table = sweep(&fam, &setup, &p.dom).map_err(|e| match e {
            Error::Config(_) | Error::Invalid(_) | Error::Domain(_) => config_failure(e),
            other => solver_failure(other),
        })?;
        let mut rep = Report::new("sweep", &p);
        rep.line(format!("shared k_r bound: {}", g17(table.k_r_bound)));
        for row in &table.rows {
            rep.line(format!(
                "N={} converged={} iters={} residual={} sandwich={} mass_integral={}{}",
                row.n,
                row.converged,
                row.iterations,
                g17(row.residual),
                g17(row.sandwich),
                g17(row.mass_integral),
                row.error.as_ref().map(|e| format!(" error: {e}")).unwrap_or_default()
            ));
        }
        rep.line("mass_integral is an energy-density proxy: the integral of the total mass term");
        rep.save(&ctx.out)?;
        if table.all_converged() {
            Ok(EXIT_OK)
        } else {
            eprintln!("some sweep members did not converge");
            Ok(EXIT_SOLVER)
        }
    })
}

pub fn cmd_oracle(ctx: &Context) -> i32 {
    finish(ctx, |ctx| {
        let p = prepare(ctx)?;
        let prof = match oracle_profile(&p) {
            None => {
                return Err(Failure {
                    code: EXIT_CONFIG,
                    msg: "config is not radial: need a flat centred disk, roots at the centre and constant \
                          boundary values"
                        .into(),
                })
            }
            Some(r) => r.map_err(solver_failure)?,
        };
        let r = p.cfg.rank;
        let mut csv = String::from("t");
        for j in 1..=r {
            let _ = write!(csv, ",xi{j}");
        }
        csv.push('\n');
        let mut row = Vec::with_capacity(r + 1);
        for (i, t) in prof.t.iter().enumerate() {
            row.clear();
            row.push(*t);
            row.extend(prof.xi.iter().map(|c| c[i]));
            csv.push_str(&csv_row(&row));
            csv.push('\n');
        }
        std::fs::write(ctx.out.join("oracle.csv"), csv).map_err(solver_failure)?;
        let mut rep = Report::new("oracle", &p);
        rep.line(format!("mesh intervals: {}", prof.t.len() - 1));
        rep.line(format!("newton iterations: {}", prof.iterations));
        rep.line(format!("residual: {}", g17(prof.residual)));
        let c: Vec<String> = prof.center().into_iter().map(g17).collect();
        rep.line(format!("center: {}", c.join(" ")));
        rep.save(&ctx.out)?;
        Ok(EXIT_OK)
    })
}
