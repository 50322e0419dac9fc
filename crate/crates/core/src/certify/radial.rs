//! Rotationally symmetric reference solutions on a disk, computed by a
//! one-dimensional finite-difference Newton iteration in the radius.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Profile = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct RadialProblem {
    /// `k_j(t)` for `j = 0..r`.
    pub k: Vec<Profile>,
    /// Constant zero-sum boundary value at `t = radius`.
    pub eta: Vec<f64>,
    pub radius: f64,
    /// Number of mesh intervals.
    pub n: usize,
}

impl RadialProblem {
    pub fn rank(&self) -> usize {
        self.k.len()
    }
}

#[derive(Clone, Debug)]
pub struct RadialProfile {
    pub t: Vec<f64>,
    /// `xi[j][i]` is component `j` at radius `t[i]`.
    pub xi: Vec<Vec<f64>>,
    pub iterations: usize,
    pub residual: f64,
}

impl RadialProfile {
    pub fn center(&self) -> Vec<f64> {
        self.xi.iter().map(|c| c[0]).collect()
    }

    /// Linear interpolation in the radius, clamped to the mesh.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.t.len() - 1;
        let dt = self.t[n] / n as f64;
        let s = (t / dt).clamp(0.0, n as f64);
        let i = (s.floor() as usize).min(n - 1);
        let a = s - i as f64;
        self.xi.iter().map(|c| (1.0 - a) * c[i] + a * c[i + 1]).collect()
    }
}

const MAX_NEWTON: usize = 80;
/// Relative size of a Newton step below which the iteration stops.
const STEP_TOL: f64 = 1e-13;

struct Mesh<'a> {
    p: &'a RadialProblem,
    dt: f64,
    /// `k_j(t_i)` cached per node.
    kv: Vec<Vec<f64>>,
}

impl Mesh<'_> {
    fn t(&self, i: usize) -> f64 {
        i as f64 * self.dt
    }

    /// Full zero-sum vector from the `r-1` leading unknowns.
    fn full(&self, y: &[f64]) -> Vec<f64> {
        let mut x = y.to_vec();
        x.push(-y.iter().sum::<f64>());
        x
    }

    fn masses(&self, i: usize, y: &[f64]) -> Vec<f64> {
        let r = self.p.rank();
        let x = self.full(y);
        (0..r)
            .map(|j| 4.0 * self.kv[i][j] * (x[(j + 1) % r] - x[j]).clamp(-700.0, 700.0).exp())
            .collect()
    }

    /// Leading `r-1` components of `Σ m_j v_j` and their derivative in `y`.
    fn source(&self, i: usize, y: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
        let r = self.p.rank();
        let b = r - 1;
        let m = self.masses(i, y);
        let f: Vec<f64> = (0..b).map(|c| m[(c + r - 1) % r] - m[c]).collect();
        // d ξ_p / d y_d
        let e = |p: usize, d: usize| -> f64 {
            if p == r - 1 {
                -1.0
            } else if p == d {
                1.0
            } else {
                0.0
            }
        };
        let dm = |j: usize, d: usize| m[j] * (e((j + 1) % r, d) - e(j, d));
        let jac = DMatrix::from_fn(b, b, |c, d| dm((c + r - 1) % r, d) - dm(c, d));
        (f, jac)
    }

    /// Residual of the discrete system at unknown rows `0..n`.
    fn residual(&self, y: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let n = self.p.n;
        let b = self.p.rank() - 1;
        let dt2 = self.dt * self.dt;
        let at = |i: usize, c: usize| if i == n { self.p.eta[c] } else { y[i][c] };
        (0..n)
            .map(|i| {
                let (f, _) = self.source(i, &y[i]);
                (0..b)
                    .map(|c| {
                        let lap = if i == 0 {
                            4.0 * (at(1, c) - at(0, c)) / dt2
                        } else {
                            let t = self.t(i);
                            (at(i + 1, c) - 2.0 * at(i, c) + at(i - 1, c)) / dt2
                                + (at(i + 1, c) - at(i - 1, c)) / (2.0 * t * self.dt)
                        };
                        -lap + f[c]
                    })
                    .collect()
            })
            .collect()
    }

    /// Solves `J dy = rhs` with block Thomas elimination.
    fn newton_step(&self, y: &[Vec<f64>], rhs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let n = self.p.n;
        let b = self.p.rank() - 1;
        let dt2 = self.dt * self.dt;
        let eye = DMatrix::<f64>::identity(b, b);
        let mut cp: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        let mut dp: Vec<DVector<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let (_, df) = self.source(i, &y[i]);
            let (lower, diag, upper) = if i == 0 {
                (0.0, 4.0 / dt2, -4.0 / dt2)
            } else {
                let g = 1.0 / (2.0 * self.t(i) * self.dt);
                (-(1.0 / dt2 - g), 2.0 / dt2, -(1.0 / dt2 + g))
            };
            let mut m = &eye * diag + df;
            let mut d = DVector::from_column_slice(&rhs[i]);
            if i > 0 {
                m -= &cp[i - 1] * lower;
                d -= &dp[i - 1] * lower;
            }
            let lu = m.lu();
            let c = if i + 1 < n { &eye * upper } else { DMatrix::zeros(b, b) };
            let ci = lu
                .solve(&c)
                .ok_or_else(|| Error::Invalid(format!("singular radial block at node {i}")))?;
            let di = lu
                .solve(&d)
                .ok_or_else(|| Error::Invalid(format!("singular radial block at node {i}")))?;
            cp.push(ci);
            dp.push(di);
        }
        let mut x = vec![DVector::zeros(b); n];
        x[n - 1] = dp[n - 1].clone();
        for i in (0..n - 1).rev() {
            x[i] = &dp[i] - &cp[i] * &x[i + 1];
        }
        Ok(x.into_iter().map(|v| v.as_slice().to_vec()).collect())
    }
}

fn sup(v: &[Vec<f64>]) -> f64 {
    v.iter().flatten().fold(0.0, |a, x| a.max(x.abs()))
}

/// Solves `-(ξ'' + ξ'/t) + Σ_j 4 k_j e^{ξ_{j+1} - ξ_j} v_j = 0` on `[0, R]`
/// with `ξ'(0) = 0`, `ξ(R) = η`. At the center the radial Laplacian is replaced
/// by its limit `2 ξ''(0)`, discretized as `4 (ξ_1 - ξ_0) / dt^2`.
pub fn radial_oracle(p: &RadialProblem) -> Result<RadialProfile> {
    let r = p.rank();
    if r < 2 {
        return Err(Error::Invalid("rank must be at least 2".into()));
    }
    if p.eta.len() != r {
        return Err(Error::Invalid("boundary vector has the wrong length".into()));
    }
    if p.eta.iter().sum::<f64>().abs() > 1e-12 || p.eta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("boundary vector must be finite with zero sum".into()));
    }
    if !(p.radius > 0.0) || p.n < 2 {
        return Err(Error::Invalid("need a positive radius and at least two intervals".into()));
    }
    let dt = p.radius / p.n as f64;
    let kv: Vec<Vec<f64>> = (0..p.n)
        .map(|i| p.k.iter().map(|k| k(i as f64 * dt)).collect())
        .collect();
    if kv.iter().flatten().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Invalid("coefficient profiles must be finite and nonnegative".into()));
    }
    let mesh = Mesh { p, dt, kv };
    let b = r - 1;
    let mut y: Vec<Vec<f64>> = vec![p.eta[..b].to_vec(); p.n];
    let mut res = mesh.residual(&y);
    let mut rn = sup(&res);
    let mut iterations = 0;
    // rounding in the second differences puts a floor near 1e-16 / dt^2 on rn
    let floor = 1e-14 / (dt * dt);
    while rn > floor * (1.0 + sup(&y)) {
        if iterations == MAX_NEWTON {
            return Err(Error::MaxIterations {
                cap: MAX_NEWTON,
                residual: rn,
            });
        }
        iterations += 1;
        let neg: Vec<Vec<f64>> = res.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        let step = mesh.newton_step(&y, &neg)?;
        let size = sup(&step);
        let mut a = 1.0;
        loop {
            let trial: Vec<Vec<f64>> = y
                .iter()
                .zip(&step)
                .map(|(u, s)| u.iter().zip(s).map(|(u, s)| u + a * s).collect())
                .collect();
            let tr = mesh.residual(&trial);
            let tn = sup(&tr);
            if tn < rn || a < 1e-3 {
                y = trial;
                res = tr;
                rn = tn;
                break;
            }
            a *= 0.5;
        }
        if size <= STEP_TOL * (1.0 + sup(&y)) {
            break;
        }
    }
    let t: Vec<f64> = (0..=p.n).map(|i| i as f64 * dt).collect();
    let mut xi = vec![Vec::with_capacity(p.n + 1); r];
    for row in y.iter().chain(std::iter::once(&p.eta[..b].to_vec())) {
        let full = mesh.full(row);
        for (j, v) in full.into_iter().enumerate() {
            xi[j].push(v);
        }
    }
    Ok(RadialProfile {
        t,
        xi,
        iterations,
        residual: rn,
    })
}
