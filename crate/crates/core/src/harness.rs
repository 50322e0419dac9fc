//! Families of coefficient data indexed by `N`, swept with shared barriers.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::barriers::{build_barriers, BarrierPair};
use crate::bundle::{coefficients, gauge_reduce, CoefficientSet, Convention, MetricWeights, Root, SubharmonicDatum};
use crate::error::{Error, Result};
use crate::format::g17;
use crate::grid::io::GridFile;
use crate::grid::{DiscreteDomain, ScalarField, VField};
use crate::par;
use crate::solver::{mass_terms, sandwich_violation, solve_newton, solve_picard, Method, SolveOptions, Start};

#[derive(Clone, Debug, PartialEq)]
pub enum FamilyRule {
    /// `q_N = q₀^N`.
    FixedRootsPower { roots: Vec<Root> },
    /// Explicit roots for each `N`, in the order of the `N` list.
    RootSequence { roots: Vec<Vec<Root>> },
    /// `per_n · N` simple roots drawn uniformly from a disk.
    RandomRoots {
        per_n: usize,
        seed: u64,
        center: (f64, f64),
        radius: f64,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FamilySpec {
    pub rule: FamilyRule,
    pub ns: Vec<u32>,
}

impl FamilySpec {
    pub fn validate(&self) -> Result<()> {
        if self.ns.is_empty() {
            return Err(Error::Invalid("family needs at least one N".into()));
        }
        if self.ns[0] == 0 || self.ns.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("N list must be positive and strictly increasing".into()));
        }
        match &self.rule {
            FamilyRule::FixedRootsPower { .. } => {}
            FamilyRule::RootSequence { roots } => {
                if roots.len() != self.ns.len() {
                    return Err(Error::Invalid(format!(
                        "root sequence has {} entries for {} values of N",
                        roots.len(),
                        self.ns.len()
                    )));
                }
            }
            FamilyRule::RandomRoots { per_n, radius, .. } => {
                if *per_n == 0 || !(*radius > 0.0) {
                    return Err(Error::Invalid("random roots need a positive count and radius".into()));
                }
            }
        }
        Ok(())
    }

    /// The datum `(1/N) log|q_N|² + w_{H_r}` of the member at position `idx`.
    pub fn datum(&self, idx: usize) -> SubharmonicDatum {
        let n = self.ns[idx];
        let roots = match &self.rule {
            FamilyRule::FixedRootsPower { roots } => roots
                .iter()
                .map(|a| Root {
                    mult: a.mult * n,
                    ..a.clone()
                })
                .collect(),
            FamilyRule::RootSequence { roots } => roots[idx].clone(),
            FamilyRule::RandomRoots {
                per_n,
                seed,
                center,
                radius,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(u64::from(n)));
                random_roots(per_n * n as usize, *center, *radius, &mut rng)
            }
        };
        SubharmonicDatum::PolynomialPower { roots, power: n }
    }
}

/// Simple roots uniformly distributed in a disk.
pub fn random_roots(count: usize, center: (f64, f64), radius: f64, rng: &mut impl Rng) -> Vec<Root> {
    (0..count)
        .map(|_| {
            let s = radius * rng.gen::<f64>().sqrt();
            let t = 2.0 * PI * rng.gen::<f64>();
            Root {
                re: center.0 + s * t.cos(),
                im: center.1 + s * t.sin(),
                mult: 1,
            }
        })
        .collect()
}

/// Zero-sum boundary data built from a few random low-frequency modes,
/// with sup norm at most `amp` per component.
pub fn random_smooth_eta(dom: &DiscreteDomain, r: usize, amp: f64, rng: &mut impl Rng) -> VField {
    let modes: Vec<Vec<(f64, f64, f64, f64)>> = (0..r)
        .map(|_| {
            (0..3)
                .map(|_| {
                    (
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(-3.0..3.0),
                        rng.gen_range(0.0..2.0 * PI),
                    )
                })
                .collect()
        })
        .collect();
    let raw: Vec<ScalarField> = modes
        .iter()
        .map(|m| {
            let m = m.clone();
            ScalarField::from_fn(dom, move |x, y| {
                m.iter().map(|(a, kx, ky, p)| a * (kx * x + ky * y + p).sin()).sum::<f64>() / 3.0
            })
        })
        .collect();
    let comps: Vec<ScalarField> = (0..r)
        .map(|j| {
            ScalarField {
                values: (0..dom.len())
                    .map(|n| {
                        let mean = raw.iter().map(|f| f.values[n]).sum::<f64>() / r as f64;
                        // the centred modes lie in [-2, 2]
                        amp * 0.5 * (raw[j].values[n] - mean)
                    })
                    .collect(),
            }
        })
        .collect();
    VField { comps }
}

/// `Σ_j Σ_nodes |a_j - b_j| λ h²`.
pub fn l1_distance(a: &VField, b: &VField, dom: &DiscreteDomain) -> Result<f64> {
    check_pair(a, b, dom)?;
    Ok(dom
        .nodes()
        .map(|n| {
            let d: f64 = a.comps.iter().zip(&b.comps).map(|(x, y)| (x.values[n] - y.values[n]).abs()).sum();
            d * dom.area_weight(n)
        })
        .sum())
}

pub fn linf_distance(a: &VField, b: &VField, dom: &DiscreteDomain) -> Result<f64> {
    check_pair(a, b, dom)?;
    Ok(a.sub(b).sup_norm(dom))
}

fn check_pair(a: &VField, b: &VField, dom: &DiscreteDomain) -> Result<()> {
    if a.rank() != b.rank() {
        return Err(Error::Domain(format!("rank {} against rank {}", a.rank(), b.rank())));
    }
    if a.comps.iter().chain(&b.comps).any(|c| c.len() != dom.len()) {
        return Err(Error::Domain("field does not live on this lattice".into()));
    }
    Ok(())
}

/// `Σ_nodes Σ_j m_j λ h²`.
pub fn mass_integral(xi: &VField, k: &CoefficientSet, dom: &DiscreteDomain) -> f64 {
    let m = mass_terms(xi, k, dom);
    dom.nodes()
        .map(|n| m.m.iter().map(|f| f.values[n]).sum::<f64>() * dom.area_weight(n))
        .sum()
}

/// Data shared by every member of a sweep.
#[derive(Clone, Debug)]
pub struct SweepSetup {
    pub weights: MetricWeights,
    pub eta: VField,
    pub convention: Convention,
    pub method: Method,
    pub solve: SolveOptions,
    /// Per-`N` Newton/Picard iteration caps.
    pub cap_overrides: Vec<(u32, usize)>,
    pub out_dir: Option<PathBuf>,
    pub jobs: usize,
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub n: u32,
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
    pub l1_prev: Option<f64>,
    pub linf_prev: Option<f64>,
    pub mass_integral: f64,
    pub sandwich: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// Solutions of the original (not gauge-reduced) problem.
    pub solutions: Vec<Option<VField>>,
    pub barriers: BarrierPair,
    /// Constant used for `k_r` when building the shared barriers.
    pub k_r_bound: f64,
}

impl SweepTable {
    pub fn all_converged(&self) -> bool {
        self.rows.iter().all(|r| r.converged)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "N,converged,iters,residual,l1_prev,linf_prev,mass_integral")?;
        let opt = |v: Option<f64>| v.map(g17).unwrap_or_else(|| "nan".into());
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.n,
                r.converged,
                r.iterations,
                g17(r.residual),
                opt(r.l1_prev),
                opt(r.linf_prev),
                g17(r.mass_integral)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

struct Member {
    k: CoefficientSet,
    k_hat: CoefficientSet,
    delta: VField,
}

struct Outcome {
    row: SweepRow,
    xi: Option<VField>,
}

/// Solves every member against one barrier pair built from `k̄_r = max_N sup k_{N,r}`.
pub fn sweep(fam: &FamilySpec, setup: &SweepSetup, dom: &DiscreteDomain) -> Result<SweepTable> {
    fam.validate()?;
    let r = setup.weights.rank();
    if setup.eta.rank() != r {
        return Err(Error::Invalid("boundary data and weights disagree on the rank".into()));
    }
    let mut members = Vec::with_capacity(fam.ns.len());
    for idx in 0..fam.ns.len() {
        let k = coefficients(&setup.weights, &fam.datum(idx), dom, setup.convention)?;
        let g = gauge_reduce(&setup.weights, &k, &setup.eta, dom, &setup.solve.elliptic)?;
        members.push(Member {
            k,
            k_hat: g.k_hat,
            delta: g.delta,
        });
    }
    let nodes: Vec<usize> = dom.nodes().collect();
    let k_r_bound = members
        .iter()
        .map(|m| m.k_hat.k[r - 1].max_over(&nodes))
        .fold(0.0, f64::max);
    let mut k_bar = members[0].k_hat.clone();
    k_bar.k[r - 1] = ScalarField::constant(dom, k_r_bound);
    let barriers = build_barriers(&k_bar, &setup.eta, dom, &setup.solve.elliptic)?;

    if let Some(dir) = &setup.out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let tasks: Vec<(usize, &Member)> = members.iter().enumerate().collect();
    let outcomes: Vec<Outcome> = par::with_jobs(setup.jobs, || {
        par::map_tasks(tasks, |(idx, m)| solve_member(fam.ns[idx], m, setup, &barriers, dom))
    });

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut solutions = Vec::with_capacity(outcomes.len());
    for (idx, o) in outcomes.into_iter().enumerate() {
        let mut row = o.row;
        if idx > 0 {
            if let (Some(prev), Some(cur)) = (&solutions[idx - 1], &o.xi) {
                row.l1_prev = Some(l1_distance(prev, cur, dom)?);
                row.linf_prev = Some(linf_distance(prev, cur, dom)?);
            }
        }
        if let (Some(dir), Some(xi)) = (&setup.out_dir, &o.xi) {
            let n = row.n;
            GridFile::from_vfield(dom, xi).save(dir.join(format!("member_N{n}.tdgrid")))?;
            let m = mass_terms(xi, &members[idx].k, dom);
            let dens: Vec<ScalarField> = m.m.iter().map(|f| f.map(|v| v / 4.0)).collect();
            let refs: Vec<&ScalarField> = dens.iter().collect();
            GridFile::from_fields(dom, &refs).save(dir.join(format!("member_N{n}_density.tdgrid")))?;
        }
        rows.push(row);
        solutions.push(o.xi);
    }
    let table = SweepTable {
        rows,
        solutions,
        barriers,
        k_r_bound,
    };
    if let Some(dir) = &setup.out_dir {
        table.save_csv(dir.join("sweep.csv"))?;
    }
    Ok(table)
}

fn solve_member(n: u32, m: &Member, setup: &SweepSetup, barriers: &BarrierPair, dom: &DiscreteDomain) -> Outcome {
    let mut opts = setup.solve.clone();
    if let Some(&(_, cap)) = setup.cap_overrides.iter().find(|(cn, _)| *cn == n) {
        opts.newton_max_iter = cap;
        opts.picard_max_iter = cap;
    }
    let result = match setup.method {
        Method::Newton => solve_newton(&m.k_hat, &setup.eta, dom, Some(barriers), Start::Zero, &opts),
        Method::Picard => solve_picard(&m.k_hat, &setup.eta, barriers, dom, Start::Minus, &opts),
    };
    let mut row = SweepRow {
        n,
        converged: false,
        iterations: 0,
        residual: f64::NAN,
        l1_prev: None,
        linf_prev: None,
        mass_integral: f64::NAN,
        sandwich: f64::NAN,
        error: None,
    };
    match result {
        Ok(rep) => {
            row.converged = rep.converged();
            row.iterations = rep.iterations;
            row.residual = rep.residual;
            row.sandwich = sandwich_violation(&rep.xi, barriers, dom);
            if !row.converged {
                row.error = Some(format!("stopped: {}", rep.status));
                return Outcome { row, xi: None };
            }
            let xi = rep.xi.sub(&m.delta);
            row.mass_integral = mass_integral(&xi, &m.k, dom);
            Outcome { row, xi: Some(xi) }
        }
        Err(e) => {
            row.error = Some(e.to_string());
            Outcome { row, xi: None }
        }
    }
}
