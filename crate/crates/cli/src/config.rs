//! TOML run configuration and its translation into a solvable problem.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Deserialize;
use toda_core::bundle::{
    coefficients, curvature_term, gauge_reduce, CoefficientSet, Convention, GaugeReduction, MetricWeights, PointMass,
    Root, SubharmonicDatum,
};
use toda_core::grid::io::GridFile;
use toda_core::grid::{ConformalFactor, DiscreteDomain, DomainSpec, ScalarField, Shape, VField};
use toda_core::harness::{FamilyRule, FamilySpec};
use toda_core::linalg::LinearMethod;
use toda_core::solver::{Method, SolveOptions};
use toda_core::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub rank: usize,
    #[serde(default = "default_convention")]
    pub convention: String,
    pub domain: DomainConfig,
    #[serde(default)]
    pub weights: WeightsConfig,
    pub phi: PhiConfig,
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub validate: ValidateConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
}

fn default_convention() -> String {
    "norm".into()
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DomainConfig {
    Disk {
        #[serde(default)]
        center: [f64; 2],
        radius: f64,
        h: f64,
        /// `λ = exp(a |z|²)` when set.
        gaussian_lambda: Option<f64>,
    },
    Rectangle {
        bounds: [f64; 4],
        h: f64,
        gaussian_lambda: Option<f64>,
    },
    /// `{f_X < level}` for `f_X = ((x - cx)/ax)² + ((y - cy)/ay)²`.
    Sublevel {
        #[serde(default)]
        center: [f64; 2],
        #[serde(default = "unit_axes")]
        axes: [f64; 2],
        level: f64,
        h: f64,
        gaussian_lambda: Option<f64>,
    },
}

fn unit_axes() -> [f64; 2] {
    [1.0, 1.0]
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum WeightsConfig {
    #[default]
    Flat,
    /// TDGRID1 file with one field per weight `w_1..w_r`.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PhiConfig {
    /// Roots as `[re, im, multiplicity]`.
    Polynomial {
        #[serde(default)]
        roots: Vec<[f64; 3]>,
        #[serde(default = "one")]
        power: u32,
    },
    /// Point masses as `[re, im, weight]`.
    LogPotential { masses: Vec<[f64; 3]> },
    /// `φ` equal to a constant.
    Constant { value: f64 },
    /// First field of a TDGRID1 file.
    File { path: PathBuf },
}

fn one() -> u32 {
    1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BoundaryConfig {
    Constant {
        values: Vec<f64>,
    },
    /// `η_j = c_j + a_j x + b_j y`.
    Affine {
        constant: Vec<f64>,
        x: Vec<f64>,
        y: Vec<f64>,
    },
    /// Samples at polar angles about the domain centre, interpolated
    /// periodically; `values[i]` holds the `r` components at `angles[i]`.
    Samples {
        angles: Vec<f64>,
        values: Vec<Vec<f64>>,
    },
    /// TDGRID1 file with `r` fields; boundary nodes are used.
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Option<String>,
    pub tol_res: Option<f64>,
    pub tol_fp: Option<f64>,
    pub newton_max_iter: Option<usize>,
    pub picard_max_iter: Option<usize>,
    pub theta: Option<f64>,
    pub min_theta: Option<f64>,
    pub tol_sandwich: Option<f64>,
    /// `auto`, `cg` or `banded`.
    pub linear: Option<String>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SweepConfig {
    FixedRootsPower {
        ns: Vec<u32>,
        roots: Vec<[f64; 3]>,
        #[serde(default)]
        caps: Vec<[u64; 2]>,
    },
    RootSequence {
        ns: Vec<u32>,
        roots: Vec<Vec<[f64; 3]>>,
        #[serde(default)]
        caps: Vec<[u64; 2]>,
    },
    RandomRoots {
        ns: Vec<u32>,
        /// Roots per unit of `N`; defaults to the rank.
        per_n: Option<usize>,
        #[serde(default)]
        seed: u64,
        center: Option<[f64; 2]>,
        radius: f64,
        #[serde(default)]
        caps: Vec<[u64; 2]>,
    },
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateConfig {
    /// Defaults to `10 tol_res`.
    pub tol_residual: Option<f64>,
    /// Defaults to `10 h² (1 + max Σ m_j)`.
    pub tol_prop3: Option<f64>,
    /// Defaults to `10 h²`.
    pub tol_prop2: Option<f64>,
    /// Defaults to `1e-12`.
    pub tol_boundary: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    #[serde(default = "default_oracle_n")]
    pub n: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { n: default_oracle_n() }
    }
}

fn default_oracle_n() -> usize {
    4096
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub method: Option<Method>,
    pub tol_res: Option<f64>,
    pub tol_fp: Option<f64>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg_err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

/// Radially symmetric instance: centred disk, flat metric, all roots at the
/// centre and constant boundary data.
#[derive(Clone, Debug)]
pub struct RadialData {
    pub radius: f64,
    /// `k_r(t) = t^exponent`.
    pub exponent: f64,
    pub eta: Vec<f64>,
}

/// Everything a command needs, built and checked from a [`RunConfig`].
pub struct Problem {
    pub cfg: RunConfig,
    pub dom: DiscreteDomain,
    pub weights: MetricWeights,
    pub datum: SubharmonicDatum,
    pub convention: Convention,
    pub k: CoefficientSet,
    pub curvature: VField,
    pub eta: VField,
    pub gauge: GaugeReduction,
    pub method: Method,
    pub opts: SolveOptions,
    pub radial: Option<RadialData>,
}

fn roots_of(v: &[[f64; 3]]) -> Result<Vec<Root>> {
    v.iter()
        .map(|&[re, im, m]| {
            if m < 1.0 || m.fract() != 0.0 || m > f64::from(u32::MAX) {
                return Err(cfg_err(format!("root multiplicity {m} is not a positive integer")));
            }
            Ok(Root { re, im, mult: m as u32 })
        })
        .collect()
}

fn lambda_of(a: Option<f64>) -> ConformalFactor {
    match a {
        Some(a) => ConformalFactor::Gaussian { a },
        None => ConformalFactor::Flat,
    }
}

impl DomainConfig {
    pub fn build(&self) -> Result<DiscreteDomain> {
        let spec = match self {
            DomainConfig::Disk {
                center,
                radius,
                h,
                gaussian_lambda,
            } => DomainSpec::disk(center[0], center[1], *radius, *h).with_lambda(lambda_of(*gaussian_lambda)),
            DomainConfig::Rectangle {
                bounds,
                h,
                gaussian_lambda,
            } => DomainSpec::rectangle(bounds[0], bounds[1], bounds[2], bounds[3], *h)
                .with_lambda(lambda_of(*gaussian_lambda)),
            DomainConfig::Sublevel {
                center,
                axes,
                level,
                h,
                gaussian_lambda,
            } => {
                if !(axes[0] > 0.0 && axes[1] > 0.0) {
                    return Err(cfg_err("sublevel axes must be positive"));
                }
                if !(*level > 0.0) {
                    return Err(cfg_err(format!("sublevel set {{f_X < {level}}} is empty")));
                }
                let [cx, cy] = *center;
                let [ax, ay] = *axes;
                let reach = level.sqrt() * 1.05;
                DomainSpec {
                    shape: Shape::Sublevel {
                        f: Arc::new(move |x, y| ((x - cx) / ax).powi(2) + ((y - cy) / ay).powi(2)),
                        level: *level,
                        bbox: [cx - reach * ax, cx + reach * ax, cy - reach * ay, cy + reach * ay],
                    },
                    h: *h,
                    lambda: lambda_of(*gaussian_lambda),
                }
            }
        };
        spec.build()
    }

    /// Centre used for polar angles and default root disks.
    pub fn center(&self) -> (f64, f64) {
        match self {
            DomainConfig::Disk { center, .. } | DomainConfig::Sublevel { center, .. } => (center[0], center[1]),
            DomainConfig::Rectangle { bounds, .. } => ((bounds[0] + bounds[1]) / 2.0, (bounds[2] + bounds[3]) / 2.0),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_grid(base: &Path, p: &Path, dom: &DiscreteDomain, what: &str) -> Result<GridFile> {
    let path = resolve(base, p);
    let g = GridFile::load(&path).map_err(|e| cfg_err(format!("{what} file {}: {e}", path.display())))?;
    g.check_lattice(dom).map_err(|e| cfg_err(format!("{what} file {}: {e}", path.display())))?;
    Ok(g)
}

fn check_vector(v: &[f64], r: usize, what: &str) -> Result<()> {
    if v.len() != r {
        return Err(cfg_err(format!("{what} has {} entries, expected rank {r}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(cfg_err(format!("{what} is not finite")));
    }
    Ok(())
}

fn zero_sum(v: &[f64], what: &str) -> Result<()> {
    let s: f64 = v.iter().sum();
    if s.abs() > 1e-9 {
        return Err(cfg_err(format!("{what} sums to {s:e}, not zero")));
    }
    Ok(())
}

impl BoundaryConfig {
    fn build(&self, dom: &DiscreteDomain, r: usize, center: (f64, f64), base: &Path) -> Result<VField> {
        let field = match self {
            BoundaryConfig::Constant { values } => {
                check_vector(values, r, "boundary values")?;
                zero_sum(values, "boundary values")?;
                VField {
                    comps: values.iter().map(|&v| ScalarField::constant(dom, v)).collect(),
                }
            }
            BoundaryConfig::Affine { constant, x, y } => {
                for (v, w) in [(constant, "boundary constant"), (x, "boundary x slope"), (y, "boundary y slope")] {
                    check_vector(v, r, w)?;
                    zero_sum(v, w)?;
                }
                VField {
                    comps: (0..r)
                        .map(|j| {
                            let (c, a, b) = (constant[j], x[j], y[j]);
                            ScalarField::from_fn(dom, move |px, py| c + a * px + b * py)
                        })
                        .collect(),
                }
            }
            BoundaryConfig::Samples { angles, values } => {
                if angles.is_empty() || angles.len() != values.len() {
                    return Err(cfg_err("boundary samples need one value row per angle"));
                }
                for (i, row) in values.iter().enumerate() {
                    check_vector(row, r, &format!("boundary sample {i}"))?;
                    zero_sum(row, &format!("boundary sample {i}"))?;
                }
                let mut order: Vec<(f64, &Vec<f64>)> =
                    angles.iter().map(|a| a.rem_euclid(2.0 * PI)).zip(values).collect();
                order.sort_by(|a, b| a.0.total_cmp(&b.0));
                let mut comps = vec![ScalarField::zeros(dom); r];
                for &n in dom.boundary() {
                    let (x, y) = dom.coords(n);
                    let t = (y - center.1).atan2(x - center.0).rem_euclid(2.0 * PI);
                    let v = periodic_interp(&order, t);
                    for j in 0..r {
                        comps[j].values[n] = v[j];
                    }
                }
                VField { comps }
            }
            BoundaryConfig::File { path } => {
                let g = load_grid(base, path, dom, "boundary")?;
                if g.rank() != r {
                    return Err(cfg_err(format!("boundary file has {} fields, expected {r}", g.rank())));
                }
                g.to_vfield()
            }
        };
        for &n in dom.boundary() {
            let v = field.at(n);
            if v.iter().any(|x| !x.is_finite()) {
                return Err(cfg_err("boundary data is not finite"));
            }
            let s: f64 = v.iter().sum();
            if s.abs() > 1e-9 {
                let (x, y) = dom.coords(n);
                return Err(cfg_err(format!("boundary data sums to {s:e} at ({x}, {y})")));
            }
        }
        // project away rounding so the solver sees exact zero sums
        let mut field = field;
        for n in 0..dom.len() {
            let mean = field.comps.iter().map(|c| c.values[n]).sum::<f64>() / r as f64;
            for c in &mut field.comps {
                c.values[n] -= mean;
            }
        }
        Ok(field)
    }
}

/// Linear interpolation in the angle over samples sorted by angle in `[0, 2π)`.
fn periodic_interp(samples: &[(f64, &Vec<f64>)], t: f64) -> Vec<f64> {
    let m = samples.len();
    if m == 1 {
        return samples[0].1.clone();
    }
    let i = samples.iter().position(|s| s.0 > t).unwrap_or(m);
    let (lo, hi, lo_t, hi_t, tt) = if i == 0 || i == m {
        // wrap from the last sample to the first
        let tt = if t < samples[0].0 { t + 2.0 * PI } else { t };
        (samples[m - 1], samples[0], samples[m - 1].0, samples[0].0 + 2.0 * PI, tt)
    } else {
        (samples[i - 1], samples[i], samples[i - 1].0, samples[i].0, t)
    };
    let s = if hi_t > lo_t { (tt - lo_t) / (hi_t - lo_t) } else { 0.0 };
    lo.1.iter().zip(hi.1).map(|(x, y)| (1.0 - s) * x + s * y).collect()
}

impl SolverConfig {
    fn options(&self, ov: &Overrides) -> Result<(Method, SolveOptions)> {
        let mut o = SolveOptions::default();
        let method = match (&ov.method, &self.method) {
            (Some(m), _) => *m,
            (None, Some(s)) => s.parse().map_err(|_| cfg_err(format!("unknown method `{s}`")))?,
            (None, None) => Method::Newton,
        };
        let set = |dst: &mut f64, v: Option<f64>, what: &str| -> Result<()> {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(cfg_err(format!("{what} must be positive")));
                }
                *dst = v;
            }
            Ok(())
        };
        set(&mut o.tol_res, ov.tol_res.or(self.tol_res), "tol_res")?;
        set(&mut o.tol_fp, ov.tol_fp.or(self.tol_fp), "tol_fp")?;
        set(&mut o.theta, self.theta, "theta")?;
        set(&mut o.min_theta, self.min_theta, "min_theta")?;
        if o.theta > 1.0 || o.min_theta > o.theta {
            return Err(cfg_err("need 0 < min_theta <= theta <= 1"));
        }
        if let Some(t) = self.tol_sandwich {
            set(&mut 0.0, Some(t), "tol_sandwich")?;
            o.tol_sandwich = Some(t);
        }
        if let Some(n) = self.newton_max_iter {
            o.newton_max_iter = n;
        }
        if let Some(n) = self.picard_max_iter {
            o.picard_max_iter = n;
        }
        if let Some(l) = &self.linear {
            o.elliptic.linear_method = match l.as_str() {
                "auto" => LinearMethod::Auto,
                "cg" => LinearMethod::ConjugateGradient,
                "banded" => LinearMethod::BandedCholesky,
                _ => return Err(cfg_err(format!("unknown linear method `{l}`"))),
            };
        }
        Ok((method, o))
    }
}

impl SweepConfig {
    pub fn family(&self, rank: usize, dom_center: (f64, f64)) -> Result<(FamilySpec, Vec<(u32, usize)>)> {
        let caps = |c: &[[u64; 2]]| -> Vec<(u32, usize)> { c.iter().map(|&[n, cap]| (n as u32, cap as usize)).collect() };
        let (spec, caps) = match self {
            SweepConfig::FixedRootsPower { ns, roots, caps: c } => (
                FamilySpec {
                    rule: FamilyRule::FixedRootsPower { roots: roots_of(roots)? },
                    ns: ns.clone(),
                },
                caps(c),
            ),
            SweepConfig::RootSequence { ns, roots, caps: c } => (
                FamilySpec {
                    rule: FamilyRule::RootSequence {
                        roots: roots.iter().map(|v| roots_of(v)).collect::<Result<_>>()?,
                    },
                    ns: ns.clone(),
                },
                caps(c),
            ),
            SweepConfig::RandomRoots {
                ns,
                per_n,
                seed,
                center,
                radius,
                caps: c,
            } => (
                FamilySpec {
                    rule: FamilyRule::RandomRoots {
                        per_n: per_n.unwrap_or(rank),
                        seed: *seed,
                        center: center.map_or(dom_center, |c| (c[0], c[1])),
                        radius: *radius,
                    },
                    ns: ns.clone(),
                },
                caps(c),
            ),
        };
        spec.validate().map_err(|e| cfg_err(e.to_string()))?;
        Ok((spec, caps))
    }
}

impl Problem {
    /// `base` is the directory that relative paths in the config refer to.
    pub fn new(cfg: RunConfig, base: &Path, ov: &Overrides) -> Result<Self> {
        let r = cfg.rank;
        if r < 2 {
            return Err(cfg_err("rank must be at least 2"));
        }
        let convention: Convention = cfg.convention.parse()?;
        let dom = cfg.domain.build().map_err(|e| cfg_err(e.to_string()))?;
        let weights = match &cfg.weights {
            WeightsConfig::Flat => MetricWeights::flat(&dom, r),
            WeightsConfig::File { path } => {
                let g = load_grid(base, path, &dom, "weights")?;
                if g.rank() != r {
                    return Err(cfg_err(format!("weights file has {} fields, expected {r}", g.rank())));
                }
                MetricWeights::new(&dom, (0..r).map(|c| g.scalar(c)).collect()).map_err(|e| cfg_err(e.to_string()))?
            }
        };
        let datum = match &cfg.phi {
            PhiConfig::Polynomial { roots, power } => SubharmonicDatum::PolynomialPower {
                roots: roots_of(roots)?,
                power: *power,
            },
            PhiConfig::LogPotential { masses } => SubharmonicDatum::LogPotential {
                masses: masses
                    .iter()
                    .map(|&[re, im, weight]| PointMass { re, im, weight })
                    .collect(),
                smooth: None,
            },
            PhiConfig::Constant { value } => SubharmonicDatum::GridSampled(ScalarField::constant(&dom, *value)),
            PhiConfig::File { path } => SubharmonicDatum::GridSampled(load_grid(base, path, &dom, "phi")?.scalar(0)),
        };
        let k = coefficients(&weights, &datum, &dom, convention).map_err(|e| cfg_err(e.to_string()))?;
        let center = cfg.domain.center();
        let eta = cfg.boundary.build(&dom, r, center, base)?;
        let (method, opts) = cfg.solver.options(ov)?;
        let curvature = curvature_term(&weights, &dom);
        let gauge = gauge_reduce(&weights, &k, &eta, &dom, &opts.elliptic)?;
        let radial = radial_data(&cfg, &datum);
        Ok(Problem {
            cfg,
            dom,
            weights,
            datum,
            convention,
            k,
            curvature,
            eta,
            gauge,
            method,
            opts,
            radial,
        })
    }

    pub fn load(path: &Path, ov: &Overrides) -> Result<Self> {
        let cfg = RunConfig::load(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(cfg, &base, ov)
    }

    pub fn tol_residual(&self) -> f64 {
        self.cfg.validate.tol_residual.unwrap_or(10.0 * self.opts.tol_res)
    }
}

fn radial_data(cfg: &RunConfig, datum: &SubharmonicDatum) -> Option<RadialData> {
    let DomainConfig::Disk {
        center,
        radius,
        gaussian_lambda: None,
        ..
    } = &cfg.domain
    else {
        return None;
    };
    if !matches!(cfg.weights, WeightsConfig::Flat) {
        return None;
    }
    let BoundaryConfig::Constant { values } = &cfg.boundary else {
        return None;
    };
    let SubharmonicDatum::PolynomialPower { roots, power } = datum else {
        return None;
    };
    if roots.iter().any(|a| a.re != center[0] || a.im != center[1]) {
        return None;
    }
    let total: u32 = roots.iter().map(|a| a.mult).sum();
    Some(RadialData {
        radius: *radius,
        exponent: 2.0 * f64::from(total) / f64::from(*power),
        eta: values.clone(),
    })
}
