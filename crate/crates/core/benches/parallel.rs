//! Parallel against sequential node loops. `jobs = 1` pins a one-thread pool;
//! building with `--no-default-features` removes rayon altogether.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use toda_core::bundle::{CoefficientSet, Convention, MetricWeights};
use toda_core::grid::{laplacian, DomainSpec, ScalarField, VField};
use toda_core::harness::{random_smooth_eta, sweep, FamilyRule, FamilySpec, SweepSetup};
use toda_core::par::with_jobs;
use toda_core::solver::{solve_newton, Method, SolveOptions, Start};

const JOBS: [(&str, usize); 2] = [("sequential", 1), ("parallel", 0)];

fn bench_laplacian(c: &mut Criterion) {
    let dom = DomainSpec::disk(0.0, 0.0, 1.0, 1.0 / 512.0).build().unwrap();
    let u = ScalarField::from_fn(&dom, |x, y| (3.0 * x).sin() * (2.0 * y).cos());
    let mut g = c.benchmark_group("laplacian h=1/512");
    for (name, jobs) in JOBS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            with_jobs(jobs, || b.iter(|| laplacian(&u, &dom)))
        });
    }
    g.finish();
}

fn bench_newton(c: &mut Criterion) {
    let dom = DomainSpec::disk(0.0, 0.0, 0.3, 1.0 / 128.0).build().unwrap();
    let k = CoefficientSet {
        k: vec![
            ScalarField::from_fn(&dom, |x, y| 1.0 + 0.3 * (x - y).sin()),
            ScalarField::from_fn(&dom, |x, y| (x - 0.05).hypot(y + 0.02)),
            ScalarField::constant(&dom, 1.0),
        ],
    };
    let eta = random_smooth_eta(&dom, 3, 0.3, &mut ChaCha8Rng::seed_from_u64(1));
    let o = SolveOptions::default();
    let mut g = c.benchmark_group("newton r=3 h=1/128");
    g.sample_size(10);
    for (name, jobs) in JOBS {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            with_jobs(jobs, || b.iter(|| solve_newton(&k, &eta, &dom, None, Start::Zero, &o).unwrap()))
        });
    }
    g.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let dom = DomainSpec::disk(0.0, 0.0, 0.4, 1.0 / 32.0).build().unwrap();
    let eta: VField = random_smooth_eta(&dom, 2, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let fam = FamilySpec {
        rule: FamilyRule::RandomRoots {
            per_n: 2,
            seed: 5,
            center: (0.0, 0.0),
            radius: 0.35,
        },
        ns: vec![1, 2, 4, 8, 16, 32],
    };
    let mut g = c.benchmark_group("sweep 6 members");
    g.sample_size(10);
    for (name, jobs) in JOBS {
        let setup = SweepSetup {
            weights: MetricWeights::flat(&dom, 2),
            eta: eta.clone(),
            convention: Convention::Norm,
            method: Method::Newton,
            solve: SolveOptions::default(),
            cap_overrides: Vec::new(),
            out_dir: None,
            jobs,
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| sweep(&fam, &setup, &dom).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench_laplacian, bench_newton, bench_sweep);
criterion_main!(benches);
