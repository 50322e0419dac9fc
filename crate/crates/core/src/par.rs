//! Data-parallel node loops.
//!
//! With the `parallel` feature the helpers fan out over rayon; without it the
//! same fixed-size chunks are walked sequentially. Reductions are always
//! accumulated per chunk and then summed in chunk order, so both builds give
//! bit-identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Chunk length used for every reduction.
pub const CHUNK: usize = 2048;

/// `out[i] = f(i)` for every index.
#[cfg(feature = "parallel")]
pub fn fill<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, chunk)| {
        let base = c * CHUNK;
        for (k, v) in chunk.iter_mut().enumerate() {
            *v = f(base + k);
        }
    });
}

#[cfg(not(feature = "parallel"))]
pub fn fill<F>(out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    for (i, v) in out.iter_mut().enumerate() {
        *v = f(i);
    }
}

pub fn map_range<F>(n: usize, f: F) -> Vec<f64>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let mut out = vec![0.0; n];
    fill(&mut out, f);
    out
}

/// Chunked sum of `f(i)` for `i < n`.
#[cfg(feature = "parallel")]
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let nchunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..nchunks)
        .into_par_iter()
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

#[cfg(not(feature = "parallel"))]
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let nchunks = n.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..nchunks)
        .map(|c| {
            let end = ((c + 1) * CHUNK).min(n);
            (c * CHUNK..end).map(&f).sum::<f64>()
        })
        .collect();
    partial.iter().sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    sum_by(a.len(), |i| a[i] * b[i])
}

/// `y += alpha * x`
#[cfg(feature = "parallel")]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| {
            for (yi, xi) in yc.iter_mut().zip(xc) {
                *yi += alpha * xi;
            }
        });
}

#[cfg(not(feature = "parallel"))]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x + beta * y`
#[cfg(feature = "parallel")]
pub fn xpby(x: &[f64], beta: f64, y: &mut [f64]) {
    y.par_chunks_mut(CHUNK)
        .zip(x.par_chunks(CHUNK))
        .for_each(|(yc, xc)| {
            for (yi, xi) in yc.iter_mut().zip(xc) {
                *yi = xi + beta * *yi;
            }
        });
}

#[cfg(not(feature = "parallel"))]
pub fn xpby(x: &[f64], beta: f64, y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = xi + beta * *yi;
    }
}

/// Runs independent tasks, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_tasks<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_tasks<T, R, F>(items: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Runs `f` on a pool bounded to `jobs` threads (0 = rayon default).
#[cfg(feature = "parallel")]
pub fn with_jobs<R: Send>(jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    if jobs == 0 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_jobs<R: Send>(_jobs: usize, f: impl FnOnce() -> R + Send) -> R {
    f()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_plain_sum_on_integers() {
        let n = 3 * CHUNK + 17;
        let s = sum_by(n, |i| i as f64);
        assert_eq!(s, (n * (n - 1) / 2) as f64);
    }

    #[test]
    fn map_tasks_keeps_order() {
        let out = map_tasks((0..50).collect(), |i: usize| i * i);
        assert_eq!(out, (0..50).map(|i| i * i).collect::<Vec<_>>());
    }

    #[test]
    fn axpy_and_xpby() {
        let x = vec![1.0; 5000];
        let mut y = vec![2.0; 5000];
        axpy(3.0, &x, &mut y);
        assert!(y.iter().all(|&v| v == 5.0));
        xpby(&x, 0.5, &mut y);
        assert!(y.iter().all(|&v| v == 3.5));
    }
}
