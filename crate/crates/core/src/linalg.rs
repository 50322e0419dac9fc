//! Sparse SPD systems on the interior lattice: assembly, banded Cholesky and
//! block-Jacobi preconditioned conjugate gradients.

use crate::error::{Error, Result};
use crate::grid::DiscreteDomain;
use crate::par;

/// Unknowns below this count are factored directly under [`LinearMethod::Auto`].
pub const DIRECT_LIMIT: usize = 10_000;

/// Largest band storage (in entries) a direct factorization may allocate.
pub const BAND_BUDGET: usize = 30_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LinearMethod {
    #[default]
    Auto,
    ConjugateGradient,
    BandedCholesky,
}

/// Compressed sparse row matrix with sorted column indices.
#[derive(Clone, Debug)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Assembles `S ⊗ C + blockdiag(D_s)` over the interior nodes of `dom`,
    /// where `S` is the Dirichlet 5-point stencil (4 on the diagonal, -1 per
    /// interior neighbour), `C` a symmetric `b×b` coupling and `D_s` the
    /// symmetric block written by `diag(slot, out)`. Unknown `slot*b + c` is
    /// component `c` at interior node `slot`.
    pub fn stencil_system(
        dom: &DiscreteDomain,
        b: usize,
        coupling: &[f64],
        diag: impl Fn(usize, &mut [f64]),
    ) -> Self {
        assert_eq!(coupling.len(), b * b);
        let interior = dom.interior();
        let n = interior.len() * b;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(n * 5 * b);
        let mut vals = Vec::with_capacity(n * 5 * b);
        row_ptr.push(0);
        let mut block = vec![0.0; b * b];
        for (s, &k) in interior.iter().enumerate() {
            block.iter_mut().for_each(|v| *v = 0.0);
            diag(s, &mut block);
            let nb = dom.neighbours(k);
            // column order: south, west, self, east, north
            let ordered = [nb[3], nb[1], k, nb[0], nb[2]];
            for c in 0..b {
                for &m in &ordered {
                    if m == k {
                        for c2 in 0..b {
                            cols.push(s * b + c2);
                            vals.push(4.0 * coupling[c * b + c2] + block[c * b + c2]);
                        }
                    } else if let Some(t) = dom.interior_slot(m) {
                        for c2 in 0..b {
                            cols.push(t * b + c2);
                            vals.push(-coupling[c * b + c2]);
                        }
                    }
                }
                row_ptr.push(cols.len());
            }
        }
        CsrMatrix {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.cols[self.row_ptr[i]..self.row_ptr[i + 1]];
        match row.binary_search(&j) {
            Ok(p) => self.vals[self.row_ptr[i] + p],
            Err(_) => 0.0,
        }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        par::fill(y, |i| {
            let (a, e) = (self.row_ptr[i], self.row_ptr[i + 1]);
            let mut acc = 0.0;
            for p in a..e {
                acc += self.vals[p] * x[self.cols[p]];
            }
            acc
        });
    }

    /// Largest `i - j` over stored entries.
    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|i| {
                self.cols[self.row_ptr[i]..self.row_ptr[i + 1]]
                    .iter()
                    .map(move |&j| i.saturating_sub(j))
            })
            .max()
            .unwrap_or(0)
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.n]; self.n];
        for (i, row) in d.iter_mut().enumerate() {
            for p in self.row_ptr[i]..self.row_ptr[i + 1] {
                row[self.cols[p]] = self.vals[p];
            }
        }
        d
    }
}

/// Cholesky factor of a banded SPD matrix, stored row-wise over the band.
#[derive(Clone, Debug)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    band: Vec<f64>,
}

impl BandedCholesky {
    pub fn fits(a: &CsrMatrix) -> bool {
        a.dim().saturating_mul(a.bandwidth() + 1) <= BAND_BUDGET
    }

    pub fn factor(a: &CsrMatrix) -> Result<Self> {
        let n = a.n;
        let bw = a.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for i in 0..n {
            for p in a.row_ptr[i]..a.row_ptr[i + 1] {
                let j = a.cols[p];
                if j <= i {
                    band[i * w + (j + bw - i)] = a.vals[p];
                }
            }
        }
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let kmin = lo.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                let ri = i * w + bw - i;
                let rj = j * w + bw - j;
                for k in kmin..j {
                    s -= band[ri + k] * band[rj + k];
                }
                if i == j {
                    if !(s > 0.0) {
                        return Err(Error::NotPositiveDefinite);
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(BandedCholesky { n, bw, band })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        let mut y = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            let mut s = y[i];
            for k in lo..i {
                s -= self.band[ri + k] * y[k];
            }
            y[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            y[i] /= self.band[i * w + bw];
            let yi = y[i];
            let lo = i.saturating_sub(bw);
            let ri = i * w + bw - i;
            for k in lo..i {
                y[k] -= self.band[ri + k] * yi;
            }
        }
        y
    }
}

/// Inverse diagonal blocks of a block-structured SPD matrix.
#[derive(Clone, Debug)]
pub struct BlockJacobi {
    b: usize,
    inv: Vec<f64>,
}

impl BlockJacobi {
    pub fn new(a: &CsrMatrix, b: usize) -> Result<Self> {
        let nblocks = a.n / b;
        let mut inv = vec![0.0; nblocks * b * b];
        let mut block = vec![0.0; b * b];
        for s in 0..nblocks {
            for c in 0..b {
                for c2 in 0..b {
                    block[c * b + c2] = a.get(s * b + c, s * b + c2);
                }
            }
            invert_spd(&block, b, &mut inv[s * b * b..(s + 1) * b * b])?;
        }
        Ok(BlockJacobi { b, inv })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let b = self.b;
        par::fill(z, |i| {
            let (s, c) = (i / b, i % b);
            let blk = &self.inv[s * b * b + c * b..s * b * b + (c + 1) * b];
            blk.iter().zip(&r[s * b..(s + 1) * b]).map(|(m, v)| m * v).sum()
        });
    }
}

/// Inverse of a small SPD matrix via Gauss-Jordan on the full block.
fn invert_spd(a: &[f64], b: usize, out: &mut [f64]) -> Result<()> {
    let mut m = a.to_vec();
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..b {
        out[i * b + i] = 1.0;
    }
    for p in 0..b {
        let piv = m[p * b + p];
        if !(piv > 0.0) {
            return Err(Error::NotPositiveDefinite);
        }
        for c in 0..b {
            m[p * b + c] /= piv;
            out[p * b + c] /= piv;
        }
        for r in 0..b {
            if r != p {
                let f = m[r * b + p];
                if f != 0.0 {
                    for c in 0..b {
                        m[r * b + c] -= f * m[p * b + c];
                        out[r * b + c] -= f * out[p * b + c];
                    }
                }
            }
        }
    }
    Ok(())
}

/// `(S ⊗ C)^{-1}` for a factored scalar stencil `S` and a small dense `C`,
/// used as a preconditioner for `S ⊗ C + blockdiag(D)`.
#[derive(Clone, Debug)]
pub struct KroneckerInverse {
    b: usize,
    scalar: std::sync::Arc<BandedCholesky>,
    coupling_inv: Vec<f64>,
}

impl KroneckerInverse {
    pub fn new(scalar: std::sync::Arc<BandedCholesky>, coupling: &[f64], b: usize) -> Result<Self> {
        let mut coupling_inv = vec![0.0; b * b];
        invert_spd(coupling, b, &mut coupling_inv)?;
        Ok(KroneckerInverse {
            b,
            scalar,
            coupling_inv,
        })
    }

    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        let b = self.b;
        let nodes = r.len() / b;
        let mut comp = vec![0.0; nodes];
        for c in 0..b {
            for (s, v) in comp.iter_mut().enumerate() {
                *v = r[s * b + c];
            }
            let sol = self.scalar.solve(&comp);
            for (s, v) in sol.iter().enumerate() {
                z[s * b + c] = *v;
            }
        }
        let ci = &self.coupling_inv;
        let mut tmp = vec![0.0; b];
        for s in 0..nodes {
            let blk = &mut z[s * b..(s + 1) * b];
            for (c, t) in tmp.iter_mut().enumerate() {
                *t = (0..b).map(|c2| ci[c * b + c2] * blk[c2]).sum();
            }
            blk.copy_from_slice(&tmp);
        }
    }
}

#[derive(Clone, Debug)]
pub enum Preconditioner {
    BlockJacobi(BlockJacobi),
    Kronecker(KroneckerInverse),
}

impl Preconditioner {
    pub fn apply(&self, r: &[f64], z: &mut [f64]) {
        match self {
            Preconditioner::BlockJacobi(p) => p.apply(r, z),
            Preconditioner::Kronecker(p) => p.apply(r, z),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LinearOutcome {
    pub iterations: usize,
    pub rel_residual: f64,
}

/// Preconditioned CG on `a x = b`, starting from the contents of `x`.
pub fn pcg(
    a: &CsrMatrix,
    pre: &Preconditioner,
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<LinearOutcome> {
    let n = a.n;
    let bnorm = par::dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(LinearOutcome::default());
    }
    let mut r = vec![0.0; n];
    a.matvec(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    pre.apply(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = par::dot(&r, &z);
    let mut rnorm = par::dot(&r, &r).sqrt();
    let mut it = 0;
    while rnorm > tol * bnorm {
        if it >= max_iter {
            return Err(Error::LinearNotConverged {
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        a.matvec(&p, &mut ap);
        let pap = par::dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(if pap.is_nan() {
                Error::NonFinite("conjugate gradient".into())
            } else {
                Error::NotPositiveDefinite
            });
        }
        let alpha = rz / pap;
        par::axpy(alpha, &p, x);
        par::axpy(-alpha, &ap, &mut r);
        pre.apply(&r, &mut z);
        let rz_new = par::dot(&r, &z);
        par::xpby(&z, rz_new / rz, &mut p);
        rz = rz_new;
        rnorm = par::dot(&r, &r).sqrt();
        it += 1;
        if !rnorm.is_finite() {
            return Err(Error::NonFinite("conjugate gradient residual".into()));
        }
    }
    Ok(LinearOutcome {
        iterations: it,
        rel_residual: rnorm / bnorm,
    })
}

enum Backend {
    Direct(BandedCholesky),
    Iterative(Preconditioner),
}

/// An assembled SPD system together with its factorization or preconditioner.
pub struct SpdSolver {
    matrix: CsrMatrix,
    backend: Backend,
}

impl SpdSolver {
    pub fn new(matrix: CsrMatrix, block: usize, method: LinearMethod) -> Result<Self> {
        let direct = match method {
            LinearMethod::Auto => matrix.dim() < DIRECT_LIMIT || BandedCholesky::fits(&matrix),
            LinearMethod::BandedCholesky => true,
            LinearMethod::ConjugateGradient => false,
        };
        let backend = if direct {
            Backend::Direct(BandedCholesky::factor(&matrix)?)
        } else {
            Backend::Iterative(Preconditioner::BlockJacobi(BlockJacobi::new(&matrix, block)?))
        };
        Ok(SpdSolver { matrix, backend })
    }

    /// Iterative solver with a caller-supplied preconditioner.
    pub fn preconditioned(matrix: CsrMatrix, pre: Preconditioner) -> Self {
        SpdSolver {
            matrix,
            backend: Backend::Iterative(pre),
        }
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn is_direct(&self) -> bool {
        matches!(self.backend, Backend::Direct(_))
    }

    /// Solves in place; `x` holds the initial guess for the iterative backend.
    pub fn solve(&self, b: &[f64], x: &mut [f64], tol: f64, max_iter: usize) -> Result<LinearOutcome> {
        match &self.backend {
            Backend::Direct(chol) => {
                let sol = chol.solve(b);
                x.copy_from_slice(&sol);
                let mut ax = vec![0.0; b.len()];
                self.matrix.matvec(x, &mut ax);
                let bnorm = par::dot(b, b).sqrt();
                let rnorm = par::sum_by(b.len(), |i| (b[i] - ax[i]).powi(2)).sqrt();
                if !rnorm.is_finite() {
                    return Err(Error::NonFinite("direct solve".into()));
                }
                Ok(LinearOutcome {
                    iterations: 1,
                    rel_residual: if bnorm > 0.0 { rnorm / bnorm } else { 0.0 },
                })
            }
            Backend::Iterative(pre) => pcg(&self.matrix, pre, b, x, tol, max_iter),
        }
    }
}
