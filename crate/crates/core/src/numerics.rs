//! Dense complex linear algebra and seeded random sampling.
//!
//! Every other module works with [`CMatrix`], a column-major
//! `nalgebra::DMatrix<Complex64>`. The decompositions here add the
//! conventions the rest of the crate relies on: singular values and
//! eigenvalues sorted descending, and a fixed phase for every singular or
//! eigen vector (largest-magnitude entry real and nonnegative) so results
//! are reproducible bit for bit.

use nalgebra::{DMatrix, DVector, SymmetricEigen, SVD};
use num_complex::Complex64;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

/// Default relative cutoff used by [`pinv`].
pub const DEFAULT_RCOND: f64 = 1e-12;

const MAX_DECOMPOSITION_ITERS: usize = 10_000;
const HERMITIAN_TOL: f64 = 1e-8;
const RECONSTRUCTION_TOL: f64 = 1e-8;

const SVD_EPS_ULPS: f64 = 5.0;

const FAST_PATH_TOL: f64 = 1e-10;

const MAX_JACOBI_SWEEPS: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("decomposition did not converge (relative residual {residual:e})")]
    DecompositionFailed { residual: f64 },
    #[error("matrix is not Hermitian (relative deviation {deviation:e})")]
    NotHermitian { deviation: f64 },
    #[error("matrix is not positive definite: leading minor {minor} is not positive")]
    NotPositiveDefinite { minor: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Thin singular value decomposition `a = u * diag(s) * vh`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// `m x k` left singular vectors, `k = min(m, n)`.
    pub u: CMatrix,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// `k x n` conjugate-transposed right singular vectors.
    pub vh: CMatrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> CMatrix {
        let mut us = self.u.clone();
        for (j, &sj) in self.s.iter().enumerate() {
            us.column_mut(j).scale_mut(sj);
        }
        us * &self.vh
    }

    /// Ratio of largest to smallest singular value (infinite when rank deficient).
    pub fn condition_number(&self) -> f64 {
        match (self.s.first(), self.s.last()) {
            (Some(&hi), Some(&lo)) if lo > 0.0 => hi / lo,
            (Some(_), Some(_)) => f64::INFINITY,
            _ => 1.0,
        }
    }
}

pub fn ensure_finite(a: &CMatrix) -> Result<()> {
    if a.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite)
    }
}

pub fn fro_norm_sqr(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

/// `||a - b||_F / ||b||_F`, or the absolute difference when `b` is zero.
pub fn relative_error(a: &CMatrix, b: &CMatrix) -> f64 {
    let diff = (a - b).norm();
    let scale = b.norm();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = CMatrix::zeros(ar * br, ac * bc);
    for i in 0..ar {
        for j in 0..ac {
            let aij = a[(i, j)];
            if aij == Complex64::new(0.0, 0.0) {
                continue;
            }
            for p in 0..br {
                for q in 0..bc {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Rotate column `j` so its largest-magnitude entry (first on ties) is real
/// and nonnegative; returns the unit phase that was removed.
fn normalize_column_phase(m: &mut CMatrix, j: usize) -> Complex64 {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, z) in m.column(j).iter().enumerate() {
        let mag = z.norm();
        if mag > best_mag {
            best_mag = mag;
            best = i;
        }
    }
    if best_mag <= 0.0 {
        return Complex64::new(1.0, 0.0);
    }
    let phase = m[(best, j)] / best_mag;
    let rot = phase.conj();
    for z in m.column_mut(j).iter_mut() {
        *z *= rot;
    }
    phase
}

fn descending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]).then(i.cmp(&j)));
    order
}

/// Thin SVD with descending singular values and the phase convention
/// described in the module docs.
pub fn svd(a: &CMatrix) -> Result<SvdResult> {
    ensure_finite(a)?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 || a.iter().all(|z| z.norm_sqr() == 0.0) {
        return Ok(SvdResult {
            u: CMatrix::identity(m, k),
            s: vec![0.0; k],
            vh: CMatrix::identity(k, n),
        });
    }

    let (u_raw, s_raw, vt_raw) = match bidiagonal_svd(a) {
        Some(f) => f,
        None => jacobi_svd(a),
    };
    let order = descending_order(&s_raw);

    let mut u = CMatrix::zeros(m, k);
    let mut vh = CMatrix::zeros(k, n);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &u_raw.column(src));
        vh.set_row(dst, &vt_raw.row(src));
        s.push(s_raw[src].max(0.0));
    }
    for j in 0..k {
        let phase = normalize_column_phase(&mut u, j);
        let mut row = vh.row_mut(j);
        row *= phase;
    }

    let out = SvdResult { u, s, vh };
    let residual = relative_error(&out.reconstruct(), a);
    if !(residual <= RECONSTRUCTION_TOL) {
        return Err(NumericsError::DecompositionFailed { residual });
    }
    Ok(out)
}

type RawSvd = (CMatrix, Vec<f64>, CMatrix);

fn orthonormality_error(q: &CMatrix) -> f64 {
    (q.ad_mul(q) - CMatrix::identity(q.ncols(), q.ncols())).norm()
}

/// Householder bidiagonalization plus implicit-shift QR. The result is
/// checked, because this route occasionally returns wrong factors for
/// rank-deficient complex input.
fn bidiagonal_svd(a: &CMatrix) -> Option<RawSvd> {
    let dec = SVD::try_new(
        a.clone(),
        true,
        true,
        SVD_EPS_ULPS * f64::EPSILON,
        MAX_DECOMPOSITION_ITERS,
    )?;
    let (u, vt) = (dec.u?, dec.v_t?);
    let s: Vec<f64> = dec.singular_values.iter().copied().collect();
    let mut us = u.clone();
    for (j, &sj) in s.iter().enumerate() {
        us.column_mut(j).scale_mut(sj);
    }
    let ok = relative_error(&(us * &vt), a) <= FAST_PATH_TOL
        && orthonormality_error(&u) <= FAST_PATH_TOL
        && orthonormality_error(&vt.adjoint()) <= FAST_PATH_TOL;
    ok.then_some((u, s, vt))
}

/// One-sided (Hestenes) Jacobi SVD. Slower than the bidiagonal route but
/// accurate for any rank.
fn jacobi_svd(a: &CMatrix) -> RawSvd {
    let (m, n) = a.shape();
    if m < n {
        let (u, s, vt) = jacobi_svd(&a.adjoint());
        return (vt.adjoint(), s, u.adjoint());
    }
    let mut w = a.clone();
    let mut v = CMatrix::identity(n, n);
    for _ in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = w.column(p).norm_squared();
                let beta = w.column(q).norm_squared();
                let gamma = w.column(p).dotc(&w.column(q));
                let g = gamma.norm();
                if g == 0.0 || g <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (alpha - beta) / (2.0 * g);
                let t = -zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = c * t;
                let e = (gamma / g).conj();
                for mat in [&mut w, &mut v] {
                    for i in 0..mat.nrows() {
                        let x = mat[(i, p)];
                        let y = mat[(i, q)] * e;
                        mat[(i, p)] = x * c - y * sn;
                        mat[(i, q)] = x * sn + y * c;
                    }
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let s: Vec<f64> = (0..n).map(|j| w.column(j).norm()).collect();
    let s_max = s.iter().cloned().fold(0.0, f64::max);
    let mut u = CMatrix::zeros(m, n);
    let mut missing = Vec::new();
    for j in 0..n {
        if s[j] > s_max * f64::EPSILON * n as f64 {
            u.set_column(j, &(w.column(j) / Complex64::new(s[j], 0.0)));
        } else {
            missing.push(j);
        }
    }
    complete_orthonormal(&mut u, &missing);
    (u, s, v.adjoint())
}

/// Fill the listed columns of `u` with unit vectors orthogonal to every
/// other column, by Gram–Schmidt over the standard basis.
fn complete_orthonormal(u: &mut CMatrix, missing: &[usize]) {
    let m = u.nrows();
    let mut filled: Vec<usize> = (0..u.ncols()).filter(|j| !missing.contains(j)).collect();
    let mut basis = 0;
    for &j in missing {
        while basis < m {
            let mut cand = CVector::zeros(m);
            cand[basis] = Complex64::new(1.0, 0.0);
            basis += 1;
            for _ in 0..2 {
                for &f in &filled {
                    let proj = u.column(f).dotc(&cand);
                    cand -= u.column(f) * proj;
                }
            }
            let norm = cand.norm();
            if norm > 0.5 {
                u.set_column(j, &(cand / Complex64::new(norm, 0.0)));
                filled.push(j);
                break;
            }
        }
    }
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues descending.
///
/// The input is symmetrized as `(a + aᴴ)/2` after checking that it is
/// Hermitian to within a relative `1e-8`.
pub fn hermitian_eig(a: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    ensure_finite(a)?;
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "hermitian_eig needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if n == 0 {
        return Ok((Vec::new(), CMatrix::zeros(0, 0)));
    }
    let adj = a.adjoint();
    let scale = a.norm();
    let deviation = if scale > 0.0 {
        (a - &adj).norm() / scale
    } else {
        0.0
    };
    if deviation > HERMITIAN_TOL {
        return Err(NumericsError::NotHermitian { deviation });
    }
    let sym = (a + adj) * Complex64::new(0.5, 0.0);

    let dec = SymmetricEigen::try_new(sym.clone(), f64::EPSILON, MAX_DECOMPOSITION_ITERS).ok_or(
        NumericsError::DecompositionFailed {
            residual: f64::INFINITY,
        },
    )?;
    let vals_raw: Vec<f64> = dec.eigenvalues.iter().copied().collect();
    let order = descending_order(&vals_raw);
    let mut q = CMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (dst, &src) in order.iter().enumerate() {
        q.set_column(dst, &dec.eigenvectors.column(src));
        vals.push(vals_raw[src]);
    }
    for j in 0..n {
        normalize_column_phase(&mut q, j);
    }

    let mut ql = q.clone();
    for (j, &l) in vals.iter().enumerate() {
        ql.column_mut(j).scale_mut(l);
    }
    let residual = relative_error(&(ql * q.adjoint()), &sym);
    if !(residual <= RECONSTRUCTION_TOL) {
        return Err(NumericsError::DecompositionFailed { residual });
    }
    Ok((vals, q))
}

/// Moore–Penrose pseudo-inverse; singular values below `rcond * s_max` are
/// treated as zero.
pub fn pinv(a: &CMatrix, rcond: f64) -> Result<CMatrix> {
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(NumericsError::InvalidArgument(format!(
            "rcond must lie in (0, 1), got {rcond}"
        )));
    }
    let dec = svd(a)?;
    let (m, n) = a.shape();
    let cutoff = rcond * dec.s.first().copied().unwrap_or(0.0);
    let mut v = dec.vh.adjoint();
    for (j, &sj) in dec.s.iter().enumerate() {
        let inv = if sj > cutoff && sj > 0.0 { 1.0 / sj } else { 0.0 };
        v.column_mut(j).scale_mut(inv);
    }
    let out = v * dec.u.adjoint();
    debug_assert_eq!(out.shape(), (n, m));
    Ok(out)
}

/// Lower Cholesky factor `l` with `a = l lᴴ`.
///
/// Only the lower triangle of `a` is read. A pivot that is not positive
/// (relative to the largest diagonal entry) reports its 1-based leading
/// minor.
pub fn cholesky(a: &CMatrix) -> Result<CMatrix> {
    ensure_finite(a)?;
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericsError::DimensionMismatch(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let max_diag = (0..n).map(|i| a[(i, i)].re.abs()).fold(0.0, f64::max);
    let floor = max_diag * f64::EPSILON * (n.max(1) as f64);
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > floor) {
            return Err(NumericsError::NotPositiveDefinite { minor: j + 1 });
        }
        let djj = d.sqrt();
        l[(j, j)] = Complex64::new(djj, 0.0);
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solve `a x = b` for Hermitian positive definite `a`.
pub fn solve_hpd(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if b.nrows() != a.nrows() {
        return Err(NumericsError::DimensionMismatch(format!(
            "solve_hpd: a is {}x{}, b has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    ensure_finite(b)?;
    let l = cholesky(a)?;
    let y = l
        .solve_lower_triangular(b)
        .ok_or(NumericsError::NotPositiveDefinite { minor: 0 })?;
    l.adjoint()
        .solve_upper_triangular(&y)
        .ok_or(NumericsError::NotPositiveDefinite { minor: 0 })
}

/// Deterministic random source keyed by `(seed, stream)`.
///
/// Two instances with the same key produce identical sequences regardless of
/// which thread draws from them. Instances are deliberately not `Sync`-shared:
/// each Monte Carlo trial owns its own stream.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on `(-π, π]`.
    pub fn uniform_phase(&mut self) -> f64 {
        std::f64::consts::PI - 2.0 * std::f64::consts::PI * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Circularly symmetric complex Gaussian matrix with per-entry variance
/// `variance` (half in each of the real and imaginary parts). Entries are
/// drawn in row-major order.
pub fn complex_gaussian(rng: &mut SeededRng, rows: usize, cols: usize, variance: f64) -> CMatrix {
    assert!(variance >= 0.0, "variance must be nonnegative");
    let scale = (variance / 2.0).sqrt();
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        let re = rng.standard_normal();
        let im = rng.standard_normal();
        data.push(Complex64::new(re * scale, im * scale));
    }
    CMatrix::from_row_slice(rows, cols, &data)
}

/// Haar-distributed `n x n` unitary matrix.
pub fn random_unitary(rng: &mut SeededRng, n: usize) -> CMatrix {
    let g = complex_gaussian(rng, n, n, 1.0);
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..n {
        let d = r[(j, j)];
        let mag = d.norm();
        if mag > 0.0 {
            let ph = d / mag;
            for z in q.column_mut(j).iter_mut() {
                *z *= ph;
            }
        }
    }
    q
}
