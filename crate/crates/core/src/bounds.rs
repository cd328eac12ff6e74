//! Constrained Cramér–Rao bound for the whitening-rotation estimator with a
//! known whitening factor, the analytic ML error, and the resulting gain.
//!
//! The unknown is the unitary `T` in `H = SΣTᴴ`, stacked as
//! `ξ = [vec T; vec T*]` with column-major `vec`. The unitarity constraints
//! `t_iᴴt_j = δ_ij` are handled through an orthonormal basis `B` of the null
//! space of their Jacobian.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

use crate::numerics::{self, kron, solve_hpd, svd, CMatrix, NumericsError};

#[derive(Debug, Error)]
pub enum BoundsError {
    #[error("invalid bound inputs: {0}")]
    InvalidInputs(String),
    #[error("constraint Jacobian has rank {rank}, expected {expected}")]
    DegenerateConstraints { rank: usize, expected: usize },
    #[error("singular value {index} is zero; rank-deficient channels are not supported")]
    SingularWeight { index: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = BoundsError> = std::result::Result<T, E>;

const UNITARY_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct CrlbInputs {
    /// Left singular vectors, `N_BS x K`.
    pub s: CMatrix,
    /// Singular values, descending.
    pub sigma_sv: Vec<f64>,
    /// Unitary right factor, `K x K`.
    pub t: CMatrix,
    pub p_p: f64,
    pub tau_p: usize,
    pub sigma2: f64,
}

impl CrlbInputs {
    /// Factor `h = SΣTᴴ` by a thin SVD.
    pub fn from_channel(h: &CMatrix, p_p: f64, tau_p: usize, sigma2: f64) -> Result<Self> {
        let k = h.ncols();
        if h.nrows() < k {
            return Err(BoundsError::InvalidInputs(format!(
                "channel must have at least as many antennas as users, got {}x{}",
                h.nrows(),
                k
            )));
        }
        let f = svd(h)?;
        Ok(Self {
            s: f.u.columns(0, k).into_owned(),
            sigma_sv: f.s[..k].to_vec(),
            t: f.vh.rows(0, k).adjoint(),
            p_p,
            tau_p,
            sigma2,
        })
    }

    pub fn k_u(&self) -> usize {
        self.t.ncols()
    }

    pub fn n_bs(&self) -> usize {
        self.s.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k_u();
        let bad = |m: String| Err(BoundsError::InvalidInputs(m));
        if self.t.nrows() != k || self.s.ncols() != k || self.sigma_sv.len() != k {
            return bad(format!(
                "inconsistent sizes: S {}x{}, T {}x{}, {} singular values",
                self.s.nrows(),
                self.s.ncols(),
                self.t.nrows(),
                self.t.ncols(),
                self.sigma_sv.len()
            ));
        }
        check_unitary(&self.t)?;
        if self.sigma_sv.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return bad("singular values must be finite and nonnegative".into());
        }
        if self.sigma_sv.windows(2).any(|w| w[1] > w[0]) {
            return bad("singular values must be sorted descending".into());
        }
        if !(self.p_p > 0.0) || self.tau_p == 0 || !(self.sigma2 >= 0.0) {
            return bad(format!(
                "need p_p > 0, tau_p >= 1, sigma2 >= 0; got {}, {}, {}",
                self.p_p, self.tau_p, self.sigma2
            ));
        }
        if let Some(index) = self.sigma_sv.iter().position(|&s| s == 0.0) {
            return Err(BoundsError::SingularWeight { index });
        }
        Ok(())
    }
}

fn check_unitary(t: &CMatrix) -> Result<()> {
    let k = t.ncols();
    let dev = (t.ad_mul(t) - CMatrix::identity(k, k)).norm();
    if t.nrows() != k || !(dev < UNITARY_TOL) {
        return Err(BoundsError::InvalidInputs(format!(
            "T must be unitary (deviation {dev:e})"
        )));
    }
    Ok(())
}

/// Jacobian of the `K²` constraints `f_ij = t_iᴴt_j − δ_ij` with respect to
/// `[vec T; vec T*]`. Row `i·K + j` holds `t_iᴴ` in first-half block `j`
/// and `t_jᵀ` in second-half block `i`.
pub fn constraint_jacobian(t: &CMatrix) -> CMatrix {
    let k = t.ncols();
    let k2 = k * k;
    let mut jac = CMatrix::zeros(k2, 2 * k2);
    for i in 0..k {
        for j in 0..k {
            let row = i * k + j;
            for l in 0..k {
                jac[(row, j * k + l)] += t[(l, i)].conj();
                jac[(row, k2 + i * k + l)] += t[(l, j)];
            }
        }
    }
    jac
}

/// Orthonormal null-space basis of `jac` (`2K² x K²`) from its SVD.
pub fn null_space_basis(jac: &CMatrix) -> Result<CMatrix> {
    let rows = jac.nrows();
    let n = jac.ncols();
    if n != 2 * rows {
        return Err(BoundsError::InvalidInputs(format!(
            "expected a K² x 2K² Jacobian, got {rows}x{n}"
        )));
    }
    let mut square = CMatrix::zeros(n, n);
    square.rows_mut(0, rows).copy_from(jac);
    let f = svd(&square)?;
    let tol = f.s.first().copied().unwrap_or(0.0) * n as f64 * 1e-12;
    let rank = f.s.iter().filter(|&&s| s > tol).count();
    if rank != rows {
        return Err(BoundsError::DegenerateConstraints {
            rank,
            expected: rows,
        });
    }
    Ok(f.vh.rows(rows, n - rows).adjoint())
}

/// Explicit null-space basis. Column `i·K + j` has `t_i/√2` in first-half
/// block `j` and `−t_j*/√2` in second-half block `i`.
pub fn closed_form_null_space(t: &CMatrix) -> CMatrix {
    let k = t.ncols();
    let k2 = k * k;
    let r = std::f64::consts::FRAC_1_SQRT_2;
    let mut b = CMatrix::zeros(2 * k2, k2);
    for i in 0..k {
        for j in 0..k {
            let col = i * k + j;
            for l in 0..k {
                b[(j * k + l, col)] = t[(l, i)] * r;
                b[(k2 + i * k + l, col)] = -t[(l, j)].conj() * r;
            }
        }
    }
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NullSpaceMethod {
    Numeric,
    ClosedForm,
}

/// Unconstrained Fisher information `C_ξ = (τ_pP_p/σ²) I₂ ⊗ (Σ² ⊗ I_K)`.
pub fn unconstrained_fim(inputs: &CrlbInputs) -> CMatrix {
    let k = inputs.k_u();
    let snr = inputs.tau_p as f64 * inputs.p_p / inputs.sigma2;
    let sig2 = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
        k,
        inputs.sigma_sv.iter().map(|s| Complex64::new(s * s * snr, 0.0)),
    ));
    let half = kron(&sig2, &CMatrix::identity(k, k));
    kron(&CMatrix::identity(2, 2), &half)
}

/// Diagonal of `BᴴC_ξB` for the explicit basis, rescaled by `2σ²/(τ_pP_p)`.
/// Entry `i·K + j` equals `σ_i² + σ_j²`.
pub fn sigma_tilde(inputs: &CrlbInputs) -> Vec<f64> {
    let b = closed_form_null_space(&inputs.t);
    let reduced = b.ad_mul(&(unconstrained_fim(inputs) * &b));
    let scale = 2.0 * inputs.sigma2 / (inputs.tau_p as f64 * inputs.p_p);
    reduced.diagonal().iter().map(|z| z.re * scale).collect()
}

/// `C_T = B (BᴴC_ξB)⁻¹ Bᴴ`.
pub fn constrained_covariance(inputs: &CrlbInputs, method: NullSpaceMethod) -> Result<CMatrix> {
    inputs.validate()?;
    if !(inputs.sigma2 > 0.0) {
        return Err(BoundsError::InvalidInputs(
            "the Fisher information needs sigma2 > 0".into(),
        ));
    }
    let b = match method {
        NullSpaceMethod::Numeric => null_space_basis(&constraint_jacobian(&inputs.t))?,
        NullSpaceMethod::ClosedForm => closed_form_null_space(&inputs.t),
    };
    let reduced = b.ad_mul(&(unconstrained_fim(inputs) * &b));
    let inner = solve_hpd(&reduced, &b.adjoint())?;
    Ok(&b * inner)
}

#[derive(Debug, Clone)]
pub struct CrlbResult {
    /// Bound on the covariance of `vec(Hᵀ)`; index `k·K + l` is `H(k, l)`.
    pub c_h: CMatrix,
    /// Per-entry MSE bound, `N_BS x K`.
    pub per_element: DMatrix<f64>,
    pub total_mse_bound: f64,
}

/// Matrix-form bound `C_H = Υ conj([C_T]₁₁) Υᴴ`, `Υ = SΣ ⊗ I_K`, plus the
/// per-element bound.
pub fn ccrlb(inputs: &CrlbInputs) -> Result<CrlbResult> {
    ccrlb_with(inputs, NullSpaceMethod::Numeric)
}

pub fn ccrlb_with(inputs: &CrlbInputs, method: NullSpaceMethod) -> Result<CrlbResult> {
    let c_t = constrained_covariance(inputs, method)?;
    let k = inputs.k_u();
    let k2 = k * k;
    let c11 = c_t.view((0, 0), (k2, k2)).map(|z| z.conj());
    let w = whitening_factor(inputs);
    let upsilon = kron(&w, &CMatrix::identity(k, k));
    let c_h = &upsilon * c11 * upsilon.adjoint();
    let per_element = per_element_bound(inputs, false)?;
    let total_mse_bound = per_element.sum();
    Ok(CrlbResult {
        c_h,
        per_element,
        total_mse_bound,
    })
}

fn whitening_factor(inputs: &CrlbInputs) -> CMatrix {
    let mut w = inputs.s.clone();
    for (j, &s) in inputs.sigma_sv.iter().enumerate() {
        w.column_mut(j).scale_mut(s);
    }
    w
}

/// Diagonal of `C_H` reshaped to `N_BS x K`.
pub fn c_h_diagonal(c_h: &CMatrix, n_bs: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n_bs, k, |row, l| c_h[(row * k + l, row * k + l)].re)
}

/// `(σ²/(τ_pP_p)) Σ_ν Σ_j w_νj |S(k,ν)|² |T(l,j)|²` with
/// `w_νj = σ_ν²/(σ_j² + σ_ν²)`, or `w_νj = 1` when `unit_weights` is set.
pub fn per_element_bound(inputs: &CrlbInputs, unit_weights: bool) -> Result<DMatrix<f64>> {
    inputs.validate()?;
    let k = inputs.k_u();
    let scale = inputs.sigma2 / (inputs.tau_p as f64 * inputs.p_p);
    let sv2: Vec<f64> = inputs.sigma_sv.iter().map(|s| s * s).collect();
    let s_abs = inputs.s.map(|z| z.norm_sqr());
    let t_abs = inputs.t.map(|z| z.norm_sqr());
    let weights = DMatrix::from_fn(k, k, |nu, j| {
        if unit_weights {
            1.0
        } else {
            sv2[nu] / (sv2[j] + sv2[nu])
        }
    });
    // |S|² W |T|²ᵀ
    Ok(s_abs * weights * t_abs.transpose() * scale)
}

/// `σ²K N_BS/(P_pτ_p)`.
pub fn ml_mse(sigma2: f64, k_u: usize, n_bs: usize, p_p: f64, tau_p: usize) -> f64 {
    sigma2 * (k_u * n_bs) as f64 / (p_p * tau_p as f64)
}

/// Total constrained bound `σ²K²/(2P_pτ_p)`, independent of the channel.
pub fn wd_sb_total_bound(sigma2: f64, k_u: usize, p_p: f64, tau_p: usize) -> f64 {
    sigma2 * (k_u * k_u) as f64 / (2.0 * p_p * tau_p as f64)
}

/// `10 log₁₀(2N_BS/K)` dB.
pub fn wd_sb_gain_db(n_bs: usize, k_u: usize) -> f64 {
    10.0 * (2.0 * n_bs as f64 / k_u as f64).log10()
}

/// Largest absolute deviation between the matrix-form diagonal and the
/// per-element bound.
pub fn diagonal_mismatch(result: &CrlbResult, n_bs: usize, k: usize) -> f64 {
    let d = c_h_diagonal(&result.c_h, n_bs, k);
    max_abs(&(d - &result.per_element))
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Cosines of the principal angles between the column spans of two
/// orthonormal bases; all equal to one when the spans coincide.
pub fn principal_cosines(a: &CMatrix, b: &CMatrix) -> Result<Vec<f64>> {
    Ok(numerics::svd(&a.ad_mul(b))?.s)
}
