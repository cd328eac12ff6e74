//! Receive combiner design from estimated CSI: the fully digital MMSE
//! benchmark, a sparse hybrid combiner found by sparse Bayesian learning over
//! an angular dictionary, and the spectral efficiency of a combiner pair.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::channel::array_response;
use crate::numerics::{cholesky, fro_norm_sqr, pinv, solve_hpd, CMatrix, NumericsError, DEFAULT_RCOND};

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("invalid combiner configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("all hyperparameters collapsed below the floor {floor:e}")]
    Degenerate { floor: f64 },
    #[error("effective combiner is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = CombinerError> = std::result::Result<T, E>;

fn real(x: f64) -> Complex64 {
    Complex64::new(x, 0.0)
}

/// `W = Ĥ(ĤᴴĤ + Kσ²I)⁻¹`.
pub fn mmse_digital(h_hat: &CMatrix, sigma_v2: f64) -> Result<CMatrix> {
    let k = h_hat.ncols();
    crate::numerics::ensure_finite(h_hat)?;
    if !(sigma_v2 >= 0.0) {
        return Err(CombinerError::InvalidConfig(format!(
            "noise variance must be >= 0, got {sigma_v2}"
        )));
    }
    if fro_norm_sqr(h_hat) == 0.0 {
        return Ok(h_hat.clone());
    }
    let gram = h_hat.ad_mul(h_hat) + CMatrix::identity(k, k) * real(k as f64 * sigma_v2);
    // W = Ĥ G⁻¹ = (G⁻¹ Ĥᴴ)ᴴ since G is Hermitian.
    Ok(solve_hpd(&gram, &h_hat.adjoint())?.adjoint())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AngularDictionary {
    /// `N_BS x S` matrix of unit-norm array responses.
    pub g_r: CMatrix,
    /// Angles with `cos φ_s = 2s/S − 1`, `s = 0..S`.
    pub angles: Vec<f64>,
}

impl AngularDictionary {
    pub fn size(&self) -> usize {
        self.angles.len()
    }
}

/// Half-wavelength ULA dictionary on a uniform grid in `cos φ`.
pub fn build_dictionary(n_bs: usize, s: usize) -> Result<AngularDictionary> {
    if s < 2 || n_bs == 0 {
        return Err(CombinerError::InvalidConfig(format!(
            "dictionary needs s >= 2 and n_bs >= 1, got s = {s}, n_bs = {n_bs}"
        )));
    }
    let angles: Vec<f64> = (0..s)
        .map(|i| (2.0 * i as f64 / s as f64 - 1.0).acos())
        .collect();
    let mut g_r = CMatrix::zeros(n_bs, s);
    for (j, &phi) in angles.iter().enumerate() {
        g_r.set_column(j, &array_response(phi, n_bs, 0.5));
    }
    Ok(AngularDictionary { g_r, angles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SblConfig {
    /// Approximation-error variance σ_a².
    pub sigma_a2: f64,
    pub max_em_iters: usize,
    pub rel_tol: f64,
    pub gamma_floor: f64,
}

impl SblConfig {
    /// `σ_a² = σ_v²`, 200 iterations, tolerance 1e-4, floor 1e-12.
    pub fn for_noise(sigma_v2: f64) -> Self {
        Self {
            sigma_a2: sigma_v2,
            max_em_iters: 200,
            rel_tol: 1e-4,
            gamma_floor: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_a2 > 0.0 && self.rel_tol > 0.0 && self.gamma_floor > 0.0)
            || self.max_em_iters == 0
        {
            return Err(CombinerError::InvalidConfig(format!(
                "sigma_a2, rel_tol, gamma_floor and max_em_iters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CombinerPair {
    /// `N_BS x N_RF`, columns taken from the dictionary.
    pub w_rf: CMatrix,
    /// `N_RF x K`.
    pub w_bb: CMatrix,
    /// Dictionary indices, ascending.
    pub selected_indices: Vec<usize>,
    /// Hyperparameters after each EM iteration.
    pub gamma_trace: Vec<Vec<f64>>,
    pub converged: bool,
}

impl CombinerPair {
    pub fn effective(&self) -> CMatrix {
        &self.w_rf * &self.w_bb
    }
}

/// Indices of the `n` largest values, ascending; ties go to the lower
/// index.
pub fn top_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut sel = order[..n.min(values.len())].to_vec();
    sel.sort_unstable();
    sel
}

/// `W_RF = G(:, 𝒮)` and the least-squares `W_BB` for a given support.
pub fn fit_on_support(
    w_mmse: &CMatrix,
    dict: &AngularDictionary,
    support: &[usize],
) -> Result<(CMatrix, CMatrix)> {
    let w_rf = dict.g_r.select_columns(support);
    let w_bb = pinv(&w_rf, DEFAULT_RCOND)? * w_mmse;
    Ok((w_rf, w_bb))
}

/// One EM pass: posterior mean `ℳ` and the diagonal of `Π`, in the
/// Woodbury form `Π = Ω − ΩGᴴC⁻¹GΩ`, `ℳ = ΩGᴴC⁻¹W`, `C = σ_a²I + GΩGᴴ`.
fn em_step(g: &CMatrix, w: &CMatrix, gamma: &[f64], sigma_a2: f64) -> Result<(CMatrix, Vec<f64>)> {
    let n = g.nrows();
    let s = g.ncols();
    let mut g_omega = g.clone();
    for (j, &gm) in gamma.iter().enumerate() {
        g_omega.column_mut(j).scale_mut(gm);
    }
    let c = &g_omega * g.adjoint() + CMatrix::identity(n, n) * real(sigma_a2);
    let mut rhs = CMatrix::zeros(n, s + w.ncols());
    rhs.columns_mut(0, s).copy_from(g);
    rhs.columns_mut(s, w.ncols()).copy_from(w);
    let sol = solve_hpd(&c, &rhs)?;
    let cinv_g = sol.columns(0, s);
    let cinv_w = sol.columns(s, w.ncols());
    let mut post_mean = g.ad_mul(&cinv_w);
    for (i, &gm) in gamma.iter().enumerate() {
        post_mean.row_mut(i).scale_mut(gm);
    }
    let pi_diag = (0..s)
        .map(|i| {
            let q = g.column(i).dotc(&cinv_g.column(i)).re;
            (gamma[i] - gamma[i] * gamma[i] * q).max(0.0)
        })
        .collect();
    Ok((post_mean, pi_diag))
}

/// Sparse hybrid combiner: EM on row-sparse `W̃` with `W_MMSE ≈ G W̃`,
/// followed by top-`N_RF` support selection and a least-squares `W_BB`.
pub fn sbl_hybrid_combiner(
    w_mmse: &CMatrix,
    dict: &AngularDictionary,
    n_rf: usize,
    cfg: &SblConfig,
) -> Result<CombinerPair> {
    cfg.validate()?;
    let s = dict.size();
    let k = w_mmse.ncols();
    if n_rf == 0 || n_rf > s {
        return Err(CombinerError::InvalidConfig(format!(
            "need 1 <= n_rf <= S, got n_rf = {n_rf}, S = {s}"
        )));
    }
    if w_mmse.nrows() != dict.g_r.nrows() {
        return Err(CombinerError::DimensionMismatch(format!(
            "combiner has {} rows, dictionary has {}",
            w_mmse.nrows(),
            dict.g_r.nrows()
        )));
    }
    crate::numerics::ensure_finite(w_mmse)?;

    let mut gamma = vec![1.0; s];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..cfg.max_em_iters {
        let (post_mean, pi_diag) = em_step(&dict.g_r, w_mmse, &gamma, cfg.sigma_a2)?;
        let next: Vec<f64> = (0..s)
            .map(|i| {
                let row = post_mean.row(i).norm_squared() / k as f64;
                (row + pi_diag[i]).max(cfg.gamma_floor)
            })
            .collect();
        let peak = next.iter().cloned().fold(0.0, f64::max);
        let change = next
            .iter()
            .zip(&gamma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        gamma = next;
        trace.push(gamma.clone());
        if change <= cfg.rel_tol * peak {
            converged = true;
            break;
        }
    }
    if gamma.iter().all(|&g| g <= cfg.gamma_floor) {
        return Err(CombinerError::Degenerate {
            floor: cfg.gamma_floor,
        });
    }
    let selected_indices = top_indices(&gamma, n_rf);
    let (w_rf, w_bb) = fit_on_support(w_mmse, dict, &selected_indices)?;
    Ok(CombinerPair {
        w_rf,
        w_bb,
        selected_indices,
        gamma_trace: trace,
        converged,
    })
}

/// LS residual `‖W_RF W_BB − W_MMSE‖_F` of the top-`N_RF` support at each
/// EM snapshot.
pub fn support_residual_trace(
    w_mmse: &CMatrix,
    dict: &AngularDictionary,
    pair: &CombinerPair,
) -> Result<Vec<f64>> {
    let n_rf = pair.selected_indices.len();
    pair.gamma_trace
        .iter()
        .map(|g| {
            let (w_rf, w_bb) = fit_on_support(w_mmse, dict, &top_indices(g, n_rf))?;
            Ok((w_rf * w_bb - w_mmse).norm())
        })
        .collect()
}

/// `log₂ det(I + R_n⁻¹ JᴴHHᴴJ / (σ²K))` with `R_n = JᴴJ` for the effective
/// combiner `J`.
pub fn spectral_efficiency_of(h: &CMatrix, j: &CMatrix, sigma_v2: f64, k_u: usize) -> Result<f64> {
    if h.nrows() != j.nrows() {
        return Err(CombinerError::DimensionMismatch(format!(
            "channel has {} rows, combiner has {}",
            h.nrows(),
            j.nrows()
        )));
    }
    if !(sigma_v2 > 0.0) || k_u == 0 {
        return Err(CombinerError::InvalidConfig(format!(
            "need sigma_v2 > 0 and k_u >= 1, got {sigma_v2}, {k_u}"
        )));
    }
    let m = j.ncols();
    let l = cholesky(&j.ad_mul(j)).map_err(|_| CombinerError::RankDeficient)?;
    let jh_h = j.ad_mul(h);
    let x = l
        .solve_lower_triangular(&jh_h)
        .ok_or(CombinerError::RankDeficient)?;
    let a = &x * x.adjoint() / real(sigma_v2 * k_u as f64);
    let lhs = CMatrix::identity(m, m) + a;
    let lc = cholesky(&lhs)?;
    Ok(2.0 * lc.diagonal().iter().map(|d| d.re.log2()).sum::<f64>())
}

pub fn spectral_efficiency(
    h: &CMatrix,
    w_rf: &CMatrix,
    w_bb: &CMatrix,
    sigma_v2: f64,
    k_u: usize,
) -> Result<f64> {
    spectral_efficiency_of(h, &(w_rf * w_bb), sigma_v2, k_u)
}
