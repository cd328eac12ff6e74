//! Channel estimators: pilot-only maximum likelihood, regularized alternating
//! least squares over the joint pilot and data block (RALS-SB), and the
//! whitening-rotation decomposition with a blind whitening step and a pilot
//! Procrustes step (WD-SB).

use std::fmt;
use std::time::{Duration, Instant};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    self, complex_gaussian, fro_norm_sqr, hermitian_eig, pinv, solve_hpd, svd, CMatrix,
    NumericsError, SeededRng, DEFAULT_RCOND,
};
use crate::signal::{PilotBlock, ReceivedFrame, RfCombiner};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid estimator configuration: {0}")]
    InvalidConfig(String),
    #[error("ambiguity matrix is numerically singular (condition number {condition:e})")]
    Ambiguity { condition: f64 },
    #[error("perfect whitening requires the true channel")]
    MissingTrueChannel,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T, E = EstimatorError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    RalsSb,
    WdSb,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ml",
            Method::RalsSb => "rals_sb",
            Method::WdSb => "wd_sb",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChannelEstimate {
    pub h_hat: CMatrix,
    pub method: Method,
    pub iterations: usize,
    pub converged: bool,
    /// RALS objective, one entry for the initial point and one per
    /// half-update.
    pub objective_trace: Vec<f64>,
    pub elapsed: Duration,
    pub warnings: Vec<String>,
}

fn check_pilot_frame(frame: &ReceivedFrame, pilots: &PilotBlock, w_rf: &RfCombiner) -> Result<()> {
    if frame.y.nrows() != w_rf.w_rf.ncols() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "frame has {} rows, combiner has {} outputs",
            frame.y.nrows(),
            w_rf.w_rf.ncols()
        )));
    }
    if frame.y.ncols() != pilots.tau_p() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "pilot frame has {} columns, pilots have tau_p = {}",
            frame.y.ncols(),
            pilots.tau_p()
        )));
    }
    Ok(())
}

fn pilot_gram(pilots: &PilotBlock) -> Complex64 {
    Complex64::new(pilots.p_p * pilots.tau_p() as f64, 0.0)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlOptions {
    /// Undo the combiner with `pinv(W_RFᴴ)` instead of `W_RF`.
    #[serde(default)]
    pub pseudo_inverse_combining: bool,
}

/// `Ĥ = W_RF Y_p X_p / (P_p τ_p)`.
pub fn estimate_ml(
    frame: &ReceivedFrame,
    pilots: &PilotBlock,
    w_rf: &RfCombiner,
    opts: MlOptions,
) -> Result<ChannelEstimate> {
    let start = Instant::now();
    check_pilot_frame(frame, pilots, w_rf)?;
    let back = if opts.pseudo_inverse_combining {
        pinv(&w_rf.w_rf.adjoint(), DEFAULT_RCOND)?
    } else {
        w_rf.w_rf.clone()
    };
    let h_hat = back * &frame.y * &pilots.x_p / pilot_gram(pilots);
    numerics::ensure_finite(&h_hat)?;
    Ok(ChannelEstimate {
        h_hat,
        method: Method::Ml,
        iterations: 1,
        converged: true,
        objective_trace: Vec::new(),
        elapsed: start.elapsed(),
        warnings: Vec::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RalsConfig {
    pub beta_u: f64,
    pub beta_v: f64,
    /// Diagonal of Λ, one entry per user.
    pub lambda_fading: Vec<f64>,
    pub max_iters: usize,
    pub rel_tol: f64,
}

impl RalsConfig {
    /// `β_U = β_V = σ²`, `Λ = I`, 100 iterations, relative tolerance 1e-6.
    pub fn for_noise(sigma2: f64, k_u: usize) -> Self {
        Self {
            beta_u: sigma2,
            beta_v: sigma2,
            lambda_fading: vec![1.0; k_u],
            max_iters: 100,
            rel_tol: 1e-6,
        }
    }

    pub fn validate(&self, k_u: usize) -> Result<()> {
        if !(self.beta_u > 0.0 && self.beta_v > 0.0) {
            return Err(EstimatorError::InvalidConfig(format!(
                "beta_u and beta_v must be > 0, got {} and {}",
                self.beta_u, self.beta_v
            )));
        }
        if self.lambda_fading.len() != k_u || self.lambda_fading.iter().any(|&l| !(l > 0.0)) {
            return Err(EstimatorError::InvalidConfig(format!(
                "lambda_fading needs {k_u} positive entries"
            )));
        }
        if self.max_iters == 0 || !(self.rel_tol > 0.0) {
            return Err(EstimatorError::InvalidConfig(
                "max_iters must be >= 1 and rel_tol > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Objective floor relative to `‖Y‖²` below which further iterations only
/// shuffle rounding error.
const RALS_ABS_FLOOR: f64 = 1e-26;

const MAX_GAMMA_CONDITION: f64 = 1e12;

fn scale_columns(a: &CMatrix, d: &[f64]) -> CMatrix {
    let mut out = a.clone();
    for (j, &s) in d.iter().enumerate() {
        out.column_mut(j).scale_mut(s);
    }
    out
}

fn scale_rows(a: &CMatrix, d: &[f64]) -> CMatrix {
    let mut out = a.clone();
    for (i, &s) in d.iter().enumerate() {
        out.row_mut(i).scale_mut(s);
    }
    out
}

/// Alternating regularized least squares on
/// `‖Y − W_RFᴴ U Λ V‖² + β_U‖U‖² + β_V‖V‖²` over `Y = [Y_p, Y_d]`.
///
/// Returns the channel estimate and the detected data `X̂_d` (`N x K`).
pub fn estimate_rals_sb(
    y_joint: &CMatrix,
    pilots: &PilotBlock,
    w_rf: &RfCombiner,
    cfg: &RalsConfig,
    rng: &mut SeededRng,
) -> Result<(ChannelEstimate, CMatrix)> {
    let start = Instant::now();
    let k = pilots.k_u();
    let tau_p = pilots.tau_p();
    let n_bs = w_rf.n_bs();
    cfg.validate(k)?;
    if y_joint.nrows() != w_rf.w_rf.ncols() || y_joint.ncols() <= tau_p {
        return Err(EstimatorError::DimensionMismatch(format!(
            "joint block is {}x{}, need {} rows and more than tau_p = {} columns",
            y_joint.nrows(),
            y_joint.ncols(),
            w_rf.w_rf.ncols(),
            tau_p
        )));
    }
    let tau_c = y_joint.ncols();
    let lambda = &cfg.lambda_fading;
    let a = w_rf.w_rf.adjoint();

    // U-step normal equations: AᴴA U BBᴴ + β U = AᴴY Bᴴ, solved in the joint
    // eigenbasis of AᴴA and BBᴴ.
    let (d_a, q_a) = hermitian_eig(&(&w_rf.w_rf * &a))?;
    let d_a: Vec<f64> = d_a.into_iter().map(|v| v.max(0.0)).collect();
    let ah_y = w_rf.w_rf.clone() * y_joint;

    let mut u = complex_gaussian(rng, n_bs, k, 1.0);
    let mut v = complex_gaussian(rng, k, tau_c, 1.0);
    v.columns_mut(0, tau_p).copy_from(&pilots.x_p.adjoint());

    let y_energy = fro_norm_sqr(y_joint);
    let objective = |u: &CMatrix, v: &CMatrix| {
        let fit = &a * scale_columns(u, lambda) * v;
        fro_norm_sqr(&(y_joint - fit)) + cfg.beta_u * fro_norm_sqr(u) + cfg.beta_v * fro_norm_sqr(v)
    };

    let mut trace = vec![objective(&u, &v)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let prev = *trace.last().expect("trace starts non-empty");

        let b = scale_rows(&v, lambda);
        let (d_b, p_b) = hermitian_eig(&(&b * b.adjoint()))?;
        let rhs = q_a.adjoint() * (&ah_y * b.adjoint()) * &p_b;
        let u_tilde = CMatrix::from_fn(n_bs, k, |i, j| {
            rhs[(i, j)] / (d_a[i] * d_b[j].max(0.0) + cfg.beta_u)
        });
        u = &q_a * u_tilde * p_b.adjoint();
        trace.push(objective(&u, &v));

        let e = &a * scale_columns(&u, lambda);
        let gram = e.ad_mul(&e) + CMatrix::identity(k, k) * Complex64::new(cfg.beta_v, 0.0);
        v = solve_hpd(&gram, &e.ad_mul(y_joint))?;
        let obj = objective(&u, &v);
        trace.push(obj);

        if (prev - obj).abs() <= cfg.rel_tol * prev || obj <= RALS_ABS_FLOOR * y_energy {
            converged = true;
            break;
        }
    }

    let v_p = v.columns(0, tau_p).into_owned();
    let gamma = &v_p * &pilots.x_p / pilot_gram(pilots);
    let condition = svd(&gamma)?.condition_number();
    if !(condition <= MAX_GAMMA_CONDITION) {
        return Err(EstimatorError::Ambiguity { condition });
    }
    let h_hat = scale_columns(&u, lambda) * &gamma;
    let v_d = v.columns(tau_p, tau_c - tau_p).into_owned();
    let x_d_h = gamma
        .lu()
        .solve(&v_d)
        .ok_or(EstimatorError::Ambiguity { condition })?;
    numerics::ensure_finite(&h_hat)?;
    Ok((
        ChannelEstimate {
            h_hat,
            method: Method::RalsSb,
            iterations,
            converged,
            objective_trace: trace,
            elapsed: start.elapsed(),
            warnings: Vec::new(),
        },
        x_d_h.adjoint(),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Whitening {
    /// `W = SΣ` from the true channel; for bound validation.
    Perfect,
    /// Blind estimate from the data-block covariance.
    Estimated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WdSbConfig {
    pub sigma2: f64,
    pub p_d: f64,
    pub whitening: Whitening,
}

/// Blind whitening estimate `Ŵ = ÛΣ̂^{1/2}` from the top-`k` eigenpairs of
/// `(W_RF Y_d Y_dᴴ W_RFᴴ − Nσ²I) / (N P_d)`, with negative eigenvalues
/// clamped to zero. Returns the estimate and any rank warnings.
pub fn estimate_whitening(
    y_d: &CMatrix,
    w_rf: &RfCombiner,
    sigma2: f64,
    p_d: f64,
    k: usize,
) -> Result<(CMatrix, Vec<String>)> {
    let n = y_d.ncols();
    if n == 0 {
        return Err(EstimatorError::InvalidConfig("whitening needs n_data >= 1".into()));
    }
    if y_d.nrows() != w_rf.w_rf.ncols() {
        return Err(EstimatorError::DimensionMismatch(format!(
            "data frame has {} rows, combiner has {} outputs",
            y_d.nrows(),
            w_rf.w_rf.ncols()
        )));
    }
    let n_bs = w_rf.n_bs();
    if k > n_bs {
        return Err(EstimatorError::DimensionMismatch(format!(
            "cannot take {k} components from a {n_bs}-dimensional covariance"
        )));
    }
    let gram = y_d * y_d.adjoint();
    let shift = CMatrix::identity(n_bs, n_bs) * Complex64::new(n as f64 * sigma2, 0.0);
    let m = (&w_rf.w_rf * gram * w_rf.w_rf.adjoint() - shift) / Complex64::new(n as f64 * p_d, 0.0);
    let (vals, vecs) = hermitian_eig(&m)?;
    let mut warnings = Vec::new();
    let positive = vals.iter().take(k).filter(|&&v| v > 0.0).count();
    if positive < k {
        warnings.push(format!(
            "whitening: only {positive} of {k} leading eigenvalues are positive; missing components set to zero"
        ));
    }
    let roots: Vec<f64> = vals.iter().take(k).map(|&v| v.max(0.0).sqrt()).collect();
    Ok((scale_columns(&vecs.columns(0, k).into_owned(), &roots), warnings))
}

/// `W = SΣ` from the thin SVD of `h`.
pub fn perfect_whitening(h: &CMatrix) -> Result<CMatrix> {
    let k = h.ncols();
    let f = svd(h)?;
    Ok(scale_columns(&f.u.columns(0, k).into_owned(), &f.s[..k]))
}

/// Unitary `T̂` from the SVD of `ŴᴴW_RF Y_p X_p` (`K x K`).
pub fn procrustes_rotation(
    w_hat: &CMatrix,
    frame_p: &ReceivedFrame,
    pilots: &PilotBlock,
    w_rf: &RfCombiner,
) -> Result<CMatrix> {
    let cross = w_hat.ad_mul(&(&w_rf.w_rf * &frame_p.y * &pilots.x_p));
    let f = svd(&cross)?;
    Ok(f.vh.adjoint() * f.u.adjoint())
}

/// `Ĥ = Ŵ T̂ᴴ`.
pub fn estimate_wd_sb(
    frame_p: &ReceivedFrame,
    frame_d: Option<&ReceivedFrame>,
    pilots: &PilotBlock,
    w_rf: &RfCombiner,
    cfg: &WdSbConfig,
    true_h: Option<&CMatrix>,
) -> Result<ChannelEstimate> {
    let start = Instant::now();
    check_pilot_frame(frame_p, pilots, w_rf)?;
    let k = pilots.k_u();
    let (w_hat, warnings) = match cfg.whitening {
        Whitening::Perfect => {
            let h = true_h.ok_or(EstimatorError::MissingTrueChannel)?;
            if h.ncols() != k || h.nrows() != w_rf.n_bs() {
                return Err(EstimatorError::DimensionMismatch(format!(
                    "true channel is {}x{}, expected {}x{}",
                    h.nrows(),
                    h.ncols(),
                    w_rf.n_bs(),
                    k
                )));
            }
            (perfect_whitening(h)?, Vec::new())
        }
        Whitening::Estimated => {
            let frame_d = frame_d.ok_or_else(|| {
                EstimatorError::InvalidConfig("estimated whitening needs a data frame".into())
            })?;
            estimate_whitening(&frame_d.y, w_rf, cfg.sigma2, cfg.p_d, k)?
        }
    };
    let t_hat = procrustes_rotation(&w_hat, frame_p, pilots, w_rf)?;
    let h_hat = w_hat * t_hat.adjoint();
    numerics::ensure_finite(&h_hat)?;
    Ok(ChannelEstimate {
        h_hat,
        method: Method::WdSb,
        iterations: 1,
        converged: true,
        objective_trace: Vec::new(),
        elapsed: start.elapsed(),
        warnings,
    })
}
