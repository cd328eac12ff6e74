//! Pilot and data frames, the constant-modulus RF combiner, received-block
//! synthesis and low-resolution ADC quantization.

use std::f64::consts::PI;
use std::fmt;

use num_complex::Complex64;
use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{complex_gaussian, CMatrix, SeededRng};

#[derive(Debug, Error, PartialEq)]
pub enum SignalError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T, E = SignalError> = std::result::Result<T, E>;

/// Orthogonal pilot matrix `X_p` of size `τ_p x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotBlock {
    pub x_p: CMatrix,
    pub p_p: f64,
}

impl PilotBlock {
    pub fn tau_p(&self) -> usize {
        self.x_p.nrows()
    }

    pub fn k_u(&self) -> usize {
        self.x_p.ncols()
    }
}

/// Scaled DFT columns: entry `(t, k)` is `√P_p exp(−j2π t k / τ_p)`, so
/// `X_pᴴX_p = P_p τ_p I`.
pub fn make_pilots(tau_p: usize, k_u: usize, p_p: f64) -> Result<PilotBlock> {
    if k_u == 0 {
        return Err(SignalError::InvalidConfig("k_u must be >= 1".into()));
    }
    if tau_p < k_u {
        return Err(SignalError::InvalidConfig(format!(
            "tau_p >= k_u required for orthogonal pilots, got tau_p = {tau_p}, k_u = {k_u}"
        )));
    }
    if !(p_p > 0.0 && p_p.is_finite()) {
        return Err(SignalError::InvalidConfig(format!("pilot power must be > 0, got {p_p}")));
    }
    let amp = p_p.sqrt();
    let x_p = CMatrix::from_fn(tau_p, k_u, |t, k| {
        let ph = -2.0 * PI * ((t * k) % tau_p) as f64 / tau_p as f64;
        Complex64::from_polar(amp, ph)
    });
    Ok(PilotBlock { x_p, p_p })
}

/// QPSK data matrix `X_d` of size `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct DataBlock {
    pub x_d: CMatrix,
    pub p_d: f64,
}

/// I.i.d. uniform QPSK symbols with power `p_d`. Entries are drawn in
/// row-major order.
pub fn make_data(n: usize, k_u: usize, p_d: f64, rng: &mut SeededRng) -> Result<DataBlock> {
    if n == 0 || k_u == 0 {
        return Err(SignalError::InvalidConfig("data block needs n >= 1 and k_u >= 1".into()));
    }
    if !(p_d > 0.0 && p_d.is_finite()) {
        return Err(SignalError::InvalidConfig(format!("data power must be > 0, got {p_d}")));
    }
    let a = (p_d / 2.0).sqrt();
    let mut data = Vec::with_capacity(n * k_u);
    for _ in 0..n * k_u {
        let bits = rng.next_u32();
        let re = if bits & 1 == 0 { a } else { -a };
        let im = if bits & 2 == 0 { a } else { -a };
        data.push(Complex64::new(re, im));
    }
    Ok(DataBlock {
        x_d: CMatrix::from_row_slice(n, k_u, &data),
        p_d,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerMode {
    /// Phases drawn uniformly from the quantized phase alphabet.
    Random,
    /// Scaled DFT matrix; exactly unitary.
    UnitaryValidation,
}

impl fmt::Display for CombinerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CombinerMode::Random => f.write_str("random"),
            CombinerMode::UnitaryValidation => f.write_str("unitary_validation"),
        }
    }
}

/// Analog combiner with all `B = N_BS / N_RF` blocks stacked into one
/// `N_BS x N_BS` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RfCombiner {
    pub w_rf: CMatrix,
    pub n_rf: usize,
    /// Phase resolution in bits, when every phase lies on a `2^b` grid.
    pub phase_bits: Option<u32>,
    pub mode: CombinerMode,
}

impl RfCombiner {
    pub fn n_bs(&self) -> usize {
        self.w_rf.nrows()
    }

    pub fn n_blocks(&self) -> usize {
        self.w_rf.ncols() / self.n_rf
    }

    /// Columns of RF block `b` (zero-based).
    pub fn block(&self, b: usize) -> CMatrix {
        self.w_rf.columns(b * self.n_rf, self.n_rf).into_owned()
    }
}

pub fn make_rf_combiner(
    n_bs: usize,
    n_rf: usize,
    n_q: u32,
    mode: CombinerMode,
    rng: &mut SeededRng,
) -> Result<RfCombiner> {
    if n_bs == 0 || n_rf == 0 || n_rf > n_bs {
        return Err(SignalError::InvalidConfig(format!(
            "need 1 <= n_rf <= n_bs, got n_rf = {n_rf}, n_bs = {n_bs}"
        )));
    }
    if n_bs % n_rf != 0 {
        return Err(SignalError::InvalidConfig(format!(
            "n_bs = {n_bs} is not divisible by n_rf = {n_rf}; stacked RF blocks need B = n_bs / n_rf to be an integer"
        )));
    }
    let amp = 1.0 / (n_bs as f64).sqrt();
    match mode {
        CombinerMode::Random => {
            if !(1..=16).contains(&n_q) {
                return Err(SignalError::InvalidConfig(format!(
                    "phase bits must be in 1..=16, got {n_q}"
                )));
            }
            let levels = 1usize << n_q;
            let step = 2.0 * PI / levels as f64;
            let mut data = Vec::with_capacity(n_bs * n_bs);
            for _ in 0..n_bs * n_bs {
                data.push(Complex64::from_polar(amp, step * rng.index(levels) as f64));
            }
            Ok(RfCombiner {
                w_rf: CMatrix::from_row_slice(n_bs, n_bs, &data),
                n_rf,
                phase_bits: Some(n_q),
                mode,
            })
        }
        CombinerMode::UnitaryValidation => {
            let w_rf = CMatrix::from_fn(n_bs, n_bs, |m, n| {
                let ph = 2.0 * PI * ((m * n) % n_bs) as f64 / n_bs as f64;
                Complex64::from_polar(amp, ph)
            });
            let phase_bits = n_bs
                .is_power_of_two()
                .then(|| n_bs.trailing_zeros());
            Ok(RfCombiner {
                w_rf,
                n_rf,
                phase_bits,
                mode,
            })
        }
    }
}

/// ADC resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdcBits {
    Finite(u32),
    Infinite,
}

impl AdcBits {
    pub fn validate(self) -> Result<()> {
        match self {
            AdcBits::Finite(b) if !(1..=16).contains(&b) => Err(SignalError::InvalidConfig(
                format!("adc bits must be in 1..=16 or infinite, got {b}"),
            )),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for AdcBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AdcBits::Finite(b) => write!(f, "{b}"),
            AdcBits::Infinite => f.write_str("inf"),
        }
    }
}

/// One received block after RF combining.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedFrame {
    pub y: CMatrix,
    pub noise_variance: f64,
    pub adc: AdcBits,
}

impl ReceivedFrame {
    /// Apply ADC quantization with the given clip scale. For finite
    /// resolution the granular quantization noise `(Δ_re² + Δ_im²)/12` is
    /// added to `noise_variance`.
    pub fn quantize(self, bits: AdcBits, clip_scale: f64) -> Result<Self> {
        let y = adc_quantize(&self.y, bits, clip_scale)?;
        let noise_variance = self.noise_variance + quantization_noise_variance(&self.y, bits, clip_scale);
        Ok(Self {
            y,
            noise_variance,
            adc: bits,
        })
    }
}

/// `W_RFᴴ (H Xᴴ + V)` with `V` i.i.d. CN(0, σ_v²). The noise is drawn in the
/// antenna domain, row-major, so frames from different combiners share
/// noise when given the same rng state.
pub fn receive_block(
    h: &CMatrix,
    x: &CMatrix,
    w_rf: &RfCombiner,
    sigma_v2: f64,
    rng: &mut SeededRng,
) -> Result<ReceivedFrame> {
    if h.nrows() != w_rf.n_bs() {
        return Err(SignalError::DimensionMismatch(format!(
            "channel has {} rows, combiner has {}",
            h.nrows(),
            w_rf.n_bs()
        )));
    }
    if h.ncols() != x.ncols() {
        return Err(SignalError::DimensionMismatch(format!(
            "channel has {} users, symbol block has {}",
            h.ncols(),
            x.ncols()
        )));
    }
    if !(sigma_v2 >= 0.0) {
        return Err(SignalError::InvalidConfig(format!(
            "noise variance must be >= 0, got {sigma_v2}"
        )));
    }
    let mut rx = h * x.adjoint();
    if sigma_v2 > 0.0 {
        rx += complex_gaussian(rng, rx.nrows(), rx.ncols(), sigma_v2);
    }
    Ok(ReceivedFrame {
        y: w_rf.w_rf.ad_mul(&rx),
        noise_variance: sigma_v2,
        adc: AdcBits::Infinite,
    })
}

pub fn receive_pilots(
    h: &CMatrix,
    pilots: &PilotBlock,
    w_rf: &RfCombiner,
    sigma_v2: f64,
    rng: &mut SeededRng,
) -> Result<ReceivedFrame> {
    receive_block(h, &pilots.x_p, w_rf, sigma_v2, rng)
}

pub fn receive_data(
    h: &CMatrix,
    data: &DataBlock,
    w_rf: &RfCombiner,
    sigma_v2: f64,
    rng: &mut SeededRng,
) -> Result<ReceivedFrame> {
    receive_block(h, &data.x_d, w_rf, sigma_v2, rng)
}

/// `[a, b]` side by side.
pub fn concat_columns(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.nrows() != b.nrows() {
        return Err(SignalError::DimensionMismatch(format!(
            "cannot concatenate {} rows with {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let mut out = CMatrix::zeros(a.nrows(), a.ncols() + b.ncols());
    out.columns_mut(0, a.ncols()).copy_from(a);
    out.columns_mut(a.ncols(), b.ncols()).copy_from(b);
    Ok(out)
}

pub const DEFAULT_CLIP_SCALE: f64 = 3.0;

fn std_dev(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n == 0 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64).sqrt()
}

/// Uniform mid-rise quantization of real and imaginary parts with
/// `2^b` levels over `[−R, R]`, `R = clip_scale x` per-part standard
/// deviation of `y`.
pub fn adc_quantize(y: &CMatrix, bits: AdcBits, clip_scale: f64) -> Result<CMatrix> {
    bits.validate()?;
    if !(clip_scale > 0.0 && clip_scale.is_finite()) {
        return Err(SignalError::InvalidConfig(format!(
            "clip scale must be > 0, got {clip_scale}"
        )));
    }
    if bits == AdcBits::Infinite {
        return Ok(y.clone());
    }
    let r_re = clip_scale * std_dev(y.iter().map(|z| z.re));
    let r_im = clip_scale * std_dev(y.iter().map(|z| z.im));
    adc_quantize_with_range(y, bits, r_re, r_im)
}

/// Variance `(Δ_re² + Δ_im²)/12` of the uniform granular error that
/// [`adc_quantize`] adds to each complex entry of `y`; zero for `b = ∞`.
pub fn quantization_noise_variance(y: &CMatrix, bits: AdcBits, clip_scale: f64) -> f64 {
    let AdcBits::Finite(b) = bits else {
        return 0.0;
    };
    let levels = (1u64 << b) as f64;
    let granular = |sd: f64| (2.0 * clip_scale * sd / levels).powi(2) / 12.0;
    granular(std_dev(y.iter().map(|z| z.re))) + granular(std_dev(y.iter().map(|z| z.im)))
}

/// Quantize with explicit clip ranges for the real and imaginary parts. A
/// zero range leaves that part unchanged.
pub fn adc_quantize_with_range(y: &CMatrix, bits: AdcBits, r_re: f64, r_im: f64) -> Result<CMatrix> {
    bits.validate()?;
    let b = match bits {
        AdcBits::Infinite => return Ok(y.clone()),
        AdcBits::Finite(b) => b,
    };
    Ok(y.map(|z| Complex64::new(quantize_part(z.re, b, r_re), quantize_part(z.im, b, r_im))))
}

/// Scalar mid-rise quantizer; output levels are `(i + ½)Δ`,
/// `i ∈ [−2^{b−1}, 2^{b−1} − 1]`, `Δ = 2R / 2^b`.
pub fn quantize_part(x: f64, bits: u32, range: f64) -> f64 {
    if range <= 0.0 {
        return x;
    }
    let half = (1i64 << (bits - 1)) as f64;
    let delta = 2.0 * range / (2.0 * half);
    let idx = (x / delta).floor().clamp(-half, half - 1.0);
    (idx + 0.5) * delta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fro_norm_sqr, relative_error};

    fn eye(n: usize) -> CMatrix {
        CMatrix::identity(n, n)
    }

    #[test]
    fn pilot_gram() {
        let p = make_pilots(2, 2, 1.0).unwrap();
        assert!((p.x_p.ad_mul(&p.x_p) - eye(2) * Complex64::new(2.0, 0.0)).norm() < 1e-12);
        let p = make_pilots(16, 12, 1.0).unwrap();
        assert!((p.x_p.ad_mul(&p.x_p) - eye(12) * Complex64::new(16.0, 0.0)).norm() < 1e-10);
        let p = make_pilots(5, 3, 2.5).unwrap();
        assert!((p.x_p.ad_mul(&p.x_p) - eye(3) * Complex64::new(12.5, 0.0)).norm() < 1e-10);
    }

    #[test]
    fn pilot_errors() {
        assert!(matches!(make_pilots(1, 2, 1.0), Err(SignalError::InvalidConfig(_))));
        assert!(make_pilots(4, 2, 0.0).is_err());
    }

    #[test]
    fn data_constellation_and_covariance() {
        let mut rng = SeededRng::new(3, 0);
        let d = make_data(10_000, 4, 2.0, &mut rng).unwrap();
        for z in d.x_d.iter() {
            assert!((z.re.abs() - 1.0).abs() < 1e-15 && (z.im.abs() - 1.0).abs() < 1e-15);
        }
        let cov = d.x_d.ad_mul(&d.x_d) / Complex64::new(10_000.0 * 2.0, 0.0);
        assert!((cov - eye(4)).norm() < 0.05);
        let again = make_data(10_000, 4, 2.0, &mut SeededRng::new(3, 0)).unwrap();
        assert_eq!(d, again);
    }

    #[test]
    fn combiner_modulus_and_unitarity() {
        let mut rng = SeededRng::new(9, 0);
        let c = make_rf_combiner(8, 2, 3, CombinerMode::Random, &mut rng).unwrap();
        assert_eq!(c.n_blocks(), 4);
        for z in c.w_rf.iter() {
            assert!((z.norm() * 8f64.sqrt() - 1.0).abs() < 1e-12);
        }
        let u = make_rf_combiner(8, 8, 3, CombinerMode::UnitaryValidation, &mut rng).unwrap();
        assert!((u.w_rf.ad_mul(&u.w_rf) - eye(8)).norm() < 1e-10);
        assert_eq!(u.phase_bits, Some(3));
    }

    #[test]
    fn one_bit_phases() {
        let mut rng = SeededRng::new(1, 1);
        let c = make_rf_combiner(4, 4, 1, CombinerMode::Random, &mut rng).unwrap();
        for z in c.w_rf.iter() {
            assert!(z.im.abs() < 1e-15);
        }
    }

    #[test]
    fn combiner_rejects_indivisible() {
        let mut rng = SeededRng::new(1, 1);
        assert!(make_rf_combiner(10, 4, 2, CombinerMode::Random, &mut rng).is_err());
        assert!(make_rf_combiner(4, 8, 2, CombinerMode::Random, &mut rng).is_err());
    }

    #[test]
    fn noiseless_pilot_round_trip() {
        let mut rng = SeededRng::new(5, 0);
        let h = complex_gaussian(&mut rng, 8, 3, 1.0);
        let p = make_pilots(4, 3, 1.0).unwrap();
        let w = make_rf_combiner(8, 4, 3, CombinerMode::UnitaryValidation, &mut rng).unwrap();
        let f = receive_pilots(&h, &p, &w, 0.0, &mut rng).unwrap();
        assert!(relative_error(&f.y, &w.w_rf.ad_mul(&(&h * p.x_p.adjoint()))) < 1e-15);
        let h_rec = &w.w_rf * &f.y * &p.x_p / Complex64::new(4.0, 0.0);
        assert!(relative_error(&h_rec, &h) < 1e-9);
    }

    #[test]
    fn zero_channel_noise_power() {
        let mut rng = SeededRng::new(6, 0);
        let h = CMatrix::zeros(8, 2);
        let d = make_data(12_500, 2, 1.0, &mut rng).unwrap();
        let w = make_rf_combiner(8, 8, 2, CombinerMode::Random, &mut rng).unwrap();
        let f = receive_data(&h, &d, &w, 0.5, &mut rng).unwrap();
        let mean_col_norm = (0..8).map(|j| w.w_rf.column(j).norm_squared()).sum::<f64>() / 8.0;
        let per_entry = fro_norm_sqr(&f.y) / f.y.len() as f64;
        assert!((per_entry / (0.5 * mean_col_norm) - 1.0).abs() < 0.02);
    }

    #[test]
    fn receive_rejects_bad_shapes() {
        let mut rng = SeededRng::new(6, 0);
        let w = make_rf_combiner(8, 8, 2, CombinerMode::Random, &mut rng).unwrap();
        let p = make_pilots(4, 2, 1.0).unwrap();
        assert!(receive_pilots(&CMatrix::zeros(4, 2), &p, &w, 0.1, &mut rng).is_err());
        assert!(receive_pilots(&CMatrix::zeros(8, 3), &p, &w, 0.1, &mut rng).is_err());
    }

    #[test]
    fn adc_identity_and_errors() {
        let mut rng = SeededRng::new(2, 0);
        let y = complex_gaussian(&mut rng, 4, 5, 1.0);
        assert_eq!(adc_quantize(&y, AdcBits::Infinite, 3.0).unwrap(), y);
        assert!(adc_quantize(&y, AdcBits::Finite(0), 3.0).is_err());
        assert!(adc_quantize(&y, AdcBits::Finite(17), 3.0).is_err());
    }

    #[test]
    fn adc_one_bit_levels() {
        let mut rng = SeededRng::new(2, 1);
        let y = complex_gaussian(&mut rng, 20, 20, 1.0);
        let q = adc_quantize_with_range(&y, AdcBits::Finite(1), 2.0, 3.0).unwrap();
        for (a, b) in q.iter().zip(y.iter()) {
            assert_eq!(a.re, if b.re >= 0.0 { 1.0 } else { -1.0 });
            assert_eq!(a.im, if b.im >= 0.0 { 1.5 } else { -1.5 });
        }
    }

    #[test]
    fn adc_idempotent_on_level_centers() {
        let mut rng = SeededRng::new(2, 2);
        let y = complex_gaussian(&mut rng, 10, 10, 1.0);
        let q1 = adc_quantize_with_range(&y, AdcBits::Finite(4), 2.0, 2.0).unwrap();
        let q2 = adc_quantize_with_range(&q1, AdcBits::Finite(4), 2.0, 2.0).unwrap();
        assert_eq!(q1, q2);
    }

    #[test]
    fn adc_saturates() {
        assert_eq!(quantize_part(100.0, 3, 1.0), 0.875);
        assert_eq!(quantize_part(-100.0, 3, 1.0), -0.875);
        assert_eq!(quantize_part(0.3, 5, 0.0), 0.3);
    }

    #[test]
    fn concat_layout() {
        let a = CMatrix::from_element(2, 1, Complex64::new(1.0, 0.0));
        let b = CMatrix::from_element(2, 2, Complex64::new(2.0, 0.0));
        let c = concat_columns(&a, &b).unwrap();
        assert_eq!(c.ncols(), 3);
        assert_eq!(c[(1, 0)].re, 1.0);
        assert_eq!(c[(1, 2)].re, 2.0);
        assert!(concat_columns(&a, &CMatrix::zeros(3, 1)).is_err());
    }
}
