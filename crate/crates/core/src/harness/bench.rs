//! Wall-clock timing of each estimator and the hybrid combiner design.

use std::path::Path;
use std::time::Instant;

use super::HarnessError;
use crate::channel::{generate_channel, AbsorptionTable, ChannelParams};
use crate::combiner::{build_dictionary, mmse_digital, sbl_hybrid_combiner, SblConfig};
use crate::estimators::{
    estimate_ml, estimate_rals_sb, estimate_wd_sb, MlOptions, RalsConfig, WdSbConfig, Whitening,
};
use crate::numerics::SeededRng;
use crate::signal::{
    concat_columns, make_data, make_pilots, make_rf_combiner, receive_data, receive_pilots,
    CombinerMode,
};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub n_bs: usize,
    pub k_u: usize,
    pub mean_ms: f64,
    pub p95_ms: f64,
}

#[derive(Debug, Clone)]
pub struct BenchSettings {
    pub sizes: Vec<(usize, usize)>,
    pub reps: usize,
    pub n_data: usize,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sizes: vec![(32, 8), (64, 12)],
            reps: 10,
            n_data: 200,
            snr_db: 10.0,
            seed: 1,
        }
    }
}

fn summarize(method: &str, n_bs: usize, k_u: usize, mut ms: Vec<f64>) -> BenchRow {
    ms.sort_by(f64::total_cmp);
    let mean_ms = ms.iter().sum::<f64>() / ms.len() as f64;
    // nearest-rank percentile
    let rank = ((0.95 * ms.len() as f64).ceil() as usize).clamp(1, ms.len());
    BenchRow {
        method: method.into(),
        n_bs,
        k_u,
        mean_ms,
        p95_ms: ms[rank - 1],
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T, HarnessError>) -> Result<f64, HarnessError> {
    let start = Instant::now();
    f()?;
    Ok(start.elapsed().as_secs_f64() * 1e3)
}

pub fn run_bench(settings: &BenchSettings) -> Result<Vec<BenchRow>, HarnessError> {
    if settings.reps == 0 {
        return Err(HarnessError::Runtime("bench needs at least one repetition".into()));
    }
    let sigma2 = 10f64.powf(-settings.snr_db / 10.0);
    let mut rows = Vec::new();
    for &(n_bs, k_u) in &settings.sizes {
        let tau_p = k_u.max(16);
        let params = ChannelParams::office_default(n_bs, k_u);
        let pilots = make_pilots(tau_p, k_u, 1.0)?;
        let mut times: [Vec<f64>; 5] = Default::default();
        for rep in 0..settings.reps {
            let mut rng = SeededRng::new(settings.seed, rep as u64);
            let h = generate_channel(&params, &AbsorptionTable::empty(), &mut rng)?.normalized_h();
            let w_rf = make_rf_combiner(n_bs, n_bs, 4, CombinerMode::UnitaryValidation, &mut rng)?;
            let data = make_data(settings.n_data, k_u, 1.0, &mut rng)?;
            let fp = receive_pilots(&h, &pilots, &w_rf, sigma2, &mut rng)?;
            let fd = receive_data(&h, &data, &w_rf, sigma2, &mut rng)?;
            let y = concat_columns(&fp.y, &fd.y)?;
            let wd = |whitening| WdSbConfig {
                sigma2,
                p_d: 1.0,
                whitening,
            };
            times[0].push(timed(|| Ok(estimate_ml(&fp, &pilots, &w_rf, MlOptions::default())?))?);
            times[1].push(timed(|| {
                Ok(estimate_rals_sb(&y, &pilots, &w_rf, &RalsConfig::for_noise(sigma2, k_u), &mut rng)?)
            })?);
            times[2].push(timed(|| {
                Ok(estimate_wd_sb(&fp, None, &pilots, &w_rf, &wd(Whitening::Perfect), Some(&h))?)
            })?);
            times[3].push(timed(|| {
                Ok(estimate_wd_sb(&fp, Some(&fd), &pilots, &w_rf, &wd(Whitening::Estimated), None)?)
            })?);
            let n_rf = (k_u..=n_bs).find(|r| n_bs % r == 0).unwrap_or(n_bs);
            times[4].push(timed(|| {
                let w = mmse_digital(&h, sigma2)?;
                let dict = build_dictionary(n_bs, 2 * n_bs)?;
                Ok(sbl_hybrid_combiner(&w, &dict, n_rf, &SblConfig::for_noise(sigma2))?)
            })?);
        }
        let names = ["ml", "rals_sb", "wd_sb_perfect", "wd_sb_estimated", "sbl_combiner"];
        for (name, t) in names.iter().zip(times) {
            rows.push(summarize(name, n_bs, k_u, t));
        }
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Runtime(format!("writing {}: {e}", path.display()));
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .map_err(|e| HarnessError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    w.write_record(["method", "n_bs", "k_u", "mean_ms", "p95_ms"]).map_err(err)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.n_bs.to_string(),
            r.k_u.to_string(),
            format!("{:.4}", r.mean_ms),
            format!("{:.4}", r.p95_ms),
        ])
        .map_err(err)?;
    }
    w.flush()
        .map_err(|e| HarnessError::Runtime(format!("writing {}: {e}", path.display())))
}
