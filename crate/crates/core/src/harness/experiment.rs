//! Monte Carlo runner: one independent rng stream per (sweep point, trial),
//! parallel trials, ordered reduction.

use std::path::Path;

use rayon::prelude::*;

use super::config::{AdcFrames, EstimatorKind, Resources, ScenarioConfig, SweepPoint};
use super::metrics::{abs_errors, batch_stats, ber_qpsk, db_stats, ecdf, nmse, to_db};
use super::HarnessError;
use crate::bounds::{ccrlb, ml_mse, wd_sb_gain_db, CrlbInputs};
use crate::channel::{generate_channel, normalize_channel};
use crate::combiner::{
    build_dictionary, mmse_digital, sbl_hybrid_combiner, spectral_efficiency_of, SblConfig,
};
use crate::estimators::{
    estimate_ml, estimate_rals_sb, estimate_wd_sb, ChannelEstimate, MlOptions, RalsConfig,
    WdSbConfig, Whitening,
};
use crate::numerics::{fro_norm_sqr, CMatrix, SeededRng};
use crate::signal::{
    concat_columns, make_data, make_pilots, make_rf_combiner, receive_data, receive_pilots,
    DataBlock, ReceivedFrame, RfCombiner,
};

/// Stream id for trial `trial` at sweep point `sweep`.
pub fn trial_stream(sweep: usize, trial: usize) -> u64 {
    ((sweep as u64) << 32) | trial as u64
}

#[derive(Debug, Clone)]
pub struct MethodOutcome {
    pub kind: EstimatorKind,
    pub nmse: f64,
    pub ber: f64,
    /// Spectral efficiency of the fully digital and hybrid combiners designed
    /// from this estimate, evaluated on the true channel.
    pub se: Option<(f64, f64)>,
    pub abs_errors: Option<Vec<f64>>,
    pub warnings: Vec<String>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct TrialOutcome {
    pub methods: Vec<MethodOutcome>,
}

/// Everything one trial produces before estimation.
pub struct TrialSetup {
    pub h: CMatrix,
    pub w_rf: RfCombiner,
    pub pilots: crate::signal::PilotBlock,
    pub data: DataBlock,
    pub frame_p: ReceivedFrame,
    pub frame_d: ReceivedFrame,
    pub rng: SeededRng,
}

pub fn setup_trial(
    cfg: &ScenarioConfig,
    res: &Resources,
    point: &SweepPoint,
    sweep_idx: usize,
    trial_idx: usize,
) -> Result<TrialSetup, HarnessError> {
    let s = &cfg.system;
    let mut rng = SeededRng::new(cfg.seed, trial_stream(sweep_idx, trial_idx));
    let sigma2 = point.sigma2();
    let params = cfg.channel_params(point.n_bs, &res.materials);
    let ch = generate_channel(&params, &res.absorption, &mut rng)?;
    let h = if cfg.channel.normalize_h {
        normalize_channel(&ch.h)
    } else {
        ch.h
    };
    let w_rf = make_rf_combiner(point.n_bs, s.n_rf, s.n_q, s.combiner_mode, &mut rng)?;
    let pilots = make_pilots(point.tau_p, s.k_u, s.p_p)?;
    let data = make_data(point.n_data, s.k_u, s.p_d, &mut rng)?;
    let frame_p = receive_pilots(&h, &pilots, &w_rf, sigma2, &mut rng)?.quantize(res.adc, s.clip_scale)?;
    let mut frame_d = receive_data(&h, &data, &w_rf, sigma2, &mut rng)?;
    if s.adc_frames == AdcFrames::All {
        frame_d = frame_d.quantize(res.adc, s.clip_scale)?;
    }
    Ok(TrialSetup {
        h,
        w_rf,
        pilots,
        data,
        frame_p,
        frame_d,
        rng,
    })
}

pub fn rals_config(cfg: &ScenarioConfig, sigma2: f64) -> RalsConfig {
    let base = RalsConfig::for_noise(sigma2, cfg.system.k_u);
    let r = &cfg.rals;
    RalsConfig {
        beta_u: r.beta_u.unwrap_or(base.beta_u),
        beta_v: r.beta_v.unwrap_or(base.beta_v),
        max_iters: r.max_iters.unwrap_or(base.max_iters),
        rel_tol: r.rel_tol.unwrap_or(base.rel_tol),
        ..base
    }
}

/// Run one estimator on a prepared trial. Returns the estimate and the
/// detected data `X̂_d` (`N x K`).
pub fn run_estimator(
    kind: EstimatorKind,
    cfg: &ScenarioConfig,
    setup: &mut TrialSetup,
    sigma2: f64,
) -> Result<(ChannelEstimate, CMatrix), HarnessError> {
    let s = &cfg.system;
    let TrialSetup {
        h,
        w_rf,
        pilots,
        frame_p,
        frame_d,
        rng,
        ..
    } = setup;
    let est = match kind {
        EstimatorKind::Ml => estimate_ml(
            frame_p,
            pilots,
            w_rf,
            MlOptions {
                pseudo_inverse_combining: cfg.ml.pseudo_inverse_combining,
            },
        )?,
        EstimatorKind::RalsSb => {
            let y = concat_columns(&frame_p.y, &frame_d.y)?;
            let (est, x_hat) = estimate_rals_sb(&y, pilots, w_rf, &rals_config(cfg, sigma2), rng)?;
            if cfg.rals.direct_detection {
                return Ok((est, x_hat));
            }
            est
        }
        EstimatorKind::WdSbPerfect | EstimatorKind::WdSbEstimated => {
            let whitening = if kind == EstimatorKind::WdSbPerfect {
                Whitening::Perfect
            } else {
                Whitening::Estimated
            };
            let wd = WdSbConfig {
                sigma2: frame_d.noise_variance,
                p_d: s.p_d,
                whitening,
            };
            estimate_wd_sb(frame_p, Some(frame_d), pilots, w_rf, &wd, Some(h))?
        }
    };
    let x_hat = detect_mmse(&est.h_hat, w_rf, &frame_d.y, sigma2)?;
    Ok((est, x_hat))
}

/// `X̂_d = (W_MMSE(Ĥ)ᴴ W_RF Y_d)ᴴ`.
pub fn detect_mmse(
    h_hat: &CMatrix,
    w_rf: &RfCombiner,
    y_d: &CMatrix,
    sigma2: f64,
) -> Result<CMatrix, HarnessError> {
    let w = mmse_digital(h_hat, sigma2)?;
    Ok((w.ad_mul(&w_rf.w_rf) * y_d).adjoint())
}

pub fn run_trial(
    cfg: &ScenarioConfig,
    res: &Resources,
    point: &SweepPoint,
    sweep_idx: usize,
    trial_idx: usize,
    keep_errors: bool,
) -> Result<TrialOutcome, HarnessError> {
    let sigma2 = point.sigma2();
    let mut setup = setup_trial(cfg, res, point, sweep_idx, trial_idx)?;
    let mut methods = Vec::with_capacity(cfg.estimators.len());
    for &kind in &cfg.estimators {
        let (est, x_hat) = run_estimator(kind, cfg, &mut setup, sigma2)?;
        let h = &setup.h;
        let se = match &cfg.combiner {
            Some(c) => {
                let w = mmse_digital(&est.h_hat, sigma2)?;
                let digital = spectral_efficiency_of(h, &w, sigma2, cfg.system.k_u)?;
                let dict = build_dictionary(point.n_bs, c.s_factor * point.n_bs)?;
                let sbl = SblConfig {
                    sigma_a2: c.sigma_a2.unwrap_or(sigma2),
                    max_em_iters: c.max_em_iters,
                    rel_tol: c.rel_tol,
                    gamma_floor: c.gamma_floor,
                };
                let pair = sbl_hybrid_combiner(&w, &dict, cfg.system.n_rf, &sbl)?;
                let hybrid = spectral_efficiency_of(h, &pair.effective(), sigma2, cfg.system.k_u)?;
                Some((digital, hybrid))
            }
            None => None,
        };
        methods.push(MethodOutcome {
            kind,
            nmse: nmse(&est.h_hat, h)?,
            ber: ber_qpsk(&x_hat, &setup.data.x_d)?,
            se,
            abs_errors: keep_errors.then(|| abs_errors(&est.h_hat, h)),
            warnings: est.warnings,
            converged: est.converged,
        });
    }
    Ok(TrialOutcome { methods })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricKind {
    NmseDb,
    Ber,
    SeBpsHz,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub sweep_value: f64,
    pub method: String,
    pub metric: MetricKind,
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcdfRow {
    pub threshold: f64,
    pub method: String,
    pub fraction: f64,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentReport {
    pub rows: Vec<MetricRow>,
    pub ecdf: Vec<EcdfRow>,
    pub warnings: Vec<String>,
}

impl ExperimentReport {
    pub fn rows_for(&self, metric: MetricKind) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.metric == metric)
    }

    /// Mean of `metric` for `method` at `sweep_value`.
    pub fn mean(&self, metric: MetricKind, method: &str, sweep_value: f64) -> Option<f64> {
        self.rows_for(metric)
            .find(|r| r.method == method && r.sweep_value == sweep_value)
            .map(|r| r.mean)
    }
}

fn build_pool(threads: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n);
    }
    b.build().map_err(|e| HarnessError::Runtime(format!("thread pool: {e}")))
}

/// Validate, run every trial and aggregate. The result depends only on the
/// configuration, never on `threads`.
pub fn run_experiment(
    cfg: &ScenarioConfig,
    threads: Option<usize>,
) -> Result<ExperimentReport, HarnessError> {
    let res = cfg.validate()?;
    let points = cfg.sweep_points();
    let ecdf_idx = cfg.ecdf.as_ref().map(|e| e.sweep_index);
    let work: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..cfg.trials).map(move |t| (p, t)))
        .collect();
    let pool = build_pool(threads)?;
    let outcomes: Vec<Result<TrialOutcome, HarnessError>> = pool.install(|| {
        work.par_iter()
            .map(|&(p, t)| run_trial(cfg, &res, &points[p], p, t, ecdf_idx == Some(p)))
            .collect()
    });

    let mut report = ExperimentReport::default();
    let mut outcomes = outcomes.into_iter();
    for (p, point) in points.iter().enumerate() {
        let trials: Vec<TrialOutcome> =
            outcomes.by_ref().take(cfg.trials).collect::<Result<_, _>>()?;
        for (m, &kind) in cfg.estimators.iter().enumerate() {
            let name = kind.name();
            let pick = |f: &dyn Fn(&MethodOutcome) -> f64| -> Vec<f64> {
                trials.iter().map(|t| f(&t.methods[m])).collect()
            };
            let mut push = |method: String, metric, (mean, stderr): (f64, f64)| {
                report.rows.push(MetricRow {
                    sweep_value: point.value,
                    method,
                    metric,
                    mean,
                    stderr,
                    trials: cfg.trials,
                })
            };
            push(name.into(), MetricKind::NmseDb, db_stats(&pick(&|o| o.nmse)));
            push(name.into(), MetricKind::Ber, batch_stats(&pick(&|o| o.ber)));
            if cfg.combiner.is_some() {
                let dig = pick(&|o| o.se.map_or(f64::NAN, |s| s.0));
                let hyb = pick(&|o| o.se.map_or(f64::NAN, |s| s.1));
                push(format!("{name}_digital"), MetricKind::SeBpsHz, batch_stats(&dig));
                push(format!("{name}_hybrid"), MetricKind::SeBpsHz, batch_stats(&hyb));
            }
            if ecdf_idx == Some(p) {
                let errs: Vec<f64> = trials
                    .iter()
                    .flat_map(|t| t.methods[m].abs_errors.clone().unwrap_or_default())
                    .collect();
                let thresholds = &cfg.ecdf.as_ref().expect("ecdf configured").thresholds;
                for (threshold, fraction) in ecdf(&errs, thresholds)? {
                    report.ecdf.push(EcdfRow {
                        threshold,
                        method: name.into(),
                        fraction,
                    });
                }
            }
            let warned = trials
                .iter()
                .filter(|t| !t.methods[m].warnings.is_empty())
                .count();
            if warned > 0 {
                report.warnings.push(format!(
                    "{name} at sweep value {}: {warned} of {} trials reported rank warnings",
                    point.value, cfg.trials
                ));
            }
            let stalled = trials.iter().filter(|t| !t.methods[m].converged).count();
            if stalled > 0 {
                report.warnings.push(format!(
                    "{name} at sweep value {}: {stalled} of {} trials hit the iteration limit",
                    point.value, cfg.trials
                ));
            }
        }
    }
    Ok(report)
}

fn csv_err(e: csv::Error) -> HarnessError {
    HarnessError::Runtime(format!("writing CSV: {e}"))
}

fn io_err(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Runtime(format!("{}: {e}", path.display()))
}

fn write_metric_csv(
    path: &Path,
    rows: &[&MetricRow],
    headers: [&str; 5],
) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(headers).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep_value.to_string(),
            r.method.clone(),
            r.mean.to_string(),
            r.stderr.to_string(),
            r.trials.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Write `nmse.csv`, `ber.csv`, and when present `se.csv` and `ecdf.csv`.
pub fn write_outputs(report: &ExperimentReport, dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let collect = |m| report.rows_for(m).collect::<Vec<_>>();
    write_metric_csv(
        &dir.join("nmse.csv"),
        &collect(MetricKind::NmseDb),
        ["sweep_value", "method", "mean_db", "stderr_db", "trials"],
    )?;
    write_metric_csv(
        &dir.join("ber.csv"),
        &collect(MetricKind::Ber),
        ["sweep_value", "method", "mean", "stderr", "trials"],
    )?;
    let se = collect(MetricKind::SeBpsHz);
    if !se.is_empty() {
        write_metric_csv(
            &dir.join("se.csv"),
            &se,
            ["sweep_value", "method", "mean", "stderr", "trials"],
        )?;
    }
    if !report.ecdf.is_empty() {
        let path = dir.join("ecdf.csv");
        let mut w = csv::Writer::from_path(&path).map_err(csv_err)?;
        w.write_record(["threshold", "method", "fraction"]).map_err(csv_err)?;
        for r in &report.ecdf {
            w.write_record([r.threshold.to_string(), r.method.clone(), r.fraction.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundRow {
    pub sweep_value: f64,
    pub n_bs: usize,
    pub k_u: usize,
    pub ml_nmse_db: f64,
    pub ccrlb_nmse_db: f64,
    pub gain_db: f64,
}

/// Analytic ML error and the constrained bound at every sweep point, both
/// as NMSE for the first channel draw of that point.
pub fn bound_report(cfg: &ScenarioConfig) -> Result<Vec<BoundRow>, HarnessError> {
    let res = cfg.validate()?;
    let s = &cfg.system;
    cfg.sweep_points()
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let setup = setup_trial(cfg, &res, point, p, 0)?;
            let energy = fro_norm_sqr(&setup.h);
            let sigma2 = point.sigma2();
            let inputs = CrlbInputs::from_channel(&setup.h, s.p_p, point.tau_p, sigma2)?;
            let bound = ccrlb(&inputs)?.total_mse_bound;
            Ok(BoundRow {
                sweep_value: point.value,
                n_bs: point.n_bs,
                k_u: s.k_u,
                ml_nmse_db: to_db(ml_mse(sigma2, s.k_u, point.n_bs, s.p_p, point.tau_p) / energy),
                ccrlb_nmse_db: to_db(bound / energy),
                gain_db: wd_sb_gain_db(point.n_bs, s.k_u),
            })
        })
        .collect()
}

pub fn write_bound_csv(rows: &[BoundRow], path: &Path) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["sweep_value", "n_bs", "k_u", "ml_nmse_db", "ccrlb_nmse_db", "gain_db"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.sweep_value.to_string(),
            r.n_bs.to_string(),
            r.k_u.to_string(),
            r.ml_nmse_db.to_string(),
            r.ccrlb_nmse_db.to_string(),
            r.gain_db.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
