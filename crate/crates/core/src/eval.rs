//! Evaluation metrics and reports.
//!
//! Per-sample quantities (realized errors on the sweep grid, estimated
//! polynomials, NLL, RMSE) are computed once by [`evaluate_samples`]; every
//! aggregate metric is a fold over those records in sample order.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::basis::{uniform_grid, TrajectorySegment, GRID_STEP_S};
use crate::confidence::{registry_index, realized_scores, ConfidencePolySet};
use crate::error::{Error, Result};
use crate::gmm::{mean_trajectory, nll};
use crate::mixture::{arbitrate, arbitrate_at, oracle_choice, MixtureDecision, MixtureModels, ThresholdConfig};
use crate::predictors::{InputFeatures, Prediction, PredictorId, VariationalModel};
use crate::seed::stage_rng;
use crate::simgen::Sample;

pub const REPORT_VERSION: u32 = 1;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

/// Horizons of the temporal sweep: 0.1, 0.2, …, 3.0 s.
pub fn sweep_horizons() -> Vec<f64> {
    uniform_grid(GRID_STEP_S, 3.0, GRID_STEP_S)
}

fn same_grid(a: &TrajectorySegment, b: &TrajectorySegment) -> Result<()> {
    if a.len() != b.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(Error::GridMismatch);
    }
    Ok(())
}

/// Root mean squared Euclidean distance over a common grid.
pub fn rmse(prediction: &TrajectorySegment, groundtruth: &TrajectorySegment) -> Result<f64> {
    same_grid(prediction, groundtruth)?;
    let n = prediction.len() as f64;
    let sq: f64 = (0..prediction.len())
        .map(|i| (prediction.xs[i] - groundtruth.xs[i]).powi(2) + (prediction.ys[i] - groundtruth.ys[i]).powi(2))
        .sum();
    Ok((sq / n).sqrt())
}

/// Euclidean distance at horizon `t`.
pub fn l2_at(prediction: &TrajectorySegment, groundtruth: &TrajectorySegment, t: f64) -> Result<f64> {
    let (px, py) = prediction.position_at(t)?;
    let (gx, gy) = groundtruth.position_at(t)?;
    Ok((px - gx).hypot(py - gy))
}

/// Fraction of errors strictly above `threshold`.
pub fn hard_case_fraction(errors: &[f64], threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyList);
    }
    if !(threshold > 0.0) {
        return Err(Error::InvalidConfig(format!("hard-case threshold must be positive, got {threshold}")));
    }
    Ok(errors.iter().filter(|&&e| e > threshold).count() as f64 / errors.len() as f64)
}

fn check_single_child_difference(with: &VariationalModel, without: &VariationalModel) -> Result<()> {
    let a: BTreeSet<_> = with.children().iter().copied().collect();
    let b: BTreeSet<_> = without.children().iter().copied().collect();
    let diff: Vec<_> = a.symmetric_difference(&b).collect();
    if diff.len() > 1 {
        return Err(Error::MismatchedChildSets(format!("{diff:?}")));
    }
    Ok(())
}

/// Per-sample `nll_without − nll_with` on the groundtruth coefficients.
pub fn information_gain_samples(
    data: &[Sample],
    with: &VariationalModel,
    without: &VariationalModel,
) -> Result<Vec<f64>> {
    check_single_child_difference(with, without)?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs: Vec<&InputFeatures> = data.iter().map(|s| &s.features).collect();
    let gw = with.predict_batch(&xs)?;
    let go = without.predict_batch(&xs)?;
    data.iter()
        .zip(gw.iter().zip(&go))
        .map(|(s, (a, b))| {
            let c = s.groundtruth_coeffs.flatten();
            Ok(nll(b, &c)? - nll(a, &c)?)
        })
        .collect()
}

/// Mean reduction in NLL (nats) from the child present only in `with`.
pub fn information_gain(data: &[Sample], with: &VariationalModel, without: &VariationalModel) -> Result<f64> {
    Ok(mean(&information_gain_samples(data, with, without)?))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_aligned(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::LengthMismatch { left: a, right: b });
    }
    if a == 0 {
        return Err(Error::EmptyList);
    }
    Ok(())
}

/// Fraction of samples where the chosen predictor is the oracle's choice.
pub fn arbitration_accuracy(decisions: &[MixtureDecision], realized: &[Vec<(PredictorId, f64)>]) -> Result<f64> {
    Ok(mean(&arbitration_hits(decisions, realized)?))
}

fn arbitration_hits(decisions: &[MixtureDecision], realized: &[Vec<(PredictorId, f64)>]) -> Result<Vec<f64>> {
    check_aligned(decisions.len(), realized.len())?;
    Ok(decisions
        .iter()
        .zip(realized)
        .map(|(d, r)| f64::from(u8::from(d.chosen == oracle_choice(r))))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    /// Uncertain samples whose chosen estimate stays at or under the threshold.
    pub underestimated_fraction: f64,
    /// Certain samples whose chosen estimate exceeds the threshold.
    pub certain_overshoot_fraction: f64,
    pub uncertain_count: usize,
    pub certain_count: usize,
}

impl UncertaintyStats {
    pub fn uncertain_fraction(&self) -> f64 {
        self.uncertain_count as f64 / (self.uncertain_count + self.certain_count) as f64
    }
}

/// A sample is uncertain when every realized error exceeds the threshold.
pub fn uncertainty_detection(
    decisions: &[MixtureDecision],
    realized: &[Vec<(PredictorId, f64)>],
    cfg: &ThresholdConfig,
) -> Result<UncertaintyStats> {
    check_aligned(decisions.len(), realized.len())?;
    let thr = cfg.uncertain_threshold_m;
    let (mut unc, mut under, mut cert, mut over) = (0usize, 0usize, 0usize, 0usize);
    for (d, r) in decisions.iter().zip(realized) {
        let est = d.estimate(d.chosen);
        if r.iter().all(|s| s.1 > thr) {
            unc += 1;
            under += usize::from(est <= thr);
        } else {
            cert += 1;
            over += usize::from(est > thr);
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(UncertaintyStats {
        underestimated_fraction: frac(under, unc),
        certain_overshoot_fraction: frac(over, cert),
        uncertain_count: unc,
        certain_count: cert,
    })
}

/// Point estimate with a percentile bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// 95% percentile bootstrap of the mean.
pub fn bootstrap_mean(values: &[f64], resamples: usize, seed: u64) -> Result<Interval> {
    if values.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = values.len();
    let mut rng = stage_rng(seed, "bootstrap");
    let mut means: Vec<f64> = (0..resamples.max(1))
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let at = |q: f64| means[((q * (means.len() - 1) as f64).round() as usize).min(means.len() - 1)];
    Ok(Interval {
        mean: mean(values),
        lo: at(0.025),
        hi: at(0.975),
    })
}

/// Everything the metrics need from one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleEval {
    pub id: u64,
    pub horizons: Vec<f64>,
    /// `realized[predictor][h]`, registry order.
    pub realized: Vec<Vec<f64>>,
    pub polys: ConfidencePolySet,
    /// RMSE over the future grid, per predictor.
    pub rmse: Vec<f64>,
    pub nll: Vec<f64>,
}

impl SampleEval {
    fn horizon_index(&self, t: f64) -> Result<usize> {
        self.horizons
            .iter()
            .position(|h| (h - t).abs() < 1e-9)
            .ok_or(Error::HorizonOutOfRange {
                horizon: t,
                start: self.horizons[0],
                end: *self.horizons.last().unwrap(),
            })
    }

    pub fn realized_at(&self, t: f64) -> Result<Vec<(PredictorId, f64)>> {
        let h = self.horizon_index(t)?;
        Ok(PredictorId::REGISTRY
            .iter()
            .map(|&id| (id, self.realized[registry_index(id)][h]))
            .collect())
    }

    pub fn max_error(&self, id: PredictorId) -> f64 {
        self.realized[registry_index(id)].iter().copied().fold(0.0, f64::max)
    }
}

/// Per-sample evaluation on the sweep grid.
pub fn evaluate_samples(models: &MixtureModels, samples: &[Sample]) -> Result<Vec<SampleEval>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let horizons = sweep_horizons();
    let basis = models.variational.basis();
    let full = basis.future_grid();
    let xs: Vec<&InputFeatures> = samples.iter().map(|s| &s.features).collect();
    let gmms = models.variational.predict_batch(&xs)?;
    let polys = models.confidence.predict_batch(&xs)?;
    samples
        .iter()
        .zip(gmms.into_iter().zip(polys))
        .map(|(s, (g, p))| {
            let gt = &s.groundtruth_future;
            let c = s.groundtruth_coeffs.flatten();
            let var_traj = mean_trajectory(&g, g.dominant(), &full)?;
            let odo_traj = models.odometry.predict(&s.features, &full);
            let odo_gmm = models.odometry.as_gmm(&s.features, &basis)?;
            let mut realized = Vec::new();
            let mut rm = Vec::new();
            let mut nl = Vec::new();
            for id in PredictorId::REGISTRY {
                let (traj, gmm) = match id {
                    PredictorId::Variational => (&var_traj, &g),
                    PredictorId::Odometry => (&odo_traj, &odo_gmm),
                };
                realized.push(realized_scores(&Prediction::Trajectory(traj.clone()), gt, &horizons)?);
                rm.push(rmse(traj, gt)?);
                nl.push(nll(gmm, &c)?);
            }
            Ok(SampleEval {
                id: s.id,
                horizons: horizons.clone(),
                realized,
                polys: p,
                rmse: rm,
                nll: nl,
            })
        })
        .collect()
}

/// Point and likelihood metrics of a single variational model (ablation rows).
pub fn variational_metrics(
    model: &VariationalModel,
    samples: &[Sample],
    cfg: &ThresholdConfig,
    seed: u64,
) -> Result<PredictorMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let horizons = sweep_horizons();
    let full = model.basis().future_grid();
    let xs: Vec<&InputFeatures> = samples.iter().map(|s| &s.features).collect();
    let gmms = model.predict_batch(&xs)?;
    let (mut rm, mut l2, mut maxe, mut nl) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (s, g) in samples.iter().zip(&gmms) {
        let traj = mean_trajectory(g, g.dominant(), &full)?;
        let errs = realized_scores(&Prediction::Trajectory(traj.clone()), &s.groundtruth_future, &horizons)?;
        rm.push(rmse(&traj, &s.groundtruth_future)?);
        l2.push(l2_at(&traj, &s.groundtruth_future, cfg.decision_horizon_s)?);
        maxe.push(errs.iter().copied().fold(0.0, f64::max));
        nl.push(nll(g, &s.groundtruth_coeffs.flatten())?);
    }
    let boot = |name: &str, v: &[f64]| bootstrap_mean(v, BOOTSTRAP_RESAMPLES, crate::seed::stage_seed(seed, name));
    Ok(PredictorMetrics {
        predictor: PredictorId::Variational,
        rmse_m: boot("rmse", &rm)?,
        l2_at_decision_m: boot("l2", &l2)?,
        hard_case_fraction: hard_case_fraction(&maxe, cfg.hard_threshold_m)?,
        hard_case_fraction_at_decision: hard_case_fraction(&l2, cfg.hard_threshold_m)?,
        nll_nats: boot("nll", &nl)?,
    })
}

/// Mean L2 curves and uncertainty fractions per horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCurves {
    pub horizons_s: Vec<f64>,
    pub variational_l2_m: Vec<f64>,
    pub odometry_l2_m: Vec<f64>,
    pub mixture_l2_m: Vec<f64>,
    pub oracle_l2_m: Vec<f64>,
    pub uncertain_fraction: Vec<f64>,
    pub underestimated_fraction: Vec<f64>,
}

impl SweepCurves {
    pub fn candidate(&self, id: PredictorId) -> &[f64] {
        match id {
            PredictorId::Variational => &self.variational_l2_m,
            PredictorId::Odometry => &self.odometry_l2_m,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "horizon_s,variational_l2_m,odometry_l2_m,mixture_l2_m,oracle_l2_m,uncertain_fraction,underestimated_fraction\n",
        );
        for i in 0..self.horizons_s.len() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.horizons_s[i],
                self.variational_l2_m[i],
                self.odometry_l2_m[i],
                self.mixture_l2_m[i],
                self.oracle_l2_m[i],
                self.uncertain_fraction[i],
                self.underestimated_fraction[i]
            );
        }
        out
    }
}

/// Per-horizon arbitration: the mixture picks by the polynomials evaluated at
/// each horizon rather than only at the decision horizon.
pub fn temporal_sweep(evals: &[SampleEval], cfg: &ThresholdConfig) -> Result<SweepCurves> {
    let first = evals.first().ok_or(Error::EmptyList)?;
    let horizons = first.horizons.clone();
    let n = evals.len() as f64;
    let h_len = horizons.len();
    let mut curves = SweepCurves {
        horizons_s: horizons.clone(),
        variational_l2_m: vec![0.0; h_len],
        odometry_l2_m: vec![0.0; h_len],
        mixture_l2_m: vec![0.0; h_len],
        oracle_l2_m: vec![0.0; h_len],
        uncertain_fraction: vec![0.0; h_len],
        underestimated_fraction: vec![0.0; h_len],
    };
    for (h, &t) in horizons.iter().enumerate() {
        let mut decisions = Vec::with_capacity(evals.len());
        let mut realized = Vec::with_capacity(evals.len());
        for e in evals {
            if e.horizons.len() != h_len {
                return Err(Error::GridMismatch);
            }
            let r: Vec<(PredictorId, f64)> = PredictorId::REGISTRY
                .iter()
                .map(|&id| (id, e.realized[registry_index(id)][h]))
                .collect();
            let d = arbitrate_at(&e.polys, cfg, t);
            curves.variational_l2_m[h] += r[registry_index(PredictorId::Variational)].1 / n;
            curves.odometry_l2_m[h] += r[registry_index(PredictorId::Odometry)].1 / n;
            curves.mixture_l2_m[h] += r[registry_index(d.chosen)].1 / n;
            curves.oracle_l2_m[h] += r[registry_index(oracle_choice(&r))].1 / n;
            decisions.push(d);
            realized.push(r);
        }
        let u = uncertainty_detection(&decisions, &realized, cfg)?;
        curves.uncertain_fraction[h] = u.uncertain_fraction();
        curves.underestimated_fraction[h] = u.underestimated_fraction;
    }
    Ok(curves)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetrics {
    pub predictor: PredictorId,
    pub rmse_m: Interval,
    pub l2_at_decision_m: Interval,
    /// Maximum L2 over the horizon above the hard threshold.
    pub hard_case_fraction: f64,
    /// L2 at the decision horizon above the hard threshold.
    pub hard_case_fraction_at_decision: f64,
    pub nll_nats: Interval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureMetrics {
    pub l2_at_decision_m: Interval,
    pub oracle_l2_at_decision_m: Interval,
    pub regret_m: f64,
    pub arbitration_accuracy: Interval,
    pub underestimated_fraction: f64,
    pub certain_overshoot_fraction: f64,
    pub uncertain_fraction: f64,
    pub warning_fraction: f64,
    pub hard_case_fraction_at_decision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub samples: usize,
    pub thresholds: ThresholdConfig,
    pub predictors: Vec<PredictorMetrics>,
    pub mixture: MixtureMetrics,
    pub curves: SweepCurves,
}

impl MetricReport {
    pub fn predictor(&self, id: PredictorId) -> &PredictorMetrics {
        &self.predictors[registry_index(id)]
    }
}

/// One line of the per-sample decision log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub id: u64,
    pub chosen: PredictorId,
    pub oracle: PredictorId,
    pub estimated_scores_m: Vec<(PredictorId, f64)>,
    pub realized_scores_m: Vec<(PredictorId, f64)>,
    pub warning: bool,
    pub decision_horizon_s: f64,
}

/// Decisions at the decision horizon with the matching realized errors.
pub fn decisions(evals: &[SampleEval], cfg: &ThresholdConfig) -> Result<(Vec<MixtureDecision>, Vec<Vec<(PredictorId, f64)>>)> {
    let d = evals.iter().map(|e| arbitrate(&e.polys, cfg)).collect();
    let r = evals
        .iter()
        .map(|e| e.realized_at(cfg.decision_horizon_s))
        .collect::<Result<Vec<_>>>()?;
    Ok((d, r))
}

/// Aggregates per-sample evaluations into a report and a decision log.
pub fn build_report(evals: &[SampleEval], cfg: &ThresholdConfig, seed: u64) -> Result<(MetricReport, Vec<DecisionRecord>)> {
    cfg.validate()?;
    let (decs, realized) = decisions(evals, cfg)?;
    let boot = |name: &str, v: &[f64]| bootstrap_mean(v, BOOTSTRAP_RESAMPLES, crate::seed::stage_seed(seed, name));
    let mut predictors = Vec::new();
    for id in PredictorId::REGISTRY {
        let i = registry_index(id);
        let rm: Vec<f64> = evals.iter().map(|e| e.rmse[i]).collect();
        let l2: Vec<f64> = realized.iter().map(|r| r[i].1).collect();
        let maxe: Vec<f64> = evals.iter().map(|e| e.max_error(id)).collect();
        let nl: Vec<f64> = evals.iter().map(|e| e.nll[i]).collect();
        predictors.push(PredictorMetrics {
            predictor: id,
            rmse_m: boot(&format!("{id}/rmse"), &rm)?,
            l2_at_decision_m: boot(&format!("{id}/l2"), &l2)?,
            hard_case_fraction: hard_case_fraction(&maxe, cfg.hard_threshold_m)?,
            hard_case_fraction_at_decision: hard_case_fraction(&l2, cfg.hard_threshold_m)?,
            nll_nats: boot(&format!("{id}/nll"), &nl)?,
        });
    }
    let mix: Vec<f64> = decs.iter().zip(&realized).map(|(d, r)| r[registry_index(d.chosen)].1).collect();
    let orc: Vec<f64> = realized.iter().map(|r| r[registry_index(oracle_choice(r))].1).collect();
    let hits = arbitration_hits(&decs, &realized)?;
    let unc = uncertainty_detection(&decs, &realized, cfg)?;
    let mixture = MixtureMetrics {
        l2_at_decision_m: boot("mixture/l2", &mix)?,
        oracle_l2_at_decision_m: boot("oracle/l2", &orc)?,
        regret_m: crate::mixture::regret(&mix, &orc)?,
        arbitration_accuracy: boot("mixture/accuracy", &hits)?,
        underestimated_fraction: unc.underestimated_fraction,
        certain_overshoot_fraction: unc.certain_overshoot_fraction,
        uncertain_fraction: unc.uncertain_fraction(),
        warning_fraction: decs.iter().filter(|d| d.warning).count() as f64 / decs.len() as f64,
        hard_case_fraction_at_decision: hard_case_fraction(&mix, cfg.hard_threshold_m)?,
    };
    let log = evals
        .iter()
        .zip(decs.iter().zip(&realized))
        .map(|(e, (d, r))| DecisionRecord {
            id: e.id,
            chosen: d.chosen,
            oracle: oracle_choice(r),
            estimated_scores_m: d.estimated_scores.clone(),
            realized_scores_m: r.clone(),
            warning: d.warning,
            decision_horizon_s: d.decision_horizon_s,
        })
        .collect();
    let report = MetricReport {
        version: REPORT_VERSION,
        samples: evals.len(),
        thresholds: *cfg,
        predictors,
        mixture,
        curves: temporal_sweep(evals, cfg)?,
    };
    Ok((report, log))
}

/// Writes `report.json`, `curves.csv` and `decisions.jsonl` into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport, log: &[DecisionRecord]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("report.json", serde_json::to_string_pretty(report)? + "\n")?;
    write("curves.csv", report.curves.to_csv())?;
    let mut lines = String::new();
    for r in log {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    write("decisions.jsonl", lines)
}
