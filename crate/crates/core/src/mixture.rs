//! Mixture-of-experts arbitration.
//!
//! The arbitrator evaluates every predictor's confidence polynomial at one
//! decision horizon and picks the predictor with the lowest estimated error.
//! Ties go to the odometry expert. A warning is raised when no candidate is
//! estimated to stay under the uncertain threshold.

use serde::{Deserialize, Serialize};

use crate::confidence::{ConfidenceModel, ConfidencePolySet};
use crate::error::{Error, Result};
use crate::gmm::GmmParams;
use crate::predictors::{InputFeatures, OdometryExpert, PredictorId, VariationalModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ThresholdConfig {
    pub uncertain_threshold_m: f64,
    pub hard_threshold_m: f64,
    pub decision_horizon_s: f64,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            uncertain_threshold_m: 2.54,
            hard_threshold_m: 5.0,
            decision_horizon_s: 3.0,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.uncertain_threshold_m > 0.0
            && self.hard_threshold_m > 0.0
            && self.decision_horizon_s > 0.0
            && self.decision_horizon_s <= crate::confidence::MAX_HORIZON_S;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid thresholds {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDecision {
    pub chosen: PredictorId,
    /// Estimated error (m) of every predictor at the decision horizon.
    pub estimated_scores: Vec<(PredictorId, f64)>,
    pub warning: bool,
    pub decision_horizon_s: f64,
}

impl MixtureDecision {
    pub fn estimate(&self, id: PredictorId) -> f64 {
        self.estimated_scores.iter().find(|(p, _)| *p == id).map(|e| e.1).unwrap_or(f64::INFINITY)
    }
}

/// Predictor with the smallest score; ties prefer odometry, then registry order.
pub fn select_min(scores: &[(PredictorId, f64)]) -> PredictorId {
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let tied: Vec<PredictorId> = scores.iter().filter(|s| s.1 == best).map(|s| s.0).collect();
    if tied.contains(&PredictorId::Odometry) {
        PredictorId::Odometry
    } else {
        tied.first().copied().unwrap_or(PredictorId::Odometry)
    }
}

/// Choice and warning from estimated scores at `cfg.decision_horizon_s`.
pub fn arbitrate(polys: &ConfidencePolySet, cfg: &ThresholdConfig) -> MixtureDecision {
    arbitrate_at(polys, cfg, cfg.decision_horizon_s)
}

/// As [`arbitrate`] at an arbitrary horizon.
pub fn arbitrate_at(polys: &ConfidencePolySet, cfg: &ThresholdConfig, horizon_s: f64) -> MixtureDecision {
    let estimated_scores: Vec<(PredictorId, f64)> = polys.iter().map(|(id, p)| (id, p.score(horizon_s))).collect();
    let warning = estimated_scores.iter().all(|s| s.1 > cfg.uncertain_threshold_m);
    MixtureDecision {
        chosen: select_min(&estimated_scores),
        estimated_scores,
        warning,
        decision_horizon_s: horizon_s,
    }
}

/// The better predictor given realized errors.
pub fn oracle_choice(realized: &[(PredictorId, f64)]) -> PredictorId {
    select_min(realized)
}

/// `mean(mixture) − mean(oracle)`.
pub fn regret(mixture: &[f64], oracle: &[f64]) -> Result<f64> {
    if mixture.len() != oracle.len() {
        return Err(Error::LengthMismatch {
            left: mixture.len(),
            right: oracle.len(),
        });
    }
    if mixture.is_empty() {
        return Err(Error::EmptyList);
    }
    let n = mixture.len() as f64;
    Ok(mixture.iter().sum::<f64>() / n - oracle.iter().sum::<f64>() / n)
}

/// Everything the mixture predictor needs at runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureModels {
    pub variational: VariationalModel,
    pub odometry: OdometryExpert,
    pub confidence: ConfidenceModel,
}

/// Runs the confidence model, arbitrates and returns the chosen output.
pub fn mixture_predict(
    models: &MixtureModels,
    x: &InputFeatures,
    cfg: &ThresholdConfig,
) -> Result<(GmmParams, MixtureDecision)> {
    let decision = arbitrate(&models.confidence.predict(x)?, cfg);
    let out = match decision.chosen {
        PredictorId::Variational => models.variational.predict(x)?,
        PredictorId::Odometry => models.odometry.as_gmm(x, &models.variational.basis())?,
    };
    Ok((out, decision))
}
