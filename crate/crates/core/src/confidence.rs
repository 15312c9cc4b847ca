//! Learned confidence estimator.
//!
//! For every registered predictor the network emits a quadratic
//! `s(t) = a t² + b t + c₀` that estimates the L2 error of that predictor at
//! horizon `t`. It shares the children/predictor stack with the variational
//! model; only the output width and the loss differ.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::basis::TrajectorySegment;
use crate::error::{Error, Result};
use crate::gmm::mean_trajectory;
use crate::net::TrainConfig;
use crate::predictors::{
    odometry_predict, Architecture, Child, ChildStack, FeatureNormalizer, InputFeatures, Prediction, PredictorId,
    TrainReport, VariationalModel,
};
use crate::simgen::Sample;

/// Horizons (s) at which realized scores become training targets.
pub const SCORE_HORIZONS_S: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
/// Longest horizon a confidence polynomial is evaluated at.
pub const MAX_HORIZON_S: f64 = 3.0;

/// Quadratic error estimate in meters over horizon seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolyCoeffs {
    pub a: f64,
    pub b: f64,
    pub c0: f64,
}

impl PolyCoeffs {
    pub const fn new(a: f64, b: f64, c0: f64) -> Self {
        Self { a, b, c0 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.c0]
    }

    /// Unclamped polynomial value.
    pub fn value(&self, t: f64) -> f64 {
        (self.a * t + self.b) * t + self.c0
    }

    /// Estimated error, never negative.
    pub fn score(&self, t: f64) -> f64 {
        self.value(t).max(0.0)
    }

    /// Least-squares quadratic through `(horizons, scores)`; exact
    /// interpolation for three distinct horizons.
    pub fn fit(horizons: &[f64], scores: &[f64]) -> Result<Self> {
        if horizons.len() != scores.len() {
            return Err(Error::LengthMismatch {
                left: horizons.len(),
                right: scores.len(),
            });
        }
        let mut ata = Matrix3::zeros();
        let mut atb = Vector3::zeros();
        for (&t, &s) in horizons.iter().zip(scores) {
            let row = Vector3::new(t * t, t, 1.0);
            ata += row * row.transpose();
            atb += row * s;
        }
        let sol = ata.lu().solve(&atb).ok_or(Error::RankDeficient { ratio: 0.0 })?;
        Ok(Self::new(sol[0], sol[1], sol[2]))
    }
}

/// One polynomial per registered predictor, in registry order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(PredictorId, PolyCoeffs)>", into = "Vec<(PredictorId, PolyCoeffs)>")]
pub struct ConfidencePolySet {
    polys: Vec<PolyCoeffs>,
}

impl ConfidencePolySet {
    /// `polys[i]` belongs to `PredictorId::REGISTRY[i]`.
    pub fn new(polys: Vec<PolyCoeffs>) -> Result<Self> {
        if polys.len() != PredictorId::REGISTRY.len() {
            return Err(Error::LengthMismatch {
                left: polys.len(),
                right: PredictorId::REGISTRY.len(),
            });
        }
        Ok(Self { polys })
    }

    pub fn get(&self, id: PredictorId) -> PolyCoeffs {
        self.polys[registry_index(id)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (PredictorId, PolyCoeffs)> + '_ {
        PredictorId::REGISTRY.iter().copied().zip(self.polys.iter().copied())
    }

    /// Same polynomials with `delta` added to every constant term.
    pub fn shifted(&self, delta: f64) -> Self {
        Self {
            polys: self.polys.iter().map(|p| PolyCoeffs::new(p.a, p.b, p.c0 + delta)).collect(),
        }
    }
}

impl TryFrom<Vec<(PredictorId, PolyCoeffs)>> for ConfidencePolySet {
    type Error = Error;

    fn try_from(entries: Vec<(PredictorId, PolyCoeffs)>) -> Result<Self> {
        let mut polys = Vec::with_capacity(PredictorId::REGISTRY.len());
        for id in PredictorId::REGISTRY {
            let p = entries
                .iter()
                .find(|(e, _)| *e == id)
                .ok_or_else(|| Error::UnknownPredictor(id.to_string()))?;
            polys.push(p.1);
        }
        Self::new(polys)
    }
}

impl From<ConfidencePolySet> for Vec<(PredictorId, PolyCoeffs)> {
    fn from(p: ConfidencePolySet) -> Self {
        p.iter().collect()
    }
}

pub(crate) fn registry_index(id: PredictorId) -> usize {
    PredictorId::REGISTRY.iter().position(|&r| r == id).unwrap()
}

/// `max(0, a t² + b t + c₀)` for `predictor` at `0 < t ≤ 3 s`.
pub fn evaluate_confidence(polys: &ConfidencePolySet, predictor: PredictorId, t: f64) -> Result<f64> {
    if !(t > 0.0 && t <= MAX_HORIZON_S + 1e-9) {
        return Err(Error::HorizonOutOfRange {
            horizon: t,
            start: 0.0,
            end: MAX_HORIZON_S,
        });
    }
    Ok(polys.get(predictor).score(t))
}

/// L2 distance between a prediction and the groundtruth at each horizon. A
/// GMM is reduced to its dominant component's mean trajectory.
pub fn realized_scores(prediction: &Prediction, groundtruth: &TrajectorySegment, horizons: &[f64]) -> Result<Vec<f64>> {
    let point = match prediction {
        Prediction::Gmm(g) => mean_trajectory(g, g.dominant(), horizons)?,
        Prediction::Trajectory(t) => t.clone(),
    };
    horizons
        .iter()
        .map(|&h| {
            let (gx, gy) = groundtruth.position_at(h)?;
            let (px, py) = point.position_at(h)?;
            Ok((px - gx).hypot(py - gy))
        })
        .collect()
}

/// Realized scores of every registered predictor on a set of samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub horizons: Vec<f64>,
    /// `scores[sample][predictor][horizon]`, predictors in registry order.
    pub scores: Vec<Vec<Vec<f64>>>,
}

impl ScoreTable {
    pub fn compute(samples: &[Sample], variational: &VariationalModel, horizons: &[f64]) -> Result<Self> {
        let xs: Vec<&InputFeatures> = samples.iter().map(|s| &s.features).collect();
        let gmms = variational.predict_batch(&xs)?;
        let scores = samples
            .iter()
            .zip(gmms)
            .map(|(s, g)| {
                PredictorId::REGISTRY
                    .iter()
                    .map(|id| {
                        let pred = match id {
                            PredictorId::Variational => Prediction::Gmm(g.clone()),
                            PredictorId::Odometry => Prediction::Trajectory(odometry_predict(&s.features, horizons)),
                        };
                        realized_scores(&pred, &s.groundtruth_future, horizons)
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            horizons: horizons.to_vec(),
            scores,
        })
    }
}

/// Affine link from raw outputs to polynomial coefficients, fitted so the
/// network starts at the average per-sample polynomial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyHead {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl PolyHead {
    fn fitted(table: &ScoreTable) -> Result<Self> {
        let width = 3 * PredictorId::REGISTRY.len();
        let n = table.scores.len() as f64;
        let mut rows = Vec::with_capacity(table.scores.len());
        for per_pred in &table.scores {
            let mut r = Vec::with_capacity(width);
            for s in per_pred {
                r.extend(PolyCoeffs::fit(&table.horizons, s)?.to_array());
            }
            rows.push(r);
        }
        let mut offset = vec![0.0; width];
        for r in &rows {
            for (o, v) in offset.iter_mut().zip(r) {
                *o += v / n;
            }
        }
        let mut scale = vec![0.0; width];
        for r in &rows {
            for ((s, v), o) in scale.iter_mut().zip(r).zip(&offset) {
                *s += (v - o).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if s.sqrt() > 1e-6 { s.sqrt() } else { 1.0 };
        }
        Ok(Self { offset, scale })
    }

    fn coeffs(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().zip(&self.offset).zip(&self.scale).map(|((r, o), s)| o + s * r).collect()
    }

    fn polys(&self, raw: &[f64]) -> Result<ConfidencePolySet> {
        let c = self.coeffs(raw);
        ConfidencePolySet::new(c.chunks(3).map(|p| PolyCoeffs::new(p[0], p[1], p[2])).collect())
    }
}

/// Mean over predictors and horizons of the squared gap between the
/// unclamped polynomial and the realized score, with its gradient.
pub fn poly_loss_and_grad(coeffs: &[f64], horizons: &[f64], scores: &[Vec<f64>]) -> (f64, Vec<f64>) {
    let count = (scores.len() * horizons.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; coeffs.len()];
    for (p, s) in scores.iter().enumerate() {
        let poly = PolyCoeffs::new(coeffs[3 * p], coeffs[3 * p + 1], coeffs[3 * p + 2]);
        for (&t, &target) in horizons.iter().zip(s) {
            let r = poly.value(t) - target;
            loss += r * r / count;
            let g = 2.0 * r / count;
            grad[3 * p] += g * t * t;
            grad[3 * p + 1] += g * t;
            grad[3 * p + 2] += g;
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceOptions {
    pub children: Vec<Child>,
    pub arch: Architecture,
}

impl Default for ConfidenceOptions {
    fn default() -> Self {
        Self {
            children: Child::ALL.to_vec(),
            arch: Architecture::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceModel {
    pub stack: ChildStack,
    pub head: PolyHead,
    /// Horizons the model was trained on.
    pub horizons: Vec<f64>,
    /// Predictor order of the output triples.
    pub registry: Vec<PredictorId>,
}

impl ConfidenceModel {
    pub fn predict(&self, x: &InputFeatures) -> Result<ConfidencePolySet> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    pub fn predict_batch(&self, xs: &[&InputFeatures]) -> Result<Vec<ConfidencePolySet>> {
        if self.registry != PredictorId::REGISTRY {
            return Err(Error::UnknownPredictor(format!(
                "model trained for registry {:?}",
                self.registry
            )));
        }
        let raw = self.stack.predict_raw(xs)?;
        raw.row_iter()
            .map(|r| self.head.polys(&r.iter().copied().collect::<Vec<_>>()))
            .collect()
    }

    /// Mean eval-mode loss against a score table.
    pub fn mean_loss(&self, xs: &[&InputFeatures], table: &ScoreTable) -> Result<f64> {
        if xs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let polys = self.predict_batch(xs)?;
        let total: f64 = polys
            .iter()
            .zip(&table.scores)
            .map(|(p, s)| {
                let c: Vec<f64> = p.iter().flat_map(|(_, c)| c.to_array()).collect();
                poly_loss_and_grad(&c, &table.horizons, s).0
            })
            .sum();
        Ok(total / xs.len() as f64)
    }
}

/// Fits the confidence network to realized scores (one row per input).
pub fn train_confidence(
    xs: &[&InputFeatures],
    table: &ScoreTable,
    cfg: &TrainConfig,
    opts: &ConfidenceOptions,
) -> Result<(ConfidenceModel, TrainReport)> {
    if xs.is_empty() || table.scores.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if xs.len() != table.scores.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: table.scores.len(),
        });
    }
    let p = PredictorId::REGISTRY.len();
    if table
        .scores
        .iter()
        .any(|s| s.len() != p || s.iter().any(|h| h.len() != table.horizons.len()))
    {
        return Err(Error::ShapeMismatch {
            expected: format!("{p} predictors × {} horizons", table.horizons.len()),
            got: "ragged score table".into(),
        });
    }
    let head = PolyHead::fitted(table)?;
    let normalizer = FeatureNormalizer::fit(xs, &opts.children)?;
    let stack = ChildStack::new(&opts.children, opts.arch.clone(), normalizer, 3 * p, cfg.seed)?;
    let mut model = ConfidenceModel {
        stack,
        head,
        horizons: table.horizons.clone(),
        registry: PredictorId::REGISTRY.to_vec(),
    };
    let head = model.head.clone();
    let report = model.stack.train(xs, cfg, |idx, raw| {
        let mut grad = DMatrix::zeros(raw.nrows(), raw.ncols());
        let mut sum = 0.0;
        for (row, &i) in idx.iter().enumerate() {
            let r: Vec<f64> = raw.row(row).iter().copied().collect();
            let (loss, g) = poly_loss_and_grad(&head.coeffs(&r), &table.horizons, &table.scores[i]);
            sum += loss;
            for (j, v) in g.into_iter().enumerate() {
                grad[(row, j)] = v * head.scale[j];
            }
        }
        Ok((sum, grad))
    })?;
    Ok((model, report))
}
