//! Diagonal Gaussian mixtures over flattened trajectory coefficients.
//!
//! A component's log probability is
//! `LP_i(c) = ½ Σ_d [ −log(2π σ_d²) − (c_d − μ_d)² / σ_d² ]` and the mixture
//! negative log-likelihood `−log Σ_i w_i exp LP_i(c)` is evaluated with the
//! log-sum-exp trick.
//!
//! [`GmmHead`] maps unconstrained network outputs to valid parameters:
//! softmax weights, affine means and exponential (floored) standard
//! deviations. The affine scale per coefficient is the spread of the
//! training targets, and each component's offset starts at a k-means centroid
//! of those targets, so the network works on unit-scale outputs, components
//! begin apart, and the mixture itself lives in real coefficient units.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::basis::{reconstruct, BasisSpec, CoeffVector, TrajectorySegment};
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on every standard deviation, in coefficient units.
pub const STD_FLOOR: f64 = 1e-3;

/// Raw log-std values are clipped to this magnitude before `exp`.
const LOG_STD_CLIP: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Vec<f64>,
    /// `K` rows of flattened `cx ‖ cy` means.
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<Vec<f64>>,
    pub basis: BasisSpec,
}

impl GmmParams {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        stds: Vec<Vec<f64>>,
        basis: BasisSpec,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || stds.len() != k {
            return Err(Error::ShapeMismatch {
                expected: format!("{k} components"),
                got: format!("{} means / {} stds", means.len(), stds.len()),
            });
        }
        let dim = basis.flat_dim();
        if means.iter().chain(&stds).any(|row| row.len() != dim) {
            return Err(Error::ShapeMismatch {
                expected: format!("rows of length {dim}"),
                got: "ragged component rows".into(),
            });
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "mixture weights must lie on the simplex, got {weights:?}"
            )));
        }
        if let Some(&s) = stds.iter().flatten().find(|&&s| !(s > 0.0)) {
            return Err(Error::NonPositiveStd(s));
        }
        Ok(Self {
            weights,
            means,
            stds,
            basis,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.basis.flat_dim()
    }

    /// Index of the highest-weight component; the first one wins ties.
    pub fn dominant(&self) -> usize {
        self.weights
            .iter()
            .enumerate()
            .fold(0, |best, (i, &w)| if w > self.weights[best] { i } else { best })
    }

    pub fn component_coeffs(&self, component: usize) -> Result<CoeffVector> {
        let mean = self.means.get(component).ok_or(Error::IndexOutOfRange {
            index: component,
            len: self.k(),
        })?;
        CoeffVector::from_flat(mean, self.basis)
    }
}

/// `LP_i(c)` for one diagonal component.
pub fn component_log_prob(mean: &[f64], std: &[f64], c: &[f64]) -> Result<f64> {
    if mean.len() != std.len() || mean.len() != c.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} dims", mean.len()),
            got: format!("std {} / c {}", std.len(), c.len()),
        });
    }
    let mut lp = 0.0;
    for ((&m, &s), &x) in mean.iter().zip(std).zip(c) {
        if !(s > 0.0) {
            return Err(Error::NonPositiveStd(s));
        }
        let z = (x - m) / s;
        lp -= 0.5 * (LN_2PI + 2.0 * s.ln() + z * z);
    }
    Ok(lp)
}

/// `log Σ exp(v_i)`, shifted by the maximum.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Mixture negative log-likelihood of flattened coefficients `c`.
pub fn nll(params: &GmmParams, c: &[f64]) -> Result<f64> {
    let mut terms = Vec::with_capacity(params.k());
    for i in 0..params.k() {
        let lp = component_log_prob(&params.means[i], &params.stds[i], c)?;
        terms.push(params.weights[i].ln() + lp);
    }
    Ok(-log_sum_exp(&terms))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegularizerWeights {
    /// L2 penalty on `Σ w − 1`.
    pub lambda_wsum: f64,
    /// L0.5 penalty on individual weights.
    pub lambda_wsparse: f64,
    /// L2 penalty on standard deviations.
    pub lambda_std: f64,
}

impl RegularizerWeights {
    pub const ZERO: Self = Self {
        lambda_wsum: 0.0,
        lambda_wsparse: 0.0,
        lambda_std: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_wsum, self.lambda_wsparse, self.lambda_std];
        if all.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig(format!(
                "regularizer weights must be finite and non-negative: {all:?}"
            )));
        }
        Ok(())
    }
}

impl Default for RegularizerWeights {
    fn default() -> Self {
        Self {
            lambda_wsum: 1.0,
            lambda_wsparse: 0.01,
            lambda_std: 0.001,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RegularizerBreakdown {
    pub weight_sum: f64,
    pub weight_sparsity: f64,
    pub std: f64,
}

impl RegularizerBreakdown {
    pub fn total(&self) -> f64 {
        self.weight_sum + self.weight_sparsity + self.std
    }
}

/// Regularizer terms on raw weight and std values. `weights` need not be
/// normalised, which is what makes the weight-sum term meaningful.
pub fn regularizer_terms<'a>(
    weights: &[f64],
    stds: impl IntoIterator<Item = &'a f64>,
    rw: &RegularizerWeights,
) -> RegularizerBreakdown {
    let sum: f64 = weights.iter().sum();
    RegularizerBreakdown {
        weight_sum: rw.lambda_wsum * (sum - 1.0).powi(2),
        weight_sparsity: rw.lambda_wsparse * weights.iter().map(|w| w.abs().sqrt()).sum::<f64>(),
        std: rw.lambda_std * stds.into_iter().map(|s| s * s).sum::<f64>(),
    }
}

pub fn regularizer_loss(params: &GmmParams, rw: &RegularizerWeights) -> RegularizerBreakdown {
    regularizer_terms(&params.weights, params.stds.iter().flatten(), rw)
}

/// Ancestral sampling of `n` flattened coefficient vectors.
pub fn sample(params: &GmmParams, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picker = WeightedIndex::new(&params.weights)
        .map_err(|e| Error::InvalidConfig(format!("mixture weights: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let k = picker.sample(&mut rng);
            params.means[k]
                .iter()
                .zip(&params.stds[k])
                .map(|(&m, &s)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    m + s * z
                })
                .collect()
        })
        .collect())
}

/// Reconstructs the trajectory of one component's mean.
pub fn mean_trajectory(params: &GmmParams, component: usize, times: &[f64]) -> Result<TrajectorySegment> {
    Ok(reconstruct(&params.component_coeffs(component)?, times))
}

/// Deterministic k-means in scale-normalised coordinates: farthest-point
/// seeding from the target nearest the mean, then Lloyd iterations on at
/// most 2000 evenly strided targets. Empty clusters keep their centre.
fn kmeans_centroids(targets: &[Vec<f64>], scale: &[f64], k: usize, mean: &[f64]) -> Vec<Vec<f64>> {
    if targets.is_empty() {
        return vec![mean.to_vec(); k];
    }
    let stride = targets.len().div_ceil(2000);
    let pts: Vec<&Vec<f64>> = targets.iter().step_by(stride).collect();
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).zip(scale).map(|((x, y), s)| ((x - y) / s).powi(2)).sum()
    };
    let nearest = |c: &[Vec<f64>], p: &[f64]| -> (usize, f64) {
        c.iter()
            .enumerate()
            .map(|(i, ci)| (i, dist(ci, p)))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best })
    };
    let first = pts
        .iter()
        .min_by(|a, b| dist(a, mean).total_cmp(&dist(b, mean)))
        .unwrap();
    let mut centres = vec![first.to_vec()];
    while centres.len() < k {
        let far = pts
            .iter()
            .max_by(|a, b| nearest(&centres, a).1.total_cmp(&nearest(&centres, b).1))
            .unwrap();
        centres.push(far.to_vec());
    }
    for _ in 0..25 {
        let mut sums = vec![vec![0.0; mean.len()]; k];
        let mut counts = vec![0usize; k];
        for p in &pts {
            let (i, _) = nearest(&centres, p);
            counts[i] += 1;
            for (s, v) in sums[i].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for i in 0..k {
            if counts[i] > 0 {
                centres[i] = sums[i].iter().map(|s| s / counts[i] as f64).collect();
            }
        }
    }
    centres
}

/// Link from raw network outputs to [`GmmParams`].
///
/// Raw layout for `K` components and flattened dimension `D'`:
/// `[logit_1..logit_K, mean_1 (D'), …, mean_K (D'), logstd_1 (D'), …, logstd_K (D')]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmHead {
    pub k: usize,
    pub basis: BasisSpec,
    /// Affine map `μ = offset + scale · raw`, `σ = scale · exp(raw)`; the
    /// offset is per component (`K × D'`), the scale per coefficient.
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

/// Loss of one sample with its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadLoss {
    pub nll: f64,
    pub reg: RegularizerBreakdown,
}

impl HeadLoss {
    pub fn total(&self) -> f64 {
        self.nll + self.reg.total()
    }
}

impl GmmHead {
    /// Unit-scale head centred at zero.
    pub fn identity(k: usize, basis: BasisSpec) -> Self {
        Self {
            k,
            basis,
            offset: vec![0.0; k * basis.flat_dim()],
            scale: vec![1.0; basis.flat_dim()],
        }
    }

    /// Head scaled by the per-coefficient standard deviation of `targets`,
    /// with component offsets at k-means centroids of the targets.
    pub fn fitted(k: usize, basis: BasisSpec, targets: &[Vec<f64>]) -> Self {
        let dim = basis.flat_dim();
        let n = targets.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for t in targets {
            for (o, v) in mean.iter_mut().zip(t) {
                *o += v / n;
            }
        }
        let mut scale = vec![0.0; dim];
        for t in targets {
            for ((s, v), o) in scale.iter_mut().zip(t).zip(&mean) {
                *s += (v - o).powi(2) / n;
            }
        }
        for s in &mut scale {
            *s = if s.sqrt() > 1e-6 { s.sqrt() } else { 1.0 };
        }
        let centroids = kmeans_centroids(targets, &scale, k, &mean);
        Self {
            k,
            basis,
            offset: centroids.concat(),
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.basis.flat_dim()
    }

    /// Number of raw outputs, `K · (1 + 2 D')`.
    pub fn raw_len(&self) -> usize {
        self.k * (1 + 2 * self.dim())
    }

    fn check(&self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.raw_len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} raw GMM outputs", self.raw_len()),
                got: raw.len().to_string(),
            });
        }
        Ok(())
    }

    fn log_softmax(logits: &[f64]) -> Vec<f64> {
        let lse = log_sum_exp(logits);
        logits.iter().map(|a| a - lse).collect()
    }

    /// `(σ, dσ/draw / σ)`; the derivative factor is 0 where the floor or the
    /// clip is active.
    fn std_link(&self, raw: f64, d: usize) -> (f64, f64) {
        let clipped = raw.clamp(-LOG_STD_CLIP, LOG_STD_CLIP);
        let sigma = self.scale[d] * clipped.exp();
        if sigma < STD_FLOOR {
            (STD_FLOOR, 0.0)
        } else if clipped != raw {
            (sigma, 0.0)
        } else {
            (sigma, 1.0)
        }
    }

    pub fn params_from_raw(&self, raw: &[f64]) -> Result<GmmParams> {
        self.check(raw)?;
        let (k, dim) = (self.k, self.dim());
        let weights: Vec<f64> = Self::log_softmax(&raw[..k]).iter().map(|l| l.exp()).collect();
        let mean_base = k;
        let std_base = k + k * dim;
        let means = (0..k)
            .map(|i| {
                (0..dim)
                    .map(|d| self.offset[i * dim + d] + self.scale[d] * raw[mean_base + i * dim + d])
                    .collect()
            })
            .collect();
        let stds = (0..k)
            .map(|i| (0..dim).map(|d| self.std_link(raw[std_base + i * dim + d], d).0).collect())
            .collect();
        Ok(GmmParams {
            weights,
            means,
            stds,
            basis: self.basis,
        })
    }

    /// Per-sample loss `ℓ_NLL + regularizers` and its gradient with respect
    /// to the raw outputs.
    pub fn loss_and_grad(
        &self,
        raw: &[f64],
        target: &[f64],
        rw: &RegularizerWeights,
    ) -> Result<(HeadLoss, Vec<f64>)> {
        self.check(raw)?;
        if target.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} target coefficients", self.dim()),
                got: target.len().to_string(),
            });
        }
        let (k, dim) = (self.k, self.dim());
        let mean_base = k;
        let std_base = k + k * dim;
        let log_w = Self::log_softmax(&raw[..k]);
        let w: Vec<f64> = log_w.iter().map(|l| l.exp()).collect();

        let mut sigma = vec![0.0; k * dim];
        let mut dsig = vec![0.0; k * dim];
        let mut z = vec![0.0; k * dim];
        let mut joint = vec![0.0; k];
        for i in 0..k {
            let mut lp = 0.0;
            for d in 0..dim {
                let j = i * dim + d;
                let (s, ds) = self.std_link(raw[std_base + j], d);
                let mu = self.offset[j] + self.scale[d] * raw[mean_base + j];
                let zz = (target[d] - mu) / s;
                sigma[j] = s;
                dsig[j] = ds;
                z[j] = zz;
                lp -= 0.5 * (LN_2PI + 2.0 * s.ln() + zz * zz);
            }
            joint[i] = log_w[i] + lp;
        }
        let lse = log_sum_exp(&joint);
        let resp: Vec<f64> = joint.iter().map(|j| (j - lse).exp()).collect();
        let reg = regularizer_terms(&w, sigma.iter(), rw);

        let mut grad = vec![0.0; raw.len()];
        // regularizer pulled back through softmax: h_k = w_k ∂R/∂w_k
        let wsum: f64 = w.iter().sum();
        let h: Vec<f64> = w
            .iter()
            .map(|&wk| 2.0 * rw.lambda_wsum * (wsum - 1.0) * wk + 0.5 * rw.lambda_wsparse * wk.sqrt())
            .collect();
        let h_sum: f64 = h.iter().sum();
        for i in 0..k {
            grad[i] = w[i] - resp[i] + h[i] - w[i] * h_sum;
        }
        for i in 0..k {
            for d in 0..dim {
                let j = i * dim + d;
                grad[mean_base + j] = -resp[i] * z[j] / sigma[j] * self.scale[d];
                grad[std_base + j] =
                    dsig[j] * (resp[i] * (1.0 - z[j] * z[j]) + 2.0 * rw.lambda_std * sigma[j] * sigma[j]);
            }
        }
        Ok((HeadLoss { nll: -lse, reg }, grad))
    }
}
