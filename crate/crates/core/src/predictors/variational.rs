//! Variational predictor: children + predictor networks emitting a GMM over
//! future trajectory coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::stack::{Architecture, ChildStack, FeatureNormalizer, TrainReport, ValidationFn};
use super::{Child, InputFeatures};
use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::gmm::{nll, GmmHead, GmmParams, RegularizerWeights};
use crate::net::{Mode, TrainConfig};
use crate::simgen::Sample;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalOptions {
    /// Mixture components.
    pub k: usize,
    pub children: Vec<Child>,
    pub arch: Architecture,
    pub future_basis: BasisSpec,
}

impl Default for VariationalOptions {
    fn default() -> Self {
        Self {
            k: 3,
            children: Child::ALL.to_vec(),
            arch: Architecture::default(),
            future_basis: BasisSpec::future(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalModel {
    pub stack: ChildStack,
    pub head: GmmHead,
}

impl VariationalModel {
    pub fn k(&self) -> usize {
        self.head.k
    }

    pub fn children(&self) -> &[Child] {
        &self.stack.children
    }

    pub fn basis(&self) -> BasisSpec {
        self.head.basis
    }

    /// Eval-mode prediction.
    pub fn predict(&self, x: &InputFeatures) -> Result<GmmParams> {
        Ok(self.predict_batch(&[x])?.remove(0))
    }

    pub fn predict_batch(&self, xs: &[&InputFeatures]) -> Result<Vec<GmmParams>> {
        let raw = self.stack.predict_raw(xs)?;
        rows(&raw).map(|r| self.head.params_from_raw(&r)).collect()
    }

    /// Prediction in either mode; `dropout_seed` only matters in train mode.
    pub fn predict_with_mode(&self, x: &InputFeatures, mode: Mode, dropout_seed: u64) -> Result<GmmParams> {
        let fwd = self.stack.forward(&[x], mode, dropout_seed)?;
        let raw: Vec<f64> = fwd.output.row(0).iter().copied().collect();
        self.head.params_from_raw(&raw)
    }

    /// Mean per-sample loss (NLL + regularizers) of the model in eval mode.
    pub fn mean_loss(&self, data: &[Sample], reg: &RegularizerWeights) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let xs: Vec<&InputFeatures> = data.iter().map(|s| &s.features).collect();
        let raw = self.stack.predict_raw(&xs)?;
        let mut total = 0.0;
        for (r, s) in rows(&raw).zip(data) {
            total += self.head.loss_and_grad(&r, &s.groundtruth_coeffs.flatten(), reg)?.0.total();
        }
        Ok(total / data.len() as f64)
    }

    /// Mean per-sample NLL in eval mode.
    pub fn mean_nll(&self, data: &[Sample]) -> Result<f64> {
        mean_nll(&self.stack, &self.head, data)
    }
}

fn mean_nll(stack: &ChildStack, head: &GmmHead, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let xs: Vec<&InputFeatures> = data.iter().map(|s| &s.features).collect();
    let raw = stack.predict_raw(&xs)?;
    let mut total = 0.0;
    for (r, s) in rows(&raw).zip(data) {
        total += nll(&head.params_from_raw(&r)?, &s.groundtruth_coeffs.flatten())?;
    }
    Ok(total / data.len() as f64)
}

pub(crate) fn rows(m: &DMatrix<f64>) -> impl Iterator<Item = Vec<f64>> + '_ {
    m.row_iter().map(|r| r.iter().copied().collect())
}

/// Fits a variational model by minimising mean `ℓ_NLL` plus regularizers.
pub fn train_variational(
    data: &[Sample],
    cfg: &TrainConfig,
    reg: &RegularizerWeights,
    opts: &VariationalOptions,
) -> Result<(VariationalModel, TrainReport)> {
    train_variational_selected(data, &[], cfg, reg, opts)
}

/// As [`train_variational`], keeping the epoch with the lowest mean NLL on
/// `validation`. An empty validation set keeps the last epoch.
pub fn train_variational_selected(
    data: &[Sample],
    validation: &[Sample],
    cfg: &TrainConfig,
    reg: &RegularizerWeights,
    opts: &VariationalOptions,
) -> Result<(VariationalModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    reg.validate()?;
    if opts.k == 0 {
        return Err(Error::InvalidConfig("mixture needs at least one component".into()));
    }
    let xs: Vec<&InputFeatures> = data.iter().map(|s| &s.features).collect();
    let targets: Vec<Vec<f64>> = data.iter().map(|s| s.groundtruth_coeffs.flatten()).collect();
    if targets.iter().any(|t| t.len() != opts.future_basis.flat_dim()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{} target coefficients", opts.future_basis.flat_dim()),
            got: "samples with a different future basis".into(),
        });
    }
    let normalizer = FeatureNormalizer::fit(&xs, &opts.children)?;
    let head = GmmHead::fitted(opts.k, opts.future_basis, &targets);
    let stack = ChildStack::new(&opts.children, opts.arch.clone(), normalizer, head.raw_len(), cfg.seed)?;
    let mut model = VariationalModel { stack, head };
    let head = model.head.clone();
    let mut val = |stack: &ChildStack| mean_nll(stack, &head, validation);
    let selector: Option<&mut ValidationFn<'_>> = if validation.is_empty() { None } else { Some(&mut val) };
    let report = model.stack.train_selecting(&xs, cfg, |idx, raw| {
        let mut grad = DMatrix::zeros(raw.nrows(), raw.ncols());
        let mut sum = 0.0;
        for (row, &i) in idx.iter().enumerate() {
            let r: Vec<f64> = raw.row(row).iter().copied().collect();
            let (loss, g) = head.loss_and_grad(&r, &targets[i], reg)?;
            sum += loss.total();
            for (j, v) in g.into_iter().enumerate() {
                grad[(row, j)] = v;
            }
        }
        Ok((sum, grad))
    }, selector)?;
    Ok((model, report))
}
