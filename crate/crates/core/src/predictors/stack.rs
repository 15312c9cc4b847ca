//! Children networks → block-dropout concatenation → predictor network.
//!
//! Both the variational predictor and the confidence estimator are a
//! [`ChildStack`] with a different output width and loss. Initialisation and
//! dropout streams are keyed by child name, so two stacks that differ only by
//! one child start from the same weights for everything they share and see
//! the same masks during training.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Child, InputFeatures};
use crate::error::{Error, Result};
use crate::net::{
    block_dropout, block_dropout_backward, AdamState, BlockDropout, ForwardCache, Layer, LayerSpec, Mode,
    Network, Parameterized, TrainConfig,
};
use crate::seed::{stage_rng, stage_seed};

/// Layer widths of the children and predictor networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub child_hidden: Vec<usize>,
    pub predictor_hidden: Vec<usize>,
    /// Probability of dropping a whole child block during training.
    pub p_block: f64,
    /// Dropout inside the hidden layers.
    pub dropout_p: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            child_hidden: vec![10, 10],
            predictor_hidden: vec![100, 100, 100, 50],
            p_block: 0.05,
            dropout_p: 0.0,
        }
    }
}

/// Per-channel standardisation constants fitted on a training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNormalizer {
    pub channels: Vec<ChannelStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub child: Child,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNormalizer {
    pub fn fit(inputs: &[&InputFeatures], children: &[Child]) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = inputs.len() as f64;
        let channels = children
            .iter()
            .map(|&child| {
                let rows: Vec<Vec<f64>> = inputs.iter().map(|x| x.channel(child)).collect();
                let dim = rows[0].len();
                let mut mean = vec![0.0; dim];
                for r in &rows {
                    for (m, v) in mean.iter_mut().zip(r) {
                        *m += v / n;
                    }
                }
                let mut var = vec![0.0; dim];
                for r in &rows {
                    for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                        *s += (v - m).powi(2) / n;
                    }
                }
                let std = var
                    .into_iter()
                    .map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 })
                    .collect();
                ChannelStats { child, mean, std }
            })
            .collect();
        Ok(Self { channels })
    }

    fn stats(&self, child: Child) -> Result<&ChannelStats> {
        self.channels
            .iter()
            .find(|c| c.child == child)
            .ok_or_else(|| Error::InvalidConfig(format!("no normalisation for child {child}")))
    }

    /// `batch × dim` standardised matrix for one child.
    pub fn matrix(&self, inputs: &[&InputFeatures], child: Child) -> Result<DMatrix<f64>> {
        let st = self.stats(child)?;
        let dim = st.mean.len();
        let mut m = DMatrix::zeros(inputs.len(), dim);
        for (i, x) in inputs.iter().enumerate() {
            let raw = x.channel(child);
            if raw.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("{dim} values for {child}"),
                    got: raw.len().to_string(),
                });
            }
            for d in 0..dim {
                m[(i, d)] = (raw[d] - st.mean[d]) / st.std[d];
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChildStack {
    pub children: Vec<Child>,
    pub arch: Architecture,
    pub normalizer: FeatureNormalizer,
    child_nets: Vec<Network>,
    predictor: Network,
}

/// Everything a train-mode pass keeps for backprop.
pub struct StackForward {
    pub output: DMatrix<f64>,
    child_caches: Vec<ForwardCache>,
    blocks: BlockDropout,
    predictor_cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean per-sample training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean validation loss of every epoch; empty without a validation set.
    pub validation_losses: Vec<f64>,
    /// Zero-based epoch whose weights were kept.
    pub selected_epoch: usize,
}

/// Mean per-sample loss of a stack on held-out data, in eval mode.
pub type ValidationFn<'a> = dyn FnMut(&ChildStack) -> Result<f64> + 'a;

impl ChildStack {
    /// The network of one child, if the stack has it.
    pub fn child_net(&self, child: Child) -> Option<&Network> {
        self.children.iter().position(|&c| c == child).map(|i| &self.child_nets[i])
    }

    pub fn new(
        children: &[Child],
        arch: Architecture,
        normalizer: FeatureNormalizer,
        out_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if children.is_empty() {
            return Err(Error::InvalidConfig("at least one child network is required".into()));
        }
        let mut sorted = children.to_vec();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != children.len() {
            return Err(Error::InvalidConfig("duplicate child networks".into()));
        }
        let child_out = *arch.child_hidden.last().ok_or_else(|| {
            Error::InvalidConfig("child networks need at least one hidden layer".into())
        })?;
        let mut child_nets = Vec::new();
        for &c in &sorted {
            let in_dim = normalizer.stats(c)?.mean.len();
            let mut rng = stage_rng(seed, &format!("init/child/{c}"));
            child_nets.push(Network::mlp(in_dim, &arch.child_hidden, None, arch.dropout_p, &mut rng)?);
        }
        let concat = child_out * sorted.len();
        let mut specs = Vec::new();
        let mut prev = concat;
        for &h in &arch.predictor_hidden {
            specs.push(LayerSpec {
                dropout_p: arch.dropout_p,
                ..LayerSpec::hidden(prev, h)
            });
            prev = h;
        }
        specs.push(LayerSpec::linear(prev, out_dim));
        let layers = specs
            .iter()
            .enumerate()
            .map(|(i, &spec)| Layer::init(spec, &mut stage_rng(seed, &format!("init/predictor/{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let mut predictor = Network::from_layers(layers)?;
        // Rows of the first layer that read child c come from c's own stream,
        // with the fan-in bound of the full child set, so ablated stacks share
        // these weights exactly.
        {
            let first = &mut predictor.layers_mut()[0];
            let full_in = child_out * Child::ALL.len();
            let bound = (6.0 / (full_in + first.spec.out_dim) as f64).sqrt();
            let w = first.weight_mut();
            for (b, &c) in sorted.iter().enumerate() {
                let mut rng = stage_rng(seed, &format!("init/predictor/rows/{c}"));
                for r in b * child_out..(b + 1) * child_out {
                    for col in 0..w.ncols() {
                        w[(r, col)] = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        Ok(Self {
            children: sorted,
            arch,
            normalizer,
            child_nets,
            predictor,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.predictor.out_dim()
    }

    pub fn predictor_in_dim(&self) -> usize {
        self.predictor.in_dim()
    }

    pub fn child_nets(&self) -> &[Network] {
        &self.child_nets
    }

    pub fn predictor(&self) -> &Network {
        &self.predictor
    }

    /// Forward pass. `dropout_seed` keys every dropout stream of the pass and
    /// is ignored in eval mode.
    pub fn forward(&self, xs: &[&InputFeatures], mode: Mode, dropout_seed: u64) -> Result<StackForward> {
        let mut outs = Vec::with_capacity(self.children.len());
        let mut caches = Vec::with_capacity(self.children.len());
        let mut block_rngs: Vec<ChaCha8Rng> = Vec::with_capacity(self.children.len());
        for (net, &c) in self.child_nets.iter().zip(&self.children) {
            let input = self.normalizer.matrix(xs, c)?;
            let mut rng = stage_rng(dropout_seed, &format!("layers/{c}"));
            let (y, cache) = net.forward(&input, mode, &mut rng)?;
            outs.push(y);
            caches.push(cache);
            block_rngs.push(stage_rng(dropout_seed, &format!("block/{c}")));
        }
        let blocks = block_dropout(&outs, self.arch.p_block, mode, &mut block_rngs)?;
        let mut rng = stage_rng(dropout_seed, "layers/predictor");
        let (output, predictor_cache) = self.predictor.forward(&blocks.output, mode, &mut rng)?;
        Ok(StackForward {
            output,
            child_caches: caches,
            blocks,
            predictor_cache,
        })
    }

    /// Flat parameter gradient, in [`Parameterized`] order.
    pub fn backward(&self, fwd: &StackForward, grad_out: &DMatrix<f64>) -> Result<Vec<f64>> {
        let (pred_grads, dconcat) = self.predictor.backward(&fwd.predictor_cache, grad_out)?;
        let per_child = block_dropout_backward(&fwd.blocks, &dconcat);
        let mut flat = Vec::with_capacity(self.param_count());
        for ((net, cache), g) in self.child_nets.iter().zip(&fwd.child_caches).zip(&per_child) {
            let (grads, _) = net.backward(cache, g)?;
            grads.flatten_into(&mut flat);
        }
        pred_grads.flatten_into(&mut flat);
        Ok(flat)
    }

    pub fn update_running_stats(&mut self, fwd: &StackForward) {
        for (net, cache) in self.child_nets.iter_mut().zip(&fwd.child_caches) {
            net.update_running_stats(cache);
        }
        self.predictor.update_running_stats(&fwd.predictor_cache);
    }

    /// Eval-mode outputs, one row per input.
    pub fn predict_raw(&self, xs: &[&InputFeatures]) -> Result<DMatrix<f64>> {
        const CHUNK: usize = 512;
        let mut out = DMatrix::zeros(xs.len(), self.out_dim());
        for (c, chunk) in xs.chunks(CHUNK).enumerate() {
            let fwd = self.forward(chunk, Mode::Eval, 0)?;
            out.rows_mut(c * CHUNK, chunk.len()).copy_from(&fwd.output);
        }
        Ok(out)
    }

    /// Mini-batch Adam on `loss`, which receives the dataset indices of a
    /// batch with its raw outputs and returns the summed loss and its gradient.
    pub fn train<F>(&mut self, inputs: &[&InputFeatures], cfg: &TrainConfig, loss: F) -> Result<TrainReport>
    where
        F: FnMut(&[usize], &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
    {
        self.train_selecting(inputs, cfg, loss, None)
    }

    /// As [`ChildStack::train`], but when `validation` is given the weights
    /// of the epoch with the lowest validation loss are kept (ties go to the
    /// earlier epoch).
    pub fn train_selecting<F>(
        &mut self,
        inputs: &[&InputFeatures],
        cfg: &TrainConfig,
        mut loss: F,
        mut validation: Option<&mut ValidationFn<'_>>,
    ) -> Result<TrainReport>
    where
        F: FnMut(&[usize], &DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
    {
        cfg.validate()?;
        let n_samples = inputs.len();
        if n_samples == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut adam = AdamState::new(self.param_count());
        let mut order: Vec<usize> = (0..n_samples).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.epochs);
        let mut validation_losses = Vec::new();
        let mut best: Option<(f64, usize, ChildStack)> = None;
        for epoch in 0..cfg.epochs {
            let mut rng = stage_rng(cfg.seed, &format!("shuffle/{epoch}"));
            order.shuffle(&mut rng);
            let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
            // a short trailing batch gives noisy or degenerate batch statistics
            if batches.len() > 1 && 2 * batches[batches.len() - 1].len() < cfg.batch_size {
                batches.pop();
                let last = batches.len() - 1;
                batches[last] = &order[last * cfg.batch_size..];
            }
            let mut total = 0.0;
            for (b, idx) in batches.iter().enumerate() {
                let xs: Vec<&InputFeatures> = idx.iter().map(|&i| inputs[i]).collect();
                let dropout_seed = stage_seed(cfg.seed, &format!("dropout/{epoch}/{b}"));
                let fwd = self.forward(&xs, Mode::Train, dropout_seed)?;
                let (sum, mut grad) = loss(idx, &fwd.output)?;
                if !sum.is_finite() {
                    return Err(Error::NaNLoss { epoch });
                }
                total += sum;
                grad /= idx.len() as f64;
                let flat = self.backward(&fwd, &grad)?;
                if flat.iter().any(|g| !g.is_finite()) {
                    return Err(Error::NaNLoss { epoch });
                }
                adam.step(self, &flat, cfg);
                self.update_running_stats(&fwd);
            }
            let mean = total / n_samples as f64;
            if !mean.is_finite() {
                return Err(Error::NaNLoss { epoch });
            }
            epoch_losses.push(mean);
            if let Some(v) = validation.as_mut() {
                let val = v(self)?;
                validation_losses.push(val);
                // a non-finite validation loss never wins
                if val.is_finite() && best.as_ref().is_none_or(|b| val < b.0) {
                    best = Some((val, epoch, self.clone()));
                }
            }
        }
        let selected_epoch = match best {
            Some((_, epoch, stack)) => {
                *self = stack;
                epoch
            }
            None => cfg.epochs.saturating_sub(1),
        };
        Ok(TrainReport {
            epoch_losses,
            validation_losses,
            selected_epoch,
        })
    }
}

impl Parameterized for ChildStack {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        for n in &self.child_nets {
            n.visit_params(f);
        }
        self.predictor.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for n in &mut self.child_nets {
            n.visit_params_mut(f);
        }
        self.predictor.visit_params_mut(f);
    }
}
