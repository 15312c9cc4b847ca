use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Mode, Parameterized};
use crate::error::{Error, Result};

/// Variance epsilon inside batch norm.
pub const BN_EPS: f64 = 1e-5;
/// Weight kept by the running statistics at each training step.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub batch_norm: bool,
    pub dropout_p: f64,
}

impl LayerSpec {
    pub fn hidden(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            activation: Activation::Relu,
            batch_norm: true,
            dropout_p: 0.0,
        }
    }

    pub fn linear(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            activation: Activation::Identity,
            batch_norm: false,
            dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!("invalid layer spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BatchNorm {
    gamma: DVector<f64>,
    beta: DVector<f64>,
    running_mean: DVector<f64>,
    running_var: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    /// `in_dim × out_dim`.
    weight: DMatrix<f64>,
    bias: Option<DVector<f64>>,
    bn: Option<BatchNorm>,
}

impl Layer {
    /// Weights uniform in `±√(6 / (in + out))`, zero bias, unit batch-norm scale.
    pub fn init<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let bound = (6.0 / (spec.in_dim + spec.out_dim) as f64).sqrt();
        let weight = DMatrix::from_fn(spec.in_dim, spec.out_dim, |_, _| rng.random_range(-bound..bound));
        let mut layer = Self {
            spec,
            weight,
            bias: None,
            bn: None,
        };
        if spec.batch_norm {
            layer.bn = Some(BatchNorm {
                gamma: DVector::from_element(spec.out_dim, 1.0),
                beta: DVector::zeros(spec.out_dim),
                running_mean: DVector::zeros(spec.out_dim),
                running_var: DVector::from_element(spec.out_dim, 1.0),
            });
        } else {
            layer.bias = Some(DVector::zeros(spec.out_dim));
        }
        Ok(layer)
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> Option<&mut DVector<f64>> {
        self.bias.as_mut()
    }

    fn forward<R: Rng + ?Sized>(
        &self,
        input: &DMatrix<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> (DMatrix<f64>, LayerCache) {
        let batch = input.nrows();
        let mut z = input * &self.weight;
        if let Some(b) = &self.bias {
            for (j, mut col) in z.column_iter_mut().enumerate() {
                col.add_scalar_mut(b[j]);
            }
        }
        let mut xhat = None;
        let mut inv_std = None;
        let mut batch_stats = None;
        if let Some(bn) = &self.bn {
            let n = batch as f64;
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = DVector::from_iterator(z.ncols(), z.column_iter().map(|c| c.sum() / n));
                    let var = DVector::from_iterator(
                        z.ncols(),
                        z.column_iter()
                            .zip(mean.iter())
                            .map(|(c, m)| c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n),
                    );
                    (mean, var)
                }
                Mode::Eval => (bn.running_mean.clone(), bn.running_var.clone()),
            };
            let istd = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let mut xh = z;
            for (j, mut col) in xh.column_iter_mut().enumerate() {
                col.add_scalar_mut(-mean[j]);
                col *= istd[j];
            }
            let mut y = xh.clone();
            for (j, mut col) in y.column_iter_mut().enumerate() {
                col *= bn.gamma[j];
                col.add_scalar_mut(bn.beta[j]);
            }
            z = y;
            xhat = Some(xh);
            inv_std = Some(istd);
            if mode == Mode::Train {
                batch_stats = Some((mean, var));
            }
        }
        let pre = z;
        let mut out = match self.spec.activation {
            Activation::Relu => pre.map(|v| v.max(0.0)),
            Activation::Identity => pre.clone(),
        };
        let mut mask = None;
        if mode == Mode::Train && self.spec.dropout_p > 0.0 {
            let keep = 1.0 - self.spec.dropout_p;
            let m = DMatrix::from_fn(out.nrows(), out.ncols(), |_, _| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            });
            out.component_mul_assign(&m);
            mask = Some(m);
        }
        let cache = LayerCache {
            input: input.clone(),
            pre,
            xhat,
            inv_std,
            mask,
            batch_stats,
        };
        (out, cache)
    }

    fn backward(&self, cache: &LayerCache, grad_out: &DMatrix<f64>) -> Result<(LayerGrads, DMatrix<f64>)> {
        if grad_out.shape() != cache.pre.shape() || cache.input.ncols() != self.spec.in_dim {
            return Err(Error::StaleCache(format!(
                "layer {}→{} got grad {:?} for cached output {:?}",
                self.spec.in_dim,
                self.spec.out_dim,
                grad_out.shape(),
                cache.pre.shape()
            )));
        }
        let mut dy = grad_out.clone();
        if let Some(m) = &cache.mask {
            dy.component_mul_assign(m);
        }
        if self.spec.activation == Activation::Relu {
            dy.zip_apply(&cache.pre, |g, p| {
                if p <= 0.0 {
                    *g = 0.0
                }
            });
        }
        let mut grads = LayerGrads {
            weight: DMatrix::zeros(0, 0),
            bias: None,
            gamma: None,
            beta: None,
        };
        let dz = match (&self.bn, &cache.xhat, &cache.inv_std) {
            (Some(bn), Some(xhat), Some(istd)) => {
                let n = dy.nrows() as f64;
                let dgamma = DVector::from_iterator(
                    dy.ncols(),
                    dy.column_iter().zip(xhat.column_iter()).map(|(g, x)| g.dot(&x)),
                );
                let dbeta = DVector::from_iterator(dy.ncols(), dy.column_iter().map(|g| g.sum()));
                let mut dz = dy;
                if cache.batch_stats.is_some() {
                    for (j, mut col) in dz.column_iter_mut().enumerate() {
                        let g = bn.gamma[j];
                        let sum_dx = g * dbeta[j];
                        let sum_dx_x = g * dgamma[j];
                        let xcol = xhat.column(j);
                        for (v, x) in col.iter_mut().zip(xcol.iter()) {
                            *v = istd[j] / n * (n * g * *v - sum_dx - x * sum_dx_x);
                        }
                    }
                } else {
                    // eval-mode normalisation is a fixed affine map
                    for (j, mut col) in dz.column_iter_mut().enumerate() {
                        col *= bn.gamma[j] * istd[j];
                    }
                }
                grads.gamma = Some(dgamma);
                grads.beta = Some(dbeta);
                dz
            }
            _ => {
                grads.bias = Some(DVector::from_iterator(dy.ncols(), dy.column_iter().map(|g| g.sum())));
                dy
            }
        };
        grads.weight = cache.input.tr_mul(&dz);
        let dx = &dz * self.weight.transpose();
        Ok((grads, dx))
    }
}

/// Per-layer values kept from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    xhat: Option<DMatrix<f64>>,
    inv_std: Option<DVector<f64>>,
    mask: Option<DMatrix<f64>>,
    batch_stats: Option<(DVector<f64>, DVector<f64>)>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub gamma: Option<DVector<f64>>,
    pub beta: Option<DVector<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetworkGrads {
    /// Flattened in the same order as [`Parameterized::visit_params`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            for v in [&g.bias, &g.gamma, &g.beta].into_iter().flatten() {
                out.extend_from_slice(v.as_slice());
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.flatten_into(&mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(into = "NetworkRecord", try_from = "NetworkRecord")]
pub struct Network {
    layers: Vec<Layer>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidConfig("network needs at least one layer".into()));
        }
        for w in specs.windows(2) {
            if w[0].out_dim != w[1].in_dim {
                return Err(Error::InvalidConfig(format!(
                    "layer widths do not chain: {} → {}",
                    w[0].out_dim, w[1].in_dim
                )));
            }
        }
        let layers = specs.iter().map(|&s| Layer::init(s, rng)).collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() || layers.windows(2).any(|w| w[0].spec.out_dim != w[1].spec.in_dim) {
            return Err(Error::InvalidConfig("layer widths do not chain".into()));
        }
        Ok(Self { layers })
    }

    /// Hidden ReLU+BN layers of the given widths followed by an output layer.
    pub fn mlp<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out: Option<usize>,
        dropout_p: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut specs = Vec::new();
        let mut prev = in_dim;
        for &h in hidden {
            specs.push(LayerSpec {
                dropout_p,
                ..LayerSpec::hidden(prev, h)
            });
            prev = h;
        }
        if let Some(o) = out {
            specs.push(LayerSpec::linear(prev, o));
        }
        Self::new(&specs, rng)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.out_dim
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &DMatrix<f64>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(DMatrix<f64>, ForwardCache)> {
        if input.ncols() != self.in_dim() || input.nrows() == 0 {
            return Err(Error::ShapeMismatch {
                expected: format!("batch × {}", self.in_dim()),
                got: format!("{} × {}", input.nrows(), input.ncols()),
            });
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&x, mode, rng);
            caches.push(cache);
            x = y;
        }
        Ok((x, ForwardCache { layers: caches }))
    }

    /// Single-vector convenience wrapper around [`Network::forward`].
    pub fn forward_one<R: Rng + ?Sized>(&self, input: &[f64], mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
        let x = DMatrix::from_row_slice(1, input.len(), input);
        let (y, _) = self.forward(&x, mode, rng)?;
        Ok(y.iter().copied().collect())
    }

    pub fn backward(&self, cache: &ForwardCache, grad_out: &DMatrix<f64>) -> Result<(NetworkGrads, DMatrix<f64>)> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} layers, network {}",
                cache.layers.len(),
                self.layers.len()
            )));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let (lg, dx) = layer.backward(c, &g)?;
            grads.push(lg);
            g = dx;
        }
        grads.reverse();
        Ok((NetworkGrads { layers: grads }, g))
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let (Some(bn), Some((mean, var))) = (&mut layer.bn, &c.batch_stats) {
                bn.running_mean = &bn.running_mean * BN_MOMENTUM + mean * (1.0 - BN_MOMENTUM);
                bn.running_var = &bn.running_var * BN_MOMENTUM + var * (1.0 - BN_MOMENTUM);
            }
        }
    }
}

impl Parameterized for Network {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64])) {
        for l in &self.layers {
            f(l.weight.as_slice());
            if let Some(b) = &l.bias {
                f(b.as_slice());
            }
            if let Some(bn) = &l.bn {
                f(bn.gamma.as_slice());
                f(bn.beta.as_slice());
            }
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        for l in &mut self.layers {
            f(l.weight.as_mut_slice());
            if let Some(b) = &mut l.bias {
                f(b.as_mut_slice());
            }
            if let Some(bn) = &mut l.bn {
                f(bn.gamma.as_mut_slice());
                f(bn.beta.as_mut_slice());
            }
        }
    }
}

/// Serialized form. Weights are stored row-major (`in_dim` rows of
/// `out_dim` values).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkRecord {
    pub layers: Vec<LayerRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerRecord {
    pub spec: LayerSpec,
    pub weight: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_norm: Option<BatchNormRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormRecord {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl From<Network> for NetworkRecord {
    fn from(net: Network) -> Self {
        let layers = net
            .layers
            .into_iter()
            .map(|l| LayerRecord {
                spec: l.spec,
                weight: l.weight.transpose().as_slice().to_vec(),
                bias: l.bias.map(|b| b.as_slice().to_vec()),
                batch_norm: l.bn.map(|bn| BatchNormRecord {
                    gamma: bn.gamma.as_slice().to_vec(),
                    beta: bn.beta.as_slice().to_vec(),
                    running_mean: bn.running_mean.as_slice().to_vec(),
                    running_var: bn.running_var.as_slice().to_vec(),
                }),
            })
            .collect();
        Self { layers }
    }
}

impl TryFrom<NetworkRecord> for Network {
    type Error = Error;

    fn try_from(rec: NetworkRecord) -> Result<Self> {
        let mismatch = |what: &str| Error::ShapeMismatch {
            expected: format!("consistent {what}"),
            got: "checkpoint arrays of the wrong length".into(),
        };
        let mut layers = Vec::with_capacity(rec.layers.len());
        for l in rec.layers {
            l.spec.validate()?;
            let (i, o) = (l.spec.in_dim, l.spec.out_dim);
            if l.weight.len() != i * o {
                return Err(mismatch("weight"));
            }
            let weight = DMatrix::from_row_slice(i, o, &l.weight);
            let bias = match (l.spec.batch_norm, l.bias) {
                (false, Some(b)) if b.len() == o => Some(DVector::from_vec(b)),
                (true, None) => None,
                _ => return Err(mismatch("bias")),
            };
            let bn = match (l.spec.batch_norm, l.batch_norm) {
                (true, Some(r)) => {
                    let lens = [r.gamma.len(), r.beta.len(), r.running_mean.len(), r.running_var.len()];
                    if lens.iter().any(|&n| n != o) || r.running_var.iter().any(|&v| !(v >= 0.0)) {
                        return Err(mismatch("batch norm"));
                    }
                    Some(BatchNorm {
                        gamma: DVector::from_vec(r.gamma),
                        beta: DVector::from_vec(r.beta),
                        running_mean: DVector::from_vec(r.running_mean),
                        running_var: DVector::from_vec(r.running_var),
                    })
                }
                (false, None) => None,
                _ => return Err(mismatch("batch norm")),
            };
            layers.push(Layer {
                spec: l.spec,
                weight,
                bias,
                bn,
            });
        }
        if layers.is_empty() || layers.windows(2).any(|w| w[0].spec.out_dim != w[1].spec.in_dim) {
            return Err(mismatch("layer chain"));
        }
        Ok(Network { layers })
    }
}
