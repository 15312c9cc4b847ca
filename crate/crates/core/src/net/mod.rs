//! Fully connected network stack trained by manual backpropagation.
//!
//! Layers operate on row-major batches (`batch × features`). A hidden layer
//! is ordered linear → batch norm → activation → dropout. Linear layers that
//! feed a batch norm carry no bias, since the norm's shift subsumes it.

mod adam;
mod dropout;
mod layer;

pub use adam::{adam_step, AdamState, TrainConfig};
pub use dropout::{block_dropout, block_dropout_backward, BlockDropout};
pub use layer::{
    Activation, ForwardCache, Layer, LayerCache, LayerGrads, LayerSpec, Network, NetworkGrads,
    NetworkRecord, BN_EPS, BN_MOMENTUM,
};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Anything whose trainable parameters can be visited as flat slices in a
/// fixed order.
pub trait Parameterized {
    fn visit_params(&self, f: &mut dyn FnMut(&[f64]));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit_params(&mut |p| out.extend_from_slice(p));
        out
    }

    fn set_flat_params(&mut self, flat: &[f64]) {
        let mut off = 0;
        self.visit_params_mut(&mut |p| {
            p.copy_from_slice(&flat[off..off + p.len()]);
            off += p.len();
        });
    }
}
