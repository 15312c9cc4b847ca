use nalgebra::DMatrix;
use rand::Rng;

use super::Mode;
use crate::error::{Error, Result};

/// Concatenated child outputs with the per-sample block scales applied.
#[derive(Debug, Clone)]
pub struct BlockDropout {
    pub output: DMatrix<f64>,
    /// `batch × children`; 0 for a dropped block, `1 / (1 − p)` for a kept one.
    pub scales: DMatrix<f64>,
    pub widths: Vec<usize>,
}

/// Concatenates child outputs column-wise. In train mode every child block of
/// every sample is dropped independently with probability `p_block`; child
/// `j` draws its masks from `rngs[j]`, so a child's masks do not depend on
/// which other children are present.
pub fn block_dropout<R: Rng>(
    children: &[DMatrix<f64>],
    p_block: f64,
    mode: Mode,
    rngs: &mut [R],
) -> Result<BlockDropout> {
    let first = children.first().ok_or(Error::EmptyList)?;
    if rngs.len() != children.len() {
        return Err(Error::LengthMismatch {
            left: children.len(),
            right: rngs.len(),
        });
    }
    let batch = first.nrows();
    if children.iter().any(|c| c.nrows() != batch) {
        return Err(Error::ShapeMismatch {
            expected: format!("{batch} rows per child"),
            got: "children with different batch sizes".into(),
        });
    }
    let widths: Vec<usize> = children.iter().map(|c| c.ncols()).collect();
    let total: usize = widths.iter().sum();
    let scales = if mode == Mode::Train && p_block > 0.0 {
        let keep = 1.0 - p_block;
        let mut s = DMatrix::zeros(batch, children.len());
        for (j, rng) in rngs.iter_mut().enumerate() {
            for i in 0..batch {
                s[(i, j)] = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            }
        }
        s
    } else {
        DMatrix::from_element(batch, children.len(), 1.0)
    };
    let mut output = DMatrix::zeros(batch, total);
    let mut col = 0;
    for (j, child) in children.iter().enumerate() {
        let mut block = output.columns_mut(col, child.ncols());
        block.copy_from(child);
        for i in 0..batch {
            let s = scales[(i, j)];
            if s != 1.0 {
                block.row_mut(i).scale_mut(s);
            }
        }
        col += child.ncols();
    }
    Ok(BlockDropout { output, scales, widths })
}

/// Splits an upstream gradient back into per-child gradients.
pub fn block_dropout_backward(bd: &BlockDropout, grad: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let mut out = Vec::with_capacity(bd.widths.len());
    let mut col = 0;
    for (j, &w) in bd.widths.iter().enumerate() {
        let mut g = grad.columns(col, w).into_owned();
        for i in 0..g.nrows() {
            let s = bd.scales[(i, j)];
            if s != 1.0 {
                g.row_mut(i).scale_mut(s);
            }
        }
        out.push(g);
        col += w;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rngs(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
        (0..n).map(|j| ChaCha8Rng::seed_from_u64(seed * 100 + j as u64)).collect()
    }

    fn children() -> Vec<DMatrix<f64>> {
        vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]),
            DMatrix::from_row_slice(2, 1, &[5.0, 6.0]),
        ]
    }

    #[test]
    fn zero_probability_is_concatenation() {
        let mut r = rngs(0, 2);
        let bd = block_dropout(&children(), 0.0, Mode::Train, &mut r).unwrap();
        assert_eq!(bd.output, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]));
    }

    #[test]
    fn eval_ignores_probability() {
        let mut r = rngs(0, 2);
        let bd = block_dropout(&children(), 0.9, Mode::Eval, &mut r).unwrap();
        assert_eq!(bd.output, DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]));
    }

    #[test]
    fn drop_frequency_within_binomial_bound() {
        let mut r = rngs(13, 2);
        let kids = vec![DMatrix::from_element(1, 3, 1.0), DMatrix::from_element(1, 2, 1.0)];
        let n = 10_000;
        let p = 0.2;
        let mut dropped = [0usize; 2];
        for _ in 0..n {
            let bd = block_dropout(&kids, p, Mode::Train, &mut r).unwrap();
            for j in 0..2 {
                if bd.scales[(0, j)] == 0.0 {
                    dropped[j] += 1;
                    let start = if j == 0 { 0 } else { 3 };
                    assert!(bd.output.columns(start, kids[j].ncols()).iter().all(|v| *v == 0.0));
                } else {
                    assert!((bd.scales[(0, j)] - 1.25).abs() < 1e-15);
                }
            }
        }
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for d in dropped {
            assert!((d as f64 - n as f64 * p).abs() < 3.0 * sd, "{d}");
        }
    }

    #[test]
    fn backward_applies_same_scales() {
        let mut r = rngs(4, 2);
        let bd = block_dropout(&children(), 0.5, Mode::Train, &mut r).unwrap();
        let g = DMatrix::from_element(2, 3, 1.0);
        let parts = block_dropout_backward(&bd, &g);
        for i in 0..2 {
            assert!(parts[0].row(i).iter().all(|v| *v == bd.scales[(i, 0)]));
            assert_eq!(parts[1][(i, 0)], bd.scales[(i, 1)]);
        }
    }
}
