//! Monomial trajectory basis.
//!
//! A trajectory segment sampled at times `t_i` is summarised per axis by the
//! least-squares coefficients of `B(t) = [1, t, t², …]`. Past segments use
//! negative times so that `t = 0` is always the prediction instant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative singular-value cutoff below which a basis matrix is rank deficient.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Default sample spacing for past and future grids.
pub const GRID_STEP_S: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    pub degree: usize,
    pub horizon_s: f64,
}

impl BasisSpec {
    pub fn new(degree: usize, horizon_s: f64) -> Result<Self> {
        if !(horizon_s > 0.0 && horizon_s.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "basis horizon must be positive, got {horizon_s}"
            )));
        }
        Ok(Self { degree, horizon_s })
    }

    /// Coefficients per axis.
    pub fn dim(&self) -> usize {
        self.degree + 1
    }

    /// Length of a flattened `cx ‖ cy` vector.
    pub fn flat_dim(&self) -> usize {
        2 * self.dim()
    }

    /// The 3 s future window used throughout the pipeline.
    pub fn future() -> Self {
        Self {
            degree: 2,
            horizon_s: 3.0,
        }
    }

    /// The 2 s past window.
    pub fn past() -> Self {
        Self {
            degree: 2,
            horizon_s: 2.0,
        }
    }

    /// Future sample times `0, step, …, horizon`.
    pub fn future_grid(&self) -> Vec<f64> {
        uniform_grid(0.0, self.horizon_s, GRID_STEP_S)
    }

    /// Past sample times `-horizon, …, -step, 0`.
    pub fn past_grid(&self) -> Vec<f64> {
        uniform_grid(-self.horizon_s, 0.0, GRID_STEP_S)
    }
}

impl Default for BasisSpec {
    fn default() -> Self {
        Self::future()
    }
}

/// Evenly spaced times from `start` to `end` inclusive, computed as
/// `start + i * step` so that no rounding error accumulates.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Vec<f64> {
    let n = ((end - start) / step).round() as usize;
    (0..=n).map(|i| start + i as f64 * step).collect()
}

/// Timestamped 2D positions in the local vehicle frame
/// (x along the heading, y to the left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySegment {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl TrajectorySegment {
    pub fn new(times: Vec<f64>, xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        if times.len() != xs.len() || times.len() != ys.len() {
            return Err(Error::InvalidTrajectory(format!(
                "times/xs/ys lengths differ: {}/{}/{}",
                times.len(),
                xs.len(),
                ys.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidTrajectory("no samples".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidTrajectory(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(Self { times, xs, ys })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        self.times[self.times.len() - 1]
    }

    pub fn point(&self, i: usize) -> (f64, f64) {
        (self.xs[i], self.ys[i])
    }

    /// Position at `t`, linearly interpolated between samples. Times that hit
    /// a sample within 1e-9 s return that sample exactly.
    pub fn position_at(&self, t: f64) -> Result<(f64, f64)> {
        const SNAP: f64 = 1e-9;
        if t < self.start() - SNAP || t > self.end() + SNAP {
            return Err(Error::HorizonOutOfRange {
                horizon: t,
                start: self.start(),
                end: self.end(),
            });
        }
        let idx = self.times.partition_point(|&s| s < t - SNAP);
        if idx < self.len() && (self.times[idx] - t).abs() <= SNAP {
            return Ok(self.point(idx));
        }
        // t lies strictly between times[idx - 1] and times[idx]
        let (t0, t1) = (self.times[idx - 1], self.times[idx]);
        let a = (t - t0) / (t1 - t0);
        Ok((
            self.xs[idx - 1] + a * (self.xs[idx] - self.xs[idx - 1]),
            self.ys[idx - 1] + a * (self.ys[idx] - self.ys[idx - 1]),
        ))
    }

    /// Sum of segment lengths of the polyline.
    pub fn path_length(&self) -> f64 {
        (1..self.len())
            .map(|i| (self.xs[i] - self.xs[i - 1]).hypot(self.ys[i] - self.ys[i - 1]))
            .sum()
    }

    /// Pointwise linear combination `a·self + b·other` on the same grid.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        if self.times != other.times {
            return Err(Error::GridMismatch);
        }
        Ok(Self {
            times: self.times.clone(),
            xs: self.xs.iter().zip(&other.xs).map(|(p, q)| a * p + b * q).collect(),
            ys: self.ys.iter().zip(&other.ys).map(|(p, q)| a * p + b * q).collect(),
        })
    }
}

/// Per-axis basis coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoeffVector {
    pub cx: Vec<f64>,
    pub cy: Vec<f64>,
    pub basis: BasisSpec,
}

impl CoeffVector {
    pub fn new(cx: Vec<f64>, cy: Vec<f64>, basis: BasisSpec) -> Result<Self> {
        if cx.len() != basis.dim() || cy.len() != basis.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} coefficients per axis", basis.dim()),
                got: format!("{}/{}", cx.len(), cy.len()),
            });
        }
        Ok(Self { cx, cy, basis })
    }

    pub fn zeros(basis: BasisSpec) -> Self {
        Self {
            cx: vec![0.0; basis.dim()],
            cy: vec![0.0; basis.dim()],
            basis,
        }
    }

    /// `cx ‖ cy`.
    pub fn flatten(&self) -> Vec<f64> {
        self.cx.iter().chain(&self.cy).copied().collect()
    }

    pub fn from_flat(flat: &[f64], basis: BasisSpec) -> Result<Self> {
        if flat.len() != basis.flat_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} flattened coefficients", basis.flat_dim()),
                got: flat.len().to_string(),
            });
        }
        let (cx, cy) = flat.split_at(basis.dim());
        Ok(Self {
            cx: cx.to_vec(),
            cy: cy.to_vec(),
            basis,
        })
    }
}

/// `len(times) × (degree + 1)` matrix with entry `(i, j) = times[i]^j`.
pub fn build_basis_matrix(spec: &BasisSpec, times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), spec.dim(), |i, j| times[i].powi(j as i32))
}

fn eval_poly(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

/// Least-squares projection of a sampled trajectory onto the basis.
pub fn project(traj: &TrajectorySegment, spec: &BasisSpec) -> Result<CoeffVector> {
    if traj.len() < spec.dim() {
        return Err(Error::InvalidTrajectory(format!(
            "{} samples cannot determine {} coefficients",
            traj.len(),
            spec.dim()
        )));
    }
    let b = build_basis_matrix(spec, &traj.times);
    let svd = b.svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    if ratio < RANK_TOLERANCE {
        return Err(Error::RankDeficient { ratio });
    }
    let eps = RANK_TOLERANCE * max;
    let solve = |rhs: &[f64]| -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(rhs);
        let sol = svd
            .solve(&rhs, eps)
            .map_err(|m| Error::InvalidTrajectory(m.to_string()))?;
        Ok(sol.iter().copied().collect())
    };
    Ok(CoeffVector {
        cx: solve(&traj.xs)?,
        cy: solve(&traj.ys)?,
        basis: *spec,
    })
}

/// Evaluates the coefficient polynomials at `times`.
pub fn reconstruct(c: &CoeffVector, times: &[f64]) -> TrajectorySegment {
    TrajectorySegment {
        times: times.to_vec(),
        xs: times.iter().map(|&t| eval_poly(&c.cx, t)).collect(),
        ys: times.iter().map(|&t| eval_poly(&c.cy, t)).collect(),
    }
}

/// Planar pose in a global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

/// Expresses a global trajectory in the frame anchored at `pose`.
pub fn to_local_frame(global: &TrajectorySegment, pose: Pose) -> TrajectorySegment {
    let (s, c) = pose.heading.sin_cos();
    let (xs, ys) = global
        .xs
        .iter()
        .zip(&global.ys)
        .map(|(&x, &y)| {
            let (dx, dy) = (x - pose.x, y - pose.y);
            (c * dx + s * dy, -s * dx + c * dy)
        })
        .unzip();
    TrajectorySegment {
        times: global.times.clone(),
        xs,
        ys,
    }
}

/// Inverse of [`to_local_frame`].
pub fn from_local_frame(local: &TrajectorySegment, pose: Pose) -> TrajectorySegment {
    let (s, c) = pose.heading.sin_cos();
    let (xs, ys) = local
        .xs
        .iter()
        .zip(&local.ys)
        .map(|(&x, &y)| (pose.x + c * x - s * y, pose.y + s * x + c * y))
        .unzip();
    TrajectorySegment {
        times: local.times.clone(),
        xs,
        ys,
    }
}
