//! Wheel-odometry expert: constant turn rate and velocity from the IMU channel.

use serde::{Deserialize, Serialize};

use super::InputFeatures;
use crate::basis::{project, BasisSpec, TrajectorySegment};
use crate::error::Result;
use crate::gmm::GmmParams;

/// Below this turn rate (rad/s) the arc is evaluated by its Taylor series.
pub const OMEGA_EPS: f64 = 1e-4;

fn arc_point(v: f64, omega: f64, t: f64) -> (f64, f64) {
    if omega.abs() < OMEGA_EPS {
        // sin(a)/a and (1 − cos a)/a to fourth order in a = ωt
        let a = omega * t;
        let a2 = a * a;
        (
            v * t * (1.0 - a2 / 6.0 + a2 * a2 / 120.0),
            v * t * (a / 2.0) * (1.0 - a2 / 12.0 + a2 * a2 / 360.0),
        )
    } else {
        let r = v / omega;
        let (s, c) = (omega * t).sin_cos();
        (r * s, r * (1.0 - c))
    }
}

/// Positions at `times` assuming the current speed and turn rate persist.
pub fn odometry_predict(x: &InputFeatures, times: &[f64]) -> TrajectorySegment {
    let v = x.linear_velocity_mps;
    let omega = x.angular_velocity_radps;
    let (xs, ys) = times.iter().map(|&t| arc_point(v, omega, t)).unzip();
    TrajectorySegment {
        times: times.to_vec(),
        xs,
        ys,
    }
}

/// Single-component GMM whose mean is the projected odometry arc.
pub fn odometry_as_gmm(x: &InputFeatures, spec: &BasisSpec, std: f64) -> Result<GmmParams> {
    let arc = odometry_predict(x, &spec.future_grid());
    let mean = project(&arc, spec)?.flatten();
    GmmParams::new(vec![1.0], vec![mean], vec![vec![std; spec.flat_dim()]], *spec)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdometryExpert {
    /// Std of every coefficient when the expert is expressed as a GMM.
    pub gmm_std: f64,
}

impl Default for OdometryExpert {
    fn default() -> Self {
        Self { gmm_std: 0.5 }
    }
}

impl OdometryExpert {
    pub fn predict(&self, x: &InputFeatures, times: &[f64]) -> TrajectorySegment {
        odometry_predict(x, times)
    }

    pub fn as_gmm(&self, x: &InputFeatures, spec: &BasisSpec) -> Result<GmmParams> {
        odometry_as_gmm(x, spec, self.gmm_std)
    }
}
