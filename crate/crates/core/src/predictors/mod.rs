//! Candidate trajectory predictors.
//!
//! Two experts share one interface: the variational predictor emits a GMM
//! over future coefficients, the odometry expert rolls the current speed and
//! turn rate forward. Both can be expressed as [`GmmParams`] for scoring.

mod odometry;
mod stack;
mod variational;

pub use odometry::{odometry_as_gmm, odometry_predict, OdometryExpert, OMEGA_EPS};
pub use stack::{Architecture, ChildStack, FeatureNormalizer, StackForward, TrainReport, ValidationFn};
pub use variational::{train_variational, train_variational_selected, VariationalModel, VariationalOptions};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::basis::CoeffVector;
use crate::error::{Error, Result};
use crate::gmm::GmmParams;

/// Default length of the scene feature vector.
pub const SCENE_DIM: usize = 8;

/// The network input for one prediction instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputFeatures {
    pub past_coeffs: CoeffVector,
    pub steering_angle_rad: f64,
    pub pedal: f64,
    pub angular_velocity_radps: f64,
    pub linear_velocity_mps: f64,
    pub scene_features: Vec<f64>,
}

impl InputFeatures {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.steering_angle_rad,
            self.pedal,
            self.angular_velocity_radps,
            self.linear_velocity_mps,
        ];
        let finite = scalars
            .iter()
            .chain(&self.past_coeffs.cx)
            .chain(&self.past_coeffs.cy)
            .chain(&self.scene_features)
            .all(|v| v.is_finite());
        if !finite || self.linear_velocity_mps < 0.0 {
            return Err(Error::InvalidConfig(
                "input features must be finite with non-negative speed".into(),
            ));
        }
        Ok(())
    }

    /// Raw (unnormalised) values routed to one child network.
    pub fn channel(&self, child: Child) -> Vec<f64> {
        match child {
            Child::Dynamics => self.past_coeffs.flatten(),
            Child::Canbus => vec![self.steering_angle_rad, self.pedal],
            Child::Imu => vec![self.angular_velocity_radps, self.linear_velocity_mps],
            Child::Scene => self.scene_features.clone(),
        }
    }
}

/// Per-sensor child networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Child {
    Dynamics,
    Canbus,
    Imu,
    Scene,
}

impl Child {
    pub const ALL: [Child; 4] = [Child::Dynamics, Child::Canbus, Child::Imu, Child::Scene];

    pub fn name(self) -> &'static str {
        match self {
            Child::Dynamics => "dynamics",
            Child::Canbus => "canbus",
            Child::Imu => "imu",
            Child::Scene => "scene",
        }
    }

    pub fn input_dim(self, past_dim: usize, scene_dim: usize) -> usize {
        match self {
            Child::Dynamics => past_dim,
            Child::Canbus | Child::Imu => 2,
            Child::Scene => scene_dim,
        }
    }
}

impl fmt::Display for Child {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Child {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamics" => Ok(Child::Dynamics),
            "canbus" | "can" => Ok(Child::Canbus),
            "imu" => Ok(Child::Imu),
            "scene" | "image" => Ok(Child::Scene),
            other => Err(Error::InvalidConfig(format!("unknown child network '{other}'"))),
        }
    }
}

/// Registered candidate predictors, in registry order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorId {
    Variational,
    Odometry,
}

impl PredictorId {
    pub const REGISTRY: [PredictorId; 2] = [PredictorId::Variational, PredictorId::Odometry];

    pub fn name(self) -> &'static str {
        match self {
            PredictorId::Variational => "variational",
            PredictorId::Odometry => "odometry",
        }
    }
}

impl fmt::Display for PredictorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One predictor's output as the mixture sees it.
#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Gmm(GmmParams),
    Trajectory(crate::basis::TrajectorySegment),
}
