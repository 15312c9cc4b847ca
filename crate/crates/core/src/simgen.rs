//! Synthetic urban-driving samples.
//!
//! Each sample is a unicycle vehicle following a road whose curvature is a
//! piecewise-linear function of arc length (straight segments joined by
//! clothoid ramps), at a piecewise-linear speed profile. The vehicle sits at
//! the origin with zero heading at `t = 0`; positions are integrated forward
//! to 3 s and backward over the 2 s past window.
//!
//! Scene features are the road heading change at 5, 10, …, 40 m ahead. At a
//! T-intersection the road has two mirrored exits and the features report
//! their mean, so the chosen exit is hidden from every input channel.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

use crate::basis::{project, BasisSpec, CoeffVector, TrajectorySegment};
use crate::error::{Error, Result};
use crate::predictors::{Child, InputFeatures, SCENE_DIM};
use crate::seed::stage_rng;

/// Wheelbase used to derive the steering angle from curvature.
pub const WHEELBASE_M: f64 = 2.7;
/// Acceleration that corresponds to a fully pressed pedal.
pub const PEDAL_FULL_ACCEL: f64 = 3.0;
/// Lookahead distances of the scene features.
pub const SCENE_LOOKAHEAD_M: [f64; SCENE_DIM] = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 35.0, 40.0];

const SUBSTEPS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Maneuver {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
    RoundaboutArc,
    TIntersection,
}

impl Maneuver {
    pub const ALL: [Maneuver; 6] = [
        Maneuver::Straight,
        Maneuver::LeftTurn,
        Maneuver::RightTurn,
        Maneuver::Stop,
        Maneuver::RoundaboutArc,
        Maneuver::TIntersection,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Maneuver::Straight => "straight",
            Maneuver::LeftTurn => "left_turn",
            Maneuver::RightTurn => "right_turn",
            Maneuver::Stop => "stop",
            Maneuver::RoundaboutArc => "roundabout_arc",
            Maneuver::TIntersection => "t_intersection",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManeuverMix {
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub stop: f64,
    pub roundabout_arc: f64,
    pub t_intersection: f64,
}

impl ManeuverMix {
    pub fn probabilities(&self) -> [f64; 6] {
        [
            self.straight,
            self.left_turn,
            self.right_turn,
            self.stop,
            self.roundabout_arc,
            self.t_intersection,
        ]
    }

    pub fn only(m: Maneuver) -> Self {
        let mut p = [0.0; 6];
        p[Maneuver::ALL.iter().position(|&x| x == m).unwrap()] = 1.0;
        Self {
            straight: p[0],
            left_turn: p[1],
            right_turn: p[2],
            stop: p[3],
            roundabout_arc: p[4],
            t_intersection: p[5],
        }
    }
}

impl Default for ManeuverMix {
    fn default() -> Self {
        Self {
            straight: 0.25,
            left_turn: 0.15,
            right_turn: 0.15,
            stop: 0.1,
            roundabout_arc: 0.1,
            t_intersection: 0.25,
        }
    }
}

/// Per-channel Gaussian noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub steering_rad: f64,
    pub pedal: f64,
    pub angular_velocity_radps: f64,
    pub linear_velocity_mps: f64,
    pub position_m: f64,
    /// Recorded future positions (label noise). Off by default.
    pub future_position_m: f64,
}

impl NoiseConfig {
    pub const NONE: Self = Self {
        steering_rad: 0.0,
        pedal: 0.0,
        angular_velocity_radps: 0.0,
        linear_velocity_mps: 0.0,
        position_m: 0.0,
        future_position_m: 0.0,
    };
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            steering_rad: 0.01,
            pedal: 0.02,
            angular_velocity_radps: 0.005,
            linear_velocity_mps: 0.05,
            position_m: 0.02,
            future_position_m: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub maneuver_mix: ManeuverMix,
    pub speed_range_mps: [f64; 2],
    pub noise: NoiseConfig,
    pub samples: usize,
    pub seed: u64,
    /// Channels replaced by standard-normal noise (information-gain controls).
    #[serde(default)]
    pub noise_only_channels: Vec<Child>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            maneuver_mix: ManeuverMix::default(),
            speed_range_mps: [4.0, 14.0],
            noise: NoiseConfig::default(),
            samples: 10_000,
            seed: 0,
            noise_only_channels: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.maneuver_mix.probabilities();
        if p.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "maneuver probabilities must be non-negative and sum to 1, got {p:?}"
            )));
        }
        let [lo, hi] = self.speed_range_mps;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!("invalid speed range {lo}..{hi} m/s")));
        }
        let n = &self.noise;
        let noise = [n.steering_rad, n.pedal, n.angular_velocity_radps, n.linear_velocity_mps, n.position_m, n.future_position_m];
        if noise.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("noise levels must be finite and non-negative".into()));
        }
        if self.samples == 0 {
            return Err(Error::InvalidConfig("at least one sample is required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub features: InputFeatures,
    pub groundtruth_future: TrajectorySegment,
    pub groundtruth_coeffs: CoeffVector,
    /// Analysis label, never fed to a predictor.
    pub maneuver: Maneuver,
    /// Speed and turn rate are constant over the whole window.
    pub constant_control: bool,
}

/// Piecewise-linear function through `(x, y)` breakpoints, constant outside.
#[derive(Debug, Clone)]
struct Profile {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl Profile {
    fn constant(y: f64) -> Self {
        Self { xs: vec![0.0], ys: vec![y] }
    }

    fn new(points: &[(f64, f64)]) -> Self {
        Self {
            xs: points.iter().map(|p| p.0).collect(),
            ys: points.iter().map(|p| p.1).collect(),
        }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if x <= self.xs[0] {
            return self.ys[0];
        }
        if x >= self.xs[n - 1] {
            return self.ys[n - 1];
        }
        let i = self.xs.partition_point(|&b| b <= x);
        let (x0, x1) = (self.xs[i - 1], self.xs[i]);
        self.ys[i - 1] + (x - x0) / (x1 - x0) * (self.ys[i] - self.ys[i - 1])
    }

    /// Exact `∫_0^x f`, negative for `x < 0`.
    fn integral_from_zero(&self, x: f64) -> f64 {
        if x < 0.0 {
            return -self.integral(x, 0.0);
        }
        self.integral(0.0, x)
    }

    fn integral(&self, a: f64, b: f64) -> f64 {
        debug_assert!(a <= b);
        let mut pts = vec![a];
        pts.extend(self.xs.iter().copied().filter(|&x| x > a && x < b));
        pts.push(b);
        pts.windows(2)
            .map(|w| 0.5 * (w[1] - w[0]) * (self.eval(w[0]) + self.eval(w[1])))
            .sum()
    }
}

/// Road curvature over arc length plus a speed profile over time.
#[derive(Debug, Clone)]
struct Scenario {
    maneuver: Maneuver,
    curvature: Profile,
    /// Second exit of a T-intersection (the one not taken).
    alt_curvature: Option<Profile>,
    speed: Profile,
}

impl Scenario {
    fn arc_length(&self, t: f64) -> f64 {
        self.speed.integral_from_zero(t)
    }

    fn heading_at_arc(profile: &Profile, s: f64) -> f64 {
        profile.integral_from_zero(s)
    }

    fn heading(&self, t: f64) -> f64 {
        Self::heading_at_arc(&self.curvature, self.arc_length(t))
    }

    fn velocity(&self, t: f64) -> (f64, f64) {
        let v = self.speed.eval(t);
        let th = self.heading(t);
        (v * th.cos(), v * th.sin())
    }

    fn accel(&self, t: f64) -> f64 {
        let h = 1e-6;
        (self.speed.eval(t + h) - self.speed.eval(t - h)) / (2.0 * h)
    }

    /// Positions on `0, ±step, …` up to `t_end` by Simpson quadrature of the
    /// velocity (time may run backwards).
    fn positions(&self, t_end: f64, step: f64) -> Vec<(f64, f64)> {
        let n = (t_end.abs() / step).round() as usize;
        let dir = t_end.signum();
        let h = dir * step / SUBSTEPS as f64;
        let mut out = vec![(0.0, 0.0)];
        let (mut x, mut y) = (0.0, 0.0);
        let mut t = 0.0;
        for i in 1..=n {
            for _ in 0..SUBSTEPS {
                // split at speed kinks so each Simpson piece is smooth
                let (lo, hi) = if h > 0.0 { (t, t + h) } else { (t + h, t) };
                let mut cuts = vec![t];
                cuts.extend(self.speed.xs.iter().copied().filter(|&b| b > lo && b < hi));
                if h < 0.0 {
                    cuts[1..].reverse();
                }
                cuts.push(t + h);
                for w in cuts.windows(2) {
                    let (t0, t1) = (w[0], w[1]);
                    let d = t1 - t0;
                    let a = self.velocity(t0);
                    let m = self.velocity(t0 + d / 2.0);
                    let b = self.velocity(t1);
                    x += d / 6.0 * (a.0 + 4.0 * m.0 + b.0);
                    y += d / 6.0 * (a.1 + 4.0 * m.1 + b.1);
                }
                t += h;
            }
            t = dir * i as f64 * step;
            out.push((x, y));
        }
        out
    }

    fn scene_features(&self) -> Vec<f64> {
        SCENE_LOOKAHEAD_M
            .iter()
            .map(|&d| {
                let main = Self::heading_at_arc(&self.curvature, d);
                match &self.alt_curvature {
                    Some(alt) => 0.5 * (main + Self::heading_at_arc(alt, d)),
                    None => main,
                }
            })
            .collect()
    }

    fn is_constant_control(&self, t0: f64, t1: f64) -> bool {
        let v0 = self.speed.eval(0.0);
        let k0 = self.curvature.eval(0.0);
        let n = ((t1 - t0) / 0.01).round() as usize;
        (0..=n).all(|i| {
            let t = t0 + i as f64 * 0.01;
            (self.speed.eval(t) - v0).abs() < 1e-12 && (self.curvature.eval(self.arc_length(t)) - k0).abs() < 1e-12
        })
    }
}

/// Curvature profile of a 90° turn with clothoid ramps starting at arc `s0`.
fn turn_profile(s0: f64, radius: f64, ramp: f64, sign: f64) -> Profile {
    let k = sign / radius;
    let hold = (FRAC_PI_2 * radius - ramp).max(0.0);
    Profile::new(&[
        (s0, 0.0),
        (s0 + ramp, k),
        (s0 + ramp + hold, k),
        (s0 + 2.0 * ramp + hold, 0.0),
    ])
}

fn draw_scenario(maneuver: Maneuver, cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Scenario {
    let [lo, hi] = cfg.speed_range_mps;
    let speed_in = |rng: &mut ChaCha8Rng, a: f64, b: f64| {
        let (a, b) = (a.max(lo), b.min(hi));
        if b > a {
            rng.random_range(a..b)
        } else {
            a.min(hi)
        }
    };
    let sign = |rng: &mut ChaCha8Rng| if rng.random::<bool>() { 1.0 } else { -1.0 };
    match maneuver {
        Maneuver::Straight => {
            let v0 = speed_in(rng, lo, hi);
            let speed = if rng.random::<bool>() {
                Profile::constant(v0)
            } else {
                let a = rng.random_range(0.5..2.0);
                let t_a = rng.random_range(-2.0..1.0);
                let dur = rng.random_range(1.0..3.0);
                Profile::new(&[(t_a, v0), (t_a + dur, v0 + a * dur)])
            };
            Scenario {
                maneuver,
                curvature: Profile::constant(0.0),
                alt_curvature: None,
                speed,
            }
        }
        Maneuver::RoundaboutArc => {
            let radius: f64 = rng.random_range(15.0..30.0);
            let v = speed_in(rng, lo, (4.0 * radius).sqrt());
            Scenario {
                maneuver,
                curvature: Profile::constant(sign(rng) / radius),
                alt_curvature: None,
                speed: Profile::constant(v),
            }
        }
        Maneuver::LeftTurn | Maneuver::RightTurn => {
            let radius: f64 = rng.random_range(8.0..15.0);
            let v = speed_in(rng, lo, (3.0 * radius).sqrt());
            let t_start = rng.random_range(-1.0..2.0);
            let ramp = rng.random_range(3.0..6.0);
            let dir = if maneuver == Maneuver::LeftTurn { 1.0 } else { -1.0 };
            Scenario {
                maneuver,
                curvature: turn_profile(v * t_start, radius, ramp, dir),
                alt_curvature: None,
                speed: Profile::constant(v),
            }
        }
        Maneuver::Stop => {
            let v_brake = speed_in(rng, 3.0, 10.0);
            let t_brake = rng.random_range(-2.0..0.0);
            let mut decel: f64 = rng.random_range(2.0..4.0);
            // come to rest inside the future window
            decel = decel.max(v_brake / (2.9 - t_brake));
            let t_stop = t_brake + v_brake / decel;
            Scenario {
                maneuver,
                curvature: Profile::constant(0.0),
                alt_curvature: None,
                speed: Profile::new(&[(t_brake, v_brake), (t_stop, 0.0)]),
            }
        }
        Maneuver::TIntersection => {
            let v0 = speed_in(rng, 8.0, 12.0);
            let v_turn = rng.random_range(4.0..6.0f64).min(v0);
            let decel = rng.random_range(1.0..2.0);
            let t_brake = rng.random_range(-1.5..-0.5);
            let t_slow = t_brake + (v0 - v_turn) / decel;
            let speed = Profile::new(&[(t_brake, v0), (t_slow, v_turn)]);
            let t_turn = rng.random_range(0.3..1.0);
            let s_turn = speed.integral_from_zero(t_turn);
            let radius = rng.random_range(6.0..10.0);
            let ramp = rng.random_range(2.0..4.0);
            let dir = sign(rng);
            Scenario {
                maneuver,
                curvature: turn_profile(s_turn, radius, ramp, dir),
                alt_curvature: Some(turn_profile(s_turn, radius, ramp, -dir)),
                speed,
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).map(|n| n.sample(rng)).unwrap_or(0.0)
    } else {
        0.0
    }
}

fn simulate(id: u64, cfg: &ScenarioConfig, past: &BasisSpec, future: &BasisSpec) -> Result<Sample> {
    let mut rng = stage_rng(cfg.seed, &format!("simgen/sample/{id}"));
    let picker = WeightedIndex::new(cfg.maneuver_mix.probabilities())
        .map_err(|e| Error::InvalidConfig(format!("maneuver mix: {e}")))?;
    let maneuver = Maneuver::ALL[picker.sample(&mut rng)];
    let sc = draw_scenario(maneuver, cfg, &mut rng);

    let step = crate::basis::GRID_STEP_S;
    let mut fut = sc.positions(future.horizon_s, step);
    if cfg.noise.future_position_m > 0.0 {
        let mut label_rng = stage_rng(cfg.seed, &format!("simgen/label-noise/{id}"));
        for p in fut.iter_mut().skip(1) {
            p.0 += gaussian(&mut label_rng, cfg.noise.future_position_m);
            p.1 += gaussian(&mut label_rng, cfg.noise.future_position_m);
        }
    }
    let future_traj = TrajectorySegment::new(
        future.future_grid(),
        fut.iter().map(|p| p.0).collect(),
        fut.iter().map(|p| p.1).collect(),
    )?;
    let mut back = sc.positions(-past.horizon_s, step);
    back.reverse();
    let n = &cfg.noise;
    let last = back.len() - 1;
    let (pxs, pys): (Vec<f64>, Vec<f64>) = back
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| {
            if i == last {
                (x, y)
            } else {
                (x + gaussian(&mut rng, n.position_m), y + gaussian(&mut rng, n.position_m))
            }
        })
        .unzip();
    let past_traj = TrajectorySegment::new(past.past_grid(), pxs, pys)?;

    let v0 = sc.speed.eval(0.0);
    let k0 = sc.curvature.eval(0.0);
    let mut features = InputFeatures {
        past_coeffs: project(&past_traj, past)?,
        steering_angle_rad: (WHEELBASE_M * k0).atan() + gaussian(&mut rng, n.steering_rad),
        pedal: ((sc.accel(0.0) / PEDAL_FULL_ACCEL).clamp(0.0, 1.0) + gaussian(&mut rng, n.pedal)).clamp(0.0, 1.0),
        angular_velocity_radps: v0 * k0 + gaussian(&mut rng, n.angular_velocity_radps),
        linear_velocity_mps: (v0 + gaussian(&mut rng, n.linear_velocity_mps)).max(0.0),
        scene_features: sc.scene_features(),
    };
    if !cfg.noise_only_channels.is_empty() {
        let mut noise_rng = stage_rng(cfg.seed, &format!("simgen/noise-channels/{id}"));
        let mut draw = |len: usize| -> Vec<f64> { (0..len).map(|_| StandardNormal.sample(&mut noise_rng)).collect() };
        for &c in &cfg.noise_only_channels {
            match c {
                Child::Dynamics => {
                    let v = draw(past.flat_dim());
                    features.past_coeffs = CoeffVector::from_flat(&v, *past)?;
                }
                Child::Canbus => {
                    let v = draw(2);
                    features.steering_angle_rad = v[0];
                    features.pedal = v[1];
                }
                Child::Imu => {
                    let v = draw(2);
                    features.angular_velocity_radps = v[0];
                    features.linear_velocity_mps = v[1].abs();
                }
                Child::Scene => features.scene_features = draw(SCENE_DIM),
            }
        }
    }
    Ok(Sample {
        id,
        groundtruth_coeffs: project(&future_traj, future)?,
        groundtruth_future: future_traj,
        maneuver: sc.maneuver,
        constant_control: sc.is_constant_control(-past.horizon_s, future.horizon_s),
        features,
    })
}

/// Generates `cfg.samples` samples; sample `i` depends only on `(seed, i)`.
pub fn generate(cfg: &ScenarioConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    let past = BasisSpec::past();
    let future = BasisSpec::future();
    (0..cfg.samples as u64)
        .into_par_iter()
        .map(|i| simulate(i, cfg, &past, &future))
        .collect()
}

/// Seeded shuffle into three disjoint parts with sizes proportional to
/// `fractions` (the last part takes the rounding remainder).
pub fn split(data: &[Sample], fractions: [f64; 3], seed: u64) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    if fractions.iter().any(|f| !(*f > 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidFractions(format!(
            "fractions must be positive and sum to 1, got {fractions:?}"
        )));
    }
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stage_rng(seed, "split"));
    let n0 = (fractions[0] * n as f64).round() as usize;
    let n1 = ((fractions[1] * n as f64).round() as usize).min(n - n0);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..n0]), pick(&order[n0..n0 + n1]), pick(&order[n0 + n1..])))
}

/// Samples per maneuver, in [`Maneuver::ALL`] order.
pub fn maneuver_histogram(data: &[Sample]) -> Vec<(Maneuver, usize)> {
    Maneuver::ALL
        .iter()
        .map(|&m| (m, data.iter().filter(|s| s.maneuver == m).count()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictors::odometry_predict;
    use std::collections::HashSet;

    fn cfg(mix: ManeuverMix, noise: NoiseConfig, samples: usize) -> ScenarioConfig {
        ScenarioConfig {
            maneuver_mix: mix,
            noise,
            samples,
            seed: 17,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn profile_integral_is_exact_for_piecewise_linear() {
        let p = Profile::new(&[(1.0, 0.0), (3.0, 2.0)]);
        // 0 on [0,1], ramp to 2 on [1,3] (area 2), constant 2 on [3,4]
        assert!((p.integral_from_zero(4.0) - 4.0).abs() < 1e-12);
        assert!((p.integral_from_zero(-1.0)).abs() < 1e-12);
        assert!((p.integral_from_zero(2.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_noise_straight_matches_odometry() {
        let c = cfg(ManeuverMix::only(Maneuver::Straight), NoiseConfig::NONE, 40);
        let data = generate(&c).unwrap();
        let mut constant = 0;
        for s in data.iter().filter(|s| s.constant_control) {
            constant += 1;
            let v = s.features.linear_velocity_mps;
            let gt = &s.groundtruth_future;
            for (i, &t) in gt.times.iter().enumerate() {
                assert!((gt.xs[i] - v * t).abs() < 1e-9 && gt.ys[i].abs() < 1e-12);
            }
            let odo = odometry_predict(&s.features, &gt.times);
            let last = gt.len() - 1;
            assert!((odo.xs[last] - gt.xs[last]).hypot(odo.ys[last] - gt.ys[last]) < 1e-6);
        }
        assert!(constant > 5);
    }

    #[test]
    fn zero_noise_roundabout_matches_odometry() {
        let c = cfg(ManeuverMix::only(Maneuver::RoundaboutArc), NoiseConfig::NONE, 30);
        for s in generate(&c).unwrap() {
            assert!(s.constant_control);
            let gt = &s.groundtruth_future;
            let odo = odometry_predict(&s.features, &gt.times);
            for i in 0..gt.len() {
                assert!((odo.xs[i] - gt.xs[i]).hypot(odo.ys[i] - gt.ys[i]) < 1e-6);
            }
        }
    }

    #[test]
    fn stop_respects_kinematic_bound() {
        let c = cfg(ManeuverMix::only(Maneuver::Stop), NoiseConfig::NONE, 60);
        let mut moving = 0;
        for s in generate(&c).unwrap() {
            let mut rng = stage_rng(c.seed, &format!("simgen/sample/{}", s.id));
            let picker = WeightedIndex::new(c.maneuver_mix.probabilities()).unwrap();
            let _ = picker.sample(&mut rng);
            let sc = draw_scenario(Maneuver::Stop, &c, &mut rng);
            let v0 = sc.speed.eval(0.0);
            assert_eq!(sc.speed.eval(3.0), 0.0);
            let gt = &s.groundtruth_future;
            let len = gt.path_length();
            if v0 > 0.0 {
                moving += 1;
                let decel = (sc.speed.ys[0] - sc.speed.ys[1]) / (sc.speed.xs[1] - sc.speed.xs[0]);
                let bound = v0 * v0 / (2.0 * decel);
                assert!(len < bound + 1e-9, "len {len} bound {bound}");
            } else {
                assert!(len < 1e-9);
            }
            // at rest by the end of the window
            let n = gt.len();
            assert!((gt.xs[n - 1] - gt.xs[n - 2]).abs() < 1e-9);
        }
        assert!(moving > 20);
    }

    #[test]
    fn generation_is_deterministic() {
        let c = cfg(ManeuverMix::default(), NoiseConfig::default(), 50);
        let a = serde_json::to_string(&generate(&c).unwrap()).unwrap();
        let b = serde_json::to_string(&generate(&c).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn groundtruth_coeffs_are_projection_of_future() {
        let c = cfg(ManeuverMix::default(), NoiseConfig::default(), 30);
        for s in generate(&c).unwrap() {
            let p = project(&s.groundtruth_future, &BasisSpec::future()).unwrap();
            assert_eq!(p, s.groundtruth_coeffs);
            assert_eq!(s.groundtruth_future.point(0), (0.0, 0.0));
            assert_eq!(s.features.scene_features.len(), SCENE_DIM);
        }
    }

    #[test]
    fn scene_features_ignore_noise() {
        let quiet = generate(&cfg(ManeuverMix::default(), NoiseConfig::NONE, 40)).unwrap();
        let noisy = generate(&cfg(ManeuverMix::default(), NoiseConfig::default(), 40)).unwrap();
        for (a, b) in quiet.iter().zip(&noisy) {
            assert_eq!(a.features.scene_features, b.features.scene_features);
            assert_eq!(a.groundtruth_future, b.groundtruth_future);
        }
    }

    #[test]
    fn turns_defeat_constant_turn_rate() {
        let mix = ManeuverMix {
            left_turn: 0.5,
            right_turn: 0.5,
            ..ManeuverMix::only(Maneuver::Straight)
        };
        let mix = ManeuverMix { straight: 0.0, ..mix };
        let data = generate(&cfg(mix, NoiseConfig::default(), 200)).unwrap();
        let errs: Vec<f64> = data
            .iter()
            .filter(|s| !s.constant_control)
            .map(|s| {
                let gt = &s.groundtruth_future;
                let odo = odometry_predict(&s.features, &gt.times);
                let n = gt.len() - 1;
                (odo.xs[n] - gt.xs[n]).hypot(odo.ys[n] - gt.ys[n])
            })
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!(mean > 1.0, "mean odometry error {mean}");
    }

    #[test]
    fn t_intersection_is_bimodal_and_hidden() {
        let data = generate(&cfg(ManeuverMix::only(Maneuver::TIntersection), NoiseConfig::NONE, 200)).unwrap();
        let left = data.iter().filter(|s| *s.groundtruth_future.ys.last().unwrap() > 0.0).count();
        assert!(left > 70 && left < 130, "{left}");
        for s in &data {
            assert!(s.features.scene_features.iter().all(|v| v.abs() < 1e-12));
            assert!(s.groundtruth_future.ys.last().unwrap().abs() > 1.0);
        }
    }

    #[test]
    fn noise_only_channels_are_replaced() {
        let mut c = cfg(ManeuverMix::default(), NoiseConfig::default(), 30);
        let base = generate(&c).unwrap();
        c.noise_only_channels = vec![Child::Canbus];
        let noisy = generate(&c).unwrap();
        for (a, b) in base.iter().zip(&noisy) {
            assert_eq!(a.features.past_coeffs, b.features.past_coeffs);
            assert_eq!(a.features.linear_velocity_mps, b.features.linear_velocity_mps);
            assert_ne!(a.features.steering_angle_rad, b.features.steering_angle_rad);
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = ScenarioConfig::default();
        c.maneuver_mix.straight = 0.9;
        assert!(matches!(generate(&c), Err(Error::InvalidConfig(_))));
        let c = ScenarioConfig {
            speed_range_mps: [0.0, 3.0],
            ..ScenarioConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn split_sizes_disjoint_and_deterministic() {
        let data = generate(&cfg(ManeuverMix::default(), NoiseConfig::default(), 100)).unwrap();
        let (a, b, c) = split(&data, [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (50, 25, 25));
        let ids: HashSet<u64> = a.iter().chain(&b).chain(&c).map(|s| s.id).collect();
        assert_eq!(ids.len(), 100);
        let (a2, _, _) = split(&data, [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!(a, a2);
        assert!(matches!(split(&data, [0.5, 0.5, 0.0], 3), Err(Error::InvalidFractions(_))));
        assert!(matches!(split(&data, [0.5, 0.3, 0.3], 3), Err(Error::InvalidFractions(_))));
    }
}
