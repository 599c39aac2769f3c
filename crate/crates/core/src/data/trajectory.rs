//! Smooth synthetic trajectories and the IMU readings they induce.
//!
//! Attitude and heading-frame velocity are seeded mixtures of cosines, so
//! every derivative the IMU needs is analytic. Position is the integral of
//! world velocity, evaluated with Gauss-Legendre quadrature on each IMU
//! sub-interval.

use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{euler_to_rotation, mat_vec, transpose, Se3, Vec3};
use crate::{Error, Result};

/// Standard gravity along world -z (z up).
pub const GRAVITY: f64 = 9.81;

/// Closest approach of |pitch| to π/2 that a spec may allow.
pub const PITCH_MARGIN: f64 = 0.1;

const COMPONENTS: usize = 3;
const OMEGA_RANGE: (f64, f64) = (0.5, 3.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionSpec {
    /// Mean velocity in the heading (yaw-only) frame, m/s.
    pub mean_velocity: Vec3,
    /// Bound on the oscillating part of forward speed, m/s. Lateral and
    /// vertical parts use half and a fifth of it.
    pub velocity_amplitude: f64,
    pub mean_yaw_rate: f64,
    /// Bound on the oscillating part of yaw rate, rad/s.
    pub yaw_rate_amplitude: f64,
    /// Bound on |roll| and |pitch|, rad.
    pub tilt_amplitude: f64,
    pub gyro_noise_std: f64,
    pub accel_noise_std: f64,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            mean_velocity: [1.0, 0.0, 0.0],
            velocity_amplitude: 0.5,
            mean_yaw_rate: 0.0,
            yaw_rate_amplitude: 0.3,
            tilt_amplitude: 0.05,
            gyro_noise_std: 0.0,
            accel_noise_std: 0.0,
        }
    }
}

impl MotionSpec {
    /// All amplitudes zero: the platform never moves.
    pub fn stationary() -> Self {
        Self {
            mean_velocity: [0.0; 3],
            velocity_amplitude: 0.0,
            mean_yaw_rate: 0.0,
            yaw_rate_amplitude: 0.0,
            tilt_amplitude: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub seed: u64,
    pub duration_s: f64,
    pub image_rate_hz: u32,
    pub imu_rate_hz: u32,
    pub motion: MotionSpec,
}

impl TrajectorySpec {
    pub fn new(seed: u64, duration_s: f64, motion: MotionSpec) -> Self {
        Self {
            seed,
            duration_s,
            image_rate_hz: 10,
            imu_rate_hz: 100,
            motion,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_rate_hz == 0 || self.imu_rate_hz == 0 {
            return Err(Error::Config("sensor rates must be positive".into()));
        }
        if !self.imu_rate_hz.is_multiple_of(self.image_rate_hz) {
            return Err(Error::Config(format!(
                "imu rate {} Hz is not a multiple of image rate {} Hz",
                self.imu_rate_hz, self.image_rate_hz
            )));
        }
        if !(self.duration_s >= 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!("bad duration {}", self.duration_s)));
        }
        let m = &self.motion;
        let bounds = [
            m.velocity_amplitude,
            m.yaw_rate_amplitude,
            m.tilt_amplitude,
            m.gyro_noise_std,
            m.accel_noise_std,
        ];
        let finite = m.mean_velocity.iter().all(|v| v.is_finite())
            && m.mean_yaw_rate.is_finite()
            && bounds.iter().all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::Config("motion amplitudes must be finite and nonnegative".into()));
        }
        if m.tilt_amplitude >= FRAC_PI_2 - PITCH_MARGIN {
            return Err(Error::Config(format!(
                "tilt amplitude {} would bring pitch within {PITCH_MARGIN} rad of ±π/2",
                m.tilt_amplitude
            )));
        }
        Ok(())
    }

    /// IMU samples per image interval, both endpoints included.
    pub fn imu_window(&self) -> usize {
        self.samples_per_interval() + 1
    }

    fn samples_per_interval(&self) -> usize {
        (self.imu_rate_hz / self.image_rate_hz) as usize
    }

    /// Number of image frames covering `duration_s`.
    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.image_rate_hz as f64 + 1e-9).floor() as usize + 1
    }
}

/// `mean + Σ a_k cos(ω_k t + φ_k)`.
#[derive(Clone, Debug)]
struct Mixture {
    mean: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Mixture {
    /// Term amplitudes are normalized so `|f - mean| <= amplitude` always.
    fn random(rng: &mut ChaCha8Rng, mean: f64, amplitude: f64) -> Self {
        let raw: Vec<(f64, f64, f64)> = (0..COMPONENTS)
            .map(|_| {
                (
                    rng.random_range(0.2..1.0),
                    rng.random_range(OMEGA_RANGE.0..OMEGA_RANGE.1),
                    rng.random_range(0.0..TAU),
                )
            })
            .collect();
        let total: f64 = raw.iter().map(|t| t.0).sum();
        let terms = raw
            .into_iter()
            .map(|(a, w, p)| (amplitude * a / total, w, p))
            .filter(|t| t.0 != 0.0)
            .collect();
        Self { mean, terms }
    }

    fn value(&self, t: f64) -> f64 {
        self.mean + self.terms.iter().map(|(a, w, p)| a * (w * t + p).cos()).sum::<f64>()
    }

    fn derivative(&self, t: f64) -> f64 {
        -self.terms.iter().map(|(a, w, p)| a * w * (w * t + p).sin()).sum::<f64>()
    }

    /// Integral from 0 to `t`.
    fn integral(&self, t: f64) -> f64 {
        self.mean * t
            + self
                .terms
                .iter()
                .map(|(a, w, p)| a / w * ((w * t + p).sin() - p.sin()))
                .sum::<f64>()
    }
}

/// Continuous-time motion model built from a [`TrajectorySpec`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    spec: TrajectorySpec,
    yaw_rate: Mixture,
    roll: Mixture,
    pitch: Mixture,
    velocity: [Mixture; 3],
    /// Positions at every IMU sample time.
    positions: Vec<Vec3>,
}

const GAUSS_NODES: [f64; 4] = [
    -0.861_136_311_594_052_6,
    -0.339_981_043_584_856_3,
    0.339_981_043_584_856_3,
    0.861_136_311_594_052_6,
];
const GAUSS_WEIGHTS: [f64; 4] = [
    0.347_854_845_137_453_9,
    0.652_145_154_862_546_1,
    0.652_145_154_862_546_1,
    0.347_854_845_137_453_9,
];

impl Trajectory {
    pub fn new(spec: &TrajectorySpec) -> Result<Self> {
        spec.validate()?;
        let m = &spec.motion;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let yaw_rate = Mixture::random(&mut rng, m.mean_yaw_rate, m.yaw_rate_amplitude);
        let roll = Mixture::random(&mut rng, 0.0, m.tilt_amplitude);
        let pitch = Mixture::random(&mut rng, 0.0, m.tilt_amplitude);
        let velocity = [
            Mixture::random(&mut rng, m.mean_velocity[0], m.velocity_amplitude),
            Mixture::random(&mut rng, m.mean_velocity[1], 0.5 * m.velocity_amplitude),
            Mixture::random(&mut rng, m.mean_velocity[2], 0.2 * m.velocity_amplitude),
        ];
        let mut traj = Self {
            spec: spec.clone(),
            yaw_rate,
            roll,
            pitch,
            velocity,
            positions: Vec::new(),
        };
        let dt = 1.0 / spec.imu_rate_hz as f64;
        let n = (spec.frame_count() - 1) * spec.samples_per_interval() + 1;
        let mut p = [0.0; 3];
        traj.positions.push(p);
        for j in 1..n {
            let (t0, t1) = ((j - 1) as f64 * dt, j as f64 * dt);
            let (mid, half) = (0.5 * (t0 + t1), 0.5 * (t1 - t0));
            for (x, w) in GAUSS_NODES.iter().zip(GAUSS_WEIGHTS) {
                let v = traj.velocity_world(mid + half * x);
                for k in 0..3 {
                    p[k] += half * w * v[k];
                }
            }
            traj.positions.push(p);
        }
        Ok(traj)
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    /// `[roll, pitch, yaw]` at time `t`.
    pub fn euler(&self, t: f64) -> Vec3 {
        [self.roll.value(t), self.pitch.value(t), self.yaw_rate.integral(t)]
    }

    pub fn euler_rate(&self, t: f64) -> Vec3 {
        [self.roll.derivative(t), self.pitch.derivative(t), self.yaw_rate.value(t)]
    }

    fn heading_velocity(&self, t: f64) -> Vec3 {
        [
            self.velocity[0].value(t),
            self.velocity[1].value(t),
            self.velocity[2].value(t),
        ]
    }

    /// Rz(yaw) applied to the heading-frame velocity.
    pub fn velocity_world(&self, t: f64) -> Vec3 {
        let yaw = self.yaw_rate.integral(t);
        let (s, c) = yaw.sin_cos();
        let v = self.heading_velocity(t);
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    pub fn acceleration_world(&self, t: f64) -> Vec3 {
        let yaw = self.yaw_rate.integral(t);
        let rate = self.yaw_rate.value(t);
        let (s, c) = yaw.sin_cos();
        let v = self.heading_velocity(t);
        let dv = [
            self.velocity[0].derivative(t) - rate * v[1],
            self.velocity[1].derivative(t) + rate * v[0],
            self.velocity[2].derivative(t),
        ];
        [c * dv[0] - s * dv[1], s * dv[0] + c * dv[1], dv[2]]
    }

    /// Body-frame angular velocity from Z-Y-X Euler rates.
    pub fn gyro(&self, t: f64) -> Vec3 {
        let [roll, pitch, _] = self.euler(t);
        let [dr, dp, dy] = self.euler_rate(t);
        let (sr, cr) = roll.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        [
            dr - dy * sp,
            dp * cr + dy * cp * sr,
            -dp * sr + dy * cp * cr,
        ]
    }

    /// Body-frame specific force `Rᵀ (a - g)` with `g = (0, 0, -9.81)`.
    pub fn specific_force(&self, t: f64) -> Vec3 {
        let r = euler_to_rotation(&self.euler(t));
        let a = self.acceleration_world(t);
        mat_vec(&transpose(&r), &[a[0], a[1], a[2] + GRAVITY])
    }

    /// World-from-body pose at IMU sample `j`.
    fn pose_at_sample(&self, j: usize) -> Se3 {
        let t = j as f64 / self.spec.imu_rate_hz as f64;
        Se3::from_parts_unchecked(euler_to_rotation(&self.euler(t)), self.positions[j])
    }

    /// Ground-truth poses at the image rate.
    pub fn frame_poses(&self) -> Vec<Se3> {
        let r = self.spec.samples_per_interval();
        (0..self.spec.frame_count())
            .map(|k| self.pose_at_sample(k * r))
            .collect()
    }

    /// One `[gyro; accel]` row per IMU sample, with optional Gaussian noise.
    pub fn imu_samples(&self) -> Vec<[f64; 6]> {
        let m = &self.spec.motion;
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(1);
        let gyro_noise = Normal::new(0.0, m.gyro_noise_std).expect("validated std");
        let accel_noise = Normal::new(0.0, m.accel_noise_std).expect("validated std");
        (0..self.positions.len())
            .map(|j| {
                let t = j as f64 / self.spec.imu_rate_hz as f64;
                let (w, f) = (self.gyro(t), self.specific_force(t));
                let mut row = [w[0], w[1], w[2], f[0], f[1], f[2]];
                if m.gyro_noise_std > 0.0 {
                    for v in &mut row[..3] {
                        *v += gyro_noise.sample(&mut rng);
                    }
                }
                if m.accel_noise_std > 0.0 {
                    for v in &mut row[3..] {
                        *v += accel_noise.sample(&mut rng);
                    }
                }
                row
            })
            .collect()
    }

    /// IMU rows grouped per image interval; consecutive windows share
    /// their boundary sample.
    pub fn imu_windows(&self) -> Vec<Vec<[f64; 6]>> {
        let rows = self.imu_samples();
        let r = self.spec.samples_per_interval();
        (0..self.spec.frame_count() - 1)
            .map(|i| rows[i * r..=(i + 1) * r].to_vec())
            .collect()
    }
}

/// Poses of the trajectory described by `spec`, at the image rate.
pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<Se3>> {
    Ok(Trajectory::new(spec)?.frame_poses())
}
