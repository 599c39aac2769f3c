//! Synthetic sequences, the dataset container and KITTI pose files.

mod dataset;
mod kitti;
mod render;
mod trajectory;

pub use dataset::{read_dataset, write_dataset, DatasetManifest, SequenceRecord, FORMAT_VERSION};
pub use kitti::{format_pose_line, parse_pose_line, read_kitti_poses, write_kitti_poses};
pub use render::{pair_texture_seed, render_frame_pair, texture, warp_image, warp_magnitude};
pub use trajectory::{
    generate_trajectory, MotionSpec, Trajectory, TrajectorySpec, GRAVITY, PITCH_MARGIN,
};

use emavio_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::geometry::{transform_to_pose, PoseDelta, Se3};
use crate::{Error, Result};

/// Reference and target images, each `[C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FramePair {
    pub reference: Tensor,
    pub target: Tensor,
}

/// IMU samples of one frame interval, `[6, L]`, rows
/// `gyro_x, gyro_y, gyro_z, acc_x, acc_y, acc_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    pub samples: Tensor,
}

impl ImuWindow {
    pub fn from_rows(rows: &[[f64; 6]]) -> Self {
        let l = rows.len();
        let mut data = vec![0.0; 6 * l];
        for (t, row) in rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                data[c * l + t] = *v;
            }
        }
        Self {
            samples: Tensor::new(&[6, l], data).expect("nonempty window"),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sample `t` as `[gyro; accel]`.
    pub fn row(&self, t: usize) -> [f64; 6] {
        let l = self.len();
        std::array::from_fn(|c| self.samples.data()[c * l + t])
    }
}

/// One training sequence of `n` frames: `n - 1` frame pairs with their IMU
/// windows and relative poses, plus the first-to-last pose.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: u32,
    /// World-from-body ground truth, one per frame.
    pub poses: Vec<Se3>,
    pub frames: Vec<FramePair>,
    pub imu: Vec<ImuWindow>,
    pub gt_rel: Vec<PoseDelta>,
    pub gt_seq: PoseDelta,
}

impl SequenceSample {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn pair_count(&self) -> usize {
        self.gt_rel.len()
    }
}

/// Everything needed to regenerate a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// Sequence `i` uses trajectory and texture seed `seed + i`.
    pub seed: u64,
    pub sequences: usize,
    /// Frames per sequence (n).
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels_per_meter: f64,
    pub image_rate_hz: u32,
    pub imu_rate_hz: u32,
    pub motion: MotionSpec,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            sequences: 32,
            frames: 5,
            channels: 1,
            height: 32,
            width: 32,
            pixels_per_meter: 20.0,
            image_rate_hz: 10,
            imu_rate_hz: 100,
            motion: MotionSpec::default(),
        }
    }
}

impl DataSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: DataSpec = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 {
            return Err(Error::Config("data.frames must be at least 2".into()));
        }
        if self.sequences == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(
                "data.sequences and image dimensions must be positive".into(),
            ));
        }
        if !(self.pixels_per_meter > 0.0 && self.pixels_per_meter.is_finite()) {
            return Err(Error::Config("data.pixels_per_meter must be positive".into()));
        }
        self.trajectory(0).validate()
    }

    pub fn imu_window(&self) -> usize {
        self.trajectory(0).imu_window()
    }

    pub fn trajectory(&self, index: usize) -> TrajectorySpec {
        TrajectorySpec {
            seed: self.seed.wrapping_add(index as u64),
            duration_s: (self.frames - 1) as f64 / self.image_rate_hz.max(1) as f64,
            image_rate_hz: self.image_rate_hz,
            imu_rate_hz: self.imu_rate_hz,
            motion: self.motion.clone(),
        }
    }
}

/// Relative pose `a⁻¹ b`.
pub fn relative_pose(a: &Se3, b: &Se3) -> Result<PoseDelta> {
    transform_to_pose(&a.inverse().compose(b))
}

/// Generates sequence `index` of `spec`.
pub fn generate_sequence(spec: &DataSpec, index: usize) -> Result<SequenceSample> {
    spec.validate()?;
    let traj_spec = spec.trajectory(index);
    let traj = Trajectory::new(&traj_spec)?;
    let poses = traj.frame_poses();
    if poses.len() != spec.frames {
        return Err(Error::Contract(format!(
            "trajectory produced {} frames, expected {}",
            poses.len(),
            spec.frames
        )));
    }
    let gt_rel = poses
        .windows(2)
        .map(|w| relative_pose(&w[0], &w[1]))
        .collect::<Result<Vec<_>>>()?;
    let gt_seq = relative_pose(&poses[0], &poses[poses.len() - 1])?;
    let texture_seed = traj_spec.seed;
    let frames = gt_rel
        .iter()
        .enumerate()
        .map(|(i, rel)| {
            render_frame_pair(
                rel,
                pair_texture_seed(texture_seed, i),
                spec.channels,
                spec.height,
                spec.width,
                spec.pixels_per_meter,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let imu = traj
        .imu_windows()
        .iter()
        .map(|rows| {
            let rounded: Vec<[f64; 6]> = rows
                .iter()
                .map(|r| r.map(|v| v as f32 as f64))
                .collect();
            ImuWindow::from_rows(&rounded)
        })
        .collect();
    Ok(SequenceSample {
        id: index as u32,
        poses,
        frames,
        imu,
        gt_rel,
        gt_seq,
    })
}

/// All sequences of `spec`, in index order.
pub fn generate_dataset(spec: &DataSpec) -> Result<Vec<SequenceSample>> {
    (0..spec.sequences).map(|i| generate_sequence(spec, i)).collect()
}
