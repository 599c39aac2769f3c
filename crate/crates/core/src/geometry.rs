//! Rigid-motion algebra in plain `f64`.
//!
//! Euler convention, used everywhere in the crate: `psi = [roll, pitch, yaw]`
//! with `R = Rz(yaw) * Ry(pitch) * Rx(roll)` (intrinsic Z-Y-X). A positive
//! yaw of π/2 maps the x-axis onto the y-axis.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];
pub type Vec3 = [f64; 3];

/// Minimum distance of |pitch| from π/2 accepted by Euler extraction.
pub const GIMBAL_MARGIN: f64 = 1e-6;

/// Relative motion between two frames: translation in meters, Euler angles
/// in radians.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDelta {
    pub t: Vec3,
    pub psi: Vec3,
}

impl PoseDelta {
    pub fn new(t: Vec3, psi: Vec3) -> Self {
        Self { t, psi }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.t[0], self.t[1], self.t[2], self.psi[0], self.psi[1], self.psi[2],
        ]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            t: [v[0], v[1], v[2]],
            psi: [v[3], v[4], v[5]],
        }
    }
}

pub const IDENTITY3: Mat3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: &Vec3) -> Vec3 {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

pub fn determinant(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Closed-form `Rz(yaw) Ry(pitch) Rx(roll)`.
pub fn euler_to_rotation(psi: &Vec3) -> Mat3 {
    let (sr, cr) = psi[0].sin_cos();
    let (sp, cp) = psi[1].sin_cos();
    let (sy, cy) = psi[2].sin_cos();
    [
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ]
}

/// Inverse of [`euler_to_rotation`] away from gimbal lock.
pub fn rotation_to_euler(r: &Mat3) -> Result<Vec3> {
    let pitch = (-r[2][0]).clamp(-1.0, 1.0).asin();
    if std::f64::consts::FRAC_PI_2 - pitch.abs() <= GIMBAL_MARGIN {
        return Err(Error::Degenerate(format!(
            "pitch {pitch} within {GIMBAL_MARGIN} rad of ±π/2"
        )));
    }
    let roll = r[2][1].atan2(r[2][2]);
    let yaw = r[1][0].atan2(r[0][0]);
    Ok([roll, pitch, yaw])
}

/// Rotation angle of `r` in radians. Equal to `acos((trace - 1) / 2)`,
/// evaluated as `atan2(|axis|, (trace - 1) / 2)` so that exactly symmetric
/// inputs give exactly 0.
pub fn rotation_angle(r: &Mat3) -> f64 {
    let c = 0.5 * (r[0][0] + r[1][1] + r[2][2] - 1.0);
    let axis = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    let s = 0.5 * (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    s.atan2(c)
}

/// Homogeneous rigid motion `[R t; 0 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Se3 {
    r: Mat3,
    t: Vec3,
}

impl Default for Se3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            r: IDENTITY3,
            t: [0.0; 3],
        }
    }

    /// Builds a transform, checking `RᵀR = I` and `det R = 1` within 1e-9.
    pub fn new(r: Mat3, t: Vec3) -> Result<Self> {
        let rtr = mat_mul(&transpose(&r), &r);
        let ortho = (0..3).all(|i| (0..3).all(|j| (rtr[i][j] - IDENTITY3[i][j]).abs() <= 1e-9));
        if !ortho || (determinant(&r) - 1.0).abs() > 1e-9 {
            return Err(Error::Contract(format!("not a rotation matrix: {r:?}")));
        }
        Ok(Self { r, t })
    }

    /// Skips the rotation check; for values already known to be rigid.
    pub(crate) fn from_parts_unchecked(r: Mat3, t: Vec3) -> Self {
        Self { r, t }
    }

    pub fn from_matrix(m: &[[f64; 4]; 4]) -> Result<Self> {
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Contract(format!("bottom row {:?} is not [0 0 0 1]", m[3])));
        }
        let r = [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ];
        Self::new(r, [m[0][3], m[1][3], m[2][3]])
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn translation(&self) -> &Vec3 {
        &self.t
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        let (r, t) = (&self.r, &self.t);
        [
            [r[0][0], r[0][1], r[0][2], t[0]],
            [r[1][0], r[1][1], r[1][2], t[1]],
            [r[2][0], r[2][1], r[2][2], t[2]],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    /// `self * other`.
    pub fn compose(&self, other: &Se3) -> Se3 {
        let rt = mat_vec(&self.r, &other.t);
        Se3 {
            r: mat_mul(&self.r, &other.r),
            t: [rt[0] + self.t[0], rt[1] + self.t[1], rt[2] + self.t[2]],
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = transpose(&self.r);
        let t = mat_vec(&rt, &self.t);
        Se3 {
            r: rt,
            t: [-t[0], -t[1], -t[2]],
        }
    }

    /// Gram-Schmidt on the rotation columns.
    pub fn orthonormalized(&self) -> Se3 {
        let col = |j: usize| [self.r[0][j], self.r[1][j], self.r[2][j]];
        let dot = |a: &Vec3, b: &Vec3| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let norm = |a: Vec3| {
            let n = dot(&a, &a).sqrt();
            [a[0] / n, a[1] / n, a[2] / n]
        };
        let x = norm(col(0));
        let y0 = col(1);
        let d = dot(&x, &y0);
        let y = norm([y0[0] - d * x[0], y0[1] - d * x[1], y0[2] - d * x[2]]);
        let z = [
            x[1] * y[2] - x[2] * y[1],
            x[2] * y[0] - x[0] * y[2],
            x[0] * y[1] - x[1] * y[0],
        ];
        Se3 {
            r: [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]],
            t: self.t,
        }
    }
}

/// Builds `[R(psi) t; 0 1]`.
pub fn pose_to_transform(p: &PoseDelta) -> Se3 {
    Se3 {
        r: euler_to_rotation(&p.psi),
        t: p.t,
    }
}

/// Inverse of [`pose_to_transform`].
pub fn transform_to_pose(t: &Se3) -> Result<PoseDelta> {
    Ok(PoseDelta {
        t: t.t,
        psi: rotation_to_euler(&t.r)?,
    })
}

/// Left-to-right product `T_1 · T_2 ⋯ T_k`.
pub fn compose_chain(transforms: &[Se3]) -> Result<Se3> {
    let (first, rest) = transforms
        .split_first()
        .ok_or_else(|| Error::Contract("compose_chain needs at least one transform".into()))?;
    Ok(rest.iter().fold(*first, |acc, t| acc.compose(t)))
}
