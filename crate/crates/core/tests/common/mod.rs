#![allow(dead_code)]

use emavio::geometry::{PoseDelta, Se3};
use nalgebra::{Matrix3, Matrix4, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;

pub fn to_na(t: &Se3) -> Matrix4<f64> {
    let m = t.matrix();
    Matrix4::from_fn(|i, j| m[i][j])
}

pub fn from_na(m: &Matrix4<f64>) -> Se3 {
    Se3::from_matrix(&std::array::from_fn(|i| std::array::from_fn(|j| m[(i, j)]))).unwrap()
}

/// `Rz(yaw) Ry(pitch) Rx(roll)` built by nalgebra.
pub fn na_rotation(psi: &[f64; 3]) -> Matrix3<f64> {
    Rotation3::from_euler_angles(psi[0], psi[1], psi[2]).into_inner()
}

pub fn na_pose(p: &PoseDelta) -> Matrix4<f64> {
    let mut m = Matrix4::identity();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&na_rotation(&p.psi));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&Vector3::from(p.t));
    m
}

pub fn max_abs(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn random_pose(rng: &mut impl Rng, t_scale: f64, angle: f64) -> PoseDelta {
    PoseDelta::new(
        std::array::from_fn(|_| rng.random_range(-t_scale..t_scale)),
        std::array::from_fn(|_| rng.random_range(-angle..angle)),
    )
}

/// Bit-level equality through the shortest round-trip formatting.
pub fn same_bits<T: std::fmt::Debug>(a: &T, b: &T) -> bool {
    format!("{a:?}") == format!("{b:?}")
}

/// Independent drift evaluator on 4x4 matrices. Returns
/// `(length, t_rel %, r_rel deg/100m, segments)` per length with segments.
pub fn reference_drift(pred: &[Matrix4<f64>], gt: &[Matrix4<f64>], lengths: &[f64]) -> Vec<(f64, f64, f64, usize)> {
    let mut dist = vec![0.0];
    for w in gt.windows(2) {
        let d = w[1].fixed_view::<3, 1>(0, 3) - w[0].fixed_view::<3, 1>(0, 3);
        dist.push(dist.last().unwrap() + d.norm());
    }
    let mut out = Vec::new();
    for &len in lengths {
        let (mut t_sum, mut r_sum, mut n) = (0.0, 0.0, 0);
        for i in 0..gt.len() {
            let Some(j) = (i..gt.len()).find(|&j| dist[j] >= dist[i] + len) else {
                continue;
            };
            let dg = gt[i].try_inverse().unwrap() * gt[j];
            let dp = pred[i].try_inverse().unwrap() * pred[j];
            let e = dg.try_inverse().unwrap() * dp;
            let rot = e.fixed_view::<3, 3>(0, 0).into_owned();
            let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
            let angle = 2.0 * q.imag().norm().atan2(q.w.abs());
            t_sum += e.fixed_view::<3, 1>(0, 3).norm() / len * 100.0;
            r_sum += angle.to_degrees() / len * 100.0;
            n += 1;
        }
        if n > 0 {
            out.push((len, t_sum / n as f64, r_sum / n as f64, n));
        }
    }
    out
}

/// Smooth planar-ish ground truth and a perturbed prediction, both as
/// matrices accumulated by nalgebra.
pub fn smooth_pair(rng: &mut impl Rng, steps: usize) -> (Vec<Matrix4<f64>>, Vec<Matrix4<f64>>) {
    let (mut g, mut p) = (Matrix4::identity(), Matrix4::identity());
    let (mut gt, mut pred) = (vec![g], vec![p]);
    for k in 0..steps {
        let yaw = 0.05 * (k as f64 * 0.05).sin();
        let rel = PoseDelta::new([1.0, 0.02 * (k as f64 * 0.1).cos(), 0.0], [0.0, 0.0, yaw]);
        let noise = random_pose(rng, 0.02, 0.005);
        let noisy = PoseDelta::new(
            std::array::from_fn(|i| rel.t[i] + noise.t[i]),
            std::array::from_fn(|i| rel.psi[i] + noise.psi[i]),
        );
        g *= na_pose(&rel);
        p *= na_pose(&noisy);
        gt.push(g);
        pred.push(p);
    }
    (gt, pred)
}
