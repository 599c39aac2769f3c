//! Differentiable pose algebra and the training losses.
//!
//! Poses travel through the graph as `[N, 6]` rows `(t_x, t_y, t_z, roll,
//! pitch, yaw)`. RMSE terms average over every frame and all three
//! components.

use emavio_tensor::{Graph, Tensor, Var};

use crate::geometry::{PoseDelta, GIMBAL_MARGIN};
use crate::{Error, Result};

/// `[N, 6]` constant tensor from poses.
pub fn poses_tensor(poses: &[PoseDelta]) -> Result<Tensor> {
    let data = poses.iter().flat_map(|p| p.to_array()).collect();
    Ok(Tensor::new(&[poses.len(), 6], data)?)
}

pub fn poses_from_tensor(t: &Tensor) -> Vec<PoseDelta> {
    t.data().chunks_exact(6).map(PoseDelta::from_slice).collect()
}

fn matrix3(g: &mut Graph, entries: [Var; 9]) -> Result<Var> {
    let flat = g.concat(&entries, 0)?;
    Ok(g.reshape(flat, &[3, 3])?)
}

/// `Rz(yaw) Ry(pitch) Rx(roll)` for `psi` of 3 elements, built by
/// multiplying the three elementary rotations.
pub fn euler_to_rotation_var(g: &mut Graph, psi: Var) -> Result<Var> {
    let zero = g.constant(Tensor::scalar(0.0));
    let one = g.constant(Tensor::scalar(1.0));
    let mut sc = Vec::with_capacity(3);
    for i in 0..3 {
        let a = g.element(psi, i)?;
        sc.push((g.sin(a), g.cos(a)));
    }
    let ((sr, cr), (sp, cp), (sy, cy)) = (sc[0], sc[1], sc[2]);
    let (nsr, nsp, nsy) = (g.neg(sr), g.neg(sp), g.neg(sy));
    let rx = matrix3(g, [one, zero, zero, zero, cr, nsr, zero, sr, cr])?;
    let ry = matrix3(g, [cp, zero, sp, zero, one, zero, nsp, zero, cp])?;
    let rz = matrix3(g, [cy, nsy, zero, sy, cy, zero, zero, zero, one])?;
    let zy = g.matmul(rz, ry)?;
    Ok(g.matmul(zy, rx)?)
}

/// `[roll, pitch, yaw]` of a `[3, 3]` rotation, shape `[3]`.
pub fn rotation_to_euler_var(g: &mut Graph, r: Var) -> Result<Var> {
    let r20 = g.value(r).data()[6];
    let pitch_value = (-r20).clamp(-1.0, 1.0).asin();
    if std::f64::consts::FRAC_PI_2 - pitch_value.abs() <= GIMBAL_MARGIN {
        return Err(Error::Degenerate(format!(
            "composed pitch {pitch_value} is within {GIMBAL_MARGIN} rad of ±π/2"
        )));
    }
    let e = |g: &mut Graph, i: usize| g.element(r, i);
    let (r00, r10, r20, r21, r22) = (e(g, 0)?, e(g, 3)?, e(g, 6)?, e(g, 7)?, e(g, 8)?);
    let asin = g.asin(r20);
    let pitch = g.neg(asin);
    let roll = g.atan2(r21, r22)?;
    let yaw = g.atan2(r10, r00)?;
    Ok(g.concat(&[roll, pitch, yaw], 0)?)
}

/// Splits row `i` of `[N, 6]` poses into `R: [3, 3]` and `t: [3, 1]`.
pub fn pose_row_transform(g: &mut Graph, poses: Var, i: usize) -> Result<(Var, Var)> {
    let row = g.narrow(poses, 0, i, 1)?;
    let t = g.narrow(row, 1, 0, 3)?;
    let t = g.reshape(t, &[3, 1])?;
    let psi = g.narrow(row, 1, 3, 3)?;
    let psi = g.reshape(psi, &[3])?;
    Ok((euler_to_rotation_var(g, psi)?, t))
}

/// Product of the transforms of every row, left to right, as `(R, t)`.
/// No re-orthonormalization is applied.
pub fn compose_rows(g: &mut Graph, poses: Var) -> Result<(Var, Var)> {
    let n = g.shape(poses)[0];
    let (mut r, mut t) = pose_row_transform(g, poses, 0)?;
    for i in 1..n {
        let (ri, ti) = pose_row_transform(g, poses, i)?;
        let rt = g.matmul(r, ti)?;
        t = g.add(rt, t)?;
        r = g.matmul(r, ri)?;
    }
    Ok((r, t))
}

/// Composes all rows and re-expresses the result as a `[1, 6]` pose.
pub fn compose_to_pose(g: &mut Graph, poses: Var) -> Result<Var> {
    let (r, t) = compose_rows(g, poses)?;
    let psi = rotation_to_euler_var(g, r)?;
    let psi = g.reshape(psi, &[1, 3])?;
    let t = g.reshape(t, &[1, 3])?;
    Ok(g.concat(&[t, psi], 1)?)
}

fn rmse(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let sq = g.square(d);
    let m = g.mean(sq);
    Ok(g.sqrt(m))
}

fn check_pose_rows(g: &Graph, pred: Var, gt: Var) -> Result<usize> {
    let (sp, sg) = (g.shape(pred), g.shape(gt));
    if sp.len() != 2 || sp[1] != 6 || sp != sg || sp[0] == 0 {
        return Err(Error::Contract(format!(
            "pose tensors must both be [N >= 1, 6], got {sp:?} and {sg:?}"
        )));
    }
    Ok(sp[0])
}

/// `RMSE(t - t̂) + λ1 RMSE(ψ - ψ̂)` over `[N, 6]` rows.
pub fn frame_loss(g: &mut Graph, pred: Var, gt: Var, lambda_rot: f64) -> Result<Var> {
    check_pose_rows(g, pred, gt)?;
    let (pt, gt_t) = (g.narrow(pred, 1, 0, 3)?, g.narrow(gt, 1, 0, 3)?);
    let (pr, gt_r) = (g.narrow(pred, 1, 3, 3)?, g.narrow(gt, 1, 3, 3)?);
    let lt = rmse(g, pt, gt_t)?;
    let lr = rmse(g, pr, gt_r)?;
    let lr = g.scale(lr, lambda_rot);
    Ok(g.add(lt, lr)?)
}

/// Frame loss of the composed first-to-last prediction against `gt_seq`.
pub fn sequence_loss(g: &mut Graph, pred_rel: Var, gt_seq: &PoseDelta, lambda_rot: f64) -> Result<Var> {
    let n = g.shape(pred_rel).first().copied().unwrap_or(0);
    if g.shape(pred_rel).len() != 2 || g.shape(pred_rel)[1] != 6 || n == 0 {
        return Err(Error::Contract(format!(
            "relative poses must be [N >= 1, 6], got {:?}",
            g.shape(pred_rel)
        )));
    }
    let composed = compose_to_pose(g, pred_rel)?;
    let target = g.constant(poses_tensor(std::slice::from_ref(gt_seq))?);
    frame_loss(g, composed, target, lambda_rot)
}

/// `frame + seq`, refusing non-finite parts. `step` is reported on failure.
pub fn total_loss(g: &mut Graph, frame: Var, seq: Option<Var>, step: u64) -> Result<Var> {
    let parts = std::iter::once(("frame", frame)).chain(seq.map(|s| ("sequence", s)));
    for (name, v) in parts {
        let x = g.value(v).item();
        if !x.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("{name} loss is {x}"),
            });
        }
    }
    match seq {
        Some(s) => Ok(g.add(frame, s)?),
        None => Ok(frame),
    }
}

/// Scalar frame loss of plain poses.
pub fn frame_loss_value(pred: &[PoseDelta], gt: &[PoseDelta], lambda_rot: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Contract("frame loss of an empty sequence".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(poses_tensor(pred)?);
    let t = g.constant(poses_tensor(gt)?);
    let l = frame_loss(&mut g, p, t, lambda_rot)?;
    Ok(g.value(l).item())
}

/// Scalar sequence loss of plain poses.
pub fn sequence_loss_value(pred_rel: &[PoseDelta], gt_seq: &PoseDelta, lambda_rot: f64) -> Result<f64> {
    if pred_rel.is_empty() {
        return Err(Error::Contract("sequence loss of an empty sequence".into()));
    }
    let mut g = Graph::new();
    let p = g.constant(poses_tensor(pred_rel)?);
    let l = sequence_loss(&mut g, p, gt_seq, lambda_rot)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euler_to_rotation;

    #[test]
    fn single_frame_closed_form() {
        let pred = [PoseDelta::new([3.0, 0.0, 0.0], [0.0; 3])];
        let gt = [PoseDelta::identity()];
        let l = frame_loss_value(&pred, &gt, 50.0).unwrap();
        assert!((l - 3.0f64.sqrt()).abs() < 1e-15);
        assert_eq!(frame_loss_value(&gt, &gt, 50.0).unwrap(), 0.0);
    }

    #[test]
    fn length_mismatch_is_contract_error() {
        let a = [PoseDelta::identity(); 2];
        let b = [PoseDelta::identity(); 3];
        assert!(matches!(frame_loss_value(&a, &b, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn graph_rotation_matches_closed_form() {
        let psi = [0.3, -0.7, 2.1];
        let mut g = Graph::new();
        let v = g.constant(Tensor::from_vec(psi.to_vec()));
        let r = euler_to_rotation_var(&mut g, v).unwrap();
        let expect = euler_to_rotation(&psi);
        let flat = expect.iter().flatten();
        for (got, want) in g.value(r).data().iter().zip(flat) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.5));
        let b = g.constant(Tensor::scalar(2.5));
        let t = total_loss(&mut g, a, Some(b), 0).unwrap();
        assert_eq!(g.value(t).item(), 4.0);
        let z = g.constant(Tensor::scalar(0.0));
        let t = total_loss(&mut g, z, Some(z), 0).unwrap();
        assert_eq!(g.value(t).item(), 0.0);
        let nan = g.constant(Tensor::scalar(f64::NAN));
        match total_loss(&mut g, a, Some(nan), 17) {
            Err(Error::Divergence { step, .. }) => assert_eq!(step, 17),
            other => panic!("{other:?}"),
        }
    }
}
