mod common;

use std::fs;

use emavio::config::EvalConfig;
use emavio::data::{generate_dataset, relative_pose, DataSpec};
use emavio::eval::{
    accumulate_trajectory, composed_endpoint_hpe, csv_path, emit_report, evaluate_predictions, hpe, kitti_drift,
    read_report, trajectory_distances,
};
use emavio::geometry::{pose_to_transform, PoseDelta, Se3};
use emavio::Error;
use nalgebra::Matrix4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::*;

fn line(steps: usize, scale: f64) -> Vec<Se3> {
    (0..=steps)
        .map(|k| pose_to_transform(&PoseDelta::new([scale * k as f64, 0.0, 0.0], [0.0; 3])))
        .collect()
}

#[test]
fn identical_trajectories_have_no_drift() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (gt, _) = smooth_pair(&mut rng, 120);
    let gt: Vec<Se3> = gt.iter().map(from_na).collect();
    let d = kitti_drift(&gt, &gt, &[10.0, 50.0, 100.0], 1).unwrap();
    assert_eq!(d.per_length.len(), 3);
    assert!(d.per_length.iter().all(|l| l.t_rel_percent == 0.0 && l.r_rel_deg_per_100m == 0.0));
    assert_eq!(hpe(&gt, &gt).unwrap(), 0.0);
}

#[test]
fn scaled_line_drifts_one_percent() {
    let (gt, pred) = (line(1000, 1.0), line(1000, 1.01));
    let lengths: Vec<f64> = (1..=8).map(|k| 100.0 * k as f64).chain([1.0, 5.0, 10.0]).collect();
    let d = kitti_drift(&pred, &gt, &lengths, 1).unwrap();
    assert_eq!(d.per_length.len(), lengths.len());
    for l in &d.per_length {
        assert!((l.t_rel_percent - 1.0).abs() < 1e-9, "{l:?}");
        assert_eq!(l.r_rel_deg_per_100m, 0.0);
        assert_eq!(l.segments, 1000 - l.length_m as usize + 1);
    }
    assert!((d.t_rel_avg - 1.0).abs() < 1e-9);
}

#[test]
fn planar_error_is_three_four_five() {
    let gt = [Se3::identity()];
    let pred = [pose_to_transform(&PoseDelta::new([3.0, 4.0, 12.0], [0.1, 0.2, 0.3]))];
    assert_eq!(hpe(&pred, &gt).unwrap(), 5.0);
    assert!(hpe(&pred, &[]).is_err());
}

#[test]
fn drift_matches_independent_evaluator() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let lengths = [5.0, 20.0, 50.0, 100.0];
    for _ in 0..5 {
        let (gt_m, pred_m) = smooth_pair(&mut rng, 150);
        let gt: Vec<Se3> = gt_m.iter().map(from_na).collect();
        let pred: Vec<Se3> = pred_m.iter().map(from_na).collect();
        let ours = kitti_drift(&pred, &gt, &lengths, 1).unwrap();
        let oracle = reference_drift(&pred_m, &gt_m, &lengths);
        assert_eq!(ours.per_length.len(), oracle.len());
        for (a, (len, t, r, n)) in ours.per_length.iter().zip(oracle) {
            assert_eq!(a.length_m, len);
            assert_eq!(a.segments, n);
            assert!((a.t_rel_percent - t).abs() < 1e-9 * (1.0 + t));
            assert!((a.r_rel_deg_per_100m - r).abs() < 1e-9 * (1.0 + r));
        }
    }
}

#[test]
fn too_long_lengths_give_an_empty_report() {
    let gt = line(10, 1.0);
    assert!(matches!(kitti_drift(&gt, &gt, &[100.0], 1), Err(Error::EmptyReport(_))));
    assert!(matches!(kitti_drift(&gt, &gt, &[1.0], 0), Err(Error::Config(_))));
    assert!(kitti_drift(&gt[..5], &gt, &[1.0], 1).is_err());
    assert_eq!(trajectory_distances(&gt)[10], 10.0);
}

#[test]
fn accumulation_matches_nalgebra_products() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let rel: Vec<PoseDelta> = (0..500).map(|_| random_pose(&mut rng, 1.0, 0.2)).collect();
    let origin = pose_to_transform(&PoseDelta::new([1.0, -2.0, 0.5], [0.1, 0.0, -0.4]));
    let ours = accumulate_trajectory(&rel, &origin);
    assert_eq!(ours.len(), 501);
    let mut m = to_na(&origin);
    assert_eq!(ours[0], origin);
    for (p, pose) in rel.iter().zip(&ours[1..]) {
        m *= na_pose(p);
        assert!(max_abs(&to_na(pose), &m) < 1e-8);
    }
    let r = ours[500].rotation();
    let rtr = Matrix4::from_fn(|i, j| if i < 3 && j < 3 { (0..3).map(|k| r[k][i] * r[k][j]).sum() } else { 0.0 });
    let eye = Matrix4::from_fn(|i, j| if i == j && i < 3 { 1.0 } else { 0.0 });
    assert!(max_abs(&rtr, &eye) < 1e-12);
}

#[test]
fn differencing_recovers_relative_poses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let rel: Vec<PoseDelta> = (0..500).map(|_| random_pose(&mut rng, 2.0, 0.4)).collect();
    let poses = accumulate_trajectory(&rel, &Se3::identity());
    for (w, want) in poses.windows(2).zip(&rel) {
        let got = relative_pose(&w[0], &w[1]).unwrap();
        for (a, b) in got.to_array().iter().zip(want.to_array()) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

#[test]
fn reports_are_deterministic_and_round_trip() {
    let spec = DataSpec {
        sequences: 3,
        frames: 21,
        ..DataSpec::default()
    };
    let samples = generate_dataset(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let predictions: Vec<Vec<PoseDelta>> = samples
        .iter()
        .map(|s| {
            s.gt_rel
                .iter()
                .map(|p| {
                    let n = random_pose(&mut rng, 0.01, 0.005);
                    PoseDelta::new(
                        std::array::from_fn(|i| p.t[i] + n.t[i]),
                        std::array::from_fn(|i| p.psi[i] + n.psi[i]),
                    )
                })
                .collect()
        })
        .collect();
    let eval = EvalConfig {
        lengths: vec![0.5, 1.0, 1.5, 50.0],
        stride: 1,
    };
    let echo = serde_json::json!({"note": "test"});
    let a = evaluate_predictions(&predictions, &samples, &eval, echo.clone()).unwrap();
    let b = evaluate_predictions(&predictions, &samples, &eval, echo).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.sequence_count, 3);
    assert_eq!(a.frame_count, 63);
    assert!(!a.t_rel_percent.contains_key("50"));

    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.json"), dir.path().join("b.json"));
    emit_report(&a, &p1).unwrap();
    emit_report(&b, &p2).unwrap();
    assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
    assert_eq!(fs::read(csv_path(&p1)).unwrap(), fs::read(csv_path(&p2)).unwrap());
    let csv = fs::read_to_string(csv_path(&p1)).unwrap();
    assert_eq!(csv.lines().count(), 1 + a.t_rel_percent.len());
    assert_eq!(csv.lines().next(), Some("length_m,t_rel_percent,r_rel_deg_per_100m,segments"));
    assert_eq!(read_report(&p1).unwrap(), a);
    let rows = a.rows();
    assert!(rows.windows(2).all(|w| w[0].length_m < w[1].length_m));

    fs::write(&p1, "{ not json").unwrap();
    assert!(matches!(read_report(&p1), Err(Error::Parse { line: 1, .. })));
}

#[test]
fn ground_truth_predictions_score_zero() {
    let spec = DataSpec {
        sequences: 2,
        frames: 15,
        ..DataSpec::default()
    };
    let samples = generate_dataset(&spec).unwrap();
    let predictions: Vec<Vec<PoseDelta>> = samples.iter().map(|s| s.gt_rel.clone()).collect();
    assert!(composed_endpoint_hpe(&predictions, &samples).unwrap() < 1e-12);
    let eval = EvalConfig {
        lengths: vec![0.5],
        stride: 2,
    };
    let r = evaluate_predictions(&predictions, &samples, &eval, serde_json::Value::Null).unwrap();
    assert!(r.t_rel_avg < 1e-9 && r.hpe_m < 1e-12);
    assert!(evaluate_predictions(&predictions[..1], &samples, &eval, serde_json::Value::Null).is_err());
}
