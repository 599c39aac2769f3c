//! Odometry metrics: KITTI sub-sequence drift and horizontal position error.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::EvalConfig;
use crate::data::SequenceSample;
use crate::geometry::{pose_to_transform, rotation_angle, PoseDelta, Se3};
use crate::model::Model;
use crate::{Error, Result};

/// Compositions between re-orthonormalizations in [`accumulate_trajectory`].
pub const ORTHONORMALIZE_EVERY: usize = 100;

/// `[origin, origin T_1, origin T_1 T_2, ...]`.
pub fn accumulate_trajectory(rel: &[PoseDelta], origin: &Se3) -> Vec<Se3> {
    let mut out = Vec::with_capacity(rel.len() + 1);
    let mut pose = *origin;
    out.push(pose);
    for (i, p) in rel.iter().enumerate() {
        pose = pose.compose(&pose_to_transform(p));
        if (i + 1) % ORTHONORMALIZE_EVERY == 0 {
            pose = pose.orthonormalized();
        }
        out.push(pose);
    }
    out
}

/// Cumulative arc length along the positions of `poses`.
pub fn trajectory_distances(poses: &[Se3]) -> Vec<f64> {
    let mut dist = Vec::with_capacity(poses.len());
    let mut total = 0.0;
    for (i, p) in poses.iter().enumerate() {
        if i > 0 {
            let (a, b) = (poses[i - 1].translation(), p.translation());
            total += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
        }
        dist.push(total);
    }
    dist
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthDrift {
    pub length_m: f64,
    pub t_rel_percent: f64,
    pub r_rel_deg_per_100m: f64,
    pub segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    /// Only lengths with at least one segment.
    pub per_length: Vec<LengthDrift>,
    /// Mean of the per-length entries.
    pub t_rel_avg: f64,
    pub r_rel_avg: f64,
}

/// Sub-sequence drift pooled over several `(pred, gt)` series. A segment
/// starting at frame `i` ends at the first frame whose ground-truth arc
/// length from `i` is at least `ℓ`.
pub fn kitti_drift_multi(series: &[(&[Se3], &[Se3])], lengths: &[f64], stride: usize) -> Result<Drift> {
    if stride == 0 {
        return Err(Error::Config("drift stride must be positive".into()));
    }
    let mut sums = vec![(0.0, 0.0, 0usize); lengths.len()];
    for (pred, gt) in series {
        if pred.len() != gt.len() {
            return Err(Error::Contract(format!(
                "{} predicted poses for {} ground-truth poses",
                pred.len(),
                gt.len()
            )));
        }
        let dist = trajectory_distances(gt);
        for start in (0..gt.len()).step_by(stride) {
            for (li, &len) in lengths.iter().enumerate() {
                let Some(end) = (start..gt.len()).find(|&j| dist[j] - dist[start] >= len) else {
                    continue;
                };
                let gt_seg = gt[start].inverse().compose(&gt[end]);
                let pred_seg = pred[start].inverse().compose(&pred[end]);
                let err = gt_seg.inverse().compose(&pred_seg);
                let t = err.translation();
                let t_err = (t[0] * t[0] + t[1] * t[1] + t[2] * t[2]).sqrt();
                let r_err = rotation_angle(err.rotation()).to_degrees();
                let s = &mut sums[li];
                s.0 += t_err / len * 100.0;
                s.1 += r_err / len * 100.0;
                s.2 += 1;
            }
        }
    }
    let per_length: Vec<LengthDrift> = lengths
        .iter()
        .zip(&sums)
        .filter(|(_, s)| s.2 > 0)
        .map(|(&len, &(t, r, n))| LengthDrift {
            length_m: len,
            t_rel_percent: t / n as f64,
            r_rel_deg_per_100m: r / n as f64,
            segments: n,
        })
        .collect();
    if per_length.is_empty() {
        return Err(Error::EmptyReport(format!(
            "trajectories are shorter than every segment length {lengths:?}; use shorter (desk-scale) lengths"
        )));
    }
    let k = per_length.len() as f64;
    Ok(Drift {
        t_rel_avg: per_length.iter().map(|d| d.t_rel_percent).sum::<f64>() / k,
        r_rel_avg: per_length.iter().map(|d| d.r_rel_deg_per_100m).sum::<f64>() / k,
        per_length,
    })
}

pub fn kitti_drift(pred: &[Se3], gt: &[Se3], lengths: &[f64], stride: usize) -> Result<Drift> {
    kitti_drift_multi(&[(pred, gt)], lengths, stride)
}

/// Root-mean-square planar (x, y) distance between matching poses.
pub fn hpe(pred: &[Se3], gt: &[Se3]) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Contract(format!(
            "hpe needs equal nonempty series, got {} and {}",
            pred.len(),
            gt.len()
        )));
    }
    let sq: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| {
            let (a, b) = (p.translation(), g.translation());
            (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
        })
        .sum();
    Ok((sq / pred.len() as f64).sqrt())
}

/// Map key of a segment length, e.g. `"10"` or `"12.5"`.
pub fn length_key(length_m: f64) -> String {
    format!("{length_m}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Translation drift in percent, keyed by [`length_key`].
    pub t_rel_percent: BTreeMap<String, f64>,
    /// Rotation drift in degrees per 100 m, same keys.
    pub r_rel_deg_per_100m: BTreeMap<String, f64>,
    /// Segments evaluated per length, same keys.
    pub segments: BTreeMap<String, usize>,
    pub t_rel_avg: f64,
    pub r_rel_avg: f64,
    pub hpe_m: f64,
    pub frame_count: usize,
    pub sequence_count: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    /// Per-length rows in increasing length order.
    pub fn rows(&self) -> Vec<LengthDrift> {
        let mut rows: Vec<LengthDrift> = self
            .t_rel_percent
            .iter()
            .map(|(k, &t)| LengthDrift {
                length_m: k.parse().unwrap_or(f64::NAN),
                t_rel_percent: t,
                r_rel_deg_per_100m: self.r_rel_deg_per_100m.get(k).copied().unwrap_or(f64::NAN),
                segments: self.segments.get(k).copied().unwrap_or(0),
            })
            .collect();
        rows.sort_by(|a, b| a.length_m.total_cmp(&b.length_m));
        rows
    }
}

/// Scores predicted relative poses against each sample's ground truth.
/// Every trajectory starts at its first ground-truth pose.
pub fn evaluate_predictions(
    predictions: &[Vec<PoseDelta>],
    samples: &[SequenceSample],
    eval: &EvalConfig,
    config: serde_json::Value,
) -> Result<EvalReport> {
    if predictions.len() != samples.len() {
        return Err(Error::Contract(format!(
            "{} prediction sets for {} sequences",
            predictions.len(),
            samples.len()
        )));
    }
    let pred_series: Vec<Vec<Se3>> = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| accumulate_trajectory(p, &s.poses[0]))
        .collect();
    let pairs: Vec<(&[Se3], &[Se3])> = pred_series
        .iter()
        .zip(samples)
        .map(|(p, s)| (p.as_slice(), s.poses.as_slice()))
        .collect();
    let drift = kitti_drift_multi(&pairs, &eval.lengths, eval.stride)?;
    let all_pred: Vec<Se3> = pred_series.concat();
    let all_gt: Vec<Se3> = samples.iter().flat_map(|s| s.poses.iter().copied()).collect();
    let keyed = |f: fn(&LengthDrift) -> f64| -> BTreeMap<String, f64> {
        drift.per_length.iter().map(|d| (length_key(d.length_m), f(d))).collect()
    };
    Ok(EvalReport {
        t_rel_percent: keyed(|d| d.t_rel_percent),
        r_rel_deg_per_100m: keyed(|d| d.r_rel_deg_per_100m),
        segments: drift.per_length.iter().map(|d| (length_key(d.length_m), d.segments)).collect(),
        t_rel_avg: drift.t_rel_avg,
        r_rel_avg: drift.r_rel_avg,
        hpe_m: hpe(&all_pred, &all_gt)?,
        frame_count: all_gt.len(),
        sequence_count: samples.len(),
        config,
    })
}

/// Runs `model` over every sample and scores the result.
pub fn evaluate(
    model: &Model,
    samples: &[SequenceSample],
    eval: &EvalConfig,
    config: serde_json::Value,
) -> Result<EvalReport> {
    let predictions = samples
        .iter()
        .map(|s| model.predict(s))
        .collect::<Result<Vec<_>>>()?;
    evaluate_predictions(&predictions, samples, eval, config)
}

/// HPE between composed first-to-last predictions and `gt_seq`, over all
/// samples.
pub fn composed_endpoint_hpe(predictions: &[Vec<PoseDelta>], samples: &[SequenceSample]) -> Result<f64> {
    let (pred, gt): (Vec<Se3>, Vec<Se3>) = predictions
        .iter()
        .zip(samples)
        .map(|(p, s)| {
            let composed = *accumulate_trajectory(p, &Se3::identity()).last().unwrap();
            (composed, pose_to_transform(&s.gt_seq))
        })
        .unzip();
    hpe(&pred, &gt)
}

pub fn csv_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes the report as key-sorted JSON at `path` and a per-length CSV next
/// to it.
pub fn emit_report(report: &EvalReport, path: &Path) -> Result<()> {
    let value = serde_json::to_value(report).map_err(|e| Error::Contract(e.to_string()))?;
    let mut json = serde_json::to_string_pretty(&value).map_err(|e| Error::Contract(e.to_string()))?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let mut csv = String::from("length_m,t_rel_percent,r_rel_deg_per_100m,segments\n");
    for d in report.rows() {
        writeln!(csv, "{},{},{},{}", d.length_m, d.t_rel_percent, d.r_rel_deg_per_100m, d.segments)
            .expect("string write");
    }
    let csv_file = csv_path(path);
    fs::write(&csv_file, csv).map_err(|e| Error::io(&csv_file, e))
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}
