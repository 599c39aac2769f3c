//! KITTI odometry pose files: one row-major 3x4 `[R | t]` per line.

use std::fs;
use std::path::Path;

use crate::geometry::Se3;
use crate::{Error, Result};

/// `%.12g`: 12 significant digits, trailing zeros dropped.
fn format_g12(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let sci = format!("{v:.11e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let fixed = format!("{v:.decimals$}");
        trim_zeros(&fixed).to_string()
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn format_pose_line(pose: &Se3) -> String {
    let m = pose.matrix();
    m[..3]
        .iter()
        .flat_map(|row| row.iter())
        .map(|v| format_g12(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parses one line; `line_no` is 1-based and only used in errors.
pub fn parse_pose_line(path: &Path, line_no: usize, line: &str) -> Result<Se3> {
    let err = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        msg,
    };
    let vals = line
        .split_whitespace()
        .map(|f| f.parse::<f64>().map_err(|e| err(format!("`{f}`: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 12 {
        return Err(err(format!("expected 12 fields, found {}", vals.len())));
    }
    let r = [
        [vals[0], vals[1], vals[2]],
        [vals[4], vals[5], vals[6]],
        [vals[8], vals[9], vals[10]],
    ];
    Se3::new(r, [vals[3], vals[7], vals[11]]).map_err(|e| err(e.to_string()))
}

pub fn write_kitti_poses(path: &Path, poses: &[Se3]) -> Result<()> {
    let mut text = String::new();
    for pose in poses {
        text.push_str(&format_pose_line(pose));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a pose file; blank lines are skipped.
pub fn read_kitti_poses(path: &Path) -> Result<Vec<Se3>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_pose_line(path, i + 1, l))
        .collect()
}
