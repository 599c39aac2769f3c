//! Dataset container: `manifest.toml` plus little-endian `data.bin`.
//! The byte layout is documented in `docs/dataset-format.md`.

use std::fs;
use std::path::Path;

use emavio_tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::DatasetError;
use crate::geometry::{PoseDelta, Se3};
use crate::{Error, Result};

use super::{DataSpec, FramePair, ImuWindow, SequenceSample};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"EMAVIODS";
const HEADER_LEN: usize = 12;
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const DATA_FILE: &str = "data.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceRecord {
    pub id: u32,
    pub frames: usize,
    pub pairs: usize,
    pub imu_window: usize,
    /// `pairs * imu_window`.
    pub imu_rows: usize,
    /// Byte offset of the record in `data.bin`.
    pub offset: u64,
    pub length: u64,
    /// Hex SHA-256 of the record bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Generator settings, when the data is synthetic.
    pub spec: Option<DataSpec>,
    pub sequences: Vec<SequenceRecord>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn image_dims(sample: &SequenceSample) -> Result<[usize; 3]> {
    let first = sample
        .frames
        .first()
        .ok_or_else(|| Error::Contract(format!("sequence {} has no frame pairs", sample.id)))?;
    match *first.reference.shape() {
        [c, h, w] => Ok([c, h, w]),
        ref s => Err(Error::Contract(format!("image shape {s:?} is not [C, H, W]"))),
    }
}

fn encode(sample: &SequenceSample) -> Result<Vec<u8>> {
    let [c, h, w] = image_dims(sample)?;
    let pairs = sample.pair_count();
    let window = sample.imu.first().map_or(0, |x| x.len());
    if sample.frames.len() != pairs
        || sample.imu.len() != pairs
        || sample.poses.len() != pairs + 1
        || sample.imu.iter().any(|x| x.len() != window)
    {
        return Err(Error::Contract(format!(
            "sequence {} has inconsistent pose/frame/IMU counts",
            sample.id
        )));
    }
    let mut out = Vec::new();
    for v in [sample.id, sample.poses.len() as u32, c as u32, h as u32, w as u32, window as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let f64s = |out: &mut Vec<u8>, vals: &[f64]| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for pose in &sample.poses {
        let m = pose.matrix();
        for row in &m[..3] {
            f64s(&mut out, row);
        }
    }
    for rel in &sample.gt_rel {
        f64s(&mut out, &rel.to_array());
    }
    f64s(&mut out, &sample.gt_seq.to_array());
    for pair in &sample.frames {
        if pair.reference.shape() != [c, h, w] || pair.target.shape() != [c, h, w] {
            return Err(Error::Contract(format!(
                "sequence {} mixes image shapes",
                sample.id
            )));
        }
        for img in [&pair.reference, &pair.target] {
            for v in img.data() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
    }
    for win in &sample.imu {
        for v in win.samples.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Writes `samples` to `dir`, creating it if needed.
pub fn write_dataset(
    dir: &Path,
    spec: Option<&DataSpec>,
    samples: &[SequenceSample],
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data = Vec::with_capacity(HEADER_LEN);
    data.extend_from_slice(MAGIC);
    data.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut sequences = Vec::with_capacity(samples.len());
    for sample in samples {
        let bytes = encode(sample)?;
        let window = sample.imu.first().map_or(0, |x| x.len());
        sequences.push(SequenceRecord {
            id: sample.id,
            frames: sample.frame_count(),
            pairs: sample.pair_count(),
            imu_window: window,
            imu_rows: sample.pair_count() * window,
            offset: data.len() as u64,
            length: bytes.len() as u64,
            sha256: hex(&Sha256::digest(&bytes)),
        });
        data.extend_from_slice(&bytes);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        spec: spec.cloned(),
        sequences,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, &data).map_err(|e| Error::io(&data_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], DatasetError> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| DatasetError::Truncated(format!("record ends before byte {end}")))?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, DatasetError> {
        Ok(self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, DatasetError> {
        Ok(self
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn decode(bytes: &[u8], record: &SequenceRecord) -> std::result::Result<SequenceSample, DatasetError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let id = cur.u32()?;
    let frames = cur.u32()? as usize;
    let (c, h, w) = (cur.u32()? as usize, cur.u32()? as usize, cur.u32()? as usize);
    let window = cur.u32()? as usize;
    if id != record.id || frames != record.frames || window != record.imu_window {
        return Err(DatasetError::Manifest(format!(
            "sequence {} disagrees with its manifest entry",
            record.id
        )));
    }
    if frames < 2 || c * h * w == 0 || window == 0 {
        return Err(DatasetError::Manifest(format!("sequence {id} has empty dimensions")));
    }
    let pairs = frames - 1;
    if record.pairs != pairs || record.imu_rows != pairs * window {
        return Err(DatasetError::Manifest(format!(
            "sequence {id}: {} pairs / {} IMU rows recorded, {pairs} / {} stored",
            record.pairs,
            record.imu_rows,
            pairs * window
        )));
    }
    let poses = (0..frames)
        .map(|_| {
            let m = cur.f64s(12)?;
            let r = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
            Ok(Se3::from_parts_unchecked(r, [m[3], m[7], m[11]]))
        })
        .collect::<std::result::Result<Vec<_>, DatasetError>>()?;
    let gt_rel = (0..pairs)
        .map(|_| Ok(PoseDelta::from_slice(&cur.f64s(6)?)))
        .collect::<std::result::Result<Vec<_>, DatasetError>>()?;
    let gt_seq = PoseDelta::from_slice(&cur.f64s(6)?);
    let plane = c * h * w;
    let image = |data: Vec<f64>| Tensor::new(&[c, h, w], data).expect("sized read");
    let frame_pairs = (0..pairs)
        .map(|_| {
            let reference = image(cur.f32s(plane)?);
            let target = image(cur.f32s(plane)?);
            Ok(FramePair { reference, target })
        })
        .collect::<std::result::Result<Vec<_>, DatasetError>>()?;
    let imu = (0..pairs)
        .map(|_| {
            Ok(ImuWindow {
                samples: Tensor::new(&[6, window], cur.f32s(6 * window)?).expect("sized read"),
            })
        })
        .collect::<std::result::Result<Vec<_>, DatasetError>>()?;
    if cur.pos != bytes.len() {
        return Err(DatasetError::Manifest(format!(
            "sequence {id} has {} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok(SequenceSample {
        id,
        poses,
        frames: frame_pairs,
        imu,
        gt_rel,
        gt_seq,
    })
}

/// Reads and verifies every sequence in `dir`.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<SequenceSample>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: DatasetManifest =
        toml::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: manifest.format_version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let data_path = dir.join(DATA_FILE);
    let data = fs::read(&data_path).map_err(|e| Error::io(&data_path, e))?;
    if data.len() < HEADER_LEN {
        return Err(DatasetError::Truncated(format!(
            "{} bytes is shorter than the header",
            data.len()
        ))
        .into());
    }
    if &data[..8] != MAGIC {
        return Err(DatasetError::Manifest("data file has the wrong magic bytes".into()).into());
    }
    let version = u32::from_le_bytes(data[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(DatasetError::Version {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let mut samples = Vec::with_capacity(manifest.sequences.len());
    for record in &manifest.sequences {
        let start = record.offset as usize;
        if start > data.len() || start < HEADER_LEN {
            return Err(DatasetError::Truncated(format!(
                "sequence {} starts at byte {start} of {}",
                record.id,
                data.len()
            ))
            .into());
        }
        let end = (start + record.length as usize).min(data.len());
        let bytes = &data[start..end];
        if hex(&Sha256::digest(bytes)) != record.sha256 {
            return Err(DatasetError::Checksum { id: record.id }.into());
        }
        samples.push(decode(bytes, record)?);
    }
    Ok((manifest, samples))
}
