use std::fs;
use std::path::Path;

use super::{io_err, DatasetError};
use crate::cloud::{Point, PointCloud, Pose};

const POINT_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;

/// Reads a flat little-endian file of `(x, y, z, reflectance)` f32 records.
pub fn load_scan(path: &Path) -> Result<PointCloud, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % POINT_RECORD != 0 {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % POINT_RECORD,
            record: POINT_RECORD,
        });
    }
    let points = bytes
        .chunks_exact(POINT_RECORD)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[i * 4..i * 4 + 4].try_into().unwrap());
            [f(0), f(1), f(2), f(3)]
        })
        .collect();
    Ok(PointCloud::new(points))
}

pub fn save_scan(path: &Path, points: &[Point]) -> Result<(), DatasetError> {
    let mut bytes = Vec::with_capacity(points.len() * POINT_RECORD);
    for p in points {
        for v in p {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Reads one u32 per point; the semantic id is the low 16 bits.
pub fn load_labels(path: &Path) -> Result<Vec<u32>, DatasetError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % LABEL_RECORD != 0 {
        return Err(DatasetError::Format {
            path: path.display().to_string(),
            len: bytes.len(),
            offset: bytes.len() - bytes.len() % LABEL_RECORD,
            record: LABEL_RECORD,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) & 0xFFFF)
        .collect())
}

pub fn save_labels(path: &Path, labels: &[u32]) -> Result<(), DatasetError> {
    let bytes: Vec<u8> = labels.iter().flat_map(|l| l.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

/// One pose per line: twelve numbers forming a 3x4 row-major transform.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| DatasetError::Parse {
            path: path.display().to_string(),
            line: line_no,
            msg,
        };
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| parse_err(format!("{t:?}: {e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        let values: [f64; 12] = values
            .as_slice()
            .try_into()
            .map_err(|_| parse_err(format!("expected 12 numbers, found {}", values.len())))?;
        let pose = Pose::from_row_major_3x4(&values).map_err(|source| DatasetError::Pose {
            path: path.display().to_string(),
            line: line_no,
            source,
        })?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn save_poses(path: &Path, poses: &[Pose]) -> Result<(), DatasetError> {
    let mut text = String::new();
    for p in poses {
        let v = p.to_row_major_3x4();
        let line: Vec<String> = v.iter().map(|x| format!("{x:.12e}")).collect();
        text.push_str(&line.join(" "));
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}
