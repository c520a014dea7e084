//! Wire formats for the scan and pose streams: JSON Lines, one record per
//! line, timestamps in integer microseconds.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{GeomError, RigidTransform, Vec3};

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("stream {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("stream {path} line {line}: {msg}")]
    Format {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("pose record at t_us {t_us}: {source}")]
    BadPose {
        t_us: u64,
        #[source]
        source: GeomError,
    },
}

/// One profiler acquisition: `points` are (x_l, z_l) pairs in the laser
/// plane of scanner `scanner_id`; `valid_mask[i]` is false for misses and
/// occluded samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileFrame {
    pub t_us: u64,
    pub scanner_id: u32,
    pub valid_mask: Vec<bool>,
    pub points: Vec<[f64; 2]>,
}

/// Robot pose sample: the work-object transform T_OB as a row-major rotation
/// and translation in mm.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoseSample {
    pub t_us: u64,
    pub r: [f64; 9],
    pub t: [f64; 3],
}

impl PoseSample {
    pub fn from_transform(t_us: u64, transform: &RigidTransform) -> Self {
        let m = transform.rotation();
        let tr = transform.translation();
        Self {
            t_us,
            r: [
                m[(0, 0)],
                m[(0, 1)],
                m[(0, 2)],
                m[(1, 0)],
                m[(1, 1)],
                m[(1, 2)],
                m[(2, 0)],
                m[(2, 1)],
                m[(2, 2)],
            ],
            t: [tr.x, tr.y, tr.z],
        }
    }

    pub fn transform(&self) -> Result<RigidTransform, StreamError> {
        RigidTransform::from_parts(
            nalgebra::Matrix3::from_row_slice(&self.r),
            Vec3::new(self.t[0], self.t[1], self.t[2]),
        )
        .map_err(|source| StreamError::BadPose {
            t_us: self.t_us,
            source,
        })
    }
}

/// Append-style JSONL writer over a whole record sequence.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), StreamError> {
    let io_err = |source| StreamError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record).expect("stream records serialize");
        w.write_all(line.as_bytes()).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, usize), StreamError> {
    let io_err = |source| StreamError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut skipped = 0usize;
    for line in reader.lines() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line) {
            Ok(r) => records.push(r),
            Err(_) => skipped += 1,
        }
    }
    Ok((records, skipped))
}

/// Read a scan stream; unparseable lines are counted, not fatal.
pub fn read_scan_stream(path: &Path) -> Result<(Vec<ProfileFrame>, usize), StreamError> {
    read_jsonl(path)
}

/// Read a pose stream; unparseable lines are counted, not fatal.
pub fn read_pose_stream(path: &Path) -> Result<(Vec<PoseSample>, usize), StreamError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_roundtrip_with_bad_lines_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let frames = vec![
            ProfileFrame {
                t_us: 0,
                scanner_id: 1,
                valid_mask: vec![true, false],
                points: vec![[0.0, 5.0], [0.1, 0.0]],
            },
            ProfileFrame {
                t_us: 100_000,
                scanner_id: 1,
                valid_mask: vec![true, true],
                points: vec![[0.0, 5.1], [0.1, 5.2]],
            },
        ];
        write_jsonl(&path, &frames).unwrap();
        // Corrupt the stream with one garbage line.
        let mut text = std::fs::read_to_string(&path).unwrap();
        text.push_str("{not json}\n");
        std::fs::write(&path, text).unwrap();

        let (back, skipped) = read_scan_stream(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(skipped, 1);
        assert_eq!(back[1].t_us, 100_000);
    }

    #[test]
    fn pose_sample_transform_roundtrip() {
        let t = RigidTransform::rot_z_deg(30.0)
            .compose(&RigidTransform::from_translation(Vec3::new(1.0, 2.0, 3.0)));
        let rec = PoseSample::from_transform(42, &t);
        let back = rec.transform().unwrap();
        let p = crate::geom::Point3::new(4.0, 5.0, 6.0);
        assert!((t.apply(&p) - back.apply(&p)).norm() < 1e-12);
    }

    #[test]
    fn pose_with_garbage_rotation_errors() {
        let rec = PoseSample {
            t_us: 0,
            r: [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            t: [0.0; 3],
        };
        assert!(rec.transform().is_err());
    }
}
