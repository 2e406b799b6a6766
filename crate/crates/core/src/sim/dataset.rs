//! Recorded sequences: one ASCII PLY per frame plus a pose file.
//!
//! Layout of a dataset directory:
//! - `<timestamp>.ply`: camera-frame points, file stem parsed as seconds;
//! - `poses.txt`: lines `timestamp tx ty tz qx qy qz qw` (camera to world);
//! - `intrinsics.json` (optional): camera model, defaults otherwise.

use std::path::{Path, PathBuf};

use log::warn;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, Pose, SensorFrame, Vector3};
use crate::io::{read_ply, write_ply, IoError};

pub const POSE_FILE: &str = "poses.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.json";

/// Timestamps closer than this identify the same frame.
const TIMESTAMP_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("dataset directory {path}: {source}")]
    Dir { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Pose { path: String, line: usize, message: String },
    #[error("frame {index}: {source}")]
    Frame { index: usize, source: IoError },
    #[error(transparent)]
    Io(#[from] IoError),
}

/// A loaded frame with the number of non-finite points removed from it.
#[derive(Debug, Clone)]
pub struct DatasetFrame {
    pub index: usize,
    pub frame: SensorFrame,
    pub dropped_invalid: usize,
}

#[derive(Debug, Clone)]
struct Entry {
    timestamp: f64,
    path: PathBuf,
    pose: Pose,
}

/// Lazily reads frames in timestamp order.
#[derive(Debug)]
pub struct Dataset {
    entries: Vec<Entry>,
    intrinsics: CameraIntrinsics,
    next: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn intrinsics(&self) -> &CameraIntrinsics {
        &self.intrinsics
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.timestamp).collect()
    }
}

impl Iterator for Dataset {
    type Item = Result<DatasetFrame, DatasetError>;

    fn next(&mut self) -> Option<Self::Item> {
        let index = self.next;
        let entry = self.entries.get(index)?;
        self.next += 1;
        Some(read_ply(&entry.path).map_err(|source| DatasetError::Frame { index, source }).map(|cloud| {
            let mut frame =
                SensorFrame { cloud, pose: entry.pose, intrinsics: self.intrinsics, timestamp: entry.timestamp };
            let dropped_invalid = frame.sanitize();
            if dropped_invalid > 0 {
                warn!("frame {index}: dropped {dropped_invalid} non-finite points");
            }
            DatasetFrame { index, frame, dropped_invalid }
        }))
    }
}

fn parse_poses(path: &Path) -> Result<Vec<(f64, Pose)>, DatasetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| DatasetError::Dir { path: path.display().to_string(), source })?;
    let mut poses = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |message: String| DatasetError::Pose { path: path.display().to_string(), line: i + 1, message };
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number '{t}'"))))
            .collect::<Result<_, _>>()?;
        let [t, tx, ty, tz, qx, qy, qz, qw] = values[..] else {
            return Err(err(format!("expected 8 values, found {}", values.len())));
        };
        let pose = Pose::from_translation_quaternion(Vector3::new(tx, ty, tz), qx, qy, qz, qw)
            .map_err(|e| err(e.to_string()))?;
        poses.push((t, pose));
    }
    Ok(poses)
}

/// Indexes a dataset directory. Frames without a matching pose are skipped
/// with a warning; an empty directory yields no frames.
pub fn load_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let dir_err = |source| DatasetError::Dir { path: dir.display().to_string(), source };
    let mut frames: Vec<(f64, PathBuf)> = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(dir_err)? {
        let path = entry.map_err(dir_err)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ply") {
            continue;
        }
        match path.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<f64>().ok()) {
            Some(t) if t.is_finite() => frames.push((t, path)),
            _ => warn!("{}: file name is not a timestamp, skipped", path.display()),
        }
    }
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));

    let pose_path = dir.join(POSE_FILE);
    let poses = if pose_path.exists() { parse_poses(&pose_path)? } else { Vec::new() };
    let intrinsics_path = dir.join(INTRINSICS_FILE);
    let intrinsics = if intrinsics_path.exists() {
        let text = std::fs::read_to_string(&intrinsics_path).map_err(dir_err)?;
        let intr: CameraIntrinsics = serde_json::from_str(&text).map_err(IoError::from)?;
        intr.validate()
            .map_err(|e| IoError::Format { path: intrinsics_path.display().to_string(), message: e.to_string() })?;
        intr
    } else {
        CameraIntrinsics::default()
    };

    let mut entries = Vec::with_capacity(frames.len());
    for (timestamp, path) in frames {
        match poses.iter().find(|(t, _)| (t - timestamp).abs() <= TIMESTAMP_TOLERANCE) {
            Some((_, pose)) => entries.push(Entry { timestamp, path, pose: *pose }),
            None => warn!("{}: no pose for timestamp {timestamp}, skipped", path.display()),
        }
    }
    Ok(Dataset { entries, intrinsics, next: 0 })
}

/// Writes frames in the layout `load_dataset` reads.
pub fn write_dataset(dir: &Path, frames: &[SensorFrame]) -> Result<(), DatasetError> {
    let dir_err = |source| DatasetError::Dir { path: dir.display().to_string(), source };
    std::fs::create_dir_all(dir).map_err(dir_err)?;
    let mut poses = String::new();
    for (index, f) in frames.iter().enumerate() {
        let stamp = format!("{:.6}", f.timestamp);
        write_ply(&dir.join(format!("{stamp}.ply")), &f.cloud)
            .map_err(|source| DatasetError::Frame { index, source })?;
        let t = f.pose.translation();
        let q = f.pose.quaternion();
        poses.push_str(&format!("{stamp} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n", t.x, t.y, t.z, q.i, q.j, q.k, q.w));
    }
    std::fs::write(dir.join(POSE_FILE), poses).map_err(dir_err)?;
    if let Some(f) = frames.first() {
        let json = serde_json::to_string_pretty(&f.intrinsics).map_err(IoError::from)?;
        std::fs::write(dir.join(INTRINSICS_FILE), json).map_err(dir_err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Point3, PointCloud};

    fn frame(t: f64, x: f64) -> SensorFrame {
        SensorFrame {
            cloud: PointCloud::from_points(vec![Point3::new(x, 0.0, 1.0), Point3::new(0.0, x, 2.0)]),
            pose: Pose::look_at(Point3::new(x, -1.0, 1.0), Point3::origin(), Vector3::z()).unwrap(),
            intrinsics: CameraIntrinsics::default(),
            timestamp: t,
        }
    }

    #[test]
    fn empty_directory_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn frames_come_back_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let frames = vec![frame(0.2, 0.3), frame(0.1, 0.1), frame(10.0, 0.2)];
        write_dataset(dir.path(), &frames).unwrap();
        let loaded: Vec<_> = load_dataset(dir.path()).unwrap().map(Result::unwrap).collect();
        assert_eq!(loaded.iter().map(|f| f.frame.timestamp).collect::<Vec<_>>(), vec![0.1, 0.2, 10.0]);
        assert_eq!(loaded[0].frame.cloud.points, frames[1].cloud.points);
        let p = Point3::new(0.3, 0.4, 0.5);
        let a = loaded[2].frame.pose.transform_point(&p);
        let b = frames[2].pose.transform_point(&p);
        assert!((a - b).norm() < 1e-12);
    }

    #[test]
    fn missing_pose_is_skipped() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[frame(0.1, 0.1), frame(0.2, 0.2)]).unwrap();
        std::fs::write(dir.path().join(POSE_FILE), "0.2 0 0 0 0 0 0 1\n").unwrap();
        let ds = load_dataset(dir.path()).unwrap();
        assert_eq!(ds.timestamps(), vec![0.2]);
    }

    #[test]
    fn nan_points_are_filtered_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = frame(0.5, 0.1);
        f.cloud.push(Point3::new(f64::NAN, 0.0, 1.0), None);
        write_dataset(dir.path(), &[f]).unwrap();
        let loaded: Vec<_> = load_dataset(dir.path()).unwrap().map(Result::unwrap).collect();
        assert_eq!(loaded[0].dropped_invalid, 1);
        assert_eq!(loaded[0].frame.cloud.len(), 2);
    }

    #[test]
    fn malformed_frame_is_an_error_with_index() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[frame(0.1, 0.1), frame(0.2, 0.2)]).unwrap();
        std::fs::write(dir.path().join("0.200000.ply"), "ply\ngarbage\n").unwrap();
        let results: Vec<_> = load_dataset(dir.path()).unwrap().collect();
        assert!(results[0].is_ok());
        assert!(matches!(results[1], Err(DatasetError::Frame { index: 1, .. })));
        std::fs::write(dir.path().join(POSE_FILE), "0.1 0 0\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DatasetError::Pose { line: 1, .. })));
    }
}
