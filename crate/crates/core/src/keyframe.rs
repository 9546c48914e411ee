//! Posed keyframes with keypoints and local descriptors, plus the on-disk
//! bundle format.
//!
//! A bundle is a directory holding
//!
//! * `manifest.json`: sequence name, intrinsics, image size and keyframe count,
//! * `poses.csv`: `id,tx,ty,tz,qw,qx,qy,qz`, one row per keyframe,
//! * `desc/<id>.bin`: `"LGKP"`, `u32 N_K`, `u32 N_KD`, then `N_K x 2` keypoint
//!   coordinates and `N_K x N_KD` descriptors, all `f32` little-endian and
//!   row-major.
//!
//! Poses map camera coordinates to world coordinates. Quaternions are stored
//! as `(w, x, y, z)` with the Hamilton product convention. Cameras follow the
//! usual pinhole convention: `+z` along the optical axis, `+x` right, `+y` down.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{self, Reader};
use crate::vlad::VladDescriptor;

pub const KEYPOINT_MAGIC: &[u8; 4] = b"LGKP";

/// Default travelled distance between keyframes, in meters.
pub const DEFAULT_KEYFRAME_SPACING_M: f64 = 0.5;

#[derive(Debug, Error)]
pub enum KeyframeError {
    #[error("empty input")]
    EmptyInput,
    #[error("keyframe threshold must be positive, got {0}")]
    InvalidThreshold(f64),
    #[error("quaternion has zero or non-finite norm")]
    InvalidQuaternion,
    #[error("invalid intrinsics: focal lengths must be positive (fx={fx}, fy={fy})")]
    InvalidIntrinsics { fx: f64, fy: f64 },
    #[error("keypoint {index} at ({u}, {v}) outside {width}x{height} image")]
    KeypointOutOfBounds { index: usize, u: f32, v: f32, width: u32, height: u32 },
    #[error("descriptor rows ({descriptors}) do not match keypoint count ({keypoints})")]
    RowMismatch { keypoints: usize, descriptors: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("keyframe ids must be strictly increasing: {prev} then {next}")]
    IdsNotIncreasing { prev: u32, next: u32 },
    #[error("descriptor dimensionality {found} differs from {expected} (keyframe {id})")]
    InconsistentDimension { id: u32, expected: usize, found: usize },
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("bad magic in {0}")]
    BadMagic(PathBuf),
    #[error("{path}: header declares {expected} bytes of payload, found {found}")]
    DimensionMismatch { path: PathBuf, expected: usize, found: usize },
    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },
    #[error("malformed pose file {path} line {line}: {msg}")]
    PoseCsv { path: PathBuf, line: usize, msg: String },
    #[error("manifest count {manifest} differs from {poses} pose rows")]
    CountMismatch { manifest: usize, poses: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Camera pose in the world frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub position: Vector3<f64>,
    pub orientation: UnitQuaternion<f64>,
}

impl Pose {
    /// Builds a pose from a position and a `(w, x, y, z)` quaternion, which is
    /// normalized.
    pub fn new(position: [f64; 3], wxyz: [f64; 4]) -> Result<Self, KeyframeError> {
        let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
        let n = q.norm();
        if !(n.is_finite() && n > 0.0) || position.iter().any(|p| !p.is_finite()) {
            return Err(KeyframeError::InvalidQuaternion);
        }
        // already-unit input is kept bit-exact so stored poses round-trip
        let orientation = if (n - 1.0).abs() < 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Pose { position: Vector3::from(position), orientation })
    }

    pub fn identity() -> Self {
        Pose { position: Vector3::zeros(), orientation: UnitQuaternion::identity() }
    }

    pub fn from_parts(position: Vector3<f64>, orientation: UnitQuaternion<f64>) -> Self {
        Pose { position, orientation }
    }

    /// Quaternion as `(w, x, y, z)`.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.orientation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.orientation.to_rotation_matrix().into_inner()
    }

    /// Maps a point from this pose's local frame into the parent frame.
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation * p + self.position
    }

    /// Maps a point from the parent frame into this pose's local frame.
    pub fn inverse_transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.orientation.inverse() * (p - self.position)
    }
}

/// Pose of `b` expressed in the frame of `a`, i.e. `T_a^-1 * T_b`.
pub fn relative_pose(a: &Pose, b: &Pose) -> Pose {
    let inv = a.orientation.inverse();
    Pose {
        position: inv * (b.position - a.position),
        orientation: inv * b.orientation,
    }
}

/// Pixel coordinates `(u, v)` of the keypoints of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    coords: Vec<[f32; 2]>,
    width: u32,
    height: u32,
}

impl KeypointSet {
    pub fn new(coords: Vec<[f32; 2]>, width: u32, height: u32) -> Result<Self, KeyframeError> {
        for (index, &[u, v]) in coords.iter().enumerate() {
            if !(u.is_finite() && v.is_finite()) {
                return Err(KeyframeError::NonFinite { what: "keypoint coordinates".into() });
            }
            if u < 0.0 || v < 0.0 || u >= width as f32 || v >= height as f32 {
                return Err(KeyframeError::KeypointOutOfBounds { index, u, v, width, height });
            }
        }
        Ok(KeypointSet { coords, width, height })
    }

    pub fn coords(&self) -> &[[f32; 2]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }
}

/// Row-major `rows x cols` matrix of local descriptors, one row per keypoint.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DescriptorMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, KeyframeError> {
        if data.len() != rows * cols {
            return Err(KeyframeError::DimensionMismatch {
                path: PathBuf::new(),
                expected: rows * cols,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(KeyframeError::NonFinite { what: "descriptor values".into() });
        }
        Ok(DescriptorMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, KeyframeError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(KeyframeError::InconsistentDimension { id: 0, expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn empty(cols: usize) -> Self {
        DescriptorMatrix { rows: 0, cols, data: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, k: usize) -> &[f32] {
        &self.data[k * self.cols..(k + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Keeps the rows at `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> DescriptorMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        DescriptorMatrix { rows: indices.len(), cols: self.cols, data }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: u32,
    pub sequence: String,
    pub pose: Pose,
    pub keypoints: KeypointSet,
    pub descriptors: DescriptorMatrix,
    pub vlad: Option<VladDescriptor>,
}

impl Keyframe {
    pub fn new(
        id: u32,
        sequence: impl Into<String>,
        pose: Pose,
        keypoints: KeypointSet,
        descriptors: DescriptorMatrix,
    ) -> Result<Self, KeyframeError> {
        if keypoints.len() != descriptors.rows() {
            return Err(KeyframeError::RowMismatch {
                keypoints: keypoints.len(),
                descriptors: descriptors.rows(),
            });
        }
        Ok(Keyframe { id, sequence: sequence.into(), pose, keypoints, descriptors, vlad: None })
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self, KeyframeError> {
        let k = CameraIntrinsics { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), KeyframeError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !(self.cx.is_finite() && self.cy.is_finite()) {
            return Err(KeyframeError::InvalidIntrinsics { fx: self.fx, fy: self.fy });
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn identity() -> Self {
        CameraIntrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0 }
    }
}

/// One sequence of keyframes sharing a camera.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceDataset {
    pub name: String,
    pub intrinsics: CameraIntrinsics,
    pub width: u32,
    pub height: u32,
    pub keyframes: Vec<Keyframe>,
}

impl SequenceDataset {
    pub fn validate(&self) -> Result<(), KeyframeError> {
        self.intrinsics.validate()?;
        let dim = self.descriptor_dim();
        for pair in self.keyframes.windows(2) {
            if pair[1].id <= pair[0].id {
                return Err(KeyframeError::IdsNotIncreasing { prev: pair[0].id, next: pair[1].id });
            }
        }
        for kf in &self.keyframes {
            if Some(kf.descriptors.cols()) != dim {
                return Err(KeyframeError::InconsistentDimension {
                    id: kf.id,
                    expected: dim.unwrap_or(0),
                    found: kf.descriptors.cols(),
                });
            }
        }
        Ok(())
    }

    /// Descriptor dimensionality shared by all keyframes, `None` when empty.
    pub fn descriptor_dim(&self) -> Option<usize> {
        self.keyframes.first().map(|k| k.descriptors.cols())
    }

    pub fn keyframe(&self, id: u32) -> Option<&Keyframe> {
        self.keyframes
            .binary_search_by_key(&id, |k| k.id)
            .ok()
            .map(|i| &self.keyframes[i])
    }
}

/// Selects keyframes from a dense trajectory: the first frame, then every
/// frame at which the path length travelled since the previous selection
/// reaches `threshold_m`.
pub fn sample_keyframes(poses: &[Pose], threshold_m: f64) -> Result<Vec<usize>, KeyframeError> {
    if !(threshold_m > 0.0) {
        return Err(KeyframeError::InvalidThreshold(threshold_m));
    }
    if poses.is_empty() {
        return Err(KeyframeError::EmptyInput);
    }
    let mut selected = vec![0];
    let mut travelled = 0.0;
    for i in 1..poses.len() {
        travelled += (poses[i].position - poses[i - 1].position).norm();
        if travelled >= threshold_m {
            selected.push(i);
            travelled = 0.0;
        }
    }
    Ok(selected)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    sequence: String,
    intrinsics: CameraIntrinsics,
    width: u32,
    height: u32,
    count: usize,
}

const POSE_HEADER: &str = "id,tx,ty,tz,qw,qx,qy,qz";

pub fn save_dataset(dataset: &SequenceDataset, dir: &Path) -> Result<(), KeyframeError> {
    fs::create_dir_all(dir.join("desc"))?;
    let manifest = Manifest {
        sequence: dataset.name.clone(),
        intrinsics: dataset.intrinsics,
        width: dataset.width,
        height: dataset.height,
        count: dataset.keyframes.len(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join("manifest.json"), json + "\n")?;

    let mut poses = BufWriter::new(fs::File::create(dir.join("poses.csv"))?);
    writeln!(poses, "{POSE_HEADER}")?;
    for kf in &dataset.keyframes {
        let p = kf.pose.position;
        let [qw, qx, qy, qz] = kf.pose.wxyz();
        writeln!(poses, "{},{},{},{},{},{},{},{}", kf.id, p.x, p.y, p.z, qw, qx, qy, qz)?;
    }
    poses.flush()?;

    for kf in &dataset.keyframes {
        let mut w = BufWriter::new(fs::File::create(desc_path(dir, kf.id))?);
        w.write_all(KEYPOINT_MAGIC)?;
        binio::put_u32(&mut w, kf.descriptors.rows() as u32)?;
        binio::put_u32(&mut w, kf.descriptors.cols() as u32)?;
        let coords: Vec<f32> = kf.keypoints.coords().iter().flatten().copied().collect();
        binio::put_f32s(&mut w, &coords)?;
        binio::put_f32s(&mut w, kf.descriptors.as_slice())?;
        w.flush()?;
    }
    Ok(())
}

fn desc_path(dir: &Path, id: u32) -> PathBuf {
    dir.join("desc").join(format!("{id}.bin"))
}

fn read_file(path: &Path) -> Result<Vec<u8>, KeyframeError> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => KeyframeError::MissingFile(path.to_path_buf()),
        _ => KeyframeError::Io(e),
    })
}

/// Reads `desc/<id>.bin`, returning keypoint coordinates and descriptors.
pub fn read_keypoint_file(path: &Path) -> Result<(Vec<[f32; 2]>, DescriptorMatrix), KeyframeError> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes);
    if !r.magic(KEYPOINT_MAGIC) {
        return Err(KeyframeError::BadMagic(path.to_path_buf()));
    }
    let (Some(nk), Some(nkd)) = (r.u32(), r.u32()) else {
        return Err(KeyframeError::DimensionMismatch { path: path.to_path_buf(), expected: 8, found: r.remaining() });
    };
    let (nk, nkd) = (nk as usize, nkd as usize);
    let expected = nk * (2 + nkd) * 4;
    if r.remaining() != expected {
        return Err(KeyframeError::DimensionMismatch { path: path.to_path_buf(), expected, found: r.remaining() });
    }
    let flat = r.f32_vec(nk * 2).expect("length checked");
    let data = r.f32_vec(nk * nkd).expect("length checked");
    if flat.iter().chain(&data).any(|v| !v.is_finite()) {
        return Err(KeyframeError::NonFinite { what: path.display().to_string() });
    }
    let coords = flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
    Ok((coords, DescriptorMatrix { rows: nk, cols: nkd, data }))
}

pub fn load_dataset(dir: &Path) -> Result<SequenceDataset, KeyframeError> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_slice(&read_file(&manifest_path)?)
        .map_err(|e| KeyframeError::Manifest { path: manifest_path.clone(), msg: e.to_string() })?;
    manifest.intrinsics.validate()?;

    let pose_path = dir.join("poses.csv");
    let text = String::from_utf8(read_file(&pose_path)?).map_err(|e| KeyframeError::PoseCsv {
        path: pose_path.clone(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == POSE_HEADER => {}
        _ => {
            return Err(KeyframeError::PoseCsv { path: pose_path, line: 1, msg: "missing header".into() });
        }
    }
    let mut poses = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| KeyframeError::PoseCsv { path: pose_path.clone(), line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 8 {
            return Err(bad(format!("expected 8 fields, found {}", fields.len())));
        }
        let id: u32 = fields[0].parse().map_err(|e| bad(format!("id: {e}")))?;
        let mut v = [0.0f64; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|e| bad(format!("{f:?}: {e}")))?;
            if !slot.is_finite() {
                return Err(KeyframeError::NonFinite { what: format!("{} line {}", pose_path.display(), i + 1) });
            }
        }
        let pose = Pose::new([v[0], v[1], v[2]], [v[3], v[4], v[5], v[6]])?;
        poses.push((id, pose));
    }
    if poses.len() != manifest.count {
        return Err(KeyframeError::CountMismatch { manifest: manifest.count, poses: poses.len() });
    }

    let mut keyframes = Vec::with_capacity(poses.len());
    for (id, pose) in poses {
        let (coords, descriptors) = read_keypoint_file(&desc_path(dir, id))?;
        let keypoints = KeypointSet::new(coords, manifest.width, manifest.height)?;
        keyframes.push(Keyframe::new(id, manifest.sequence.clone(), pose, keypoints, descriptors)?);
    }
    let dataset = SequenceDataset {
        name: manifest.sequence,
        intrinsics: manifest.intrinsics,
        width: manifest.width,
        height: manifest.height,
        keyframes,
    };
    dataset.validate()?;
    Ok(dataset)
}
