//! Point cloud and label files, plus synthetic scenes for benchmarks.
//!
//! # File formats
//!
//! Point file, one 16-byte record per point, little-endian:
//!
//! ```text
//! ┌───────┬───────┬───────┬───────────────┐
//! │ x:f32 │ y:f32 │ z:f32 │ intensity:f32 │
//! └───────┴───────┴───────┴───────────────┘
//! ```
//!
//! Label file, one little-endian `u32` per point; the semantic class is the
//! lower 16 bits (the upper half carries an instance id we ignore).
//!
//! # Synthetic scenes
//!
//! `Uniform` draws every coordinate uniformly inside [`SCENE_BOUNDS`] and
//! intensity uniformly in `[0, 1]`.
//!
//! `RingLidar` imitates a spinning sensor. Point `i` lands on ring
//! `k = i mod 64` and takes slot `m = i div 64` out of the `n_k` points of
//! that ring. With `u·` fresh uniforms in `[0, 1)` and a per-ring phase `φ_k`:
//!
//! ```text
//! r_k = 2 m · 40^(k / 63)                      (geometric: 2 m .. 80 m)
//! θ   = 2π (m + φ_k + 0.25 (u1 − 0.5)) / n_k
//! r   = r_k (1 + 0.005 (u2 − 0.5))
//! x, y = r cos θ, r sin θ
//! z   = −1.73 + 0.1 (u3 − 0.5)
//! intensity = u4
//! ```
//!
//! Each ring holds the same number of points, so density per unit area falls
//! off roughly as `1 / r²`.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{LestError, Result};
use crate::rng;

const POINT_RECORD: usize = 16;
const LABEL_RECORD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
}

impl Point {
    pub const fn new(x: f32, y: f32, z: f32, intensity: f32) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Raw LiDAR sweep: positions in meters, intensity, optional per-point class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
    labels: Option<Vec<u16>>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(LestError::Data {
                index: i,
                message: "non-finite coordinate or intensity".into(),
            });
        }
        Ok(Self {
            points,
            labels: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(LestError::contract(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[u16]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<Point>> {
    if !bytes.len().is_multiple_of(POINT_RECORD) {
        return Err(LestError::MalformedFile {
            path: "<memory>".into(),
            len: bytes.len() as u64,
            record: POINT_RECORD,
        });
    }
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
    bytes
        .chunks_exact(POINT_RECORD)
        .enumerate()
        .map(|(i, r)| {
            let p = Point::new(f(&r[0..4]), f(&r[4..8]), f(&r[8..12]), f(&r[12..16]));
            if p.is_finite() {
                Ok(p)
            } else {
                Err(LestError::Data {
                    index: i,
                    message: "non-finite coordinate or intensity".into(),
                })
            }
        })
        .collect()
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(points.len() * POINT_RECORD);
    for p in points {
        for v in [p.x, p.y, p.z, p.intensity] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LestError::io(path, e))?;
    let points = decode_points(&bytes).map_err(|e| match e {
        LestError::MalformedFile { len, record, .. } => LestError::MalformedFile {
            path: path.to_path_buf(),
            len,
            record,
        },
        other => other,
    })?;
    Ok(PointCloud {
        points,
        labels: None,
    })
}

pub fn write_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_points(cloud.points())).map_err(|e| LestError::io(path, e))
}

pub fn decode_labels(bytes: &[u8]) -> Result<Vec<u16>> {
    if !bytes.len().is_multiple_of(LABEL_RECORD) {
        return Err(LestError::MalformedFile {
            path: "<memory>".into(),
            len: bytes.len() as u64,
            record: LABEL_RECORD,
        });
    }
    Ok(bytes
        .chunks_exact(LABEL_RECORD)
        .map(|r| (u32::from_le_bytes([r[0], r[1], r[2], r[3]]) & 0xFFFF) as u16)
        .collect())
}

pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| LestError::io(path, e))?;
    decode_labels(&bytes).map_err(|e| match e {
        LestError::MalformedFile { len, record, .. } => LestError::MalformedFile {
            path: path.to_path_buf(),
            len,
            record,
        },
        other => other,
    })
}

/// Writes class ids as `u32` records with a zero instance half.
pub fn write_labels(path: impl AsRef<Path>, labels: &[u16]) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = labels
        .iter()
        .flat_map(|&l| u32::from(l).to_le_bytes())
        .collect();
    fs::write(path, bytes).map_err(|e| LestError::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneProfile {
    Uniform,
    RingLidar,
}

impl std::str::FromStr for SceneProfile {
    type Err = LestError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "ring_lidar" => Ok(Self::RingLidar),
            other => Err(LestError::contract(format!(
                "unknown scene profile `{other}` (expected uniform or ring_lidar)"
            ))),
        }
    }
}

impl std::fmt::Display for SceneProfile {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::RingLidar => "ring_lidar",
        })
    }
}

/// Axis-aligned box `[min, max]` that every synthetic point lies in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Bounds {
    pub fn contains(&self, p: &Point) -> bool {
        p.xyz()
            .iter()
            .zip(self.min.iter().zip(&self.max))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

pub const SCENE_BOUNDS: Bounds = Bounds {
    min: [-81.0, -81.0, -2.0],
    max: [81.0, 81.0, 2.0],
};

const RINGS: usize = 64;
const RING_MIN: f64 = 2.0;
const RING_MAX: f64 = 80.0;
const SENSOR_HEIGHT: f64 = 1.73;

pub fn generate_synthetic_scene(seed: u64, n_points: usize, profile: SceneProfile) -> PointCloud {
    let mut rng = rng::stream(rng::sub_seed(seed, &format!("scene/{profile}")));
    let points = match profile {
        SceneProfile::Uniform => {
            let (lo, hi) = (SCENE_BOUNDS.min, SCENE_BOUNDS.max);
            (0..n_points)
                .map(|_| {
                    let mut c = [0f32; 3];
                    for a in 0..3 {
                        c[a] = rng.random_range(lo[a]..=hi[a]);
                    }
                    Point::new(c[0], c[1], c[2], rng.random::<f32>())
                })
                .collect()
        }
        SceneProfile::RingLidar => {
            let phases: Vec<f64> = (0..RINGS).map(|_| rng.random::<f64>()).collect();
            let per_ring = |k: usize| n_points / RINGS + usize::from(k < n_points % RINGS);
            (0..n_points)
                .map(|i| {
                    let (k, m) = (i % RINGS, i / RINGS);
                    let n_k = per_ring(k) as f64;
                    let r_k = RING_MIN * (RING_MAX / RING_MIN).powf(k as f64 / (RINGS - 1) as f64);
                    let (u1, u2, u3, u4): (f64, f64, f64, f32) =
                        (rng.random(), rng.random(), rng.random(), rng.random());
                    let theta =
                        std::f64::consts::TAU * (m as f64 + phases[k] + 0.25 * (u1 - 0.5)) / n_k;
                    let r = r_k * (1.0 + 0.005 * (u2 - 0.5));
                    Point::new(
                        (r * theta.cos()) as f32,
                        (r * theta.sin()) as f32,
                        (-SENSOR_HEIGHT + 0.1 * (u3 - 0.5)) as f32,
                        u4,
                    )
                })
                .collect()
        }
    };
    PointCloud {
        points,
        labels: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_single_known_record() {
        let bytes: Vec<u8> = [1.0f32, 2.0, 3.0, 0.5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        assert_eq!(
            decode_points(&bytes).unwrap(),
            vec![Point::new(1.0, 2.0, 3.0, 0.5)]
        );
    }

    #[test]
    fn empty_file_is_empty_cloud() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.bin");
        fs::write(&p, []).unwrap();
        assert!(read_point_cloud(&p).unwrap().is_empty());
    }

    #[test]
    fn ragged_file_is_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, [0u8; 33]).unwrap();
        match read_point_cloud(&p) {
            Err(LestError::MalformedFile {
                len: 33,
                record: 16,
                path,
            }) => assert_eq!(path, p),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_reports_record_index() {
        let mut pts = vec![Point::new(0.0, 0.0, 0.0, 0.0); 3];
        pts[2].y = f32::NAN;
        match decode_points(&encode_points(&pts)) {
            Err(LestError::Data { index: 2, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn labels_keep_lower_half() {
        let words = [0x0001_0009u32, 0, 0xFFFF_0003, 7];
        let bytes: Vec<u8> = words.iter().flat_map(|w| w.to_le_bytes()).collect();
        assert_eq!(decode_labels(&bytes).unwrap(), vec![9, 0, 3, 7]);
        assert!(matches!(
            decode_labels(&bytes[..6]),
            Err(LestError::MalformedFile { .. })
        ));
    }

    #[test]
    fn label_length_must_match() {
        let cloud = PointCloud::new(vec![Point::new(0.0, 0.0, 0.0, 0.0)]).unwrap();
        assert!(cloud.clone().with_labels(vec![1, 2]).is_err());
        assert_eq!(
            cloud.with_labels(vec![4]).unwrap().labels(),
            Some(&[4u16][..])
        );
    }

    #[test]
    fn synthetic_scenes_are_deterministic_and_bounded() {
        assert!(generate_synthetic_scene(7, 0, SceneProfile::Uniform).is_empty());
        for profile in [SceneProfile::Uniform, SceneProfile::RingLidar] {
            let a = generate_synthetic_scene(7, 1000, profile);
            let b = generate_synthetic_scene(7, 1000, profile);
            assert_eq!(encode_points(a.points()), encode_points(b.points()));
            assert!(a.points().iter().all(|p| SCENE_BOUNDS.contains(p)));
            assert_ne!(a, generate_synthetic_scene(8, 1000, profile));
        }
    }

    #[test]
    fn ring_lidar_is_denser_near_the_sensor() {
        let cloud = generate_synthetic_scene(7, 100_000, SceneProfile::RingLidar);
        let range = |p: &Point| (p.x.hypot(p.y)) as f64;
        let near = cloud.points().iter().filter(|p| range(p) < 20.0).count();
        let far = cloud.points().iter().filter(|p| range(p) >= 60.0).count();
        assert!(near > far, "near {near} far {far}");
    }
}
