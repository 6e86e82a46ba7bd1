//! LiDAR scans, world-frame fusion and the on-disk formats (KITTI velodyne
//! binaries, KITTI pose lists, ASCII PLY and xyz).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::geom::{Ray, Vec3};

pub const DEFAULT_MAX_RANGE: f64 = 50.0;
const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

/// Rigid sensor-to-world transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Rotation about +z by `yaw` radians followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        let (s, c) = yaw.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation,
        }
    }

    /// Parses the 12 numbers of a row-major 3x4 matrix.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::Data(format!(
                "pose needs 12 values, got {}",
                values.len()
            )));
        }
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8],
            values[9], values[10],
        );
        let pose = Self {
            rotation,
            translation: Vec3::new(values[3], values[7], values[11]),
        };
        pose.validate()?;
        Ok(pose)
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        if !(err <= ORTHONORMAL_TOLERANCE) || self.rotation.determinant() <= 0.0 {
            return Err(Error::Data(format!(
                "pose rotation is not orthonormal (max deviation {err:.3e})"
            )));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Data("pose translation is not finite".into()));
        }
        Ok(())
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn inverse_apply(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    /// Heading of the sensor x axis in the world xy-plane, radians.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    /// `self` followed by `outer`.
    pub fn then(&self, outer: &Pose) -> Pose {
        Pose {
            rotation: outer.rotation * self.rotation,
            translation: outer.apply(&self.translation),
        }
    }
}

/// One sensor revolution in the sensor frame.
#[derive(Clone, Debug, PartialEq)]
pub struct LidarScan {
    pub points: Vec<Vec3>,
    pub pose: Pose,
    pub scan_index: usize,
}

impl LidarScan {
    pub fn origin(&self) -> Vec3 {
        self.pose.translation
    }
}

/// Rays of several scans in the world frame.
#[derive(Clone, Debug, Default)]
pub struct FusedCloud {
    pub rays: Vec<Ray>,
    pub source_scan_of_ray: Vec<usize>,
}

impl FusedCloud {
    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }

    pub fn endpoints(&self) -> Vec<Vec3> {
        self.rays.iter().map(|r| r.endpoint).collect()
    }
}

/// Reads a KITTI velodyne scan (x, y, z, reflectance as little-endian f32).
pub fn load_kitti_scan(path: &Path, pose: Pose, scan_index: usize) -> Result<LidarScan> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let points = decode_velodyne(&bytes).map_err(|reason| Error::format(path, reason))?;
    pose.validate()?;
    Ok(LidarScan {
        points,
        pose,
        scan_index,
    })
}

fn decode_velodyne(bytes: &[u8]) -> std::result::Result<Vec<Vec3>, String> {
    if bytes.len() % 16 != 0 {
        return Err(format!(
            "truncated scan: {} bytes is not a multiple of 16",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|rec| {
            let f = |i: usize| f32::from_le_bytes(rec[4 * i..4 * i + 4].try_into().unwrap());
            Vec3::new(f(0) as f64, f(1) as f64, f(2) as f64)
        })
        .collect())
}

/// Writes points in the KITTI velodyne layout with zero reflectance.
pub fn write_kitti_scan(path: &Path, points: &[Vec3]) -> Result<()> {
    let mut bytes = Vec::with_capacity(points.len() * 16);
    for p in points {
        for v in [p.x as f32, p.y as f32, p.z as f32, 0.0f32] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a KITTI pose list: one row-major 3x4 matrix per line.
pub fn read_poses(path: &Path) -> Result<Vec<Pose>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut poses = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        let pose = Pose::from_row_major(&values)
            .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 1)))?;
        poses.push(pose);
    }
    Ok(poses)
}

pub fn write_poses(path: &Path, poses: &[Pose]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for pose in poses {
        let line = pose
            .to_row_major()
            .iter()
            .map(|v| format!("{v:e}"))
            .collect::<Vec<_>>()
            .join(" ");
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// World-frame rays of one scan; returns closer than 1 µm are dropped.
pub fn make_rays(scan: &LidarScan) -> Vec<Ray> {
    let origin = scan.origin();
    scan.points
        .iter()
        .filter_map(|p| Ray::from_endpoints(origin, scan.pose.apply(p)))
        .collect()
}

/// Concatenates the rays of all scans whose depth is within `max_range`.
/// `keep_masks`, when given, holds one flag per point of each scan.
pub fn fuse_scans(
    scans: &[LidarScan],
    max_range: f64,
    keep_masks: Option<&[Vec<bool>]>,
) -> Result<FusedCloud> {
    if scans.is_empty() {
        return Err(Error::Data("no scans to fuse".into()));
    }
    if let Some(masks) = keep_masks {
        if masks.len() != scans.len() {
            return Err(Error::Data(format!(
                "{} keep-masks for {} scans",
                masks.len(),
                scans.len()
            )));
        }
    }
    let mut order: Vec<usize> = (0..scans.len()).collect();
    order.sort_by_key(|&i| scans[i].scan_index);

    let mut fused = FusedCloud::default();
    for i in order {
        let scan = &scans[i];
        let mask = keep_masks.map(|m| &m[i]);
        if let Some(mask) = mask {
            if mask.len() != scan.points.len() {
                return Err(Error::Data(format!(
                    "keep-mask of scan {} has {} flags for {} points",
                    scan.scan_index,
                    mask.len(),
                    scan.points.len()
                )));
            }
        }
        let origin = scan.origin();
        for (j, p) in scan.points.iter().enumerate() {
            if mask.is_some_and(|m| !m[j]) {
                continue;
            }
            if let Some(ray) = Ray::from_endpoints(origin, scan.pose.apply(p)) {
                if ray.depth <= max_range {
                    fused.rays.push(ray);
                    fused.source_scan_of_ray.push(scan.scan_index);
                }
            }
        }
    }
    Ok(fused)
}

/// Formats a coordinate with the shortest representation that round-trips.
fn fmt_coord(v: f64) -> String {
    format!("{v}")
}

pub fn export_ply(points: &[Vec3], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )
    .map_err(io)?;
    for p in points {
        writeln!(out, "{} {} {}", fmt_coord(p.x), fmt_coord(p.y), fmt_coord(p.z)).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn export_xyz(points: &[Vec3], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for p in points {
        writeln!(out, "{} {} {}", fmt_coord(p.x), fmt_coord(p.y), fmt_coord(p.z)).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Reads back an ASCII PLY written by [`export_ply`].
pub fn read_ply(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (header, body) = text
        .split_once("end_header\n")
        .ok_or_else(|| Error::format(path, "missing end_header"))?;
    let count = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .and_then(|n| n.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::format(path, "missing vertex count"))?;
    let points = parse_xyz_lines(body).map_err(|r| Error::format(path, r))?;
    if points.len() != count {
        return Err(Error::format(
            path,
            format!("header announces {count} vertices, found {}", points.len()),
        ));
    }
    Ok(points)
}

pub fn read_xyz(path: &Path) -> Result<Vec<Vec3>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_xyz_lines(&text).map_err(|r| Error::format(path, r))
}

fn parse_xyz_lines(text: &str) -> std::result::Result<Vec<Vec3>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let v = line
                .split_whitespace()
                .map(str::parse::<f64>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| e.to_string())?;
            match v.as_slice() {
                [x, y, z, ..] => Ok(Vec3::new(*x, *y, *z)),
                _ => Err(format!("expected 3 coordinates in {line:?}")),
            }
        })
        .collect()
}
