//! Analytic scenes and an exact ray-cast LiDAR used as ground truth.
//!
//! Scenes are a ground plane plus solid axis-aligned boxes. The box hit
//! routine here tests the six faces one by one, so it shares no code with the
//! slab test in [`crate::geom`] and can serve as its reference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{LidarScan, Pose};
use crate::error::{Error, Result};
use crate::geom::{Aabb, Ray, RayInterval, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub point: Vec3,
    pub normal: Vec3,
}

impl Plane {
    pub fn horizontal(z: f64) -> Self {
        Self {
            point: Vec3::new(0.0, 0.0, z),
            normal: Vec3::z(),
        }
    }

    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        (p - self.point).dot(&self.normal)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticScene {
    pub ground: Plane,
    pub boxes: Vec<Aabb>,
    pub scene_id: String,
}

/// Which primitive produced a simulated return.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SurfaceLabel {
    Ground,
    Box(usize),
}

impl SurfaceLabel {
    /// Integer code used in `.label` files: 0 for ground, `i + 1` for box `i`.
    pub fn code(&self) -> u32 {
        match self {
            SurfaceLabel::Ground => 0,
            SurfaceLabel::Box(i) => *i as u32 + 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub depth: f64,
    pub label: SurfaceLabel,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamPattern {
    pub n_beams: usize,
    /// Lowest and highest beam elevation in degrees.
    pub vertical_fov: (f64, f64),
    pub horizontal_step: f64,
    pub max_range: f64,
}

impl Default for BeamPattern {
    fn default() -> Self {
        Self {
            n_beams: 32,
            vertical_fov: (-25.0, 3.0),
            horizontal_step: 1.0,
            max_range: 50.0,
        }
    }
}

impl BeamPattern {
    pub fn validate(&self) -> Result<()> {
        if self.n_beams == 0 {
            return Err(Error::Config("beam pattern needs at least one beam".into()));
        }
        let steps = 360.0 / self.horizontal_step;
        if !(self.horizontal_step > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "horizontal step {} does not divide 360",
                self.horizontal_step
            )));
        }
        if !(self.vertical_fov.0 <= self.vertical_fov.1) || !(self.max_range > 0.0) {
            return Err(Error::Config("invalid vertical fov or max range".into()));
        }
        Ok(())
    }

    pub fn elevations_deg(&self) -> Vec<f64> {
        let (lo, hi) = self.vertical_fov;
        if self.n_beams == 1 {
            return vec![lo];
        }
        let step = (hi - lo) / (self.n_beams - 1) as f64;
        (0..self.n_beams).map(|i| lo + step * i as f64).collect()
    }

    pub fn azimuths_deg(&self) -> Vec<f64> {
        let n = (360.0 / self.horizontal_step).round() as usize;
        (0..n).map(|k| k as f64 * self.horizontal_step).collect()
    }

    /// Unit directions in the sensor frame (x forward, y left, z up),
    /// beam-major.
    pub fn directions(&self) -> Vec<Vec3> {
        let azimuths = self.azimuths_deg();
        self.elevations_deg()
            .iter()
            .flat_map(|el| {
                let (se, ce) = el.to_radians().sin_cos();
                azimuths.iter().map(move |az| {
                    let (sa, ca) = az.to_radians().sin_cos();
                    Vec3::new(ce * ca, ce * sa, se)
                })
            })
            .collect()
    }
}

fn ray_plane(plane: &Plane, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let denom = dir.dot(&plane.normal);
    if denom == 0.0 {
        return None;
    }
    let t = (plane.point - origin).dot(&plane.normal) / denom;
    (t > 0.0).then_some(t)
}

/// Nearest positive hit on the six faces of a solid box.
fn ray_box_faces(aabb: &Aabb, origin: &Vec3, dir: &Vec3) -> Option<f64> {
    let mut best: Option<f64> = None;
    for axis in 0..3 {
        if dir[axis] == 0.0 {
            continue;
        }
        for face in [aabb.min[axis], aabb.max[axis]] {
            let t = (face - origin[axis]) / dir[axis];
            if !(t > 0.0) || best.is_some_and(|b| t >= b) {
                continue;
            }
            let p = origin + dir * t;
            let inside = (0..3).filter(|&a| a != axis).all(|a| {
                let tol = 1e-12 * (1.0 + p[a].abs());
                p[a] >= aabb.min[a] - tol && p[a] <= aabb.max[a] + tol
            });
            if inside {
                best = Some(t);
            }
        }
    }
    best
}

/// Exact first-return depth along a unit direction, or `None` when nothing
/// is hit within `max_range`.
pub fn cast_ray_exact(
    scene: &AnalyticScene,
    origin: &Vec3,
    direction: &Vec3,
    max_range: f64,
) -> Option<Hit> {
    let mut best = ray_plane(&scene.ground, origin, direction).map(|t| Hit {
        depth: t,
        label: SurfaceLabel::Ground,
    });
    for (i, b) in scene.boxes.iter().enumerate() {
        if let Some(t) = ray_box_faces(b, origin, direction) {
            if best.map_or(true, |h| t < h.depth) {
                best = Some(Hit {
                    depth: t,
                    label: SurfaceLabel::Box(i),
                });
            }
        }
    }
    best.filter(|h| h.depth <= max_range)
}

/// Simulated scan with the source primitive of every point.
pub fn simulate_scan_labeled(
    scene: &AnalyticScene,
    pose: &Pose,
    pattern: &BeamPattern,
    scan_index: usize,
) -> (LidarScan, Vec<SurfaceLabel>) {
    let origin = pose.translation;
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for dir in pattern.directions() {
        let world_dir = pose.rotation * dir;
        if let Some(hit) = cast_ray_exact(scene, &origin, &world_dir, pattern.max_range) {
            points.push(dir * hit.depth);
            labels.push(hit.label);
        }
    }
    let scan = LidarScan {
        points,
        pose: *pose,
        scan_index,
    };
    (scan, labels)
}

pub fn simulate_scan(
    scene: &AnalyticScene,
    pose: &Pose,
    pattern: &BeamPattern,
    scan_index: usize,
) -> LidarScan {
    simulate_scan_labeled(scene, pose, pattern, scan_index).0
}

/// Brute-force box membership along a ray, sampled every `step` up to `t_max`.
pub fn marching_oracle(ray: &Ray, aabb: &Aabb, step: f64, t_max: f64) -> Option<RayInterval> {
    assert!(step > 0.0);
    let n = (t_max / step).ceil() as usize;
    let mut first = None;
    let mut last = None;
    for k in 0..=n {
        let t = k as f64 * step;
        let p = ray.origin + ray.direction * t;
        let inside = (0..3).all(|a| p[a] >= aabb.min[a] && p[a] <= aabb.max[a]);
        if inside {
            first.get_or_insert(t);
            last = Some(t);
        }
    }
    Some(RayInterval::new(first?, last?))
}

/// Distance from a point to the nearest surface of the scene.
pub fn distance_to_scene(scene: &AnalyticScene, p: &Vec3) -> f64 {
    let mut best = scene.ground.signed_distance(p).abs();
    for b in &scene.boxes {
        best = best.min(distance_to_box_surface(b, p));
    }
    best
}

fn distance_to_box_surface(b: &Aabb, p: &Vec3) -> f64 {
    let mut outside = 0.0f64;
    let mut inside_gap = f64::INFINITY;
    for a in 0..3 {
        let below = b.min[a] - p[a];
        let above = p[a] - b.max[a];
        let d = below.max(above);
        if d > 0.0 {
            outside += d * d;
        }
        inside_gap = inside_gap.min(-d);
    }
    if outside > 0.0 {
        outside.sqrt()
    } else {
        inside_gap.max(0.0)
    }
}

impl AnalyticScene {
    /// Applies a rigid transform to the scene. Boxes stay axis-aligned, so
    /// only translations and quarter turns about z are exact.
    pub fn transformed(&self, pose: &Pose) -> AnalyticScene {
        let boxes = self
            .boxes
            .iter()
            .map(|b| {
                let corners = [b.min_corner(), b.max_corner()];
                let mut out = Aabb {
                    min: [f64::INFINITY; 3],
                    max: [f64::NEG_INFINITY; 3],
                };
                for cx in 0..2 {
                    for cy in 0..2 {
                        for cz in 0..2 {
                            let c = Vec3::new(corners[cx].x, corners[cy].y, corners[cz].z);
                            let w = pose.apply(&c);
                            for a in 0..3 {
                                out.min[a] = out.min[a].min(w[a]);
                                out.max[a] = out.max[a].max(w[a]);
                            }
                        }
                    }
                }
                out
            })
            .collect();
        AnalyticScene {
            ground: Plane {
                point: pose.apply(&self.ground.point),
                normal: pose.rotation * self.ground.normal,
            },
            boxes,
            scene_id: self.scene_id.clone(),
        }
    }
}

/// Layout of the default "boxworld" scene and its straight trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxworldSpec {
    pub n_scans: usize,
    pub trajectory_length: f64,
    pub sensor_height: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_side: f64,
    pub max_side: f64,
    /// Closest lateral distance of a box face to the trajectory.
    pub lateral_clearance: f64,
    pub max_lateral: f64,
    /// Minimum free gap between two boxes on the same side of the road.
    pub min_gap: f64,
}

impl Default for BoxworldSpec {
    fn default() -> Self {
        Self {
            n_scans: 20,
            trajectory_length: 30.0,
            sensor_height: 1.73,
            min_boxes: 4,
            max_boxes: 8,
            min_side: 1.0,
            max_side: 4.0,
            lateral_clearance: 3.0,
            max_lateral: 10.0,
            min_gap: 1.5,
        }
    }
}

/// Ground plane `z = 0` with boxes scattered on both sides of a straight
/// trajectory along +x. Boxes on the same side never overlap in x, so each
/// one is visible from the road.
pub fn boxworld(spec: &BoxworldSpec, seed: u64) -> (AnalyticScene, Vec<Pose>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let target = rng.gen_range(spec.min_boxes..=spec.max_boxes);
    let mut boxes: Vec<(usize, Aabb)> = Vec::new();
    let mut attempts = 0;
    while boxes.len() < target && attempts < 10_000 {
        attempts += 1;
        let side = boxes.len() % 2;
        let sx = rng.gen_range(spec.min_side..=spec.max_side);
        let sy = rng.gen_range(spec.min_side..=spec.max_side);
        let sz = rng.gen_range(spec.min_side..=spec.max_side);
        let x0 = rng.gen_range(0.0..=(spec.trajectory_length - sx).max(0.0));
        let near = spec.lateral_clearance;
        let far = (spec.max_lateral - sy).max(near);
        let y_near = rng.gen_range(near..=far);
        let (y0, y1) = if side == 0 {
            (y_near, y_near + sy)
        } else {
            (-y_near - sy, -y_near)
        };
        let candidate = Aabb {
            min: [x0, y0, 0.0],
            max: [x0 + sx, y1, sz],
        };
        let clash = boxes.iter().any(|(s, b)| {
            *s == side
                && candidate.min[0] < b.max[0] + spec.min_gap
                && b.min[0] < candidate.max[0] + spec.min_gap
        });
        if !clash {
            boxes.push((side, candidate));
        }
    }
    let scene = AnalyticScene {
        ground: Plane::horizontal(0.0),
        boxes: boxes.into_iter().map(|(_, b)| b).collect(),
        scene_id: format!("boxworld-{seed}"),
    };
    let poses = straight_trajectory(spec.n_scans, spec.trajectory_length, spec.sensor_height);
    (scene, poses)
}

pub fn straight_trajectory(n_scans: usize, length: f64, height: f64) -> Vec<Pose> {
    (0..n_scans)
        .map(|i| {
            let x = if n_scans > 1 {
                length * i as f64 / (n_scans - 1) as f64
            } else {
                0.0
            };
            Pose::from_yaw(0.0, Vec3::new(x, 0.0, height))
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    scene_id: String,
    ground_z: f64,
    #[serde(rename = "box", default)]
    boxes: Vec<[f64; 6]>,
}

/// Writes the scene as TOML with keys `scene_id`, `ground_z` and
/// `box = [[min_x, min_y, min_z, max_x, max_y, max_z], ...]`.
pub fn write_scene(path: &Path, scene: &AnalyticScene) -> Result<()> {
    if (scene.ground.normal - Vec3::z()).norm() > 1e-12 {
        return Err(Error::Data(
            "only horizontal ground planes can be written".into(),
        ));
    }
    let file = SceneFile {
        scene_id: scene.scene_id.clone(),
        ground_z: scene.ground.point.z,
        boxes: scene
            .boxes
            .iter()
            .map(|b| [b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]])
            .collect(),
    };
    let text = toml::to_string(&file).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_scene(path: &Path) -> Result<AnalyticScene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SceneFile = toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    let boxes = file
        .boxes
        .iter()
        .map(|c| {
            Aabb::new(Vec3::new(c[0], c[1], c[2]), Vec3::new(c[3], c[4], c[5]))
                .map_err(|e| Error::format(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnalyticScene {
        ground: Plane::horizontal(file.ground_z),
        boxes,
        scene_id: file.scene_id,
    })
}
