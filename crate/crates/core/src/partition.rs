//! Parent/child scene partitioning.
//!
//! Parent blocks split the trajectory; inside each block the fused cloud is
//! separated into a ground segment and Euclidean clusters, and every segment
//! becomes a child box.

use std::collections::{HashMap, HashSet};
use std::ops::Range;
use std::path::Path;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cloud::{fuse_scans, FusedCloud, LidarScan, Pose};
use crate::error::{Error, Result};
use crate::geom::{aabb_of_points, Aabb, Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Ground,
    Cluster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChildSegment {
    pub child_id: usize,
    pub kind: SegmentKind,
    pub aabb: Aabb,
    pub point_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParentBlock {
    pub aabb: Aabb,
    pub scan_start: usize,
    pub scan_end: usize,
    pub children: Vec<ChildSegment>,
}

impl ParentBlock {
    pub fn scan_indices(&self) -> Range<usize> {
        self.scan_start..self.scan_end
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub parents: Vec<ParentBlock>,
}

impl SceneGraph {
    /// Parent block whose scan range holds `scan_index`.
    pub fn parent_of_scan(&self, scan_index: usize) -> Option<usize> {
        self.parents
            .iter()
            .position(|p| p.scan_indices().contains(&scan_index))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundParams {
    pub trials: usize,
    pub inlier_dist: f64,
    pub min_normal_z: f64,
    pub min_inlier_fraction: f64,
    /// Plane inliers sharing a vertical column of this width with points
    /// above the plane are not ground; 0 disables the check.
    pub column_cell: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            trials: 512,
            inlier_dist: 0.15,
            min_normal_z: 0.8,
            min_inlier_fraction: 0.2,
            column_cell: 0.02,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionParams {
    pub max_range: f64,
    pub yaw_threshold_deg: f64,
    pub max_scans: usize,
    pub ground: GroundParams,
    pub cluster_radius: f64,
    pub min_cluster_size: usize,
    /// Merge clusters whose boxes overlap before the size filter.
    pub merge_overlapping: bool,
    pub parent_margin: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self {
            max_range: crate::cloud::DEFAULT_MAX_RANGE,
            yaw_threshold_deg: 30.0,
            max_scans: 50,
            ground: GroundParams::default(),
            cluster_radius: 0.5,
            min_cluster_size: 10,
            merge_overlapping: true,
            parent_margin: 1.0,
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = a % two_pi;
    if a > std::f64::consts::PI {
        a -= two_pi;
    } else if a < -std::f64::consts::PI {
        a += two_pi;
    }
    a
}

/// Splits a trajectory into consecutive blocks. A block closes once the
/// accumulated heading change since its first pose exceeds
/// `yaw_threshold_deg`, or when it holds `max_scans` poses.
pub fn split_trajectory(poses: &[Pose], yaw_threshold_deg: f64, max_scans: usize) -> Vec<Range<usize>> {
    let max_scans = max_scans.max(1);
    let threshold = yaw_threshold_deg.to_radians();
    let mut ranges = Vec::new();
    if poses.is_empty() {
        return ranges;
    }
    let mut start = 0;
    let mut turned = 0.0;
    for i in 1..poses.len() {
        turned += wrap_angle(poses[i].yaw() - poses[i - 1].yaw()).abs();
        if turned > threshold || i - start >= max_scans {
            ranges.push(start..i);
            start = i;
            turned = 0.0;
        }
    }
    ranges.push(start..poses.len());
    ranges
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GroundSplit {
    pub ground: Vec<usize>,
    pub non_ground: Vec<usize>,
    /// Unit normal and offset of the fitted plane `n·p + d = 0`.
    pub plane: Option<(Vec3, f64)>,
    /// Set when no admissible plane reached the inlier quota.
    pub no_plane: bool,
}

/// Randomized dominant-plane fit restricted to near-horizontal normals.
pub fn filter_ground(points: &[Vec3], params: &GroundParams, seed: u64) -> Result<GroundSplit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "ground extraction needs at least 3 points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(usize, Vec3, f64)> = None;
    for _ in 0..params.trials {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let normal = (points[j] - points[i]).cross(&(points[k] - points[i]));
        let len = normal.norm();
        if !(len > 1e-12) {
            continue;
        }
        let mut normal = normal / len;
        if normal.z < 0.0 {
            normal = -normal;
        }
        if normal.z < params.min_normal_z {
            continue;
        }
        let d = -normal.dot(&points[i]);
        let count = points
            .iter()
            .filter(|p| (normal.dot(p) + d).abs() <= params.inlier_dist)
            .count();
        if best.as_ref().map_or(true, |b| count > b.0) {
            best = Some((count, normal, d));
        }
    }
    let quota = (params.min_inlier_fraction * n as f64).ceil() as usize;
    match best {
        Some((count, normal, d)) if count >= quota && count > 0 => {
            let height = |i: usize| normal.dot(&points[i]) + d;
            let column = |i: usize| {
                let q = points[i] - normal * height(i);
                ((q.x / params.column_cell).floor() as i64, (q.y / params.column_cell).floor() as i64)
            };
            let occupied: HashSet<(i64, i64)> = if params.column_cell > 0.0 {
                (0..n).filter(|&i| height(i) > params.inlier_dist).map(column).collect()
            } else {
                HashSet::new()
            };
            let (ground, non_ground): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| {
                height(i).abs() <= params.inlier_dist
                    && (occupied.is_empty() || !occupied.contains(&column(i)))
            });
            Ok(GroundSplit {
                ground,
                non_ground,
                plane: Some((normal, d)),
                no_plane: false,
            })
        }
        _ => {
            warn!("no ground plane with {quota} inliers among {n} points");
            Ok(GroundSplit {
                ground: vec![],
                non_ground: (0..n).collect(),
                plane: None,
                no_plane: true,
            })
        }
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

fn cell_of(p: &Vec3, size: f64) -> (i64, i64, i64) {
    (
        (p.x / size).floor() as i64,
        (p.y / size).floor() as i64,
        (p.z / size).floor() as i64,
    )
}

/// Region growing by radius connectivity. `indices` select the points to
/// cluster; returned clusters hold those same indices, sorted, with clusters
/// ordered by their smallest member.
pub fn cluster_regions(
    points: &[Vec3],
    indices: &[usize],
    radius: f64,
    min_size: usize,
) -> Result<Vec<Vec<usize>>> {
    if !(radius > 0.0) {
        return Err(Error::Config(format!("cluster radius must be positive, got {radius}")));
    }
    let mut sorted = indices.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let m = sorted.len();
    let mut grid: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
    for (local, &idx) in sorted.iter().enumerate() {
        grid.entry(cell_of(&points[idx], radius)).or_default().push(local);
    }
    let r2 = radius * radius;
    let mut sets = DisjointSet::new(m);
    for (local, &idx) in sorted.iter().enumerate() {
        let p = &points[idx];
        let (cx, cy, cz) = cell_of(p, radius);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(bucket) = grid.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &other in bucket {
                        if other > local && (points[sorted[other]] - p).norm_squared() <= r2 {
                            sets.union(local, other);
                        }
                    }
                }
            }
        }
    }
    let mut by_root: Vec<Vec<usize>> = vec![Vec::new(); m];
    for local in 0..m {
        let root = sets.find(local);
        by_root[root].push(sorted[local]);
    }
    // roots are minimal members: clusters come out ordered by smallest index
    Ok(by_root
        .into_iter()
        .filter(|c| !c.is_empty() && c.len() >= min_size)
        .collect())
}

/// Unions clusters whose bounding boxes intersect, repeating until no two
/// boxes overlap. Output order follows the smallest member index.
pub fn merge_overlapping_clusters(points: &[Vec3], clusters: Vec<Vec<usize>>) -> Vec<Vec<usize>> {
    let mut groups = clusters;
    loop {
        let boxes: Vec<Aabb> = groups
            .iter()
            .map(|c| aabb_of_points(c.iter().map(|&i| &points[i])).expect("clusters are non-empty"))
            .collect();
        let mut sets = DisjointSet::new(groups.len());
        let mut merged = false;
        for a in 0..groups.len() {
            for b in a + 1..groups.len() {
                let (x, y) = (&boxes[a], &boxes[b]);
                let overlap = (0..3).all(|k| x.min[k] <= y.max[k] && y.min[k] <= x.max[k]);
                if overlap && sets.find(a) != sets.find(b) {
                    sets.union(a, b);
                    merged = true;
                }
            }
        }
        if !merged {
            return groups;
        }
        let mut next: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
        for (g, members) in groups.into_iter().enumerate() {
            next[sets.find(g)].extend(members);
        }
        groups = next.into_iter().filter(|c| !c.is_empty()).collect();
        for c in &mut groups {
            c.sort_unstable();
        }
        groups.sort_by_key(|c| c[0]);
    }
}

/// One child per cluster plus one ground child (id 0) when ground exists.
pub fn build_children(
    points: &[Vec3],
    ground: &[usize],
    clusters: &[Vec<usize>],
) -> Result<Vec<ChildSegment>> {
    let mut children = Vec::with_capacity(clusters.len() + 1);
    if !ground.is_empty() {
        children.push(ChildSegment {
            child_id: 0,
            kind: SegmentKind::Ground,
            aabb: aabb_of_points(ground.iter().map(|&i| &points[i]))?,
            point_count: ground.len(),
        });
    }
    for cluster in clusters {
        children.push(ChildSegment {
            child_id: children.len(),
            kind: SegmentKind::Cluster,
            aabb: aabb_of_points(cluster.iter().map(|&i| &points[i]))?,
            point_count: cluster.len(),
        });
    }
    Ok(children)
}

/// Sets `child_index` to the smallest-volume child containing the endpoint.
/// Returns the number of rays left unassigned.
pub fn assign_ray_children(rays: &mut [Ray], children: &[ChildSegment]) -> usize {
    let mut unassigned = 0;
    for ray in rays.iter_mut() {
        ray.child_index = children
            .iter()
            .filter(|c| c.aabb.contains(&ray.endpoint))
            .min_by(|a, b| {
                a.aabb
                    .volume()
                    .total_cmp(&b.aabb.volume())
                    .then(a.child_id.cmp(&b.child_id))
            })
            .map(|c| c.child_id);
        if ray.child_index.is_none() {
            unassigned += 1;
        }
    }
    unassigned
}

/// Bookkeeping of one parent block's construction.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockReport {
    pub n_points: usize,
    pub n_ground: usize,
    pub n_clustered: usize,
    pub n_noise: usize,
    pub no_ground_plane: bool,
    /// Child id of every fused point; `None` for discarded noise.
    pub point_child: Vec<Option<usize>>,
}

/// Builds one parent block from the fused training cloud of its scans.
/// `origins` are sensor positions that the parent box must also enclose.
pub fn build_parent(
    fused: &FusedCloud,
    origins: &[Vec3],
    scans: Range<usize>,
    params: &PartitionParams,
    seed: u64,
) -> Result<(ParentBlock, BlockReport)> {
    let points = fused.endpoints();
    let split = filter_ground(&points, &params.ground, seed)?;
    let clusters = if params.merge_overlapping {
        let raw = cluster_regions(&points, &split.non_ground, params.cluster_radius, 1)?;
        merge_overlapping_clusters(&points, raw)
            .into_iter()
            .filter(|c| c.len() >= params.min_cluster_size)
            .collect()
    } else {
        cluster_regions(
            &points,
            &split.non_ground,
            params.cluster_radius,
            params.min_cluster_size,
        )?
    };
    let children = build_children(&points, &split.ground, &clusters)?;
    if children.is_empty() {
        return Err(Error::Data(format!(
            "scans {scans:?}: neither ground nor clusters were found"
        )));
    }
    let aabb = aabb_of_points(points.iter().chain(origins))?.inflate(params.parent_margin);
    let n_clustered: usize = clusters.iter().map(Vec::len).sum();
    let mut point_child = vec![None; points.len()];
    for &i in &split.ground {
        point_child[i] = Some(0);
    }
    let first_cluster = usize::from(!split.ground.is_empty());
    for (k, cluster) in clusters.iter().enumerate() {
        for &i in cluster {
            point_child[i] = Some(first_cluster + k);
        }
    }
    let report = BlockReport {
        n_points: points.len(),
        n_ground: split.ground.len(),
        n_clustered,
        n_noise: points.len() - split.ground.len() - n_clustered,
        no_ground_plane: split.no_plane,
        point_child,
    };
    Ok((
        ParentBlock {
            aabb,
            scan_start: scans.start,
            scan_end: scans.end,
            children,
        },
        report,
    ))
}

/// Splits the trajectory and builds every parent block from the training
/// scans. `poses` covers all scans (training and held out) by scan index.
pub fn build_scene_graph(
    poses: &[Pose],
    train_scans: &[LidarScan],
    params: &PartitionParams,
    seed: u64,
) -> Result<(SceneGraph, Vec<BlockReport>)> {
    let ranges = split_trajectory(poses, params.yaw_threshold_deg, params.max_scans);
    let mut graph = SceneGraph::default();
    let mut reports = Vec::new();
    for (block, range) in ranges.into_iter().enumerate() {
        let scans: Vec<LidarScan> = train_scans
            .iter()
            .filter(|s| range.contains(&s.scan_index))
            .cloned()
            .collect();
        if scans.is_empty() {
            warn!("parent block {block} ({range:?}) has no training scans; skipped");
            continue;
        }
        let fused = fuse_scans(&scans, params.max_range, None)?;
        let origins: Vec<Vec3> = poses[range.clone()].iter().map(|p| p.translation).collect();
        let (parent, report) =
            build_parent(&fused, &origins, range, params, seed.wrapping_add(block as u64))?;
        graph.parents.push(parent);
        reports.push(report);
    }
    if graph.parents.is_empty() {
        return Err(Error::Data("no parent block could be built".into()));
    }
    Ok((graph, reports))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_poses(yaws_deg: &[f64]) -> Vec<Pose> {
        yaws_deg
            .iter()
            .enumerate()
            .map(|(i, y)| Pose::from_yaw(y.to_radians(), Vec3::new(i as f64, 0.0, 0.0)))
            .collect()
    }

    #[test]
    fn straight_trajectory_splits_by_length() {
        let poses = line_poses(&[0.0; 100]);
        let ranges = split_trajectory(&poses, 30.0, 50);
        assert_eq!(ranges, vec![0..50, 50..100]);
        assert_eq!(split_trajectory(&poses[..1], 30.0, 50), vec![0..1]);
    }

    #[test]
    fn zigzag_splits_at_each_turn() {
        // 40 degree heading flips every 10 poses
        let yaws: Vec<f64> = (0..50).map(|i| if (i / 10) % 2 == 0 { 0.0 } else { 40.0 }).collect();
        let ranges = split_trajectory(&line_poses(&yaws), 30.0, 50);
        assert_eq!(ranges.len(), 5);
        assert!(ranges.iter().all(|r| r.len() == 10));
    }

    #[test]
    fn plane_plus_outlier() {
        let mut pts: Vec<Vec3> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vec3::new(i as f64, j as f64, 0.0)))
            .collect();
        pts.push(Vec3::new(3.5, 3.5, 5.0));
        let split = filter_ground(&pts, &GroundParams::default(), 1).unwrap();
        assert_eq!(split.ground.len(), 100);
        assert_eq!(split.non_ground, vec![100]);
        // a plane point directly below a raised point is not ground
        pts[100] = Vec3::new(3.0, 3.0, 5.0);
        let split = filter_ground(&pts, &GroundParams::default(), 1).unwrap();
        assert_eq!(split.ground.len(), 99);
        assert_eq!(split.non_ground, vec![33, 100]);
    }

    #[test]
    fn vertical_wall_has_no_ground() {
        let pts: Vec<Vec3> = (0..10)
            .flat_map(|i| (0..10).map(move |j| Vec3::new(5.0, i as f64, j as f64)))
            .collect();
        let split = filter_ground(&pts, &GroundParams::default(), 1).unwrap();
        assert!(split.ground.is_empty());
        assert!(split.no_plane);
        assert_eq!(split.non_ground.len(), 100);
    }

    #[test]
    fn too_few_points_for_ground() {
        assert!(filter_ground(&[Vec3::zeros(); 2], &GroundParams::default(), 0).is_err());
    }

    #[test]
    fn two_blobs_two_clusters() {
        let mut pts = Vec::new();
        for i in 0..20 {
            let f = i as f64 * 0.05;
            pts.push(Vec3::new(f, 0.0, 1.0));
            pts.push(Vec3::new(10.0 + f, 0.0, 1.0));
        }
        let all: Vec<usize> = (0..pts.len()).collect();
        let clusters = cluster_regions(&pts, &all, 0.5, 5).unwrap();
        assert_eq!(clusters.len(), 2);
        assert_eq!(clusters[0][0], 0);
        assert_eq!(clusters[1][0], 1);
        assert!(cluster_regions(&pts, &[0], 0.5, 5).unwrap().is_empty());
        assert!(cluster_regions(&pts, &all, 0.0, 5).is_err());
    }

    #[test]
    fn child_counts() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 0.0), Vec3::new(5.0, 5.0, 1.0)];
        let only_ground = build_children(&pts, &[0, 1], &[]).unwrap();
        assert_eq!(only_ground.len(), 1);
        assert_eq!(only_ground[0].kind, SegmentKind::Ground);
        let mixed = build_children(&pts, &[0, 1], &[vec![2], vec![0], vec![1]]).unwrap();
        assert_eq!(mixed.len(), 4);
        assert_eq!(
            mixed.iter().map(|c| c.child_id).collect::<Vec<_>>(),
            vec![0, 1, 2, 3]
        );
    }

    #[test]
    fn smallest_containing_child_wins() {
        let children = vec![
            ChildSegment {
                child_id: 0,
                kind: SegmentKind::Ground,
                aabb: Aabb { min: [-10.0, -10.0, -1.0], max: [10.0, 10.0, 1.0] },
                point_count: 100,
            },
            ChildSegment {
                child_id: 1,
                kind: SegmentKind::Cluster,
                aabb: Aabb { min: [2.0, 2.0, 0.0], max: [3.0, 3.0, 2.0] },
                point_count: 20,
            },
        ];
        let mk = |p: Vec3| Ray::from_endpoints(Vec3::new(0.0, 0.0, 5.0), p).unwrap();
        let mut rays = vec![
            mk(Vec3::new(2.5, 2.5, 0.5)),
            mk(Vec3::new(-5.0, 0.0, 0.0)),
            mk(Vec3::new(50.0, 0.0, 0.0)),
        ];
        let unassigned = assign_ray_children(&mut rays, &children);
        assert_eq!(rays[0].child_index, Some(1));
        assert_eq!(rays[1].child_index, Some(0));
        assert_eq!(rays[2].child_index, None);
        assert_eq!(unassigned, 1);
    }

    #[test]
    fn scene_graph_file_round_trip() {
        let graph = SceneGraph {
            parents: vec![ParentBlock {
                aabb: Aabb { min: [-1.0; 3], max: [4.0; 3] },
                scan_start: 0,
                scan_end: 20,
                children: vec![ChildSegment {
                    child_id: 0,
                    kind: SegmentKind::Ground,
                    aabb: Aabb { min: [0.0; 3], max: [3.0, 3.0, 0.0] },
                    point_count: 9,
                }],
            }],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.toml");
        graph.write(&path).unwrap();
        assert_eq!(SceneGraph::read(&path).unwrap(), graph);
        assert_eq!(graph.parent_of_scan(7), Some(0));
        assert_eq!(graph.parent_of_scan(20), None);
    }
}
