//! Oracles shared by the integration suites.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pcnerf::cloud::fuse_scans;
use pcnerf::field::{FieldConfig, FieldModel};
use pcnerf::geom::{ray_aabb_intersect, sphere_prefilter, Aabb, Ray, RayInterval, Vec3};
use pcnerf::partition::{assign_ray_children, build_parent, PartitionParams, SegmentKind};
use pcnerf::simlidar::{boxworld, marching_oracle, simulate_scan_labeled, BeamPattern, BoxworldSpec, SurfaceLabel};
use pcnerf::train::{batch_loss, grad_total_loss, LossConfig, RayTarget, TrainRay};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return v / n;
        }
    }
}

pub fn random_box(rng: &mut ChaCha8Rng) -> Aabb {
    let min = Vec3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
    let ext = Vec3::new(rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0));
    Aabb::new(min, min + ext).unwrap()
}

/// Ray aimed near the box so hits and misses are both common.
pub fn random_ray_near(rng: &mut ChaCha8Rng, aabb: &Aabb) -> Ray {
    let origin = Vec3::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
    let spread = aabb.circumradius() * 1.5;
    let aim = aabb.center() + unit_vector(rng) * rng.gen_range(0.0..spread);
    let dir = if rng.gen_bool(0.1) { unit_vector(rng) } else { (aim - origin).normalize() };
    Ray::query(origin, dir)
}

#[derive(Debug, Default)]
pub struct GeometryStats {
    pub pairs: usize,
    pub hits: usize,
    pub disagreements: usize,
    pub worst_endpoint_rel: f64,
    pub prefilter_false_negatives: usize,
}

/// Slab test against marching, and the sphere prefilter against the slab test.
pub fn geometry_oracle(pairs: usize, seed: u64) -> GeometryStats {
    let mut rng = rng(seed);
    let mut stats = GeometryStats { pairs, ..Default::default() };
    for _ in 0..pairs {
        let aabb = random_box(&mut rng);
        let ray = random_ray_near(&mut rng, &aabb);
        let diag = aabb.diagonal();
        let slab = ray_aabb_intersect(&ray, &aabb);
        let march = marching_oracle(&ray, &aabb, 1e-4 * diag, 40.0);
        match (slab, march) {
            (Some(s), Some(m)) => {
                stats.hits += 1;
                let err = (s.t_enter - m.t_enter).abs().max((s.t_exit - m.t_exit).abs()) / diag;
                stats.worst_endpoint_rel = stats.worst_endpoint_rel.max(err);
            }
            (None, None) => {}
            _ => stats.disagreements += 1,
        }
        if slab.is_some() && !sphere_prefilter(&ray, &aabb) {
            stats.prefilter_false_negatives += 1;
        }
    }
    stats
}

#[derive(Debug)]
pub struct PartitionStats {
    pub n_boxes: usize,
    pub n_clusters: usize,
    pub ground_precision: f64,
    pub ground_recall: f64,
    pub worst_purity: f64,
    pub distinct_majorities: bool,
    pub assigned_fraction: f64,
    pub assigned_matching: f64,
}

/// Partitions the fused boxworld training cloud and scores it against the
/// simulator's surface labels.
pub fn partition_recovery(seed: u64) -> PartitionStats {
    let (scene, poses) = boxworld(&BoxworldSpec::default(), seed);
    let pattern = BeamPattern::default();
    let mut scans = Vec::new();
    let mut labels: Vec<SurfaceLabel> = Vec::new();
    for (i, pose) in poses.iter().enumerate() {
        let (scan, l) = simulate_scan_labeled(&scene, pose, &pattern, i);
        labels.extend(l);
        scans.push(scan);
    }
    let params = PartitionParams::default();
    let fused = fuse_scans(&scans, params.max_range, None).unwrap();
    assert_eq!(fused.len(), labels.len(), "every simulated return is within range");
    let origins: Vec<Vec3> = poses.iter().map(|p| p.translation).collect();
    let (parent, report) = build_parent(&fused, &origins, 0..poses.len(), &params, seed).unwrap();
    let ground_child = parent.children.iter().find(|c| c.kind == SegmentKind::Ground).map(|c| c.child_id);
    let is_ground = |l: &SurfaceLabel| *l == SurfaceLabel::Ground;

    let truth_ground = labels.iter().filter(|l| is_ground(l)).count();
    let predicted_ground = report.point_child.iter().filter(|c| c.is_some() && **c == ground_child).count();
    let tp = report
        .point_child
        .iter()
        .zip(&labels)
        .filter(|(c, l)| c.is_some() && **c == ground_child && is_ground(l))
        .count();

    let clusters: Vec<usize> = parent
        .children
        .iter()
        .filter(|c| c.kind == SegmentKind::Cluster)
        .map(|c| c.child_id)
        .collect();
    let mut worst_purity: f64 = 1.0;
    let mut majorities = Vec::new();
    for id in &clusters {
        let mut counts = std::collections::BTreeMap::new();
        for (c, l) in report.point_child.iter().zip(&labels) {
            if *c == Some(*id) {
                *counts.entry(l.code()).or_insert(0usize) += 1;
            }
        }
        let total: usize = counts.values().sum();
        let (label, top) = counts.iter().max_by_key(|(_, n)| **n).map(|(l, n)| (*l, *n)).unwrap_or((0, 0));
        majorities.push(label);
        worst_purity = worst_purity.min(top as f64 / total.max(1) as f64);
    }
    let mut distinct = majorities.clone();
    distinct.sort_unstable();
    distinct.dedup();

    let mut rays = fused.rays.clone();
    assign_ray_children(&mut rays, &parent.children);
    let assigned = rays.iter().filter(|r| r.child_index.is_some()).count();
    let mut matching = 0usize;
    for (ray, l) in rays.iter().zip(&labels) {
        let Some(id) = ray.child_index else { continue };
        let ok = if Some(id) == ground_child {
            is_ground(l)
        } else {
            let pos = clusters.iter().position(|c| *c == id).unwrap();
            majorities[pos] == l.code()
        };
        matching += usize::from(ok);
    }

    PartitionStats {
        n_boxes: scene.boxes.len(),
        n_clusters: clusters.len(),
        ground_precision: tp as f64 / predicted_ground.max(1) as f64,
        ground_recall: tp as f64 / truth_ground.max(1) as f64,
        worst_purity,
        distinct_majorities: distinct.len() == majorities.len() && !distinct.contains(&0),
        assigned_fraction: assigned as f64 / rays.len() as f64,
        assigned_matching: matching as f64 / assigned.max(1) as f64,
    }
}

/// O(N²) nearest-neighbour distances.
pub fn brute_nearest(from: &[Vec3], to: &[Vec3]) -> Vec<f64> {
    from.iter()
        .map(|p| to.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min))
        .collect()
}

pub fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    0.5 * (mean(brute_nearest(a, b)) + mean(brute_nearest(b, a)))
}

pub fn brute_f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> f64 {
    let frac = |v: Vec<f64>| v.iter().filter(|d| **d <= tau).count() as f64 / v.len() as f64;
    let p = frac(brute_nearest(a, b));
    let r = frac(brute_nearest(b, a));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn random_cloud(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n)
        .map(|_| Vec3::new(rng.gen_range(-scale..scale), rng.gen_range(-scale..scale), rng.gen_range(-scale..scale)))
        .collect()
}

/// A 2×16 network over a 24 m block with a positive head bias.
pub fn small_model(seed: u64) -> FieldModel {
    let cfg = FieldConfig {
        encoding_levels: 2,
        hidden_layers: 2,
        hidden_width: 16,
        skip_layer: 0,
    };
    let bounds = Aabb {
        min: [-2.0, -12.0, -3.0],
        max: [22.0, 12.0, 5.0],
    };
    let mut m = FieldModel::new(cfg, bounds, seed);
    let n = m.params.len();
    m.params[n - 1] = rng(seed ^ 0xB1A5).gen_range(0.0..1.0);
    m
}

/// Random rays from a sensor near the origin with child segments around
/// their measured depth; about one in five is left unassigned.
pub fn random_train_rays(rng: &mut ChaCha8Rng, n: usize) -> Vec<TrainRay> {
    (0..n)
        .map(|_| {
            let origin = Vec3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 1.7);
            let dir = Vec3::new(1.0, rng.gen_range(-0.6..0.6), rng.gen_range(-0.3..0.05)).normalize();
            let depth = rng.gen_range(3.0..16.0);
            let ray = Ray::from_endpoints(origin, origin + dir * depth).unwrap();
            let segment = rng.gen_bool(0.8).then(|| {
                let before = rng.gen_range(0.05..1.5);
                let after = rng.gen_range(0.05..2.0);
                RayInterval::new(depth - before, depth + after)
            });
            TrainRay {
                ray,
                target: RayTarget {
                    depth,
                    far: 20.0,
                    segment,
                },
            }
        })
        .collect()
}

/// Depths strictly inside `(0, 20)` that avoid every interval boundary of
/// `rays` by at least `clearance`.
pub fn clear_depths(rng: &mut ChaCha8Rng, rays: &[TrainRay], cfg: &LossConfig, n: usize, clearance: f64) -> Vec<Vec<f64>> {
    rays.iter()
        .map(|r| {
            let mut edges = vec![0.0, r.target.far];
            if let (Some(s), Some(w)) = (r.target.inflated_segment(cfg), r.target.depth_window(cfg)) {
                edges.extend([s.t_enter, s.t_exit, w.t_enter, w.t_exit]);
            }
            let mut out = Vec::with_capacity(n);
            while out.len() < n {
                let t = rng.gen_range(0.05..19.95);
                if edges.iter().all(|e| (t - e).abs() > clearance) {
                    out.push(t);
                }
            }
            out.sort_by(f64::total_cmp);
            out
        })
        .collect()
}

/// Central differences with steps shrunk until both probes keep the base
/// ReLU pattern. Returns the gradient and a mask of settled coordinates.
pub fn finite_difference(model: &FieldModel, rays: &[TrainRay], depths: &[Vec<f64>], cfg: &LossConfig) -> (Vec<f64>, Vec<bool>) {
    let points: Vec<Vec3> = rays
        .iter()
        .zip(depths)
        .flat_map(|(r, ts)| ts.iter().map(move |&t| r.ray.at(t)))
        .collect();
    let base = model.activation_pattern(&points);
    let mut out = vec![0.0; model.params.len()];
    let mut used = vec![false; model.params.len()];
    let mut probe = model.clone();
    for i in 0..model.params.len() {
        let mut h = 1e-5 * (1.0 + model.params[i].abs());
        for _ in 0..12 {
            probe.params[i] = model.params[i] + h;
            let plus_ok = probe.activation_pattern(&points) == base;
            let lp = batch_loss(&probe, rays, depths, cfg).total;
            probe.params[i] = model.params[i] - h;
            let minus_ok = probe.activation_pattern(&points) == base;
            let lm = batch_loss(&probe, rays, depths, cfg).total;
            probe.params[i] = model.params[i];
            if plus_ok && minus_ok {
                out[i] = (lp - lm) / (2.0 * h);
                used[i] = true;
                break;
            }
            h *= 0.25;
        }
    }
    (out, used)
}

/// Norm-wise relative error over the settled coordinates.
pub fn relative_error(analytic: &[f64], numeric: &[f64], used: &[bool]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for ((a, n), u) in analytic.iter().zip(numeric).zip(used) {
        if *u {
            diff += (a - n) * (a - n);
            na += a * a;
            nn += n * n;
        }
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-300)
}

pub fn loss_only(pd: f64, cf: f64, cd: f64) -> LossConfig {
    LossConfig {
        lambda_pd: pd,
        lambda_cf: cf,
        lambda_cd: cd,
        ..LossConfig::default()
    }
}

/// Worst relative gradient error over `draws` parameter draws, each on
/// `n_rays` fresh random rays, and the largest share of unsettled coordinates.
pub fn gradient_check(cfg: &LossConfig, n_rays: usize, draws: u64, seed: u64) -> (f64, f64) {
    let mut worst: f64 = 0.0;
    let mut skipped: f64 = 0.0;
    for d in 0..draws {
        let mut r = rng(seed * 1000 + d);
        let model = small_model(seed * 1000 + d);
        let rays = random_train_rays(&mut r, n_rays);
        let depths = clear_depths(&mut r, &rays, cfg, 48, 1e-3);
        let (_, analytic) = grad_total_loss(&model, &rays, &depths, cfg).unwrap();
        let (numeric, used) = finite_difference(&model, &rays, &depths, cfg);
        worst = worst.max(relative_error(&analytic, &numeric, &used));
        skipped = skipped.max(used.iter().filter(|u| !**u).count() as f64 / used.len() as f64);
    }
    (worst, skipped)
}

/// A run small enough for a test: 10 scans, coarse beams, a 2×16 network.
pub fn tiny_config(root: &std::path::Path, seed: u64) -> pcnerf::config::RunConfig {
    use pcnerf::config::{Profile, RunConfig};
    let mut cfg = RunConfig::profile(Profile::Desk);
    cfg.seed = seed;
    cfg.data.dataset = root.join("data");
    cfg.data.output = root.join("run");
    cfg.sim.world.n_scans = 10;
    cfg.sim.world.trajectory_length = 15.0;
    cfg.sim.beams.n_beams = 16;
    cfg.sim.beams.horizontal_step = 2.0;
    cfg.field = FieldConfig { encoding_levels: 3, hidden_layers: 2, hidden_width: 16, skip_layer: 0 };
    cfg.sampling.n_coarse = 16;
    cfg.sampling.n_fine = 16;
    cfg.train.batch_rays = 256;
    cfg.train.ray_stride = 8;
    cfg.infer.n_coarse = 32;
    cfg.infer.n_fine = 32;
    cfg.eval.ray_stride = 8;
    cfg
}

/// Every file below `root` as `(relative path, bytes)`, sorted by path.
pub fn tree_bytes(root: &std::path::Path) -> Vec<(std::path::PathBuf, Vec<u8>)> {
    fn walk(dir: &std::path::Path, root: &std::path::Path, out: &mut Vec<(std::path::PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
