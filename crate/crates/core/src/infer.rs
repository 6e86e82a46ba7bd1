//! Depth inference: one-step (expected depth over the parent interval),
//! two-step (pick a child interval, then average inside it) and the voxel
//! ray-casting baseline.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{merge_sorted, sample_coarse_uniform, sample_fine, Density, RenderResult};
use crate::geom::{ray_aabb_intersect, sphere_prefilter, Aabb, Ray, RayInterval, Vec3};
use crate::partition::ParentBlock;
use crate::train::LossConfig;

type NoRng = rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Extra samples placed inside every candidate interval.
    pub n_candidate: usize,
    pub w_min: f64,
    pub inflation_step: f64,
    pub max_inflation_steps: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            n_coarse: 256,
            n_fine: 512,
            n_candidate: 16,
            w_min: 1e-3,
            inflation_step: 0.1,
            max_inflation_steps: 5,
        }
    }
}

impl InferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_coarse < 2 {
            return Err(Error::Config("infer.n_coarse must be at least 2".into()));
        }
        if !(self.w_min >= 0.0) || !(self.inflation_step > 0.0) {
            return Err(Error::Config(
                "infer.w_min must be >= 0 and infer.inflation_step > 0".into(),
            ));
        }
        Ok(())
    }
}

/// `[t0, f^p]` for a ray, or `None` when it misses the parent box.
pub fn parent_interval(ray: &Ray, parent: &Aabb, t0: f64) -> Option<RayInterval> {
    let hit = ray_aabb_intersect(ray, parent)?;
    (hit.t_exit > t0).then(|| RayInterval::new(t0, hit.t_exit))
}

/// Deterministic coarse-plus-fine render over an interval.
pub fn render_interval<D: Density + ?Sized>(
    field: &D,
    ray: &Ray,
    interval: &RayInterval,
    n_coarse: usize,
    n_fine: usize,
    extra: &[f64],
) -> RenderResult {
    let mut coarse = sample_coarse_uniform::<NoRng>(interval, n_coarse, None);
    if !extra.is_empty() {
        let mut extra = extra.to_vec();
        extra.sort_by(f64::total_cmp);
        coarse = merge_sorted(&coarse, &extra);
    }
    let render = render_at(field, ray, coarse);
    if n_fine == 0 {
        return render;
    }
    let mut fine = sample_fine::<NoRng>(&render, n_fine, None);
    fine.sort_by(f64::total_cmp);
    render_at(field, ray, merge_sorted(&render.t, &fine))
}

fn render_at<D: Density + ?Sized>(field: &D, ray: &Ray, t: Vec<f64>) -> RenderResult {
    let points: Vec<Vec3> = t.iter().map(|&t| ray.at(t)).collect();
    let sigma = field.density(&points);
    RenderResult::from_sigma(t, sigma)
}

/// Expected depth over the whole parent interval.
pub fn infer_one_step<D: Density + ?Sized>(
    field: &D,
    ray: &Ray,
    parent: &Aabb,
    cfg: &InferConfig,
    loss: &LossConfig,
) -> Option<f64> {
    let interval = parent_interval(ray, parent, loss.t0)?;
    let render = render_interval(field, ray, &interval, cfg.n_coarse, cfg.n_fine, &[]);
    Some(render.depth_where(|t| interval.contains(t)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub child_id: usize,
    pub interval: RayInterval,
    pub weight_integral: f64,
    pub contains_peak: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Single,
    Peak,
    MaxIntegral,
    None,
}

impl SelectionRule {
    pub fn as_str(&self) -> &'static str {
        match self {
            SelectionRule::Single => "single",
            SelectionRule::Peak => "peak",
            SelectionRule::MaxIntegral => "max_integral",
            SelectionRule::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Selection {
    /// Index into the candidate list.
    pub index: Option<usize>,
    pub rule: SelectionRule,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InferenceOutcome {
    pub depth: Option<f64>,
    pub child_id: Option<usize>,
    pub rule: SelectionRule,
    pub inflation_steps_used: usize,
}

impl InferenceOutcome {
    fn unresolved(steps: usize) -> Self {
        Self {
            depth: None,
            child_id: None,
            rule: SelectionRule::None,
            inflation_steps_used: steps,
        }
    }
}

/// Geometric candidates: children whose circumsphere and box the ray meets,
/// clipped to `bounds`. Boxes are inflated by `inflation_step` until some
/// child is hit or `max_steps` is exhausted. Returns `(child_id, interval)`
/// pairs and the number of inflation steps used.
pub fn locate_children(
    ray: &Ray,
    parent: &ParentBlock,
    bounds: &RayInterval,
    inflation_step: f64,
    max_steps: usize,
) -> (Vec<(usize, RayInterval)>, usize) {
    for step in 0..=max_steps {
        let grow = step as f64 * inflation_step;
        let hits: Vec<(usize, RayInterval)> = parent
            .children
            .iter()
            .filter_map(|c| {
                let aabb = c.aabb.inflate(grow);
                if !sphere_prefilter(ray, &aabb) {
                    return None;
                }
                let iv = ray_aabb_intersect(ray, &aabb)?.clip(bounds)?;
                Some((c.child_id, iv))
            })
            .collect();
        if !hits.is_empty() {
            return (hits, step);
        }
    }
    (Vec::new(), max_steps)
}

/// Attaches `W` and the peak flag to each located interval.
pub fn score_candidates(render: &RenderResult, located: &[(usize, RayInterval)]) -> Vec<Candidate> {
    let peak_t = render.peak_index().map(|k| render.t[k]);
    located
        .iter()
        .map(|&(child_id, interval)| Candidate {
            child_id,
            interval,
            weight_integral: render.weight_where(|t| interval.contains(t)),
            contains_peak: peak_t.is_some_and(|t| interval.contains(t)),
        })
        .collect()
}

/// Larger `W` first, then the nearer interval, then the lower child id.
fn better(a: &Candidate, b: &Candidate) -> bool {
    a.weight_integral
        .total_cmp(&b.weight_integral)
        .reverse()
        .then(a.interval.t_enter.total_cmp(&b.interval.t_enter))
        .then(a.child_id.cmp(&b.child_id))
        .is_lt()
}

fn best_of(candidates: &[Candidate], keep: impl Fn(&Candidate) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in candidates.iter().enumerate() {
        if keep(c) && best.map_or(true, |b| better(c, &candidates[b])) {
            best = Some(i);
        }
    }
    best
}

/// Single candidate, else the one holding the weight peak, else the largest
/// `W`. A choice whose `W` is below `w_min` is rejected.
pub fn select_child(candidates: &[Candidate], w_min: f64) -> Selection {
    let (index, rule) = match candidates.len() {
        0 => return Selection { index: None, rule: SelectionRule::None },
        1 => (0, SelectionRule::Single),
        _ => match best_of(candidates, |c| c.contains_peak) {
            Some(i) => (i, SelectionRule::Peak),
            None => (best_of(candidates, |_| true).unwrap(), SelectionRule::MaxIntegral),
        },
    };
    if candidates[index].weight_integral < w_min {
        return Selection { index: None, rule: SelectionRule::None };
    }
    Selection { index: Some(index), rule }
}

/// Weighted mean depth of the samples inside `interval`, clamped to it.
pub fn interval_depth(render: &RenderResult, interval: &RayInterval) -> Option<f64> {
    let mass = render.weight_where(|t| interval.contains(t));
    if !(mass > 0.0) {
        return None;
    }
    let d = render.depth_where(|t| interval.contains(t)) / mass;
    Some(d.clamp(interval.t_enter, interval.t_exit))
}

/// Two-step inference. Candidate intervals are widened by `loss.epsilon`,
/// the same slack the free-space loss leaves around a child.
pub fn infer_two_step<D: Density + ?Sized>(
    field: &D,
    ray: &Ray,
    parent: &ParentBlock,
    cfg: &InferConfig,
    loss: &LossConfig,
) -> InferenceOutcome {
    let Some(bounds) = parent_interval(ray, &parent.aabb, loss.t0) else {
        return InferenceOutcome::unresolved(0);
    };
    let (located, steps) =
        locate_children(ray, parent, &bounds, cfg.inflation_step, cfg.max_inflation_steps);
    if located.is_empty() {
        return InferenceOutcome::unresolved(steps);
    }
    let located: Vec<(usize, RayInterval)> = located
        .into_iter()
        .filter_map(|(id, iv)| iv.widen(loss.epsilon).clip(&bounds).map(|iv| (id, iv)))
        .collect();
    let extra: Vec<f64> = located
        .iter()
        .flat_map(|(_, iv)| sample_coarse_uniform::<NoRng>(iv, cfg.n_candidate, None))
        .collect();
    let render = render_interval(field, ray, &bounds, cfg.n_coarse, cfg.n_fine, &extra);
    let candidates = score_candidates(&render, &located);
    let selection = select_child(&candidates, cfg.w_min);
    let Some(index) = selection.index else {
        return InferenceOutcome::unresolved(steps);
    };
    let chosen = candidates[index];
    match interval_depth(&render, &chosen.interval) {
        Some(depth) => InferenceOutcome {
            depth: Some(depth),
            child_id: Some(chosen.child_id),
            rule: selection.rule,
            inflation_steps_used: steps,
        },
        None => InferenceOutcome::unresolved(steps),
    }
}

/// Occupancy voxels of a point map on a grid anchored at the world origin.
#[derive(Clone, Debug)]
pub struct VoxelMap {
    pub voxel_size: f64,
    occupied: HashSet<[i64; 3]>,
}

impl VoxelMap {
    pub fn new(points: &[Vec3], voxel_size: f64) -> Result<Self> {
        if !(voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel size must be positive, got {voxel_size}")));
        }
        let occupied = points.iter().map(|p| Self::key_of(p, voxel_size)).collect();
        Ok(Self {
            voxel_size,
            occupied,
        })
    }

    fn key_of(p: &Vec3, size: f64) -> [i64; 3] {
        [
            (p.x / size).floor() as i64,
            (p.y / size).floor() as i64,
            (p.z / size).floor() as i64,
        ]
    }

    pub fn len(&self) -> usize {
        self.occupied.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied.is_empty()
    }

    pub fn is_occupied(&self, key: &[i64; 3]) -> bool {
        self.occupied.contains(key)
    }

    /// Grid traversal from the ray origin; distance to the entry point of the
    /// first occupied voxel within `max_range`.
    pub fn raycast(&self, ray: &Ray, max_range: f64) -> Option<f64> {
        if self.occupied.is_empty() {
            return None;
        }
        let size = self.voxel_size;
        let mut key = Self::key_of(&ray.origin, size);
        let mut step = [0i64; 3];
        let mut t_max = [f64::INFINITY; 3];
        let mut t_delta = [f64::INFINITY; 3];
        for a in 0..3 {
            let d = ray.direction[a];
            if d > 0.0 {
                step[a] = 1;
                t_max[a] = ((key[a] + 1) as f64 * size - ray.origin[a]) / d;
                t_delta[a] = size / d;
            } else if d < 0.0 {
                step[a] = -1;
                t_max[a] = (key[a] as f64 * size - ray.origin[a]) / d;
                t_delta[a] = -size / d;
            }
        }
        let mut t_entry = 0.0;
        while t_entry <= max_range {
            if self.occupied.contains(&key) {
                return Some(t_entry);
            }
            let a = (0..3)
                .min_by(|&i, &j| t_max[i].total_cmp(&t_max[j]))
                .unwrap();
            if !t_max[a].is_finite() {
                return None;
            }
            t_entry = t_max[a];
            key[a] += step[a];
            t_max[a] += t_delta[a];
        }
        None
    }
}

/// Single-ray form of [`VoxelMap::raycast`].
pub fn baseline_map_raycast(
    map_points: &[Vec3],
    voxel_size: f64,
    ray: &Ray,
    max_range: f64,
) -> Result<Option<f64>> {
    Ok(VoxelMap::new(map_points, voxel_size)?.raycast(ray, max_range))
}
