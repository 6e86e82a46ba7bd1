//! Axis-aligned boxes, rays and the slab intersection test.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Relative slack used to keep zero-thickness boxes intersectable.
const SLAB_TOLERANCE: f64 = 1e-9;

/// Axis-aligned bounding box in world coordinates (meters).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|i| !(min[i] <= max[i])) {
            return Err(Error::Geometry(format!(
                "box corners out of order: {:?} > {:?}",
                min.as_slice(),
                max.as_slice()
            )));
        }
        Ok(Self {
            min: [min.x, min.y, min.z],
            max: [max.x, max.y, max.z],
        })
    }

    pub fn min_corner(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn max_corner(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn center(&self) -> Vec3 {
        (self.min_corner() + self.max_corner()) * 0.5
    }

    pub fn extent(&self) -> Vec3 {
        self.max_corner() - self.min_corner()
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Radius of the sphere through all eight corners.
    pub fn circumradius(&self) -> f64 {
        0.5 * self.diagonal()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains_box(&self, other: &Aabb) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut out = *self;
        for i in 0..3 {
            out.min[i] = out.min[i].min(other.min[i]);
            out.max[i] = out.max[i].max(other.max[i]);
        }
        out
    }

    /// Moves every face outward by `margin`.
    pub fn inflate(&self, margin: f64) -> Aabb {
        debug_assert!(margin >= 0.0);
        let mut out = *self;
        for i in 0..3 {
            out.min[i] -= margin;
            out.max[i] += margin;
        }
        out
    }

    /// Maps a point of this box to `[-1, 1]^3`. Degenerate axes map to 0.
    pub fn normalize(&self, p: &Vec3) -> [f64; 3] {
        let mut out = [0.0; 3];
        for i in 0..3 {
            let half = 0.5 * (self.max[i] - self.min[i]);
            if half > 0.0 {
                let mid = 0.5 * (self.max[i] + self.min[i]);
                out[i] = (p[i] - mid) / half;
            }
        }
        out
    }
}

/// Free-function form of [`Aabb::inflate`].
pub fn inflate(aabb: &Aabb, margin: f64) -> Aabb {
    aabb.inflate(margin)
}

/// Tight bounding box of a non-empty point set.
pub fn aabb_of_points<'a, I>(points: I) -> Result<Aabb>
where
    I: IntoIterator<Item = &'a Vec3>,
{
    let mut iter = points.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::Geometry("bounding box of an empty point set".into()))?;
    let mut out = Aabb {
        min: [first.x, first.y, first.z],
        max: [first.x, first.y, first.z],
    };
    for p in iter {
        for i in 0..3 {
            out.min[i] = out.min[i].min(p[i]);
            out.max[i] = out.max[i].max(p[i]);
        }
    }
    Ok(out)
}

/// A LiDAR return: origin, unit direction, measured depth and endpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub depth: f64,
    pub endpoint: Vec3,
    pub child_index: Option<usize>,
}

impl Ray {
    /// Builds a ray from an origin and the observed endpoint. Returns `None`
    /// for returns closer than 1 µm to the origin.
    pub fn from_endpoints(origin: Vec3, endpoint: Vec3) -> Option<Self> {
        let offset = endpoint - origin;
        let depth = offset.norm();
        if !(depth >= 1e-6) {
            return None;
        }
        Some(Self {
            origin,
            direction: offset / depth,
            depth,
            endpoint,
            child_index: None,
        })
    }

    /// A direction-only query ray (no measured return).
    pub fn query(origin: Vec3, direction: Vec3) -> Self {
        let direction = direction.normalize();
        Self {
            origin,
            direction,
            depth: f64::INFINITY,
            endpoint: origin,
            child_index: None,
        }
    }

    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Parametric interval `[t_enter, t_exit]` along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayInterval {
    pub t_enter: f64,
    pub t_exit: f64,
}

impl RayInterval {
    pub fn new(t_enter: f64, t_exit: f64) -> Self {
        debug_assert!(t_enter <= t_exit, "{t_enter} > {t_exit}");
        Self { t_enter, t_exit }
    }

    pub fn length(&self) -> f64 {
        self.t_exit - self.t_enter
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_enter && t <= self.t_exit
    }

    /// Widens both ends by `margin`, keeping `t_enter` non-negative.
    pub fn widen(&self, margin: f64) -> Self {
        Self {
            t_enter: (self.t_enter - margin).max(0.0),
            t_exit: self.t_exit + margin,
        }
    }

    /// Intersection with `bounds`; `None` when disjoint.
    pub fn clip(&self, bounds: &RayInterval) -> Option<Self> {
        let lo = self.t_enter.max(bounds.t_enter);
        let hi = self.t_exit.min(bounds.t_exit);
        (lo <= hi).then(|| Self::new(lo, hi))
    }
}

/// Slab test. Returns the part of the ray inside `aabb` with `t >= 0`.
pub fn ray_aabb_intersect(ray: &Ray, aabb: &Aabb) -> Option<RayInterval> {
    let mut t_enter = f64::NEG_INFINITY;
    let mut t_exit = f64::INFINITY;
    for axis in 0..3 {
        let o = ray.origin[axis];
        let d = ray.direction[axis];
        let (lo, hi) = (aabb.min[axis], aabb.max[axis]);
        if d == 0.0 {
            if o < lo || o > hi {
                return None;
            }
            continue;
        }
        let inv = 1.0 / d;
        let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        t_enter = t_enter.max(t0);
        t_exit = t_exit.min(t1);
    }
    let slack = SLAB_TOLERANCE * (1.0 + t_enter.abs().max(t_exit.abs()));
    if t_enter > t_exit {
        if t_enter - t_exit > slack {
            return None;
        }
        let mid = 0.5 * (t_enter + t_exit);
        t_enter = mid;
        t_exit = mid;
    }
    if t_exit < 0.0 {
        return None;
    }
    Some(RayInterval::new(t_enter.max(0.0), t_exit))
}

/// Distance from `point` to the infinite line carrying `ray`.
pub fn distance_to_line(ray: &Ray, point: &Vec3) -> f64 {
    let v = point - ray.origin;
    (v - ray.direction * v.dot(&ray.direction)).norm()
}

/// Cheap rejection: does the ray's line pass through the box's circumsphere?
pub fn sphere_prefilter(ray: &Ray, aabb: &Aabb) -> bool {
    let r = aabb.circumradius();
    distance_to_line(ray, &aabb.center()) <= r * (1.0 + 1e-12) + 1e-12
}
