//! Per-ray objectives: parent depth, child free space and child depth.

use serde::{Deserialize, Serialize};

use crate::field::RenderResult;
use crate::geom::RayInterval;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_pd: f64,
    pub lambda_cf: f64,
    pub lambda_cd: f64,
    /// Widening (m) of the child depth window beyond the inflated segment.
    pub gamma: f64,
    /// Inflation (m) of the child segment bounds.
    pub epsilon: f64,
    /// Near integration limit (m).
    pub t0: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_pd: 1.0,
            lambda_cf: 1e6,
            lambda_cd: 1e5,
            gamma: 2.0,
            epsilon: 0.2,
            t0: 0.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> crate::Result<()> {
        let all = [
            self.lambda_pd,
            self.lambda_cf,
            self.lambda_cd,
            self.gamma,
            self.epsilon,
            self.t0,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(crate::Error::Config(
                "loss weights, gamma, epsilon and t0 must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Supervision of one training ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RayTarget {
    /// Measured depth.
    pub depth: f64,
    /// Exit distance from the parent box.
    pub far: f64,
    /// Raw intersection with the ray's own child box, when assigned.
    pub segment: Option<RayInterval>,
}

impl RayTarget {
    pub fn parent_interval(&self, cfg: &LossConfig) -> RayInterval {
        RayInterval::new(cfg.t0.min(self.far), self.far)
    }

    /// `[n - ε, f + ε]`.
    pub fn inflated_segment(&self, cfg: &LossConfig) -> Option<RayInterval> {
        self.segment.map(|s| {
            RayInterval::new(s.t_enter - cfg.epsilon, s.t_exit + cfg.epsilon)
        })
    }

    /// `[n - ε - γ, f + ε + γ]`.
    pub fn depth_window(&self, cfg: &LossConfig) -> Option<RayInterval> {
        self.segment.map(|s| {
            RayInterval::new(
                s.t_enter - cfg.epsilon - cfg.gamma,
                s.t_exit + cfg.epsilon + cfg.gamma,
            )
        })
    }
}

/// Smooth L1 with its quadratic zone shrunk from 1 m to 0.1 m:
/// `0.1 · S(10x, 10y)`.
pub fn smooth_l1_prime(x: f64, y: f64) -> f64 {
    let r = 10.0 * (x - y);
    0.1 * if r.abs() < 1.0 { 0.5 * r * r } else { r.abs() - 0.5 }
}

/// Derivative of [`smooth_l1_prime`] in its first argument.
pub fn smooth_l1_prime_dx(x: f64, y: f64) -> f64 {
    let r = 10.0 * (x - y);
    if r.abs() < 1.0 {
        r
    } else {
        r.signum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub pd: f64,
    pub cf: f64,
    pub cd: f64,
}

impl LossTerms {
    pub fn total(&self, cfg: &LossConfig) -> f64 {
        cfg.lambda_pd * self.pd + cfg.lambda_cf * self.cf + cfg.lambda_cd * self.cd
    }

    pub fn add(&mut self, other: &LossTerms) {
        self.pd += other.pd;
        self.cf += other.cf;
        self.cd += other.cd;
    }

    pub fn scaled(&self, s: f64) -> LossTerms {
        LossTerms {
            pd: self.pd * s,
            cf: self.cf * s,
            cd: self.cd * s,
        }
    }
}

pub fn loss_parent_depth(render: &RenderResult, target: &RayTarget, cfg: &LossConfig) -> f64 {
    let iv = target.parent_interval(cfg);
    smooth_l1_prime(render.depth_where(|t| iv.contains(t)), target.depth)
}

/// `Σ w_k²` over samples of `[t0, f^p]` outside `[n - ε, f + ε]`.
pub fn loss_child_free(render: &RenderResult, target: &RayTarget, cfg: &LossConfig) -> f64 {
    let Some(seg) = target.inflated_segment(cfg) else {
        return 0.0;
    };
    let parent = target.parent_interval(cfg);
    render
        .t
        .iter()
        .zip(&render.weight)
        .filter(|(t, _)| parent.contains(**t) && !seg.contains(**t))
        .map(|(_, w)| w * w)
        .sum()
}

pub fn loss_child_depth(render: &RenderResult, target: &RayTarget, cfg: &LossConfig) -> f64 {
    let Some(window) = target.depth_window(cfg) else {
        return 0.0;
    };
    let parent = target.parent_interval(cfg);
    let window = window.clip(&parent);
    let depth = match window {
        Some(w) => render.depth_where(|t| w.contains(t)),
        None => 0.0,
    };
    smooth_l1_prime(depth, target.depth)
}

pub fn loss_terms(render: &RenderResult, target: &RayTarget, cfg: &LossConfig) -> LossTerms {
    LossTerms {
        pd: loss_parent_depth(render, target, cfg),
        cf: loss_child_free(render, target, cfg),
        cd: loss_child_depth(render, target, cfg),
    }
}

/// Weighted per-ray objective.
pub fn total_loss(render: &RenderResult, target: &RayTarget, cfg: &LossConfig) -> f64 {
    loss_terms(render, target, cfg).total(cfg)
}

/// Loss terms of one ray and the gradient of the weighted total with respect
/// to every rendering weight `w_k`.
pub fn loss_and_weight_gradient(
    render: &RenderResult,
    target: &RayTarget,
    cfg: &LossConfig,
) -> (LossTerms, Vec<f64>) {
    let n = render.len();
    let mut grad = vec![0.0; n];
    let parent = target.parent_interval(cfg);

    let pd_depth = render.depth_where(|t| parent.contains(t));
    let pd = smooth_l1_prime(pd_depth, target.depth);
    if cfg.lambda_pd != 0.0 {
        let g = cfg.lambda_pd * smooth_l1_prime_dx(pd_depth, target.depth);
        for k in 0..n {
            if parent.contains(render.t[k]) {
                grad[k] += g * render.t[k];
            }
        }
    }

    let (mut cf, mut cd) = (0.0, 0.0);
    if let (Some(seg), Some(window)) = (target.inflated_segment(cfg), target.depth_window(cfg)) {
        for k in 0..n {
            let t = render.t[k];
            if parent.contains(t) && !seg.contains(t) {
                let w = render.weight[k];
                cf += w * w;
                grad[k] += cfg.lambda_cf * 2.0 * w;
            }
        }
        let window = window.clip(&parent);
        let in_window = |t: f64| window.is_some_and(|w| w.contains(t));
        let cd_depth = render.depth_where(in_window);
        cd = smooth_l1_prime(cd_depth, target.depth);
        if cfg.lambda_cd != 0.0 {
            let g = cfg.lambda_cd * smooth_l1_prime_dx(cd_depth, target.depth);
            for k in 0..n {
                if in_window(render.t[k]) {
                    grad[k] += g * render.t[k];
                }
            }
        }
    }
    (LossTerms { pd, cf, cd }, grad)
}
