//! Discrete volume rendering along one ray.

use crate::geom::RayInterval;

/// Length given to the open interval after the last sample.
pub const LAST_DELTA: f64 = 1e3;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub t: Vec<f64>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub transmittance: Vec<f64>,
    pub weight: Vec<f64>,
}

impl RenderResult {
    /// Quadrature for sorted depths `t` with densities `sigma`:
    /// `alpha_k = 1 - exp(-sigma_k delta_k)`, `T_k = Π_{j<k} (1 - alpha_j)`,
    /// `w_k = T_k alpha_k`.
    pub fn from_sigma(t: Vec<f64>, sigma: Vec<f64>) -> Self {
        let n = t.len();
        assert_eq!(n, sigma.len());
        let mut delta = Vec::with_capacity(n);
        let mut alpha = Vec::with_capacity(n);
        let mut transmittance = Vec::with_capacity(n);
        let mut weight = Vec::with_capacity(n);
        // optical depth accumulated in log space
        let mut optical = 0.0f64;
        for k in 0..n {
            let d = if k + 1 < n { t[k + 1] - t[k] } else { LAST_DELTA };
            let tau = sigma[k] * d;
            let a = -(-tau).exp_m1();
            let trans = (-optical).exp();
            delta.push(d);
            alpha.push(a);
            transmittance.push(trans);
            weight.push(trans * a);
            optical += tau;
        }
        Self {
            t,
            sigma,
            delta,
            alpha,
            transmittance,
            weight,
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn total_weight(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// `Σ w_k t_k` over samples selected by `keep`.
    pub fn depth_where(&self, keep: impl Fn(f64) -> bool) -> f64 {
        self.t
            .iter()
            .zip(&self.weight)
            .filter(|(t, _)| keep(**t))
            .map(|(t, w)| w * t)
            .sum()
    }

    /// `Σ w_k` over samples selected by `keep`.
    pub fn weight_where(&self, keep: impl Fn(f64) -> bool) -> f64 {
        self.t
            .iter()
            .zip(&self.weight)
            .filter(|(t, _)| keep(**t))
            .map(|(_, w)| w)
            .sum()
    }

    /// Index of the largest weight (first one on ties).
    pub fn peak_index(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (k, &w) in self.weight.iter().enumerate() {
            if best.map_or(true, |(_, b)| w > b) {
                best = Some((k, w));
            }
        }
        best.map(|(k, _)| k)
    }

    /// Chain rule from per-sample weight gradients to density gradients:
    /// `∂L/∂σ_j = δ_j (g_j T_{j+1} - Σ_{k>j} g_k w_k)`.
    pub fn sigma_gradient(&self, d_weight: &[f64]) -> Vec<f64> {
        let n = self.len();
        assert_eq!(d_weight.len(), n);
        let mut out = vec![0.0; n];
        let mut tail = 0.0;
        for j in (0..n).rev() {
            let t_next = self.transmittance[j] * (1.0 - self.alpha[j]);
            out[j] = self.delta[j] * (d_weight[j] * t_next - tail);
            tail += d_weight[j] * self.weight[j];
        }
        out
    }
}

/// Unnormalized expected depth restricted to a closed interval.
pub fn render_depth(result: &RenderResult, interval: &RayInterval) -> f64 {
    result.depth_where(|t| interval.contains(t))
}
