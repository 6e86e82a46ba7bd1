//! Sample placement along a ray: stratified, child-segmented and
//! weight-driven (inverse CDF).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::render::RenderResult;
use crate::geom::RayInterval;

/// Floor added to every coarse bin before inverting the CDF.
const BIN_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    pub n_coarse: usize,
    pub n_fine: usize,
    /// Share of coarse samples forced into the child segment.
    pub lambda_in: f64,
}

impl SamplingConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.n_coarse < 2 || !(0.0..=1.0).contains(&self.lambda_in) {
            return Err(crate::Error::Config(format!(
                "sampling needs n_coarse >= 2 and lambda_in in [0, 1], got {} and {}",
                self.n_coarse, self.lambda_in
            )));
        }
        Ok(())
    }
}

/// Draws in [0, 1): jittered when an rng is given, midpoint otherwise.
fn jitter<R: Rng>(rng: &mut Option<&mut R>) -> f64 {
    match rng {
        Some(r) => r.gen::<f64>(),
        None => 0.5,
    }
}

fn stratified_into<R: Rng>(
    interval: &RayInterval,
    n: usize,
    rng: &mut Option<&mut R>,
    out: &mut Vec<f64>,
) {
    let step = interval.length() / n.max(1) as f64;
    for i in 0..n {
        let t = interval.t_enter + (i as f64 + jitter(rng)) * step;
        out.push(t.min(interval.t_exit));
    }
}

/// One draw per equal sub-interval, in increasing order.
pub fn sample_coarse_uniform<R: Rng>(
    interval: &RayInterval,
    n: usize,
    mut rng: Option<&mut R>,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    stratified_into(interval, n, &mut rng, &mut out);
    out
}

/// `ceil(lambda_in·n)` stratified draws inside `child`, the rest over
/// `parent`, merged in increasing order.
pub fn sample_child_segmented<R: Rng>(
    parent: &RayInterval,
    child: &RayInterval,
    n: usize,
    lambda_in: f64,
    mut rng: Option<&mut R>,
) -> Vec<f64> {
    let Some(child) = child.clip(parent) else {
        return sample_coarse_uniform(parent, n, rng);
    };
    let n_in = ((lambda_in * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n);
    let mut out = Vec::with_capacity(n);
    stratified_into(parent, n - n_in, &mut rng, &mut out);
    stratified_into(&child, n_in, &mut rng, &mut out);
    out.sort_by(f64::total_cmp);
    out
}

/// Inverse-CDF draws from the piecewise-constant density whose bin
/// `[t_k, t_{k+1}]` carries mass `w_k + 1e-5`. All-zero weights fall back to
/// stratified sampling over the coarse span.
pub fn sample_fine<R: Rng>(coarse: &RenderResult, n_fine: usize, mut rng: Option<&mut R>) -> Vec<f64> {
    let t = &coarse.t;
    if t.len() < 2 || n_fine == 0 {
        return Vec::new();
    }
    let span = RayInterval::new(t[0], t[t.len() - 1]);
    let bins = t.len() - 1;
    if coarse.weight[..bins].iter().all(|w| *w <= 0.0) {
        return sample_coarse_uniform(&span, n_fine, rng);
    }
    let mut cdf = Vec::with_capacity(bins + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for w in &coarse.weight[..bins] {
        acc += w.max(0.0) + BIN_FLOOR;
        cdf.push(acc);
    }
    let mut out = Vec::with_capacity(n_fine);
    let mut bin = 0;
    for i in 0..n_fine {
        let u = acc * (i as f64 + jitter(&mut rng)) / n_fine as f64;
        while bin + 1 < bins && cdf[bin + 1] <= u {
            bin += 1;
        }
        let mass = cdf[bin + 1] - cdf[bin];
        let frac = ((u - cdf[bin]) / mass).clamp(0.0, 1.0);
        out.push(t[bin] + frac * (t[bin + 1] - t[bin]));
    }
    out
}

/// Merges two increasing sample lists.
pub fn merge_sorted(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            out.push(a[i]);
            i += 1;
        } else {
            out.push(b[j]);
            j += 1;
        }
    }
    out.extend_from_slice(&a[i..]);
    out.extend_from_slice(&b[j..]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    #[test]
    fn midpoints_without_rng() {
        let s = sample_coarse_uniform::<NoRng>(&RayInterval::new(0.0, 1.0), 4, None);
        assert_eq!(s, vec![0.125, 0.375, 0.625, 0.875]);
        let one = sample_coarse_uniform::<NoRng>(&RayInterval::new(2.0, 3.0), 1, None);
        assert_eq!(one, vec![2.5]);
    }

    #[test]
    fn random_draws_stay_sorted_and_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let iv = RayInterval::new(1.0, 7.0);
        for _ in 0..200 {
            let s = sample_coarse_uniform(&iv, 17, Some(&mut rng));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
            assert!(s.iter().all(|t| iv.contains(*t)));
        }
    }

    #[test]
    fn segmented_extremes() {
        let parent = RayInterval::new(0.0, 40.0);
        let child = RayInterval::new(12.0, 14.0);
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            sample_child_segmented(&parent, &child, 32, 0.0, Some(&mut a)),
            sample_coarse_uniform(&parent, 32, Some(&mut b))
        );
        let all_in = sample_child_segmented(&parent, &child, 32, 1.0, Some(&mut a));
        assert!(all_in.iter().all(|t| child.contains(*t)));
    }

    #[test]
    fn segmented_keeps_child_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let parent = RayInterval::new(0.0, 50.0);
        for k in 0..200 {
            let lo = (k as f64 * 0.2) % 45.0;
            let child = RayInterval::new(lo, lo + 0.4);
            let s = sample_child_segmented(&parent, &child, 100, 0.1, Some(&mut rng));
            assert_eq!(s.len(), 100);
            assert!(s.iter().filter(|t| child.contains(**t)).count() >= 10);
            assert!(s.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn fine_samples_follow_single_bin() {
        let t: Vec<f64> = (0..8).map(|k| k as f64).collect();
        let mut weight = vec![0.0; 8];
        weight[3] = 1.0;
        let coarse = RenderResult {
            sigma: vec![0.0; 8],
            delta: vec![1.0; 8],
            alpha: vec![0.0; 8],
            transmittance: vec![1.0; 8],
            t,
            weight,
        };
        let fine = sample_fine::<NoRng>(&coarse, 64, None);
        assert_eq!(fine.len(), 64);
        assert!(fine.iter().all(|t| (3.0..=4.0).contains(t)));
    }

    #[test]
    fn zero_weights_fall_back_to_uniform() {
        let coarse = RenderResult::from_sigma(vec![0.0, 1.0, 2.0, 4.0], vec![0.0; 4]);
        let fine = sample_fine::<NoRng>(&coarse, 4, None);
        assert_eq!(fine, vec![0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn uniform_weights_give_flat_histogram() {
        // Equal weights and equal bins: each of the 10 bins should receive
        // n/10 draws within three multinomial standard deviations.
        let bins = 10;
        let t: Vec<f64> = (0..=bins).map(|k| k as f64).collect();
        let coarse = RenderResult {
            sigma: vec![0.0; bins + 1],
            delta: vec![1.0; bins + 1],
            alpha: vec![0.0; bins + 1],
            transmittance: vec![1.0; bins + 1],
            weight: vec![0.05; bins + 1],
            t,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hist = vec![0usize; bins];
        let draws = 200;
        let rounds = 50;
        for _ in 0..rounds {
            for s in sample_fine(&coarse, draws, Some(&mut rng)) {
                hist[(s.floor() as usize).min(bins - 1)] += 1;
            }
        }
        let n = (draws * rounds) as f64;
        let p = 1.0 / bins as f64;
        let sd = (n * p * (1.0 - p)).sqrt();
        for h in hist {
            assert!((h as f64 - n * p).abs() <= 3.0 * sd, "{h}");
        }
    }

    #[test]
    fn merge_keeps_order() {
        assert_eq!(merge_sorted(&[1.0, 3.0], &[2.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0]);
    }
}
