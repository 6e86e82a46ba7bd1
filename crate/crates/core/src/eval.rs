//! Train/test splitting and evaluation metrics.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::export_ply;
use crate::error::{Error, Result};
use crate::geom::{Ray, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    EveryKth,
    LossRate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub k: usize,
    /// Share of scans kept for training in `loss_rate` mode.
    pub train_fraction: f64,
    /// Random rather than evenly spaced keep-set in `loss_rate` mode.
    pub random: bool,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            mode: SplitMode::EveryKth,
            k: 5,
            train_fraction: 0.8,
            random: false,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        match self.mode {
            SplitMode::EveryKth if self.k < 2 => {
                Err(Error::Config(format!("split.k must be at least 2, got {}", self.k)))
            }
            SplitMode::LossRate if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) => {
                Err(Error::Config(format!(
                    "split.train_fraction must lie in (0, 1), got {}",
                    self.train_fraction
                )))
            }
            _ => Ok(()),
        }
    }
}

/// Splits scan indices into `(train, test)`, both sorted.
pub fn split_scans(indices: &[usize], spec: &SplitSpec, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    spec.validate()?;
    let mut all = indices.to_vec();
    all.sort_unstable();
    all.dedup();
    if all.is_empty() {
        return Err(Error::Data("no scans to split".into()));
    }
    let n = all.len();
    let mut is_train = vec![false; n];
    match spec.mode {
        SplitMode::EveryKth => {
            let offset = 2 % spec.k;
            for (flag, idx) in is_train.iter_mut().zip(&all) {
                *flag = idx % spec.k != offset;
            }
        }
        SplitMode::LossRate => {
            let m = ((spec.train_fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
            if spec.random {
                let mut pos: Vec<usize> = (0..n).collect();
                pos.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                pos[..m].iter().for_each(|&p| is_train[p] = true);
            } else {
                (0..m).for_each(|i| is_train[i * n / m] = true);
            }
        }
    }
    let (train, test): (Vec<(usize, bool)>, Vec<(usize, bool)>) =
        all.into_iter().zip(is_train).partition(|(_, t)| *t);
    let train: Vec<usize> = train.into_iter().map(|(i, _)| i).collect();
    let test: Vec<usize> = test.into_iter().map(|(i, _)| i).collect();
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!(
            "split leaves {} training and {} test scans",
            train.len(),
            test.len()
        )));
    }
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMetrics {
    pub avg_error: f64,
    /// `(threshold, fraction within it)`.
    pub acc: Vec<(f64, f64)>,
    pub n_resolved: usize,
    pub n_unresolved: usize,
}

pub fn depth_metrics(
    predictions: &[Option<f64>],
    truths: &[f64],
    thresholds: &[f64],
) -> Result<DepthMetrics> {
    assert_eq!(predictions.len(), truths.len());
    let errors: Vec<f64> = predictions
        .iter()
        .zip(truths)
        .filter_map(|(p, t)| p.map(|p| (p - t).abs()))
        .collect();
    if errors.is_empty() {
        return Err(Error::Data("zero resolved rays".into()));
    }
    let n = errors.len() as f64;
    Ok(DepthMetrics {
        avg_error: errors.iter().sum::<f64>() / n,
        acc: thresholds
            .iter()
            .map(|&tau| (tau, errors.iter().filter(|e| **e <= tau).count() as f64 / n))
            .collect(),
        n_resolved: errors.len(),
        n_unresolved: predictions.len() - errors.len(),
    })
}

/// Uniform hash grid for exact nearest-neighbour queries.
struct NnGrid<'a> {
    points: &'a [Vec3],
    cell: f64,
    cells: HashMap<[i64; 3], Vec<usize>>,
    lo: [i64; 3],
    hi: [i64; 3],
}

impl<'a> NnGrid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut min = Vec3::repeat(f64::INFINITY);
        let mut max = Vec3::repeat(f64::NEG_INFINITY);
        for p in points {
            min = min.inf(p);
            max = max.sup(p);
        }
        let extent = (max - min).max();
        let cell = (extent / (points.len() as f64).cbrt()).max(1e-6);
        let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
        let mut lo = [i64::MAX; 3];
        let mut hi = [i64::MIN; 3];
        for (i, p) in points.iter().enumerate() {
            let k = Self::key(p, cell);
            for a in 0..3 {
                lo[a] = lo[a].min(k[a]);
                hi[a] = hi[a].max(k[a]);
            }
            cells.entry(k).or_default().push(i);
        }
        Self { points, cell, cells, lo, hi }
    }

    fn key(p: &Vec3, cell: f64) -> [i64; 3] {
        [
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        ]
    }

    /// Distance to the nearest stored point. Shells of cells are visited
    /// outwards until the best distance is no larger than the shell radius.
    fn nearest(&self, q: &Vec3) -> f64 {
        let c = Self::key(q, self.cell);
        let mut best = f64::INFINITY;
        let gap = |a: usize| (self.lo[a] - c[a]).max(c[a] - self.hi[a]).max(0);
        let r_start = gap(0).max(gap(1)).max(gap(2));
        let r_end = (0..3)
            .map(|a| (c[a] - self.lo[a]).abs().max((self.hi[a] - c[a]).abs()))
            .max()
            .unwrap();
        let span = |a: usize, r: i64| (-r).max(self.lo[a] - c[a])..=r.min(self.hi[a] - c[a]);
        let visit = |k: [i64; 3], best: &mut f64| {
            if let Some(ids) = self.cells.get(&k) {
                for &i in ids {
                    *best = best.min((self.points[i] - q).norm());
                }
            }
        };
        for r in r_start..=r_end {
            for dx in span(0, r) {
                for dy in span(1, r) {
                    if dx.abs() == r || dy.abs() == r {
                        for dz in span(2, r) {
                            visit([c[0] + dx, c[1] + dy, c[2] + dz], &mut best);
                        }
                    } else {
                        for dz in [-r, r] {
                            if span(2, r).contains(&dz) {
                                visit([c[0] + dx, c[1] + dy, c[2] + dz], &mut best);
                            }
                        }
                    }
                }
            }
            if best <= r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Distance from every point of `from` to its nearest point of `to`.
pub fn nearest_distances(from: &[Vec3], to: &[Vec3]) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Data("empty point cloud".into()));
    }
    let grid = NnGrid::new(to);
    Ok(from.par_iter().map(|p| grid.nearest(p)).collect())
}

/// Symmetric mean nearest-neighbour distance.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    let ab = nearest_distances(a, b)?;
    let ba = nearest_distances(b, a)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(0.5 * (mean(&ab) + mean(&ba)))
}

fn f_from_distances(ab: &[f64], ba: &[f64], tau: f64) -> f64 {
    let frac = |v: &[f64]| v.iter().filter(|d| **d <= tau).count() as f64 / v.len() as f64;
    let (p, r) = (frac(ab), frac(ba));
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn f_score(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    Ok(f_from_distances(&nearest_distances(a, b)?, &nearest_distances(b, a)?, tau))
}

/// Depth source for evaluation.
pub trait DepthPredictor: Sync {
    /// Predicted depth and a short label of how it was obtained.
    fn predict(&self, ray: &Ray, scan_index: usize) -> (Option<f64>, &'static str);
}

/// A held-out ray with the scan it came from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestRay {
    pub ray: Ray,
    pub scan_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RayRecord {
    pub ray_id: usize,
    pub scan_index: usize,
    pub rule: &'static str,
    pub depth: Option<f64>,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub avg_error_m: f64,
    pub acc_0p2: f64,
    pub acc_1p0: f64,
    pub cd_m: f64,
    pub f_0p2: f64,
    pub f_1p0: f64,
    pub n_resolved: usize,
    pub n_unresolved: usize,
}

#[derive(Clone, Debug)]
pub struct EvalRun {
    pub report: MetricsReport,
    pub records: Vec<RayRecord>,
    pub predicted: Vec<Vec3>,
}

/// Predicts every test ray and scores the result against the test clouds.
pub fn evaluate_run<P: DepthPredictor + ?Sized>(
    predictor: &P,
    test_rays: &[TestRay],
    mode: &str,
) -> Result<EvalRun> {
    let outputs: Vec<(Option<f64>, &'static str)> = test_rays
        .par_iter()
        .map(|r| predictor.predict(&r.ray, r.scan_index))
        .collect();
    let records: Vec<RayRecord> = test_rays
        .iter()
        .zip(&outputs)
        .enumerate()
        .map(|(i, (r, (depth, rule)))| RayRecord {
            ray_id: i,
            scan_index: r.scan_index,
            rule,
            depth: *depth,
            truth: r.ray.depth,
        })
        .collect();
    let report = report_from_records(mode, test_rays, &records)?;
    let predicted = predicted_cloud(test_rays, &records);
    Ok(EvalRun {
        report,
        records,
        predicted,
    })
}

fn predicted_cloud(test_rays: &[TestRay], records: &[RayRecord]) -> Vec<Vec3> {
    test_rays
        .iter()
        .zip(records)
        .filter_map(|(r, rec)| rec.depth.map(|d| r.ray.at(d)))
        .collect()
}

/// Metrics of already computed per-ray predictions.
pub fn report_from_records(
    mode: &str,
    test_rays: &[TestRay],
    records: &[RayRecord],
) -> Result<MetricsReport> {
    let preds: Vec<Option<f64>> = records.iter().map(|r| r.depth).collect();
    let truths: Vec<f64> = records.iter().map(|r| r.truth).collect();
    let dm = depth_metrics(&preds, &truths, &[0.2, 1.0])?;
    let predicted = predicted_cloud(test_rays, records);
    let truth_cloud: Vec<Vec3> = test_rays.iter().map(|r| r.ray.endpoint).collect();
    let ab = nearest_distances(&predicted, &truth_cloud)?;
    let ba = nearest_distances(&truth_cloud, &predicted)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        mode: mode.to_string(),
        avg_error_m: dm.avg_error,
        acc_0p2: dm.acc[0].1,
        acc_1p0: dm.acc[1].1,
        cd_m: 0.5 * (mean(&ab) + mean(&ba)),
        f_0p2: f_from_distances(&ab, &ba, 0.2),
        f_1p0: f_from_distances(&ab, &ba, 1.0),
        n_resolved: dm.n_resolved,
        n_unresolved: dm.n_unresolved,
    })
}

pub fn write_report(path: &Path, report: &MetricsReport) -> Result<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

/// CSV with header `ray_id,scan,rule,depth,truth,error`; unresolved rays
/// leave depth and error empty.
pub fn write_records(path: &Path, records: &[RayRecord]) -> Result<()> {
    let mut out = String::from("ray_id,scan,rule,depth,truth,error\n");
    for r in records {
        let (d, e) = match r.depth {
            Some(d) => (format!("{d}"), format!("{}", (d - r.truth).abs())),
            None => (String::new(), String::new()),
        };
        out.push_str(&format!("{},{},{},{d},{},{e}\n", r.ray_id, r.scan_index, r.rule, r.truth));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.json`, `<stem>.csv` and `<stem>.ply` into `dir`.
pub fn write_run(dir: &Path, stem: &str, run: &EvalRun) -> Result<()> {
    write_report(&dir.join(format!("{stem}.json")), &run.report)?;
    write_records(&dir.join(format!("{stem}.csv")), &run.records)?;
    export_ply(&run.predicted, &dir.join(format!("{stem}.ply")))
}
