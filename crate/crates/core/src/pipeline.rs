//! Pipeline stages over an on-disk dataset and run directory.
//!
//! Dataset layout: `velodyne/NNNNNN.bin`, `labels/NNNNNN.label` (one `u32`
//! per point: 0 ground, i+1 box i), `poses.txt`, `scene.toml`.
//! Run layout: `scene_graph.toml`, `split.toml`, `loss_log_PP.csv`,
//! `checkpoints/parent_PP_epoch_EEE.ckpt`, `checkpoints/parent_PP.ckpt`,
//! `eval/<mode>.{json,csv,ply}`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::cloud::{fuse_scans, load_kitti_scan, read_poses, write_kitti_scan, write_poses, LidarScan, Pose};
use crate::config::{InferMode, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_run, split_scans, write_run, DepthPredictor, EvalRun, TestRay};
use crate::field::FieldModel;
use crate::geom::Ray;
use crate::infer::{infer_one_step, infer_two_step, InferConfig, VoxelMap};
use crate::partition::{assign_ray_children, build_scene_graph, BlockReport, SceneGraph};
use crate::simlidar::{boxworld, simulate_scan_labeled, write_scene, AnalyticScene, SurfaceLabel};
use crate::train::{derive_seed, prepare_training_rays, train, write_loss_log, BatchRecord, LossConfig};

pub fn scan_path(dataset: &Path, index: usize) -> PathBuf {
    dataset.join("velodyne").join(format!("{index:06}.bin"))
}

pub fn label_path(dataset: &Path, index: usize) -> PathBuf {
    dataset.join("labels").join(format!("{index:06}.label"))
}

pub fn checkpoint_path(output: &Path, parent: usize, epoch: Option<usize>) -> PathBuf {
    let name = match epoch {
        Some(e) => format!("parent_{parent:02}_epoch_{e:03}.ckpt"),
        None => format!("parent_{parent:02}.ckpt"),
    };
    output.join("checkpoints").join(name)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// A simulated scene with its scans and per-point surface labels.
pub struct SimulatedData {
    pub scene: AnalyticScene,
    pub poses: Vec<Pose>,
    pub scans: Vec<LidarScan>,
    pub labels: Vec<Vec<SurfaceLabel>>,
}

pub fn simulate(cfg: &RunConfig) -> Result<SimulatedData> {
    cfg.sim.beams.validate()?;
    let (scene, poses) = boxworld(&cfg.sim.world, cfg.seed);
    let (scans, labels) = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| simulate_scan_labeled(&scene, pose, &cfg.sim.beams, i))
        .unzip();
    Ok(SimulatedData {
        scene,
        poses,
        scans,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimSummary {
    pub n_boxes: usize,
    pub points_per_scan: Vec<usize>,
}

/// Writes a boxworld dataset. Refuses to touch an existing dataset unless
/// `force` is set.
pub fn cmd_simulate(cfg: &RunConfig, force: bool) -> Result<SimSummary> {
    cfg.validate()?;
    let root = &cfg.data.dataset;
    if root.join("poses.txt").exists() && !force {
        return Err(Error::Config(format!(
            "{} already holds a dataset; pass --force to overwrite",
            root.display()
        )));
    }
    let data = simulate(cfg)?;
    create_dir(&root.join("velodyne"))?;
    create_dir(&root.join("labels"))?;
    for (scan, labels) in data.scans.iter().zip(&data.labels) {
        write_kitti_scan(&scan_path(root, scan.scan_index), &scan.points)?;
        let bytes: Vec<u8> = labels.iter().flat_map(|l| l.code().to_le_bytes()).collect();
        let path = label_path(root, scan.scan_index);
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    write_poses(&root.join("poses.txt"), &data.poses)?;
    write_scene(&root.join("scene.toml"), &data.scene)?;
    let summary = SimSummary {
        n_boxes: data.scene.boxes.len(),
        points_per_scan: data.scans.iter().map(|s| s.points.len()).collect(),
    };
    info!(
        "simulated {} scans, {} boxes, {} points",
        summary.points_per_scan.len(),
        summary.n_boxes,
        summary.points_per_scan.iter().sum::<usize>()
    );
    Ok(summary)
}

pub struct Dataset {
    pub poses: Vec<Pose>,
    pub scans: Vec<LidarScan>,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let poses = read_poses(&root.join("poses.txt"))?;
    let scans = poses
        .iter()
        .enumerate()
        .map(|(i, pose)| load_kitti_scan(&scan_path(root, i), *pose, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { poses, scans })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_of(cfg: &RunConfig, n_scans: usize) -> Result<SplitFile> {
    let all: Vec<usize> = (0..n_scans).collect();
    let (train, test) = split_scans(&all, &cfg.split, cfg.seed)?;
    Ok(SplitFile { train, test })
}

fn select_scans(scans: &[LidarScan], keep: &[usize]) -> Vec<LidarScan> {
    scans
        .iter()
        .filter(|s| keep.binary_search(&s.scan_index).is_ok())
        .cloned()
        .collect()
}

/// Builds the scene graph from the training scans only.
pub fn partition_dataset(cfg: &RunConfig, data: &Dataset) -> Result<(SceneGraph, SplitFile, Vec<BlockReport>)> {
    let split = split_of(cfg, data.scans.len())?;
    let train_scans = select_scans(&data.scans, &split.train);
    let (graph, reports) = build_scene_graph(&data.poses, &train_scans, &cfg.partition, cfg.seed)?;
    Ok((graph, split, reports))
}

pub fn cmd_partition(cfg: &RunConfig) -> Result<SceneGraph> {
    cfg.validate()?;
    let data = load_dataset(&cfg.data.dataset)?;
    let (graph, split, reports) = partition_dataset(cfg, &data)?;
    create_dir(&cfg.data.output)?;
    graph.write(&cfg.data.output.join("scene_graph.toml"))?;
    let path = cfg.data.output.join("split.toml");
    let text = toml::to_string(&split).map_err(|e| Error::Data(e.to_string()))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    for (i, (p, r)) in graph.parents.iter().zip(&reports).enumerate() {
        info!(
            "parent {i}: scans {:?}, {} children, {} points ({} ground, {} clustered, {} noise)",
            p.scan_indices(),
            p.children.len(),
            r.n_points,
            r.n_ground,
            r.n_clustered,
            r.n_noise
        );
    }
    Ok(graph)
}

fn read_graph(cfg: &RunConfig) -> Result<SceneGraph> {
    let path = cfg.data.output.join("scene_graph.toml");
    if !path.exists() {
        return Err(Error::Data(format!(
            "{} is missing; run the partition stage first",
            path.display()
        )));
    }
    SceneGraph::read(&path)
}

/// Training rays of one parent block with their child assignment.
pub fn parent_training_rays(cfg: &RunConfig, data: &Dataset, graph: &SceneGraph, parent: usize, train_idx: &[usize]) -> Result<Vec<Ray>> {
    let block = &graph.parents[parent];
    let keep: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|i| block.scan_indices().contains(i))
        .collect();
    let scans = select_scans(&data.scans, &keep);
    let fused = fuse_scans(&scans, cfg.partition.max_range, None)?;
    let mut rays: Vec<Ray> = fused.rays.into_iter().step_by(cfg.train.ray_stride).collect();
    let unassigned = assign_ray_children(&mut rays, &block.children);
    info!("parent {parent}: {} training rays, {unassigned} without a child", rays.len());
    Ok(rays)
}

/// Trains one model per parent block; returns the loss log of each block.
pub fn train_models(cfg: &RunConfig, data: &Dataset, graph: &SceneGraph, split: &SplitFile, output: Option<&Path>) -> Result<(Vec<FieldModel>, Vec<Vec<BatchRecord>>)> {
    let mut models = Vec::new();
    let mut logs = Vec::new();
    for (b, parent) in graph.parents.iter().enumerate() {
        let rays = parent_training_rays(cfg, data, graph, b, &split.train)?;
        let (train_rays, dropped) = prepare_training_rays(parent, &rays, &cfg.loss);
        if dropped > 0 {
            info!("parent {b}: {dropped} rays miss the parent box");
        }
        let mut model = FieldModel::new(cfg.field, parent.aabb, derive_seed(cfg.seed, &[b as u64, 1]));
        let started = Instant::now();
        let log = train(
            &mut model,
            &train_rays,
            &cfg.sampling,
            &cfg.loss,
            &cfg.train,
            derive_seed(cfg.seed, &[b as u64, 2]),
            |epoch, m| match output {
                Some(out) => m.write_checkpoint(&checkpoint_path(out, b, Some(epoch))),
                None => Ok(()),
            },
        )?;
        info!("parent {b}: trained in {:.1} s", started.elapsed().as_secs_f64());
        if let Some(out) = output {
            model.write_checkpoint(&checkpoint_path(out, b, None))?;
            write_loss_log(&out.join(format!("loss_log_{b:02}.csv")), &log)?;
        }
        models.push(model);
        logs.push(log);
    }
    Ok((models, logs))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<Vec<BatchRecord>>> {
    cfg.validate()?;
    let graph = read_graph(cfg)?;
    let data = load_dataset(&cfg.data.dataset)?;
    let split = split_of(cfg, data.scans.len())?;
    create_dir(&cfg.data.output.join("checkpoints"))?;
    let (_, logs) = train_models(cfg, &data, &graph, &split, Some(&cfg.data.output))?;
    Ok(logs)
}

/// Held-out rays of the test scans.
pub fn test_rays(cfg: &RunConfig, data: &Dataset, split: &SplitFile) -> Result<Vec<TestRay>> {
    let scans = select_scans(&data.scans, &split.test);
    let fused = fuse_scans(&scans, cfg.partition.max_range, None)?;
    Ok(fused
        .rays
        .into_iter()
        .zip(fused.source_scan_of_ray)
        .step_by(cfg.eval.ray_stride)
        .map(|(ray, scan_index)| TestRay { ray, scan_index })
        .collect())
}

/// Field-based inference over the parent block that owns each scan.
pub struct FieldPredictor<'a> {
    pub graph: &'a SceneGraph,
    pub models: &'a [FieldModel],
    pub infer: &'a InferConfig,
    pub loss: &'a LossConfig,
    pub two_step: bool,
}

impl DepthPredictor for FieldPredictor<'_> {
    fn predict(&self, ray: &Ray, scan_index: usize) -> (Option<f64>, &'static str) {
        let Some(b) = self.graph.parent_of_scan(scan_index) else {
            return (None, "no_parent");
        };
        let (model, parent) = (&self.models[b], &self.graph.parents[b]);
        if self.two_step {
            let out = infer_two_step(model, ray, parent, self.infer, self.loss);
            (out.depth, out.rule.as_str())
        } else {
            match infer_one_step(model, ray, &parent.aabb, self.infer, self.loss) {
                Some(d) => (Some(d), "one_step"),
                None => (None, "outside"),
            }
        }
    }
}

/// First occupied voxel of the fused training map.
pub struct RaycastPredictor {
    pub map: VoxelMap,
    pub max_range: f64,
}

impl DepthPredictor for RaycastPredictor {
    fn predict(&self, ray: &Ray, _scan_index: usize) -> (Option<f64>, &'static str) {
        match self.map.raycast(ray, self.max_range) {
            Some(d) => (Some(d), "hit"),
            None => (None, "miss"),
        }
    }
}

/// Runs every requested mode on the held-out rays.
pub fn evaluate_modes(cfg: &RunConfig, data: &Dataset, graph: &SceneGraph, split: &SplitFile, models: Option<&[FieldModel]>, modes: &[InferMode]) -> Result<Vec<EvalRun>> {
    let rays = test_rays(cfg, data, split)?;
    info!("{} test rays from scans {:?}", rays.len(), split.test);
    let mut runs = Vec::new();
    for mode in modes {
        let started = Instant::now();
        let run = match mode {
            InferMode::Raycast => {
                let train_scans = select_scans(&data.scans, &split.train);
                let map = fuse_scans(&train_scans, cfg.partition.max_range, None)?.endpoints();
                let predictor = RaycastPredictor {
                    map: VoxelMap::new(&map, cfg.eval.voxel_size)?,
                    max_range: cfg.partition.max_range,
                };
                evaluate_run(&predictor, &rays, mode.as_str())?
            }
            InferMode::OneStep | InferMode::TwoStep => {
                let models = models.ok_or_else(|| {
                    Error::Data(format!("mode {} needs trained checkpoints", mode.as_str()))
                })?;
                let predictor = FieldPredictor {
                    graph,
                    models,
                    infer: &cfg.infer,
                    loss: &cfg.loss,
                    two_step: *mode == InferMode::TwoStep,
                };
                evaluate_run(&predictor, &rays, mode.as_str())?
            }
        };
        info!(
            "{}: avg error {:.3} m, {} resolved, {} unresolved ({:.1} s)",
            mode.as_str(),
            run.report.avg_error_m,
            run.report.n_resolved,
            run.report.n_unresolved,
            started.elapsed().as_secs_f64()
        );
        runs.push(run);
    }
    Ok(runs)
}

pub fn load_models(cfg: &RunConfig, graph: &SceneGraph) -> Result<Vec<FieldModel>> {
    (0..graph.parents.len())
        .map(|b| {
            let path = checkpoint_path(&cfg.data.output, b, None);
            if !path.exists() {
                return Err(Error::Data(format!(
                    "{} is missing; run the train stage first",
                    path.display()
                )));
            }
            let model = FieldModel::read_checkpoint(&path)?;
            model.check_finite()?;
            Ok(model)
        })
        .collect()
}

/// Evaluates the requested modes and writes their reports under `eval/`.
pub fn cmd_eval(cfg: &RunConfig, modes: &[InferMode]) -> Result<Vec<EvalRun>> {
    cfg.validate()?;
    let graph = read_graph(cfg)?;
    let data = load_dataset(&cfg.data.dataset)?;
    let split = split_of(cfg, data.scans.len())?;
    let needs_models = modes.iter().any(|m| *m != InferMode::Raycast);
    let models = if needs_models { Some(load_models(cfg, &graph)?) } else { None };
    let runs = evaluate_modes(cfg, &data, &graph, &split, models.as_deref(), modes)?;
    let dir = cfg.data.output.join("eval");
    create_dir(&dir)?;
    for run in &runs {
        write_run(&dir, &run.report.mode, run)?;
    }
    Ok(runs)
}

/// simulate, partition, train and eval in sequence.
pub fn cmd_full(cfg: &RunConfig, force: bool) -> Result<Vec<EvalRun>> {
    cmd_simulate(cfg, force)?;
    cmd_partition(cfg)?;
    cmd_train(cfg)?;
    cmd_eval(cfg, &cfg.eval.modes)
}
