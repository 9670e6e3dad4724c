//! End-to-end commands over dataset directories.

mod config;

pub use config::{EvalSettings, GridConfig, InputPaths, Overrides, RigSettings, RunConfig, Stage, Thresholds, DATA_DIR_ENV};

use crate::assembly::{associate_time, extract_skeletons, ExtractConfig, Skeleton, SkeletonJoint, SkeletonTrajectory, TemporalConfig};
use crate::body::{default_topology, NUM_JOINTS};
use crate::eval::{sample_cameras, EvalError, EvalReport};
use crate::fusion::{extract_all_proposals, fuse, FusionError, GridSpec};
use crate::geometry::{Camera, Point3};
use crate::io::{self, DatasetPaths, IoError};
use crate::parts::enumerate_parts;
use crate::rig::{default_layout, optimize_placement, report_baselines, BaselineStats, OptimizeConfig};
use crate::scoremap::ScoreMapSet;
use crate::synth::{generate_with_cameras, PatchLabel, SceneConfig, SynthError};
use crate::trajectory::{average_joints, part_trajectories, refine_parts, DepthMap, PartTrajectory, RefineConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error("{}invalid configuration: {message}", path.as_ref().map(|p| format!("{}: ", p.display())).unwrap_or_default())]
    Config { path: Option<PathBuf>, message: String },
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("frame {frame}: {source}")]
    Fusion {
        frame: usize,
        #[source]
        source: FusionError,
    },
    #[error("{path}: {message}")]
    MissingInput { path: PathBuf, message: String },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("worker pool: {0}")]
    Pool(String),
}

impl PipelineError {
    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        PipelineError::Config {
            path: None,
            message: message.into(),
        }
    }
}

fn with_pool<T: Send>(workers: usize, job: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    Ok(pool.install(job))
}

fn require(path: PathBuf, what: &str) -> Result<PathBuf, PipelineError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(PipelineError::MissingInput {
            path,
            message: format!("{what} not found"),
        })
    }
}

/// Stage-1 reconstruction of a single frame.
pub fn reconstruct_frame(
    maps: &ScoreMapSet,
    cameras: &[Camera],
    grid: &GridSpec,
    thresholds: &Thresholds,
) -> Result<Vec<Skeleton>, FusionError> {
    if maps.is_empty() {
        return Ok(Vec::new());
    }
    let topology = default_topology();
    let volume = fuse(maps, cameras, grid)?;
    let proposals = extract_all_proposals(&volume, thresholds.node, thresholds.nms_radius_voxels);
    let parts = enumerate_parts(&proposals, &topology, maps, cameras, thresholds.node, thresholds.length_prior());
    let config = ExtractConfig {
        correspondence_radius: thresholds.correspondence_px,
        min_skeleton_score: 14.0 * thresholds.node,
        min_head_correspondences: thresholds.min_head_correspondences,
        ..ExtractConfig::default()
    };
    Ok(extract_skeletons(&parts, &proposals, maps, cameras, &topology, &config))
}

/// Links per-frame skeletons into people: sets every skeleton's person id
/// and orders each frame by person.
pub fn assign_people(frames: &mut [Vec<Skeleton>], thresholds: &Thresholds) -> Vec<SkeletonTrajectory> {
    let config = TemporalConfig {
        max_gap: thresholds.max_gap,
        distance_per_frame: thresholds.temporal_m,
    };
    let trajectories = associate_time(frames, &config);
    for frame in frames.iter_mut() {
        frame.clear();
    }
    for traj in &trajectories {
        for (&t, skeleton) in &traj.frames {
            let mut s = skeleton.clone();
            s.person = Some(traj.person);
            frames[t].push(s);
        }
    }
    for frame in frames.iter_mut() {
        frame.sort_by_key(|s| s.person);
    }
    trajectories
}

/// Stage 1 over a sequence, frame-parallel on the current rayon pool.
pub fn reconstruct_sequence(
    maps: &[ScoreMapSet],
    cameras: &[Camera],
    grid: &GridSpec,
    thresholds: &Thresholds,
) -> Result<Vec<Vec<Skeleton>>, PipelineError> {
    let results: Vec<Result<Vec<Skeleton>, PipelineError>> = maps
        .par_iter()
        .enumerate()
        .map(|(frame, m)| {
            reconstruct_frame(&m.restricted_to(cameras), cameras, grid, thresholds)
                .map_err(|source| PipelineError::Fusion { frame, source })
        })
        .collect();
    let mut frames = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    assign_people(&mut frames, thresholds);
    Ok(frames)
}

/// Changes made by stage 2.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub outliers_removed: usize,
    pub iterations: usize,
    pub frames_filled: usize,
    pub depth_used: bool,
    /// `(person, bone index, frame)` of every part frame restored.
    pub filled: Vec<(u32, usize, usize)>,
}

/// Stage 2 over stage-1 skeletons that already carry person ids.
pub fn refine_sequence(
    frames: &[Vec<Skeleton>],
    stream: &[crate::trajectory::PatchTrajectory],
    depth: &[DepthMap],
    thresholds: &Thresholds,
) -> (Vec<Vec<Skeleton>>, Vec<PatchLabel>, RefineSummary) {
    let topology = default_topology();
    let num_frames = frames.len();
    let mut people: BTreeMap<u32, SkeletonTrajectory> = BTreeMap::new();
    for (t, skeletons) in frames.iter().enumerate() {
        for s in skeletons {
            let Some(person) = s.person else { continue };
            people
                .entry(person)
                .or_insert_with(|| SkeletonTrajectory {
                    person,
                    frames: BTreeMap::new(),
                })
                .frames
                .insert(t, s.clone());
        }
    }
    let mut parts: Vec<PartTrajectory> = people
        .values()
        .flat_map(|traj| part_trajectories(traj, &topology, num_frames))
        .collect();
    let before: Vec<Vec<bool>> = parts.iter().map(|p| p.endpoints.iter().map(Option::is_some).collect()).collect();
    let config = RefineConfig {
        depth_margin: thresholds.depth_margin_m,
        rigidity_threshold: thresholds.rigidity_m,
        propagation_window: thresholds.propagation_window,
        ..RefineConfig::default()
    };
    let report = refine_parts(&mut parts, stream, depth, &config);

    let mut filled = Vec::new();
    let mut labels = Vec::new();
    for (part, was) in parts.iter().zip(&before) {
        let bone = topology.bones().iter().position(|&b| b == part.bone).expect("bone of the topology");
        for (t, e) in part.endpoints.iter().enumerate() {
            if e.is_some() && !was[t] {
                filled.push((part.person, bone, t));
            }
        }
        labels.extend(part.patches.iter().map(|&patch| PatchLabel {
            patch,
            person: part.person,
            bone,
        }));
    }
    labels.sort_by_key(|l| l.patch);

    let averaged = average_joints(&parts, NUM_JOINTS);
    let mut refined = vec![Vec::new(); num_frames];
    for (person, joint_frames) in averaged {
        let original = &people[&person].frames;
        for (t, joints) in joint_frames.iter().enumerate() {
            if joints.iter().all(Option::is_none) {
                continue;
            }
            let stage1 = original.get(&t);
            let joints = joints
                .iter()
                .enumerate()
                .map(|(j, p)| {
                    p.map(|position| {
                        let mut joint = stage1
                            .and_then(|s| s.joints[j].clone())
                            .unwrap_or(SkeletonJoint {
                                proposal: 0,
                                position,
                                voxel_position: position,
                                score: 0.0,
                                refined: false,
                                correspondences: Vec::new(),
                            });
                        joint.position = position;
                        joint
                    })
                })
                .collect();
            refined[t].push(Skeleton {
                joints,
                score: stage1.map_or(0.0, |s| s.score),
                person: Some(person),
            });
        }
    }
    let summary = RefineSummary {
        outliers_removed: report.outliers_removed,
        iterations: report.iterations,
        frames_filled: report.frames_filled,
        depth_used: !depth.is_empty(),
        filled,
    };
    (refined, labels, summary)
}

struct Dataset {
    paths: DatasetPaths,
    inputs: InputPaths,
}

impl Dataset {
    fn new(config: &RunConfig) -> Self {
        Self {
            paths: DatasetPaths::new(&config.data_dir),
            inputs: config.inputs.clone(),
        }
    }

    fn calibration(&self) -> PathBuf {
        self.inputs.calibration.clone().unwrap_or_else(|| self.paths.calibration())
    }

    fn scoremaps_dir(&self) -> PathBuf {
        self.inputs.scoremaps.clone().unwrap_or_else(|| self.paths.scoremaps_dir())
    }
}

fn load_cameras(config: &RunConfig, data: &Dataset) -> Result<Vec<Camera>, PipelineError> {
    let cameras = io::read_calibration(&require(data.calibration(), "calibration")?)?;
    match config.cameras_subset {
        Some(k) => Ok(sample_cameras(&cameras, k, None)?),
        None => Ok(cameras),
    }
}

fn grid_for(config: &RunConfig, data: &Dataset) -> Result<GridSpec, PipelineError> {
    let (min, max) = match (config.grid.min, config.grid.max) {
        (Some(min), Some(max)) => (min, max),
        _ => {
            let scene_path = data.paths.scene();
            let scene: SceneConfig = if scene_path.exists() {
                io::read_json(&scene_path, None)?
            } else {
                config.scene()
            };
            scene.working_volume()
        }
    };
    GridSpec::from_bounds(min, max, config.grid.spacing).map_err(|e| PipelineError::invalid(e.to_string()))
}

fn load_scoremaps(data: &Dataset) -> Result<Vec<ScoreMapSet>, PipelineError> {
    let dir = data.scoremaps_dir();
    let frames = io::scoremap_frames(&dir)?;
    let count = frames.last().map_or(0, |f| f + 1);
    let present: std::collections::BTreeSet<usize> = frames.into_iter().collect();
    (0..count)
        .into_par_iter()
        .map(|f| {
            if present.contains(&f) {
                Ok(io::read_scoremaps(&io::scoremap_file(&dir, f), f)?)
            } else {
                Ok(ScoreMapSet::new())
            }
        })
        .collect()
}

/// What `cmd_synth` wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub frames: usize,
    pub people: usize,
    pub cameras: usize,
    pub depth_maps: usize,
    pub patches: usize,
}

/// Generates a synthetic dataset into the data directory.
pub fn cmd_synth(config: &RunConfig) -> Result<SynthSummary, PipelineError> {
    let scene = config.scene();
    let cameras = match &config.inputs.camera_set {
        Some(path) => Some(io::read_calibration(&require(path.clone(), "camera set")?)?),
        None => None,
    };
    let gt = with_pool(config.workers, || generate_with_cameras(&scene, cameras))??;
    let paths = DatasetPaths::new(&config.data_dir);
    io::write_json(&paths.scene(), &scene)?;
    io::write_calibration(&paths.calibration(), &gt.cameras)?;
    io::write_calibration(&paths.depth_calibration(), &gt.depth_sensors)?;
    for (f, maps) in gt.maps.iter().enumerate() {
        io::write_scoremaps(&paths.scoremaps(f), f, maps)?;
    }
    for d in &gt.depth {
        io::write_depth(&paths.depth(d.frame(), d.camera().id()), d)?;
    }
    io::write_patch_stream(&paths.patches(), &gt.patches)?;
    let reference: Vec<Vec<Skeleton>> = (0..gt.num_frames()).map(|f| gt.skeletons(f)).collect();
    io::write_skeletons(&paths.ground_truth(), &reference)?;
    io::write_patch_labels(&paths.patch_labels(), &gt.patch_labels)?;
    Ok(SynthSummary {
        frames: gt.num_frames(),
        people: gt.actors.len(),
        cameras: gt.cameras.len(),
        depth_maps: gt.depth.len(),
        patches: gt.patches.len(),
    })
}

/// What `cmd_reconstruct` wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructSummary {
    pub frames: usize,
    pub skeletons: usize,
    pub people: usize,
    pub output: PathBuf,
    pub refine: Option<RefineSummary>,
}

pub fn stage1_output(config: &RunConfig) -> PathBuf {
    config.output_dir().join("skeletons.json")
}

pub fn stage2_output(config: &RunConfig) -> PathBuf {
    config.output_dir().join("refined.json")
}

/// Stage 1 (and stage 2 when selected) over the dataset.
pub fn cmd_reconstruct(config: &RunConfig) -> Result<ReconstructSummary, PipelineError> {
    if !config.stage.runs_first() {
        let refine = cmd_refine(config)?;
        let frames = io::read_skeletons(&stage2_output(config))?;
        return Ok(summarise(&frames, stage2_output(config), Some(refine)));
    }
    let data = Dataset::new(config);
    let cameras = load_cameras(config, &data)?;
    let grid = grid_for(config, &data)?;
    let frames = with_pool(config.workers, || -> Result<_, PipelineError> {
        let maps = load_scoremaps(&data)?;
        reconstruct_sequence(&maps, &cameras, &grid, &config.thresholds)
    })??;
    let output = stage1_output(config);
    io::write_skeletons(&output, &frames)?;
    let refine = if config.stage.runs_second() {
        Some(cmd_refine(config)?)
    } else {
        None
    };
    Ok(summarise(&frames, output, refine))
}

fn summarise(frames: &[Vec<Skeleton>], output: PathBuf, refine: Option<RefineSummary>) -> ReconstructSummary {
    let people: std::collections::BTreeSet<u32> = frames.iter().flatten().filter_map(|s| s.person).collect();
    ReconstructSummary {
        frames: frames.len(),
        skeletons: frames.iter().map(Vec::len).sum(),
        people: people.len(),
        output,
        refine,
    }
}

fn load_depth(data: &Dataset) -> Result<Vec<DepthMap>, PipelineError> {
    let calibration = data.inputs.depth_calibration.clone().unwrap_or_else(|| data.paths.depth_calibration());
    let dir = data.inputs.depth.clone().unwrap_or_else(|| data.paths.depth_dir());
    if !calibration.exists() || !dir.exists() {
        return Ok(Vec::new());
    }
    let sensors = io::read_calibration(&calibration)?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| IoError::Io {
            path: dir.clone(),
            source: e,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dpth"))
        .collect();
    files.sort();
    let mut maps = files
        .par_iter()
        .map(|p| io::read_depth(p, &sensors))
        .collect::<Result<Vec<_>, _>>()?;
    maps.sort_by_key(|d| (d.frame(), d.camera().id()));
    Ok(maps)
}

/// Stage 2: refines the stage-1 skeletons with the patch stream.
pub fn cmd_refine(config: &RunConfig) -> Result<RefineSummary, PipelineError> {
    let data = Dataset::new(config);
    let skeleton_path = config.inputs.skeletons.clone().unwrap_or_else(|| stage1_output(config));
    let frames = io::read_skeletons(&require(skeleton_path, "stage-1 skeletons (run stage 1 first)")?)?;
    let stream_path = config.inputs.patches.clone().unwrap_or_else(|| data.paths.patches());
    let stream = io::read_patch_stream(&require(stream_path, "patch trajectory stream")?)?;
    let (refined, labels, summary) = with_pool(config.workers, || -> Result<_, PipelineError> {
        let depth = load_depth(&data)?;
        if depth.is_empty() {
            log::warn!("no depth maps found; skipping outlier removal");
        }
        Ok(refine_sequence(&frames, &stream, &depth, &config.thresholds))
    })??;
    let out = config.output_dir();
    io::write_skeletons(&stage2_output(config), &refined)?;
    io::write_patch_labels(&out.join("patch_labels.json"), &labels)?;
    io::write_json(&out.join("refine_report.json"), &summary)?;
    Ok(summary)
}

/// Evaluation results; `sweep` holds one report per camera count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub report: Option<EvalReport>,
    pub sweep: Vec<(usize, EvalReport)>,
}

/// Compares an estimate against the reference skeletons, and optionally
/// re-runs stage 1 on nested camera subsets.
pub fn cmd_eval(config: &RunConfig) -> Result<EvalSummary, PipelineError> {
    let data = Dataset::new(config);
    let reference_path = config.inputs.reference.clone().unwrap_or_else(|| data.paths.ground_truth());
    let reference = io::read_skeletons(&require(reference_path, "reference skeletons")?)?;
    let out = config.output_dir();
    let thresholds = &config.eval.thresholds_cm;

    let estimate_path = config.inputs.skeletons.clone().or_else(|| {
        [stage2_output(config), stage1_output(config)]
            .into_iter()
            .find(|p| p.exists())
    });
    let mut summary = EvalSummary {
        report: None,
        sweep: Vec::new(),
    };
    if config.eval.sweep.is_empty() || estimate_path.is_some() {
        let path = require(estimate_path.unwrap_or_else(|| stage1_output(config)), "estimated skeletons")?;
        let estimate = pad_frames(io::read_skeletons(&path)?, reference.len());
        let report = EvalReport::compute(&estimate, &reference, thresholds, config.eval.outlier_cm, Vec::new())?;
        io::write_json(&out.join("eval_report.json"), &report)?;
        io::write_bytes(&out.join("eval_pck.csv"), report.to_csv().as_bytes())?;
        io::write_bytes(&out.join("eval_pck_wide.csv"), report.to_wide_csv().as_bytes())?;
        io::write_bytes(&out.join("eval_table.txt"), report.to_table().as_bytes())?;
        summary.report = Some(report);
    }
    if !config.eval.sweep.is_empty() {
        let all = io::read_calibration(&require(data.calibration(), "calibration")?)?;
        let grid = grid_for(config, &data)?;
        let maps = with_pool(config.workers, || load_scoremaps(&data))??;
        let mut csv = String::from("cameras,threshold_cm,pck\n");
        for &k in &config.eval.sweep {
            let cameras = sample_cameras(&all, k, None)?;
            let estimate = with_pool(config.workers, || {
                reconstruct_sequence(&maps, &cameras, &grid, &config.thresholds)
            })??;
            let estimate = pad_frames(estimate, reference.len());
            let ids = cameras.iter().map(Camera::id).collect();
            let report = EvalReport::compute(&estimate, &reference, thresholds, config.eval.outlier_cm, ids)?;
            for (t, p) in report.thresholds_cm.iter().zip(&report.pck) {
                csv.push_str(&format!("{k},{t},{p}\n"));
            }
            summary.sweep.push((k, report));
        }
        io::write_bytes(&out.join("eval_sweep.csv"), csv.as_bytes())?;
        io::write_json(&out.join("eval_sweep.json"), &summary.sweep)?;
    }
    Ok(summary)
}

/// Trailing frames without detections produce no skeleton entries; pad so
/// the estimate lines up with the reference.
fn pad_frames(mut frames: Vec<Vec<Skeleton>>, len: usize) -> Vec<Vec<Skeleton>> {
    if frames.len() < len {
        frames.resize(len, Vec::new());
    }
    frames
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigSummary {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub cameras: usize,
    pub exported_cameras: usize,
    pub baselines: Option<BaselineStats>,
    /// The nearest-three baseline the physical dome reports (informational).
    pub reference_min_baseline_m: f64,
}

/// Optimises the dome layout and exports it as a calibration file.
pub fn cmd_rig_optimize(config: &RunConfig) -> Result<RigSummary, PipelineError> {
    let settings = &config.rig;
    let layout = default_layout(settings.radius);
    let optimize = OptimizeConfig {
        max_iterations: settings.max_iterations,
        step_tolerance: settings.step_tolerance,
        ..OptimizeConfig::default()
    };
    let (optimized, report) = with_pool(config.workers, || optimize_placement(&layout, &optimize))?;
    let positions = optimized.positions();
    let center = Point3::new(0.0, 0.0, settings.center_height);
    let cameras = optimized.to_cameras(&center, settings.focal, settings.width, settings.height, settings.min_height);
    let summary = RigSummary {
        initial_objective: report.initial_objective,
        final_objective: report.final_objective,
        iterations: report.iterations,
        cameras: positions.len(),
        exported_cameras: cameras.len(),
        baselines: report_baselines(&positions),
        reference_min_baseline_m: 0.2105,
    };
    let out = config.output_dir();
    io::write_json(&out.join("rig_layout.json"), &optimized)?;
    io::write_calibration(&out.join("rig_calibration.json"), &cameras)?;
    io::write_json(&out.join("rig_report.json"), &summary)?;
    Ok(summary)
}
