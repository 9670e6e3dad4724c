use crate::fusion::{DEFAULT_NMS_RADIUS_VOXELS, DEFAULT_NODE_THRESHOLD, DEFAULT_VOXEL_SIZE};
use crate::parts::LengthPrior;
use crate::rig::DEFAULT_DOME_RADIUS;
use crate::synth::SceneConfig;
use crate::trajectory::{DEFAULT_DEPTH_MARGIN, DEFAULT_RIGIDITY_THRESHOLD};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

use super::PipelineError;

/// Environment variable naming the default data directory.
pub const DATA_DIR_ENV: &str = "MVPOSE_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[default]
    All,
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" => Ok(Stage::One),
            "2" => Ok(Stage::Two),
            "all" => Ok(Stage::All),
            other => Err(format!("unknown stage {other:?} (expected 1, 2 or all)")),
        }
    }
}

impl Stage {
    pub fn runs_first(self) -> bool {
        matches!(self, Stage::One | Stage::All)
    }

    pub fn runs_second(self) -> bool {
        matches!(self, Stage::Two | Stage::All)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Minimum fused score of a node proposal.
    pub node: f64,
    /// Non-maxima suppression radius, in voxels.
    pub nms_radius_voxels: f64,
    /// Reprojection radius for 2D correspondences (pixels).
    pub correspondence_px: f64,
    pub min_head_correspondences: usize,
    /// Patch-to-part rigidity limit (metres).
    pub rigidity_m: f64,
    /// Head displacement allowed per elapsed frame (metres).
    pub temporal_m: f64,
    /// Frames a track may go unmatched before it is closed.
    pub max_gap: usize,
    /// Frames on each side used by temporal propagation.
    pub propagation_window: usize,
    /// A part is an outlier if it sits this far in front of a depth map.
    pub depth_margin_m: f64,
    /// Prune parts longer than a person could be before assembly.
    pub length_prior: bool,
    pub max_limb_m: f64,
    pub max_torso_m: f64,
}

impl Thresholds {
    pub fn length_prior(&self) -> Option<LengthPrior> {
        self.length_prior.then_some(LengthPrior {
            max_limb: self.max_limb_m,
            max_torso: self.max_torso_m,
        })
    }
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            node: DEFAULT_NODE_THRESHOLD,
            nms_radius_voxels: DEFAULT_NMS_RADIUS_VOXELS,
            correspondence_px: 10.0,
            min_head_correspondences: 2,
            rigidity_m: DEFAULT_RIGIDITY_THRESHOLD,
            temporal_m: 0.30,
            max_gap: 2,
            propagation_window: 1,
            depth_margin_m: DEFAULT_DEPTH_MARGIN,
            length_prior: true,
            max_limb_m: LengthPrior::default().max_limb,
            max_torso_m: LengthPrior::default().max_torso,
        }
    }
}

/// Voxel grid of the fused volumes. Missing bounds come from the scene
/// description of the dataset, or a box around the default arena.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub min: Option<[f64; 3]>,
    pub max: Option<[f64; 3]>,
    pub spacing: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            min: None,
            max: None,
            spacing: DEFAULT_VOXEL_SIZE,
        }
    }
}

/// Overrides for the files a command reads; each defaults to its standard
/// name in the data directory (or the output directory for stage outputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct InputPaths {
    pub calibration: Option<PathBuf>,
    pub depth_calibration: Option<PathBuf>,
    pub scoremaps: Option<PathBuf>,
    pub depth: Option<PathBuf>,
    pub patches: Option<PathBuf>,
    /// Stage-1 skeletons for refinement, or the estimate for evaluation.
    pub skeletons: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    /// Calibration file whose cameras replace the synthetic camera sphere.
    pub camera_set: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub thresholds_cm: Vec<f64>,
    pub outlier_cm: f64,
    /// Camera counts for the sweep mode; empty disables it.
    pub sweep: Vec<usize>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            thresholds_cm: (1..=15).map(f64::from).collect(),
            outlier_cm: crate::eval::DEFAULT_OUTLIER_CM,
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RigSettings {
    pub radius: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    /// Height of the dome centre above the floor.
    pub center_height: f64,
    /// Exported cameras below this height are dropped.
    pub min_height: f64,
    pub focal: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for RigSettings {
    fn default() -> Self {
        Self {
            radius: DEFAULT_DOME_RADIUS,
            max_iterations: 500,
            step_tolerance: 1e-10,
            center_height: 1.4,
            min_height: 0.25,
            focal: 400.0,
            width: 640,
            height: 480,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    /// Defaults to `<data_dir>/output`.
    pub output_dir: Option<PathBuf>,
    pub inputs: InputPaths,
    pub grid: GridConfig,
    pub thresholds: Thresholds,
    pub stage: Stage,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    /// Overrides the scene seed when set.
    pub seed: Option<u64>,
    /// Reconstruct from this many farthest-point sampled cameras.
    pub cameras_subset: Option<usize>,
    pub eval: EvalSettings,
    pub scene: SceneConfig,
    pub rig: RigSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let data_dir = std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from);
        Self {
            data_dir,
            output_dir: None,
            inputs: InputPaths::default(),
            grid: GridConfig::default(),
            thresholds: Thresholds::default(),
            stage: Stage::default(),
            workers: 0,
            seed: None,
            cameras_subset: None,
            eval: EvalSettings::default(),
            scene: SceneConfig::default(),
            rig: RigSettings::default(),
        }
    }
}

/// Command-line values; `None` leaves the configured value alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub data_dir: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub stage: Option<Stage>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub cameras_subset: Option<usize>,
    pub thresholds_cm: Option<Vec<f64>>,
}

impl RunConfig {
    /// Defaults, then the TOML file if given, then `overrides`.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, PipelineError> {
        let mut config = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Config {
                    path: Some(path.to_path_buf()),
                    message: e.to_string(),
                })?;
                toml::from_str(&text).map_err(|e| PipelineError::Config {
                    path: Some(path.to_path_buf()),
                    message: e.to_string(),
                })?
            }
            None => RunConfig::default(),
        };
        config.apply(overrides);
        config.validate()?;
        Ok(config)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.data_dir {
            self.data_dir = v.clone();
        }
        if let Some(v) = &o.output_dir {
            self.output_dir = Some(v.clone());
        }
        if let Some(v) = o.stage {
            self.stage = v;
        }
        if let Some(v) = o.workers {
            self.workers = v;
        }
        if let Some(v) = o.seed {
            self.seed = Some(v);
        }
        if let Some(v) = o.cameras_subset {
            self.cameras_subset = Some(v);
        }
        if let Some(v) = &o.thresholds_cm {
            self.eval.thresholds_cm = v.clone();
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let t = &self.thresholds;
        let positive = [
            ("thresholds.node", t.node),
            ("thresholds.nms_radius_voxels", t.nms_radius_voxels),
            ("thresholds.correspondence_px", t.correspondence_px),
            ("thresholds.rigidity_m", t.rigidity_m),
            ("thresholds.temporal_m", t.temporal_m),
            ("thresholds.depth_margin_m", t.depth_margin_m),
            ("thresholds.max_limb_m", t.max_limb_m),
            ("thresholds.max_torso_m", t.max_torso_m),
            ("grid.spacing", self.grid.spacing),
            ("eval.outlier_cm", self.eval.outlier_cm),
        ];
        for (name, value) in positive {
            if !(value > 0.0 && value.is_finite()) {
                return Err(PipelineError::invalid(format!("{name} must be positive, got {value}")));
            }
        }
        if t.propagation_window == 0 {
            return Err(PipelineError::invalid("thresholds.propagation_window must be at least 1"));
        }
        if self.eval.thresholds_cm.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(PipelineError::invalid("PCK thresholds must be finite and non-negative"));
        }
        if self.cameras_subset == Some(0) {
            return Err(PipelineError::invalid("camera subset must be positive"));
        }
        if self.grid.min.is_some() != self.grid.max.is_some() {
            return Err(PipelineError::invalid("grid.min and grid.max must be given together"));
        }
        self.scene.validate().map_err(|e| PipelineError::invalid(e.to_string()))?;
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(|| self.data_dir.join("output"))
    }

    /// The scene settings with the seed override applied.
    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            seed: self.seed.unwrap_or(self.scene.seed),
            ..self.scene.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_hold_the_reference_constants() {
        let t = Thresholds::default();
        assert_eq!(t.node, 0.05);
        assert_eq!(t.correspondence_px, 10.0);
        assert_eq!(t.rigidity_m, 0.10);
        assert_eq!(t.temporal_m, 0.30);
        assert_eq!(t.nms_radius_voxels, 2.0);
        assert_eq!(t.propagation_window, 1);
        assert_eq!(GridConfig::default().spacing, 0.04);
        assert_eq!(RigSettings::default().radius, 2.745);
    }

    #[test]
    fn command_line_beats_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "workers = 3\nstage = \"1\"\nseed = 9\n[thresholds]\nnode = 0.07\n[eval]\nthresholds_cm = [2.0, 4.0]\n",
        )
        .unwrap();
        let from_file = RunConfig::load(Some(&path), &Overrides::default()).unwrap();
        assert_eq!(from_file.workers, 3);
        assert_eq!(from_file.stage, Stage::One);
        assert_eq!(from_file.thresholds.node, 0.07);
        assert_eq!(from_file.thresholds.correspondence_px, 10.0);
        assert_eq!(from_file.scene().seed, 9);

        let overrides = Overrides {
            workers: Some(1),
            stage: Some(Stage::All),
            thresholds_cm: Some(vec![1.0, 2.0, 5.0, 10.0]),
            ..Overrides::default()
        };
        let merged = RunConfig::load(Some(&path), &overrides).unwrap();
        assert_eq!(merged.workers, 1);
        assert_eq!(merged.stage, Stage::All);
        assert_eq!(merged.eval.thresholds_cm, vec![1.0, 2.0, 5.0, 10.0]);
        assert_eq!(merged.thresholds.node, 0.07);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut config = RunConfig::default();
        config.thresholds.rigidity_m = 0.0;
        assert!(config.validate().is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[thresholds]\nbogus = 1\n").unwrap();
        let err = RunConfig::load(Some(&path), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("run.toml"));
    }

    #[test]
    fn length_prior_can_be_switched_off() {
        let on: RunConfig = toml::from_str("[thresholds]\nmax_limb_m = 0.8\n").unwrap();
        assert_eq!(on.thresholds.length_prior().unwrap().max_limb, 0.8);
        assert_eq!(on.thresholds.length_prior().unwrap().max_torso, 1.5);
        let off: RunConfig = toml::from_str("[thresholds]\nlength_prior = false\n").unwrap();
        assert_eq!(off.thresholds.length_prior(), None);
    }

    #[test]
    fn stage_parsing() {
        assert_eq!("1".parse::<Stage>().unwrap(), Stage::One);
        assert_eq!("all".parse::<Stage>().unwrap(), Stage::All);
        assert!("3".parse::<Stage>().is_err());
        assert!(Stage::All.runs_first() && Stage::All.runs_second());
        assert!(!Stage::Two.runs_first());
    }
}
