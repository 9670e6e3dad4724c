use mvpose::io::{self, DatasetPaths};
use mvpose::pipeline::{self, RunConfig, Stage};
use mvpose::synth::SceneConfig;
use std::path::Path;

fn small_config(root: &Path) -> RunConfig {
    let mut config = RunConfig {
        data_dir: root.join("data"),
        stage: Stage::All,
        ..RunConfig::default()
    };
    config.scene = SceneConfig {
        seed: 4,
        people: 2,
        frames: 6,
        cameras: 30,
        depth_sensors: 4,
        patches_per_bone: 6,
        ..SceneConfig::default()
    };
    config
}

#[test]
fn synth_reconstruct_refine_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());

    let synth = pipeline::cmd_synth(&config).unwrap();
    assert_eq!((synth.frames, synth.people, synth.cameras), (6, 2, 30));
    let paths = DatasetPaths::new(&config.data_dir);
    for file in [paths.calibration(), paths.scene(), paths.patches(), paths.ground_truth(), paths.scoremaps(5)] {
        assert!(file.exists(), "{} missing", file.display());
    }

    let rec = pipeline::cmd_reconstruct(&config).unwrap();
    assert_eq!(rec.frames, 6);
    assert_eq!(rec.people, 2);
    assert!(rec.refine.is_some());
    assert!(pipeline::stage2_output(&config).exists());

    let stage1 = io::read_skeletons(&pipeline::stage1_output(&config)).unwrap();
    assert!(stage1.iter().all(|f| f.len() == 2));

    let eval = pipeline::cmd_eval(&config).unwrap();
    let report = eval.report.unwrap();
    let at_5cm = report.thresholds_cm.iter().position(|&t| t == 5.0).unwrap();
    assert_eq!(report.pck[at_5cm], 1.0);
    let csv = std::fs::read_to_string(config.output_dir().join("eval_pck.csv")).unwrap();
    assert!(csv.starts_with("threshold_cm,pck\n"), "{csv}");
}

#[test]
fn camera_subset_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.stage = Stage::One;
    pipeline::cmd_synth(&config).unwrap();

    config.cameras_subset = Some(12);
    let rec = pipeline::cmd_reconstruct(&config).unwrap();
    assert_eq!(rec.frames, 6);

    config.cameras_subset = None;
    config.eval.sweep = vec![10, 30];
    config.inputs.skeletons = None;
    let eval = pipeline::cmd_eval(&config).unwrap();
    assert_eq!(eval.sweep.iter().map(|(k, _)| *k).collect::<Vec<_>>(), vec![10, 30]);
    let csv = std::fs::read_to_string(config.output_dir().join("eval_sweep.csv")).unwrap();
    assert!(csv.starts_with("cameras,threshold_cm,pck\n"));
    assert_eq!(csv.lines().count(), 1 + 2 * config.eval.thresholds_cm.len());
}

#[test]
fn frames_without_people_give_empty_output() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.stage = Stage::One;
    config.scene.people = 0;
    pipeline::cmd_synth(&config).unwrap();
    let rec = pipeline::cmd_reconstruct(&config).unwrap();
    assert_eq!((rec.skeletons, rec.people), (0, 0));
}

#[test]
fn corrupt_calibration_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.stage = Stage::One;
    pipeline::cmd_synth(&config).unwrap();
    let calibration = DatasetPaths::new(&config.data_dir).calibration();
    std::fs::write(&calibration, "{ not json").unwrap();
    let err = pipeline::cmd_reconstruct(&config).unwrap_err().to_string();
    assert!(err.contains("calibration.json"), "{err}");
}

#[test]
fn missing_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = small_config(dir.path());
    let err = pipeline::cmd_reconstruct(&config).unwrap_err().to_string();
    assert!(err.contains("not found"), "{err}");
}

#[test]
fn rig_optimize_writes_a_calibration() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = small_config(dir.path());
    config.rig.max_iterations = 5;
    let summary = pipeline::cmd_rig_optimize(&config).unwrap();
    assert_eq!(summary.cameras, 480);
    assert!(summary.final_objective <= summary.initial_objective);
    let cameras = io::read_calibration(&config.output_dir().join("rig_calibration.json")).unwrap();
    assert_eq!(cameras.len(), summary.exported_cameras);
}
