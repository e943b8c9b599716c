use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mixer_cli::{RunConfig, CHECKPOINT_FILE, DATASET_FILE, HISTORY_FILE, REPORT_FILE, VERIFY_FILE};
use mixer_core::miprobe::CheckReport;
use mixer_core::model::Checkpoint;
use mixer_core::synthgen::GenConfig;

fn mixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixer")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn small_config(dir: &Path, epochs: usize) -> String {
    let mut cfg = RunConfig::default();
    cfg.gen = GenConfig {
        num_ids: 6,
        input_dim: 16,
        samples_per_id_per_cam: 4,
        ..GenConfig::default()
    };
    cfg.model.hidden_dims = vec![16];
    cfg.model.d_e = 8;
    cfg.model.d_r = 8;
    cfg.train.epochs = epochs;
    cfg.train.warmup_epochs = 1;
    cfg.train.k_per_modality = 2;
    cfg.out = dir.to_path_buf();
    let path = dir.join("run.json");
    fs::create_dir_all(dir).unwrap();
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    path.to_string_lossy().into_owned()
}

fn pipeline(dir: &Path, epochs: usize) -> String {
    let cfg = small_config(dir, epochs);
    for cmd in ["gen", "train", "eval"] {
        let o = mixer(&[cmd, "--config", &cfg]);
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    }
    cfg
}

#[test]
fn gen_with_defaults_writes_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    let o = mixer(&["gen", "--out", &out]);
    assert_eq!(code(&o), 0);
    let csv = fs::read_to_string(tmp.path().join(DATASET_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 50 * 5 * 20);
    assert!(String::from_utf8_lossy(&o.stdout).contains("oracle"));
}

#[test]
fn gen_rejects_single_identity() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.gen.num_ids = 1;
    cfg.out = tmp.path().to_path_buf();
    let path = tmp.path().join("bad.json");
    fs::write(&path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let o = mixer(&["gen", "--config", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!tmp.path().join(DATASET_FILE).exists());
}

#[test]
fn gen_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        assert_eq!(code(&mixer(&["gen", "--seed", "3", "--out", d.to_str().unwrap()])), 0);
    }
    assert_eq!(fs::read(a.join(DATASET_FILE)).unwrap(), fs::read(b.join(DATASET_FILE)).unwrap());
}

#[test]
fn zero_epochs_save_the_initial_model() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 0);
    assert_eq!(code(&mixer(&["gen", "--config", &cfg])), 0);
    assert_eq!(code(&mixer(&["train", "--config", &cfg])), 0);
    let ck = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ck.epochs_completed, 0);
    let history = fs::read_to_string(tmp.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 1);
}

#[test]
fn train_writes_one_history_row_per_epoch_and_resumes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 3);
    assert_eq!(code(&mixer(&["gen", "--config", &cfg])), 0);
    assert_eq!(code(&mixer(&["train", "--config", &cfg])), 0);
    let history = fs::read_to_string(tmp.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 1 + 3);
    let before = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();

    let longer = small_config(tmp.path(), 5);
    assert_eq!(code(&mixer(&["train", "--config", &longer, "--resume"])), 0);
    let after = Checkpoint::load(&tmp.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(after.epochs_completed, 5);
    let per_epoch = before.step / 3;
    assert_eq!(after.step, before.step + 2 * per_epoch);
    let history = fs::read_to_string(tmp.path().join(HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), 1 + 5);
}

#[test]
fn eval_reports_four_default_settings_and_fused_rule_is_erased_across_modalities() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pipeline(tmp.path(), 2);
    let report = fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);

    let o = mixer(&["eval", "--config", &cfg, "--settings", "CrossModal", "--embed-mode", "fused_rule,erased_only"]);
    assert_eq!(code(&o), 0);
    let report = fs::read_to_string(tmp.path().join(REPORT_FILE)).unwrap();
    let metrics: Vec<&str> = report.lines().skip(1).map(|l| l.splitn(4, ',').nth(3).unwrap()).collect();
    assert_eq!(metrics.len(), 2);
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn eval_rejects_unknown_setting_and_lists_valid_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = pipeline(tmp.path(), 1);
    let o = mixer(&["eval", "--config", &cfg, "--settings", "Mixx"]);
    assert_eq!(code(&o), 2);
    let err = String::from_utf8_lossy(&o.stderr);
    for name in ["Mix", "MixCam", "MixCamID", "MixID", "CrossModal", "UniModal"] {
        assert!(err.contains(name), "{err}");
    }
}

#[test]
fn eval_without_checkpoint_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1);
    assert_eq!(code(&mixer(&["gen", "--config", &cfg])), 0);
    assert_eq!(code(&mixer(&["eval", "--config", &cfg])), 2);
}

#[test]
fn verify_passes_and_writes_one_row_per_check() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().to_string_lossy().into_owned();
    let o = mixer(&["verify", "--out", &out, "--trials", "200"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(tmp.path().join(VERIFY_FILE)).unwrap();
    let printed = String::from_utf8_lossy(&o.stdout).lines().count();
    assert_eq!(csv.lines().count(), 1 + printed);
    assert!(csv.lines().skip(1).all(|l| l.ends_with(",true")));
}

#[test]
fn verify_fails_with_exit_one_on_a_broken_check() {
    let tmp = tempfile::tempdir().unwrap();
    let broken = || vec![CheckReport::new("always_off", &[0.5], 1e-9)];
    let err = mixer_cli::cmd_verify(tmp.path(), broken).unwrap_err();
    assert_eq!(err.exit_code(), 1);
    assert!(err.to_string().contains("always_off"));
    let csv = fs::read_to_string(tmp.path().join(VERIFY_FILE)).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",false"));
}

#[test]
fn bad_arguments_exit_two_and_help_exits_zero() {
    assert_eq!(code(&mixer(&["frobnicate"])), 2);
    assert_eq!(code(&mixer(&["eval", "--single-shot", "x"])), 2);
    assert_eq!(code(&mixer(&["--help"])), 0);
}

#[test]
fn sweep_trains_and_evaluates_every_grid_point() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), 1);
    assert_eq!(code(&mixer(&["gen", "--config", &cfg])), 0);
    let o = mixer(&["train", "--config", &cfg, "--sweep", "lambda_m=0,0.4", "--sweep", "lambda_f=0.2,0.4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&mixer(&["eval", "--config", &cfg, "--sweep"])), 0);
    let report = fs::read_to_string(tmp.path().join(mixer_cli::SWEEP_REPORT_FILE)).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 * 4);
}
