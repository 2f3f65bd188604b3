//! End-to-end command tests on a seconds-scale configuration.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use common::{read, tiny_config, write_config};
use csf::cli::{cmd_eval, cmd_generate, cmd_train, CommonArgs, EvalArgs, GenerateArgs, TrainArgs};
use csf::training::{CHECKPOINT_DIR, METRICS_FILE};
use tempfile::TempDir;

fn common_args(config: &Path) -> CommonArgs {
    CommonArgs {
        config: Some(config.to_path_buf()),
        set: Vec::new(),
    }
}

fn generate(root: &Path, config: &Path) -> PathBuf {
    let out = root.join("data");
    cmd_generate(&GenerateArgs {
        common: common_args(config),
        out: out.clone(),
        seed: None,
    })
    .unwrap();
    out
}

fn train_args(config: &Path, data: &Path, out: &Path) -> TrainArgs {
    TrainArgs {
        common: common_args(config),
        out: out.to_path_buf(),
        data: Some(data.join("train")),
        seed: None,
        steps: None,
        resume: false,
        stop_after: None,
    }
}

fn eval_args(config: Option<&Path>, checkpoint: Option<PathBuf>, data: &Path, out: &Path) -> EvalArgs {
    EvalArgs {
        common: CommonArgs {
            config: config.map(Path::to_path_buf),
            set: Vec::new(),
        },
        checkpoint,
        data: Some(data.join("eval")),
        out: Some(out.to_path_buf()),
        subset: Vec::new(),
        k: None,
        init_only: false,
        seed: None,
    }
}

fn setup() -> (TempDir, PathBuf, PathBuf) {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.toml");
    write_config(&config, &tiny_config());
    let data = generate(dir.path(), &config);
    (dir, config, data)
}

fn checkpoint_files(run: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(run.join(CHECKPOINT_DIR))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    names
}

#[test]
fn generate_is_byte_identical_on_rerun() {
    let (dir, config, data) = setup();
    let again = dir.path().join("again");
    cmd_generate(&GenerateArgs {
        common: common_args(&config),
        out: again.clone(),
        seed: None,
    })
    .unwrap();
    for split in ["train", "eval"] {
        assert_eq!(read(&data.join(split).join("manifest.tsv")), read(&again.join(split).join("manifest.tsv")));
        for entry in std::fs::read_dir(data.join(split).join("scenes")).unwrap() {
            let name = entry.unwrap().file_name();
            assert_eq!(
                read(&data.join(split).join("scenes").join(&name)),
                read(&again.join(split).join("scenes").join(&name))
            );
        }
    }
}

#[test]
fn zero_steps_writes_only_the_initial_checkpoint() {
    let (dir, config, data) = setup();
    let mut args = train_args(&config, &data, &dir.path().join("runs"));
    args.steps = Some(0);
    let report = cmd_train(&args).unwrap();
    assert_eq!(report.final_step, 0);
    assert_eq!(checkpoint_files(&report.run_dir), vec!["step-00000000.ckpt".to_string()]);
    let metrics = String::from_utf8(read(&report.run_dir.join(METRICS_FILE))).unwrap();
    assert_eq!(metrics.lines().count(), 1, "header only: {metrics}");
}

#[test]
fn interrupted_and_resumed_run_matches_uninterrupted_run() {
    let (dir, config, data) = setup();
    let full = cmd_train(&train_args(&config, &data, &dir.path().join("full"))).unwrap();

    let split_out = dir.path().join("split");
    let mut first = train_args(&config, &data, &split_out);
    first.stop_after = Some(3);
    let partial = cmd_train(&first).unwrap();
    assert_eq!(partial.final_step, 3);
    let mut second = train_args(&config, &data, &split_out);
    second.resume = true;
    let resumed = cmd_train(&second).unwrap();
    assert_eq!(resumed.final_step, 6);

    assert_eq!(read(&full.run_dir.join(METRICS_FILE)), read(&resumed.run_dir.join(METRICS_FILE)));
    assert_eq!(read(&full.final_checkpoint), read(&resumed.final_checkpoint));
}

#[test]
fn training_into_an_existing_run_without_resume_is_an_error() {
    let (dir, config, data) = setup();
    let args = train_args(&config, &data, &dir.path().join("runs"));
    cmd_train(&args).unwrap();
    assert!(cmd_train(&args).is_err());
}

#[test]
fn eval_single_band_subset_gives_one_row() {
    let (dir, config, data) = setup();
    let run = cmd_train(&train_args(&config, &data, &dir.path().join("runs"))).unwrap();
    let mut args = eval_args(None, Some(run.final_checkpoint.clone()), &data, &dir.path().join("eval-one"));
    args.subset = vec!["0".into()];
    let report = cmd_eval(&args).unwrap();
    assert_eq!(report.sweep.rows.len(), 1);
    assert_eq!(report.sweep.rows[0].subset.len(), 1);

    let ladder = cmd_eval(&eval_args(None, Some(run.final_checkpoint), &data, &dir.path().join("eval-all"))).unwrap();
    let sizes: Vec<usize> = ladder.sweep.rows.iter().map(|r| r.subset.len()).collect();
    assert_eq!(sizes, vec![1, 2, 3, 4, 8, 12]);
    for name in ["sweep.tsv", "k_curve.tsv", "maximal_activations.tsv", "activation_overlap.tsv", "config.toml", "manifest.json"] {
        assert!(ladder.out_dir.join(name).exists(), "{name}");
    }
    assert!(ladder.out_dir.join("plots/embedding_tsne.svg").exists());
}

#[test]
fn eval_init_only_needs_no_checkpoint() {
    let (dir, config, data) = setup();
    let mut args = eval_args(Some(&config), None, &data, &dir.path().join("init"));
    args.init_only = true;
    args.subset = vec!["0-3".into(), "0-11".into()];
    let report = cmd_eval(&args).unwrap();
    assert_eq!(report.sweep.rows.len(), 2);
}

#[test]
fn eval_with_mismatched_encoder_config_is_an_error() {
    let (dir, config, data) = setup();
    let run = cmd_train(&train_args(&config, &data, &dir.path().join("runs"))).unwrap();
    let mut other = tiny_config();
    other.encoder.stack_widths = vec![4, 16];
    let other_path = dir.path().join("other.toml");
    write_config(&other_path, &other);
    let err = cmd_eval(&eval_args(Some(&other_path), Some(run.final_checkpoint), &data, &dir.path().join("e")))
        .unwrap_err()
        .to_string();
    assert!(err.contains("checkpoint config") && err.contains("requested config"), "{err}");
}

#[test]
fn corrupt_checkpoint_is_an_error() {
    let (dir, config, data) = setup();
    let run = cmd_train(&train_args(&config, &data, &dir.path().join("runs"))).unwrap();
    let mut bytes = read(&run.final_checkpoint);
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, bytes).unwrap();
    assert!(cmd_eval(&eval_args(None, Some(bad), &data, &dir.path().join("e"))).is_err());
}

#[test]
fn binary_reports_unknown_key_as_last_json_line() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("typo.toml");
    std::fs::write(&config, "[schedule]\ndroput_rate = 0.5\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_csf"))
        .args(["generate", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8(output.stderr).unwrap();
    let last = stderr.lines().last().unwrap();
    let v: serde_json::Value = serde_json::from_str(last).unwrap();
    assert_eq!(v["status"], "error");
    assert_eq!(v["key"], "schedule.droput_rate");
    assert_eq!(v["suggestion"], "schedule.dropout_final");
}

#[test]
fn binary_runs_generate_with_set_override() {
    let dir = TempDir::new().unwrap();
    let config = dir.path().join("tiny.toml");
    write_config(&config, &tiny_config());
    let output = Command::new(env!("CARGO_BIN_EXE_csf"))
        .args(["generate", "--set", "scenes.scenes_per_class=2", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("data"))
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let manifest = String::from_utf8(read(&dir.path().join("data/train/manifest.tsv"))).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 1 + 3 * 2);
}
