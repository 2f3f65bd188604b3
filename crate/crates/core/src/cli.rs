//! Command-line entry points: `generate`, `train` and `eval`.
//!
//! Every command reads one config file (defaults when omitted), applies
//! flag overrides, and echoes the effective config next to its outputs.
//! On failure the last line on stderr is a one-line JSON error record.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{apply_overrides, ExperimentConfig};
use crate::dataset::{generate_splits, load_fused, write_dataset};
use crate::encoder::Encoder;
use crate::error::{CsfError, Result};
use crate::eval::{
    capped_components, channel_sweep_with_curves, default_subset_ladder, embed_dataset, maximal_activations,
    overlap_permutation_test, plot_artifacts, EvalSettings, PcaModel, SweepResult,
};
use crate::training::checkpoint::{checkpoint_name, load_checkpoint};
use crate::training::{dropout_schedule, train_loop, LoopOptions, CHECKPOINT_DIR, METRICS_FILE, TIMING_FILE};

#[derive(Debug, Parser)]
#[command(name = "csf", version, about = "Contrastive sensor fusion: generate, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training and held-out datasets.
    Generate(GenerateArgs),
    /// Train an encoder on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or freshly initialised weights).
    Eval(EvalArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// TOML config file; built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any config key, e.g. `--set schedule.base_lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Output directory; receives `train/` and `eval/`.
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Dataset seed (overrides `scenes.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    /// Training dataset directory (overrides `data.train_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training seed (overrides `seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total number of steps (overrides `schedule.total_steps`).
    #[arg(long)]
    pub steps: Option<u64>,
    /// Continue from the newest checkpoint of the run.
    #[arg(long)]
    pub resume: bool,
    /// Stop early, with a checkpoint, once this many steps are done.
    #[arg(long)]
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Evaluation dataset directory (overrides `data.eval_dir`).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Channel subset such as `0`, `0,1,2` or `0-3,8`; repeat for several.
    #[arg(long)]
    pub subset: Vec<String>,
    /// Neighbour count (overrides `eval.k`).
    #[arg(long)]
    pub k: Option<usize>,
    /// Use freshly initialised weights as an untrained baseline.
    #[arg(long)]
    pub init_only: bool,
    /// Seed (overrides `seed`; drives initial weights and permutations).
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub created_at_unix: u64,
    pub inputs: Vec<String>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_ECHO: &str = "config.toml";

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, inputs: Vec<String>) -> Self {
        Self {
            command: command.into(),
            config_hash: cfg.run_hash(),
            seed: cfg.seed,
            created_at_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            inputs,
            artifacts: Vec::new(),
        }
    }

    /// Checks that every artifact exists, then writes the manifest.
    fn finish(mut self, dir: &Path, name: &str) -> Result<()> {
        self.artifacts.sort();
        self.artifacts.dedup();
        if let Some(missing) = self.artifacts.iter().find(|a| !dir.join(a).exists()) {
            return Err(CsfError::InvalidArgument(format!("artifact `{missing}` was not written")));
        }
        let path = dir.join(name);
        let json = serde_json::to_string_pretty(&self).expect("manifest serialises");
        std::fs::write(&path, json + "\n").map_err(|e| CsfError::io(&path, e))
    }
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CsfError::InvalidArgument(format!("--set expects KEY=VALUE, got `{s}`")))
        })
        .collect()
}

fn load_config(common: &CommonArgs, extra: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let base = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    with_overrides(base, common, extra)
}

fn with_overrides(base: ExperimentConfig, common: &CommonArgs, extra: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let mut overrides = parse_sets(&common.set)?;
    overrides.extend(extra);
    if overrides.is_empty() {
        Ok(base)
    } else {
        apply_overrides(&base, &overrides)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CsfError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CsfError::io(path, e))
}

/// Parses `0`, `0,1,2`, `0-3,8` into a channel set.
pub fn parse_subset(text: &str) -> Result<BTreeSet<usize>> {
    let bad = || CsfError::InvalidArgument(format!("cannot parse channel subset `{text}`"));
    let mut out = BTreeSet::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                out.extend(a..=b);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<GenerateOutput> {
    let extra = args
        .seed
        .map(|s| vec![("scenes.seed".to_string(), s.to_string())])
        .unwrap_or_default();
    let cfg = load_config(&args.common, extra)?;
    let (suite, train, held_out) = generate_splits(&cfg)?;
    let out = GenerateOutput {
        train_dir: args.out.join("train"),
        eval_dir: args.out.join("eval"),
    };
    write_dataset(&out.train_dir, &suite, &train)?;
    write_dataset(&out.eval_dir, &suite, &held_out)?;
    write_text(&args.out.join(CONFIG_ECHO), &cfg.to_toml())?;
    log::info!(
        "wrote {} training and {} held-out scenes under {}",
        train.len(),
        held_out.len(),
        args.out.display()
    );
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub run_dir: PathBuf,
    pub final_step: u64,
    pub final_checkpoint: PathBuf,
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    if let Some(n) = args.steps {
        extra.push(("schedule.total_steps".to_string(), n.to_string()));
    }
    let cfg = load_config(&args.common, extra)?;
    let data_dir = args.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.train_dir));
    if !data_dir.join("manifest.tsv").exists() {
        return Err(CsfError::Dataset(format!(
            "no dataset at {} (run `csf generate` first)",
            data_dir.display()
        )));
    }
    let (_, scenes) = load_fused(&data_dir)?;
    let run_dir = args.out.join(cfg.run_dir_name());
    create_dir(&run_dir)?;
    let outcome = train_loop(
        &cfg,
        &scenes,
        &run_dir,
        &LoopOptions {
            resume: args.resume,
            halt_after: args.stop_after,
        },
    )?;
    write_text(&run_dir.join(CONFIG_ECHO), &cfg.to_toml())?;

    let step = outcome.state.step;
    let final_checkpoint = run_dir.join(CHECKPOINT_DIR).join(checkpoint_name(step));
    let mut manifest = RunManifest::new("train", &cfg, vec![data_dir.display().to_string()]);
    manifest.artifacts = vec![
        CONFIG_ECHO.into(),
        METRICS_FILE.into(),
        TIMING_FILE.into(),
        format!("{CHECKPOINT_DIR}/{}", checkpoint_name(step)),
    ];
    manifest.finish(&run_dir, MANIFEST_FILE)?;
    log::info!("run directory {} at step {step}", run_dir.display());
    Ok(TrainReport {
        run_dir,
        final_step: step,
        final_checkpoint,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub out_dir: PathBuf,
    pub sweep: SweepResult,
    /// `(component, p_value)` of the cross-sensor overlap tests.
    pub overlap_p_values: Vec<(usize, f64)>,
}

pub const SWEEP_FILE: &str = "sweep.tsv";
pub const K_CURVE_FILE: &str = "k_curve.tsv";
pub const ACTIVATIONS_FILE: &str = "maximal_activations.tsv";
pub const OVERLAP_FILE: &str = "activation_overlap.tsv";
pub const PLOT_DIR: &str = "plots";

fn same_architecture(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    a.encoder == b.encoder
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let mut extra = Vec::new();
    if let Some(s) = args.seed {
        extra.push(("seed".to_string(), s.to_string()));
    }
    if let Some(k) = args.k {
        extra.push(("eval.k".to_string(), k.to_string()));
    }

    let loaded = match &args.checkpoint {
        Some(path) => Some(load_checkpoint(path)?),
        None if args.init_only => None,
        None => {
            return Err(CsfError::InvalidArgument(
                "pass --checkpoint, or --init-only for untrained weights".into(),
            ))
        }
    };
    let cfg = match (&loaded, &args.common.config) {
        (Some((_, stored)), None) => with_overrides(stored.clone(), &args.common, extra)?,
        (Some((_, stored)), Some(_)) => {
            let cfg = load_config(&args.common, extra)?;
            if !same_architecture(stored, &cfg) {
                return Err(CsfError::Checkpoint(format!(
                    "encoder settings differ between checkpoint and config\n--- checkpoint config ---\n{}--- requested config ---\n{}",
                    stored.to_toml(),
                    cfg.to_toml()
                )));
            }
            cfg
        }
        (None, _) => load_config(&args.common, extra)?,
    };

    let data_dir = args.data.clone().unwrap_or_else(|| PathBuf::from(&cfg.data.eval_dir));
    let (suite, scenes) = load_fused(&data_dir)?;
    let channels = suite.total_channels();

    let (encoder, step) = match loaded {
        Some((state, _)) if !args.init_only => {
            if state.encoder.config().input_channels != channels {
                return Err(CsfError::Checkpoint(format!(
                    "checkpoint expects {} input channels, dataset has {channels}",
                    state.encoder.config().input_channels
                )));
            }
            (state.encoder, state.step)
        }
        _ => (Encoder::build(&cfg.encoder_config(channels)?)?, 0),
    };
    let train_p = dropout_schedule(step, &cfg.train_schedule());

    let subsets: Vec<BTreeSet<usize>> = if !args.subset.is_empty() {
        args.subset.iter().map(|s| parse_subset(s)).collect::<Result<_>>()?
    } else if !cfg.eval.subsets.is_empty() {
        cfg.eval.subsets.iter().map(|s| s.iter().copied().collect()).collect()
    } else {
        default_subset_ladder(&suite)
    };
    if let Some(bad) = subsets.iter().flatten().find(|&&c| c >= channels) {
        return Err(CsfError::InvalidArgument(format!(
            "channel {bad} out of range for {channels} channels"
        )));
    }

    let out_dir = match (&args.out, &args.checkpoint) {
        (Some(o), _) => o.clone(),
        (None, Some(ckpt)) => {
            let run = ckpt.parent().and_then(Path::parent).unwrap_or(Path::new("."));
            run.join(if args.init_only { "eval-init".to_string() } else { format!("eval-step{step}") })
        }
        (None, None) => PathBuf::from("eval-init"),
    };
    create_dir(&out_dir)?;

    let settings = EvalSettings {
        k: cfg.eval.k,
        pca_components: cfg.eval.pca_components,
        train_p,
    };
    let (sweep, curves) = channel_sweep_with_curves(&encoder, &scenes, &subsets, &settings, cfg.eval.k_max)?;
    write_text(&out_dir.join(SWEEP_FILE), &sweep.to_tsv())?;
    let mut k_tsv = String::from("subset\tk\tneighbor_fraction\n");
    for c in &curves {
        for (k, f) in &c.points {
            let _ = writeln!(k_tsv, "{}\t{k}\t{f:.6}", c.name.trim_start_matches("channels "));
        }
    }
    write_text(&out_dir.join(K_CURVE_FILE), &k_tsv)?;

    let all: BTreeSet<usize> = (0..channels).collect();
    let full = embed_dataset(&encoder, &scenes, &all, train_p)?;
    let n_comp = capped_components(&full, cfg.eval.activation_components);
    let pca = PcaModel::fit(full.vectors.view(), n_comp)?;
    let per_sensor: Vec<BTreeSet<usize>> = (0..suite.sensors().len())
        .map(|s| suite.channel_range(s).collect())
        .collect();
    let top_n = cfg.eval.top_n.min(scenes.len());
    let label_of = |id: &str| {
        scenes
            .iter()
            .find(|s| s.scene_id == id)
            .map_or(usize::MAX, |s| s.class_label)
    };
    let mut act_tsv = String::from("component\tsensor\trank\tscene_id\tclass_label\n");
    let mut overlap_tsv = String::from("component\tobserved_overlap\tnull_mean\tp_value\n");
    let mut overlap_p_values = Vec::new();
    for component in 0..n_comp {
        let lists = maximal_activations(&encoder, &scenes, &pca, component, &per_sensor, top_n, train_p)?;
        for (sensor, list) in suite.sensors().iter().zip(&lists) {
            for (rank, id) in list.iter().enumerate() {
                let _ = writeln!(act_tsv, "{component}\t{}\t{rank}\t{id}\t{}", sensor.name, label_of(id));
            }
        }
        if lists.len() >= 2 {
            let t = overlap_permutation_test(&lists, scenes.len(), cfg.eval.permutations, cfg.seed)?;
            let _ = writeln!(
                overlap_tsv,
                "{component}\t{:.6}\t{:.6}\t{:.6}",
                t.observed, t.null_mean, t.p_value
            );
            overlap_p_values.push((component, t.p_value));
        }
    }
    write_text(&out_dir.join(ACTIVATIONS_FILE), &act_tsv)?;
    write_text(&out_dir.join(OVERLAP_FILE), &overlap_tsv)?;

    let plots = plot_artifacts(&full, cfg.eval.plot_components, &sweep, &curves, &out_dir.join(PLOT_DIR), cfg.seed)?;
    write_text(&out_dir.join(CONFIG_ECHO), &cfg.to_toml())?;

    let mut inputs = vec![data_dir.display().to_string()];
    if let Some(c) = &args.checkpoint {
        inputs.push(c.display().to_string());
    }
    let mut manifest = RunManifest::new("eval", &cfg, inputs);
    manifest.artifacts = [CONFIG_ECHO, SWEEP_FILE, K_CURVE_FILE, ACTIVATIONS_FILE, OVERLAP_FILE]
        .iter()
        .map(|s| s.to_string())
        .chain(plots.iter().filter_map(|p| {
            p.strip_prefix(&out_dir).ok().map(|r| r.to_string_lossy().into_owned())
        }))
        .collect();
    manifest.finish(&out_dir, MANIFEST_FILE)?;
    log::info!("evaluation written to {}", out_dir.display());
    Ok(EvalReport {
        out_dir,
        sweep,
        overlap_p_values,
    })
}

/// One-line JSON error record for the last output line.
pub fn error_line(err: &CsfError) -> String {
    let mut record = serde_json::Map::new();
    record.insert("status".into(), "error".into());
    record.insert("kind".into(), err.kind().into());
    if let CsfError::UnknownKey { key, suggestion } = err {
        record.insert("key".into(), key.clone().into());
        if let Some(s) = suggestion {
            record.insert("suggestion".into(), s.clone().into());
        }
    }
    let message = err.to_string().lines().next().unwrap_or_default().to_string();
    record.insert("message".into(), message.into());
    serde_json::Value::Object(record).to_string()
}

/// Parses `argv`, runs the command, and reports the outcome.
pub fn run<I, T>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            if code != 0 {
                let kind = format!("{:?}", e.kind());
                eprintln!(
                    "{}",
                    serde_json::json!({"status": "error", "kind": "usage", "message": kind})
                );
            }
            return ExitCode::from(code as u8);
        }
    };
    let result = match &cli.command {
        Command::Generate(a) => cmd_generate(a).map(|o| format!("train={} eval={}", o.train_dir.display(), o.eval_dir.display())),
        Command::Train(a) => cmd_train(a).map(|r| format!("run_dir={} step={}", r.run_dir.display(), r.final_step)),
        Command::Eval(a) => cmd_eval(a).map(|r| format!("out_dir={}", r.out_dir.display())),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            let full = err.to_string();
            if full.contains('\n') {
                eprintln!("{full}");
            }
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subsets_parse() {
        assert_eq!(parse_subset("0").unwrap(), BTreeSet::from([0]));
        assert_eq!(parse_subset("0,1, 2").unwrap(), BTreeSet::from([0, 1, 2]));
        assert_eq!(parse_subset("0-3,8").unwrap(), BTreeSet::from([0, 1, 2, 3, 8]));
        assert!(parse_subset("").is_err());
        assert!(parse_subset("3-1").is_err());
        assert!(parse_subset("a").is_err());
    }

    #[test]
    fn error_line_is_single_line_json() {
        let err = CsfError::UnknownKey {
            key: "schedule.droput_rate".into(),
            suggestion: Some("schedule.dropout_final".into()),
        };
        let line = error_line(&err);
        assert!(!line.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["kind"], "unknown_key");
        assert_eq!(v["key"], "schedule.droput_rate");
        assert_eq!(v["suggestion"], "schedule.dropout_final");
        let multi = CsfError::Checkpoint("a\nb".into());
        assert!(!error_line(&multi).contains('\n'));
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "csf", "eval", "--init-only", "--subset", "0", "--subset", "0-3", "--k", "5", "--set", "seed=3",
        ])
        .unwrap();
        match cli.command {
            Command::Eval(a) => {
                assert!(a.init_only);
                assert_eq!(a.subset, vec!["0", "0-3"]);
                assert_eq!(a.k, Some(5));
                assert_eq!(a.common.set, vec!["seed=3"]);
            }
            other => panic!("{other:?}"),
        }
    }
}
