//! Contrastive training: two dropout views per scene, one shared encoder,
//! multi-layer InfoNCE, first-order updates, checkpoints and a metrics log.

pub mod checkpoint;
pub mod optim;
pub mod schedule;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::encoder::{stack_batch, Encoder};
use crate::error::{CsfError, Result};
use crate::loss::{mean_norm, total_loss_grad, LossWeights};
use crate::scenes::{splitmix64, SceneTensor};
use crate::views::{make_view, ViewConfig};
use checkpoint::{checkpoint_name, latest_checkpoint, load_checkpoint, save_checkpoint};
use optim::{apply_update, OptimizerConfig, OptimizerState};
pub use schedule::{dropout_schedule, lr_schedule, TrainSchedule};

const VIEW_STREAM: u64 = 0x7669_6577_7321;
const ORDER_STREAM: u64 = 0x6f72_6465_7221;
const EMA_DECAY: f64 = 0.98;

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: u64,
    pub encoder: Encoder,
    pub optimizer: OptimizerState,
    /// Source of view randomness.
    pub rng: ChaCha8Rng,
    pub loss_ema: Option<f64>,
}

impl TrainState {
    pub fn new(encoder: Encoder, seed: u64) -> Self {
        let optimizer = OptimizerState::new(encoder.params());
        Self {
            step: 0,
            encoder,
            optimizer,
            rng: ChaCha8Rng::seed_from_u64(splitmix64(seed ^ VIEW_STREAM)),
            loss_ema: None,
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    /// Unweighted forward + backward InfoNCE per tapped layer.
    pub per_layer: BTreeMap<usize, f64>,
    pub dropout_p: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Serialize)]
struct DivergenceReport {
    step: u64,
    loss: f64,
    per_layer: BTreeMap<usize, f64>,
    dropout_p: f64,
    lr: f64,
    param_norm: f64,
    representation_norms: BTreeMap<usize, (f64, f64)>,
}

/// Fixed per-run training settings.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub schedule: TrainSchedule,
    pub views: ViewConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
}

impl Trainer {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let schedule = cfg.train_schedule();
        schedule.validate()?;
        Ok(Self {
            schedule,
            views: cfg.view_config(0.0)?,
            weights: cfg.loss_weights()?,
            optimizer: OptimizerConfig {
                kind: cfg.schedule.optimizer,
                momentum: cfg.schedule.momentum,
                weight_decay: cfg.schedule.weight_decay,
                grad_clip_norm: cfg.schedule.grad_clip_norm,
            },
        })
    }

    /// One update on `batch`. Each scene yields two independently sampled
    /// views at the scheduled dropout rate; both pass through the same
    /// parameters.
    pub fn train_step(&self, state: &mut TrainState, batch: &[&SceneTensor]) -> Result<StepMetrics> {
        let step = state.step;
        let p = dropout_schedule(step, &self.schedule);
        let lr = lr_schedule(step, &self.schedule);
        let view_cfg = self.views.with_dropout(p);

        let mut first = Vec::with_capacity(batch.len());
        let mut second = Vec::with_capacity(batch.len());
        for scene in batch {
            first.push(make_view(scene, &view_cfg, &mut state.rng)?.data);
            second.push(make_view(scene, &view_cfg, &mut state.rng)?.data);
        }
        let x1 = stack_batch(first.iter().map(|v| v.view()))?;
        let x2 = stack_batch(second.iter().map(|v| v.view()))?;

        let encoder = &state.encoder;
        let (reps1, tape1) = encoder.encode_with_tape(x1.view())?;
        let (reps2, tape2) = encoder.encode_with_tape(x2.view())?;
        let shared = encoder.params().fingerprint();
        if tape1.params_fingerprint != shared || tape2.params_fingerprint != shared {
            return Err(CsfError::InvalidArgument(
                "the two views were not encoded with the same parameters".into(),
            ));
        }

        let lg = total_loss_grad(&reps1, &reps2, &self.weights)?;
        let per_layer: BTreeMap<usize, f64> = lg.per_layer.iter().map(|(l, v)| (*l, v.total())).collect();
        let diverged = |detail: &str, loss: f64| {
            let report = DivergenceReport {
                step,
                loss,
                per_layer: per_layer.clone(),
                dropout_p: p,
                lr,
                param_norm: encoder.params().l2_norm(),
                representation_norms: reps1
                    .layers
                    .iter()
                    .map(|(l, z)| (*l, (mean_norm(z.view()), mean_norm(reps2.layers[l].view()))))
                    .collect(),
            };
            CsfError::Diverged {
                step,
                detail: format!("{detail}; {}", serde_json::to_string(&report).expect("report serialises")),
            }
        };
        if !lg.total.is_finite() {
            return Err(diverged("loss is not finite", lg.total));
        }

        let mut grads = encoder.params().zeros_like();
        encoder.backward(tape1, &lg.grad1, &mut grads)?;
        encoder.backward(tape2, &lg.grad2, &mut grads)?;
        if !grads.all_finite() {
            return Err(diverged("gradient is not finite", lg.total));
        }

        let mut params = state.encoder.params().clone();
        let grad_norm = apply_update(&self.optimizer, &mut state.optimizer, &mut params, &mut grads, lr)?;
        if !params.all_finite() {
            return Err(diverged("parameters became non-finite", lg.total));
        }
        state.encoder.set_params(params)?;
        state.step += 1;
        state.loss_ema = Some(match state.loss_ema {
            Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * lg.total,
            None => lg.total,
        });
        Ok(StepMetrics {
            step,
            loss: lg.total,
            per_layer,
            dropout_p: p,
            lr,
            grad_norm,
        })
    }
}

/// Scene indices for `step`: each epoch is a fresh permutation seeded by
/// `(seed, epoch)` and the trailing partial batch is dropped, so no scene
/// appears twice in one batch.
pub fn batch_indices(num_scenes: usize, batch_size: usize, seed: u64, step: u64) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > num_scenes {
        return Err(CsfError::InvalidArgument(format!(
            "batch size {batch_size} does not fit a dataset of {num_scenes} scenes"
        )));
    }
    let per_epoch = (num_scenes / batch_size) as u64;
    let epoch = step / per_epoch;
    let slot = (step % per_epoch) as usize;
    let mut order: Vec<usize> = (0..num_scenes).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(splitmix64(seed ^ ORDER_STREAM) ^ epoch));
    order.shuffle(&mut rng);
    Ok(order[slot * batch_size..(slot + 1) * batch_size].to_vec())
}

#[derive(Debug, Clone, Default)]
pub struct LoopOptions {
    /// Continue from the newest checkpoint in the run directory.
    pub resume: bool,
    /// Stop (with a checkpoint) once this many steps are complete.
    pub halt_after: Option<u64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Steps run by this invocation.
    pub history: Vec<StepMetrics>,
    pub run_dir: PathBuf,
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const TIMING_FILE: &str = "timing.tsv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

fn metrics_header(layers: &[usize]) -> String {
    let mut h = String::from("step\tloss");
    for l in layers {
        h.push_str(&format!("\tloss_layer{l}"));
    }
    h.push_str("\tdropout_p\tlr\tgrad_norm\n");
    h
}

fn metrics_row(m: &StepMetrics) -> String {
    let mut r = format!("{}\t{}", m.step, m.loss);
    for v in m.per_layer.values() {
        r.push_str(&format!("\t{v}"));
    }
    r.push_str(&format!("\t{}\t{}\t{}\n", m.dropout_p, m.lr, m.grad_norm));
    r
}

/// Keeps the header and rows for steps below `keep_below`.
fn truncate_log(path: &Path, header: &str, keep_below: u64) -> Result<()> {
    let mut out = header.to_string();
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let step = line.split('\t').next().and_then(|s| s.parse::<u64>().ok());
            if step.is_some_and(|s| s < keep_below) {
                out.push_str(line);
                out.push('\n');
            }
        }
    }
    std::fs::write(path, out).map_err(|e| CsfError::io(path, e))
}

fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.schedule.total_steps = 0;
    c.data = Default::default();
    c.eval = Default::default();
    c
}

/// Runs (or resumes) training in `run_dir` until `schedule.total_steps`.
/// Writes `metrics.tsv` (deterministic), `timing.tsv` (wall clock) and
/// checkpoints at step 0, every `checkpoint_every` steps and at the end.
pub fn train_loop(
    cfg: &ExperimentConfig,
    data: &[SceneTensor],
    run_dir: &Path,
    opts: &LoopOptions,
) -> Result<TrainOutcome> {
    let trainer = Trainer::from_config(cfg)?;
    let first = data
        .first()
        .ok_or_else(|| CsfError::Dataset("training set is empty".into()))?;
    let channels = first.channels();
    if data.iter().any(|s| s.data.dim() != first.data.dim()) {
        return Err(CsfError::Dataset("training scenes differ in shape".into()));
    }
    let (_, h, w) = first.data.dim();
    if trainer.views.crop_pixels >= h.min(w) {
        return Err(CsfError::Config(format!(
            "views.crop_pixels = {} leaves nothing of {h}x{w} training scenes",
            trainer.views.crop_pixels
        )));
    }
    batch_indices(data.len(), trainer.schedule.batch_size, cfg.seed, 0)?;

    let ckpt_dir = run_dir.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CsfError::io(&ckpt_dir, e))?;
    let existing = latest_checkpoint(&ckpt_dir)?;
    let mut state = match (&existing, opts.resume) {
        (Some((_, path)), true) => {
            let (state, stored) = load_checkpoint(path)?;
            if comparable(&stored) != comparable(cfg) || stored.seed != cfg.seed {
                return Err(CsfError::Checkpoint(format!(
                    "config of {} does not match the requested run\n--- checkpoint config ---\n{}--- requested config ---\n{}",
                    path.display(),
                    stored.to_toml(),
                    cfg.to_toml()
                )));
            }
            if state.encoder.config().input_channels != channels {
                return Err(CsfError::Checkpoint(format!(
                    "checkpoint expects {} input channels, data has {channels}",
                    state.encoder.config().input_channels
                )));
            }
            log::info!("resuming from {} at step {}", path.display(), state.step);
            state
        }
        (Some((_, path)), false) => {
            return Err(CsfError::InvalidArgument(format!(
                "{} already holds checkpoint {}; resume it or choose another output directory",
                run_dir.display(),
                path.display()
            )))
        }
        (None, _) => TrainState::new(Encoder::build(&cfg.encoder_config(channels)?)?, cfg.seed),
    };

    let layers: Vec<usize> = trainer.weights.lambda_by_layer.keys().copied().collect();
    let metrics_path = run_dir.join(METRICS_FILE);
    let timing_path = run_dir.join(TIMING_FILE);
    truncate_log(&metrics_path, &metrics_header(&layers), state.step)?;
    truncate_log(&timing_path, "step\twall_seconds\n", state.step)?;
    let open = |p: &Path| {
        OpenOptions::new()
            .append(true)
            .open(p)
            .map_err(|e| CsfError::io(p, e))
    };
    let mut metrics = open(&metrics_path)?;
    let mut timing = open(&timing_path)?;

    let save = |state: &TrainState| -> Result<()> {
        save_checkpoint(&ckpt_dir.join(checkpoint_name(state.step)), state, cfg)
    };
    if existing.is_none() {
        save(&state)?;
    }

    let total = trainer.schedule.total_steps;
    let stop = opts.halt_after.map_or(total, |h| h.min(total));
    let mut history = Vec::new();
    let started = Instant::now();
    while state.step < stop {
        let idx = batch_indices(data.len(), trainer.schedule.batch_size, cfg.seed, state.step)?;
        let batch: Vec<&SceneTensor> = idx.iter().map(|&i| &data[i]).collect();
        let t0 = Instant::now();
        let m = match trainer.train_step(&mut state, &batch) {
            Ok(m) => m,
            Err(CsfError::Diverged { step, detail }) => {
                let dump = run_dir.join(format!("diverged-step{step}.json"));
                let json = detail.split_once("; ").map_or(detail.as_str(), |(_, j)| j);
                std::fs::write(&dump, json).map_err(|e| CsfError::io(&dump, e))?;
                return Err(CsfError::Diverged {
                    step,
                    detail: format!("{detail} (state dumped to {})", dump.display()),
                });
            }
            Err(e) => return Err(e),
        };
        metrics
            .write_all(metrics_row(&m).as_bytes())
            .map_err(|e| CsfError::io(&metrics_path, e))?;
        writeln!(timing, "{}\t{:.4}", m.step, t0.elapsed().as_secs_f64()).map_err(|e| CsfError::io(&timing_path, e))?;
        if m.step % 25 == 0 {
            log::info!(
                "step {} loss {:.4} (ema {:.4}) p {:.3} lr {:.4} |g| {:.3} [{:.1}s]",
                m.step,
                m.loss,
                state.loss_ema.unwrap_or(m.loss),
                m.dropout_p,
                m.lr,
                m.grad_norm,
                started.elapsed().as_secs_f64()
            );
        }
        history.push(m);
        if state.step % cfg.schedule.checkpoint_every == 0 || state.step == stop {
            save(&state)?;
        }
    }
    Ok(TrainOutcome {
        state,
        history,
        run_dir: run_dir.to_path_buf(),
    })
}
