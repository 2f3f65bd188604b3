//! The experiment config file: one TOML document with a top-level `seed`
//! and sections `data`, `scenes`, `views`, `encoder`, `loss`, `schedule`,
//! `eval`. Every key has a default; unknown keys are rejected with the
//! closest valid key as a hint.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{CsfError, Result};
use crate::loss::LossWeights;
use crate::training::schedule::TrainSchedule;
use crate::views::{Rotation, ViewConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub train_dir: String,
    pub eval_dir: String,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train_dir: "data/train".into(),
            eval_dir: "data/eval".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenesSection {
    /// Seed of the generated datasets (the top-level `seed` drives training).
    pub seed: u64,
    pub num_classes: usize,
    pub scenes_per_class: usize,
    /// Size of the held-out evaluation split, per class.
    pub eval_scenes_per_class: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for ScenesSection {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 12,
            scenes_per_class: 50,
            eval_scenes_per_class: 50,
            height: 48,
            width: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewsSection {
    pub crop_pixels: usize,
    pub jitter_limit: f64,
    /// Allowed rotations in degrees (multiples of 90).
    pub rotations: Vec<u32>,
    pub flips: bool,
}

impl Default for ViewsSection {
    fn default() -> Self {
        Self {
            crop_pixels: 12,
            jitter_limit: 0.25,
            rotations: vec![0, 90, 180, 270],
            flips: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub stack_widths: Vec<usize>,
    pub blocks_per_stack: Vec<usize>,
    pub loss_layers: Vec<usize>,
    pub stem_stride: usize,
    pub norm_groups: usize,
    pub init_scale: f32,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            stack_widths: d.stack_widths,
            blocks_per_stack: d.blocks_per_stack,
            loss_layers: d.loss_layers,
            stem_stride: d.stem_stride,
            norm_groups: d.norm_groups,
            init_scale: d.init_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// One weight per entry of `encoder.loss_layers`, in the same order.
    pub weights: Vec<f64>,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            weights: vec![1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub total_steps: u64,
    pub batch_size: usize,
    pub dropout_ramp_steps: u64,
    pub dropout_final: f64,
    pub lr_warmup_steps: u64,
    pub base_lr: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables clipping.
    pub grad_clip_norm: f64,
    pub checkpoint_every: u64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            total_steps: 600,
            batch_size: 64,
            dropout_ramp_steps: 800,
            dropout_final: 0.66,
            lr_warmup_steps: 300,
            base_lr: 0.01,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 0.0,
            grad_clip_norm: 1.0,
            checkpoint_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// PCA components for the neighbour metrics (capped at `min(N, D)`).
    pub pca_components: usize,
    /// PCA components fed to the 2-D embedding plot.
    pub plot_components: usize,
    pub k: usize,
    /// Largest `k` in the metric-versus-k curve.
    pub k_max: usize,
    pub top_n: usize,
    /// Leading principal components used for maximal-activation retrieval.
    pub activation_components: usize,
    pub distance: String,
    /// Channel subsets to sweep; empty means the default ladder.
    pub subsets: Vec<Vec<usize>>,
    pub permutations: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pca_components: 128,
            plot_components: 50,
            k: 10,
            k_max: 30,
            top_n: 10,
            activation_components: 3,
            distance: "euclidean".into(),
            subsets: Vec::new(),
            permutations: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataSection,
    pub scenes: ScenesSection,
    pub views: ViewsSection,
    pub encoder: EncoderSection,
    pub loss: LossSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataSection::default(),
            scenes: ScenesSection::default(),
            views: ViewsSection::default(),
            encoder: EncoderSection::default(),
            loss: LossSection::default(),
            schedule: ScheduleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CsfError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CsfError::Config(e.message().to_string()))?;
        check_keys(&table)?;
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CsfError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.view_config(0.0)?;
        self.encoder_config(12)?;
        self.loss_weights()?;
        self.train_schedule().validate()?;
        if self.scenes.num_classes < 2 || self.scenes.scenes_per_class == 0 || self.scenes.eval_scenes_per_class == 0 {
            return Err(CsfError::Config(
                "scenes.num_classes must be >= 2 and both per-class scene counts >= 1".into(),
            ));
        }
        if self.eval.distance != "euclidean" {
            return Err(CsfError::Config(format!(
                "eval.distance `{}` is not supported (only `euclidean`)",
                self.eval.distance
            )));
        }
        if self.eval.k == 0 || self.eval.k_max == 0 || self.eval.top_n == 0 || self.eval.activation_components == 0 {
            return Err(CsfError::Config(
                "eval.k, eval.k_max, eval.top_n and eval.activation_components must be positive".into(),
            ));
        }
        if self.eval.pca_components == 0 || self.eval.plot_components == 0 {
            return Err(CsfError::Config("PCA component counts must be positive".into()));
        }
        if self.schedule.checkpoint_every == 0 {
            return Err(CsfError::Config("schedule.checkpoint_every must be positive".into()));
        }
        Ok(())
    }

    /// View settings for dropout rate `p`.
    pub fn view_config(&self, p: f64) -> Result<ViewConfig> {
        let rotations = self
            .views
            .rotations
            .iter()
            .map(|&d| Rotation::from_degrees(d))
            .collect::<Result<Vec<_>>>()?;
        let cfg = ViewConfig {
            dropout_rate: p,
            crop_pixels: self.views.crop_pixels,
            jitter_limit: self.views.jitter_limit,
            rotations,
            flips: self.views.flips,
        };
        cfg.validate()?;
        if cfg.crop_pixels >= self.scenes.height.min(self.scenes.width) {
            return Err(CsfError::Config(format!(
                "views.crop_pixels = {} leaves nothing of a {}x{} scene",
                cfg.crop_pixels, self.scenes.height, self.scenes.width
            )));
        }
        Ok(cfg)
    }

    pub fn encoder_config(&self, input_channels: usize) -> Result<EncoderConfig> {
        let cfg = EncoderConfig {
            input_channels,
            stack_widths: self.encoder.stack_widths.clone(),
            blocks_per_stack: self.encoder.blocks_per_stack.clone(),
            loss_layers: self.encoder.loss_layers.clone(),
            stem_stride: self.encoder.stem_stride,
            norm_groups: self.encoder.norm_groups,
            init_scale: self.encoder.init_scale,
            rng_seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        if self.loss.weights.len() != self.encoder.loss_layers.len() {
            return Err(CsfError::Config(format!(
                "loss.weights has {} entries but encoder.loss_layers has {}",
                self.loss.weights.len(),
                self.encoder.loss_layers.len()
            )));
        }
        let map: BTreeMap<usize, f64> = self
            .encoder
            .loss_layers
            .iter()
            .copied()
            .zip(self.loss.weights.iter().copied())
            .collect();
        if map.len() != self.loss.weights.len() {
            return Err(CsfError::Config("encoder.loss_layers has duplicates".into()));
        }
        LossWeights::new(map)
    }

    pub fn train_schedule(&self) -> TrainSchedule {
        let s = &self.schedule;
        TrainSchedule {
            dropout_ramp_steps: s.dropout_ramp_steps,
            dropout_final: s.dropout_final,
            lr_warmup_steps: s.lr_warmup_steps,
            base_lr: s.base_lr,
            total_steps: s.total_steps,
            batch_size: s.batch_size,
        }
    }

    /// Hash of everything that shapes a training trajectory except the seed
    /// and the step budget, so that extending or resuming a run keeps its
    /// directory.
    pub fn run_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.seed = 0;
        canonical.schedule.total_steps = 0;
        canonical.data = DataSection::default();
        canonical.eval = EvalSection::default();
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir_name(&self) -> String {
        format!("{}-seed{}", self.run_hash(), self.seed)
    }
}

/// Every valid dotted key, derived from the defaults.
pub fn valid_keys() -> Vec<String> {
    let table = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialise");
    let mut keys = Vec::new();
    for (k, v) in &table {
        match v {
            toml::Value::Table(section) => keys.extend(section.keys().map(|s| format!("{k}.{s}"))),
            _ => keys.push(k.clone()),
        }
    }
    keys
}

/// Closest valid key by edit distance; ties prefer the same section.
fn nearest_key(key: &str) -> Option<String> {
    let section = |k: &str| k.rsplit_once('.').map_or("", |(s, _)| s).to_string();
    let leaf = key.rsplit('.').next().unwrap_or(key);
    let own = section(key);
    valid_keys()
        .into_iter()
        .map(|k| {
            let k_leaf = k.rsplit('.').next().unwrap_or(&k).to_string();
            let d = strsim::levenshtein(leaf, &k_leaf).min(strsim::levenshtein(key, &k));
            (d, section(&k) != own, k)
        })
        .min()
        .filter(|(d, _, _)| *d <= leaf.len().max(3))
        .map(|(_, _, k)| k)
}

fn check_keys(table: &toml::Table) -> Result<()> {
    let defaults = toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialise");
    for (k, v) in table {
        let Some(default) = defaults.get(k) else {
            return Err(CsfError::UnknownKey {
                key: k.clone(),
                suggestion: nearest_key(k),
            });
        };
        if let (toml::Value::Table(section), toml::Value::Table(known)) = (v, default) {
            for sk in section.keys() {
                if !known.contains_key(sk) {
                    let dotted = format!("{k}.{sk}");
                    return Err(CsfError::UnknownKey {
                        suggestion: nearest_key(&dotted),
                        key: dotted,
                    });
                }
            }
        }
    }
    Ok(())
}

/// Applies `section.key=value` overrides (value parsed as TOML, falling back
/// to a bare string).
pub fn apply_overrides(cfg: &ExperimentConfig, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut table = toml::Table::try_from(cfg).expect("config serialises");
    for (key, raw) in overrides {
        let value: toml::Value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.clone()));
        let mut parts = key.splitn(2, '.');
        let head = parts.next().unwrap_or_default().to_string();
        match parts.next() {
            Some(leaf) => {
                let section = table
                    .entry(head.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                match section {
                    toml::Value::Table(t) => {
                        t.insert(leaf.to_string(), value);
                    }
                    _ => {
                        return Err(CsfError::UnknownKey {
                            key: key.clone(),
                            suggestion: nearest_key(key),
                        })
                    }
                }
            }
            None => {
                table.insert(head, value);
            }
        }
    }
    ExperimentConfig::from_toml(&toml::to_string(&table).expect("table serialises"))
}
