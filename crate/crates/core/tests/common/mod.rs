//! Independent reference implementations and fixtures for the
//! integration tests. Nothing here calls the library's loss code.

#![allow(dead_code)]

use std::path::Path;

use csf::config::ExperimentConfig;
use csf::scenes::{fuse_and_upsample, generate_dataset, make_default_suite, Scene, SceneTensor};
use ndarray::Array2;
use rand::Rng;

fn score(a: &Array2<f64>, i: usize, c: &Array2<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|d| a[[i, d]] * c[[j, d]]).sum()
}

/// One anchor's contrastive term written from its definition: minus the log
/// of the exponentiated positive score over itself plus the exponentiated
/// scores against the noise set. No max-subtraction.
pub fn naive_term(anchor: &Array2<f64>, other: &Array2<f64>, i: usize, noise: &[usize]) -> f64 {
    assert!(!noise.contains(&i), "noise set must exclude the matched pair");
    let positive = score(anchor, i, other, i).exp();
    let negatives: f64 = noise.iter().map(|&j| score(anchor, i, other, j).exp()).sum();
    -(positive / (positive + negatives)).ln()
}

/// `(forward, backward)` with every other batch element as noise, each
/// averaged over the batch.
pub fn naive_infonce_parts(z1: &Array2<f64>, z2: &Array2<f64>) -> (f64, f64) {
    let b = z1.nrows();
    let direction = |a: &Array2<f64>, c: &Array2<f64>| -> f64 {
        (0..b)
            .map(|i| {
                let noise: Vec<usize> = (0..b).filter(|&j| j != i).collect();
                naive_term(a, c, i, &noise)
            })
            .sum::<f64>()
            / b as f64
    };
    (direction(z1, z2), direction(z2, z1))
}

pub fn naive_infonce(z1: &Array2<f64>, z2: &Array2<f64>) -> f64 {
    let (f, b) = naive_infonce_parts(z1, z2);
    f + b
}

/// Central finite differences of `f` with respect to every entry of `z`.
pub fn finite_difference(f: impl Fn(&Array2<f64>) -> f64, z: &Array2<f64>, h: f64) -> Array2<f64> {
    let mut g = Array2::zeros(z.raw_dim());
    let mut probe = z.clone();
    for idx in 0..z.len() {
        let (r, c) = (idx / z.ncols(), idx % z.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        g[[r, c]] = (up - down) / (2.0 * h);
    }
    g
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Largest elementwise relative error with a floor on the denominator.
pub fn max_relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Empirical chance level of the same-class neighbour fraction: for random
/// labels, the probability that another point shares a point's label.
pub fn chance_same_label(labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut counts = std::collections::BTreeMap::new();
    for l in labels {
        *counts.entry(*l).or_insert(0usize) += 1;
    }
    counts.values().map(|&c| c as f64 * (c as f64 - 1.0)).sum::<f64>() / (n * (n - 1.0))
}

/// A seconds-scale config: 12x12 scenes, two narrow stacks, a few steps.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = 1;
    cfg.scenes.num_classes = 3;
    cfg.scenes.scenes_per_class = 4;
    cfg.scenes.eval_scenes_per_class = 4;
    cfg.scenes.height = 12;
    cfg.scenes.width = 12;
    cfg.views.crop_pixels = 2;
    cfg.encoder.stack_widths = vec![4, 8];
    cfg.encoder.blocks_per_stack = vec![1, 1];
    cfg.encoder.loss_layers = vec![0, 1];
    cfg.encoder.norm_groups = 2;
    cfg.schedule.total_steps = 6;
    cfg.schedule.batch_size = 4;
    cfg.schedule.dropout_ramp_steps = 3;
    cfg.schedule.lr_warmup_steps = 2;
    cfg.schedule.checkpoint_every = 2;
    cfg.eval.k = 3;
    cfg.eval.permutations = 50;
    cfg
}

pub fn write_config(path: &Path, cfg: &ExperimentConfig) {
    std::fs::write(path, cfg.to_toml()).unwrap();
}

pub fn fused(scenes: &[Scene]) -> Vec<SceneTensor> {
    let suite = make_default_suite();
    scenes.iter().map(|s| fuse_and_upsample(s, &suite).unwrap()).collect()
}

pub fn small_fused_dataset(num_classes: usize, per_class: usize, seed: u64, extent: usize) -> Vec<SceneTensor> {
    fused(&generate_dataset(&make_default_suite(), num_classes, per_class, seed, (extent, extent)).unwrap())
}

pub fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}
