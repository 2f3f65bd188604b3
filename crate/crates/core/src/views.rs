//! Stochastic views of a fused scene: channel dropout with `1 / (1 - p)`
//! compensation, then crop, dihedral transform, and per-channel
//! brightness/contrast jitter.

use std::collections::BTreeSet;

use ndarray::{s, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};
use crate::scenes::SceneTensor;

/// Rotation by a multiple of 90 degrees, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    pub fn from_degrees(deg: u32) -> Result<Self> {
        match deg % 360 {
            0 => Ok(Rotation::R0),
            90 => Ok(Rotation::R90),
            180 => Ok(Rotation::R180),
            270 => Ok(Rotation::R270),
            other => Err(CsfError::InvalidArgument(format!(
                "rotation must be a multiple of 90 degrees, got {other}"
            ))),
        }
    }

    pub fn degrees(self) -> u32 {
        match self {
            Rotation::R0 => 0,
            Rotation::R90 => 90,
            Rotation::R180 => 180,
            Rotation::R270 => 270,
        }
    }

    fn quarter_turns(self) -> usize {
        self.degrees() as usize / 90
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    pub dropout_rate: f64,
    /// Pixels removed per spatial axis in total.
    pub crop_pixels: usize,
    pub jitter_limit: f64,
    pub rotations: Vec<Rotation>,
    pub flips: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            dropout_rate: 0.0,
            crop_pixels: 12,
            jitter_limit: 0.25,
            rotations: Rotation::ALL.to_vec(),
            flips: true,
        }
    }
}

impl ViewConfig {
    /// No dropout, no crop, no jitter, no geometric transform.
    pub fn identity() -> Self {
        Self {
            dropout_rate: 0.0,
            crop_pixels: 0,
            jitter_limit: 0.0,
            rotations: vec![Rotation::R0],
            flips: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.dropout_rate)?;
        if !(0.0..1.0).contains(&self.jitter_limit) {
            return Err(CsfError::InvalidArgument(format!(
                "jitter limit must be in [0, 1), got {}",
                self.jitter_limit
            )));
        }
        if self.rotations.is_empty() {
            return Err(CsfError::InvalidArgument("rotation set is empty".into()));
        }
        Ok(())
    }

    pub fn with_dropout(&self, p: f64) -> Self {
        Self {
            dropout_rate: p,
            ..self.clone()
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(CsfError::InvalidArgument(format!(
            "dropout rate must be in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// An augmented, channel-dropped copy of a scene tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub data: Array3<f32>,
    pub channel_mask: Vec<bool>,
    pub scale_factor: f32,
    pub source_scene_id: String,
}

/// Keeps each channel independently with probability `1 - p`. A draw that
/// keeps nothing is discarded and redrawn.
pub fn sample_channel_mask<R: Rng + ?Sized>(channels: usize, p: f64, rng: &mut R) -> Vec<bool> {
    assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0, 1)");
    assert!(channels > 0, "cannot mask zero channels");
    loop {
        let mask: Vec<bool> = (0..channels).map(|_| rng.random::<f64>() >= p).collect();
        if mask.iter().any(|&keep| keep) {
            return mask;
        }
    }
}

/// Zeroes dropped channels and scales the kept ones by `1 / (1 - p)`.
pub fn apply_channel_dropout(x: ArrayView3<f32>, mask: &[bool], p: f64) -> Result<Array3<f32>> {
    check_rate(p)?;
    if mask.len() != x.shape()[0] {
        return Err(CsfError::Shape(format!(
            "mask has {} entries for {} channels",
            mask.len(),
            x.shape()[0]
        )));
    }
    if !mask.iter().any(|&keep| keep) {
        return Err(CsfError::InvalidArgument("channel mask drops every channel".into()));
    }
    let scale = (1.0 / (1.0 - p)) as f32;
    let mut out = Array3::<f32>::zeros(x.raw_dim());
    for (c, &keep) in mask.iter().enumerate() {
        if keep {
            let mut dst = out.index_axis_mut(Axis(0), c);
            dst.assign(&x.index_axis(Axis(0), c));
            dst.mapv_inplace(|v| v * scale);
        }
    }
    Ok(out)
}

/// Random crop to `(H - crop, W - crop)`, a random element of the configured
/// rotation/flip group, then per-channel `x <- g * (mean + f * (x - mean))`
/// with `f, g` drawn from `[1 - jitter, 1 + jitter]`.
pub fn augment<R: Rng + ?Sized>(x: ArrayView3<f32>, cfg: &ViewConfig, rng: &mut R) -> Array3<f32> {
    let (c, h, w) = x.dim();
    assert!(
        cfg.crop_pixels < h.min(w),
        "crop of {} pixels leaves nothing of a {h}x{w} input",
        cfg.crop_pixels
    );
    let (oh, ow) = (h - cfg.crop_pixels, w - cfg.crop_pixels);
    let y0 = rng.random_range(0..=cfg.crop_pixels);
    let x0 = rng.random_range(0..=cfg.crop_pixels);
    let cropped = x.slice(s![.., y0..y0 + oh, x0..x0 + ow]);

    let rotation = cfg.rotations[rng.random_range(0..cfg.rotations.len())];
    let flip = cfg.flips && rng.random::<bool>();
    let mut out = dihedral(cropped, rotation, flip);

    if cfg.jitter_limit > 0.0 {
        let j = cfg.jitter_limit as f32;
        for ch in 0..c {
            let contrast = rng.random_range(1.0 - j..=1.0 + j);
            let brightness = rng.random_range(1.0 - j..=1.0 + j);
            let mut plane = out.index_axis_mut(Axis(0), ch);
            let mean = plane.mean().unwrap_or(0.0);
            plane.mapv_inplace(|v| brightness * (mean + contrast * (v - mean)));
        }
    }
    out
}

/// Applies an optional horizontal flip followed by a rotation.
pub fn dihedral(x: ArrayView3<f32>, rotation: Rotation, flip: bool) -> Array3<f32> {
    let mut view = x;
    if flip {
        view.invert_axis(Axis(2));
    }
    // one counter-clockwise quarter turn = transpose then vertical flip
    for _ in 0..rotation.quarter_turns() {
        view.swap_axes(1, 2);
        view.invert_axis(Axis(1));
    }
    view.as_standard_layout().into_owned()
}

/// One training view: mask, dropout, augmentation, in that order.
pub fn make_view<R: Rng + ?Sized>(x: &SceneTensor, cfg: &ViewConfig, rng: &mut R) -> Result<View> {
    cfg.validate()?;
    if x.data.iter().any(|v| !v.is_finite()) {
        return Err(CsfError::NonFinite(format!("scene `{}`", x.scene_id)));
    }
    let (_, h, w) = x.data.dim();
    if cfg.crop_pixels >= h.min(w) {
        return Err(CsfError::InvalidArgument(format!(
            "crop of {} pixels leaves nothing of a {h}x{w} input",
            cfg.crop_pixels
        )));
    }
    let mask = sample_channel_mask(x.channels(), cfg.dropout_rate, rng);
    let dropped = apply_channel_dropout(x.data.view(), &mask, cfg.dropout_rate)?;
    let data = augment(dropped.view(), cfg, rng);
    Ok(View {
        data,
        channel_mask: mask,
        scale_factor: (1.0 / (1.0 - cfg.dropout_rate)) as f32,
        source_scene_id: x.scene_id.clone(),
    })
}

/// Deterministic evaluation view on a fixed channel subset, scaled by the
/// same factor used at the end of training.
pub fn inference_view(x: &SceneTensor, keep_channels: &BTreeSet<usize>, train_p: f64) -> Result<View> {
    if keep_channels.is_empty() {
        return Err(CsfError::InvalidArgument("channel subset is empty".into()));
    }
    if let Some(&bad) = keep_channels.iter().find(|&&c| c >= x.channels()) {
        return Err(CsfError::InvalidArgument(format!(
            "channel {bad} out of range for {} channels",
            x.channels()
        )));
    }
    let mask: Vec<bool> = (0..x.channels()).map(|c| keep_channels.contains(&c)).collect();
    let data = apply_channel_dropout(x.data.view(), &mask, train_p)?;
    Ok(View {
        data,
        channel_mask: mask,
        scale_factor: (1.0 / (1.0 - train_p)) as f32,
        source_scene_id: x.scene_id.clone(),
    })
}
