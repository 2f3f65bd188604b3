//! Synthetic multi-sensor scenes.
//!
//! A scene is rendered once as a latent layout at the finest resolution:
//! per-pixel material abundances (vegetation, water, built surface, soil)
//! plus a shade field. Every sensor then observes that same layout through
//! its own grid (area downsampling), its own fixed band-mixing matrix, and
//! its own noise. Class identity lives in the layout statistics, so it is
//! recoverable from any single sensor and more reliably from several.
//!
//! Bilinear upsampling uses the align-corners convention throughout: output
//! pixel `i` samples source coordinate `i * (n_in - 1) / (n_out - 1)`.

use std::f32::consts::PI;
use std::ops::Range;

use ndarray::{s, Array2, Array3, ArrayView3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};

/// Number of distinct class recipes the generator knows.
pub const NUM_CLASS_RECIPES: usize = 12;

/// Human-readable names for the class recipes, indexed by label.
pub const CLASS_NAMES: [&str; NUM_CLASS_RECIPES] = [
    "forest",
    "cropland",
    "lake",
    "residential",
    "industrial",
    "parking",
    "park",
    "road_junction",
    "quarry",
    "orchard",
    "shoreline",
    "dense_urban",
];

const MATERIALS: usize = 4;
const VEGETATION: usize = 0;
const WATER: usize = 1;
const BUILT: usize = 2;
const SOIL: usize = 3;

/// Reflectance of each material in (red, green, blue, nir).
const MATERIAL_SIGNATURES: [[f32; 4]; MATERIALS] = [
    [0.05, 0.09, 0.04, 0.45],
    [0.03, 0.05, 0.09, 0.02],
    [0.28, 0.27, 0.29, 0.30],
    [0.32, 0.26, 0.18, 0.38],
];

const SHADE_DEPTH: f32 = 0.6;

/// One imaging platform: how many bands it has and how much coarser its
/// pixels are than the finest sensor in the suite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSpec {
    pub name: String,
    pub bands: usize,
    pub resolution_factor: usize,
}

impl SensorSpec {
    pub fn new(name: impl Into<String>, bands: usize, resolution_factor: usize) -> Result<Self> {
        if bands == 0 {
            return Err(CsfError::InvalidArgument("sensor needs at least one band".into()));
        }
        if resolution_factor == 0 {
            return Err(CsfError::InvalidArgument(
                "resolution factor must be >= 1".into(),
            ));
        }
        Ok(Self {
            name: name.into(),
            bands,
            resolution_factor,
        })
    }
}

/// Ordered set of sensors whose channels are concatenated in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorSuite {
    sensors: Vec<SensorSpec>,
    total_channels: usize,
}

impl SensorSuite {
    pub fn new(sensors: Vec<SensorSpec>) -> Result<Self> {
        if sensors.is_empty() {
            return Err(CsfError::InvalidArgument("sensor suite is empty".into()));
        }
        if !sensors.iter().any(|s| s.resolution_factor == 1) {
            return Err(CsfError::InvalidArgument(
                "sensor suite needs a sensor with resolution factor 1".into(),
            ));
        }
        if let Some(bad) = sensors
            .iter()
            .find(|s| s.bands == 0 || s.resolution_factor == 0)
        {
            return Err(CsfError::InvalidArgument(format!(
                "sensor `{}` has zero bands or zero resolution factor",
                bad.name
            )));
        }
        let total_channels = sensors.iter().map(|s| s.bands).sum();
        Ok(Self {
            sensors,
            total_channels,
        })
    }

    pub fn sensors(&self) -> &[SensorSpec] {
        &self.sensors
    }

    pub fn total_channels(&self) -> usize {
        self.total_channels
    }

    /// Channel indices occupied by sensor `index` in the fused tensor.
    pub fn channel_range(&self, index: usize) -> Range<usize> {
        let start: usize = self.sensors[..index].iter().map(|s| s.bands).sum();
        start..start + self.sensors[index].bands
    }

    /// Checks that a base extent is divisible by every resolution factor.
    pub fn check_extent(&self, height: usize, width: usize) -> Result<()> {
        if height == 0 || width == 0 {
            return Err(CsfError::InvalidArgument("scene extent must be non-zero".into()));
        }
        for s in &self.sensors {
            if height % s.resolution_factor != 0 || width % s.resolution_factor != 0 {
                return Err(CsfError::InvalidArgument(format!(
                    "extent {height}x{width} is not divisible by resolution factor {} of sensor `{}`",
                    s.resolution_factor, s.name
                )));
            }
        }
        Ok(())
    }

    /// Compact textual form, e.g. `SPOT:4:3,NAIP:4:2,PHR:4:1`.
    pub fn describe(&self) -> String {
        self.sensors
            .iter()
            .map(|s| format!("{}:{}:{}", s.name, s.bands, s.resolution_factor))
            .collect::<Vec<_>>()
            .join(",")
    }

    /// Inverse of [`SensorSuite::describe`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut sensors = Vec::new();
        for part in text.split(',') {
            let fields: Vec<&str> = part.trim().split(':').collect();
            if fields.len() != 3 {
                return Err(CsfError::InvalidArgument(format!(
                    "bad sensor description `{part}`"
                )));
            }
            let parse = |v: &str| {
                v.parse::<usize>().map_err(|_| {
                    CsfError::InvalidArgument(format!("bad sensor description `{part}`"))
                })
            };
            sensors.push(SensorSpec::new(fields[0], parse(fields[1])?, parse(fields[2])?)?);
        }
        Self::new(sensors)
    }
}

/// Three four-band sensors at 3x, 2x and 1x the finest pixel size, mirroring
/// a SPOT / NAIP / Pleiades stack. Bands are ordered red, green, blue, nir.
pub fn make_default_suite() -> SensorSuite {
    SensorSuite::new(vec![
        SensorSpec::new("SPOT", 4, 3).expect("static sensor"),
        SensorSpec::new("NAIP", 4, 2).expect("static sensor"),
        SensorSpec::new("PHR", 4, 1).expect("static sensor"),
    ])
    .expect("static suite")
}

/// Coterminous per-sensor looks of one location.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// One `[bands, H / factor, W / factor]` array per sensor, in suite order.
    pub looks: Vec<Array3<f32>>,
    pub class_label: usize,
    pub scene_id: String,
    pub latent_seed: u64,
}

impl Scene {
    /// Base extent implied by the looks (the extent of the finest sensor grid).
    pub fn base_extent(&self, suite: &SensorSuite) -> Result<(usize, usize)> {
        self.check_against(suite)?;
        let look = &self.looks[0];
        let f = suite.sensors()[0].resolution_factor;
        Ok((look.shape()[1] * f, look.shape()[2] * f))
    }

    fn check_against(&self, suite: &SensorSuite) -> Result<()> {
        if self.looks.len() != suite.sensors().len() {
            return Err(CsfError::Shape(format!(
                "scene `{}` has {} looks, suite has {} sensors",
                self.scene_id,
                self.looks.len(),
                suite.sensors().len()
            )));
        }
        let first = &suite.sensors()[0];
        let base_h = self.looks[0].shape()[1] * first.resolution_factor;
        let base_w = self.looks[0].shape()[2] * first.resolution_factor;
        for (look, sensor) in self.looks.iter().zip(suite.sensors()) {
            let expected = [
                sensor.bands,
                base_h / sensor.resolution_factor,
                base_w / sensor.resolution_factor,
            ];
            if look.shape() != expected
                || base_h % sensor.resolution_factor != 0
                || base_w % sensor.resolution_factor != 0
            {
                return Err(CsfError::Shape(format!(
                    "scene `{}`: look for `{}` has shape {:?}, expected {:?}",
                    self.scene_id,
                    sensor.name,
                    look.shape(),
                    expected
                )));
            }
        }
        Ok(())
    }
}

/// All sensors of a scene on the finest grid, channels concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTensor {
    pub data: Array3<f32>,
    pub scene_id: String,
    pub class_label: usize,
    suite: SensorSuite,
}

impl SceneTensor {
    pub fn new(
        data: Array3<f32>,
        suite: &SensorSuite,
        scene_id: impl Into<String>,
        class_label: usize,
    ) -> Result<Self> {
        if data.shape()[0] != suite.total_channels() {
            return Err(CsfError::Shape(format!(
                "tensor has {} channels, suite has {}",
                data.shape()[0],
                suite.total_channels()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(CsfError::NonFinite("scene tensor contains NaN or inf".into()));
        }
        Ok(Self {
            data,
            scene_id: scene_id.into(),
            class_label,
            suite: suite.clone(),
        })
    }

    pub fn suite(&self) -> &SensorSuite {
        &self.suite
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Renders one labeled scene. Pure function of its arguments.
pub fn generate_scene(
    suite: &SensorSuite,
    class_label: usize,
    rng_seed: u64,
    size: (usize, usize),
) -> Result<Scene> {
    if class_label >= NUM_CLASS_RECIPES {
        return Err(CsfError::InvalidArgument(format!(
            "class label {class_label} out of range [0, {NUM_CLASS_RECIPES})"
        )));
    }
    let (height, width) = size;
    suite.check_extent(height, width)?;

    let mut rng =
        ChaCha8Rng::seed_from_u64(splitmix64(rng_seed ^ (class_label as u64).wrapping_mul(0xA24B_AED4_963E_E407)));
    let latent = render_latent(class_label, height, width, &mut rng);

    let gain: f32 = rng.random_range(0.75..1.25);
    let haze: [f32; 4] = std::array::from_fn(|_| rng.random_range(0.0..0.05));

    let mut looks = Vec::with_capacity(suite.sensors().len());
    for (index, sensor) in suite.sensors().iter().enumerate() {
        let mixing = band_mixing(index, sensor.bands);
        let abundance = area_downsample(latent.abundance.view(), sensor.resolution_factor);
        let shade = area_downsample(latent.shade.view().insert_axis(ndarray::Axis(0)), sensor.resolution_factor);
        let (h, w) = (abundance.shape()[1], abundance.shape()[2]);
        let noise = Normal::new(0.0f32, sensor_noise(sensor)).expect("finite sigma");
        let mut look = Array3::<f32>::zeros((sensor.bands, h, w));
        for b in 0..sensor.bands {
            for y in 0..h {
                for x in 0..w {
                    let mut v = 0.0;
                    for m in 0..MATERIALS {
                        v += mixing[[b, m]] * abundance[[m, y, x]];
                    }
                    v *= 1.0 - SHADE_DEPTH * shade[[0, y, x]];
                    v = v * gain + haze[b % 4] + noise.sample(&mut rng);
                    look[[b, y, x]] = v;
                }
            }
        }
        looks.push(look);
    }

    Ok(Scene {
        looks,
        class_label,
        scene_id: format!("c{class_label:02}-{rng_seed:016x}"),
        latent_seed: rng_seed,
    })
}

/// Balanced labeled dataset. Scene `i` has class `i % num_classes` and a seed
/// derived from `(rng_seed, i)`, so the result does not depend on the order
/// in which scenes are produced.
pub fn generate_dataset(
    suite: &SensorSuite,
    num_classes: usize,
    scenes_per_class: usize,
    rng_seed: u64,
    size: (usize, usize),
) -> Result<Vec<Scene>> {
    if !(2..=NUM_CLASS_RECIPES).contains(&num_classes) {
        return Err(CsfError::InvalidArgument(format!(
            "num_classes must be in [2, {NUM_CLASS_RECIPES}], got {num_classes}"
        )));
    }
    if scenes_per_class == 0 {
        return Err(CsfError::InvalidArgument("scenes_per_class must be >= 1".into()));
    }
    suite.check_extent(size.0, size.1)?;
    let total = num_classes * scenes_per_class;
    (0..total)
        .map(|i| {
            let seed = splitmix64(rng_seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ i as u64);
            let mut scene = generate_scene(suite, i % num_classes, seed, size)?;
            scene.scene_id = format!("scene-{i:06}");
            Ok(scene)
        })
        .collect()
}

/// Bilinearly upsamples every look onto the finest grid and stacks the
/// channels in suite order.
pub fn fuse_and_upsample(scene: &Scene, suite: &SensorSuite) -> Result<SceneTensor> {
    let (height, width) = scene.base_extent(suite)?;
    let mut data = Array3::<f32>::zeros((suite.total_channels(), height, width));
    for (index, look) in scene.looks.iter().enumerate() {
        let range = suite.channel_range(index);
        let up = bilinear_upsample(look.view(), height, width);
        data.slice_mut(s![range, .., ..]).assign(&up);
    }
    SceneTensor::new(data, suite, scene.scene_id.clone(), scene.class_label)
}

/// Align-corners bilinear resize of a `[C, h, w]` array to `[C, out_h, out_w]`.
pub fn bilinear_upsample(input: ArrayView3<f32>, out_h: usize, out_w: usize) -> Array3<f32> {
    let (c, in_h, in_w) = input.dim();
    let ys = interpolation_taps(in_h, out_h);
    let xs = interpolation_taps(in_w, out_w);
    let mut out = Array3::<f32>::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                let top = input[[ch, y0, x0]] * (1.0 - wx) + input[[ch, y0, x1]] * wx;
                let bottom = input[[ch, y1, x0]] * (1.0 - wx) + input[[ch, y1, x1]] * wx;
                out[[ch, oy, ox]] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

fn interpolation_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f32)> {
    (0..n_out)
        .map(|o| {
            if n_in == 1 || n_out == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
            let lo = (pos.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, (pos - lo as f64) as f32)
        })
        .collect()
}

/// Block-mean downsampling by an integer factor.
pub fn area_downsample(input: ArrayView3<f32>, factor: usize) -> Array3<f32> {
    if factor == 1 {
        return input.to_owned();
    }
    let (c, h, w) = input.dim();
    let (oh, ow) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f32;
    Array3::from_shape_fn((c, oh, ow), |(ch, y, x)| {
        input
            .slice(s![ch, y * factor..(y + 1) * factor, x * factor..(x + 1) * factor])
            .sum()
            * norm
    })
}

fn sensor_noise(sensor: &SensorSpec) -> f32 {
    // Coarser pixels integrate more light: lower per-pixel noise.
    0.05 / (sensor.resolution_factor as f32).sqrt()
}

/// Fixed `[bands, MATERIALS]` mixing matrix for the sensor at `index`.
///
/// Each sensor sees the material signatures through its own band gains and a
/// small leak from a neighbouring band. Sensors with more than four bands
/// repeat the signature cycle.
fn band_mixing(index: usize, bands: usize) -> Array2<f32> {
    const GAINS: [[f32; 4]; 3] = [
        [1.05, 0.95, 1.10, 0.90],
        [0.95, 1.00, 0.92, 1.08],
        [1.00, 1.05, 1.00, 1.00],
    ];
    let gains = GAINS[index % GAINS.len()];
    let leak_from = |b: usize| match index % 3 {
        0 => (b + 1) % 4,
        1 => (b + 3) % 4,
        _ => b,
    };
    Array2::from_shape_fn((bands, MATERIALS), |(b, m)| {
        let band = b % 4;
        let own = MATERIAL_SIGNATURES[m][band];
        let leaked = MATERIAL_SIGNATURES[m][leak_from(band)];
        gains[band] * (0.9 * own + 0.1 * leaked)
    })
}

struct Latent {
    /// `[MATERIALS, H, W]`, each pixel sums to one.
    abundance: Array3<f32>,
    /// `[H, W]` in `[0, 1]`.
    shade: Array2<f32>,
}

/// Supersampled coverage painter on the finest grid.
struct Canvas {
    abundance: Array3<f32>,
    shade: Array2<f32>,
    height: usize,
    width: usize,
}

const SUPERSAMPLE: usize = 3;

impl Canvas {
    fn new(height: usize, width: usize, background: [f32; MATERIALS]) -> Self {
        let mut abundance = Array3::<f32>::zeros((MATERIALS, height, width));
        for (m, &v) in background.iter().enumerate() {
            abundance.slice_mut(s![m, .., ..]).fill(v);
        }
        Self {
            abundance,
            shade: Array2::zeros((height, width)),
            height,
            width,
        }
    }

    /// Fraction of pixel `(y, x)` covered by `inside`, evaluated on a
    /// regular sub-pixel lattice.
    fn coverage(y: usize, x: usize, inside: &impl Fn(f32, f32) -> bool) -> f32 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                if inside(py, px) {
                    hits += 1;
                }
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }

    fn paint_material(&mut self, material: usize, inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Self::coverage(y, x, &inside);
                if c == 0.0 {
                    continue;
                }
                for m in 0..MATERIALS {
                    let target = if m == material { 1.0 } else { 0.0 };
                    let a = &mut self.abundance[[m, y, x]];
                    *a = (1.0 - c) * *a + c * target;
                }
            }
        }
    }

    fn paint_shade(&mut self, strength: f32, inside: impl Fn(f32, f32) -> bool) {
        for y in 0..self.height {
            for x in 0..self.width {
                let c = Self::coverage(y, x, &inside);
                let v = &mut self.shade[[y, x]];
                *v = (*v + c * strength).min(1.0);
            }
        }
    }

    /// Adds a smooth random field to the shade, `cell` pixels per lattice step.
    fn shade_noise(&mut self, rng: &mut ChaCha8Rng, cell: f32, strength: f32) {
        let gh = (self.height as f32 / cell).ceil() as usize + 2;
        let gw = (self.width as f32 / cell).ceil() as usize + 2;
        let lattice = Array2::from_shape_fn((gh, gw), |_| rng.random::<f32>());
        for y in 0..self.height {
            for x in 0..self.width {
                let fy = y as f32 / cell;
                let fx = x as f32 / cell;
                let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
                let (ty, tx) = (fy - iy as f32, fx - ix as f32);
                let v = lattice[[iy, ix]] * (1.0 - ty) * (1.0 - tx)
                    + lattice[[iy, ix + 1]] * (1.0 - ty) * tx
                    + lattice[[iy + 1, ix]] * ty * (1.0 - tx)
                    + lattice[[iy + 1, ix + 1]] * ty * tx;
                let s = &mut self.shade[[y, x]];
                *s = (*s + strength * v).min(1.0);
            }
        }
    }

    fn finish(self) -> Latent {
        Latent {
            abundance: self.abundance,
            shade: self.shade,
        }
    }
}

fn mix(pairs: &[(usize, f32)]) -> [f32; MATERIALS] {
    let mut out = [0.0; MATERIALS];
    let total: f32 = pairs.iter().map(|p| p.1).sum();
    for &(m, w) in pairs {
        out[m] += w / total;
    }
    out
}

/// Coordinate along direction `angle` through `(cy, cx)`.
fn along(angle: f32, cy: f32, cx: f32) -> impl Fn(f32, f32) -> (f32, f32) {
    let (sin, cos) = angle.sin_cos();
    move |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (dx * cos + dy * sin, -dx * sin + dy * cos)
    }
}

fn periodic_band(u: f32, period: f32, width: f32) -> bool {
    u.rem_euclid(period) < width
}

fn render_latent(class_label: usize, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Latent {
    let (hf, wf) = (height as f32, width as f32);
    let (cy, cx) = (hf / 2.0, wf / 2.0);
    let angle = rng.random_range(0.0..PI);
    let mut canvas;
    match class_label {
        // forest: closed canopy with many small gaps in shadow
        0 => {
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 0.9), (SOIL, 0.1)]));
            let count = rng.random_range(30..50);
            for _ in 0..count {
                let (py, px) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                let r = rng.random_range(1.0..2.5);
                canvas.paint_shade(0.8, move |y, x| (y - py).powi(2) + (x - px).powi(2) < r * r);
            }
        }
        // cropland: alternating field strips
        1 => {
            let soil_share = rng.random_range(0.3..0.7);
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 1.0)]));
            let period = rng.random_range(8.0..14.0);
            let phase = rng.random_range(0.0..period);
            let frame = along(angle, cy, cx);
            canvas.paint_material(SOIL, move |y, x| {
                periodic_band(frame(y, x).0 + phase, period, period * soil_share)
            });
        }
        // lake: one large water body
        2 => {
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 0.6), (SOIL, 0.4)]));
            let r = rng.random_range(0.3..0.45) * hf;
            let (py, px) = (
                cy + rng.random_range(-0.2..0.2) * hf,
                cx + rng.random_range(-0.2..0.2) * wf,
            );
            let wobble = rng.random_range(0.05..0.2);
            let lobes = rng.random_range(2..5) as f32;
            canvas.paint_material(WATER, move |y, x| {
                let (dy, dx) = (y - py, x - px);
                let theta = dy.atan2(dx);
                let radius = r * (1.0 + wobble * (lobes * theta).sin());
                dy * dy + dx * dx < radius * radius
            });
        }
        // residential: rotated lattice of small houses with cast shadows
        3 => {
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 0.8), (SOIL, 0.2)]));
            let spacing = rng.random_range(8.0..11.0);
            let side = rng.random_range(3.0..4.5);
            let (oy, ox) = (rng.random_range(0.0..spacing), rng.random_range(0.0..spacing));
            let frame = along(angle, cy, cx);
            let house = move |y: f32, x: f32| {
                let (u, v) = frame(y, x);
                periodic_band(u + ox, spacing, side) && periodic_band(v + oy, spacing, side)
            };
            canvas.paint_material(BUILT, house);
            let frame = along(angle, cy, cx);
            canvas.paint_shade(0.7, move |y, x| {
                let (u, v) = frame(y, x);
                periodic_band(u + ox - side, spacing, 1.5) && periodic_band(v + oy, spacing, side)
            });
        }
        // industrial: a few large rectangular roofs on bare ground
        4 => {
            canvas = Canvas::new(height, width, mix(&[(SOIL, 0.8), (BUILT, 0.2)]));
            let count = rng.random_range(2..5);
            for _ in 0..count {
                let (py, px) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                let (rh, rw) = (rng.random_range(5.0..10.0), rng.random_range(5.0..10.0));
                let frame = along(angle, py, px);
                canvas.paint_material(BUILT, move |y, x| {
                    let (u, v) = frame(y, x);
                    u.abs() < rw && v.abs() < rh
                });
            }
        }
        // parking: paved surface with fine painted stall lines
        5 => {
            canvas = Canvas::new(height, width, mix(&[(BUILT, 1.0)]));
            let period = rng.random_range(3.0..4.0);
            let frame = along(angle, cy, cx);
            canvas.paint_shade(0.9, move |y, x| periodic_band(frame(y, x).0, period, 1.0));
        }
        // park: lawn crossed by footpaths with a pond
        6 => {
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 1.0)]));
            let paths = rng.random_range(2..4);
            for _ in 0..paths {
                let a = rng.random_range(0.0..PI);
                let (py, px) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
                let frame = along(a, py, px);
                canvas.paint_material(SOIL, move |y, x| frame(y, x).1.abs() < 0.9);
            }
            let (py, px) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
            let r = rng.random_range(3.0..6.0);
            canvas.paint_material(WATER, move |y, x| (y - py).powi(2) + (x - px).powi(2) < r * r);
        }
        // road junction: two wide roads crossing near the centre
        7 => {
            canvas = Canvas::new(height, width, mix(&[(VEGETATION, 0.5), (SOIL, 0.5)]));
            let second = angle + PI / 2.0 + rng.random_range(-0.35..0.35);
            let (py, px) = (
                cy + rng.random_range(-6.0..6.0),
                cx + rng.random_range(-6.0..6.0),
            );
            let half = rng.random_range(1.5..2.5);
            for a in [angle, second] {
                let frame = along(a, py, px);
                canvas.paint_material(BUILT, move |y, x| frame(y, x).1.abs() < half);
            }
        }
        // quarry: bare terraces in concentric rings
        8 => {
            canvas = Canvas::new(height, width, mix(&[(SOIL, 1.0)]));
            let period = rng.random_range(5.0..7.0);
            let (py, px) = (rng.random_range(0.0..hf), rng.random_range(0.0..wf));
            canvas.paint_shade(0.6, move |y, x| {
                periodic_band(((y - py).powi(2) + (x - px).powi(2)).sqrt(), period, 1.5)
            });
            canvas.shade_noise(rng, 8.0, 0.3);
        }
        // orchard: regular lattice of tree crowns on bare soil
        9 => {
            canvas = Canvas::new(height, width, mix(&[(SOIL, 0.9), (VEGETATION, 0.1)]));
            let spacing = rng.random_range(4.0..6.0);
            let r = rng.random_range(1.2..1.8);
            let frame = along(angle, cy, cx);
            canvas.paint_material(VEGETATION, move |y, x| {
                let (u, v) = frame(y, x);
                let du = u.rem_euclid(spacing) - spacing / 2.0;
                let dv = v.rem_euclid(spacing) - spacing / 2.0;
                du * du + dv * dv < r * r
            });
        }
        // shoreline: straight coast between water and sand with surf
        10 => {
            canvas = Canvas::new(height, width, mix(&[(SOIL, 1.0)]));
            let offset = rng.random_range(-0.25..0.25) * hf;
            let frame = along(angle, cy, cx);
            canvas.paint_material(WATER, move |y, x| frame(y, x).0 < offset);
            let frame = along(angle, cy, cx);
            canvas.paint_shade(0.5, move |y, x| {
                let u = frame(y, x).0 - offset;
                u > 0.0 && u < 2.0
            });
        }
        // dense urban: built blocks separated by shaded streets
        _ => {
            canvas = Canvas::new(height, width, mix(&[(BUILT, 0.9), (VEGETATION, 0.1)]));
            let spacing = rng.random_range(6.0..9.0);
            let street = rng.random_range(1.5..2.5);
            let frame = along(angle, cy, cx);
            canvas.paint_shade(0.8, move |y, x| {
                let (u, v) = frame(y, x);
                periodic_band(u, spacing, street) || periodic_band(v, spacing, street)
            });
        }
    }
    canvas.finish()
}
