//! On-disk dataset layout.
//!
//! A dataset directory holds `manifest.tsv` and one `scenes/<id>.f32` file
//! per scene with every look as little-endian `f32`, in suite order. The
//! manifest starts with `#`-prefixed metadata lines (format version and
//! sensor suite) followed by a tab-separated table with one row per scene.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array3;

use crate::config::ExperimentConfig;
use crate::error::{CsfError, Result};
use crate::scenes::{fuse_and_upsample, generate_dataset, make_default_suite, splitmix64, Scene, SceneTensor, SensorSuite};

const EVAL_SPLIT_STREAM: u64 = 0x6576_616c_7370_6c74;

/// Training and held-out splits for `cfg.scenes`, drawn from disjoint seed
/// streams of the default sensor suite.
pub fn generate_splits(cfg: &ExperimentConfig) -> Result<(SensorSuite, Vec<Scene>, Vec<Scene>)> {
    let suite = make_default_suite();
    let sc = &cfg.scenes;
    let size = (sc.height, sc.width);
    let train = generate_dataset(&suite, sc.num_classes, sc.scenes_per_class, sc.seed, size)?;
    let held_out = generate_dataset(
        &suite,
        sc.num_classes,
        sc.eval_scenes_per_class,
        splitmix64(sc.seed ^ EVAL_SPLIT_STREAM),
        size,
    )?;
    Ok((suite, train, held_out))
}

const FORMAT_LINE: &str = "# csf-dataset 1";
const TABLE_HEADER: &str = "scene_id\tclass_label\tlatent_seed\tshapes";

fn shape_string(scene: &Scene) -> String {
    scene
        .looks
        .iter()
        .map(|l| {
            let s = l.shape();
            format!("{}x{}x{}", s[0], s[1], s[2])
        })
        .collect::<Vec<_>>()
        .join(";")
}

/// Writes `scenes` under `dir`, replacing any previous manifest. Output
/// bytes depend only on the scenes and the suite.
pub fn write_dataset(dir: &Path, suite: &SensorSuite, scenes: &[Scene]) -> Result<()> {
    let scene_dir = dir.join("scenes");
    std::fs::create_dir_all(&scene_dir).map_err(|e| CsfError::io(&scene_dir, e))?;
    let mut manifest = format!("{FORMAT_LINE}\n# suite {}\n{TABLE_HEADER}\n", suite.describe());
    for scene in scenes {
        scene.base_extent(suite)?;
        if scene.scene_id.is_empty() || scene.scene_id.contains(['\t', '/', '\\', '\n']) {
            return Err(CsfError::Dataset(format!("unusable scene id `{}`", scene.scene_id)));
        }
        let _ = writeln!(
            manifest,
            "{}\t{}\t{}\t{}",
            scene.scene_id,
            scene.class_label,
            scene.latent_seed,
            shape_string(scene)
        );
        let mut bytes = Vec::new();
        for look in &scene.looks {
            for v in look.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let path = scene_dir.join(format!("{}.f32", scene.scene_id));
        std::fs::write(&path, bytes).map_err(|e| CsfError::io(&path, e))?;
    }
    let path = dir.join("manifest.tsv");
    std::fs::write(&path, manifest).map_err(|e| CsfError::io(&path, e))
}

fn parse_shape(text: &str) -> Option<[usize; 3]> {
    let v: Vec<usize> = text.split('x').map(|p| p.parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

/// Reads a dataset written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<(SensorSuite, Vec<Scene>)> {
    let path = dir.join("manifest.tsv");
    let text = std::fs::read_to_string(&path).map_err(|e| CsfError::io(&path, e))?;
    let bad = |line: usize, msg: &str| CsfError::Dataset(format!("{}:{}: {msg}", path.display(), line + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, FORMAT_LINE)) => {}
        _ => return Err(bad(0, "missing format line")),
    }
    let suite = match lines.next() {
        Some((i, l)) => SensorSuite::parse(l.strip_prefix("# suite ").ok_or_else(|| bad(i, "missing suite line"))?)?,
        None => return Err(bad(1, "missing suite line")),
    };
    match lines.next() {
        Some((_, TABLE_HEADER)) => {}
        other => return Err(bad(other.map_or(2, |(i, _)| i), "missing table header")),
    }
    let mut scenes = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(i, "expected 4 tab-separated columns"));
        }
        let class_label: usize = cols[1].parse().map_err(|_| bad(i, "bad class label"))?;
        let latent_seed: u64 = cols[2].parse().map_err(|_| bad(i, "bad seed"))?;
        let shapes: Vec<[usize; 3]> = cols[3]
            .split(';')
            .map(parse_shape)
            .collect::<Option<_>>()
            .ok_or_else(|| bad(i, "bad shape list"))?;
        let bin = dir.join("scenes").join(format!("{}.f32", cols[0]));
        let bytes = std::fs::read(&bin).map_err(|e| CsfError::io(&bin, e))?;
        let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        if bytes.len() != expected * 4 {
            return Err(CsfError::Dataset(format!(
                "{}: {} bytes, expected {}",
                bin.display(),
                bytes.len(),
                expected * 4
            )));
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let looks = shapes
            .iter()
            .map(|&[c, h, w]| Array3::from_shape_vec((c, h, w), values.by_ref().take(c * h * w).collect()).expect("sized"))
            .collect();
        let scene = Scene {
            looks,
            class_label,
            scene_id: cols[0].to_string(),
            latent_seed,
        };
        scene.base_extent(&suite)?;
        scenes.push(scene);
    }
    if scenes.is_empty() {
        return Err(CsfError::Dataset(format!("{} lists no scenes", path.display())));
    }
    Ok((suite, scenes))
}

/// Reads a dataset and fuses every scene onto its finest grid.
pub fn load_fused(dir: &Path) -> Result<(SensorSuite, Vec<SceneTensor>)> {
    let (suite, scenes) = read_dataset(dir)?;
    let fused = scenes
        .iter()
        .map(|s| fuse_and_upsample(s, &suite))
        .collect::<Result<Vec<_>>>()?;
    Ok((suite, fused))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_byte_identical_rewrite() {
        let suite = make_default_suite();
        let scenes = generate_dataset(&suite, 3, 2, 11, (12, 12)).unwrap();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        write_dataset(a.path(), &suite, &scenes).unwrap();
        write_dataset(b.path(), &suite, &generate_dataset(&suite, 3, 2, 11, (12, 12)).unwrap()).unwrap();
        for rel in ["manifest.tsv", "scenes/scene-000004.f32"] {
            assert_eq!(std::fs::read(a.path().join(rel)).unwrap(), std::fs::read(b.path().join(rel)).unwrap());
        }
        let (suite_back, back) = read_dataset(a.path()).unwrap();
        assert_eq!(suite_back, suite);
        assert_eq!(back, scenes);
        let (_, fused) = load_fused(a.path()).unwrap();
        assert_eq!(fused.len(), 6);
        assert_eq!(fused[0].data.dim(), (12, 12, 12));
    }

    #[test]
    fn splits_are_disjoint_and_sized() {
        let mut cfg = ExperimentConfig::default();
        cfg.scenes.num_classes = 3;
        cfg.scenes.scenes_per_class = 2;
        cfg.scenes.eval_scenes_per_class = 1;
        cfg.scenes.height = 12;
        cfg.scenes.width = 12;
        let (_, train, held_out) = generate_splits(&cfg).unwrap();
        assert_eq!((train.len(), held_out.len()), (6, 3));
        assert!(held_out.iter().all(|h| train.iter().all(|t| t.latent_seed != h.latent_seed)));
    }

    #[test]
    fn damaged_datasets_are_rejected() {
        let suite = make_default_suite();
        let scenes = generate_dataset(&suite, 2, 1, 1, (12, 12)).unwrap();
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(read_dataset(d.path()), Err(CsfError::Io { .. })));
        write_dataset(d.path(), &suite, &scenes).unwrap();
        std::fs::write(d.path().join("scenes/scene-000001.f32"), [0u8; 12]).unwrap();
        assert!(matches!(read_dataset(d.path()), Err(CsfError::Dataset(_))));
        std::fs::write(d.path().join("manifest.tsv"), "garbage\n").unwrap();
        assert!(matches!(read_dataset(d.path()), Err(CsfError::Dataset(_))));
    }
}
