//! Evaluation of a frozen encoder: embeddings on fixed channel subsets,
//! PCA, neighbour metrics, channel-subset sweeps, maximal-activation
//! retrieval across sensors, and plots.

pub mod metrics;
pub mod pca;
pub mod plot;
pub mod tsne;

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{stack_batch, Encoder};
use crate::error::{CsfError, Result};
use crate::scenes::{SceneTensor, SensorSuite};
use crate::views::inference_view;
pub use metrics::{knn_loocv_accuracy, neighbor_fraction, neighbor_fraction_curve};
pub use pca::PcaModel;

const EMBED_BATCH: usize = 64;

/// One representation per scene for a fixed channel subset.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    /// `[N, D]`.
    pub vectors: Array2<f64>,
    pub labels: Vec<usize>,
    pub scene_ids: Vec<String>,
    pub channel_subset: BTreeSet<usize>,
}

impl EmbeddingTable {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Pooled last-stack representation of every scene seen through
/// `channel_subset`, with the dropout scaling used at the end of training.
pub fn embed_dataset(
    encoder: &Encoder,
    scenes: &[SceneTensor],
    channel_subset: &BTreeSet<usize>,
    train_p: f64,
) -> Result<EmbeddingTable> {
    if channel_subset.is_empty() {
        return Err(CsfError::InvalidArgument("channel subset is empty".into()));
    }
    if scenes.is_empty() {
        return Err(CsfError::Dataset("no scenes to embed".into()));
    }
    let mut rows: Vec<f64> = Vec::new();
    let mut dim = 0;
    for chunk in scenes.chunks(EMBED_BATCH) {
        let views = chunk
            .iter()
            .map(|s| inference_view(s, channel_subset, train_p).map(|v| v.data))
            .collect::<Result<Vec<_>>>()?;
        let batch = stack_batch(views.iter().map(|v| v.view()))?;
        let pooled = encoder.pooled_representation(batch.view())?;
        dim = pooled.ncols();
        rows.extend(pooled.iter());
    }
    let vectors = Array2::from_shape_vec((scenes.len(), dim), rows).expect("rows sized");
    if vectors.iter().any(|v| !v.is_finite()) {
        return Err(CsfError::NonFinite("embedding".into()));
    }
    Ok(EmbeddingTable {
        vectors,
        labels: scenes.iter().map(|s| s.class_label).collect(),
        scene_ids: scenes.iter().map(|s| s.scene_id.clone()).collect(),
        channel_subset: channel_subset.clone(),
    })
}

/// Projects a table onto its top `n_components` principal directions.
pub fn pca_reduce(table: &EmbeddingTable, n_components: usize) -> Result<EmbeddingTable> {
    let pca = PcaModel::fit(table.vectors.view(), n_components)?;
    Ok(EmbeddingTable {
        vectors: pca.transform(table.vectors.view())?,
        ..table.clone()
    })
}

/// Component count actually used: the request capped at `min(N, D)`.
pub fn capped_components(table: &EmbeddingTable, requested: usize) -> usize {
    requested.min(table.vectors.nrows()).min(table.vectors.ncols()).max(1)
}

/// The default ladder: red of the coarsest sensor, then red+green, RGB,
/// the whole coarsest sensor, then whole sensors from coarse to fine.
pub fn default_subset_ladder(suite: &SensorSuite) -> Vec<BTreeSet<usize>> {
    let mut order: Vec<usize> = (0..suite.sensors().len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(suite.sensors()[i].resolution_factor));
    let first = suite.channel_range(order[0]);
    let mut ladder: Vec<BTreeSet<usize>> = (1..first.len().min(4))
        .map(|n| first.clone().take(n).collect())
        .collect();
    let mut acc = BTreeSet::new();
    for &s in &order {
        acc.extend(suite.channel_range(s));
        ladder.push(acc.clone());
    }
    ladder
}

pub fn describe_subset(subset: &BTreeSet<usize>) -> String {
    let v: Vec<usize> = subset.iter().copied().collect();
    let contiguous = v.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous && v.len() > 2 {
        format!("{}-{}", v[0], v[v.len() - 1])
    } else {
        v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join("+")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub subset: BTreeSet<usize>,
    pub neighbor_fraction: f64,
    pub knn_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub k: usize,
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("subset\tnum_channels\tneighbor_fraction_k{0}\tknn_accuracy_k{0}\n", self.k);
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{:.6}\t{:.6}",
                describe_subset(&r.subset),
                r.subset.len(),
                r.neighbor_fraction,
                r.knn_accuracy
            );
        }
        s
    }
}

/// Per-row settings shared by [`channel_sweep`] and the k-curves.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub k: usize,
    pub pca_components: usize,
    pub train_p: f64,
}

/// embed, reduce, score: one row per subset.
pub fn channel_sweep(
    encoder: &Encoder,
    scenes: &[SceneTensor],
    subsets: &[BTreeSet<usize>],
    settings: &EvalSettings,
) -> Result<SweepResult> {
    Ok(channel_sweep_with_curves(encoder, scenes, subsets, settings, 0)?.0)
}

/// [`channel_sweep`] plus, when `k_max > 0`, the neighbour-fraction curve
/// over `k = 1..=k_max` (capped at `N - 1`) for every subset.
pub fn channel_sweep_with_curves(
    encoder: &Encoder,
    scenes: &[SceneTensor],
    subsets: &[BTreeSet<usize>],
    settings: &EvalSettings,
    k_max: usize,
) -> Result<(SweepResult, Vec<KCurve>)> {
    if subsets.is_empty() {
        return Err(CsfError::InvalidArgument("no channel subsets given".into()));
    }
    let mut rows = Vec::with_capacity(subsets.len());
    let mut curves = Vec::new();
    for subset in subsets {
        let table = embed_dataset(encoder, scenes, subset, settings.train_p)?;
        let reduced = pca_reduce(&table, capped_components(&table, settings.pca_components))?;
        let depth = settings.k.max(k_max.min(reduced.len().saturating_sub(1)));
        let lists = metrics::neighbor_lists(reduced.vectors.view(), depth)?;
        rows.push(SweepRow {
            subset: subset.clone(),
            neighbor_fraction: metrics::neighbor_fraction_from_lists(&lists, &reduced.labels, settings.k),
            knn_accuracy: metrics::knn_accuracy_from_lists(&lists, &reduced.labels, settings.k),
        });
        if k_max > 0 {
            curves.push(KCurve {
                name: format!("channels {}", describe_subset(subset)),
                points: (1..=depth.min(k_max))
                    .map(|k| (k, metrics::neighbor_fraction_from_lists(&lists, &reduced.labels, k)))
                    .collect(),
            });
        }
    }
    Ok((SweepResult { k: settings.k, rows }, curves))
}

/// Top `top_n` scene ids per subset by projection onto principal direction
/// `component` of `pca` (fitted on full-channel embeddings).
pub fn maximal_activations(
    encoder: &Encoder,
    scenes: &[SceneTensor],
    pca: &PcaModel,
    component: usize,
    per_sensor_subsets: &[BTreeSet<usize>],
    top_n: usize,
    train_p: f64,
) -> Result<Vec<Vec<String>>> {
    if component >= pca.n_components() {
        return Err(CsfError::InvalidArgument(format!(
            "component {component} not fitted (PCA has {})",
            pca.n_components()
        )));
    }
    if top_n == 0 || top_n > scenes.len() {
        return Err(CsfError::InvalidArgument(format!(
            "top_n = {top_n} outside [1, {}]",
            scenes.len()
        )));
    }
    per_sensor_subsets
        .iter()
        .map(|subset| {
            let table = embed_dataset(encoder, scenes, subset, train_p)?;
            let proj = pca.transform(table.vectors.view())?;
            Ok(top_indices(proj.column(component).iter().copied(), top_n)
                .into_iter()
                .map(|i| table.scene_ids[i].clone())
                .collect())
        })
        .collect()
}

fn top_indices(values: impl Iterator<Item = f64>, top_n: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = values.enumerate().map(|(i, v)| (v, i)).collect();
    idx.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    idx.into_iter().take(top_n).map(|(_, i)| i).collect()
}

/// Mean pairwise overlap `|A ∩ B|` over all pairs of lists.
pub fn mean_pairwise_overlap(lists: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..lists.len() {
        for j in (i + 1)..lists.len() {
            total += lists[i].iter().filter(|id| lists[j].contains(id)).count() as f64;
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlapTest {
    pub observed: f64,
    pub null_mean: f64,
    /// `(1 + #{null >= observed}) / (1 + permutations)`.
    pub p_value: f64,
}

/// Compares the observed overlap with lists drawn as independent uniform
/// random `top_n` subsets of the `n_scenes` candidates.
pub fn overlap_permutation_test(
    lists: &[Vec<String>],
    n_scenes: usize,
    permutations: usize,
    seed: u64,
) -> Result<OverlapTest> {
    if lists.len() < 2 || permutations == 0 {
        return Err(CsfError::InvalidArgument("need at least two lists and one permutation".into()));
    }
    let observed = mean_pairwise_overlap(lists);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    let mut null_total = 0.0;
    for _ in 0..permutations {
        let fake: Vec<Vec<String>> = lists
            .iter()
            .map(|l| sample(&mut rng, n_scenes, l.len()).into_iter().map(|i| i.to_string()).collect())
            .collect();
        let v = mean_pairwise_overlap(&fake);
        null_total += v;
        if v >= observed {
            exceed += 1;
        }
    }
    Ok(OverlapTest {
        observed,
        null_mean: null_total / permutations as f64,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
    })
}

/// One curve for the metric-versus-k plot.
#[derive(Debug, Clone)]
pub struct KCurve {
    pub name: String,
    pub points: Vec<(usize, f64)>,
}

impl KCurve {
    pub fn compute(name: impl Into<String>, reduced: &EmbeddingTable, k_max: usize) -> Result<Self> {
        let k_max = k_max.min(reduced.len() - 1);
        Ok(Self {
            name: name.into(),
            points: neighbor_fraction_curve(reduced.vectors.view(), &reduced.labels, k_max)?,
        })
    }
}

pub const EMBEDDING_PLOT: &str = "embedding_tsne.svg";
pub const SWEEP_PLOT: &str = "sweep.svg";
pub const K_PLOT: &str = "neighbor_fraction_vs_k.svg";

/// Writes the embedding scatter, the channel sweep plot and the k-curve
/// plot into `out_dir` (created if missing). Returns the written paths.
pub fn plot_artifacts(
    table: &EmbeddingTable,
    plot_components: usize,
    sweep: &SweepResult,
    k_curves: &[KCurve],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| CsfError::io(out_dir, e))?;
    let mut written = Vec::new();

    let reduced = pca_reduce(table, capped_components(table, plot_components))?;
    let xy = tsne::tsne(
        reduced.vectors.view(),
        &tsne::TsneConfig {
            seed,
            ..Default::default()
        },
    )?;
    let points: Vec<(f64, f64)> = xy.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let path = out_dir.join(EMBEDDING_PLOT);
    plot::scatter_svg(&path, "PCA + t-SNE of representations", &points, &table.labels)?;
    written.push(path);

    let labels: Vec<String> = sweep.rows.iter().map(|r| r.subset.len().to_string()).collect();
    let path = out_dir.join(SWEEP_PLOT);
    plot::line_svg(
        &path,
        &format!("Clustering quality vs. input channels (k = {})", sweep.k),
        &labels,
        "metric",
        &[
            plot::LineSeries {
                name: "neighbor fraction".into(),
                values: sweep.rows.iter().map(|r| r.neighbor_fraction).collect(),
            },
            plot::LineSeries {
                name: "k-NN accuracy".into(),
                values: sweep.rows.iter().map(|r| r.knn_accuracy).collect(),
            },
        ],
    )?;
    written.push(path);

    if let Some(longest) = k_curves.iter().map(|c| c.points.len()).max() {
        let labels: Vec<String> = (1..=longest).map(|k| k.to_string()).collect();
        let series: Vec<plot::LineSeries> = k_curves
            .iter()
            .map(|c| plot::LineSeries {
                name: c.name.clone(),
                values: c.points.iter().map(|p| p.1).collect(),
            })
            .collect();
        let path = out_dir.join(K_PLOT);
        plot::line_svg(&path, "Same-class neighbour fraction vs. k", &labels, "fraction", &series)?;
        written.push(path);
    }
    Ok(written)
}
