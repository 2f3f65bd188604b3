//! InfoNCE over in-batch negatives with a bare dot-product score.
//!
//! For two representation batches `z1, z2` of shape `[B, D]` the similarity
//! matrix is `S = z1 · z2ᵀ`, so `S[i][j]` scores view-1 element `i` against
//! view-2 element `j`. The layer loss is
//!
//! ```text
//! forward  = -(1/B) Σ_b log_softmax(S[b, :])[b]
//! backward = -(1/B) Σ_b log_softmax(S[:, b])[b]
//! L        = forward + backward
//! ```
//!
//! and the multi-layer objective is `Σ_L λ_L · L_L`.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{CsfError, Result};

/// Per-layer contrastive weights keyed by stack index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_by_layer: BTreeMap<usize, f64>,
}

impl LossWeights {
    pub fn new(lambda_by_layer: BTreeMap<usize, f64>) -> Result<Self> {
        if lambda_by_layer.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(CsfError::InvalidArgument(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        if !lambda_by_layer.values().any(|&w| w > 0.0) {
            return Err(CsfError::InvalidArgument("at least one loss weight must be positive".into()));
        }
        Ok(Self { lambda_by_layer })
    }

    /// Weight 1 on the penultimate tapped layer and 2 on the last one.
    pub fn default_for(layers: &[usize]) -> Result<Self> {
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        let map = match sorted.as_slice() {
            [] => BTreeMap::new(),
            [only] => [(*only, 1.0)].into(),
            [.., penultimate, last] => [(*penultimate, 1.0), (*last, 2.0)].into(),
        };
        Self::new(map)
    }

    pub fn sum(&self) -> f64 {
        self.lambda_by_layer.values().sum()
    }
}

/// Representations tapped at several encoder layers, `[B, D_L]` each.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRepresentation {
    pub layers: BTreeMap<usize, Array2<f64>>,
}

impl LayerRepresentation {
    pub fn batch_size(&self) -> usize {
        self.layers.values().next().map_or(0, |z| z.nrows())
    }
}

/// Forward and backward halves of one layer's loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerLoss {
    pub forward: f64,
    pub backward: f64,
}

impl LayerLoss {
    pub fn total(&self) -> f64 {
        self.forward + self.backward
    }
}

fn check_pair(z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<()> {
    if z1.dim() != z2.dim() {
        return Err(CsfError::Shape(format!(
            "representation batches differ: {:?} vs {:?}",
            z1.dim(),
            z2.dim()
        )));
    }
    if z1.nrows() == 0 {
        return Err(CsfError::Shape("empty representation batch".into()));
    }
    Ok(())
}

fn check_finite(z: ArrayView2<f64>, which: &str) -> Result<()> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(CsfError::NonFinite(format!("{which} contains NaN or inf")));
    }
    Ok(())
}

/// `S[i][j] = z1[i] · z2[j]`.
pub fn similarity_matrix(z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_pair(z1, z2)?;
    Ok(z1.dot(&z2.t()))
}

/// Row-wise softmax with max subtraction; also returns `log Σ exp` per row.
fn softmax_rows(s: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut probs = Array2::<f64>::zeros(s.raw_dim());
    let mut lse = Vec::with_capacity(s.nrows());
    for (row, mut out) in s.rows().into_iter().zip(probs.rows_mut()) {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            total += *o;
        }
        out.mapv_inplace(|v| v / total);
        lse.push(m + total.ln());
    }
    (probs, lse)
}

fn mean_diagonal_nll(s: ArrayView2<f64>, lse: &[f64]) -> f64 {
    let b = s.nrows();
    (0..b).map(|i| lse[i] - s[[i, i]]).sum::<f64>() / b as f64
}

/// Symmetric InfoNCE loss of one layer.
pub fn layer_infonce_loss(z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<f64> {
    Ok(layer_infonce_parts(z1, z2)?.total())
}

/// Forward/backward decomposition of [`layer_infonce_loss`].
pub fn layer_infonce_parts(z1: ArrayView2<f64>, z2: ArrayView2<f64>) -> Result<LayerLoss> {
    check_finite(z1, "view-1 representation")?;
    check_finite(z2, "view-2 representation")?;
    let s = similarity_matrix(z1, z2)?;
    let (_, lse_rows) = softmax_rows(s.view());
    let (_, lse_cols) = softmax_rows(s.t());
    Ok(LayerLoss {
        forward: mean_diagonal_nll(s.view(), &lse_rows),
        backward: mean_diagonal_nll(s.t(), &lse_cols),
    })
}

/// Layer loss with its analytic gradients with respect to `z1` and `z2`.
///
/// With `P` the row-softmax and `Q` the column-softmax of `S`,
/// `∂L/∂S = (P + Q - 2I) / B`, hence `∂L/∂z1 = ∂L/∂S · z2` and
/// `∂L/∂z2 = (∂L/∂S)ᵀ · z1`.
pub fn layer_infonce_grad(
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
) -> Result<(LayerLoss, Array2<f64>, Array2<f64>)> {
    check_finite(z1, "view-1 representation")?;
    check_finite(z2, "view-2 representation")?;
    let s = similarity_matrix(z1, z2)?;
    let b = s.nrows();
    let (p_rows, lse_rows) = softmax_rows(s.view());
    let (q_cols_t, lse_cols) = softmax_rows(s.t());
    let loss = LayerLoss {
        forward: mean_diagonal_nll(s.view(), &lse_rows),
        backward: mean_diagonal_nll(s.t(), &lse_cols),
    };
    let mut ds = p_rows + &q_cols_t.t();
    for i in 0..b {
        ds[[i, i]] -= 2.0;
    }
    ds.mapv_inplace(|v| v / b as f64);
    let g1 = ds.dot(&z2);
    let g2 = ds.t().dot(&z1);
    Ok((loss, g1, g2))
}

fn check_layers(
    reps1: &LayerRepresentation,
    reps2: &LayerRepresentation,
    w: &LossWeights,
) -> Result<()> {
    if reps1.layers.keys().ne(reps2.layers.keys()) {
        return Err(CsfError::Shape(format!(
            "views tapped at different layers: {:?} vs {:?}",
            reps1.layers.keys().collect::<Vec<_>>(),
            reps2.layers.keys().collect::<Vec<_>>()
        )));
    }
    if let Some(layer) = w
        .lambda_by_layer
        .keys()
        .find(|l| !reps1.layers.contains_key(l))
    {
        return Err(CsfError::InvalidArgument(format!(
            "loss weight given for layer {layer}, which is not tapped"
        )));
    }
    Ok(())
}

/// `Σ_L λ_L · L_L` over the layers with positive weight.
pub fn total_loss(
    reps1: &LayerRepresentation,
    reps2: &LayerRepresentation,
    w: &LossWeights,
) -> Result<f64> {
    check_layers(reps1, reps2, w)?;
    let mut total = 0.0;
    for (layer, &lambda) in &w.lambda_by_layer {
        if lambda > 0.0 {
            total += lambda * layer_infonce_loss(reps1.layers[layer].view(), reps2.layers[layer].view())?;
        }
    }
    Ok(total)
}

/// Weighted loss, unweighted per-layer losses, and weighted gradients for
/// each layer with positive weight.
pub struct TotalLossGrad {
    pub total: f64,
    pub per_layer: BTreeMap<usize, LayerLoss>,
    pub grad1: BTreeMap<usize, Array2<f64>>,
    pub grad2: BTreeMap<usize, Array2<f64>>,
}

pub fn total_loss_grad(
    reps1: &LayerRepresentation,
    reps2: &LayerRepresentation,
    w: &LossWeights,
) -> Result<TotalLossGrad> {
    check_layers(reps1, reps2, w)?;
    let mut out = TotalLossGrad {
        total: 0.0,
        per_layer: BTreeMap::new(),
        grad1: BTreeMap::new(),
        grad2: BTreeMap::new(),
    };
    for (layer, &lambda) in &w.lambda_by_layer {
        if lambda <= 0.0 {
            continue;
        }
        let (loss, g1, g2) = layer_infonce_grad(reps1.layers[layer].view(), reps2.layers[layer].view())?;
        out.total += lambda * loss.total();
        out.per_layer.insert(*layer, loss);
        out.grad1.insert(*layer, g1 * lambda);
        out.grad2.insert(*layer, g2 * lambda);
    }
    Ok(out)
}

/// Batch-mean of rows, used for quick diagnostics of representation scale.
pub fn mean_norm(z: ArrayView2<f64>) -> f64 {
    z.map_axis(Axis(1), |r| r.dot(&r).sqrt()).mean().unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    fn eye(n: usize) -> Array2<f64> {
        Array2::eye(n)
    }

    #[test]
    fn similarity_of_identity_is_identity() {
        let s = similarity_matrix(eye(2).view(), eye(2).view()).unwrap();
        assert_eq!(s, eye(2));
        let z1 = eye(3) * 2.5;
        let s = similarity_matrix(z1.view(), eye(3).view()).unwrap();
        assert_eq!(s, eye(3) * 2.5);
    }

    #[test]
    fn similarity_convention_rows_are_view_one() {
        let z1 = array![[1.0, 0.0], [0.0, 0.0]];
        let z2 = array![[0.0, 0.0], [1.0, 0.0]];
        let s = similarity_matrix(z1.view(), z2.view()).unwrap();
        assert_eq!(s[[0, 1]], 1.0);
        assert_eq!(s[[1, 0]], 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let z1 = Array2::<f64>::zeros((2, 3));
        let z2 = Array2::<f64>::zeros((2, 4));
        assert!(similarity_matrix(z1.view(), z2.view()).is_err());
        assert!(layer_infonce_loss(z1.view(), z2.view()).is_err());
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut z = eye(2);
        z[[0, 1]] = f64::NAN;
        assert!(layer_infonce_loss(z.view(), eye(2).view()).is_err());
    }

    #[test]
    fn identity_closed_form() {
        let parts = layer_infonce_parts(eye(2).view(), eye(2).view()).unwrap();
        let half = (1.0 + (-1.0f64).exp()).ln();
        assert!((parts.forward - half).abs() < 1e-12);
        assert!((parts.backward - half).abs() < 1e-12);
        assert!((parts.total() - 0.626_523_2).abs() < 1e-6);
    }

    #[test]
    fn identical_rows_give_two_log_b() {
        let z = Array2::from_elem((4, 3), 0.7);
        let l = layer_infonce_loss(z.view(), z.view()).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn dominant_diagonal_approaches_zero() {
        let z = eye(2) * 10.0;
        let l = layer_infonce_loss(z.view(), z.view()).unwrap();
        let expected = 2.0 * (1.0 + (-100.0f64).exp()).ln();
        assert!((l - expected).abs() < 1e-12);
        let z = eye(2) * 10f64.sqrt();
        let l = layer_infonce_loss(z.view(), z.view()).unwrap();
        assert!((l - 2.0 * (1.0 + (-10.0f64).exp()).ln()).abs() < 1e-12);
        assert!((l - 9.08e-5).abs() < 1e-6);
    }

    #[test]
    fn single_element_batch_is_zero() {
        let z = array![[1.0, 2.0]];
        assert_eq!(layer_infonce_loss(z.view(), z.view()).unwrap(), 0.0);
    }

    #[test]
    fn large_scores_stay_finite() {
        let z1 = array![[1e3, 0.0], [0.0, 1e3]];
        let z2 = array![[0.0, 1e3], [1e3, 0.0]];
        let l = layer_infonce_loss(z1.view(), z2.view()).unwrap();
        assert!((l - 2e6).abs() < 1e-3);
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default_for(&[3, 2]).unwrap();
        assert_eq!(w.lambda_by_layer, [(2, 1.0), (3, 2.0)].into());
        assert_eq!(w.sum(), 3.0);
        assert!(LossWeights::new([(0, 0.0)].into()).is_err());
        assert!(LossWeights::new([(0, -1.0), (1, 2.0)].into()).is_err());
    }

    fn reps(layers: &[(usize, Array2<f64>)]) -> LayerRepresentation {
        LayerRepresentation {
            layers: layers.iter().cloned().collect(),
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let a1 = array![[1.0, 0.2], [0.1, 0.9], [0.3, 0.3]];
        let a2 = array![[0.8, 0.1], [0.0, 1.1], [0.5, 0.2]];
        let b1 = array![[0.5], [0.1], [-0.4]];
        let b2 = array![[0.4], [0.3], [-0.2]];
        let r1 = reps(&[(2, a1.clone()), (3, b1.clone())]);
        let r2 = reps(&[(2, a2.clone()), (3, b2.clone())]);
        let la = layer_infonce_loss(a1.view(), a2.view()).unwrap();
        let lb = layer_infonce_loss(b1.view(), b2.view()).unwrap();
        let w = LossWeights::new([(2, 1.0), (3, 2.0)].into()).unwrap();
        assert!((total_loss(&r1, &r2, &w).unwrap() - (la + 2.0 * lb)).abs() < 1e-12);

        let single = LossWeights::new([(2, 1.0)].into()).unwrap();
        assert!((total_loss(&r1, &r2, &single).unwrap() - la).abs() < 1e-12);

        // zero-weighted layers do not influence the value
        let zeroed = LossWeights::new([(2, 1.0), (3, 0.0)].into()).unwrap();
        let r1b = reps(&[(2, a1), (3, array![[9.0], [-9.0], [4.0]])]);
        assert_eq!(
            total_loss(&r1, &r2, &zeroed).unwrap(),
            total_loss(&r1b, &r2, &zeroed).unwrap()
        );

        let untapped = LossWeights::new([(5, 1.0)].into()).unwrap();
        assert!(total_loss(&r1, &r2, &untapped).is_err());
        let other = reps(&[(2, array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])]);
        assert!(total_loss(&r1, &other, &single).is_err());
    }

    #[test]
    fn weighted_gradients_scale() {
        let z1 = array![[0.3, -0.1], [0.2, 0.5]];
        let z2 = array![[0.1, 0.4], [-0.3, 0.2]];
        let r1 = reps(&[(0, z1.clone())]);
        let r2 = reps(&[(0, z2.clone())]);
        let w = LossWeights::new([(0, 2.0)].into()).unwrap();
        let out = total_loss_grad(&r1, &r2, &w).unwrap();
        let (_, g1, _) = layer_infonce_grad(z1.view(), z2.view()).unwrap();
        assert_eq!(out.grad1[&0], g1 * 2.0);
        assert!((out.total - total_loss(&r1, &r2, &w).unwrap()).abs() < 1e-12);
    }

    fn matrix(b: usize, d: usize) -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
        (
            proptest::collection::vec(-2.0f64..2.0, b * d),
            proptest::collection::vec(-2.0f64..2.0, b * d),
        )
            .prop_map(move |(a, c)| {
                (
                    Array2::from_shape_vec((b, d), a).unwrap(),
                    Array2::from_shape_vec((b, d), c).unwrap(),
                )
            })
    }

    fn batch() -> impl Strategy<Value = (Array2<f64>, Array2<f64>)> {
        (1usize..8, 1usize..12).prop_flat_map(|(b, d)| matrix(b, d))
    }

    proptest! {
        #[test]
        fn symmetric_under_view_swap((z1, z2) in batch()) {
            let a = layer_infonce_loss(z1.view(), z2.view()).unwrap();
            let b = layer_infonce_loss(z2.view(), z1.view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn convention_flip_preserves_total((z1, z2) in batch()) {
            let s = similarity_matrix(z1.view(), z2.view()).unwrap();
            let st = s.t().to_owned();
            let (_, r) = softmax_rows(s.view());
            let (_, c) = softmax_rows(st.view());
            let a = mean_diagonal_nll(s.view(), &r) + mean_diagonal_nll(st.view(), &c);
            let (_, r2) = softmax_rows(st.view());
            let (_, c2) = softmax_rows(s.view());
            let b = mean_diagonal_nll(st.view(), &r2) + mean_diagonal_nll(s.view(), &c2);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariant((z1, z2) in batch(), seed in any::<u64>()) {
            let b = z1.nrows();
            let mut perm: Vec<usize> = (0..b).collect();
            let mut state = seed;
            for i in (1..b).rev() {
                state = crate::scenes::splitmix64(state);
                perm.swap(i, (state % (i as u64 + 1)) as usize);
            }
            let p1 = z1.select(Axis(0), &perm);
            let p2 = z2.select(Axis(0), &perm);
            let a = layer_infonce_loss(z1.view(), z2.view()).unwrap();
            let c = layer_infonce_loss(p1.view(), p2.view()).unwrap();
            prop_assert!((a - c).abs() < 1e-9);
        }

        #[test]
        fn non_negative((z1, z2) in batch()) {
            prop_assert!(layer_infonce_loss(z1.view(), z2.view()).unwrap() >= 0.0);
        }

        #[test]
        fn off_diagonal_increase_never_helps((z1, z2) in (2usize..6, 1usize..6).prop_flat_map(|(b, d)| matrix(b, d)), bump in 0.01f64..3.0) {
            // raise S[0][1] alone by giving both rows a shared private axis
            let d = z1.ncols();
            let extend = |z: &Array2<f64>, row: usize, v: f64| {
                let mut out = Array2::<f64>::zeros((z.nrows(), d + 1));
                out.slice_mut(ndarray::s![.., ..d]).assign(z);
                out[[row, d]] = v;
                out
            };
            let base = layer_infonce_loss(z1.view(), z2.view()).unwrap();
            let bumped = layer_infonce_loss(extend(&z1, 0, bump.sqrt()).view(), extend(&z2, 1, bump.sqrt()).view()).unwrap();
            prop_assert!(bumped >= base - 1e-12);
        }
    }
}
