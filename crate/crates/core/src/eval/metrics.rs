//! Nearest-neighbour clustering metrics under Euclidean distance.
//!
//! Neighbours of a point exclude the point itself and are ordered by
//! distance, then by index, so results never depend on iteration order.

use ndarray::ArrayView2;

use crate::error::{CsfError, Result};

/// Sorted `(distance, index)` lists of the `k` nearest other points.
pub fn neighbor_lists(x: ArrayView2<f64>, k: usize) -> Result<Vec<Vec<(f64, usize)>>> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(CsfError::InvalidArgument(format!("k = {k} must lie in [1, N) with N = {n}")));
    }
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut out = Vec::with_capacity(n);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        cand.clear();
        for j in 0..n {
            if i != j {
                let d2: f64 = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                cand.push((d2, j));
            }
        }
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        cand.select_nth_unstable_by(k - 1, order);
        let mut nearest: Vec<(f64, usize)> = cand[..k].iter().map(|&(d2, j)| (d2.sqrt(), j)).collect();
        nearest.sort_by(order);
        out.push(nearest);
    }
    Ok(out)
}

fn check_labels(x: ArrayView2<f64>, labels: &[usize]) -> Result<()> {
    if labels.len() != x.nrows() {
        return Err(CsfError::Shape(format!("{} labels for {} points", labels.len(), x.nrows())));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CsfError::NonFinite("embedding vectors".into()));
    }
    Ok(())
}

/// Mean same-class fraction among each point's first `k` listed neighbours.
pub fn neighbor_fraction_from_lists(lists: &[Vec<(f64, usize)>], labels: &[usize], k: usize) -> f64 {
    let total: f64 = lists
        .iter()
        .enumerate()
        .map(|(i, nb)| nb[..k].iter().filter(|(_, j)| labels[*j] == labels[i]).count() as f64 / k as f64)
        .sum();
    total / lists.len() as f64
}

/// Majority label among the first `k` listed neighbours. Ties go to the
/// class with the smallest summed distance, then to the lowest class index.
pub fn knn_vote(neighbors: &[(f64, usize)], labels: &[usize], k: usize) -> usize {
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &(d, j) in &neighbors[..k] {
        match tally.iter_mut().find(|t| t.0 == labels[j]) {
            Some(t) => {
                t.1 += 1;
                t.2 += d;
            }
            None => tally.push((labels[j], 1, d)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|t| t.0)
        .expect("k >= 1")
}

pub fn knn_accuracy_from_lists(lists: &[Vec<(f64, usize)>], labels: &[usize], k: usize) -> f64 {
    let correct = lists
        .iter()
        .enumerate()
        .filter(|(i, nb)| knn_vote(nb, labels, k) == labels[*i])
        .count();
    correct as f64 / lists.len() as f64
}

/// Mean fraction of each point's `k` nearest neighbours sharing its label.
pub fn neighbor_fraction(x: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    check_labels(x, labels)?;
    Ok(neighbor_fraction_from_lists(&neighbor_lists(x, k)?, labels, k))
}

/// Leave-one-out accuracy of a `k`-nearest-neighbour majority vote.
pub fn knn_loocv_accuracy(x: ArrayView2<f64>, labels: &[usize], k: usize) -> Result<f64> {
    check_labels(x, labels)?;
    Ok(knn_accuracy_from_lists(&neighbor_lists(x, k)?, labels, k))
}

/// `(k, neighbor_fraction)` for every `k` in `1..=k_max` from one search.
pub fn neighbor_fraction_curve(x: ArrayView2<f64>, labels: &[usize], k_max: usize) -> Result<Vec<(usize, f64)>> {
    check_labels(x, labels)?;
    let lists = neighbor_lists(x, k_max)?;
    Ok((1..=k_max)
        .map(|k| (k, neighbor_fraction_from_lists(&lists, labels, k)))
        .collect())
}
