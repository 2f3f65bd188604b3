//! Principal component analysis by symmetric eigendecomposition.
//!
//! The covariance matrix is decomposed when `D <= N`, the Gram matrix
//! otherwise. Each component's sign is fixed so that its largest-magnitude
//! loading (lowest index on ties) is positive.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{CsfError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Array1<f64>,
    /// `[n_components, D]`, orthonormal rows.
    pub components: Array2<f64>,
    /// Variance along each component (divisor `N - 1`), non-increasing.
    pub explained_variance: Vec<f64>,
    /// Total variance of the data (trace of the covariance).
    pub total_variance: f64,
}

fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..eig.eigenvalues.len())
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

impl PcaModel {
    pub fn fit(x: ArrayView2<f64>, n_components: usize) -> Result<Self> {
        let (n, d) = x.dim();
        if n < 2 {
            return Err(CsfError::InvalidArgument("PCA needs at least two samples".into()));
        }
        if n_components == 0 || n_components > n.min(d) {
            return Err(CsfError::InvalidArgument(format!(
                "n_components = {n_components} outside [1, min(N, D) = {}]",
                n.min(d)
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(CsfError::NonFinite("PCA input".into()));
        }
        let mean = x.mean_axis(Axis(0)).expect("n >= 2");
        let xc = &x - &mean;
        let denom = (n - 1) as f64;
        let total_variance = xc.iter().map(|v| v * v).sum::<f64>() / denom;

        let mut components = Array2::<f64>::zeros((n_components, d));
        let mut explained = Vec::with_capacity(n_components);
        if d <= n {
            let cov = xc.t().dot(&xc) / denom;
            let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]]);
            for (row, (val, mut vec)) in sorted_eigen(m).into_iter().take(n_components).enumerate() {
                fix_sign(&mut vec);
                components.row_mut(row).assign(&Array1::from(vec));
                explained.push(val.max(0.0));
            }
        } else {
            let gram = xc.dot(&xc.t());
            let m = DMatrix::from_fn(n, n, |i, j| gram[[i, j]]);
            let pairs = sorted_eigen(m);
            let floor = pairs[0].0.max(0.0) * 1e-12;
            for (row, (val, vec)) in pairs.into_iter().take(n_components).enumerate() {
                if val > floor && val > 0.0 {
                    let u = xc.t().dot(&Array1::from(vec)) / val.sqrt();
                    let mut u = u.to_vec();
                    fix_sign(&mut u);
                    components.row_mut(row).assign(&Array1::from(u));
                    explained.push(val / denom);
                } else {
                    explained.push(0.0);
                }
            }
        }
        Ok(Self {
            mean,
            components,
            explained_variance: explained,
            total_variance,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.nrows()
    }

    /// Projects rows of `x` onto the components, `[N, n_components]`.
    pub fn transform(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(CsfError::Shape(format!(
                "PCA fitted on {} dims, got {}",
                self.mean.len(),
                x.ncols()
            )));
        }
        Ok((&x - &self.mean).dot(&self.components.t()))
    }

    pub fn inverse_transform(&self, y: ArrayView2<f64>) -> Array2<f64> {
        y.dot(&self.components) + &self.mean
    }

    /// Fraction of total variance carried by each component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |(_, j)| rng.random_range(-1.0..1.0) * (j + 1) as f64)
    }

    fn pairwise(x: &Array2<f64>) -> Vec<f64> {
        let n = x.nrows();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let d = &x.row(i) - &x.row(j);
                out.push(d.dot(&d).sqrt());
            }
        }
        out
    }

    #[test]
    fn full_rank_projection_preserves_distances_and_reconstructs() {
        let x = random(30, 6, 1);
        let pca = PcaModel::fit(x.view(), 6).unwrap();
        let y = pca.transform(x.view()).unwrap();
        for (a, b) in pairwise(&x).iter().zip(pairwise(&y)) {
            assert!((a - b).abs() < 1e-9);
        }
        let back = pca.inverse_transform(y.view());
        let err = (&back - &x).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / x.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
        assert!(pca.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        let gram = pca.components.dot(&pca.components.t());
        for i in 0..6 {
            for j in 0..6 {
                assert!((gram[[i, j]] - if i == j { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn rank_one_data() {
        let dir = array![1.0, -2.0, 0.5, 0.0];
        let x = Array2::from_shape_fn((10, 4), |(i, j)| (i as f64 - 3.0) * dir[j]);
        let pca = PcaModel::fit(x.view(), 2).unwrap();
        let ratio = pca.explained_variance_ratio();
        assert!((ratio[0] - 1.0).abs() < 1e-12);
        assert!(ratio[1].abs() < 1e-12);
        // largest loading is the -2 entry, flipped positive
        assert!(pca.components[[0, 1]] > 0.0);
    }

    #[test]
    fn three_points_in_a_plane() {
        // Points (0,0), (2,0), (1,3) in the plane spanned by e1 and e3 of R^5.
        let x = array![
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 3.0, 0.0, 0.0]
        ];
        // Centered coordinates (-1,-1), (1,-1), (0,2): covariance diag(1, 3),
        // so e3 first with variance 3, then e1 with variance 1.
        let pca = PcaModel::fit(x.view(), 2).unwrap();
        assert!((pca.explained_variance[0] - 3.0).abs() < 1e-12);
        assert!((pca.explained_variance[1] - 1.0).abs() < 1e-12);
        let expect = array![[0.0, 0.0, 1.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0]];
        assert!((&pca.components - &expect).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn gram_path_agrees_with_covariance_path() {
        let xt = random(25, 8, 5);
        let a = PcaModel::fit(xt.view(), 4).unwrap();
        // Same data padded with a zero column block goes through the Gram path
        // once D exceeds N; projections must agree.
        let mut padded = Array2::<f64>::zeros((25, 30));
        padded.slice_mut(ndarray::s![.., ..8]).assign(&xt);
        let b = PcaModel::fit(padded.view(), 4).unwrap();
        let ya = a.transform(xt.view()).unwrap();
        let yb = b.transform(padded.view()).unwrap();
        assert!((&ya - &yb).iter().all(|v| v.abs() < 1e-8));
        for (u, v) in a.explained_variance.iter().zip(&b.explained_variance) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_component_counts() {
        let x = random(5, 3, 0);
        assert!(PcaModel::fit(x.view(), 0).is_err());
        assert!(PcaModel::fit(x.view(), 4).is_err());
        assert!(PcaModel::fit(x.view(), 3).is_ok());
        let pca = PcaModel::fit(x.view(), 2).unwrap();
        assert!(pca.transform(random(2, 4, 0).view()).is_err());
    }
}
