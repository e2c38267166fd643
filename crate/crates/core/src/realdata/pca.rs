//! Principal component analysis via a covariance eigendecomposition.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaModel {
    pub mean: DVector<f64>,
    /// `d x D`, orthonormal rows.
    pub components: DMatrix<f64>,
    /// Explained-variance ratio of every retained component, non-increasing.
    pub explained_ratio: Vec<f64>,
}

/// Eigenvalues (descending) and matching eigenvectors of the sample covariance of `x` (rows are observations).
fn covariance_spectrum(x: &DMatrix<f64>) -> Result<(DVector<f64>, Vec<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    if n < 2 {
        return Err(Error::validation("PCA needs at least two rows"));
    }
    let mean = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.tr_mul(&centered) / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(x.ncols(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    Ok((mean, values, vectors))
}

impl PcaModel {
    /// Keeps the smallest number of components whose cumulative explained
    /// ratio reaches `target_ratio`.
    pub fn fit(x: &DMatrix<f64>, target_ratio: f64) -> Result<Self> {
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(Error::validation(format!("target ratio {target_ratio} outside (0, 1]")));
        }
        let (mean, values, vectors) = covariance_spectrum(x)?;
        let total: f64 = values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::validation("input has zero variance"));
        }
        let ratios: Vec<f64> = values.iter().map(|v| v / total).collect();
        let mut cum = 0.0;
        let mut d = ratios.len();
        for (i, r) in ratios.iter().enumerate() {
            cum += r;
            if cum >= target_ratio - 1e-12 {
                d = i + 1;
                break;
            }
        }
        Ok(Self::assemble(mean, &ratios, &vectors, d))
    }

    /// Keeps exactly `d` components.
    pub fn fit_components(x: &DMatrix<f64>, d: usize) -> Result<Self> {
        let (mean, values, vectors) = covariance_spectrum(x)?;
        let total: f64 = values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::validation("input has zero variance"));
        }
        if d == 0 || d > values.len() {
            return Err(Error::validation(format!("cannot keep {d} of {} components", values.len())));
        }
        let ratios: Vec<f64> = values.iter().map(|v| v / total).collect();
        Ok(Self::assemble(mean, &ratios, &vectors, d))
    }

    fn assemble(mean: DVector<f64>, ratios: &[f64], vectors: &DMatrix<f64>, d: usize) -> Self {
        PcaModel {
            mean,
            components: vectors.columns(0, d).transpose(),
            explained_ratio: ratios[..d].to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.components.nrows()
    }

    /// Projects rows of `x` onto the retained components.
    pub fn transform(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.mean.len() {
            return Err(Error::validation(format!(
                "input has {} columns, model expects {}",
                x.ncols(),
                self.mean.len()
            )));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean.transpose();
        }
        Ok(centered * self.components.transpose())
    }

    pub fn inverse_transform(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if z.ncols() != self.dim() {
            return Err(Error::validation("score width differs from the component count"));
        }
        let mut out = z * &self.components;
        for mut row in out.row_iter_mut() {
            row += self.mean.transpose();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng))
    }

    #[test]
    fn exact_low_rank_data() {
        let scores = gaussian(200, 2, 1);
        let basis = DMatrix::from_row_slice(2, 5, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 3.0, 1.0, -2.0]);
        let x = scores * basis;
        let model = PcaModel::fit(&x, 0.99).unwrap();
        assert_eq!(model.dim(), 2);
        let back = model.inverse_transform(&model.transform(&x).unwrap()).unwrap();
        assert!((back - &x).amax() < 1e-8);
        let gram = &model.components * model.components.transpose();
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-8);
    }

    #[test]
    fn ratios_match_direct_eigensolve() {
        let scale = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, 2.0, 1.5, 1.0, 0.5, 0.2]));
        let x = gaussian(500, 6, 2) * scale;
        let model = PcaModel::fit_components(&x, 6).unwrap();
        let n = x.nrows() as f64;
        let mut cov = DMatrix::zeros(6, 6);
        let mean = x.row_mean();
        for r in x.row_iter() {
            let d = (r - &mean).transpose();
            cov += &d * d.transpose();
        }
        cov /= n - 1.0;
        let mut eig: Vec<f64> = cov.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = eig.iter().sum();
        for (a, b) in model.explained_ratio.iter().zip(&eig) {
            assert!((a - b / total).abs() < 1e-8);
        }
        assert!(model.explained_ratio.windows(2).all(|w| w[0] >= w[1]));
        assert!(model.explained_ratio.iter().sum::<f64>() <= 1.0 + 1e-12);
        let smaller = PcaModel::fit(&x, 0.7).unwrap();
        let cum: f64 = smaller.explained_ratio.iter().sum();
        assert!(cum >= 0.7);
        assert!(cum - smaller.explained_ratio.last().unwrap() < 0.7);
    }

    #[test]
    fn rejects_constant_input() {
        let x = DMatrix::from_element(10, 3, 2.5);
        assert!(PcaModel::fit(&x, 0.7).is_err());
        assert!(PcaModel::fit(&gaussian(10, 3, 3), 1.5).is_err());
    }
}
