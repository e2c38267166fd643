//! The simulation design: toeplitz covariances and means shifted along `1_p`.

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gmm::{toeplitz_covariance, ThetaParams};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MixtureDesign {
    pub p: usize,
    pub alpha: Vec<f64>,
    /// Covariance of component k has entries `rho_k^|i-j|`.
    pub rho: Vec<f64>,
    /// Mean shift between consecutive components.
    pub c: f64,
}

impl Default for MixtureDesign {
    fn default() -> Self {
        MixtureDesign {
            p: 6,
            alpha: vec![0.5, 0.3, 0.2],
            rho: vec![0.5, 0.1, -0.1],
            c: 4.0,
        }
    }
}

impl MixtureDesign {
    pub fn with_shift(c: f64) -> Self {
        MixtureDesign {
            c,
            ..Self::default()
        }
    }

    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.alpha.is_empty() {
            return Err(Error::Config("design needs p >= 1 and K >= 1".into()));
        }
        if self.rho.len() != self.alpha.len() {
            return Err(Error::Config(format!(
                "{} correlations for {} components",
                self.rho.len(),
                self.alpha.len()
            )));
        }
        if self.rho.iter().any(|r| !(r.abs() < 1.0)) {
            return Err(Error::Config("correlations must lie in (-1, 1)".into()));
        }
        if !self.c.is_finite() {
            return Err(Error::Config("mean shift must be finite".into()));
        }
        Ok(())
    }

    /// True parameters with `mu_1 ~ N(0, I_p)` drawn from `seed` and
    /// `mu_k = mu_{k-1} + c 1_p`.
    pub fn theta0(&self, seed: u64) -> Result<ThetaParams> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let first = DVector::from_fn(self.p, |_, _| StandardNormal.sample(&mut rng));
        self.theta0_from(first)
    }

    pub fn theta0_from(&self, first_mean: DVector<f64>) -> Result<ThetaParams> {
        self.validate()?;
        let mut mu = Vec::with_capacity(self.components());
        let mut cur = first_mean;
        for _ in 0..self.components() {
            mu.push(cur.clone());
            cur.add_scalar_mut(self.c);
        }
        let sigma = self.rho.iter().map(|&r| toeplitz_covariance(self.p, r)).collect();
        ThetaParams::new(self.alpha.clone(), mu, sigma)
    }
}
