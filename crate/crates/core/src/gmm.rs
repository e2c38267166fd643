//! Gaussian mixture parameters, densities and sampling.
//!
//! Two parameterizations share one packed layout: the natural one
//! `(alpha_k, mu_k, vech(Sigma_k))` and the moment one
//! `(alpha_k, alpha_k * mu_k, vech(alpha_k * Sigma_k))`. Both are stored
//! component by component, so a packed vector has length
//! `K (p^2 + 3p + 2) / 2`.
//!
//! Component labels are 0-based throughout the crate.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bounds that define the constrained parameter set.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct Floors {
    pub alpha: f64,
    pub lambda: f64,
}

impl Default for Floors {
    fn default() -> Self {
        Floors {
            alpha: 1e-6,
            lambda: 1e-6,
        }
    }
}

/// Number of free entries of a symmetric `p x p` matrix.
pub fn vech_len(p: usize) -> usize {
    p * (p + 1) / 2
}

/// Packed parameter length `q = K (p^2 + 3p + 2) / 2`.
pub fn param_dim(k: usize, p: usize) -> usize {
    k * (p * p + 3 * p + 2) / 2
}

fn block_len(p: usize) -> usize {
    1 + p + vech_len(p)
}

/// Half-vectorization, row-major over pairs `(i, j)` with `i <= j`.
pub fn vech(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::validation("vech requires a square matrix"));
    }
    let p = a.nrows();
    let mut out = Vec::with_capacity(vech_len(p));
    for i in 0..p {
        for j in i..p {
            if (a[(i, j)] - a[(j, i)]).abs() > SYMMETRY_TOL {
                return Err(Error::validation(format!(
                    "matrix not symmetric at ({i}, {j}): {} vs {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
            out.push(a[(i, j)]);
        }
    }
    Ok(out)
}

/// Inverse of [`vech`].
pub fn unvech(v: &[f64], p: usize) -> Result<DMatrix<f64>> {
    if v.len() != vech_len(p) {
        return Err(Error::validation(format!(
            "vech of a {p}x{p} matrix has {} entries, got {}",
            vech_len(p),
            v.len()
        )));
    }
    let mut a = DMatrix::zeros(p, p);
    let mut idx = 0;
    for i in 0..p {
        for j in i..p {
            a[(i, j)] = v[idx];
            a[(j, i)] = v[idx];
            idx += 1;
        }
    }
    Ok(a)
}

fn push_vech_unchecked(a: &DMatrix<f64>, out: &mut Vec<f64>) {
    let p = a.nrows();
    for i in 0..p {
        for j in i..p {
            out.push(a[(i, j)]);
        }
    }
}

fn check_shapes(alpha: &[f64], mu: &[DVector<f64>], sigma: &[DMatrix<f64>]) -> Result<usize> {
    let k = alpha.len();
    if k == 0 {
        return Err(Error::validation("mixture needs at least one component"));
    }
    if mu.len() != k || sigma.len() != k {
        return Err(Error::validation(format!(
            "component count mismatch: {} weights, {} means, {} covariances",
            k,
            mu.len(),
            sigma.len()
        )));
    }
    let p = mu[0].len();
    if p == 0 {
        return Err(Error::validation("feature dimension must be positive"));
    }
    for (c, (m, s)) in mu.iter().zip(sigma).enumerate() {
        if m.len() != p || s.nrows() != p || s.ncols() != p {
            return Err(Error::validation(format!(
                "component {c} has inconsistent dimensions"
            )));
        }
    }
    Ok(p)
}

/// Natural GMM parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ThetaParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    pub sigma: Vec<DMatrix<f64>>,
}

impl ThetaParams {
    /// Builds parameters after checking shapes and symmetry. Floors are not
    /// enforced here; see [`ThetaParams::validate`] and [`ThetaParams::project`].
    pub fn new(alpha: Vec<f64>, mu: Vec<DVector<f64>>, sigma: Vec<DMatrix<f64>>) -> Result<Self> {
        check_shapes(&alpha, &mu, &sigma)?;
        for (c, s) in sigma.iter().enumerate() {
            if !is_symmetric(s) {
                return Err(Error::validation(format!(
                    "covariance of component {c} is not symmetric"
                )));
            }
        }
        Ok(ThetaParams { alpha, mu, sigma })
    }

    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }

    pub fn param_len(&self) -> usize {
        param_dim(self.components(), self.dim())
    }

    /// Checks every invariant of the constrained parameter set.
    pub fn validate(&self, floors: &Floors) -> Result<()> {
        check_shapes(&self.alpha, &self.mu, &self.sigma)?;
        let sum: f64 = self.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::validation(format!("mixing weights sum to {sum}")));
        }
        for (c, &a) in self.alpha.iter().enumerate() {
            if !(a >= floors.alpha && a <= 1.0) {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: format!("weight {a} outside [{}, 1]", floors.alpha),
                });
            }
        }
        for (c, s) in self.sigma.iter().enumerate() {
            if !is_symmetric(s) {
                return Err(Error::validation(format!(
                    "covariance of component {c} is not symmetric"
                )));
            }
            if !min_eigen_at_least(s, floors.lambda) {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: format!("covariance eigenvalue below {}", floors.lambda),
                });
            }
        }
        Ok(())
    }

    pub fn pack(&self) -> Vec<f64> {
        pack_blocks(&self.alpha, &self.mu, &self.sigma)
    }

    pub fn unpack(v: &[f64], k: usize, p: usize) -> Result<Self> {
        let (alpha, mu, sigma) = unpack_blocks(v, k, p)?;
        Ok(ThetaParams { alpha, mu, sigma })
    }

    pub fn to_psi(&self, floors: &Floors) -> Result<PsiParams> {
        for (c, &a) in self.alpha.iter().enumerate() {
            if !(a >= floors.alpha) {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: format!("weight {a} below floor {}", floors.alpha),
                });
            }
        }
        Ok(PsiParams {
            alpha: self.alpha.clone(),
            beta: self.mu.iter().zip(&self.alpha).map(|(m, &a)| m * a).collect(),
            gamma: self
                .sigma
                .iter()
                .zip(&self.alpha)
                .map(|(s, &a)| s * a)
                .collect(),
        })
    }

    /// Projects onto the constrained set: weights floored and renormalized,
    /// covariance eigenvalues floored. Valid input is returned unchanged.
    pub fn project(&self, floors: &Floors) -> Result<Self> {
        for (c, (m, s)) in self.mu.iter().zip(&self.sigma).enumerate() {
            let finite = self.alpha[c].is_finite()
                && m.iter().all(|v| v.is_finite())
                && s.iter().all(|v| v.is_finite());
            if !finite {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: "non-finite parameter".into(),
                });
            }
        }
        let alpha = project_weights(&self.alpha, floors.alpha)?;
        let sigma = self
            .sigma
            .iter()
            .map(|s| floor_eigenvalues(s, floors.lambda))
            .collect();
        Ok(ThetaParams {
            alpha,
            mu: self.mu.clone(),
            sigma,
        })
    }

    /// Parameters with every component identical (perfectly overlapped).
    pub fn overlapped(alpha: Vec<f64>, mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let k = alpha.len();
        ThetaParams::new(alpha, vec![mu; k], vec![sigma; k])
    }
}

/// Moment parameters `(alpha_k, beta_k = alpha_k mu_k, gamma_k = alpha_k Sigma_k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiParams {
    pub alpha: Vec<f64>,
    pub beta: Vec<DVector<f64>>,
    pub gamma: Vec<DMatrix<f64>>,
}

impl PsiParams {
    pub fn components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.beta[0].len()
    }

    pub fn pack(&self) -> Vec<f64> {
        pack_blocks(&self.alpha, &self.beta, &self.gamma)
    }

    pub fn unpack(v: &[f64], k: usize, p: usize) -> Result<Self> {
        let (alpha, beta, gamma) = unpack_blocks(v, k, p)?;
        Ok(PsiParams { alpha, beta, gamma })
    }

    pub fn to_theta(&self, floors: &Floors) -> Result<ThetaParams> {
        for (c, &a) in self.alpha.iter().enumerate() {
            if !(a >= floors.alpha) {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: format!("weight {a} below floor {}", floors.alpha),
                });
            }
        }
        Ok(ThetaParams {
            alpha: self.alpha.clone(),
            mu: self.beta.iter().zip(&self.alpha).map(|(b, &a)| b / a).collect(),
            sigma: self
                .gamma
                .iter()
                .zip(&self.alpha)
                .map(|(g, &a)| g / a)
                .collect(),
        })
    }

    /// Projects through the natural parameterization when any constraint is
    /// violated; otherwise returns an exact copy.
    pub fn project(&self, floors: &Floors) -> Result<Self> {
        let sum: f64 = self.alpha.iter().sum();
        let mut ok = (sum - 1.0).abs() <= 1e-12;
        for (a, g) in self.alpha.iter().zip(&self.gamma) {
            if !ok {
                break;
            }
            ok = a.is_finite()
                && *a >= floors.alpha
                && *a <= 1.0
                && g.iter().all(|v| v.is_finite())
                && min_eigen_at_least(&(g / *a), floors.lambda);
        }
        if ok {
            return Ok(self.clone());
        }
        let clamped = PsiParams {
            alpha: self.alpha.iter().map(|&a| a.max(floors.alpha)).collect(),
            beta: self.beta.clone(),
            gamma: self.gamma.clone(),
        };
        // mu and Sigma are recovered with the unclamped weights where possible
        let theta = ThetaParams {
            alpha: clamped.alpha.clone(),
            mu: self
                .beta
                .iter()
                .zip(&clamped.alpha)
                .map(|(b, &a)| b / a)
                .collect(),
            sigma: self
                .gamma
                .iter()
                .zip(&clamped.alpha)
                .map(|(g, &a)| g / a)
                .collect(),
        };
        theta.project(floors)?.to_psi(floors)
    }
}

fn pack_blocks(alpha: &[f64], first: &[DVector<f64>], second: &[DMatrix<f64>]) -> Vec<f64> {
    let k = alpha.len();
    let p = first[0].len();
    let mut out = Vec::with_capacity(param_dim(k, p));
    for c in 0..k {
        out.push(alpha[c]);
        out.extend(first[c].iter());
        push_vech_unchecked(&second[c], &mut out);
    }
    out
}

type Blocks = (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

fn unpack_blocks(v: &[f64], k: usize, p: usize) -> Result<Blocks> {
    let q = param_dim(k, p);
    if v.len() != q {
        return Err(Error::validation(format!(
            "packed parameter length {} does not match q = {q} (K = {k}, p = {p})",
            v.len()
        )));
    }
    let b = block_len(p);
    let mut alpha = Vec::with_capacity(k);
    let mut first = Vec::with_capacity(k);
    let mut second = Vec::with_capacity(k);
    for chunk in v.chunks_exact(b) {
        alpha.push(chunk[0]);
        first.push(DVector::from_column_slice(&chunk[1..1 + p]));
        second.push(unvech(&chunk[1 + p..], p)?);
    }
    Ok((alpha, first, second))
}

pub(crate) fn is_symmetric(s: &DMatrix<f64>) -> bool {
    let p = s.nrows();
    (0..p).all(|i| (i + 1..p).all(|j| (s[(i, j)] - s[(j, i)]).abs() <= SYMMETRY_TOL))
}

/// True when the smallest eigenvalue of symmetric `s` is at least `floor`.
pub(crate) fn min_eigen_at_least(s: &DMatrix<f64>, floor: f64) -> bool {
    let p = s.nrows();
    let shifted = s - DMatrix::identity(p, p) * floor;
    if shifted.cholesky().is_some() {
        return true;
    }
    // Cholesky fails on exact equality; fall back to the eigenvalues.
    let eig = nalgebra::SymmetricEigen::new(s.clone());
    eig.eigenvalues.iter().all(|&l| l >= floor)
}

pub(crate) fn floor_eigenvalues(s: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    if min_eigen_at_least(s, floor) {
        return s.clone();
    }
    let sym = (s + s.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|l| l.max(floor));
    let v = &eig.eigenvectors;
    let rebuilt = v * DMatrix::from_diagonal(&vals) * v.transpose();
    // enforce exact symmetry and guard the floor against roundoff
    let mut out = (&rebuilt + rebuilt.transpose()) * 0.5;
    if !min_eigen_at_least(&out, floor) {
        let p = out.nrows();
        out += DMatrix::identity(p, p) * (floor * 1e-6);
    }
    out
}

/// Floors weights at `floor` and rescales the rest so they sum to one.
fn project_weights(alpha: &[f64], floor: f64) -> Result<Vec<f64>> {
    let k = alpha.len();
    if floor * k as f64 >= 1.0 {
        return Err(Error::validation(format!(
            "weight floor {floor} infeasible for {k} components"
        )));
    }
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().all(|&a| a >= floor && a <= 1.0) && (sum - 1.0).abs() <= 1e-12 {
        return Ok(alpha.to_vec());
    }
    let mut pinned = vec![false; k];
    let mut out: Vec<f64> = alpha.iter().map(|&a| a.max(0.0)).collect();
    loop {
        let free_mass: f64 = (0..k).filter(|&i| !pinned[i]).map(|i| out[i]).sum();
        let target = 1.0 - floor * pinned.iter().filter(|&&b| b).count() as f64;
        if free_mass <= 0.0 {
            let free = pinned.iter().filter(|&&b| !b).count().max(1) as f64;
            for i in 0..k {
                out[i] = if pinned[i] { floor } else { target / free };
            }
        } else {
            for i in 0..k {
                out[i] = if pinned[i] {
                    floor
                } else {
                    out[i] * target / free_mass
                };
            }
        }
        let mut changed = false;
        for i in 0..k {
            if !pinned[i] && out[i] < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(out)
}

/// A single observation: features plus an optional (observed) label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn new(x: DVector<f64>, label: Option<usize>) -> Self {
        Sample { x, label }
    }

    pub fn unlabeled(x: DVector<f64>) -> Self {
        Sample { x, label: None }
    }
}

/// Per-component factorizations reused across one sweep over the data.
#[derive(Clone, Debug)]
pub(crate) struct MixtureEval {
    log_alpha: Vec<f64>,
    means: Vec<DVector<f64>>,
    chol_lower: Vec<DMatrix<f64>>,
    log_norm: Vec<f64>,
    p: usize,
}

impl MixtureEval {
    pub(crate) fn new(theta: &ThetaParams) -> Result<Self> {
        let p = theta.dim();
        let k = theta.components();
        let mut chol_lower = Vec::with_capacity(k);
        let mut log_norm = Vec::with_capacity(k);
        let mut log_alpha = Vec::with_capacity(k);
        for c in 0..k {
            let a = theta.alpha[c];
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::DegenerateComponent {
                    component: c,
                    reason: format!("weight {a} is not positive"),
                });
            }
            log_alpha.push(a.ln());
            let chol = theta.sigma[c]
                .clone()
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { component: c })?;
            let l = chol.unpack();
            let log_det: f64 = 2.0 * (0..p).map(|i| l[(i, i)].ln()).sum::<f64>();
            log_norm.push(-0.5 * (p as f64 * LN_2PI + log_det));
            chol_lower.push(l);
        }
        Ok(MixtureEval {
            log_alpha,
            means: theta.mu.clone(),
            chol_lower,
            log_norm,
            p,
        })
    }

    pub(crate) fn components(&self) -> usize {
        self.log_alpha.len()
    }

    /// `log phi_k(x)` without the weight.
    pub(crate) fn log_phi(&self, c: usize, x: &DVector<f64>, scratch: &mut [f64]) -> f64 {
        let l = &self.chol_lower[c];
        let mu = &self.means[c];
        let mut maha = 0.0;
        for i in 0..self.p {
            let mut acc = x[i] - mu[i];
            for j in 0..i {
                acc -= l[(i, j)] * scratch[j];
            }
            let z = acc / l[(i, i)];
            scratch[i] = z;
            maha += z * z;
        }
        self.log_norm[c] - 0.5 * maha
    }

    /// Fills `out[k] = log alpha_k + log phi_k(x)`.
    pub(crate) fn log_terms(&self, x: &DVector<f64>, out: &mut [f64], scratch: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate().take(self.components()) {
            *o = self.log_alpha[c] + self.log_phi(c, x, scratch);
        }
    }

    pub(crate) fn log_alpha(&self, c: usize) -> f64 {
        self.log_alpha[c]
    }
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|&t| (t - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-terms in place into probabilities.
pub(crate) fn softmax_in_place(v: &mut [f64]) -> f64 {
    let lse = log_sum_exp(v);
    for t in v.iter_mut() {
        *t = (*t - lse).exp();
    }
    lse
}

fn check_point(x: &DVector<f64>, p: usize) -> Result<()> {
    if x.len() != p {
        return Err(Error::validation(format!(
            "point has dimension {}, expected {p}",
            x.len()
        )));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::validation("point has non-finite coordinates"));
    }
    Ok(())
}

/// `log f(x | theta)` via log-sum-exp over components.
pub fn log_density(x: &DVector<f64>, theta: &ThetaParams) -> Result<f64> {
    check_point(x, theta.dim())?;
    let eval = MixtureEval::new(theta)?;
    let mut terms = vec![0.0; theta.components()];
    let mut scratch = vec![0.0; theta.dim()];
    eval.log_terms(x, &mut terms, &mut scratch);
    Ok(log_sum_exp(&terms))
}

/// Posterior component probabilities at `x`.
pub fn responsibilities(x: &DVector<f64>, theta: &ThetaParams) -> Result<Vec<f64>> {
    check_point(x, theta.dim())?;
    let eval = MixtureEval::new(theta)?;
    let mut terms = vec![0.0; theta.components()];
    let mut scratch = vec![0.0; theta.dim()];
    eval.log_terms(x, &mut terms, &mut scratch);
    softmax_in_place(&mut terms);
    Ok(terms)
}

/// Average negative log-likelihood. With `labeled_mode`, samples carrying a
/// label contribute the complete-data term of their own component.
pub fn neg_log_likelihood(data: &[Sample], theta: &ThetaParams, labeled_mode: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::validation("empty data"));
    }
    let eval = MixtureEval::new(theta)?;
    let k = theta.components();
    let p = theta.dim();
    let mut terms = vec![0.0; k];
    let mut scratch = vec![0.0; p];
    let mut total = 0.0;
    for s in data {
        check_point(&s.x, p)?;
        match s.label.filter(|_| labeled_mode) {
            Some(lab) => {
                if lab >= k {
                    return Err(Error::validation(format!("label {lab} out of range for K = {k}")));
                }
                total -= eval.log_alpha(lab) + eval.log_phi(lab, &s.x, &mut scratch);
            }
            None => {
                eval.log_terms(&s.x, &mut terms, &mut scratch);
                total -= log_sum_exp(&terms);
            }
        }
    }
    Ok(total / data.len() as f64)
}

/// Draws `n` labeled samples from the mixture; deterministic in `seed`.
pub fn sample_gmm(theta: &ThetaParams, n: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_gmm_with(theta, n, &mut rng)
}

pub fn sample_gmm_with<R: rand::Rng + ?Sized>(
    theta: &ThetaParams,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::validation("sample size must be at least 1"));
    }
    let p = theta.dim();
    let picker = WeightedIndex::new(&theta.alpha)
        .map_err(|e| Error::validation(format!("invalid mixing weights: {e}")))?;
    let factors = theta
        .sigma
        .iter()
        .enumerate()
        .map(|(c, s)| {
            s.clone()
                .cholesky()
                .map(|ch| ch.unpack())
                .ok_or(Error::NotPositiveDefinite { component: c })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let c = picker.sample(rng);
        let z = DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &theta.mu[c] + &factors[c] * z;
        out.push(Sample::new(x, Some(c)));
    }
    Ok(out)
}

/// AR(1)-style covariance `sigma_ij = rho^|i - j|`.
pub fn toeplitz_covariance(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_spd(p: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(p, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        &a * a.transpose() + DMatrix::identity(p, p) * 0.5
    }

    fn random_theta(k: usize, p: usize, seed: u64) -> ThetaParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..1.0)).collect();
        let s: f64 = raw.iter().sum();
        ThetaParams::new(
            raw.iter().map(|a| a / s).collect(),
            (0..k)
                .map(|_| DVector::from_fn(p, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect(),
            (0..k).map(|_| random_spd(p, &mut rng)).collect(),
        )
        .unwrap()
        .project(&Floors::default())
        .unwrap()
    }

    #[test]
    fn vech_examples() {
        assert_eq!(vech(&DMatrix::identity(2, 2)).unwrap(), vec![1.0, 0.0, 1.0]);
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 3.0]);
        assert_eq!(vech(&a).unwrap(), vec![1.0, 2.0, 3.0]);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.1, 3.0]);
        assert!(matches!(vech(&bad), Err(Error::Validation(_))));
    }

    #[test]
    fn vech_round_trip_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = random_spd(6, &mut rng);
            let sym = (&a + a.transpose()) * 0.5;
            assert_eq!(unvech(&vech(&sym).unwrap(), 6).unwrap(), sym);
        }
    }

    #[test]
    fn param_dim_values() {
        assert_eq!(param_dim(3, 6), 84);
        assert_eq!(param_dim(2, 1), 6);
        assert!(ThetaParams::unpack(&[0.0; 5], 2, 1).is_err());
    }

    #[test]
    fn psi_examples() {
        let f = Floors::default();
        let t = ThetaParams::new(
            vec![1.0],
            vec![DVector::from_element(1, 0.0)],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let psi = t.to_psi(&f).unwrap();
        assert_eq!(psi.beta[0][0], 0.0);
        assert_eq!(psi.gamma[0][(0, 0)], 1.0);

        let t2 = ThetaParams::new(
            vec![0.5, 0.5],
            vec![DVector::from_element(1, 2.0), DVector::from_element(1, 0.0)],
            vec![DMatrix::identity(1, 1); 2],
        )
        .unwrap();
        assert_eq!(t2.to_psi(&f).unwrap().beta[0][0], 1.0);

        let tiny = ThetaParams {
            alpha: vec![1e-9, 1.0 - 1e-9],
            ..t2
        };
        assert!(matches!(
            tiny.to_psi(&f),
            Err(Error::DegenerateComponent { component: 0, .. })
        ));
    }

    #[test]
    fn log_density_examples() {
        let t = ThetaParams::new(
            vec![1.0],
            vec![DVector::from_element(1, 0.0)],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let x = DVector::from_element(1, 0.0);
        let v = log_density(&x, &t).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-12);
        let nll = neg_log_likelihood(&[Sample::unlabeled(x.clone())], &t, false).unwrap();
        assert!((nll - 0.918_938_533_204_672_7).abs() < 1e-12);

        let twin = ThetaParams::overlapped(
            vec![0.5, 0.5],
            DVector::from_element(1, 0.0),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        let y = DVector::from_element(1, 0.7);
        assert!((log_density(&y, &twin).unwrap() - log_density(&y, &t).unwrap()).abs() < 1e-14);

        let bad = DVector::from_element(1, f64::NAN);
        assert!(log_density(&bad, &t).is_err());
    }

    fn direct_density(x: &DVector<f64>, t: &ThetaParams) -> f64 {
        // textbook density: inverse and determinant through LU
        let p = t.dim() as f64;
        (0..t.components())
            .map(|c| {
                let d = x - &t.mu[c];
                let inv = t.sigma[c].clone().try_inverse().unwrap();
                let det = t.sigma[c].determinant();
                let q = (d.transpose() * inv * &d)[(0, 0)];
                t.alpha[c] * (-0.5 * q).exp() / ((2.0 * std::f64::consts::PI).powf(p) * det).sqrt()
            })
            .sum()
    }

    #[test]
    fn log_density_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..20 {
            let t = random_theta(3, 4, seed);
            let x = DVector::from_fn(4, |_, _| rng.sample::<f64, _>(StandardNormal));
            let a = log_density(&x, &t).unwrap();
            let b = direct_density(&x, &t).ln();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn responsibilities_examples() {
        let single = random_theta(1, 3, 1);
        let x = DVector::from_element(3, 0.3);
        assert_eq!(responsibilities(&x, &single).unwrap(), vec![1.0]);

        let twin = ThetaParams::overlapped(
            vec![0.2, 0.3, 0.5],
            DVector::from_element(2, 1.0),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let r = responsibilities(&DVector::from_element(2, -0.4), &twin).unwrap();
        for (a, b) in r.iter().zip(&twin.alpha) {
            assert!((a - b).abs() < 1e-15);
        }

        // 1-D two component ratio by hand
        let t = ThetaParams::new(
            vec![0.3, 0.7],
            vec![DVector::from_element(1, -1.0), DVector::from_element(1, 2.0)],
            vec![
                DMatrix::from_element(1, 1, 0.5),
                DMatrix::from_element(1, 1, 2.0),
            ],
        )
        .unwrap();
        let xv = 0.4_f64;
        let phi = |m: f64, v: f64| (-(xv - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let num = 0.3 * phi(-1.0, 0.5);
        let den = num + 0.7 * phi(2.0, 2.0);
        let r = responsibilities(&DVector::from_element(1, xv), &t).unwrap();
        assert!((r[0] - num / den).abs() < 1e-14);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nll_labeled_reduces_to_complete_data() {
        let t = random_theta(2, 2, 5);
        let data = sample_gmm(&t, 20, 3).unwrap();
        let nll = neg_log_likelihood(&data, &t, true).unwrap();
        let mut direct = 0.0;
        for s in &data {
            let c = s.label.unwrap();
            let only = ThetaParams::new(vec![1.0], vec![t.mu[c].clone()], vec![t.sigma[c].clone()]).unwrap();
            direct -= log_density(&s.x, &only).unwrap() + t.alpha[c].ln();
        }
        assert!((nll - direct / 20.0).abs() < 1e-12);

        let hidden: Vec<Sample> = data.iter().map(|s| Sample::unlabeled(s.x.clone())).collect();
        let a = neg_log_likelihood(&hidden, &t, true).unwrap();
        let b = neg_log_likelihood(&data, &t, false).unwrap();
        assert_eq!(a, b);
        let direct_unsup: f64 = data.iter().map(|s| -direct_density(&s.x, &t).ln()).sum::<f64>() / 20.0;
        assert!((b - direct_unsup).abs() < 1e-10);

        assert!(neg_log_likelihood(&[], &t, false).is_err());
    }

    #[test]
    fn sampling_concentration_and_determinism() {
        let t = ThetaParams::new(
            vec![1.0],
            vec![DVector::from_element(1, 0.0)],
            vec![DMatrix::identity(1, 1)],
        )
        .unwrap();
        let n = 100_000;
        let data = sample_gmm(&t, n, 42).unwrap();
        let mean: f64 = data.iter().map(|s| s.x[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());

        let t3 = random_theta(3, 2, 9);
        let draws = sample_gmm(&t3, n, 1).unwrap();
        for c in 0..3 {
            let freq = draws.iter().filter(|s| s.label == Some(c)).count() as f64 / n as f64;
            let a = t3.alpha[c];
            assert!((freq - a).abs() < 4.0 * (a * (1.0 - a) / n as f64).sqrt());
        }
        assert_eq!(sample_gmm(&t3, 50, 8).unwrap(), sample_gmm(&t3, 50, 8).unwrap());
        assert!(sample_gmm(&t3, 0, 8).is_err());
    }

    #[test]
    fn projection_floors() {
        let f = Floors::default();
        let t = ThetaParams::new(
            vec![0.0, 1.0],
            vec![DVector::zeros(2), DVector::zeros(2)],
            vec![
                DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]),
                DMatrix::identity(2, 2),
            ],
        )
        .unwrap();
        let pr = t.project(&f).unwrap();
        pr.validate(&f).unwrap();
        assert!((pr.alpha[0] - 1e-6).abs() < 1e-18);
        // a valid point is a fixed point of the projection
        let v = random_theta(3, 3, 4);
        assert_eq!(v.project(&f).unwrap(), v);
    }

    proptest! {
        #[test]
        fn pack_and_psi_round_trips(seed in 0u64..10_000, k in 1usize..4, p in 1usize..5) {
            let f = Floors::default();
            let t = random_theta(k, p, seed);
            let packed = t.pack();
            prop_assert_eq!(packed.len(), param_dim(k, p));
            prop_assert_eq!(ThetaParams::unpack(&packed, k, p).unwrap(), t.clone());
            let back = t.to_psi(&f).unwrap().to_theta(&f).unwrap();
            for (a, b) in back.pack().iter().zip(&packed) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }

        #[test]
        fn responsibilities_sum_to_one_and_shift_invariant(seed in 0u64..10_000, shift in -50.0f64..50.0) {
            let t = random_theta(3, 2, seed);
            let eval = MixtureEval::new(&t).unwrap();
            let x = DVector::from_element(2, (seed % 7) as f64 - 3.0);
            let mut terms = vec![0.0; 3];
            let mut scratch = vec![0.0; 2];
            eval.log_terms(&x, &mut terms, &mut scratch);
            let mut shifted: Vec<f64> = terms.iter().map(|v| v + shift).collect();
            softmax_in_place(&mut terms);
            softmax_in_place(&mut shifted);
            prop_assert!((terms.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, b) in terms.iter().zip(&shifted) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn log_density_is_lipschitz_in_theta(seed in 0u64..1_000) {
            let t = random_theta(2, 2, seed);
            let x = DVector::from_element(2, 0.5);
            let base = log_density(&x, &t).unwrap();
            let mut prev = f64::INFINITY;
            for h in [1e-3, 1e-4, 1e-5] {
                let mut v = t.pack();
                for (i, e) in v.iter_mut().enumerate() {
                    if i % 6 != 0 { *e += h; }
                }
                let moved = ThetaParams::unpack(&v, 2, 2).unwrap();
                let d = (log_density(&x, &moved).unwrap() - base).abs();
                prop_assert!(d <= prev);
                prop_assert!(d / h < 1e4);
                prev = d;
            }
        }
    }
}
