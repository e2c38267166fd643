//! Separation, contraction and heterogeneity diagnostics, plus evaluation metrics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::em::{apply_mapping, psi_mapping, MappingKind};
use crate::error::{Error, Result};
use crate::gmm::{sample_gmm_with, softmax_in_place, Floors, MixtureEval, PsiParams, Sample, ThetaParams};
use crate::linalg::{spectral_norm, spectral_radius};
use crate::partition::{labeled_count, ClientDataset};

/// Relative central-difference step.
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct TauEstimate {
    pub tau: Vec<f64>,
    /// Monte Carlo standard errors.
    pub std_err: Vec<f64>,
}

/// Monte Carlo estimate of `E{pi_k (1 - pi_k)}` under the mixture itself.
pub fn estimate_tau(theta: &ThetaParams, n_mc: usize, seed: u64) -> Result<TauEstimate> {
    if n_mc < 1000 {
        return Err(Error::validation(format!("need at least 1000 Monte Carlo draws, got {n_mc}")));
    }
    let k = theta.components();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws = sample_gmm_with(theta, n_mc, &mut rng)?;
    let eval = MixtureEval::new(theta)?;
    let mut sum = vec![0.0; k];
    let mut sum_sq = vec![0.0; k];
    let mut terms = vec![0.0; k];
    let mut scratch = vec![0.0; theta.dim()];
    for s in &draws {
        eval.log_terms(&s.x, &mut terms, &mut scratch);
        softmax_in_place(&mut terms);
        for c in 0..k {
            let v = terms[c] * (1.0 - terms[c]);
            sum[c] += v;
            sum_sq[c] += v * v;
        }
    }
    let n = n_mc as f64;
    let tau: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_err = tau
        .iter()
        .zip(&sum_sq)
        .map(|(m, s2)| ((s2 / n - m * m).max(0.0) / (n - 1.0)).sqrt())
        .collect();
    Ok(TauEstimate { tau, std_err })
}

/// Central finite-difference Jacobian of `f` at `point`, one column per
/// coordinate with step `rel_step (1 + |x_j|)`. A column whose evaluation
/// fails is retried once with half the step.
pub fn finite_difference_jacobian<F>(f: F, point: &[f64], rel_step: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if !(rel_step > 0.0) {
        return Err(Error::validation("finite-difference step must be positive"));
    }
    let out_len = f(point)?.len();
    let column = |j: usize, h: f64| -> Result<Vec<f64>> {
        let mut up = point.to_vec();
        let mut dn = point.to_vec();
        up[j] += h;
        dn[j] -= h;
        let a = f(&up)?;
        let b = f(&dn)?;
        Ok(a.iter().zip(&b).map(|(x, y)| (x - y) / (2.0 * h)).collect())
    };
    let cols: Vec<Vec<f64>> = (0..point.len())
        .into_par_iter()
        .map(|j| {
            let h = rel_step * (1.0 + point[j].abs());
            column(j, h).or_else(|_| column(j, 0.5 * h))
        })
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(out_len, point.len(), |i, j| cols[j][i]))
}

/// Jacobian of one client's mapping at a packed point.
pub fn mapping_jacobian(
    kind: MappingKind,
    data: &[Sample],
    labeled_idx: &[usize],
    point: &[f64],
    k: usize,
    p: usize,
    floors: &Floors,
) -> Result<DMatrix<f64>> {
    finite_difference_jacobian(
        |v| apply_mapping(kind, data, labeled_idx, v, k, p, floors),
        point,
        FD_STEP,
    )
}

/// Block-diagonal Jacobian of the stacked per-client mappings.
pub fn stacked_mapping_jacobian(
    kind: MappingKind,
    clients: &[ClientDataset],
    points: &[Vec<f64>],
    k: usize,
    p: usize,
    floors: &Floors,
) -> Result<DMatrix<f64>> {
    if points.len() != clients.len() {
        return Err(Error::validation("one point per client required"));
    }
    let q = points.first().map_or(0, |v| v.len());
    let m = clients.len();
    let mut out = DMatrix::zeros(m * q, m * q);
    for (i, (c, v)) in clients.iter().zip(points).enumerate() {
        let j = mapping_jacobian(kind, &c.samples, &c.labeled_idx, v, k, p, floors).map_err(|e| e.in_client(i))?;
        out.view_mut((i * q, i * q), (q, q)).copy_from(&j);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JacobianSummary {
    pub norm: f64,
    pub radius: f64,
}

pub fn summarize_jacobian(j: &DMatrix<f64>) -> JacobianSummary {
    JacobianSummary {
        norm: spectral_norm(j),
        radius: spectral_radius(j),
    }
}

/// `|J_semi| / |J|` for the moment mapping at `point`, with `round(r n)`
/// labeled samples chosen by `seed`. Labels come from the samples.
pub fn semi_shrinkage_check(
    data: &[Sample],
    r: f64,
    seed: u64,
    point: &PsiParams,
    floors: &Floors,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::validation(format!("labeled ratio {r} outside [0, 1]")));
    }
    let n = data.len();
    let n_star = labeled_count(r, n).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    if n_star < n {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n_star);
        idx.sort_unstable();
    }
    let (k, p) = (point.components(), point.dim());
    let v = point.pack();
    let unsup = mapping_jacobian(MappingKind::UnsupervisedPsi, data, &[], &v, k, p, floors)?;
    let semi = mapping_jacobian(MappingKind::SemiPsi, data, &idx, &v, k, p, floors)?;
    Ok(spectral_norm(&semi) / spectral_norm(&unsup))
}

/// `(M R)^-1 sum_s sum_m |theta_hat - theta0|^2` over `estimates[s][m]`.
pub fn mse(estimates: &[Vec<ThetaParams>], theta0: &ThetaParams) -> Result<f64> {
    let t0 = theta0.pack();
    let mut total = 0.0;
    let mut count = 0usize;
    for rep in estimates {
        for est in rep {
            let v = est.pack();
            if v.len() != t0.len() {
                return Err(Error::validation("estimate length differs from truth"));
            }
            total += v.iter().zip(&t0).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("no estimates"));
    }
    Ok(total / count as f64)
}

/// Reorders the components of `est` to best match `theta0` by squared mean distance.
pub fn align_components(est: &ThetaParams, theta0: &ThetaParams) -> Result<ThetaParams> {
    let k = theta0.components();
    if est.components() != k || est.dim() != theta0.dim() {
        return Err(Error::validation("estimate shape differs from truth"));
    }
    let cost = DMatrix::from_fn(k, k, |i, j| (&theta0.mu[i] - &est.mu[j]).norm_squared());
    let assign = hungarian(&cost);
    Ok(ThetaParams {
        alpha: assign.iter().map(|&j| est.alpha[j]).collect(),
        mu: assign.iter().map(|&j| est.mu[j].clone()).collect(),
        sigma: assign.iter().map(|&j| est.sigma[j].clone()).collect(),
    })
}

/// Cross-client dispersion of the local moment mappings at `point`.
pub fn se_f(clients: &[ClientDataset], point: &PsiParams, floors: &Floors) -> Result<f64> {
    if clients.is_empty() {
        return Err(Error::validation("no clients"));
    }
    let maps: Vec<Vec<f64>> = clients
        .par_iter()
        .enumerate()
        .map(|(m, c)| {
            psi_mapping(&c.samples, &[], point, floors)
                .map(|f| f.pack())
                .map_err(|e| e.in_client(m))
        })
        .collect::<Result<_>>()?;
    // pairwise form: identical mappings give exactly zero
    let m = maps.len() as f64;
    let mut ss = 0.0;
    for (i, a) in maps.iter().enumerate() {
        for b in &maps[i + 1..] {
            ss += a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        }
    }
    Ok((ss / (m * m)).sqrt())
}

/// Minimum-cost assignment for a square cost matrix; `out[row] = column`.
pub fn hungarian(cost: &DMatrix<f64>) -> Vec<usize> {
    let n = cost.nrows();
    assert_eq!(n, cost.ncols(), "cost matrix must be square");
    // potentials and matching are 1-based; index 0 is the virtual column
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut matched = vec![0usize; n + 1];
    for i in 1..=n {
        matched[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched[j0] = matched[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if matched[j] > 0 {
            out[matched[j] - 1] = j - 1;
        }
    }
    out
}

/// Share of points misclustered under the best relabeling of `pred`.
/// Labels are 0-based and below `k`.
pub fn misclustering_err(pred: &[usize], truth: &[usize], k: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::validation("prediction and truth lengths differ"));
    }
    if pred.is_empty() {
        return Err(Error::validation("no labels"));
    }
    if pred.iter().chain(truth).any(|&l| l >= k) {
        return Err(Error::validation(format!("label outside 0..{k}")));
    }
    let mut confusion = DMatrix::<f64>::zeros(k, k);
    for (&a, &b) in pred.iter().zip(truth) {
        confusion[(a, b)] += 1.0;
    }
    let assign = hungarian(&(-&confusion));
    let hits: f64 = assign.iter().enumerate().map(|(a, &b)| confusion[(a, b)]).sum();
    Ok(1.0 - hits / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparationReport {
    pub tau: Vec<f64>,
    pub tau_std_err: Vec<f64>,
    pub mapping_norm: f64,
    pub spectral_radius: f64,
    pub semi_ratio: Option<f64>,
}

impl SeparationReport {
    /// Builds the report for the moment mapping at `theta` on `data`.
    pub fn compute(
        theta: &ThetaParams,
        data: &[Sample],
        n_mc: usize,
        seed: u64,
        semi_r: Option<f64>,
        floors: &Floors,
    ) -> Result<Self> {
        let tau = estimate_tau(theta, n_mc, seed)?;
        let psi = theta.to_psi(floors)?;
        let j = mapping_jacobian(
            MappingKind::UnsupervisedPsi,
            data,
            &[],
            &psi.pack(),
            theta.components(),
            theta.dim(),
            floors,
        )?;
        let s = summarize_jacobian(&j);
        let semi_ratio = semi_r
            .map(|r| semi_shrinkage_check(data, r, seed.wrapping_add(1), &psi, floors))
            .transpose()?;
        Ok(SeparationReport {
            tau: tau.tau,
            tau_std_err: tau.std_err,
            mapping_norm: s.norm,
            spectral_radius: s.radius,
            semi_ratio,
        })
    }

    /// Flat `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (i, (t, se)) in self.tau.iter().zip(&self.tau_std_err).enumerate() {
            out.push_str(&format!("tau_{i} = {t:e}\ntau_{i}_std_err = {se:e}\n"));
        }
        out.push_str(&format!("mapping_norm = {:e}\n", self.mapping_norm));
        out.push_str(&format!("spectral_radius = {:e}\n", self.spectral_radius));
        if let Some(r) = self.semi_ratio {
            out.push_str(&format!("semi_ratio = {r:e}\n"));
        }
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut tau = Vec::new();
        let mut tau_std_err = Vec::new();
        let mut norm = None;
        let mut radius = None;
        let mut semi_ratio = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("not a key = value line: {line:?}")))?;
            let key = key.trim();
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| Error::validation(format!("bad number for {key}")))?;
            match key {
                "mapping_norm" => norm = Some(value),
                "spectral_radius" => radius = Some(value),
                "semi_ratio" => semi_ratio = Some(value),
                _ => {
                    let rest = key
                        .strip_prefix("tau_")
                        .ok_or_else(|| Error::validation(format!("unknown key {key}")))?;
                    let (idx, target) = match rest.strip_suffix("_std_err") {
                        Some(i) => (i, &mut tau_std_err),
                        None => (rest, &mut tau),
                    };
                    let idx: usize = idx.parse().map_err(|_| Error::validation(format!("unknown key {key}")))?;
                    if target.len() <= idx {
                        target.resize(idx + 1, f64::NAN);
                    }
                    target[idx] = value;
                }
            }
        }
        Ok(SeparationReport {
            tau,
            tau_std_err,
            mapping_norm: norm.ok_or_else(|| Error::validation("missing mapping_norm"))?,
            spectral_radius: radius.ok_or_else(|| Error::validation("missing spectral_radius"))?,
            semi_ratio,
        })
    }
}
