//! Centralized EM, semi-supervised EM and the per-client mapping functions.
//!
//! Every mapping is one E+M sweep. Second moments are centered at the
//! *input* means (`mu` for the natural mapping, `beta / alpha` for the moment
//! mappings), so the mappings used by the network algorithms and by the
//! centralized fits are the same function.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{softmax_in_place, Floors, MixtureEval, PsiParams, Sample, ThetaParams};
use crate::partition::{observed_labels, ClientDataset};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once `|theta' - theta| <= tol (1 + |theta|)`.
    pub tol: f64,
    pub floors: Floors,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 2000,
            tol: 1e-8,
            floors: Floors::default(),
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::validation("max_iters must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::validation("tol must be positive"));
        }
        Ok(())
    }
}

/// Which one-sweep mapping to apply.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MappingKind {
    /// Natural parameters: normalized mean and covariance updates.
    UnsupervisedTheta,
    /// Moment parameters: un-normalized sums divided by the local size.
    UnsupervisedPsi,
    /// Moment parameters with hard indicators on labeled samples.
    SemiPsi,
}

/// Weighted sums from one E-step sweep over local data.
#[derive(Clone, Debug)]
pub(crate) struct SweepSums {
    pub weight: Vec<f64>,
    pub first: Vec<DVector<f64>>,
    /// Second moments about the input means.
    pub second: Vec<DMatrix<f64>>,
    /// Negative log-likelihood at the input (summed, not averaged).
    pub nll: f64,
    pub n: usize,
}

/// E-step over `data` at `theta`. `hard` is either empty or holds one entry
/// per sample; `Some(k)` replaces the responsibilities by the indicator of `k`.
pub(crate) fn sweep(data: &[Sample], hard: &[Option<usize>], theta: &ThetaParams) -> Result<SweepSums> {
    if data.is_empty() {
        return Err(Error::validation("empty data"));
    }
    if !hard.is_empty() && hard.len() != data.len() {
        return Err(Error::validation("label mask length differs from data length"));
    }
    let k = theta.components();
    let p = theta.dim();
    let eval = MixtureEval::new(theta)?;
    let mut weight = vec![0.0; k];
    let mut first = vec![DVector::zeros(p); k];
    let mut second = vec![DMatrix::zeros(p, p); k];
    let mut terms = vec![0.0; k];
    let mut scratch = vec![0.0; p];
    let mut diff = vec![0.0; p];
    let mut nll = 0.0;
    for (i, s) in data.iter().enumerate() {
        if s.x.len() != p {
            return Err(Error::validation(format!(
                "sample {i} has dimension {}, expected {p}",
                s.x.len()
            )));
        }
        match hard.get(i).copied().flatten() {
            Some(lab) => {
                if lab >= k {
                    return Err(Error::validation(format!("label {lab} out of range for K = {k}")));
                }
                nll -= eval.log_alpha(lab) + eval.log_phi(lab, &s.x, &mut scratch);
                terms.iter_mut().for_each(|t| *t = 0.0);
                terms[lab] = 1.0;
            }
            None => {
                eval.log_terms(&s.x, &mut terms, &mut scratch);
                nll -= softmax_in_place(&mut terms);
            }
        }
        for c in 0..k {
            let w = terms[c];
            if w == 0.0 {
                continue;
            }
            weight[c] += w;
            first[c].axpy(w, &s.x, 1.0);
            let mu = &theta.mu[c];
            for (d, (x, m)) in diff.iter_mut().zip(s.x.iter().zip(mu.iter())) {
                *d = x - m;
            }
            let sec = &mut second[c];
            for a in 0..p {
                let wa = w * diff[a];
                for b in a..p {
                    sec[(a, b)] += wa * diff[b];
                }
            }
        }
    }
    for sec in &mut second {
        for a in 0..p {
            for b in a + 1..p {
                sec[(b, a)] = sec[(a, b)];
            }
        }
    }
    if !nll.is_finite() {
        return Err(Error::validation("non-finite likelihood during E-step"));
    }
    Ok(SweepSums {
        weight,
        first,
        second,
        nll,
        n: data.len(),
    })
}

fn theta_from_sums(sums: &SweepSums) -> Result<ThetaParams> {
    let n = sums.n as f64;
    let k = sums.weight.len();
    let mut alpha = Vec::with_capacity(k);
    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for c in 0..k {
        let w = sums.weight[c];
        if !(w > 0.0) {
            return Err(Error::DegenerateComponent {
                component: c,
                reason: "no responsibility mass on local data".into(),
            });
        }
        alpha.push(w / n);
        mu.push(&sums.first[c] / w);
        sigma.push(&sums.second[c] / w);
    }
    Ok(ThetaParams { alpha, mu, sigma })
}

fn psi_from_sums(sums: &SweepSums) -> PsiParams {
    let n = sums.n as f64;
    PsiParams {
        alpha: sums.weight.iter().map(|w| w / n).collect(),
        beta: sums.first.iter().map(|b| b / n).collect(),
        gamma: sums.second.iter().map(|g| g / n).collect(),
    }
}

/// One EM sweep in natural parameters: `(F_alpha, F_mu, F_Sigma)`.
pub fn theta_mapping(data: &[Sample], hard: &[Option<usize>], theta: &ThetaParams) -> Result<ThetaParams> {
    theta_from_sums(&sweep(data, hard, theta)?)
}

/// One EM sweep in moment parameters: local sums divided by the local size.
pub fn psi_mapping(
    data: &[Sample],
    hard: &[Option<usize>],
    psi: &PsiParams,
    floors: &Floors,
) -> Result<PsiParams> {
    let theta = psi.to_theta(floors)?;
    Ok(psi_from_sums(&sweep(data, hard, &theta)?))
}

/// Applies a mapping to a packed parameter vector.
pub fn apply_mapping(
    kind: MappingKind,
    data: &[Sample],
    labeled_idx: &[usize],
    input: &[f64],
    k: usize,
    p: usize,
    floors: &Floors,
) -> Result<Vec<f64>> {
    match kind {
        MappingKind::UnsupervisedTheta => {
            let theta = ThetaParams::unpack(input, k, p)?;
            Ok(theta_mapping(data, &[], &theta)?.pack())
        }
        MappingKind::UnsupervisedPsi => {
            let psi = PsiParams::unpack(input, k, p)?;
            Ok(psi_mapping(data, &[], &psi, floors)?.pack())
        }
        MappingKind::SemiPsi => {
            let psi = PsiParams::unpack(input, k, p)?;
            let hard = observed_labels(data, labeled_idx)?;
            Ok(psi_mapping(data, &hard, &psi, floors)?.pack())
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: ThetaParams,
    /// Average negative log-likelihood at every iterate, starting with the input.
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn packed_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs EM from `init`. With `labeled_mode`, samples carrying labels enter
/// through their indicators (semi-supervised EM).
pub fn em_fit(data: &[Sample], init: &ThetaParams, cfg: &EmConfig, labeled_mode: bool) -> Result<EmFit> {
    let hard: Vec<Option<usize>> = if labeled_mode {
        data.iter().map(|s| s.label).collect()
    } else {
        Vec::new()
    };
    em_fit_masked(data, &hard, init, cfg)
}

pub(crate) fn em_fit_masked(
    data: &[Sample],
    hard: &[Option<usize>],
    init: &ThetaParams,
    cfg: &EmConfig,
) -> Result<EmFit> {
    cfg.validate()?;
    init.validate(&cfg.floors)?;
    let n = data.len() as f64;
    let mut theta = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        let sums = sweep(data, hard, &theta)?;
        trace.push(sums.nll / n);
        let next = theta_from_sums(&sums)?.project(&cfg.floors)?;
        iterations += 1;
        let old = theta.pack();
        let delta: Vec<f64> = next.pack().iter().zip(&old).map(|(a, b)| a - b).collect();
        theta = next;
        if packed_norm(&delta) <= cfg.tol * (1.0 + packed_norm(&old)) {
            converged = true;
            break;
        }
    }
    trace.push(sweep(data, hard, &theta)?.nll / n);
    Ok(EmFit {
        params: theta,
        trace,
        iterations,
        converged,
    })
}

/// Independent EM on every client ("Local" baseline). `inits` holds either
/// one shared starting point or one per client. With `semi`, each client's
/// labeled subset enters through its indicators.
pub fn local_fit_all(
    clients: &[ClientDataset],
    inits: &[ThetaParams],
    cfg: &EmConfig,
    semi: bool,
) -> Result<Vec<ThetaParams>> {
    if inits.len() != 1 && inits.len() != clients.len() {
        return Err(Error::validation(format!(
            "{} initial values for {} clients",
            inits.len(),
            clients.len()
        )));
    }
    clients
        .par_iter()
        .enumerate()
        .map(|(m, c)| {
            let init = if inits.len() == 1 { &inits[0] } else { &inits[m] };
            let min_n = init.components() * init.dim();
            if c.len() < min_n {
                return Err(Error::validation(format!(
                    "client has {} samples, needs at least K p = {min_n}",
                    c.len()
                ))
                .in_client(m));
            }
            let hard = if semi {
                c.observed_labels().map_err(|e| e.in_client(m))?
            } else {
                Vec::new()
            };
            em_fit_masked(&c.samples, &hard, init, cfg)
                .map(|f| f.params)
                .map_err(|e| e.in_client(m))
        })
        .collect()
}

/// Hard assignment by maximum posterior.
pub fn predict_labels(data: &[Sample], theta: &ThetaParams) -> Result<Vec<usize>> {
    let eval = MixtureEval::new(theta)?;
    let mut terms = vec![0.0; theta.components()];
    let mut scratch = vec![0.0; theta.dim()];
    data.iter()
        .map(|s| {
            if s.x.len() != theta.dim() {
                return Err(Error::validation("sample dimension mismatch"));
            }
            eval.log_terms(&s.x, &mut terms, &mut scratch);
            let best = terms
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            Ok(best.0)
        })
        .collect()
}
