//! Synchronous decentralized rounds: NNEM, MNEM, semi-MNEM and the NGD baseline.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::em::{psi_mapping, theta_mapping};
use crate::error::{Error, Result};
use crate::gmm::{softmax_in_place, vech_len, Floors, MixtureEval, PsiParams, Sample, ThetaParams};
use crate::network::Topology;
use crate::partition::ClientDataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Algorithm {
    Nnem,
    Mnem,
    SemiMnem,
    Ngd,
    SemiNgd,
}

impl Algorithm {
    pub fn is_semi(self) -> bool {
        matches!(self, Algorithm::SemiMnem | Algorithm::SemiNgd)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Nnem => "nnem",
            Algorithm::Mnem => "mnem",
            Algorithm::SemiMnem => "semi-mnem",
            Algorithm::Ngd => "ngd",
            Algorithm::SemiNgd => "semi-ngd",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "nnem" => Algorithm::Nnem,
            "mnem" => Algorithm::Mnem,
            "semi-mnem" => Algorithm::SemiMnem,
            "ngd" => Algorithm::Ngd,
            "semi-ngd" => Algorithm::SemiNgd,
            other => return Err(Error::Config(format!("unknown algorithm {other:?}"))),
        })
    }
}

impl TryFrom<String> for Algorithm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Algorithm> for String {
    fn from(a: Algorithm) -> String {
        a.as_str().to_string()
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AlgoConfig {
    pub algorithm: Algorithm,
    /// Momentum for MNEM variants, learning rate for NGD, unused by NNEM.
    pub eta: f64,
    pub rounds: usize,
    /// Snapshot stride; round 0 and the final round are always kept.
    pub record_every: usize,
    pub floors: Floors,
    /// Fixes every covariance to the given matrices (EM variants only).
    #[serde(skip)]
    pub known_sigma: Option<Vec<DMatrix<f64>>>,
}

impl AlgoConfig {
    pub fn new(algorithm: Algorithm, eta: f64, rounds: usize) -> Self {
        AlgoConfig {
            algorithm,
            eta,
            rounds,
            record_every: 1,
            floors: Floors::default(),
            known_sigma: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.algorithm {
            Algorithm::Nnem => {}
            Algorithm::Mnem | Algorithm::SemiMnem => {
                if !(self.eta > 0.0 && self.eta <= 1.0) {
                    return Err(Error::validation(format!("momentum must lie in (0, 1], got {}", self.eta)));
                }
            }
            Algorithm::Ngd | Algorithm::SemiNgd => {
                if !(self.eta > 0.0 && self.eta.is_finite()) {
                    return Err(Error::validation(format!("learning rate must be positive, got {}", self.eta)));
                }
            }
        }
        if self.record_every == 0 {
            return Err(Error::validation("record_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ClientEstimates {
    Theta(Vec<ThetaParams>),
    Psi(Vec<PsiParams>),
}

/// Every client's estimate after round `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct FederatedState {
    pub t: usize,
    pub estimates: ClientEstimates,
}

impl FederatedState {
    pub fn clients(&self) -> usize {
        match &self.estimates {
            ClientEstimates::Theta(v) => v.len(),
            ClientEstimates::Psi(v) => v.len(),
        }
    }

    /// Client vectors stacked in client order, in the algorithm's own coordinates.
    pub fn stacked(&self) -> Vec<f64> {
        match &self.estimates {
            ClientEstimates::Theta(v) => v.iter().flat_map(|t| t.pack()).collect(),
            ClientEstimates::Psi(v) => v.iter().flat_map(|p| p.pack()).collect(),
        }
    }

    /// Natural parameters of every client.
    pub fn thetas(&self, floors: &Floors) -> Result<Vec<ThetaParams>> {
        match &self.estimates {
            ClientEstimates::Theta(v) => Ok(v.clone()),
            ClientEstimates::Psi(v) => v.iter().map(|p| p.to_theta(floors)).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FederatedRun {
    pub algorithm: Algorithm,
    /// Round 0, every `record_every`-th round, and the last round.
    pub snapshots: Vec<FederatedState>,
}

impl FederatedRun {
    pub fn final_state(&self) -> &FederatedState {
        self.snapshots.last().expect("a run always records round 0")
    }
}

/// `(W kron I_q) v` for a stacked vector `v` of `M` blocks of length `q`.
pub fn average_stacked(w: &DMatrix<f64>, stacked: &[f64], q: usize) -> Vec<f64> {
    let m = w.nrows();
    let mut out = vec![0.0; m * q];
    for i in 0..m {
        for j in 0..m {
            let wij = w[(i, j)];
            if wij == 0.0 {
                continue;
            }
            for (o, x) in out[i * q..(i + 1) * q].iter_mut().zip(&stacked[j * q..(j + 1) * q]) {
                *o += wij * x;
            }
        }
    }
    out
}

fn neighbor_average_theta(topology: &Topology, m: usize, est: &[ThetaParams]) -> ThetaParams {
    let nb = topology.in_neighbors(m);
    let k = est[0].components();
    let p = est[0].dim();
    let mut alpha = vec![0.0; k];
    let mut mu = vec![DVector::zeros(p); k];
    let mut sigma = vec![DMatrix::zeros(p, p); k];
    for &(j, w) in &nb {
        for c in 0..k {
            alpha[c] += w * est[j].alpha[c];
            mu[c].axpy(w, &est[j].mu[c], 1.0);
            sigma[c] += &est[j].sigma[c] * w;
        }
    }
    ThetaParams { alpha, mu, sigma }
}

fn neighbor_average_psi(topology: &Topology, m: usize, est: &[PsiParams]) -> PsiParams {
    let nb = topology.in_neighbors(m);
    let k = est[0].components();
    let p = est[0].dim();
    let mut alpha = vec![0.0; k];
    let mut beta = vec![DVector::zeros(p); k];
    let mut gamma = vec![DMatrix::zeros(p, p); k];
    for &(j, w) in &nb {
        for c in 0..k {
            alpha[c] += w * est[j].alpha[c];
            beta[c].axpy(w, &est[j].beta[c], 1.0);
            gamma[c] += &est[j].gamma[c] * w;
        }
    }
    PsiParams { alpha, beta, gamma }
}

fn neighbor_average_flat(topology: &Topology, m: usize, est: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; est[0].len()];
    for (j, w) in topology.in_neighbors(m) {
        for (o, x) in out.iter_mut().zip(&est[j]) {
            *o += w * x;
        }
    }
    out
}

fn check_inputs(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
) -> Result<Vec<ThetaParams>> {
    cfg.validate()?;
    let m = clients.len();
    if m == 0 {
        return Err(Error::validation("no clients"));
    }
    if topology.clients() != m {
        return Err(Error::validation(format!(
            "topology has {} clients, data has {m}",
            topology.clients()
        )));
    }
    if inits.len() != 1 && inits.len() != m {
        return Err(Error::validation(format!("{} initial values for {m} clients", inits.len())));
    }
    let (k, p) = (inits[0].components(), inits[0].dim());
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let init = if inits.len() == 1 { &inits[0] } else { &inits[i] };
        if init.components() != k || init.dim() != p {
            return Err(Error::validation("initial values differ in shape").in_client(i));
        }
        init.validate(&cfg.floors).map_err(|e| e.in_client(i))?;
        if clients[i].is_empty() {
            return Err(Error::validation("client holds no samples").in_client(i));
        }
        let mut init = init.clone();
        if let Some(known) = &cfg.known_sigma {
            if known.len() != k {
                return Err(Error::validation("known covariances do not match K"));
            }
            init.sigma = known.clone();
        }
        out.push(init);
    }
    Ok(out)
}

fn hard_labels(client: &ClientDataset, semi: bool) -> Result<Vec<Option<usize>>> {
    if semi {
        client.observed_labels()
    } else {
        Ok(Vec::new())
    }
}

/// Synchronous round driver: every client reads round-t state and writes its
/// own round-(t+1) slot.
fn drive<S, F, R>(cfg: &AlgoConfig, init: Vec<S>, step: F, record: R) -> Result<FederatedRun>
where
    S: Send + Sync,
    F: Fn(usize, usize, &[S]) -> Result<S> + Sync,
    R: Fn(usize, &[S]) -> Result<FederatedState>,
{
    let mut state = init;
    let mut snapshots = vec![record(0, &state)?];
    for t in 1..=cfg.rounds {
        let prev = &state;
        let next: Vec<S> = (0..prev.len())
            .into_par_iter()
            .map(|m| {
                step(t, m, prev).map_err(|e| match e {
                    e @ Error::NonFiniteGradient { .. } => e,
                    e => Error::Round {
                        round: t,
                        client: m,
                        source: Box::new(e),
                    },
                })
            })
            .collect::<Result<_>>()?;
        state = next;
        if t % cfg.record_every == 0 || t == cfg.rounds {
            snapshots.push(record(t, &state)?);
        }
    }
    Ok(FederatedRun {
        algorithm: cfg.algorithm,
        snapshots,
    })
}

/// Runs the algorithm named in `cfg`. `inits` holds one shared starting
/// point or one per client.
pub fn run_federated(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
) -> Result<FederatedRun> {
    let inits = check_inputs(clients, topology, inits, cfg)?;
    let semi = cfg.algorithm.is_semi();
    let hard: Vec<Vec<Option<usize>>> = clients
        .iter()
        .enumerate()
        .map(|(m, c)| hard_labels(c, semi).map_err(|e| e.in_client(m)))
        .collect::<Result<_>>()?;
    let floors = cfg.floors;
    match cfg.algorithm {
        Algorithm::Nnem => drive(
            cfg,
            inits,
            |_, m, est: &[ThetaParams]| {
                let avg = neighbor_average_theta(topology, m, est);
                let mut next = theta_mapping(&clients[m].samples, &hard[m], &avg)?.project(&floors)?;
                if let Some(known) = &cfg.known_sigma {
                    next.sigma = known.clone();
                }
                Ok(next)
            },
            |t, est| {
                Ok(FederatedState {
                    t,
                    estimates: ClientEstimates::Theta(est.to_vec()),
                })
            },
        ),
        Algorithm::Mnem | Algorithm::SemiMnem => {
            let psi0 = inits.iter().map(|t| t.to_psi(&floors)).collect::<Result<Vec<_>>>()?;
            let eta = cfg.eta;
            drive(
                cfg,
                psi0,
                |_, m, est: &[PsiParams]| {
                    let avg = neighbor_average_psi(topology, m, est);
                    let mapped = psi_mapping(&clients[m].samples, &hard[m], &avg, &floors)?;
                    let mut next = momentum(&avg, &mapped, eta).project(&floors)?;
                    if let Some(known) = &cfg.known_sigma {
                        for (g, (a, s)) in next.gamma.iter_mut().zip(next.alpha.iter().zip(known)) {
                            *g = s * *a;
                        }
                    }
                    Ok(next)
                },
                |t, est| {
                    Ok(FederatedState {
                        t,
                        estimates: ClientEstimates::Psi(est.to_vec()),
                    })
                },
            )
        }
        Algorithm::Ngd | Algorithm::SemiNgd => {
            let (k, p) = (inits[0].components(), inits[0].dim());
            let u0 = inits.iter().map(ngd_encode).collect::<Result<Vec<_>>>()?;
            let eta = cfg.eta;
            drive(
                cfg,
                u0,
                |t, m, est: &[Vec<f64>]| {
                    let avg = neighbor_average_flat(topology, m, est);
                    let (grad, _) = ngd_gradient(&clients[m].samples, &hard[m], &avg, k, p)?;
                    if grad.iter().any(|g| !g.is_finite()) {
                        return Err(Error::NonFiniteGradient { round: t, client: m });
                    }
                    let next: Vec<f64> = avg.iter().zip(&grad).map(|(u, g)| u - eta * g).collect();
                    if next.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteGradient { round: t, client: m });
                    }
                    let theta = ngd_decode(&next, k, p)?;
                    if theta.validate(&floors).is_ok() {
                        Ok(next)
                    } else {
                        ngd_encode(&theta.project(&floors)?)
                    }
                },
                |t, est| {
                    let thetas = est.iter().map(|u| ngd_decode(u, k, p)).collect::<Result<_>>()?;
                    Ok(FederatedState {
                        t,
                        estimates: ClientEstimates::Theta(thetas),
                    })
                },
            )
        }
    }
}

fn momentum(avg: &PsiParams, mapped: &PsiParams, eta: f64) -> PsiParams {
    let keep = 1.0 - eta;
    PsiParams {
        alpha: avg.alpha.iter().zip(&mapped.alpha).map(|(a, f)| keep * a + eta * f).collect(),
        beta: avg.beta.iter().zip(&mapped.beta).map(|(a, f)| a * keep + f * eta).collect(),
        gamma: avg.gamma.iter().zip(&mapped.gamma).map(|(a, f)| a * keep + f * eta).collect(),
    }
}

fn with_algorithm(cfg: &AlgoConfig, algorithm: Algorithm) -> AlgoConfig {
    AlgoConfig {
        algorithm,
        ..cfg.clone()
    }
}

pub fn run_nnem(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
) -> Result<FederatedRun> {
    run_federated(clients, topology, inits, &with_algorithm(cfg, Algorithm::Nnem))
}

pub fn run_mnem(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
) -> Result<FederatedRun> {
    run_federated(clients, topology, inits, &with_algorithm(cfg, Algorithm::Mnem))
}

pub fn run_semi_mnem(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
) -> Result<FederatedRun> {
    run_federated(clients, topology, inits, &with_algorithm(cfg, Algorithm::SemiMnem))
}

/// NGD, optionally using each client's labeled subset.
pub fn run_ngd(
    clients: &[ClientDataset],
    topology: &Topology,
    inits: &[ThetaParams],
    cfg: &AlgoConfig,
    labeled_mode: bool,
) -> Result<FederatedRun> {
    let algo = if labeled_mode { Algorithm::SemiNgd } else { Algorithm::Ngd };
    run_federated(clients, topology, inits, &with_algorithm(cfg, algo))
}

/// Length of the unconstrained NGD vector.
pub fn ngd_len(k: usize, p: usize) -> usize {
    k + k * (p + vech_len(p))
}

/// Maps natural parameters to `(logits, mu_k, log-Cholesky_k)`. Logits are
/// centered; Cholesky factors are listed row-major over the lower triangle
/// with the diagonal on the log scale.
pub fn ngd_encode(theta: &ThetaParams) -> Result<Vec<f64>> {
    let k = theta.components();
    let p = theta.dim();
    let mut out = Vec::with_capacity(ngd_len(k, p));
    let logs: Vec<f64> = theta.alpha.iter().map(|a| a.ln()).collect();
    let mean = logs.iter().sum::<f64>() / k as f64;
    out.extend(logs.iter().map(|l| l - mean));
    for c in 0..k {
        out.extend(theta.mu[c].iter());
        let l = theta.sigma[c]
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { component: c })?
            .unpack();
        for i in 0..p {
            for j in 0..i {
                out.push(l[(i, j)]);
            }
            out.push(l[(i, i)].ln());
        }
    }
    Ok(out)
}

fn lower_from(v: &[f64], p: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(p, p);
    let mut idx = 0;
    for i in 0..p {
        for j in 0..i {
            l[(i, j)] = v[idx];
            idx += 1;
        }
        l[(i, i)] = v[idx].exp();
        idx += 1;
    }
    l
}

pub fn ngd_decode(u: &[f64], k: usize, p: usize) -> Result<ThetaParams> {
    if u.len() != ngd_len(k, p) {
        return Err(Error::validation(format!(
            "NGD vector has length {}, expected {}",
            u.len(),
            ngd_len(k, p)
        )));
    }
    let mut alpha = u[..k].to_vec();
    softmax_in_place(&mut alpha);
    let block = p + vech_len(p);
    let mut mu = Vec::with_capacity(k);
    let mut sigma = Vec::with_capacity(k);
    for c in 0..k {
        let b = &u[k + c * block..k + (c + 1) * block];
        mu.push(DVector::from_column_slice(&b[..p]));
        let l = lower_from(&b[p..], p);
        let s = &l * l.transpose();
        sigma.push((&s + s.transpose()) * 0.5);
    }
    Ok(ThetaParams { alpha, mu, sigma })
}

/// Gradient of the average negative log-likelihood in NGD coordinates,
/// together with that likelihood. Entries of `hard` that are `Some(k)`
/// contribute `-log(alpha_k phi_k(x))`.
pub fn ngd_gradient(
    data: &[Sample],
    hard: &[Option<usize>],
    u: &[f64],
    k: usize,
    p: usize,
) -> Result<(Vec<f64>, f64)> {
    if data.is_empty() {
        return Err(Error::validation("empty data"));
    }
    if !hard.is_empty() && hard.len() != data.len() {
        return Err(Error::validation("label mask length differs from data length"));
    }
    let theta = ngd_decode(u, k, p)?;
    let eval = MixtureEval::new(&theta)?;
    let mut prec = Vec::with_capacity(k);
    for c in 0..k {
        let chol = theta.sigma[c]
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { component: c })?;
        prec.push(chol.inverse());
    }
    let mut g_logit = vec![0.0; k];
    let mut g_mu = vec![DVector::<f64>::zeros(p); k];
    let mut g_sigma = vec![DMatrix::<f64>::zeros(p, p); k];
    let mut weight = vec![0.0; k];
    let mut terms = vec![0.0; k];
    let mut scratch = vec![0.0; p];
    let mut nll = 0.0;
    for (i, s) in data.iter().enumerate() {
        if s.x.len() != p {
            return Err(Error::validation(format!("sample {i} has dimension {}, expected {p}", s.x.len())));
        }
        match hard.get(i).copied().flatten() {
            Some(lab) if lab >= k => {
                return Err(Error::validation(format!("label {lab} out of range for K = {k}")))
            }
            Some(lab) => {
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
            g_logit[c] -= terms[c] - theta.alpha[c];
            let w = terms[c];
            if w == 0.0 {
                continue;
            }
            weight[c] += w;
            let sd = &prec[c] * (&s.x - &theta.mu[c]);
            g_mu[c].axpy(-w, &sd, 1.0);
            g_sigma[c].ger(-0.5 * w, &sd, &sd, 1.0);
        }
    }
    let n = data.len() as f64;
    let mut grad = Vec::with_capacity(ngd_len(k, p));
    grad.extend(g_logit.iter().map(|g| g / n));
    let block = p + vech_len(p);
    for c in 0..k {
        grad.extend(g_mu[c].iter().map(|g| g / n));
        let g = (&g_sigma[c] + &prec[c] * (0.5 * weight[c])) / n;
        let b = &u[k + c * block..k + (c + 1) * block];
        let l = lower_from(&b[p..], p);
        let dl = (&g + g.transpose()) * &l;
        for i in 0..p {
            for j in 0..i {
                grad.push(dl[(i, j)]);
            }
            grad.push(dl[(i, i)] * l[(i, i)]);
        }
    }
    Ok((grad, nll / n))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TraceRow {
    pub algorithm: String,
    pub replicate: usize,
    pub t: usize,
    pub client: usize,
    pub mse: f64,
    pub loglik: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Writes the run configuration next to a trace as TOML.
pub fn write_metadata(path: &Path, cfg: &AlgoConfig, extra: &[(&str, String)]) -> Result<()> {
    let mut table = toml::Table::try_from(cfg).map_err(|e| Error::Config(e.to_string()))?;
    for (key, value) in extra {
        table.insert((*key).to_string(), toml::Value::String(value.clone()));
    }
    std::fs::write(path, table.to_string())?;
    Ok(())
}
