//! The replication grid: data generation, algorithm runs, baselines and CSV output.

use std::path::{Path, PathBuf};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use crate::diagnostics::align_components;
use crate::em::{em_fit_masked, local_fit_all};
use crate::error::{Error, Result};
use crate::federated::{run_federated, write_metadata, AlgoConfig, Algorithm, TraceRow};
use crate::gmm::{neg_log_likelihood, sample_gmm, Floors, Sample, ThetaParams};
use crate::network::{build_topology, Topology};
use crate::partition::{partition, select_labeled, ClientDataset, Regime};

/// Independent seed for stream `stream` of replicate seed `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub shift: f64,
    pub regime: Regime,
    pub ratio: f64,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("C{}_{}_r{}", self.shift, self.regime, self.ratio)
    }
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for &shift in &cfg.model.shifts {
        for &regime in &cfg.regimes {
            for &ratio in &cfg.labeled_ratios {
                out.push(Cell { shift, regime, ratio });
            }
        }
    }
    out
}

/// One algorithm at one step size, as it appears in the trace.
#[derive(Clone, Debug)]
pub struct AlgoRun {
    pub label: String,
    pub cfg: AlgoConfig,
}

/// Unsupervised algorithms when `ratio == 0`; their semi variants otherwise
/// (NNEM has none).
pub fn algo_runs(cfg: &ExperimentConfig, ratio: f64) -> Vec<AlgoRun> {
    let semi = ratio > 0.0;
    let mut out = Vec::new();
    let mut push = |algorithm: Algorithm, eta: f64, label: String| {
        let mut c = AlgoConfig::new(algorithm, eta, cfg.scale.rounds);
        c.record_every = cfg.scale.record_every;
        c.floors = cfg.floors;
        out.push(AlgoRun { label, cfg: c });
    };
    for &a in &cfg.algorithms.run {
        match (a, semi) {
            (Algorithm::Nnem, false) => push(a, 1.0, "nnem".into()),
            (Algorithm::Nnem, true) => {}
            (Algorithm::Mnem, _) => {
                let algo = if semi { Algorithm::SemiMnem } else { Algorithm::Mnem };
                for &eta in &cfg.algorithms.eta {
                    push(algo, eta, format!("{algo}@{eta}"));
                }
            }
            (Algorithm::Ngd, _) => {
                let algo = if semi { Algorithm::SemiNgd } else { Algorithm::Ngd };
                for &eta in &cfg.algorithms.ngd_eta {
                    push(algo, eta, format!("{algo}@{eta}"));
                }
            }
            (Algorithm::SemiMnem | Algorithm::SemiNgd, _) => {}
        }
    }
    out
}

/// Everything one replicate of one cell needs.
#[derive(Clone, Debug)]
pub struct ReplicateData {
    pub theta0: ThetaParams,
    pub clients: Vec<ClientDataset>,
    pub init: ThetaParams,
}

impl ReplicateData {
    /// All client samples in client order.
    pub fn pooled(&self) -> Vec<Sample> {
        self.clients.iter().flat_map(|c| c.samples.iter().cloned()).collect()
    }

    /// Observed labels of the pooled sample.
    pub fn pooled_labels(&self) -> Result<Vec<Option<usize>>> {
        let mut out = Vec::new();
        for c in &self.clients {
            out.extend(c.observed_labels()?);
        }
        Ok(out)
    }
}

/// `theta` plus elementwise `N(0, sd^2)` noise on the packed vector, projected.
pub fn perturbed_init(theta: &ThetaParams, sd: f64, seed: u64, floors: &Floors) -> Result<ThetaParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f64> = theta
        .pack()
        .iter()
        .map(|x| x + sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    ThetaParams::unpack(&v, theta.components(), theta.dim())?.project(floors)
}

pub fn prepare_replicate(cfg: &ExperimentConfig, cell: &Cell, replicate: usize) -> Result<ReplicateData> {
    let seed = cfg.seed.wrapping_add(replicate as u64);
    let theta0 = cfg.design(cell.shift).theta0(seed)?;
    let data = sample_gmm(&theta0, cfg.scale.samples, derive_seed(seed, 1))?;
    let mut clients = partition(&data, cfg.scale.clients, cell.regime, derive_seed(seed, 2))?;
    select_labeled(&mut clients, cell.ratio, derive_seed(seed, 3))?;
    let init = perturbed_init(&theta0, cfg.init.noise_sd, derive_seed(seed, 4), &cfg.floors)?;
    Ok(ReplicateData { theta0, clients, init })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    /// `em`, `semi-em` or `local`.
    pub method: String,
    pub replicate: usize,
    /// Client index for `local`; -1 for whole-sample fits.
    pub client: i64,
    pub mse: f64,
    pub loglik: f64,
}

fn squared_error(est: &ThetaParams, theta0: &ThetaParams) -> Result<f64> {
    let aligned = align_components(est, theta0)?;
    Ok(aligned
        .pack()
        .iter()
        .zip(theta0.pack())
        .map(|(a, b)| (a - b).powi(2))
        .sum())
}

/// Runs every algorithm and baseline on one replicate.
pub fn run_replicate(
    cfg: &ExperimentConfig,
    cell: &Cell,
    replicate: usize,
    topology: &Topology,
) -> Result<(Vec<TraceRow>, Vec<BaselineRow>)> {
    let rep = prepare_replicate(cfg, cell, replicate)?;
    let mut trace = Vec::new();
    for run in algo_runs(cfg, cell.ratio) {
        let out = run_federated(&rep.clients, topology, std::slice::from_ref(&rep.init), &run.cfg)
            .map_err(|e| Error::Run {
                label: run.label.clone(),
                source: Box::new(e),
            })?;
        for snap in &out.snapshots {
            for (m, est) in snap.thetas(&cfg.floors)?.iter().enumerate() {
                trace.push(TraceRow {
                    algorithm: run.label.clone(),
                    replicate,
                    t: snap.t,
                    client: m,
                    mse: squared_error(est, &rep.theta0)?,
                    loglik: -neg_log_likelihood(&rep.clients[m].samples, est, false)?,
                });
            }
        }
    }
    let em_cfg = cfg.em_config();
    let pooled = rep.pooled();
    let mut baselines = Vec::new();
    let em = em_fit_masked(&pooled, &[], &rep.init, &em_cfg)?.params;
    baselines.push(BaselineRow {
        method: "em".into(),
        replicate,
        client: -1,
        mse: squared_error(&em, &rep.theta0)?,
        loglik: -neg_log_likelihood(&pooled, &em, false)?,
    });
    let semi = cell.ratio > 0.0;
    if semi {
        let hard = rep.pooled_labels()?;
        let fit = em_fit_masked(&pooled, &hard, &rep.init, &em_cfg)?.params;
        baselines.push(BaselineRow {
            method: "semi-em".into(),
            replicate,
            client: -1,
            mse: squared_error(&fit, &rep.theta0)?,
            loglik: -neg_log_likelihood(&pooled, &fit, false)?,
        });
    }
    // A client holding labels for only some components has no local fit;
    // its local row is left out rather than failing the replicate.
    for (m, client) in rep.clients.iter().enumerate() {
        match local_fit_all(std::slice::from_ref(client), std::slice::from_ref(&rep.init), &em_cfg, semi) {
            Ok(local) => baselines.push(BaselineRow {
                method: "local".into(),
                replicate,
                client: m as i64,
                mse: squared_error(&local[0], &rep.theta0)?,
                loglik: -neg_log_likelihood(&client.samples, &local[0], false)?,
            }),
            Err(e) => log::warn!(
                "cell {} replicate {replicate}: no local baseline for client {m}: {e}",
                cell.dir_name()
            ),
        }
    }
    Ok((trace, baselines))
}

/// Writes `bytes` to a sibling temporary file, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const TRACE_FILE: &str = "trace.csv";
pub const BASELINE_FILE: &str = "baselines.csv";
pub const ERROR_FILE: &str = "errors.txt";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Clone, Debug, PartialEq)]
pub struct CellOutcome {
    pub cell: String,
    pub failures: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
}

impl RunOutcome {
    pub fn failed_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.failures.is_empty()).count()
    }
}

pub fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(cell.dir_name())
}

/// Runs the whole grid into `out`. Replicates run on the current rayon pool;
/// failures are recorded per cell and do not stop other cells.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out.join("cells"))?;
    write_atomic(&out.join(CONFIG_FILE), cfg.to_toml()?.as_bytes())?;
    let topology = build_topology(cfg.network.topology, cfg.scale.clients, cfg.network.self_loops)?;
    let metrics = topology.metrics();
    if !metrics.rho_below_one() {
        log::warn!(
            "network constant rho_w = {:.4} is not below one; MNEM guarantees do not apply",
            metrics.rho_w
        );
    }
    let mut outcomes = Vec::new();
    for cell in cells(cfg) {
        let dir = cell_dir(out, &cell);
        std::fs::create_dir_all(&dir)?;
        log::info!("cell {}", cell.dir_name());
        let results: Vec<Result<(Vec<TraceRow>, Vec<BaselineRow>)>> = (0..cfg.scale.replicates)
            .into_par_iter()
            .map(|s| run_replicate(cfg, &cell, s, &topology))
            .collect();
        let mut trace = Vec::new();
        let mut baselines = Vec::new();
        let mut failures = Vec::new();
        for (s, r) in results.into_iter().enumerate() {
            match r {
                Ok((t, b)) => {
                    trace.extend(t);
                    baselines.extend(b);
                }
                Err(e) => {
                    log::error!("cell {} replicate {s}: {e}", cell.dir_name());
                    failures.push(format!("replicate {s}: {e}"));
                }
            }
        }
        write_atomic(&dir.join(TRACE_FILE), &csv_bytes(&trace)?)?;
        write_atomic(&dir.join(BASELINE_FILE), &csv_bytes(&baselines)?)?;
        let err_path = dir.join(ERROR_FILE);
        if failures.is_empty() {
            if err_path.exists() {
                std::fs::remove_file(&err_path)?;
            }
        } else {
            write_atomic(&err_path, failures.join("\n").as_bytes())?;
        }
        for run in algo_runs(cfg, cell.ratio) {
            let extra = [
                ("label", run.label.clone()),
                ("shift", cell.shift.to_string()),
                ("regime", cell.regime.to_string()),
                ("labeled_ratio", cell.ratio.to_string()),
                ("topology", cfg.network.topology.to_string()),
                ("se_w", metrics.se_w.to_string()),
                ("sigma_w", metrics.sigma_w.to_string()),
                ("rho_w", metrics.rho_w.to_string()),
            ];
            let name = format!("meta-{}.toml", run.label.replace('@', "_"));
            write_metadata(&dir.join(name), &run.cfg, &extra)?;
        }
        outcomes.push(CellOutcome {
            cell: cell.dir_name(),
            failures,
        });
    }
    Ok(RunOutcome {
        out_dir: out.to_path_buf(),
        cells: outcomes,
    })
}
