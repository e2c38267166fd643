//! Experiment configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::MixtureDesign;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::federated::Algorithm;
use crate::gmm::Floors;
use crate::network::TopologyKind;
use crate::partition::Regime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub p: usize,
    pub alpha: Vec<f64>,
    pub rho: Vec<f64>,
    /// Mean shifts to sweep.
    pub shifts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScaleSection {
    /// Total sample size N, split evenly across clients.
    pub samples: usize,
    pub clients: usize,
    pub replicates: usize,
    pub rounds: usize,
    pub record_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub topology: TopologyKind,
    pub self_loops: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlgorithmSection {
    /// Unsupervised algorithms; semi variants are added for positive labeled ratios.
    pub run: Vec<Algorithm>,
    /// Momentum grid for MNEM and semi-MNEM.
    pub eta: Vec<f64>,
    /// Learning-rate grid for NGD.
    pub ngd_eta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Standard deviation of the elementwise noise added to the true parameters.
    pub noise_sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineSection {
    pub em_max_iters: usize,
    pub em_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub regimes: Vec<Regime>,
    pub labeled_ratios: Vec<f64>,
    pub model: ModelSection,
    pub scale: ScaleSection,
    pub network: NetworkSection,
    pub algorithms: AlgorithmSection,
    pub init: InitSection,
    pub baselines: BaselineSection,
    #[serde(default)]
    pub floors: Floors,
}

impl ExperimentConfig {
    pub fn profile(profile: Profile) -> Self {
        let design = MixtureDesign::default();
        let (name, samples, clients, replicates, rounds, record_every) = match profile {
            Profile::Desk => ("desk", 4000, 8, 20, 3000, 10),
            Profile::Paper => ("paper", 30000, 20, 100, 20000, 50),
        };
        ExperimentConfig {
            name: name.into(),
            seed: 20240601,
            regimes: vec![Regime::Homogeneous, Regime::Heterogeneous],
            labeled_ratios: vec![0.0, 0.05, 0.1, 0.5, 1.0],
            model: ModelSection {
                p: design.p,
                alpha: design.alpha,
                rho: design.rho,
                shifts: vec![1.0, 2.0, 4.0],
            },
            scale: ScaleSection {
                samples,
                clients,
                replicates,
                rounds,
                record_every,
            },
            network: NetworkSection {
                topology: TopologyKind::Circle,
                self_loops: true,
            },
            algorithms: AlgorithmSection {
                run: vec![Algorithm::Nnem, Algorithm::Mnem],
                eta: vec![0.01, 0.02, 0.05],
                ngd_eta: vec![0.15],
            },
            init: InitSection { noise_sd: 0.1 },
            baselines: BaselineSection {
                em_max_iters: 5000,
                em_tol: 1e-10,
            },
            floors: Floors::default(),
        }
    }

    pub fn design(&self, shift: f64) -> MixtureDesign {
        MixtureDesign {
            p: self.model.p,
            alpha: self.model.alpha.clone(),
            rho: self.model.rho.clone(),
            c: shift,
        }
    }

    pub fn em_config(&self) -> EmConfig {
        EmConfig {
            max_iters: self.baselines.em_max_iters,
            tol: self.baselines.em_tol,
            floors: self.floors,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.model.shifts.is_empty() || self.regimes.is_empty() || self.labeled_ratios.is_empty() {
            return bad("shifts, regimes and labeled_ratios must be nonempty".into());
        }
        for &c in &self.model.shifts {
            self.design(c).validate()?;
        }
        let sum: f64 = self.model.alpha.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.model.alpha.iter().any(|a| !(*a > 0.0)) {
            return bad("alpha must be positive and sum to one".into());
        }
        if let Some(r) = self.labeled_ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
            return bad(format!("labeled ratio {r} outside [0, 1]"));
        }
        let s = &self.scale;
        if s.clients < 1 || s.replicates < 1 || s.record_every < 1 {
            return bad("clients, replicates and record_every must be at least 1".into());
        }
        let k = self.model.alpha.len();
        if s.samples / s.clients.max(1) < k * self.model.p {
            return bad(format!(
                "{} samples over {} clients leaves fewer than K p = {} per client",
                s.samples,
                s.clients,
                k * self.model.p
            ));
        }
        if self.algorithms.run.is_empty() {
            return bad("no algorithms selected".into());
        }
        if self.algorithms.run.iter().any(|a| a.is_semi()) {
            return bad("list only unsupervised algorithms; semi variants follow the labeled ratios".into());
        }
        if self.algorithms.run.contains(&Algorithm::Mnem) && self.algorithms.eta.is_empty() {
            return bad("MNEM needs at least one eta".into());
        }
        if self.algorithms.eta.iter().any(|e| !(*e > 0.0 && *e <= 1.0)) {
            return bad("momentum values must lie in (0, 1]".into());
        }
        if self.algorithms.run.contains(&Algorithm::Ngd) && self.algorithms.ngd_eta.is_empty() {
            return bad("NGD needs at least one learning rate".into());
        }
        if self.algorithms.ngd_eta.iter().any(|e| !(*e > 0.0)) {
            return bad("learning rates must be positive".into());
        }
        if !(self.init.noise_sd >= 0.0) {
            return bad("noise_sd must be nonnegative".into());
        }
        if self.baselines.em_max_iters == 0 || !(self.baselines.em_tol > 0.0) {
            return bad("baseline EM needs positive max_iters and tol".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
