//! The separation diagnostics run and the MNIST pipeline.

use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::experiment::{derive_seed, write_atomic};
use crate::diagnostics::{align_components, misclustering_err, SeparationReport};
use crate::em::{em_fit, predict_labels, EmConfig};
use crate::error::{Error, Result};
use crate::federated::{run_federated, AlgoConfig, Algorithm};
use crate::gmm::{sample_gmm, Floors, Sample, ThetaParams};
use crate::network::{build_topology, NetworkMetrics, TopologyKind};
use crate::partition::{partition, write_clients, Regime};
use crate::realdata::idx::{load_images, load_labels};
use crate::realdata::{kmeans_init, PcaModel};

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnoseOutput {
    pub reports: Vec<(f64, SeparationReport)>,
    pub network: NetworkMetrics,
}

/// Separation report per mean shift at the true parameters, plus the
/// configured network's structure constants. Writes `diagnose/C{shift}.txt`.
pub fn run_diagnose(cfg: &ExperimentConfig, n_eval: usize, n_mc: usize, out: &Path) -> Result<DiagnoseOutput> {
    cfg.validate()?;
    let topology = build_topology(cfg.network.topology, cfg.scale.clients, cfg.network.self_loops)?;
    let network = topology.metrics();
    let dir = out.join("diagnose");
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for &shift in &cfg.model.shifts {
        let theta0 = cfg.design(shift).theta0(cfg.seed)?;
        let data = sample_gmm(&theta0, n_eval, derive_seed(cfg.seed, 11))?;
        let report = SeparationReport::compute(&theta0, &data, n_mc, derive_seed(cfg.seed, 12), Some(0.5), &cfg.floors)?;
        let mut text = report.to_kv();
        text.push_str(&format!(
            "se_w = {:e}\nsigma_w = {:e}\nrho_w = {:e}\n",
            network.se_w, network.sigma_w, network.rho_w
        ));
        write_atomic(&dir.join(format!("C{shift}.txt")), text.as_bytes())?;
        reports.push((shift, report));
    }
    Ok(DiagnoseOutput { reports, network })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistConfig {
    pub data_dir: PathBuf,
    pub target_ratio: f64,
    pub subsample: usize,
    pub components: usize,
    pub clients: usize,
    pub regime: Regime,
    pub rounds: usize,
    pub eta: f64,
    pub seed: u64,
    /// When set, the reduced client data is written here as `clients.bin`.
    pub out_dir: Option<PathBuf>,
}

impl MnistConfig {
    pub fn desk(data_dir: PathBuf) -> Self {
        MnistConfig {
            data_dir,
            target_ratio: 0.7,
            subsample: 2000,
            components: 10,
            clients: 5,
            regime: Regime::Homogeneous,
            rounds: 300,
            eta: 0.05,
            seed: 7,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MnistReport {
    pub pca_dim: usize,
    pub explained: f64,
    /// Misclustering error on the test set of every client's final estimate.
    pub client_err: Vec<f64>,
    pub mnem_err: f64,
    pub em_err: f64,
}

const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// The four IDX files in `dir`, plain or gzipped, if all are present.
pub fn find_mnist_files(dir: &Path) -> Option<[PathBuf; 4]> {
    let find = |name: &str| {
        [name.to_string(), format!("{name}.gz")]
            .into_iter()
            .map(|n| dir.join(n))
            .find(|p| p.is_file())
    };
    Some([find(FILES[0])?, find(FILES[1])?, find(FILES[2])?, find(FILES[3])?])
}

fn image_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (n, d, pixels) = load_images(path)?;
    Ok(DMatrix::from_row_slice(n, d, &pixels) / 255.0)
}

fn to_samples(z: &DMatrix<f64>, labels: &[usize]) -> Vec<Sample> {
    z.row_iter()
        .zip(labels)
        .map(|(r, &l)| Sample::new(r.transpose(), Some(l)))
        .collect()
}

/// Fits PCA on the training images only (target explained ratio).
pub fn mnist_pca(files: &[PathBuf; 4], target_ratio: f64) -> Result<PcaModel> {
    PcaModel::fit(&image_matrix(&files[0])?, target_ratio)
}

pub fn run_mnist(cfg: &MnistConfig) -> Result<MnistReport> {
    let files = find_mnist_files(&cfg.data_dir)
        .ok_or_else(|| Error::Config(format!("MNIST IDX files not found in {}", cfg.data_dir.display())))?;
    let train = image_matrix(&files[0])?;
    let train_labels = load_labels(&files[1])?;
    let test = image_matrix(&files[2])?;
    let test_labels = load_labels(&files[3])?;
    if train.nrows() != train_labels.len() || test.nrows() != test_labels.len() {
        return Err(Error::validation("image and label counts differ"));
    }
    let pca = PcaModel::fit(&train, cfg.target_ratio)?;
    log::info!("PCA keeps {} components", pca.dim());

    let mut idx: Vec<usize> = (0..train.nrows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1)));
    idx.truncate(cfg.subsample.min(idx.len()));
    let sub = DMatrix::from_fn(idx.len(), train.ncols(), |r, c| train[(idx[r], c)]);
    let sub_labels: Vec<usize> = idx.iter().map(|&i| train_labels[i]).collect();
    let data = to_samples(&pca.transform(&sub)?, &sub_labels);
    let eval = to_samples(&pca.transform(&test)?, &test_labels);
    drop(train);

    let floors = Floors::default();
    let clients = partition(&data, cfg.clients, cfg.regime, derive_seed(cfg.seed, 2))?;
    if let Some(dir) = &cfg.out_dir {
        std::fs::create_dir_all(dir)?;
        let mut buf = Vec::new();
        write_clients(&mut buf, &clients)?;
        write_atomic(&dir.join("clients.bin"), &buf)?;
    }
    // local k-means starts, relabeled to agree with the first client's ordering
    let mut inits = Vec::with_capacity(clients.len());
    for (m, c) in clients.iter().enumerate() {
        let init = kmeans_init(&c.samples, cfg.components, derive_seed(cfg.seed, 10 + m as u64), &floors)
            .map_err(|e| e.in_client(m))?;
        inits.push(init);
    }
    let reference = inits[0].clone();
    let inits: Vec<ThetaParams> = inits
        .iter()
        .map(|t| align_components(t, &reference))
        .collect::<Result<_>>()?;

    let topology = build_topology(TopologyKind::Circle, cfg.clients, true)?;
    let mut algo = AlgoConfig::new(Algorithm::Mnem, cfg.eta, cfg.rounds);
    algo.record_every = cfg.rounds.max(1);
    let run = run_federated(&clients, &topology, &inits, &algo)?;
    let truth: Vec<usize> = eval.iter().map(|s| s.label.expect("test labels present")).collect();
    let mut client_err = Vec::new();
    for theta in run.final_state().thetas(&floors)? {
        client_err.push(misclustering_err(&predict_labels(&eval, &theta)?, &truth, cfg.components)?);
    }
    let mnem_err = client_err.iter().sum::<f64>() / client_err.len() as f64;

    let em_init = kmeans_init(&data, cfg.components, derive_seed(cfg.seed, 3), &floors)?;
    let em = em_fit(&data, &em_init, &EmConfig::default(), false)?.params;
    let em_err = misclustering_err(&predict_labels(&eval, &em)?, &truth, cfg.components)?;
    Ok(MnistReport {
        pca_dim: pca.dim(),
        explained: pca.explained_ratio.iter().sum(),
        client_err,
        mnem_err,
        em_err,
    })
}
