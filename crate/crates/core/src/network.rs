//! Directed communication topologies and their structural metrics.
//!
//! `adjacency[(m1, m2)] == 1` means client `m1` receives from `m2`. Weights are
//! the row-normalized adjacency.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::linalg::spectral_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TopologyKind {
    /// Each client receives from both ring neighbors.
    Circle,
    /// Client 0 is the hub; leaves talk only to the hub.
    Star,
    /// Directed ring lattice: each client receives from its `d` successors.
    FixedDegree(usize),
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyKind::Circle => f.write_str("circle"),
            TopologyKind::Star => f.write_str("star"),
            TopologyKind::FixedDegree(d) => write!(f, "fixed-degree:{d}"),
        }
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "circle" => Ok(TopologyKind::Circle),
            "star" => Ok(TopologyKind::Star),
            "fixed-degree" => Ok(TopologyKind::FixedDegree(4)),
            other => other
                .strip_prefix("fixed-degree:")
                .and_then(|d| d.parse().ok())
                .map(TopologyKind::FixedDegree)
                .ok_or_else(|| Error::Config(format!("unknown topology {other:?}"))),
        }
    }
}

impl TryFrom<String> for TopologyKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TopologyKind> for String {
    fn from(k: TopologyKind) -> String {
        k.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    adjacency: DMatrix<u8>,
    weights: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkMetrics {
    pub se_w: f64,
    pub sigma_w: f64,
    pub rho_w: f64,
}

impl NetworkMetrics {
    /// Whether the combined structure constant stays below one.
    pub fn rho_below_one(&self) -> bool {
        self.rho_w < 1.0
    }
}

pub fn build_topology(kind: TopologyKind, m: usize, self_loops: bool) -> Result<Topology> {
    if m < 2 {
        return Err(Error::validation(format!("need at least 2 clients, got {m}")));
    }
    let mut adj = DMatrix::<u8>::zeros(m, m);
    if self_loops {
        for i in 0..m {
            adj[(i, i)] = 1;
        }
    }
    match kind {
        TopologyKind::Circle => {
            for i in 0..m {
                adj[(i, (i + 1) % m)] = 1;
                adj[(i, (i + m - 1) % m)] = 1;
            }
        }
        TopologyKind::Star => {
            for i in 1..m {
                adj[(0, i)] = 1;
                adj[(i, 0)] = 1;
            }
        }
        TopologyKind::FixedDegree(d) => {
            if d == 0 || d >= m {
                return Err(Error::validation(format!(
                    "fixed degree {d} must lie in [1, {}]",
                    m - 1
                )));
            }
            for i in 0..m {
                for s in 1..=d {
                    adj[(i, (i + s) % m)] = 1;
                }
            }
        }
    }
    Topology::from_adjacency(adj)
}

impl Topology {
    pub fn from_adjacency(adjacency: DMatrix<u8>) -> Result<Self> {
        if !adjacency.is_square() || adjacency.nrows() == 0 {
            return Err(Error::validation("adjacency must be square and nonempty"));
        }
        let m = adjacency.nrows();
        let mut weights = DMatrix::zeros(m, m);
        for i in 0..m {
            let row = adjacency.row(i);
            if row.iter().any(|&a| a > 1) {
                return Err(Error::validation("adjacency entries must be 0 or 1"));
            }
            let deg = row.iter().map(|&a| a as usize).sum::<usize>();
            if deg == 0 {
                return Err(Error::validation(format!("client {i} has no in-neighbors")));
            }
            for j in 0..m {
                if adjacency[(i, j)] == 1 {
                    weights[(i, j)] = 1.0 / deg as f64;
                }
            }
        }
        Ok(Topology { adjacency, weights })
    }

    pub fn clients(&self) -> usize {
        self.weights.nrows()
    }

    pub fn adjacency(&self) -> &DMatrix<u8> {
        &self.adjacency
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// In-neighbors of `m` with their weights, in index order.
    pub fn in_neighbors(&self, m: usize) -> Vec<(usize, f64)> {
        (0..self.clients())
            .filter(|&j| self.adjacency[(m, j)] == 1)
            .map(|j| (j, self.weights[(m, j)]))
            .collect()
    }

    /// `sqrt(M^-1 |W^T 1 - 1|^2)`: spread of the column sums around one.
    pub fn se_w(&self) -> f64 {
        let m = self.clients();
        let ones = DVector::from_element(m, 1.0);
        let col_sums = self.weights.transpose() * &ones;
        ((col_sums - ones).norm_squared() / m as f64).sqrt()
    }

    /// Square root of the largest eigenvalue of `W^T (I - 11^T / M) W`.
    pub fn sigma_w(&self) -> f64 {
        let gram = centered_gram(&self.weights);
        SymmetricEigen::new(gram).eigenvalues.max().max(0.0).sqrt()
    }

    pub fn rho_w(&self) -> f64 {
        self.sigma_w() + self.se_w()
    }

    pub fn metrics(&self) -> NetworkMetrics {
        let se_w = self.se_w();
        let sigma_w = self.sigma_w();
        NetworkMetrics {
            se_w,
            sigma_w,
            rho_w: se_w + sigma_w,
        }
    }

    /// Writes one `m1 m2` line per edge (0-indexed, `m1` receives from `m2`).
    pub fn write_edge_list<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "# clients {}", self.clients())?;
        for i in 0..self.clients() {
            for j in 0..self.clients() {
                if self.adjacency[(i, j)] == 1 {
                    writeln!(w, "{i} {j}")?;
                }
            }
        }
        Ok(())
    }

    /// Reads an edge list. The client count comes from a `# clients M`
    /// header when present, else from the largest index.
    pub fn read_edge_list<R: BufRead>(r: R) -> Result<Self> {
        let mut edges = Vec::new();
        let mut declared = None;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if let Some(rest) = t.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("clients") {
                    declared = Some(v.trim().parse::<usize>().map_err(|_| {
                        Error::validation(format!("line {}: bad client count", lineno + 1))
                    })?);
                }
                continue;
            }
            if t.is_empty() {
                continue;
            }
            let mut it = t.split_whitespace().map(str::parse::<usize>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
                _ => {
                    return Err(Error::validation(format!(
                        "line {}: expected two client indices, got {t:?}",
                        lineno + 1
                    )))
                }
            }
        }
        let inferred = edges.iter().map(|&(a, b)| a.max(b) + 1).max().unwrap_or(0);
        let m = declared.unwrap_or(inferred);
        if inferred > m {
            return Err(Error::validation(format!(
                "edge index {} exceeds declared client count {m}",
                inferred - 1
            )));
        }
        let mut adj = DMatrix::<u8>::zeros(m, m);
        for (a, b) in edges {
            adj[(a, b)] = 1;
        }
        Topology::from_adjacency(adj)
    }
}

fn centered_gram(w: &DMatrix<f64>) -> DMatrix<f64> {
    let m = w.nrows();
    let centering = DMatrix::identity(m, m) - DMatrix::from_element(m, m, 1.0 / m as f64);
    let g = w.transpose() * centering * w;
    (&g + g.transpose()) * 0.5
}

/// `|W^t - W_inf|` in spectral norm, with `W_inf = 1 1^T / M`.
pub fn power_gap(w: &DMatrix<f64>, t: u32) -> f64 {
    let m = w.nrows();
    let limit = DMatrix::from_element(m, m, 1.0 / m as f64);
    let mut pow = DMatrix::identity(m, m);
    for _ in 0..t {
        pow = &pow * w;
    }
    spectral_norm(&(pow - limit))
}
