//! Splitting a sample across clients and choosing labeled subsets.

use std::io::{Read, Write};

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gmm::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Homogeneous,
    Heterogeneous,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Homogeneous => f.write_str("homogeneous"),
            Regime::Heterogeneous => f.write_str("heterogeneous"),
        }
    }
}

/// One client's local data. `samples` keep their true labels; only the
/// indices in `labeled_idx` are treated as observed by semi-supervised fits.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    pub samples: Vec<Sample>,
    pub labeled_idx: Vec<usize>,
}

impl ClientDataset {
    pub fn new(client_id: usize, samples: Vec<Sample>) -> Self {
        ClientDataset {
            client_id,
            samples,
            labeled_idx: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Per-sample observed labels: `Some` only on the labeled subset.
    pub fn observed_labels(&self) -> Result<Vec<Option<usize>>> {
        observed_labels(&self.samples, &self.labeled_idx)
    }

    /// Copy of the samples with labels hidden outside the labeled subset.
    pub fn observed_samples(&self) -> Result<Vec<Sample>> {
        let labels = self.observed_labels()?;
        Ok(self
            .samples
            .iter()
            .zip(labels)
            .map(|(s, l)| Sample::new(s.x.clone(), l))
            .collect())
    }
}

pub(crate) fn observed_labels(samples: &[Sample], labeled_idx: &[usize]) -> Result<Vec<Option<usize>>> {
    let mut out = vec![None; samples.len()];
    for &i in labeled_idx {
        let s = samples
            .get(i)
            .ok_or_else(|| Error::validation(format!("labeled index {i} out of range")))?;
        out[i] = Some(
            s.label
                .ok_or_else(|| Error::validation(format!("labeled index {i} has no label")))?,
        );
    }
    Ok(out)
}

/// Distributes `data` over `m` clients of equal size. Excess samples beyond a
/// multiple of `m` are dropped with a warning.
pub fn partition(data: &[Sample], m: usize, regime: Regime, seed: u64) -> Result<Vec<ClientDataset>> {
    if m == 0 || data.len() < m {
        return Err(Error::validation(format!(
            "cannot split {} samples across {m} clients",
            data.len()
        )));
    }
    let n = data.len() / m;
    let excess = data.len() - n * m;
    if excess > 0 {
        log::warn!("dropping {excess} samples so {m} clients hold {n} each");
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    match regime {
        Regime::Homogeneous => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            order.shuffle(&mut rng);
        }
        Regime::Heterogeneous => {
            if data.iter().any(|s| s.label.is_none()) {
                return Err(Error::validation(
                    "heterogeneous split sorts by label; every sample needs one",
                ));
            }
            // stable: ties keep original order
            order.sort_by_key(|&i| data[i].label);
        }
    }
    Ok(order
        .chunks_exact(n)
        .take(m)
        .enumerate()
        .map(|(id, idx)| ClientDataset::new(id, idx.iter().map(|&i| data[i].clone()).collect()))
        .collect())
}

/// Number of labeled samples for ratio `r` and client size `n` (round half up).
pub fn labeled_count(r: f64, n: usize) -> usize {
    ((r * n as f64) + 0.5).floor() as usize
}

/// Uniformly picks `round(r n)` labeled indices per client, without replacement.
pub fn select_labeled(clients: &mut [ClientDataset], r: f64, seed: u64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::validation(format!("labeled ratio {r} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in clients.iter_mut() {
        let n = c.len();
        let n_star = labeled_count(r, n).min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        if n_star < n {
            idx.shuffle(&mut rng);
            idx.truncate(n_star);
            idx.sort_unstable();
        }
        c.labeled_idx = idx;
    }
    Ok(())
}

const NO_LABEL: i64 = -1;

/// Writes clients as consecutive records: a little-endian `u64` header
/// `(client_id, n, p, n*)`, the row-major `f64` feature block, `n` `i64`
/// labels (`-1` when absent) and `n*` `u64` labeled indices.
pub fn write_clients<W: Write>(mut w: W, clients: &[ClientDataset]) -> Result<()> {
    for c in clients {
        let p = c.samples.first().map_or(0, |s| s.x.len());
        for v in [c.client_id, c.len(), p, c.labeled_idx.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for s in &c.samples {
            if s.x.len() != p {
                return Err(Error::Container(format!(
                    "client {} mixes feature dimensions",
                    c.client_id
                )));
            }
            for v in s.x.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for s in &c.samples {
            let l = s.label.map_or(NO_LABEL, |l| l as i64);
            w.write_all(&l.to_le_bytes())?;
        }
        for &i in &c.labeled_idx {
            w.write_all(&(i as u64).to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(buf: &[u8], pos: &mut usize) -> Result<u64> {
    let bytes = buf
        .get(*pos..*pos + 8)
        .ok_or_else(|| Error::Container(format!("truncated at byte {}", *pos)))?;
    *pos += 8;
    Ok(u64::from_le_bytes(bytes.try_into().unwrap()))
}

pub fn read_clients<R: Read>(mut r: R) -> Result<Vec<ClientDataset>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut pos = 0;
    let mut out = Vec::new();
    while pos < buf.len() {
        let client_id = read_u64(&buf, &mut pos)? as usize;
        let n = read_u64(&buf, &mut pos)? as usize;
        let p = read_u64(&buf, &mut pos)? as usize;
        let n_star = read_u64(&buf, &mut pos)? as usize;
        let body = n
            .checked_mul(p)
            .and_then(|np| np.checked_add(n))
            .and_then(|v| v.checked_add(n_star))
            .and_then(|v| v.checked_mul(8))
            .ok_or_else(|| Error::Container("header sizes overflow".into()))?;
        if buf.len() - pos < body {
            return Err(Error::Container(format!(
                "client {client_id}: need {body} bytes after byte {pos}, have {}",
                buf.len() - pos
            )));
        }
        let mut feats = Vec::with_capacity(n);
        for _ in 0..n {
            let x = DVector::from_fn(p, |_, _| {
                let v = f64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
                pos += 8;
                v
            });
            feats.push(x);
        }
        let mut samples = Vec::with_capacity(n);
        for x in feats {
            let l = i64::from_le_bytes(buf[pos..pos + 8].try_into().unwrap());
            pos += 8;
            let label = match l {
                NO_LABEL => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(Error::Container(format!("invalid label {l}"))),
            };
            samples.push(Sample::new(x, label));
        }
        let mut labeled_idx = Vec::with_capacity(n_star);
        for _ in 0..n_star {
            let i = read_u64(&buf, &mut pos)? as usize;
            if i >= n {
                return Err(Error::Container(format!("labeled index {i} >= n = {n}")));
            }
            labeled_idx.push(i);
        }
        out.push(ClientDataset {
            client_id,
            samples,
            labeled_idx,
        });
    }
    Ok(out)
}
