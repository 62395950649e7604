//! Post-hoc analysis: task metrics, PCA of weight trajectories, the global
//! l1 magnitude-pruning baseline and per-pixel replicator statistics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Network;
use crate::organism::OrganismNetwork;
use crate::particle::{ParticleType, Thresholds};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Regression,
    Classification,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Squared error summed over components, averaged over samples.
    pub mse: f64,
    /// Mean absolute error over every component.
    pub mae: f64,
    /// Fraction of argmax matches; classification only.
    pub accuracy: Option<f64>,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn metrics(outputs: &[Vec<f64>], targets: &[Vec<f64>], task: Task) -> Result<Metrics> {
    if outputs.len() != targets.len() {
        return Err(Error::shape("outputs", targets.len(), outputs.len()));
    }
    if outputs.is_empty() {
        return Err(Error::InvalidArgument("no outputs to score".into()));
    }
    let mut sq = 0.0;
    let mut abs = 0.0;
    let mut n = 0usize;
    let mut hits = 0usize;
    for (o, t) in outputs.iter().zip(targets) {
        if o.len() != t.len() {
            return Err(Error::shape("output", t.len(), o.len()));
        }
        for (a, b) in o.iter().zip(t) {
            sq += (a - b).powi(2);
            abs += (a - b).abs();
        }
        n += o.len();
        if argmax(o) == argmax(t) {
            hits += 1;
        }
    }
    Ok(Metrics {
        mse: sq / outputs.len() as f64,
        mae: abs / n as f64,
        accuracy: match task {
            Task::Classification => Some(hits as f64 / outputs.len() as f64),
            Task::Regression => None,
        },
    })
}

/// Scores a conventional network on `(input, target)` pairs.
pub fn evaluate(net: &Network, inputs: &[Vec<f64>], targets: &[Vec<f64>], task: Task) -> Result<Metrics> {
    let outputs = inputs.iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?;
    metrics(&outputs, targets, task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Share of total variance per component; non-increasing.
    pub explained_ratio: Vec<f64>,
    /// Observations expressed in the first `k` components.
    pub projected: Vec<Vec<f64>>,
}

/// Mean-centres `rows`, eigendecomposes the covariance and projects onto the
/// top `k` directions. Zero-variance input yields an all-zero projection.
pub fn pca_project(rows: &[Vec<f64>], k: usize) -> Result<Pca> {
    if rows.len() < 2 {
        return Err(Error::InvalidArgument(format!("PCA needs at least 2 observations, got {}", rows.len())));
    }
    let dim = rows[0].len();
    if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::shape("observation", dim, bad.len()));
    }
    if k == 0 || k > rows.len().min(dim) {
        return Err(Error::InvalidArgument(format!("k = {k} must be in 1..={}", rows.len().min(dim))));
    }
    let n = rows.len();
    let mean: Vec<f64> = (0..dim).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, dim, |i, j| rows[i][j] - mean[j]);
    let cov = centred.transpose() * &centred / (n - 1) as f64;
    let total: f64 = cov.diagonal().iter().sum();

    if !(total > 0.0) {
        return Ok(Pca {
            mean,
            components: vec![vec![0.0; dim]; k],
            explained_ratio: vec![0.0; k],
            projected: vec![vec![0.0; k]; n],
        });
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(k);
    let mut explained_ratio = Vec::with_capacity(k);
    for &idx in order.iter().take(k) {
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        explained_ratio.push((eig.eigenvalues[idx].max(0.0) / total).min(1.0));
    }
    let projected = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| c.iter().zip(centred.row(i).iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components,
        explained_ratio,
        projected,
    })
}

/// Zeroes the `floor(fraction * count)` smallest-magnitude weights globally;
/// ties go to the lower flat index.
pub fn l1_prune(net: &Network, fraction: f64) -> Result<Network> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("prune fraction must be in [0, 1], got {fraction}")));
    }
    let w = net.weights();
    let k = (fraction * w.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..w.len()).collect();
    order.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let mut out = net.clone();
    for &i in &order[..k] {
        out.weights_mut()[i] = 0.0;
    }
    Ok(out)
}

/// Per-input-pixel statistics of self-replicating first-layer particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PixelStats {
    pub side: usize,
    /// Row-major SR particle count per pixel.
    pub count: Vec<f64>,
    /// Row-major sum of the extracted weights of those particles.
    pub weight_sum: Vec<f64>,
}

pub fn sr_position_stats(on: &OrganismNetwork, thresholds: &Thresholds) -> Result<PixelStats> {
    let types = on.classify_all(thresholds);
    sr_position_stats_from_types(on, &types)
}

pub fn sr_position_stats_from_types(on: &OrganismNetwork, types: &[ParticleType]) -> Result<PixelStats> {
    let shape = &on.arch().shape;
    if shape.input_size() != 225 {
        return Err(Error::InvalidArgument(format!(
            "pixel statistics need a 15x15 input layer, got {} inputs",
            shape.input_size()
        )));
    }
    let (cells, edges) = shape.layer_shape(0);
    let mut count = vec![0.0; edges];
    let mut weight_sum = vec![0.0; edges];
    for cell in 0..cells {
        for edge in 0..edges {
            let i = cell * edges + edge;
            if types[i] == ParticleType::SelfReplicator {
                count[edge] += 1.0;
                weight_sum[edge] += on.particles()[i].extract_weight();
            }
        }
    }
    Ok(PixelStats {
        side: 15,
        count,
        weight_sum,
    })
}

/// Mean of a square row-major grid over the outer `width` ring and over the
/// central `core x core` block.
pub fn border_and_centre_means(grid: &[f64], side: usize, width: usize, core: usize) -> (f64, f64) {
    let lo = (side - core) / 2;
    let (mut border, mut nb, mut centre, mut nc) = (0.0, 0, 0.0, 0);
    for r in 0..side {
        for c in 0..side {
            let v = grid[r * side + c];
            if r < width || c < width || r >= side - width || c >= side - width {
                border += v;
                nb += 1;
            }
            if (lo..lo + core).contains(&r) && (lo..lo + core).contains(&c) {
                centre += v;
                nc += 1;
            }
        }
    }
    (border / nb as f64, centre / nc as f64)
}

/// Flat weight snapshots of every particle, taken at increasing epochs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectoryLog {
    pub epochs: Vec<usize>,
    /// `snapshots[particle][k]` is the weight vector at `epochs[k]`.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    /// Organism layer of each particle.
    pub layers: Vec<usize>,
}

impl TrajectoryLog {
    pub fn new(on: &OrganismNetwork) -> Self {
        TrajectoryLog {
            epochs: Vec::new(),
            snapshots: vec![Vec::new(); on.particles().len()],
            layers: on.positions().map(|p| p.layer).collect(),
        }
    }

    pub fn record(&mut self, epoch: usize, on: &OrganismNetwork) -> Result<()> {
        if self.epochs.last().is_some_and(|&last| epoch <= last) {
            return Err(Error::InvalidArgument(format!("trajectory epoch {epoch} is not increasing")));
        }
        if on.particles().len() != self.snapshots.len() {
            return Err(Error::shape("particles", self.snapshots.len(), on.particles().len()));
        }
        self.epochs.push(epoch);
        for (log, p) in self.snapshots.iter_mut().zip(on.particles()) {
            log.push(p.weights().to_vec());
        }
        Ok(())
    }

    /// PCA fitted jointly on all snapshots of the particles in `layer` whose
    /// final type is `group`. Returns the particle indices and, per particle,
    /// its projected trajectory. `None` if fewer than two observations exist.
    pub fn group_pca(&self, types: &[ParticleType], layer: usize, group: ParticleType, k: usize) -> Result<Option<(Vec<usize>, Vec<Vec<Vec<f64>>>, Vec<f64>)>> {
        let members: Vec<usize> = (0..self.snapshots.len())
            .filter(|&i| self.layers[i] == layer && types[i] == group)
            .collect();
        let rows: Vec<Vec<f64>> = members.iter().flat_map(|&i| self.snapshots[i].iter().cloned()).collect();
        if rows.len() < 2 {
            return Ok(None);
        }
        let k = k.min(rows.len()).min(rows[0].len());
        let pca = pca_project(&rows, k)?;
        let per = self.epochs.len();
        let projected = pca.projected.chunks(per).map(<[Vec<f64>]>::to_vec).collect();
        Ok(Some((members, projected, pca.explained_ratio)))
    }
}
