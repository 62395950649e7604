//! Organism networks: a dense network whose every edge is a particle network.
//!
//! A cell sums `particle.apply_auxiliary(prev_value)` over its incoming edges;
//! the organism activation is applied to hidden cell sums only. Particles are
//! linear, so each edge acts as the scalar `particle.extract_weight()`, which
//! is what the training path exploits.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Loss, Network, NetworkArchitecture, OptimizerState, Position, Workspace};
use crate::particle::{FixpointMargin, ParticleNetwork, ParticleType, Thresholds};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrganismArchitecture {
    /// Cell layout and organism activation; one particle per weight slot.
    pub shape: NetworkArchitecture,
    pub particle: NetworkArchitecture,
}

impl OrganismArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, particle: NetworkArchitecture) -> Result<Self> {
        ParticleNetwork::check_arch(&particle)?;
        Ok(OrganismArchitecture {
            shape: NetworkArchitecture::new(layer_sizes, activation)?,
            particle,
        })
    }

    pub fn particle_count(&self) -> usize {
        self.shape.weight_count()
    }
}

/// SGD hyper-parameters shared by task and self-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 0.004,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganismNetwork {
    arch: OrganismArchitecture,
    /// In canonical `(layer, cell, edge)` order of `arch.shape`.
    particles: Vec<ParticleNetwork>,
    self_opts: Vec<OptimizerState>,
    task_opt: OptimizerState,
}

/// Per-layer particle type counts, indexed by [`ParticleType::index`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub per_layer: Vec<[usize; 4]>,
}

impl Census {
    pub fn count(&self, t: ParticleType) -> usize {
        self.per_layer.iter().map(|c| c[t.index()]).sum()
    }

    pub fn total(&self) -> usize {
        self.per_layer.iter().flatten().sum()
    }

    pub fn fraction(&self, t: ParticleType) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.count(t) as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    /// Mean of each particle's last-step replication loss, over particles
    /// that did not diverge.
    pub mean_loss: f64,
    /// Canonical indices of particles that diverged during the round.
    pub diverged: Vec<usize>,
}

impl OrganismNetwork {
    pub fn random<R: rand::Rng + ?Sized>(arch: OrganismArchitecture, sgd: SgdConfig, rng: &mut R) -> Result<Self> {
        let particles = (0..arch.particle_count())
            .map(|_| ParticleNetwork::random(arch.particle.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_particles(arch, particles, sgd)
    }

    pub fn from_particles(arch: OrganismArchitecture, particles: Vec<ParticleNetwork>, sgd: SgdConfig) -> Result<Self> {
        if particles.len() != arch.particle_count() {
            return Err(Error::shape("particles", arch.particle_count(), particles.len()));
        }
        if let Some(p) = particles.iter().find(|p| p.arch() != &arch.particle) {
            return Err(Error::InvalidArgument(format!(
                "particle architecture {:?} does not match {:?}",
                p.arch().layer_sizes(),
                arch.particle.layer_sizes()
            )));
        }
        let per_particle = arch.particle.weight_count();
        let self_opts = (0..particles.len())
            .map(|_| OptimizerState::new(sgd.learning_rate, sgd.momentum, per_particle))
            .collect::<Result<Vec<_>>>()?;
        let task_opt = OptimizerState::new(sgd.learning_rate, sgd.momentum, per_particle * particles.len())?;
        Ok(OrganismNetwork {
            arch,
            particles,
            self_opts,
            task_opt,
        })
    }

    /// Reassembles an organism including optimiser state, e.g. from a checkpoint.
    pub fn from_parts(
        arch: OrganismArchitecture,
        particles: Vec<ParticleNetwork>,
        self_opts: Vec<OptimizerState>,
        task_opt: OptimizerState,
    ) -> Result<Self> {
        let per_particle = arch.particle.weight_count();
        if self_opts.len() != particles.len() || self_opts.iter().any(|o| o.velocity.len() != per_particle) {
            return Err(Error::InvalidArgument("self-training optimiser states do not match particles".into()));
        }
        if task_opt.velocity.len() != per_particle * particles.len() {
            return Err(Error::shape("task velocity", per_particle * particles.len(), task_opt.velocity.len()));
        }
        let mut on = Self::from_particles(arch, particles, SgdConfig::default())?;
        on.self_opts = self_opts;
        on.task_opt = task_opt;
        Ok(on)
    }

    pub fn arch(&self) -> &OrganismArchitecture {
        &self.arch
    }

    pub fn particles(&self) -> &[ParticleNetwork] {
        &self.particles
    }

    pub fn particles_mut(&mut self) -> &mut [ParticleNetwork] {
        &mut self.particles
    }

    pub fn self_optimizers(&self) -> &[OptimizerState] {
        &self.self_opts
    }

    pub fn task_optimizer(&self) -> &OptimizerState {
        &self.task_opt
    }

    pub fn particle(&self, pos: Position) -> Result<&ParticleNetwork> {
        Ok(&self.particles[self.arch.shape.flat_index(pos)?])
    }

    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        self.arch.shape.positions()
    }

    /// Organism output by the cell-sum recurrence, evaluating every particle
    /// on `(0, 0, 0, 0, value)`.
    pub fn on_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let shape = &self.arch.shape;
        if x.len() != shape.input_size() {
            return Err(Error::shape("organism input", shape.input_size(), x.len()));
        }
        let depth = shape.depth();
        let mut current = x.to_vec();
        for layer in 0..depth {
            let (cells, edges) = shape.layer_shape(layer);
            let block = &self.particles[shape.layer_offset(layer)..][..cells * edges];
            current = block
                .chunks_exact(edges)
                .map(|row| {
                    let s: f64 = row.iter().zip(&current).map(|(p, &v)| p.apply_auxiliary(v)).sum();
                    if layer + 1 < depth {
                        shape.activation().apply(s)
                    } else {
                        s
                    }
                })
                .collect();
        }
        Ok(current)
    }

    /// Conventional network of the same shape whose weight `(l, c, e)` is the
    /// extracted weight of particle `(l, c, e)`.
    pub fn resubstitute(&self) -> Network {
        let weights = self.particles.iter().map(ParticleNetwork::extract_weight).collect();
        Network::new(self.arch.shape.clone(), weights).expect("one particle per weight slot")
    }

    /// Flat concatenation of every particle's weights.
    pub fn flat_weights(&self) -> Vec<f64> {
        self.particles.iter().flat_map(|p| p.weights().iter().copied()).collect()
    }

    pub fn set_flat_weights(&mut self, flat: &[f64]) -> Result<()> {
        let per = self.arch.particle.weight_count();
        if flat.len() != per * self.particles.len() {
            return Err(Error::shape("flat particle weights", per * self.particles.len(), flat.len()));
        }
        for (p, chunk) in self.particles.iter_mut().zip(flat.chunks_exact(per)) {
            p.weights_mut().copy_from_slice(chunk);
        }
        Ok(())
    }

    /// Mean task loss over the batch and its gradient with respect to all
    /// particle weights, in [`OrganismNetwork::flat_weights`] order.
    pub fn task_gradient(&self, batch: &[(&[f64], &[f64])], loss: Loss) -> Result<(f64, Vec<f64>)> {
        let effective = self.resubstitute();
        let (loss, edge_grad) = effective.loss_gradient(batch, loss)?;
        let per = self.arch.particle.weight_count();
        let mut grad = vec![0.0; per * self.particles.len()];
        for ((p, g), chunk) in self.particles.iter().zip(&edge_grad).zip(grad.chunks_exact_mut(per)) {
            if *g != 0.0 {
                p.extract_weight_backprop(*g, chunk);
            }
        }
        Ok((loss, grad))
    }

    /// One global SGD step on the task loss over `batch`; returns the loss
    /// before the step.
    pub fn on_task_step(&mut self, batch: &[(&[f64], &[f64])], loss: Loss) -> Result<f64> {
        let (loss, grad) = self.task_gradient(batch, loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("task loss is {loss}")));
        }
        let mut flat = self.flat_weights();
        self.task_opt.step(&mut flat, &grad)?;
        self.set_flat_weights(&flat)?;
        if !flat.iter().all(|w| w.is_finite()) {
            return Err(Error::Diverged("particle weights became non-finite".into()));
        }
        Ok(loss)
    }

    /// `steps` self-training passes on every particle, independently.
    pub fn self_train_round(&mut self, steps: usize) -> Result<RoundReport> {
        if steps == 0 {
            return Err(Error::InvalidArgument("self-training steps must be at least 1".into()));
        }
        let losses: Vec<Option<f64>> = self
            .particles
            .par_iter_mut()
            .zip(self.self_opts.par_iter_mut())
            .map_init(
                || Workspace::new(&self.arch.particle),
                |ws, (p, opt)| {
                if !p.network().is_finite() {
                    return None;
                }
                let mut last = 0.0;
                for _ in 0..steps {
                    match p.self_train_step_with(opt, ws) {
                        Ok(l) => last = l,
                        Err(_) => return None,
                    }
                }
                Some(last)
            })
            .collect();
        let diverged: Vec<usize> = losses.iter().enumerate().filter(|(_, l)| l.is_none()).map(|(i, _)| i).collect();
        let ok: Vec<f64> = losses.into_iter().flatten().collect();
        let mean_loss = if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().sum::<f64>() / ok.len() as f64
        };
        Ok(RoundReport { mean_loss, diverged })
    }

    pub fn classify_all(&self, thresholds: &Thresholds) -> Vec<ParticleType> {
        self.particles.par_iter().map(|p| p.classify(thresholds)).collect()
    }

    pub fn census(&self, thresholds: &Thresholds) -> Census {
        let types = self.classify_all(thresholds);
        self.census_from_types(&types)
    }

    pub fn census_from_types(&self, types: &[ParticleType]) -> Census {
        let shape = &self.arch.shape;
        let per_layer = (0..shape.depth())
            .map(|layer| {
                let (cells, edges) = shape.layer_shape(layer);
                let mut counts = [0usize; 4];
                for t in &types[shape.layer_offset(layer)..][..cells * edges] {
                    counts[t.index()] += 1;
                }
                counts
            })
            .collect();
        Census { per_layer }
    }

    /// Copy with every particle of type `t` replaced by the zero network.
    pub fn dropout(&self, t: ParticleType, thresholds: &Thresholds) -> Result<Self> {
        if !matches!(t, ParticleType::SelfReplicator | ParticleType::Functional) {
            return Err(Error::InvalidArgument(format!("dropout is defined for SR and F, not {}", t.label())));
        }
        let types = self.classify_all(thresholds);
        Ok(self.dropout_types(&types, t))
    }

    pub(crate) fn dropout_types(&self, types: &[ParticleType], t: ParticleType) -> Self {
        let mut out = self.clone();
        for (p, ty) in out.particles.iter_mut().zip(types) {
            if *ty == t {
                p.weights_mut().iter_mut().for_each(|w| *w = 0.0);
            }
        }
        out
    }

    /// Every particle is an epsilon-fixpoint and every test pair is within `zeta`.
    pub fn goal_fulfilled(&self, margin: FixpointMargin, zeta: f64, test: &[(&[f64], &[f64])]) -> Result<bool> {
        if !(zeta > 0.0) {
            return Err(Error::InvalidArgument(format!("zeta must be positive, got {zeta}")));
        }
        if !self.particles.iter().all(|p| p.is_eps_fixpoint(margin)) {
            return Ok(false);
        }
        for (x, y) in test {
            let out = self.on_forward(x)?;
            if out.len() != y.len() {
                return Err(Error::shape("target", out.len(), y.len()));
            }
            if out.iter().zip(y.iter()).any(|(o, t)| !((o - t).abs() <= zeta)) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}
