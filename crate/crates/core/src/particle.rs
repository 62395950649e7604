//! Particle networks: 5-input, 1-output linear networks that are trained to
//! reproduce their own weights while also acting as a scalar multiplier.
//!
//! Inputs are `(value, layer, cell, edge, aux)`. Replicative application feeds
//! `(v_i, L(i), C(i), E(i), 0)` for every weight of a target network;
//! auxiliary application feeds `(0, 0, 0, 0, x)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{Activation, Network, NetworkArchitecture, OptimizerState, Workspace};

pub const PARTICLE_INPUTS: usize = 5;
const AUX_INPUT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParticleType {
    /// Non-trivial epsilon-fixpoint.
    #[serde(rename = "SR")]
    SelfReplicator,
    /// Functional only: not a fixpoint.
    #[serde(rename = "F")]
    Functional,
    Zero,
    Diverged,
}

impl ParticleType {
    pub const ALL: [ParticleType; 4] = [
        ParticleType::SelfReplicator,
        ParticleType::Functional,
        ParticleType::Zero,
        ParticleType::Diverged,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParticleType::SelfReplicator => "SR",
            ParticleType::Functional => "F",
            ParticleType::Zero => "Zero",
            ParticleType::Diverged => "Diverged",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for ParticleType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SR" | "sr" => Ok(ParticleType::SelfReplicator),
            "F" | "f" => Ok(ParticleType::Functional),
            "Zero" | "zero" => Ok(ParticleType::Zero),
            "Diverged" | "diverged" => Ok(ParticleType::Diverged),
            other => Err(Error::InvalidArgument(format!("unknown particle type {other:?}"))),
        }
    }
}

/// Error margin of the fixpoint property.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixpointMargin(f64);

impl FixpointMargin {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
        }
        Ok(FixpointMargin(epsilon))
    }

    pub fn epsilon(self) -> f64 {
        self.0
    }
}

impl Default for FixpointMargin {
    fn default() -> Self {
        FixpointMargin(1e-5)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub margin: FixpointMargin,
    /// All weights below this magnitude: zero-fixpoint.
    pub zero: f64,
    /// Any weight above this magnitude: diverged.
    pub diverge: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            margin: FixpointMargin::default(),
            zero: 1e-6,
            diverge: 1e3,
        }
    }
}

/// Outcome of repeated self-application.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainOutcome {
    /// Consecutive initial self-applications that moved no weight by epsilon or more.
    pub steps_sr: usize,
    /// Self-applications until the result classified as diverged, or `max_steps`.
    pub steps_to_divergence: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleNetwork {
    net: Network,
}

impl ParticleNetwork {
    /// Hidden layout `[5, 3, 3, 1]`.
    pub fn default_arch() -> NetworkArchitecture {
        NetworkArchitecture::new(vec![PARTICLE_INPUTS, 3, 3, 1], Activation::Linear).unwrap()
    }

    pub fn check_arch(arch: &NetworkArchitecture) -> Result<()> {
        if arch.input_size() != PARTICLE_INPUTS {
            return Err(Error::shape("particle input", PARTICLE_INPUTS, arch.input_size()));
        }
        if arch.output_size() != 1 {
            return Err(Error::shape("particle output", 1, arch.output_size()));
        }
        if arch.activation() != Activation::Linear {
            return Err(Error::InvalidArgument("particle networks must use linear activation".into()));
        }
        Ok(())
    }

    pub fn new(net: Network) -> Result<Self> {
        Self::check_arch(net.arch())?;
        Ok(ParticleNetwork { net })
    }

    pub fn zeros(arch: NetworkArchitecture) -> Result<Self> {
        Self::new(Network::zeros(arch))
    }

    pub fn random<R: Rng + ?Sized>(arch: NetworkArchitecture, rng: &mut R) -> Result<Self> {
        Self::check_arch(&arch)?;
        Ok(ParticleNetwork {
            net: Network::random(arch, rng),
        })
    }

    /// Hand-built particle: a single chain through cell 0 of every layer
    /// carrying `replicate_gain` from the value input and `aux_gain` from the
    /// auxiliary input. All other weights are zero.
    ///
    /// With `replicate_gain == 1` this is an exact fixpoint whose extracted
    /// weight is `aux_gain`.
    pub fn with_gains(arch: NetworkArchitecture, replicate_gain: f64, aux_gain: f64) -> Result<Self> {
        Self::check_arch(&arch)?;
        let mut net = Network::zeros(arch.clone());
        let w = net.weights_mut();
        w[0] = replicate_gain;
        w[AUX_INPUT] = aux_gain;
        for layer in 1..arch.depth() {
            w[arch.layer_offset(layer)] = 1.0;
        }
        Ok(ParticleNetwork { net })
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    pub fn weights(&self) -> &[f64] {
        self.net.weights()
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        self.net.weights_mut()
    }

    pub fn arch(&self) -> &NetworkArchitecture {
        self.net.arch()
    }

    pub fn weight_count(&self) -> usize {
        self.net.weights().len()
    }

    /// Replaces every weight `v_i` of `target` with
    /// `self(v_i, L(i), C(i), E(i), 0)`. Check [`Network::is_finite`] on the
    /// result to detect divergence.
    pub fn apply_replicative(&self, target: &Network) -> Network {
        let arch = target.arch().clone();
        let weights = arch
            .positions()
            .zip(target.weights())
            .map(|(pos, &v)| self.net.forward_unchecked(&replication_input(v, pos))[0])
            .collect();
        Network::new(arch, weights).expect("one output per target weight")
    }

    pub fn apply_auxiliary(&self, x: f64) -> f64 {
        self.net.forward_unchecked(&[0.0, 0.0, 0.0, 0.0, x])[0]
    }

    /// The scalar this particle multiplies its auxiliary input by.
    pub fn extract_weight(&self) -> f64 {
        self.apply_auxiliary(1.0)
    }

    /// Adds `upstream * d(extract_weight)/d(weights)` into `grad`.
    pub(crate) fn extract_weight_backprop(&self, upstream: f64, grad: &mut [f64]) {
        self.net
            .backprop_into(&[0.0, 0.0, 0.0, 0.0, 1.0], &[upstream], grad)
            .expect("particle shapes are validated on construction");
    }

    /// One pass of per-sample SGD over `{((v_i, L, C, E, 0), v_i)}` built from
    /// the weights at the start of the pass. Returns the mean squared
    /// replication error seen during the pass.
    pub fn self_train_step(&mut self, opt: &mut OptimizerState) -> Result<f64> {
        let mut ws = Workspace::new(self.net.arch());
        self.self_train_step_with(opt, &mut ws)
    }

    pub(crate) fn self_train_step_with(&mut self, opt: &mut OptimizerState, ws: &mut Workspace) -> Result<f64> {
        let n = self.net.weights().len();
        if opt.velocity.len() != n {
            return Err(Error::shape("optimiser velocity", n, opt.velocity.len()));
        }
        let arch = self.net.arch().clone();
        let targets = self.net.weights().to_vec();
        let mut grad = vec![0.0; n];
        let mut total = 0.0;
        for (pos, &target) in arch.positions().zip(&targets) {
            let x = replication_input(target, pos);
            let mut err = 0.0;
            self.net.backprop_with(&x, ws, &mut grad, |out, delta| {
                err = out[0] - target;
                delta.push(2.0 * err);
            });
            total += err * err;
            opt.step(self.net.weights_mut(), &grad)?;
        }
        if !self.net.is_finite() {
            return Err(Error::Diverged("particle weights became non-finite".into()));
        }
        Ok(total / n as f64)
    }

    /// Largest `|w_i - v_i|` between self-application and current weights.
    pub fn replication_error(&self) -> f64 {
        let next = self.apply_replicative(&self.net);
        next.weights()
            .iter()
            .zip(self.net.weights())
            .fold(0.0_f64, |m, (w, v)| {
                let d = (w - v).abs();
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    m.max(d)
                }
            })
    }

    pub fn is_eps_fixpoint(&self, margin: FixpointMargin) -> bool {
        self.replication_error() < margin.epsilon()
    }

    /// Precedence: Diverged, Zero, SR, F.
    pub fn classify(&self, thresholds: &Thresholds) -> ParticleType {
        let w = self.net.weights();
        if w.iter().any(|x| !x.is_finite() || x.abs() > thresholds.diverge) {
            ParticleType::Diverged
        } else if w.iter().all(|x| x.abs() < thresholds.zero) {
            ParticleType::Zero
        } else if self.is_eps_fixpoint(thresholds.margin) {
            ParticleType::SelfReplicator
        } else {
            ParticleType::Functional
        }
    }

    /// Adds independent `N(0, sigma^2)` noise to every weight.
    pub fn perturb<R: Rng + ?Sized>(&self, sigma: f64, rng: &mut R) -> Result<Self> {
        if !(sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be non-negative, got {sigma}")));
        }
        let mut out = self.clone();
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for w in out.net.weights_mut() {
                *w += normal.sample(rng);
            }
        }
        Ok(out)
    }

    /// Iterates `n <- n applied to n` until divergence or `max_steps`.
    pub fn self_application_chain(&self, margin: FixpointMargin, max_steps: usize, diverge_threshold: f64) -> Result<ChainOutcome> {
        if max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be at least 1".into()));
        }
        let mut current = self.net.clone();
        let mut steps_sr = 0;
        let mut streak = true;
        for step in 1..=max_steps {
            let particle = ParticleNetwork { net: current };
            let next = particle.apply_replicative(&particle.net);
            if streak {
                let moved = next
                    .weights()
                    .iter()
                    .zip(particle.net.weights())
                    .any(|(w, v)| !((w - v).abs() < margin.epsilon()));
                if moved {
                    streak = false;
                } else {
                    steps_sr = step;
                }
            }
            if !next.is_finite() || next.max_abs_weight() > diverge_threshold {
                return Ok(ChainOutcome {
                    steps_sr: steps_sr.min(step),
                    steps_to_divergence: step,
                });
            }
            current = next;
        }
        Ok(ChainOutcome {
            steps_sr,
            steps_to_divergence: max_steps,
        })
    }
}

#[inline]
fn replication_input(v: f64, pos: crate::net::Position) -> [f64; PARTICLE_INPUTS] {
    [v, pos.layer as f64, pos.cell as f64, pos.edge as f64, 0.0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn arch() -> NetworkArchitecture {
        ParticleNetwork::default_arch()
    }

    #[test]
    fn rejects_non_particle_shapes() {
        let bad = NetworkArchitecture::new(vec![4, 3, 1], Activation::Linear).unwrap();
        assert!(ParticleNetwork::zeros(bad).is_err());
        let gelu = NetworkArchitecture::new(vec![5, 3, 1], Activation::Gelu).unwrap();
        assert!(ParticleNetwork::zeros(gelu).is_err());
    }

    #[test]
    fn replicative_application_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = Network::random(NetworkArchitecture::new(vec![3, 4, 2], Activation::Gelu).unwrap(), &mut rng);

        let zero = ParticleNetwork::zeros(arch()).unwrap();
        let out = zero.apply_replicative(&target);
        assert_eq!(out.arch(), target.arch());
        assert!(out.weights().iter().all(|&w| w == 0.0));

        // Hand check per weight: output = gain * v_i since position inputs carry zero weight.
        let identity = ParticleNetwork::with_gains(arch(), 1.0, 0.3).unwrap();
        assert_eq!(identity.apply_replicative(&target).weights(), target.weights());

        let double = ParticleNetwork::with_gains(arch(), 2.0, 0.0).unwrap();
        let out = double.apply_replicative(&target);
        for (o, v) in out.weights().iter().zip(target.weights()) {
            assert_eq!(*o, 2.0 * v);
        }
    }

    #[test]
    fn auxiliary_and_extract_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ParticleNetwork::random(arch(), &mut rng).unwrap();
        assert_eq!(p.apply_auxiliary(0.0), 0.0);
        let zero = ParticleNetwork::zeros(arch()).unwrap();
        assert_eq!(zero.apply_auxiliary(4.2), 0.0);
        assert_eq!(zero.extract_weight(), 0.0);

        let c = -0.37;
        let built = ParticleNetwork::with_gains(arch(), 1.0, c).unwrap();
        assert!((built.apply_auxiliary(3.0) - 3.0 * c).abs() < 1e-15);
        assert_eq!(built.extract_weight(), c);
    }

    #[test]
    fn zero_particle_self_training_is_noop() {
        let mut p = ParticleNetwork::zeros(arch()).unwrap();
        let mut opt = OptimizerState::new(0.004, 0.9, p.weight_count()).unwrap();
        let loss = p.self_train_step(&mut opt).unwrap();
        assert_eq!(loss, 0.0);
        assert!(p.weights().iter().all(|&w| w == 0.0));
    }

    #[test]
    fn fixpoint_examples() {
        let eps = FixpointMargin::new(1e-12).unwrap();
        assert!(ParticleNetwork::zeros(arch()).unwrap().is_eps_fixpoint(eps));
        assert!(ParticleNetwork::with_gains(arch(), 1.0, 0.8).unwrap().is_eps_fixpoint(eps));
        // |2v - v| = |v| = 1 for the chain weights.
        let double = ParticleNetwork::with_gains(arch(), 2.0, 0.0).unwrap();
        assert!(!double.is_eps_fixpoint(FixpointMargin::new(0.5).unwrap()));
        assert!(FixpointMargin::new(0.0).is_err());
    }

    #[test]
    fn classify_examples() {
        let t = Thresholds::default();
        assert_eq!(ParticleNetwork::zeros(arch()).unwrap().classify(&t), ParticleType::Zero);

        let mut big = ParticleNetwork::with_gains(arch(), 1.0, 0.0).unwrap();
        big.weights_mut()[7] = 1e9;
        assert_eq!(big.classify(&t), ParticleType::Diverged);

        let mut nan = ParticleNetwork::zeros(arch()).unwrap();
        nan.weights_mut()[0] = f64::NAN;
        assert_eq!(nan.classify(&t), ParticleType::Diverged);

        assert_eq!(ParticleNetwork::with_gains(arch(), 1.0, 0.5).unwrap().classify(&t), ParticleType::SelfReplicator);
        assert_eq!(ParticleNetwork::with_gains(arch(), 2.0, 0.5).unwrap().classify(&t), ParticleType::Functional);
    }

    #[test]
    fn self_training_converges_to_nontrivial_fixpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = ParticleNetwork::random(arch(), &mut rng).unwrap();
        let mut opt = OptimizerState::new(0.004, 0.9, p.weight_count()).unwrap();
        let mut loss = f64::INFINITY;
        for _ in 0..5000 {
            loss = p.self_train_step(&mut opt).unwrap();
            if loss < 1e-12 {
                break;
            }
        }
        assert!(loss < 1e-7, "loss {loss}");
        // Independent check of the fixpoint property by direct self-application.
        let next = p.apply_replicative(p.network());
        let max_dev = next.weights().iter().zip(p.weights()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_dev < 1e-5);
        assert_eq!(p.classify(&Thresholds::default()), ParticleType::SelfReplicator);
    }

    #[test]
    fn perturb_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = ParticleNetwork::random(arch(), &mut rng).unwrap();
        assert_eq!(base.perturb(0.0, &mut rng).unwrap(), base);
        assert!(base.perturb(-1.0, &mut rng).is_err());

        // 6.3 sigma tail over 1e4 draws.
        let mut max_change: f64 = 0.0;
        for _ in 0..400 {
            let p = base.perturb(1e-9, &mut rng).unwrap();
            for (a, b) in p.weights().iter().zip(base.weights()) {
                max_change = max_change.max((a - b).abs());
            }
        }
        assert!(max_change < 1e-7);

        let sigma = 0.05;
        let mut diffs = Vec::new();
        while diffs.len() < 100_000 {
            let p = base.perturb(sigma, &mut rng).unwrap();
            diffs.extend(p.weights().iter().zip(base.weights()).map(|(a, b)| a - b));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn chain_examples() {
        let margin = FixpointMargin::default();
        let zero = ParticleNetwork::zeros(arch()).unwrap();
        assert_eq!(
            zero.self_application_chain(margin, 50, 1e3).unwrap(),
            ChainOutcome { steps_sr: 50, steps_to_divergence: 50 }
        );

        let double = ParticleNetwork::with_gains(arch(), 2.0, 1.0).unwrap();
        let out = double.self_application_chain(margin, 100, 1e3).unwrap();
        assert!(out.steps_to_divergence <= (1e3f64).log2().ceil() as usize);
        assert_eq!(out.steps_sr, 0);

        let identity = ParticleNetwork::with_gains(arch(), 1.0, 0.25).unwrap();
        let out = identity.self_application_chain(margin, 100, 1e3).unwrap();
        assert!(out.steps_sr >= 1);
        assert!(zero.self_application_chain(margin, 0, 1e3).is_err());
    }

    proptest! {
        #[test]
        fn auxiliary_is_linear_in_input(seed in any::<u64>(), x in -10.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ParticleNetwork::random(arch(), &mut rng).unwrap();
            prop_assert!((p.apply_auxiliary(x) - p.extract_weight() * x).abs() < 1e-12);
        }

        #[test]
        fn fixpoint_is_monotone_in_epsilon(seed in any::<u64>(), eps in 1e-9f64..1.0, factor in 1.0f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ParticleNetwork::random(arch(), &mut rng).unwrap();
            let tight = FixpointMargin::new(eps).unwrap();
            let loose = FixpointMargin::new(eps * factor).unwrap();
            prop_assert!(!p.is_eps_fixpoint(tight) || p.is_eps_fixpoint(loose));
        }

        #[test]
        fn replicative_application_keeps_target_arch(seed in any::<u64>(), sizes in prop::collection::vec(1usize..5, 2..4)) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ParticleNetwork::random(arch(), &mut rng).unwrap();
            let target = Network::random(NetworkArchitecture::new(sizes, Activation::Linear).unwrap(), &mut rng);
            let before = target.clone();
            let out = p.apply_replicative(&target);
            prop_assert_eq!(out.arch(), target.arch());
            prop_assert_eq!(before, target);
        }
    }
}
