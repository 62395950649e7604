//! Dense, bias-free feed-forward networks over a flat weight vector.
//!
//! Weights are stored layer by layer; inside a layer, cell-major, so the flat
//! order is ascending `(layer, cell, edge)`. Layer `l` connects
//! `layer_sizes[l]` inputs (edges) to `layer_sizes[l + 1]` cells.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Linear => x,
            Activation::Gelu => gelu(x),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Gelu => gelu_derivative(x),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `x * Phi(x)` with the exact error-function form of the normal CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

/// `Phi(x) + x * phi(x)`.
pub fn gelu_derivative(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

/// Location of one edge weight: the layer it belongs to, the cell it leads
/// into and its edge number among that cell's incoming weights. All 0-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position {
    pub layer: usize,
    pub cell: usize,
    pub edge: usize,
}

impl Position {
    pub fn new(layer: usize, cell: usize, edge: usize) -> Self {
        Position { layer, cell, edge }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "ArchitectureSpec", into = "ArchitectureSpec")]
pub struct NetworkArchitecture {
    layer_sizes: Vec<usize>,
    activation: Activation,
    offsets: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ArchitectureSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
}

impl TryFrom<ArchitectureSpec> for NetworkArchitecture {
    type Error = Error;

    fn try_from(spec: ArchitectureSpec) -> Result<Self> {
        NetworkArchitecture::new(spec.layer_sizes, spec.activation)
    }
}

impl From<NetworkArchitecture> for ArchitectureSpec {
    fn from(arch: NetworkArchitecture) -> Self {
        ArchitectureSpec {
            layer_sizes: arch.layer_sizes,
            activation: arch.activation,
        }
    }
}

impl NetworkArchitecture {
    pub fn new(layer_sizes: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "an architecture needs at least 2 layer sizes, got {}",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer size at position {pos} is zero"
            )));
        }
        let mut offsets = Vec::with_capacity(layer_sizes.len());
        let mut acc = 0;
        offsets.push(0);
        for w in layer_sizes.windows(2) {
            acc += w[0] * w[1];
            offsets.push(acc);
        }
        Ok(NetworkArchitecture {
            layer_sizes,
            activation,
            offsets,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Number of weight layers (`r`).
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn weight_count(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Flat offset of the first weight of weight layer `layer`.
    pub fn layer_offset(&self, layer: usize) -> usize {
        self.offsets[layer]
    }

    /// `(cells, edges)` of weight layer `layer`.
    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        (self.layer_sizes[layer + 1], self.layer_sizes[layer])
    }

    pub fn position_of(&self, index: usize) -> Result<Position> {
        let len = self.weight_count();
        if index >= len {
            return Err(Error::Index { index, len });
        }
        // offsets is sorted; the last offset <= index names the layer.
        let layer = self.offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.offsets[layer];
        let edges = self.layer_sizes[layer];
        Ok(Position {
            layer,
            cell: local / edges,
            edge: local % edges,
        })
    }

    pub fn flat_index(&self, pos: Position) -> Result<usize> {
        if pos.layer >= self.depth() {
            return Err(Error::Index {
                index: pos.layer,
                len: self.depth(),
            });
        }
        let (cells, edges) = self.layer_shape(pos.layer);
        if pos.cell >= cells {
            return Err(Error::Index {
                index: pos.cell,
                len: cells,
            });
        }
        if pos.edge >= edges {
            return Err(Error::Index {
                index: pos.edge,
                len: edges,
            });
        }
        Ok(self.offsets[pos.layer] + pos.cell * edges + pos.edge)
    }

    /// All positions in canonical flat order.
    pub fn positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.depth()).flat_map(move |layer| {
            let (cells, edges) = self.layer_shape(layer);
            (0..cells).flat_map(move |cell| (0..edges).map(move |edge| Position { layer, cell, edge }))
        })
    }
}

/// An architecture plus its flat weight vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    arch: NetworkArchitecture,
    weights: Vec<f64>,
}

/// Activations recorded during a forward pass, needed for backpropagation.
struct Trace {
    /// Post-activation values per layer, `values[0]` is the input.
    values: Vec<Vec<f64>>,
    /// Pre-activation sums per layer, `sums[0]` is unused (empty).
    sums: Vec<Vec<f64>>,
}

impl Trace {
    fn for_arch(arch: &NetworkArchitecture) -> Self {
        let values: Vec<Vec<f64>> = arch.layer_sizes().iter().map(|&n| vec![0.0; n]).collect();
        let mut sums = values.clone();
        sums[0].clear();
        Trace { values, sums }
    }
}

/// Reusable buffers for repeated single-sample backpropagation.
pub struct Workspace {
    trace: Trace,
    delta: Vec<f64>,
    prev: Vec<f64>,
}

impl Workspace {
    pub fn new(arch: &NetworkArchitecture) -> Self {
        let widest = *arch.layer_sizes().iter().max().unwrap();
        Workspace {
            trace: Trace::for_arch(arch),
            delta: Vec::with_capacity(widest),
            prev: Vec::with_capacity(widest),
        }
    }
}

impl Network {
    pub fn new(arch: NetworkArchitecture, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != arch.weight_count() {
            return Err(Error::shape("weights", arch.weight_count(), weights.len()));
        }
        Ok(Network { arch, weights })
    }

    pub fn zeros(arch: NetworkArchitecture) -> Self {
        let weights = vec![0.0; arch.weight_count()];
        Network { arch, weights }
    }

    /// Uniform initialisation in `[-sqrt(1/fan_in), sqrt(1/fan_in)]` per layer.
    pub fn random<R: Rng + ?Sized>(arch: NetworkArchitecture, rng: &mut R) -> Self {
        let mut weights = Vec::with_capacity(arch.weight_count());
        for layer in 0..arch.depth() {
            let (cells, edges) = arch.layer_shape(layer);
            let bound = (1.0 / edges as f64).sqrt();
            for _ in 0..cells * edges {
                weights.push(rng.random_range(-bound..=bound));
            }
        }
        Network { arch, weights }
    }

    pub fn arch(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn weight_at(&self, pos: Position) -> Result<f64> {
        Ok(self.weights[self.arch.flat_index(pos)?])
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    pub fn max_abs_weight(&self) -> f64 {
        self.weights.iter().fold(0.0_f64, |m, w| m.max(w.abs()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.input_size() {
            return Err(Error::shape("network input", self.arch.input_size(), x.len()));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let depth = self.arch.depth();
        let mut current = x.to_vec();
        for layer in 0..depth {
            let (cells, edges) = self.arch.layer_shape(layer);
            let block = &self.weights[self.arch.layer_offset(layer)..][..cells * edges];
            let hidden = layer + 1 < depth;
            current = block
                .chunks_exact(edges)
                .map(|row| {
                    let s: f64 = row.iter().zip(&current).map(|(w, v)| w * v).sum();
                    if hidden {
                        self.arch.activation.apply(s)
                    } else {
                        s
                    }
                })
                .collect();
        }
        current
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut trace = Trace::for_arch(&self.arch);
        self.trace_into(x, &mut trace);
        trace
    }

    fn trace_into(&self, x: &[f64], trace: &mut Trace) {
        let depth = self.arch.depth();
        trace.values[0].copy_from_slice(x);
        for layer in 0..depth {
            let (cells, edges) = self.arch.layer_shape(layer);
            let block = &self.weights[self.arch.layer_offset(layer)..][..cells * edges];
            let (before, after) = trace.values.split_at_mut(layer + 1);
            let prev = &before[layer];
            let sums = &mut trace.sums[layer + 1];
            let next = &mut after[0];
            for (c, row) in block.chunks_exact(edges).enumerate() {
                let s: f64 = row.iter().zip(prev.iter()).map(|(w, v)| w * v).sum();
                sums[c] = s;
                next[c] = if layer + 1 < depth { self.arch.activation.apply(s) } else { s };
            }
        }
    }

    /// Vector-Jacobian product at input `x`: given `dL/dy`, adds `dL/dw` into
    /// `weight_grad` and returns `dL/dx`.
    pub fn backprop_into(&self, x: &[f64], output_grad: &[f64], weight_grad: &mut [f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        if output_grad.len() != self.arch.output_size() {
            return Err(Error::shape("output gradient", self.arch.output_size(), output_grad.len()));
        }
        if weight_grad.len() != self.weights.len() {
            return Err(Error::shape("weight gradient", self.weights.len(), weight_grad.len()));
        }
        let trace = self.trace(x);
        Ok(self.backprop_trace(&trace, output_grad.to_vec(), weight_grad))
    }

    /// Single-sample forward and backward pass through caller-owned buffers:
    /// overwrites `weight_grad` with `dL/dw` for the given `dL/dy` computed by
    /// `output_grad` from the network output. Returns the output.
    pub fn backprop_with(
        &self,
        x: &[f64],
        ws: &mut Workspace,
        weight_grad: &mut [f64],
        output_grad: impl FnOnce(&[f64], &mut Vec<f64>),
    ) -> f64 {
        self.trace_into(x, &mut ws.trace);
        let depth = self.arch.depth();
        ws.delta.clear();
        output_grad(&ws.trace.values[depth], &mut ws.delta);
        weight_grad.iter_mut().for_each(|g| *g = 0.0);
        for layer in (0..depth).rev() {
            let (cells, edges) = self.arch.layer_shape(layer);
            let off = self.arch.layer_offset(layer);
            let block = &self.weights[off..off + cells * edges];
            let grad_block = &mut weight_grad[off..off + cells * edges];
            let input = &ws.trace.values[layer];
            ws.prev.clear();
            ws.prev.resize(edges, 0.0);
            for c in 0..cells {
                let d = ws.delta[c];
                let row = &block[c * edges..(c + 1) * edges];
                let grow = &mut grad_block[c * edges..(c + 1) * edges];
                for e in 0..edges {
                    grow[e] = d * input[e];
                    ws.prev[e] += d * row[e];
                }
            }
            if layer > 0 {
                for (p, &z) in ws.prev.iter_mut().zip(&ws.trace.sums[layer]) {
                    *p *= self.arch.activation.derivative(z);
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.prev);
        }
        ws.trace.values[depth][0]
    }

    fn backprop_trace(&self, trace: &Trace, mut delta: Vec<f64>, weight_grad: &mut [f64]) -> Vec<f64> {
        for layer in (0..self.arch.depth()).rev() {
            let (cells, edges) = self.arch.layer_shape(layer);
            let off = self.arch.layer_offset(layer);
            let block = &self.weights[off..off + cells * edges];
            let grad_block = &mut weight_grad[off..off + cells * edges];
            let input = &trace.values[layer];
            let mut prev = vec![0.0; edges];
            for c in 0..cells {
                let d = delta[c];
                let row = &block[c * edges..(c + 1) * edges];
                let grow = &mut grad_block[c * edges..(c + 1) * edges];
                for e in 0..edges {
                    grow[e] += d * input[e];
                    prev[e] += d * row[e];
                }
            }
            if layer > 0 {
                for (p, &z) in prev.iter_mut().zip(&trace.sums[layer]) {
                    *p *= self.arch.activation.derivative(z);
                }
            }
            delta = prev;
        }
        delta
    }

    /// Squared error summed over output components, averaged over the batch.
    pub fn mse(&self, batch: &[(&[f64], &[f64])]) -> Result<f64> {
        self.loss(batch, Loss::Mse)
    }

    /// Gradient of [`Network::mse`] with respect to the weights.
    pub fn gradient(&self, batch: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
        Ok(self.loss_gradient(batch, Loss::Mse)?.1)
    }

    fn check_batch(&self, batch: &[(&[f64], &[f64])]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let q = self.arch.output_size();
        for (x, y) in batch {
            self.check_input(x)?;
            if y.len() != q {
                return Err(Error::shape("target", q, y.len()));
            }
        }
        Ok(())
    }

    /// Mean of `loss` over the batch.
    pub fn loss(&self, batch: &[(&[f64], &[f64])], loss: Loss) -> Result<f64> {
        self.check_batch(batch)?;
        let total: f64 = batch.iter().map(|(x, y)| loss.value(&self.forward_unchecked(x), y)).sum();
        Ok(total / batch.len() as f64)
    }

    /// Mean batch loss and its gradient with respect to the weights.
    pub fn loss_gradient(&self, batch: &[(&[f64], &[f64])], loss: Loss) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.weights.len()];
        let mut total = 0.0;
        for (x, y) in batch {
            let trace = self.trace(x);
            let mut delta = vec![0.0; y.len()];
            total += loss.value_and_grad(trace.values.last().unwrap(), y, &mut delta);
            delta.iter_mut().for_each(|d| *d *= scale);
            self.backprop_trace(&trace, delta, &mut grad);
        }
        Ok((total * scale, grad))
    }
}

/// Per-sample task loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    /// Squared error summed over output components.
    Mse,
    /// Cross-entropy of the softmax of the outputs against a target
    /// distribution.
    CrossEntropy,
}

impl Loss {
    pub fn value(self, out: &[f64], target: &[f64]) -> f64 {
        match self {
            Loss::Mse => out.iter().zip(target).map(|(o, t)| (o - t).powi(2)).sum(),
            Loss::CrossEntropy => {
                let lse = log_sum_exp(out);
                out.iter().zip(target).map(|(o, t)| t * (lse - o)).sum()
            }
        }
    }

    /// Writes `dL/d out` into `grad` and returns the loss.
    pub fn value_and_grad(self, out: &[f64], target: &[f64], grad: &mut [f64]) -> f64 {
        match self {
            Loss::Mse => {
                for ((g, o), t) in grad.iter_mut().zip(out).zip(target) {
                    *g = 2.0 * (o - t);
                }
            }
            Loss::CrossEntropy => {
                let mass: f64 = target.iter().sum();
                let lse = log_sum_exp(out);
                for ((g, o), t) in grad.iter_mut().zip(out).zip(target) {
                    *g = mass * (o - lse).exp() - t;
                }
            }
        }
        self.value(out, target)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

/// Classical (Polyak) momentum SGD state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub velocity: Vec<f64>,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, momentum: f64, len: usize) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {learning_rate}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(OptimizerState {
            learning_rate,
            momentum,
            velocity: vec![0.0; len],
        })
    }

    pub fn reset(&mut self) {
        self.velocity.iter_mut().for_each(|v| *v = 0.0);
    }

    /// `v <- momentum * v + grad; w <- w - lr * v`.
    pub fn step(&mut self, weights: &mut [f64], grad: &[f64]) -> Result<()> {
        if weights.len() != self.velocity.len() {
            return Err(Error::shape("weights", self.velocity.len(), weights.len()));
        }
        if grad.len() != self.velocity.len() {
            return Err(Error::shape("gradient", self.velocity.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient component {i}")));
        }
        for ((w, v), g) in weights.iter_mut().zip(self.velocity.iter_mut()).zip(grad) {
            *v = self.momentum * *v + g;
            *w -= self.learning_rate * *v;
        }
        Ok(())
    }
}

/// Applies one optimiser step to a network, returning the updated copy.
pub fn sgd_step(net: &Network, grad: &[f64], state: &OptimizerState) -> Result<(Network, OptimizerState)> {
    let mut net = net.clone();
    let mut state = state.clone();
    state.step(&mut net.weights, grad)?;
    Ok((net, state))
}
