//! Python bindings: networks, particles, organisms, checkpoints and the
//! experiment runners.

use std::collections::BTreeMap;
use std::path::PathBuf;

use organism::config::RunConfig;
use organism::net::{Activation, Loss, Network, NetworkArchitecture, OptimizerState};
use organism::organism::{OrganismArchitecture, OrganismNetwork, SgdConfig};
use organism::particle::{FixpointMargin, ParticleNetwork, ParticleType, Thresholds};
use organism::{checkpoint, run};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: organism::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn activation(name: &str) -> PyResult<Activation> {
    match name {
        "linear" => Ok(Activation::Linear),
        "gelu" => Ok(Activation::Gelu),
        _ => Err(PyValueError::new_err(format!("unknown activation {name:?}, expected linear or gelu"))),
    }
}

fn loss(name: &str) -> PyResult<Loss> {
    match name {
        "mse" => Ok(Loss::Mse),
        "cross-entropy" => Ok(Loss::CrossEntropy),
        _ => Err(PyValueError::new_err(format!("unknown loss {name:?}, expected mse or cross-entropy"))),
    }
}

fn thresholds(epsilon: f64, zero: f64, diverge: f64) -> PyResult<Thresholds> {
    Ok(Thresholds {
        margin: FixpointMargin::new(epsilon).map_err(err)?,
        zero,
        diverge,
    })
}

fn pairs<'a>(inputs: &'a [Vec<f64>], targets: &'a [Vec<f64>]) -> PyResult<Vec<(&'a [f64], &'a [f64])>> {
    if inputs.len() != targets.len() {
        return Err(PyValueError::new_err(format!("{} inputs but {} targets", inputs.len(), targets.len())));
    }
    Ok(inputs.iter().zip(targets).map(|(x, y)| (x.as_slice(), y.as_slice())).collect())
}

/// Bias-free dense network with flat weights in (layer, cell, edge) order.
#[pyclass(name = "Network", module = "organism_py", skip_from_py_object)]
#[derive(Clone)]
struct PyNetwork {
    inner: Network,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (layers, activation="linear", weights=None, seed=0))]
    fn new(layers: Vec<usize>, activation: &str, weights: Option<Vec<f64>>, seed: u64) -> PyResult<Self> {
        let arch = NetworkArchitecture::new(layers, self::activation(activation)?).map_err(err)?;
        let inner = match weights {
            Some(w) => Network::new(arch, w).map_err(err)?,
            None => Network::random(arch, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.arch().layer_sizes().to_vec()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(err)
    }

    /// Returns `(loss, gradient)` averaged over the batch.
    #[pyo3(signature = (inputs, targets, loss="mse"))]
    fn loss_gradient(&self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, loss: &str) -> PyResult<(f64, Vec<f64>)> {
        let batch = pairs(&inputs, &targets)?;
        self.inner.loss_gradient(&batch, self::loss(loss)?).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Network(layers={:?}, activation={:?})", self.inner.arch().layer_sizes(), self.inner.arch().activation())
    }
}

/// Particle network of shape [5, 3, 3, 1] that can replicate itself.
#[pyclass(name = "ParticleNetwork", module = "organism_py", skip_from_py_object)]
#[derive(Clone)]
struct PyParticle {
    inner: ParticleNetwork,
    opt: OptimizerState,
}

#[pymethods]
impl PyParticle {
    #[new]
    #[pyo3(signature = (weights=None, seed=0, learning_rate=0.004, momentum=0.9))]
    fn new(weights: Option<Vec<f64>>, seed: u64, learning_rate: f64, momentum: f64) -> PyResult<Self> {
        let arch = ParticleNetwork::default_arch();
        let inner = match weights {
            Some(w) => ParticleNetwork::new(Network::new(arch, w).map_err(err)?).map_err(err)?,
            None => ParticleNetwork::random(arch, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?,
        };
        let opt = OptimizerState::new(learning_rate, momentum, inner.weight_count()).map_err(err)?;
        Ok(PyParticle { inner, opt })
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn extract_weight(&self) -> f64 {
        self.inner.extract_weight()
    }

    fn apply_auxiliary(&self, x: f64) -> f64 {
        self.inner.apply_auxiliary(x)
    }

    /// Weights the particle predicts for itself.
    fn replicate(&self) -> Vec<f64> {
        self.inner.apply_replicative(self.inner.network()).into_weights()
    }

    fn replication_error(&self) -> f64 {
        self.inner.replication_error()
    }

    /// Runs `steps` self-training passes; returns each pass's mean loss.
    fn self_train(&mut self, steps: usize) -> PyResult<Vec<f64>> {
        (0..steps).map(|_| self.inner.self_train_step(&mut self.opt).map_err(err)).collect()
    }

    #[pyo3(signature = (epsilon=1e-5, zero=1e-6, diverge=1e3))]
    fn classify(&self, epsilon: f64, zero: f64, diverge: f64) -> PyResult<&'static str> {
        Ok(self.inner.classify(&thresholds(epsilon, zero, diverge)?).label())
    }

    /// Returns `(steps_sr, steps_to_divergence)`.
    #[pyo3(signature = (max_steps=100, epsilon=1e-5, diverge=1e3))]
    fn self_application_chain(&self, max_steps: usize, epsilon: f64, diverge: f64) -> PyResult<(usize, usize)> {
        let o = self
            .inner
            .self_application_chain(FixpointMargin::new(epsilon).map_err(err)?, max_steps, diverge)
            .map_err(err)?;
        Ok((o.steps_sr, o.steps_to_divergence))
    }
}

/// Network whose every edge weight is a particle.
#[pyclass(name = "OrganismNetwork", module = "organism_py", skip_from_py_object)]
#[derive(Clone)]
struct PyOrganism {
    inner: OrganismNetwork,
}

#[pymethods]
impl PyOrganism {
    #[new]
    #[pyo3(signature = (layers, activation="linear", seed=0, learning_rate=0.004, momentum=0.9))]
    fn new(layers: Vec<usize>, activation: &str, seed: u64, learning_rate: f64, momentum: f64) -> PyResult<Self> {
        let arch = OrganismArchitecture::new(layers, self::activation(activation)?, ParticleNetwork::default_arch()).map_err(err)?;
        let sgd = SgdConfig { learning_rate, momentum };
        let inner = OrganismNetwork::random(arch, sgd, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(err)?;
        Ok(PyOrganism { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyOrganism {
            inner: checkpoint::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn layers(&self) -> Vec<usize> {
        self.inner.arch().shape.layer_sizes().to_vec()
    }

    #[getter]
    fn particle_count(&self) -> usize {
        self.inner.particles().len()
    }

    fn particle(&self, index: usize) -> PyResult<PyParticle> {
        let p = self
            .inner
            .particles()
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("particle {index} out of range")))?;
        let opt = self.inner.self_optimizers()[index].clone();
        Ok(PyParticle { inner: p.clone(), opt })
    }

    /// Output of the cell-sum forward pass.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.on_forward(&x).map_err(err)
    }

    fn resubstitute(&self) -> PyNetwork {
        PyNetwork {
            inner: self.inner.resubstitute(),
        }
    }

    /// One SGD step on the task loss; returns the loss before the step.
    #[pyo3(signature = (inputs, targets, loss="mse"))]
    fn task_step(&mut self, inputs: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, loss: &str) -> PyResult<f64> {
        let batch = pairs(&inputs, &targets)?;
        self.inner.on_task_step(&batch, self::loss(loss)?).map_err(err)
    }

    /// Self-trains every particle; returns the mean last-step loss.
    fn self_train(&mut self, steps: usize) -> PyResult<f64> {
        Ok(self.inner.self_train_round(steps).map_err(err)?.mean_loss)
    }

    #[pyo3(signature = (epsilon=1e-5, zero=1e-6, diverge=1e3))]
    fn classify(&self, epsilon: f64, zero: f64, diverge: f64) -> PyResult<Vec<&'static str>> {
        let t = thresholds(epsilon, zero, diverge)?;
        Ok(self.inner.classify_all(&t).into_iter().map(ParticleType::label).collect())
    }

    #[pyo3(signature = (epsilon=1e-5, zero=1e-6, diverge=1e3))]
    fn census(&self, epsilon: f64, zero: f64, diverge: f64) -> PyResult<BTreeMap<&'static str, usize>> {
        let c = self.inner.census(&thresholds(epsilon, zero, diverge)?);
        Ok(ParticleType::ALL.into_iter().map(|t| (t.label(), c.count(t))).collect())
    }

    /// Copy with every particle of the given type ("SR", "F", ...) zeroed.
    #[pyo3(signature = (kind, epsilon=1e-5, zero=1e-6, diverge=1e3))]
    fn dropout(&self, kind: &str, epsilon: f64, zero: f64, diverge: f64) -> PyResult<Self> {
        let t: ParticleType = kind.parse().map_err(err)?;
        let inner = self.inner.dropout(t, &thresholds(epsilon, zero, diverge)?).map_err(err)?;
        Ok(PyOrganism { inner })
    }

    /// Largest absolute gap between `forward` and the re-substituted network.
    fn resub_margin(&self, inputs: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(run::resub_margins(&self.inner, &inputs).map_err(err)?.max_margin)
    }
}

/// Runs an experiment command with a flat TOML config and returns the
/// summary as a JSON string.
#[pyfunction]
#[pyo3(signature = (command, config=""))]
fn run_command(py: Python<'_>, command: &str, config: &str) -> PyResult<String> {
    let cfg = RunConfig::from_toml_str(config).map_err(err)?;
    let f = match command {
        run::EXP_ADDITION => run::run_exp_addition,
        run::EXP_MNIST => run::run_exp_mnist,
        "robustness" => run::run_robustness,
        "dropout-compare" => run::run_dropout_compare,
        "resub-check" => run::run_resub_check,
        _ => return Err(PyValueError::new_err(format!("unknown command {command:?}"))),
    };
    let report = py.detach(|| f(&cfg)).map_err(err)?;
    Ok(report.summary.to_string())
}

#[pymodule]
pub fn organism_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyParticle>()?;
    m.add_class::<PyOrganism>()?;
    m.add_function(wrap_pyfunction!(run_command, m)?)?;
    Ok(())
}
