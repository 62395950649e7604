//! Acceptance gate. Runs every criterion in order, prints one PASS/FAIL line
//! each and exits non-zero if any failed. The MNIST criteria train three
//! full-length organisms, so expect this target to take a while.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use organism::analysis::{border_and_centre_means, Task};
use organism::checkpoint;
use organism::config::{RunConfig, SeedStreams};
use organism::data::SMALL_SIDE;
use organism::net::{Activation, Loss, Network, NetworkArchitecture, OptimizerState};
use organism::organism::{OrganismArchitecture, OrganismNetwork, SgdConfig};
use organism::particle::{ParticleNetwork, ParticleType};
use organism::run::{self, RunReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const GRAD_INSTANCES: usize = 50;
const GRAD_MAX_NET_WEIGHTS: usize = 200;
const GRAD_MAX_PARTICLES: usize = 20;
const GRAD_STEP: f64 = 1e-6;
const GRAD_REL_TOL: f64 = 1e-4;

const RESUB_SAMPLES: usize = 1000;
const RESUB_TOL: f64 = 1e-8;

const ADD_SEEDS: usize = 5;
const ADD_MIN_SR: f64 = 0.95;
const ADD_MAX_MAE: f64 = 1e-2;

const FRESH_SEEDS: u64 = 50;
const FRESH_MAX_STEPS: usize = 5000;
const FRESH_MSE: f64 = 1e-7;
const FRESH_MIN_SHARE: f64 = 0.9;

const MNIST_SEEDS: usize = 3;
const MNIST_EPOCHS: usize = 200;
const MNIST_MIN_ACC: f64 = 0.75;
const MNIST_SR_RANGE: (f64, f64) = (0.10, 0.40);
const SMOKE_EPOCHS: usize = 20;
const SMOKE_MIN_ACC: f64 = 0.5;

const DROP_SR_TOL: f64 = 0.01;
const DROP_F_MAX: f64 = 0.2;

const ROBUST_MAX_STEPS: usize = 100;

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

fn central_difference(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let w = p[i];
            p[i] = w + GRAD_STEP;
            let up = f(&p);
            p[i] = w - GRAD_STEP;
            let down = f(&p);
            p[i] = w;
            (up - down) / (2.0 * GRAD_STEP)
        })
        .collect()
}

fn random_layers(rng: &mut ChaCha8Rng, budget: usize, min_out: usize) -> Vec<usize> {
    loop {
        let depth = rng.random_range(2..=4);
        let mut sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=6)).collect();
        let last = sizes.len() - 1;
        sizes[last] = sizes[last].max(min_out);
        let count: usize = sizes.windows(2).map(|w| w[0] * w[1]).sum();
        if count <= budget {
            return sizes;
        }
    }
}

fn random_batch(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, one_hot: bool) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..rng.random_range(1..=4))
        .map(|_| {
            let x = (0..inputs).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = if one_hot {
                let k = rng.random_range(0..outputs);
                (0..outputs).map(|j| if j == k { 1.0 } else { 0.0 }).collect()
            } else {
                (0..outputs).map(|_| rng.random_range(-1.0..1.0)).collect()
            };
            (x, y)
        })
        .collect()
}

fn borrow(batch: &[(Vec<f64>, Vec<f64>)]) -> Vec<(&[f64], &[f64])> {
    batch.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect()
}

/// Analytic gradients against central differences. Organism losses are
/// differentiated through the cell-sum forward, not the re-substituted net.
fn gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for i in 0..GRAD_INSTANCES {
        let activation = if i % 2 == 0 { Activation::Linear } else { Activation::Gelu };
        let use_ce = i % 4 == 3;
        let loss = if use_ce { Loss::CrossEntropy } else { Loss::Mse };
        let err = if i < GRAD_INSTANCES / 2 {
            let sizes = random_layers(&mut rng, GRAD_MAX_NET_WEIGHTS, if use_ce { 2 } else { 1 });
            let net = Network::random(NetworkArchitecture::new(sizes, activation).unwrap(), &mut rng);
            let batch = random_batch(&mut rng, net.arch().input_size(), net.arch().output_size(), use_ce);
            let pairs = borrow(&batch);
            let (_, analytic) = net.loss_gradient(&pairs, loss).unwrap();
            let numeric = central_difference(net.weights(), |w| {
                Network::new(net.arch().clone(), w.to_vec()).unwrap().loss(&pairs, loss).unwrap()
            });
            rel_err(&analytic, &numeric)
        } else {
            let sizes = random_layers(&mut rng, GRAD_MAX_PARTICLES, if use_ce { 2 } else { 1 });
            let arch = OrganismArchitecture::new(sizes, activation, ParticleNetwork::default_arch()).unwrap();
            let on = OrganismNetwork::random(arch, SgdConfig::default(), &mut rng).unwrap();
            let batch = random_batch(&mut rng, on.arch().shape.input_size(), on.arch().shape.output_size(), use_ce);
            let pairs = borrow(&batch);
            let (_, analytic) = on.task_gradient(&pairs, loss).unwrap();
            let mut probe = on.clone();
            let numeric = central_difference(&on.flat_weights(), |w| {
                probe.set_flat_weights(w).unwrap();
                let total: f64 = pairs.iter().map(|(x, y)| loss.value(&probe.on_forward(x).unwrap(), y)).sum();
                total / pairs.len() as f64
            });
            rel_err(&analytic, &numeric)
        };
        worst = worst.max(err);
        if !(err <= GRAD_REL_TOL) {
            failures += 1;
        }
    }
    outcome(
        failures == 0,
        format!("{GRAD_INSTANCES} instances, worst relative error {worst:.2e} (tol {GRAD_REL_TOL:.0e}), {failures} over"),
    )
}

fn resubstitution(addition: &[OrganismNetwork]) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut organisms = addition.to_vec();
    for sizes in [vec![2, 3, 3, 1], vec![4, 6, 5, 2]] {
        let arch = OrganismArchitecture::new(sizes, Activation::Linear, ParticleNetwork::default_arch()).unwrap();
        organisms.push(OrganismNetwork::random(arch, SgdConfig::default(), &mut rng).unwrap());
    }
    let mut worst: f64 = 0.0;
    for on in &organisms {
        let n = on.arch().shape.input_size();
        let inputs: Vec<Vec<f64>> = (0..RESUB_SAMPLES).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        worst = worst.max(run::resub_margins(on, &inputs).unwrap().max_margin);
    }
    outcome(
        worst <= RESUB_TOL,
        format!("{} organisms x {RESUB_SAMPLES} inputs, max margin {worst:.2e} (tol {RESUB_TOL:.0e})", organisms.len()),
    )
}

fn runs(report: &RunReport) -> &[Value] {
    report.summary["runs"].as_array().expect("summary lists runs")
}

fn addition_outcome(report: &RunReport) -> Outcome {
    let mut pass = report.completed && runs(report).len() == ADD_SEEDS;
    let mut parts = Vec::new();
    for r in runs(report) {
        let sr = r["census"]["sr_fraction"].as_f64().unwrap_or(0.0);
        let mae = r["final"]["test_mae"].as_f64().unwrap_or(f64::INFINITY);
        pass &= sr >= ADD_MIN_SR && mae <= ADD_MAX_MAE;
        parts.push(format!("seed {}: sr {sr:.3} mae {mae:.2e}", r["seed"]));
    }
    outcome(pass, format!("{} (need sr >= {ADD_MIN_SR}, mae <= {ADD_MAX_MAE:.0e})", parts.join("; ")))
}

fn replication_mse(p: &ParticleNetwork) -> f64 {
    let next = p.apply_replicative(p.network());
    let n = p.weight_count() as f64;
    next.weights().iter().zip(p.weights()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n
}

fn fresh_particles() -> Outcome {
    let sgd = SgdConfig::default();
    let mut reached = 0;
    let mut trivial = 0;
    let mut steps_needed = Vec::new();
    for seed in 0..FRESH_SEEDS {
        let mut rng = SeedStreams::new(seed).stream(SeedStreams::INIT);
        let mut p = ParticleNetwork::random(ParticleNetwork::default_arch(), &mut rng).unwrap();
        let mut opt = OptimizerState::new(sgd.learning_rate, sgd.momentum, p.weight_count()).unwrap();
        for step in 1..=FRESH_MAX_STEPS {
            if p.self_train_step(&mut opt).is_err() {
                break;
            }
            if replication_mse(&p) <= FRESH_MSE {
                reached += 1;
                steps_needed.push(step);
                if p.weights().iter().all(|w| w.abs() < 1e-6) {
                    trivial += 1;
                }
                break;
            }
        }
    }
    let share = reached as f64 / FRESH_SEEDS as f64;
    let median = run::median(&mut steps_needed).unwrap_or(f64::NAN);
    outcome(
        share >= FRESH_MIN_SHARE,
        format!("{reached}/{FRESH_SEEDS} reached mse <= {FRESH_MSE:.0e} within {FRESH_MAX_STEPS} steps (median {median} steps, {trivial} collapsed to zero); need {FRESH_MIN_SHARE}"),
    )
}

fn mnist_training(full: &RunReport, smoke: &RunReport) -> Outcome {
    let mut pass = full.completed && runs(full).len() == MNIST_SEEDS;
    let mut parts = Vec::new();
    for r in runs(full) {
        let acc = r["final"]["test_accuracy"].as_f64().unwrap_or(0.0);
        let sr = r["census"]["sr_fraction"].as_f64().unwrap_or(-1.0);
        pass &= r["epochs_run"].as_u64() == Some(MNIST_EPOCHS as u64);
        pass &= acc >= MNIST_MIN_ACC && (MNIST_SR_RANGE.0..=MNIST_SR_RANGE.1).contains(&sr);
        parts.push(format!("seed {}: acc {acc:.4} sr {sr:.3}", r["seed"]));
    }
    let smoke_acc = runs(smoke)[0]["final"]["test_accuracy"].as_f64().unwrap_or(0.0);
    pass &= smoke_acc >= SMOKE_MIN_ACC;
    outcome(
        pass,
        format!(
            "{}; {SMOKE_EPOCHS}-epoch smoke acc {smoke_acc:.4} (need acc >= {MNIST_MIN_ACC}, sr in {MNIST_SR_RANGE:?}, smoke >= {SMOKE_MIN_ACC})",
            parts.join("; ")
        ),
    )
}

fn seed_checkpoint(report: &RunReport, seed: &Value) -> PathBuf {
    report.out_dir.join(format!("seed-{seed}/checkpoint.bin"))
}

fn dropout(full: &RunReport, cfg: &RunConfig) -> Outcome {
    let thresholds = cfg.thresholds().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs(full) {
        let seed = r["seed"].as_u64().unwrap();
        let on = checkpoint::load(&seed_checkpoint(full, &r["seed"])).unwrap();
        let (_, test) = run::mnist_datasets(cfg, seed).unwrap();
        let rows = run::dropout_comparison(&on, &thresholds, &test, Task::Classification).unwrap();
        let acc: BTreeMap<_, _> = rows.iter().map(|row| (row.variant, row.accuracy.unwrap())).collect();
        let (full_acc, sr, f, l1) = (acc["full"], acc["dropout-sr"], acc["dropout-f"], acc["l1-matched"]);
        pass &= (sr - full_acc).abs() <= DROP_SR_TOL && f <= DROP_F_MAX && sr >= l1;
        parts.push(format!("seed {seed}: full {full_acc:.4} drop-sr {sr:.4} drop-f {f:.4} l1 {l1:.4}"));
    }
    outcome(pass, format!("{} (need |sr-full| <= {DROP_SR_TOL}, f <= {DROP_F_MAX}, sr >= l1)", parts.join("; ")))
}

fn robustness(addition: &[OrganismNetwork], cfg: &RunConfig) -> Outcome {
    let thresholds = cfg.thresholds().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    let mut chains = 0;
    for (k, on) in addition.iter().enumerate() {
        let mut rng = SeedStreams::new(k as u64).stream(SeedStreams::PERTURBATION);
        let records = run::robustness_chains(on, &thresholds, &cfg.robustness_sigmas, ROBUST_MAX_STEPS, &mut rng).unwrap();
        chains += records.len();
        pass &= !records.is_empty();
        pass &= records.iter().all(|r| r.steps_sr <= r.steps_to_divergence);
        let medians: Vec<f64> = cfg
            .robustness_sigmas
            .iter()
            .map(|&s| {
                let mut v: Vec<usize> = records.iter().filter(|r| r.sigma == s).map(|r| r.steps_sr).collect();
                run::median(&mut v).unwrap_or(0.0)
            })
            .collect();
        pass &= medians.windows(2).all(|w| w[1] <= w[0]);
        parts.push(format!("{medians:?}"));
    }
    outcome(
        pass,
        format!("{chains} chains over {} checkpoints, median steps_sr per sigma: {}", addition.len(), parts.join(" ")),
    )
}

/// Counts SR particles per input pixel straight from the checkpoints.
fn heatmap(full: &RunReport, cfg: &RunConfig) -> Outcome {
    let thresholds = cfg.thresholds().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs(full) {
        let on = checkpoint::load(&seed_checkpoint(full, &r["seed"])).unwrap();
        let types = on.classify_all(&thresholds);
        let mut grid = vec![0.0; SMALL_SIDE * SMALL_SIDE];
        for (pos, t) in on.positions().zip(&types) {
            if pos.layer == 0 && *t == ParticleType::SelfReplicator {
                grid[pos.edge] += 1.0;
            }
        }
        let (border, centre) = border_and_centre_means(&grid, SMALL_SIDE, 2, 7);
        pass &= border > centre;
        pass &= r["sr_count_border_mean"].as_f64() == Some(border) && r["sr_count_centre_mean"].as_f64() == Some(centre);
        parts.push(format!("seed {}: border {border:.3} centre {centre:.3}", r["seed"]));
    }
    outcome(pass, parts.join("; "))
}

fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut found = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                found.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    found
}

fn determinism(tmp: &Path) -> Outcome {
    let mut base = RunConfig {
        seed: 7,
        n_seeds: 2,
        deterministic: true,
        data_dir: data_dir(),
        add_epochs: 3,
        mnist_epochs: 2,
        mnist_train_limit: 320,
        mnist_test_limit: 100,
        robustness_max_steps: 30,
        ..RunConfig::default()
    };
    let mut compared = 0;
    let mut differing = Vec::new();
    let mut twice = |name: &str, cfg: &mut RunConfig, f: fn(&RunConfig) -> organism::Result<RunReport>| -> PathBuf {
        let mut outs = Vec::new();
        for side in ["a", "b"] {
            cfg.out_dir = tmp.join(format!("{name}-{side}"));
            f(cfg).unwrap();
            outs.push(csv_files(&cfg.out_dir));
        }
        compared += outs[0].len();
        if outs[0].is_empty() || outs[0] != outs[1] {
            differing.push(name.to_string());
        }
        tmp.join(format!("{name}-a"))
    };
    let add = twice("exp-add", &mut base, run::run_exp_addition);
    let mnist = twice("exp-mnist", &mut base, run::run_exp_mnist);
    base.checkpoint = Some(add.join("seed-7/checkpoint.bin"));
    twice("robustness", &mut base, run::run_robustness);
    twice("resub-check", &mut base, run::run_resub_check);
    base.checkpoint = Some(mnist.join("seed-7/checkpoint.bin"));
    twice("dropout-compare", &mut base, run::run_dropout_compare);
    outcome(
        differing.is_empty(),
        format!("{compared} CSV files compared across 5 commands, differing: {differing:?}"),
    )
}

fn report(id: usize, name: &str, started: Instant, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {id} {name} ({:.0}s): {}", started.elapsed().as_secs_f64(), o.detail);
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut check = |id: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let o = f();
        report(id, name, started, &o);
        failed += usize::from(!o.pass);
    };

    let add_cfg = RunConfig {
        n_seeds: ADD_SEEDS,
        out_dir: tmp.path().join("exp-add"),
        ..RunConfig::default()
    };
    let mnist_cfg = RunConfig {
        n_seeds: MNIST_SEEDS,
        mnist_epochs: MNIST_EPOCHS,
        data_dir: data_dir(),
        record_trajectories: false,
        out_dir: tmp.path().join("exp-mnist"),
        ..RunConfig::default()
    };
    let smoke_cfg = RunConfig {
        mnist_epochs: SMOKE_EPOCHS,
        out_dir: tmp.path().join("exp-mnist-smoke"),
        ..mnist_cfg.clone()
    };

    let add_report = run::run_exp_addition(&add_cfg).expect("addition runs");
    let addition: Vec<OrganismNetwork> = runs(&add_report)
        .iter()
        .map(|r| checkpoint::load(&seed_checkpoint(&add_report, &r["seed"])).unwrap())
        .collect();

    check(1, "gradients match finite differences", &mut gradients);
    check(2, "linear organism equals its re-substituted network", &mut || resubstitution(&addition));
    check(3, "addition organisms replicate and add", &mut || addition_outcome(&add_report));
    check(4, "fresh particles learn to replicate", &mut fresh_particles);

    let started = Instant::now();
    let mnist_report = run::run_exp_mnist(&mnist_cfg).expect("mnist runs");
    let smoke_report = run::run_exp_mnist(&smoke_cfg).expect("mnist smoke runs");
    println!("       mnist training took {:.0}s", started.elapsed().as_secs_f64());

    check(5, "mnist accuracy and SR fraction", &mut || mnist_training(&mnist_report, &smoke_report));
    check(6, "SR dropout keeps accuracy, F dropout destroys it", &mut || dropout(&mnist_report, &mnist_cfg));
    check(7, "robustness steps shrink with noise", &mut || robustness(&addition, &add_cfg));
    check(8, "SR particles gather on the image border", &mut || heatmap(&mnist_report, &mnist_cfg));
    check(9, "deterministic runs are byte-identical", &mut || determinism(tmp.path()));

    println!("acceptance: {} of 9 criteria passed", 9 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
