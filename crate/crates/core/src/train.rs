//! Alternating task / self-replication training of an organism.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{metrics, Metrics, Task, TrajectoryLog};
use crate::data::{batches, LabeledDataset};
use crate::error::{Error, Result};
use crate::net::Loss;
use crate::organism::{Census, OrganismNetwork};
use crate::particle::Thresholds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// After every task batch, `self_steps_per_particle` self-training steps.
    PerBatchSelfTrain,
    /// After every `task_batches_per_self_round` task batches, one round of
    /// `self_steps_per_particle` self-training steps.
    RatioTaskToSelf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingSchedule {
    pub mode: ScheduleMode,
    pub self_steps_per_particle: usize,
    pub task_batches_per_self_round: usize,
    pub epochs: usize,
    pub batch_size: usize,
}

impl TrainingSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.self_steps_per_particle == 0 || self.task_batches_per_self_round == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(format!("schedule counts must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean task loss over the epoch's task steps (before each step).
    pub train_loss: f64,
    /// Task loss over the test set.
    pub test_loss: f64,
    pub test_mse: f64,
    pub test_mae: f64,
    pub test_accuracy: Option<f64>,
    /// Mean replication loss over the epoch's self-training rounds.
    pub self_loss: f64,
    pub census: Census,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub epochs: Vec<EpochMetrics>,
    /// Set when training stopped early because of divergence.
    pub diverged: Option<String>,
    pub trajectories: Option<TrajectoryLog>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub task: Task,
    pub loss: Loss,
    pub thresholds: Thresholds,
    pub record_trajectories: bool,
}

fn evaluate(on: &OrganismNetwork, data: &LabeledDataset, opts: &TrainOptions) -> Result<(f64, Metrics)> {
    let net = on.resubstitute();
    let outputs = data.inputs().iter().map(|x| net.forward(x)).collect::<Result<Vec<_>>>()?;
    let loss = outputs.iter().zip(data.targets()).map(|(o, t)| opts.loss.value(o, t)).sum::<f64>() / data.len() as f64;
    Ok((loss, metrics(&outputs, data.targets(), opts.task)?))
}

/// Runs `schedule.epochs` epochs of alternating training, logging metrics and
/// a particle census after every epoch. Divergence ends the run early with a
/// partial record rather than an error.
pub fn alternating_train<R: Rng + ?Sized>(
    on: &mut OrganismNetwork,
    schedule: &TrainingSchedule,
    train: &LabeledDataset,
    test: &LabeledDataset,
    opts: &TrainOptions,
    rng: &mut R,
) -> Result<ExperimentRecord> {
    schedule.validate()?;
    let mut record = ExperimentRecord {
        trajectories: opts.record_trajectories.then(|| TrajectoryLog::new(on)),
        ..Default::default()
    };
    if schedule.epochs == 0 {
        return Ok(record);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::InvalidArgument("training and test sets must be non-empty".into()));
    }

    let mut batches_since_self = 0;
    for epoch in 1..=schedule.epochs {
        let mut task_losses = Vec::new();
        let mut self_losses = Vec::new();
        let mut failure = None;
        for batch in batches(train.len(), schedule.batch_size, rng)? {
            let pairs = train.pairs(&batch);
            match on.on_task_step(&pairs, opts.loss) {
                Ok(loss) => task_losses.push(loss),
                Err(e) => {
                    failure = Some(format!("epoch {epoch}: task step: {e}"));
                    break;
                }
            }
            batches_since_self += 1;
            let due = match schedule.mode {
                ScheduleMode::PerBatchSelfTrain => true,
                ScheduleMode::RatioTaskToSelf => batches_since_self >= schedule.task_batches_per_self_round,
            };
            if due {
                batches_since_self = 0;
                let report = on.self_train_round(schedule.self_steps_per_particle)?;
                if !report.diverged.is_empty() {
                    failure = Some(format!("epoch {epoch}: {} particles diverged during self-training", report.diverged.len()));
                    break;
                }
                self_losses.push(report.mean_loss);
            }
        }

        let (test_loss, eval) = evaluate(on, test, opts)?;
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        record.epochs.push(EpochMetrics {
            epoch,
            train_loss: mean(&task_losses),
            test_loss,
            test_mse: eval.mse,
            test_mae: eval.mae,
            test_accuracy: eval.accuracy,
            self_loss: mean(&self_losses),
            census: on.census(&opts.thresholds),
        });
        if let Some(log) = record.trajectories.as_mut() {
            log.record(epoch, on)?;
        }
        if failure.is_some() {
            record.diverged = failure;
            break;
        }
    }
    Ok(record)
}
