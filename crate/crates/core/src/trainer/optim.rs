use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Sampled triples per pretraining epoch.
    pub n_ops: usize,
    pub lr_decay_alpha: f64,
    pub l1_weight: f64,
    pub l2_weight: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        TrainConfig {
            task: Task::Pretrain,
            base_lr: 5e-4,
            momentum: 0.9,
            epochs: 10_000,
            batch_size: 256,
            n_ops: 256,
            lr_decay_alpha: 1.0,
            l1_weight: 0.0,
            l2_weight: 0.0,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            task: Task::Finetune,
            base_lr: 1e-3,
            epochs: 100,
            lr_decay_alpha: 0.975,
            l1_weight: 1e-5,
            l2_weight: 1e-3,
            ..Self::pretrain()
        }
    }

    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Pretrain => Self::pretrain(),
            Task::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.lr_decay_alpha > 0.0 && self.lr_decay_alpha <= 1.0) {
            return bad(format!("lr_decay_alpha {} outside (0, 1]", self.lr_decay_alpha));
        }
        if !(self.l1_weight >= 0.0 && self.l2_weight >= 0.0) {
            return bad("penalty weights must be nonnegative".into());
        }
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return bad(format!("base_lr {} must be positive", self.base_lr));
        }
        if self.batch_size == 0 || self.n_ops == 0 {
            return bad("batch_size and n_ops must be ≥ 1".into());
        }
        Ok(())
    }
}

/// Velocity per parameter (table order), current learning rate and number
/// of completed epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub velocity: Vec<Tensor<T>>,
    pub lr: f64,
    pub epoch: usize,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>, lr: f64) -> Self {
        OptimizerState {
            velocity: params.iter().map(|p| Tensor::zeros(p.value.shape().to_vec())).collect(),
            lr,
            epoch: 0,
        }
    }
}

/// `v <- mu v - lr_eff g; theta <- theta + mu v - lr_eff g` with
/// `lr_eff = lr * lr_multiplier`. Nothing is modified when any gradient is
/// non-finite.
pub fn sgd_nesterov_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut OptimizerState<T>, momentum: f64) -> Result<()> {
    assert_eq!(state.velocity.len(), params.len(), "optimizer state does not match parameter table");
    if let Some(p) = params.iter().find(|p| p.grad.data().iter().any(|g| !g.is_finite())) {
        return Err(Error::Diverged {
            epoch: state.epoch,
            detail: format!("non-finite gradient in {}", p.name),
            last_good: None,
        });
    }
    let mu = T::from_f64_lossy(momentum);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let rate = T::from_f64_lossy(state.lr * p.lr_multiplier);
        for ((theta, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(v.data_mut()) {
            let step = rate * g;
            *v = mu * *v - step;
            *theta += mu * *v - step;
        }
    }
    Ok(())
}

/// Adds `l1 sign(theta) + 2 l2 theta` to the gradient of every parameter
/// with `regularize` set.
pub fn apply_regularization<T: Scalar>(params: &mut ParamStore<T>, l1: f64, l2: f64) {
    if l1 == 0.0 && l2 == 0.0 {
        return;
    }
    let (l1, l2x2) = (T::from_f64_lossy(l1), T::from_f64_lossy(2.0 * l2));
    for p in params.iter_mut().filter(|p| p.regularize) {
        for (g, &theta) in p.grad.data_mut().iter_mut().zip(p.value.data()) {
            let sign = if theta > T::zero() {
                T::one()
            } else if theta < T::zero() {
                -T::one()
            } else {
                T::zero()
            };
            *g += l1 * sign + l2x2 * theta;
        }
    }
}

/// `l1 sum|theta| + l2 sum theta^2` over regularized parameters.
pub fn regularization_penalty<T: Scalar>(params: &ParamStore<T>, l1: f64, l2: f64) -> f64 {
    params
        .iter()
        .filter(|p| p.regularize)
        .flat_map(|p| p.value.data().iter())
        .map(|&t| {
            let t = t.to_f64_lossy();
            l1 * t.abs() + l2 * t * t
        })
        .sum()
}

pub fn decay_learning_rate<T>(state: &mut OptimizerState<T>, alpha: f64) {
    state.lr *= alpha;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

pub const LOG_HEADER: &str = "epoch,lr,loss,accuracy";

impl TrainLog {
    pub fn push(&mut self, rec: EpochRecord) {
        debug_assert_eq!(rec.epoch, self.records.len());
        self.records.push(rec);
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.records {
            writeln!(s, "{}", csv_line(r)).unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        if lines.next() != Some(LOG_HEADER) {
            return Err(Error::Data(format!("training log must start with `{LOG_HEADER}`")));
        }
        let mut log = TrainLog::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            let parse = || -> Option<EpochRecord> {
                Some(EpochRecord {
                    epoch: f.first()?.parse().ok()?,
                    lr: f.get(1)?.parse().ok()?,
                    loss: f.get(2)?.parse().ok()?,
                    accuracy: f.get(3)?.parse().ok()?,
                })
            };
            let rec = parse().filter(|_| f.len() == 4).ok_or_else(|| Error::Data(format!("bad log line `{line}`")))?;
            if rec.epoch != log.records.len() {
                return Err(Error::Data(format!("log epochs not contiguous at {}", rec.epoch)));
            }
            log.records.push(rec);
        }
        Ok(log)
    }
}

pub fn csv_line(r: &EpochRecord) -> String {
    format!("{},{},{},{}", r.epoch, r.lr, r.loss, r.accuracy)
}
