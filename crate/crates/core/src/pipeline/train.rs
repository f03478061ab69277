use serde::{Deserialize, Serialize};

use crate::encoders::GroupKind;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::data::{Sample, SyntheticTask};
use super::forward::{Graph, LossReport};
use super::model::{Model, ModelConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Momentum,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub schedule: Schedule,
    /// Train only the task head.
    pub freeze_connector: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 16,
            learning_rate: 0.2,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            schedule: Schedule::Constant,
            freeze_connector: false,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("run.steps", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("run.batch_size", "must be at least 1"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("run.learning_rate", "must be a finite non-negative number"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("run.momentum", "must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Rate used for 0-based step `step`.
    pub fn learning_rate_at(&self, step: u64) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let p = step as f64 / self.steps.max(1) as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * p.min(1.0)).cos())
            }
        }
    }
}

/// Plain SGD or heavy-ball momentum (`v = mu v + g`, `p -= lr v`).
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    /// One buffer per parameter; empty for SGD.
    pub velocity: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, model: &Model) -> Self {
        let velocity = match kind {
            OptimizerKind::Sgd => Vec::new(),
            OptimizerKind::Momentum => model
                .named_params()
                .iter()
                .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        };
        Self { kind, momentum, velocity }
    }

    /// Updates every parameter from `first` on.
    fn apply(&mut self, model: &mut Model, grads: &[Matrix], lr: f64, first: usize) {
        for (i, (p, g)) in model.params_mut().into_iter().zip(grads).enumerate().skip(first) {
            let step = match self.kind {
                OptimizerKind::Sgd => g,
                OptimizerKind::Momentum => {
                    let v = &mut self.velocity[i];
                    for (vi, gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = self.momentum * *vi + gi;
                    }
                    &self.velocity[i]
                }
            };
            for (pi, si) in p.data_mut().iter_mut().zip(step.data()) {
                *pi -= lr * si;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Loss before the update.
    pub report: LossReport,
    /// Expert utilisation `f_e` per routed group.
    pub utilization: Vec<(GroupKind, Vec<f64>)>,
}

/// One gradient step on `batch`. `step` only labels diagnostics.
pub fn train_step(
    model: &mut Model,
    cfg: &ModelConfig,
    batch: &[Sample],
    opt: &mut Optimizer,
    lr: f64,
    freeze_connector: bool,
    step: u64,
) -> Result<StepOutcome> {
    let graph = Graph::build(model, cfg, batch)?;
    let report = graph.report();
    if let Some(component) = report.first_non_finite() {
        return Err(Error::NonFinite { component, step });
    }
    let grads = graph.gradients()?;
    let names = model.named_params();
    if let Some(((name, _), _)) = names.iter().zip(&grads).find(|(_, g)| !g.is_finite()) {
        return Err(Error::NonFinite {
            component: format!("gradient of {name}"),
            step,
        });
    }
    // the head is always the last two blocks
    let first = if freeze_connector { names.len() - 2 } else { 0 };
    drop(names);
    let utilization = graph
        .decisions()
        .iter()
        .map(|(g, d)| (*g, d.utilization()))
        .collect();
    opt.apply(model, &grads, lr, first);
    Ok(StepOutcome { report, utilization })
}

/// Model, optimiser and data cursor of a run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: ModelConfig,
    pub settings: TrainSettings,
    pub model: Model,
    pub optimizer: Optimizer,
    /// Number of completed steps.
    pub step: u64,
    /// Index of the next sample to draw.
    pub next_sample: u64,
    task: SyntheticTask,
}

impl Trainer {
    pub fn new(cfg: &ModelConfig, settings: &TrainSettings) -> Result<Self> {
        settings.validate()?;
        let model = Model::init(cfg)?;
        let optimizer = Optimizer::new(settings.optimizer, settings.momentum, &model);
        Ok(Self {
            task: SyntheticTask::new(cfg)?,
            cfg: cfg.clone(),
            settings: settings.clone(),
            model,
            optimizer,
            step: 0,
            next_sample: 0,
        })
    }

    /// Resumes from saved state.
    pub fn restore(
        cfg: &ModelConfig,
        settings: &TrainSettings,
        model: Model,
        optimizer: Optimizer,
        step: u64,
        next_sample: u64,
    ) -> Result<Self> {
        settings.validate()?;
        Ok(Self {
            task: SyntheticTask::new(cfg)?,
            cfg: cfg.clone(),
            settings: settings.clone(),
            model,
            optimizer,
            step,
            next_sample,
        })
    }

    pub fn task(&self) -> &SyntheticTask {
        &self.task
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.settings.steps
    }

    pub fn step(&mut self) -> Result<StepOutcome> {
        let batch = self.task.batch(self.next_sample, self.settings.batch_size)?;
        let lr = self.settings.learning_rate_at(self.step);
        let out = train_step(
            &mut self.model,
            &self.cfg,
            &batch,
            &mut self.optimizer,
            lr,
            self.settings.freeze_connector,
            self.step,
        )?;
        self.step += 1;
        self.next_sample += self.settings.batch_size as u64;
        Ok(out)
    }

    /// Runs to `settings.steps`, returning the task loss of every step.
    pub fn run(&mut self) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        while !self.is_done() {
            out.push(self.step()?.report.task_loss);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::forward::evaluate;

    fn settings(steps: u64) -> TrainSettings {
        TrainSettings {
            steps,
            batch_size: 4,
            ..TrainSettings::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_params_bitwise() {
        let cfg = ModelConfig::tiny();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Momentum] {
            let s = TrainSettings {
                learning_rate: 0.0,
                optimizer: kind,
                ..settings(3)
            };
            let mut t = Trainer::new(&cfg, &s).unwrap();
            let before = t.model.clone();
            t.run().unwrap();
            assert_eq!(t.model, before);
        }
    }

    #[test]
    fn tiny_step_on_the_head_does_not_increase_loss() {
        let cfg = ModelConfig::tiny();
        let mut model = Model::init(&cfg).unwrap();
        let batch = SyntheticTask::new(&cfg).unwrap().batch(0, 8).unwrap();
        let before = evaluate(&model, &cfg, &batch).unwrap().total;
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, &model);
        train_step(&mut model, &cfg, &batch, &mut opt, 1e-4, true, 0).unwrap();
        let after = evaluate(&model, &cfg, &batch).unwrap().total;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn freezing_keeps_connectors_fixed() {
        let cfg = ModelConfig::tiny();
        let s = TrainSettings {
            freeze_connector: true,
            ..settings(2)
        };
        let mut t = Trainer::new(&cfg, &s).unwrap();
        let before = t.model.clone();
        t.run().unwrap();
        assert_eq!(t.model.groups, before.groups);
        assert_ne!(t.model.head, before.head);
    }

    #[test]
    fn training_is_reproducible() {
        let cfg = ModelConfig::tiny();
        let a = Trainer::new(&cfg, &settings(20)).unwrap().run().unwrap();
        let b = Trainer::new(&cfg, &settings(20)).unwrap().run().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_loss_names_the_component() {
        let cfg = ModelConfig::tiny();
        let mut model = Model::init(&cfg).unwrap();
        model.head.bias.set(0, 0, f64::NAN);
        let batch = SyntheticTask::new(&cfg).unwrap().batch(0, 2).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.0, &model);
        let err = train_step(&mut model, &cfg, &batch, &mut opt, 0.1, false, 7).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref component, step: 7 } if component == "task_loss"), "{err}");
    }

    #[test]
    fn cosine_schedule_ends_at_zero() {
        let s = TrainSettings {
            schedule: Schedule::Cosine,
            ..settings(10)
        };
        assert_eq!(s.learning_rate_at(0), s.learning_rate);
        assert!(s.learning_rate_at(10).abs() < 1e-15);
        assert!(s.learning_rate_at(5) < s.learning_rate_at(4));
    }
}
