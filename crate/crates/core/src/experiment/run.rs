use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::encoders::GroupKind;
use crate::error::{Error, Result};
use crate::pipeline::{LossReport, StepOutcome, Trainer};

use super::checkpoint::Checkpoint;
use super::config::ExperimentConfig;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

/// One value per group in the fixed group order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerGroup {
    pub siglip: f64,
    pub dinov2: f64,
    pub convnext: f64,
    pub clip: f64,
}

impl From<[f64; 4]> for PerGroup {
    fn from(v: [f64; 4]) -> Self {
        Self {
            siglip: v[GroupKind::Siglip.index()],
            dinov2: v[GroupKind::Dinov2.index()],
            convnext: v[GroupKind::Convnext.index()],
            clip: v[GroupKind::Clip.index()],
        }
    }
}

/// One line of `metrics.jsonl`. Wall-clock time goes to `timing.jsonl` so
/// reruns produce byte-identical metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// 1-based index of the step whose pre-update loss this is.
    pub step: u64,
    pub learning_rate: f64,
    pub task_loss: f64,
    pub balance: PerGroup,
    pub zloss: PerGroup,
    pub total: f64,
    /// `f_e` per routed group; empty for dense connectors.
    pub utilization: BTreeMap<String, Vec<f64>>,
}

impl MetricRecord {
    fn new(step: u64, learning_rate: f64, out: &StepOutcome) -> Self {
        let r: &LossReport = &out.report;
        Self {
            step,
            learning_rate,
            task_loss: r.task_loss,
            balance: r.balance.into(),
            zloss: r.zloss.into(),
            total: r.total,
            utilization: out
                .utilization
                .iter()
                .map(|(g, f)| (g.name().to_string(), f.clone()))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TimingRecord {
    step: u64,
    wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub steps_run: u64,
    pub records: Vec<MetricRecord>,
    pub checkpoint: PathBuf,
}

fn open(path: &Path, append: bool) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(BufWriter::new(f))
}

fn write_line<T: Serialize>(w: &mut BufWriter<File>, path: &Path, value: &T) -> Result<()> {
    let line = serde_json::to_string(value).map_err(|e| Error::Contract(e.to_string()))?;
    writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Trains per `cfg`, writing metrics, timings and a final checkpoint into
/// `cfg.run.out_dir`. With `resume`, continues from that checkpoint up to
/// `cfg.run.steps` and appends to the existing metric stream; the model part
/// of the config must match the checkpoint's.
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<RunSummary> {
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let settings = cfg.train_settings();
    let mut trainer = match resume {
        None => Trainer::new(&model_cfg, &settings)?,
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config.model_config() != model_cfg {
                return Err(Error::Checkpoint {
                    field: "config".into(),
                    msg: "model settings differ from the checkpoint's".into(),
                });
            }
            if ck.optimizer.kind != settings.optimizer {
                return Err(Error::Checkpoint {
                    field: "optimizer".into(),
                    msg: format!("checkpoint uses {:?}, config asks for {:?}", ck.optimizer.kind, settings.optimizer),
                });
            }
            Trainer::restore(&model_cfg, &settings, ck.model, ck.optimizer, ck.step, ck.next_sample)?
        }
    };

    let dir = &cfg.run.out_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join(METRICS_FILE);
    let timing_path = dir.join(TIMING_FILE);
    let mut metrics = open(&metrics_path, resume.is_some())?;
    let mut timing = open(&timing_path, resume.is_some())?;

    let first = trainer.step;
    let mut records = Vec::new();
    while !trainer.is_done() {
        let lr = settings.learning_rate_at(trainer.step);
        let t0 = Instant::now();
        let out = trainer.step()?;
        let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
        let step = trainer.step;
        if step % cfg.run.metric_every == 0 || trainer.is_done() {
            let rec = MetricRecord::new(step, lr, &out);
            write_line(&mut metrics, &metrics_path, &rec)?;
            write_line(&mut timing, &timing_path, &TimingRecord { step, wall_ms })?;
            records.push(rec);
        }
        if cfg.run.checkpoint_every > 0 && step % cfg.run.checkpoint_every == 0 && !trainer.is_done() {
            snapshot(cfg, &trainer).save(&dir.join(format!("checkpoint-{step:06}.bin")))?;
        }
    }
    let checkpoint = dir.join(CHECKPOINT_FILE);
    snapshot(cfg, &trainer).save(&checkpoint)?;
    Ok(RunSummary {
        out_dir: dir.clone(),
        steps_run: trainer.step - first,
        records,
        checkpoint,
    })
}

fn snapshot(cfg: &ExperimentConfig, t: &Trainer) -> Checkpoint {
    Checkpoint {
        config: cfg.clone(),
        step: t.step,
        next_sample: t.next_sample,
        model: t.model.clone(),
        optimizer: t.optimizer.clone(),
    }
}

/// Parses a metrics stream written by [`run_experiment`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Contract(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
