use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::GroupKind;
use crate::error::{Error, Result};
use crate::moec::utilization_entropy;
use crate::pipeline::{evaluate, flops_estimate, ConnectorKind, FusionKind, Trainer};

use super::config::{AblationAxes, ExperimentConfig};
use super::run::run_experiment;

/// Number of held-out samples each cell is scored on after training.
pub const HELDOUT_SAMPLES: usize = 128;
/// First sample index of the held-out range, far past any training cursor.
pub const HELDOUT_START: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationCell {
    pub connector: ConnectorKind,
    pub fusion: FusionKind,
    /// In append order.
    pub encoders: Vec<GroupKind>,
    pub top_k: usize,
}

impl AblationCell {
    pub fn label(&self) -> String {
        let enc: Vec<&str> = self.encoders.iter().map(|g| g.name()).collect();
        let conn = match self.connector {
            ConnectorKind::Mlp => "mlp",
            ConnectorKind::Moec => "moec",
        };
        let fusion = match self.fusion {
            FusionKind::Hga => "hga",
            FusionKind::AppendOnly => "append",
        };
        format!("{conn}-{fusion}-k{}-{}", self.top_k, enc.join("+"))
    }

    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = base.clone();
        c.model.connector = self.connector;
        c.model.fusion = self.fusion;
        c.model.encoders = self.encoders.clone();
        c.moec.top_k = self.top_k;
        c
    }
}

fn in_append_order(groups: &[GroupKind]) -> Vec<GroupKind> {
    GroupKind::APPEND_ORDER.into_iter().filter(|g| groups.contains(g)).collect()
}

/// Cartesian product of the axes in the order connector, fusion, encoders,
/// top_k; repeated cells are dropped, keeping the first.
pub fn ablation_cells(base: &ExperimentConfig, axes: &AblationAxes) -> Vec<AblationCell> {
    fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
        if axis.is_empty() {
            vec![base]
        } else {
            axis.to_vec()
        }
    }
    let connectors = or_base(&axes.connector, base.model.connector);
    let fusions = or_base(&axes.fusion, base.model.fusion);
    let encoders = or_base(&axes.encoders, base.model.encoders.clone());
    let ks = or_base(&axes.top_k, base.moec.top_k);
    let mut out: Vec<AblationCell> = Vec::new();
    for &connector in &connectors {
        for &fusion in &fusions {
            for enc in &encoders {
                for &top_k in &ks {
                    let cell = AblationCell {
                        connector,
                        fusion,
                        encoders: in_append_order(enc),
                        top_k,
                    };
                    if !out.contains(&cell) {
                        out.push(cell);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: AblationCell,
    pub label: String,
    /// `None` on success.
    pub error: Option<String>,
    pub total_tokens: usize,
    pub initial_task_loss: Option<f64>,
    pub final_task_loss: Option<f64>,
    pub final_total_loss: Option<f64>,
    /// Held-out task loss after training.
    pub heldout_task_loss: Option<f64>,
    /// Mean over routed groups of the entropy of the last step's `f_e`.
    pub utilization_entropy: Option<f64>,
    pub flops_total: u64,
    pub flops_experts: u64,
    pub flops_router: u64,
    pub task_losses: Vec<f64>,
}

impl CellResult {
    fn failed(cell: AblationCell, total_tokens: usize, err: &Error) -> Self {
        Self {
            label: cell.label(),
            cell,
            error: Some(err.to_string()),
            total_tokens,
            initial_task_loss: None,
            final_task_loss: None,
            final_total_loss: None,
            heldout_task_loss: None,
            utilization_entropy: None,
            flops_total: 0,
            flops_experts: 0,
            flops_router: 0,
            task_losses: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub seed: u64,
    pub steps: u64,
    pub rows: Vec<CellResult>,
}

fn run_cell(base: &ExperimentConfig, cell: &AblationCell, out: Option<&Path>) -> Result<CellResult> {
    let mut cfg = cell.apply(base);
    cfg.validate()?;
    let model_cfg = cfg.model_config();
    let flops = flops_estimate(&model_cfg)?;
    let (losses, model, last) = match out {
        Some(dir) => {
            cfg.run.out_dir = dir.join(cell.label());
            let summary = run_experiment(&cfg, None)?;
            let ck = super::checkpoint::Checkpoint::load(&summary.checkpoint)?;
            let losses: Vec<f64> = summary.records.iter().map(|r| r.task_loss).collect();
            let last = summary.records.last().cloned();
            let util: Vec<Vec<f64>> = last.iter().flat_map(|r| r.utilization.values().cloned()).collect();
            let totals = last.map(|r| r.total);
            (losses, ck.model, (util, totals))
        }
        None => {
            let mut t = Trainer::new(&model_cfg, &cfg.train_settings())?;
            let mut losses = Vec::new();
            let mut util = Vec::new();
            let mut total = None;
            while !t.is_done() {
                let o = t.step()?;
                losses.push(o.report.task_loss);
                total = Some(o.report.total);
                util = o.utilization.into_iter().map(|(_, f)| f).collect();
            }
            (losses, t.model, (util, total))
        }
    };
    let task = crate::pipeline::SyntheticTask::new(&model_cfg)?;
    let heldout = evaluate(&model, &model_cfg, &task.batch(HELDOUT_START, HELDOUT_SAMPLES)?)?;
    let (util, total) = last;
    let entropy = (!util.is_empty()).then(|| util.iter().map(|f| utilization_entropy(f)).sum::<f64>() / util.len() as f64);
    Ok(CellResult {
        label: cell.label(),
        cell: cell.clone(),
        error: None,
        total_tokens: model_cfg.total_tokens(),
        initial_task_loss: losses.first().copied(),
        final_task_loss: losses.last().copied(),
        final_total_loss: total,
        heldout_task_loss: Some(heldout.task_loss),
        utilization_entropy: entropy,
        flops_total: flops.total(cfg.model.connector),
        flops_experts: if cfg.model.connector == ConnectorKind::Moec { flops.experts } else { flops.mlp_connector },
        flops_router: if cfg.model.connector == ConnectorKind::Moec { flops.router } else { 0 },
        task_losses: losses,
    })
}

/// Runs every cell with the base seed, in parallel. A failing cell is
/// recorded in its row and the sweep continues. With `out`, each cell gets
/// its own run directory below it and `summary.json` / `summary.txt` are
/// written there.
pub fn run_ablation(base: &ExperimentConfig, axes: &AblationAxes, out: Option<&Path>) -> Result<AblationSummary> {
    let cells = ablation_cells(base, axes);
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let rows: Vec<CellResult> = cells
        .par_iter()
        .map(|cell| {
            run_cell(base, cell, out).unwrap_or_else(|e| {
                let tokens = cell.apply(base).model_config().total_tokens();
                CellResult::failed(cell.clone(), tokens, &e)
            })
        })
        .collect();
    let summary = AblationSummary {
        seed: base.seed,
        steps: base.run.steps,
        rows,
    };
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Contract(e.to_string()))?;
        let p = dir.join("summary.json");
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        let p = dir.join("summary.txt");
        std::fs::write(&p, summary.table()).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}

impl AblationSummary {
    /// Aligned plain-text table, one row per cell.
    pub fn table(&self) -> String {
        let header = [
            "cell", "tokens", "init_task", "final_task", "final_total", "heldout", "util_H", "flops", "expert_flops",
            "status",
        ];
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                vec![
                    r.label.clone(),
                    r.total_tokens.to_string(),
                    fmt(r.initial_task_loss),
                    fmt(r.final_task_loss),
                    fmt(r.final_total_loss),
                    fmt(r.heldout_task_loss),
                    fmt(r.utilization_entropy),
                    r.flops_total.to_string(),
                    r.flops_experts.to_string(),
                    r.error.as_ref().map_or("ok".into(), |e| format!("error: {e}")),
                ]
            })
            .collect();
        let mut width: Vec<usize> = header.iter().map(|h| h.len()).collect();
        for row in &rows {
            for (w, c) in width.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String]| {
            let last = cells.len() - 1;
            for (i, (c, w)) in cells.iter().zip(&width).enumerate() {
                if i == last {
                    let _ = write!(out, "{c}");
                } else if i == 0 {
                    let _ = write!(out, "{c:<w$}  ");
                } else {
                    let _ = write!(out, "{c:>w$}  ");
                }
            }
            out.push('\n');
        };
        line(&mut out, &header.map(String::from));
        for row in &rows {
            line(&mut out, row);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(steps: u64) -> ExperimentConfig {
        let mut c = ExperimentConfig::from_toml(&format!(
            "[run]\nsteps = {steps}\nbatch_size = 2\n\
             [encoders.siglip]\ntokens = 3\n[encoders.dinov2]\ntokens = 3\n\
             [encoders.convnext]\ntokens = 2\n[encoders.clip]\ntokens = 3\n"
        ))
        .unwrap();
        c.seed = 4;
        c
    }

    #[test]
    fn duplicates_collapse() {
        let axes = AblationAxes {
            encoders: vec![
                vec![GroupKind::Siglip, GroupKind::Clip],
                vec![GroupKind::Clip, GroupKind::Siglip],
                vec![GroupKind::Siglip],
            ],
            top_k: vec![2, 2, 1],
            ..AblationAxes::default()
        };
        let cells = ablation_cells(&base(1), &axes);
        assert_eq!(cells.len(), 4);
    }

    #[test]
    fn k_sweep_rows_and_linear_expert_flops() {
        let axes = AblationAxes {
            top_k: vec![1, 2, 3, 4],
            ..AblationAxes::default()
        };
        let s = run_ablation(&base(2), &axes, None).unwrap();
        assert_eq!(s.rows.len(), 4);
        let f: Vec<u64> = s.rows.iter().map(|r| r.flops_experts).collect();
        assert_eq!(f, vec![f[0], 2 * f[0], 3 * f[0], 4 * f[0]]);
        assert!(s.rows.iter().all(|r| r.error.is_none() && r.utilization_entropy.is_some()));
        let table = s.table();
        assert_eq!(table.lines().count(), 5);
        assert!(table.contains("moec-hga-k3-siglip+dinov2+convnext+clip"));
    }

    #[test]
    fn failing_cell_is_recorded_and_sweep_continues() {
        let mut b = base(1);
        b.moec.num_experts = 2;
        let axes = AblationAxes {
            top_k: vec![1, 3],
            ..AblationAxes::default()
        };
        let s = run_ablation(&b, &axes, None).unwrap();
        assert!(s.rows[0].error.is_none());
        assert!(s.rows[1].error.as_deref().unwrap().contains("top_k"));
    }

    #[test]
    fn writes_summary_files_and_cell_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let axes = AblationAxes {
            connector: vec![ConnectorKind::Mlp, ConnectorKind::Moec],
            ..AblationAxes::default()
        };
        let s = run_ablation(&base(1), &axes, Some(tmp.path())).unwrap();
        assert!(tmp.path().join("summary.json").exists());
        assert!(tmp.path().join("summary.txt").exists());
        for r in &s.rows {
            assert!(tmp.path().join(&r.label).join("metrics.jsonl").exists());
        }
        let back: AblationSummary =
            serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(back.rows.len(), 2);
    }
}
