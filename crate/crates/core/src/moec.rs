//! Mixture-of-experts connector.
//!
//! A linear router scores every expert per token, a row softmax turns the
//! scores into dense routing weights, the `K` largest are kept and
//! re-normalised, and the token's output is the weighted sum of only those
//! `K` experts. Each expert is `linear -> GELU -> linear`.
//!
//! The graph-building functions (`*_on`) are what the training pipeline
//! uses; [`route`], [`expert_forward`], [`moec_forward`], [`balance_loss`]
//! and [`z_loss`] are value-level wrappers around the same code.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Tape, Var};
use crate::seed::rng_for;

/// How the `K` selected routing weights are re-normalised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renormalization {
    /// Softmax over the selected (already softmaxed) weights.
    #[default]
    Softmax,
    /// Division by the sum of the selected weights.
    Sum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoecConfig {
    pub num_experts: usize,
    pub top_k: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub renormalization: Renormalization,
}

impl MoecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::config("moec.num_experts", "need at least one expert"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::config(
                "moec.top_k",
                format!("top_k={} must lie in 1..={}", self.top_k, self.num_experts),
            ));
        }
        for (k, v) in [
            ("moec.input_dim", self.input_dim),
            ("moec.hidden_dim", self.hidden_dim),
            ("model.output_dim", self.output_dim),
        ] {
            if v == 0 {
                return Err(Error::config(k, "dimension must be at least 1"));
            }
        }
        Ok(())
    }
}

/// `x W + b` with `W: in x out` and `b: 1 x out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    /// Uniform weights in `±1/sqrt(in)`, zero bias. The draw is keyed by
    /// `label`, so the same label always yields the same layer.
    pub fn init(input: usize, output: usize, seed: u64, label: &str) -> Self {
        let mut rng = rng_for(seed, label);
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Matrix::from_fn(input, output, |_, _| rng.random_range(-bound..bound)),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }
}

/// Two linear layers with a GELU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Expert {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Expert {
    pub fn init(cfg: &MoecConfig, seed: u64, label: &str) -> Self {
        Self {
            fc1: Linear::init(cfg.input_dim, cfg.hidden_dim, seed, &format!("{label}.fc1")),
            fc2: Linear::init(cfg.hidden_dim, cfg.output_dim, seed, &format!("{label}.fc2")),
        }
    }
}

/// Router plus `E` experts for one encoder group.
#[derive(Clone, Debug, PartialEq)]
pub struct MoecBank {
    pub router: Linear,
    pub experts: Vec<Expert>,
}

impl MoecBank {
    /// Expert `i` is keyed `{prefix}.expert{i}`, the router `{prefix}.router`.
    pub fn init(cfg: &MoecConfig, seed: u64, prefix: &str) -> Self {
        Self {
            router: Linear::init(cfg.input_dim, cfg.num_experts, seed, &format!("{prefix}.router")),
            experts: (0..cfg.num_experts)
                .map(|i| Expert::init(cfg, seed, &expert_label(prefix, i)))
                .collect(),
        }
    }

    pub fn check(&self, cfg: &MoecConfig) -> Result<()> {
        let want = (cfg.input_dim, cfg.num_experts);
        if self.router.weight.shape() != want {
            return Err(Error::shape("MoecBank.router", self.router.weight.shape(), want));
        }
        if self.experts.len() != cfg.num_experts {
            return Err(Error::Param {
                op: "MoecBank",
                msg: format!("{} experts, config says {}", self.experts.len(), cfg.num_experts),
            });
        }
        for e in &self.experts {
            if e.fc1.weight.shape() != (cfg.input_dim, cfg.hidden_dim) {
                return Err(Error::shape("MoecBank.fc1", e.fc1.weight.shape(), (cfg.input_dim, cfg.hidden_dim)));
            }
            if e.fc2.weight.shape() != (cfg.hidden_dim, cfg.output_dim) {
                return Err(Error::shape("MoecBank.fc2", e.fc2.weight.shape(), (cfg.hidden_dim, cfg.output_dim)));
            }
        }
        Ok(())
    }
}

pub fn expert_label(prefix: &str, i: usize) -> String {
    format!("{prefix}.expert{i}")
}

/// Routing outcome for a batch of tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct RouterDecision {
    /// `tokens x E`
    pub logits: Matrix,
    /// `tokens x E`, row softmax of `logits`.
    pub dense_weights: Matrix,
    /// `K` distinct expert indices per token, highest weight first.
    pub selected_indices: Vec<Vec<usize>>,
    /// `tokens x K`, re-normalised weights aligned with `selected_indices`.
    pub selected_weights: Matrix,
}

impl RouterDecision {
    pub fn num_experts(&self) -> usize {
        self.dense_weights.cols()
    }

    pub fn top_k(&self) -> usize {
        self.selected_weights.cols()
    }

    /// Fraction of routing slots that went to each expert, `count_e / (T K)`.
    pub fn utilization(&self) -> Vec<f64> {
        utilization(&self.selected_indices, self.num_experts())
    }
}

pub(crate) fn utilization(indices: &[Vec<usize>], num_experts: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_experts];
    let mut slots = 0usize;
    for row in indices {
        for &e in row {
            counts[e] += 1;
            slots += 1;
        }
    }
    counts.into_iter().map(|c| c as f64 / slots as f64).collect()
}

/// Shannon entropy (nats) of a utilization histogram.
pub fn utilization_entropy(f: &[f64]) -> f64 {
    -f.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

// ---------------------------------------------------------------------------
// Graph construction

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

#[derive(Clone, Debug)]
pub struct BankVars {
    pub router: LinearVars,
    pub experts: Vec<ExpertVars>,
}

impl LinearVars {
    pub fn register(tape: &mut Tape, l: &Linear, trainable: bool) -> Self {
        let mut leaf = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        Self {
            weight: leaf(&l.weight),
            bias: leaf(&l.bias),
        }
    }
}

impl ExpertVars {
    pub fn register(tape: &mut Tape, e: &Expert, trainable: bool) -> Self {
        Self {
            fc1: LinearVars::register(tape, &e.fc1, trainable),
            fc2: LinearVars::register(tape, &e.fc2, trainable),
        }
    }
}

impl BankVars {
    pub fn register(tape: &mut Tape, bank: &MoecBank, trainable: bool) -> Self {
        Self {
            router: LinearVars::register(tape, &bank.router, trainable),
            experts: bank.experts.iter().map(|e| ExpertVars::register(tape, e, trainable)).collect(),
        }
    }
}

/// Graph handles for a routing decision.
#[derive(Clone, Debug)]
pub struct RoutedVars {
    pub logits: Var,
    pub dense: Var,
    pub selected: Var,
    pub indices: Vec<Vec<usize>>,
}

impl RoutedVars {
    pub fn decision(&self, tape: &Tape) -> RouterDecision {
        RouterDecision {
            logits: tape.value(self.logits).clone(),
            dense_weights: tape.value(self.dense).clone(),
            selected_indices: self.indices.clone(),
            selected_weights: tape.value(self.selected).clone(),
        }
    }
}

pub fn linear_on(tape: &mut Tape, x: Var, l: &LinearVars) -> Result<Var> {
    let xw = tape.matmul(x, l.weight)?;
    tape.add_row(xw, l.bias)
}

pub fn expert_on(tape: &mut Tape, x: Var, e: &ExpertVars) -> Result<Var> {
    let h = linear_on(tape, x, &e.fc1)?;
    let h = tape.gelu(h)?;
    linear_on(tape, h, &e.fc2)
}

pub fn route_on(tape: &mut Tape, x: Var, bank: &BankVars, cfg: &MoecConfig) -> Result<RoutedVars> {
    let logits = linear_on(tape, x, &bank.router)?;
    let dense = tape.softmax_rows(logits)?;
    let top = tape.value(dense).topk_rows(cfg.top_k)?;
    let tokens = top.indices.len();
    let entries = top
        .indices
        .iter()
        .enumerate()
        .flat_map(|(t, row)| row.iter().map(move |&e| (t, e)))
        .collect();
    let picked = tape.gather(dense, entries, (tokens, cfg.top_k))?;
    let selected = match cfg.renormalization {
        Renormalization::Softmax => tape.softmax_rows(picked)?,
        Renormalization::Sum => tape.normalize_rows(picked)?,
    };
    Ok(RoutedVars {
        logits,
        dense,
        selected,
        indices: top.indices,
    })
}

/// Sparse combination: each expert only sees the tokens routed to it.
pub fn moec_on(tape: &mut Tape, x: Var, bank: &BankVars, cfg: &MoecConfig) -> Result<(Var, RoutedVars)> {
    let (tokens, dim) = tape.value(x).shape();
    if dim != cfg.input_dim {
        return Err(Error::shape("moec_forward", (tokens, dim), (tokens, cfg.input_dim)));
    }
    let routed = route_on(tape, x, bank, cfg)?;
    let mut hidden: Option<Var> = None;
    for (e, expert) in bank.experts.iter().enumerate() {
        let mut rows = Vec::new();
        let mut slots = Vec::new();
        for (t, sel) in routed.indices.iter().enumerate() {
            if let Some(k) = sel.iter().position(|&i| i == e) {
                rows.push(t);
                slots.push((t, k));
            }
        }
        if rows.is_empty() {
            continue;
        }
        let n = rows.len();
        let xe = tape.gather_rows(x, rows.clone())?;
        let he = expert_on(tape, xe, expert)?;
        let we = tape.gather(routed.selected, slots, (n, 1))?;
        let weighted = tape.mul_col(he, we)?;
        let placed = tape.scatter_rows(weighted, rows, tokens)?;
        hidden = Some(match hidden {
            Some(h) => tape.add(h, placed)?,
            None => placed,
        });
    }
    let hidden = hidden.ok_or_else(|| Error::Contract("moec_forward on zero tokens".into()))?;
    Ok((hidden, routed))
}

/// `E * sum_e f_e P_e`; `f_e` is held constant, gradients reach the router
/// through `P_e` only.
pub fn balance_loss_on(tape: &mut Tape, routed: &RoutedVars) -> Result<Var> {
    let e = tape.value(routed.dense).cols();
    let f = Matrix::new(1, e, utilization(&routed.indices, e))?;
    let f = tape.constant(f);
    let p = tape.mean_rows(routed.dense)?;
    let fp = tape.mul(f, p)?;
    let s = tape.sum(fp)?;
    tape.scale(s, e as f64)
}

/// Mean over tokens of the squared row log-sum-exp of the router logits.
pub fn z_loss_on(tape: &mut Tape, routed: &RoutedVars) -> Result<Var> {
    let lse = tape.logsumexp_rows(routed.logits)?;
    let sq = tape.square(lse)?;
    tape.mean(sq)
}

// ---------------------------------------------------------------------------
// Value-level wrappers

fn with_bank<T>(
    features: &Matrix,
    bank: &MoecBank,
    cfg: &MoecConfig,
    f: impl FnOnce(&mut Tape, Var, &BankVars) -> Result<T>,
) -> Result<T> {
    cfg.validate()?;
    bank.check(cfg)?;
    if features.cols() != cfg.input_dim {
        return Err(Error::shape("moec", features.shape(), (features.rows(), cfg.input_dim)));
    }
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = BankVars::register(&mut tape, bank, false);
    f(&mut tape, x, &vars)
}

pub fn route(features: &Matrix, bank: &MoecBank, cfg: &MoecConfig) -> Result<RouterDecision> {
    with_bank(features, bank, cfg, |tape, x, vars| Ok(route_on(tape, x, vars, cfg)?.decision(tape)))
}

pub fn expert_forward(features: &Matrix, expert: &Expert) -> Result<Matrix> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let vars = ExpertVars::register(&mut tape, expert, false);
    let out = expert_on(&mut tape, x, &vars)?;
    Ok(tape.value(out).clone())
}

pub fn moec_forward(features: &Matrix, bank: &MoecBank, cfg: &MoecConfig) -> Result<(Matrix, RouterDecision)> {
    with_bank(features, bank, cfg, |tape, x, vars| {
        let (h, routed) = moec_on(tape, x, vars, cfg)?;
        Ok((tape.value(h).clone(), routed.decision(tape)))
    })
}

pub fn balance_loss(decision: &RouterDecision) -> f64 {
    let e = decision.num_experts();
    let f = decision.utilization();
    let p = decision.dense_weights.mean_rows();
    e as f64 * f.iter().zip(p.data()).map(|(a, b)| a * b).sum::<f64>()
}

pub fn z_loss(decision: &RouterDecision) -> f64 {
    let lse = decision.logits.logsumexp_rows();
    lse.data().iter().map(|v| v * v).sum::<f64>() / lse.rows() as f64
}
