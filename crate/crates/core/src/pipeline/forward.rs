use serde::{Deserialize, Serialize};

use crate::encoders::{FeatureStream, GroupKind};
use crate::error::{Error, Result};
use crate::hga::{hga_forward, hga_on, layout, sequence_append, FusedSequence, SelectionSet};
use crate::moec::{
    balance_loss, balance_loss_on, expert_forward, expert_on, linear_on, moec_forward, moec_on, z_loss, z_loss_on,
    ExpertVars, BankVars, Linear, LinearVars, RoutedVars, RouterDecision,
};
use crate::numerics::{Matrix, Tape, Var};

use super::data::Sample;
use super::model::{Connector, FusionKind, LossWeights, Model, ModelConfig};

/// Components of the total loss. Per-group arrays are indexed by
/// [`GroupKind::index`]; inactive groups and dense connectors report zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task_loss: f64,
    pub balance: [f64; 4],
    pub zloss: [f64; 4],
    pub total: f64,
    pub balance_weight: f64,
    pub z_weight: f64,
}

impl LossReport {
    /// `task + a_b * sum(balance) + a_z * sum(zloss)`, summed in the same
    /// order as the graph.
    pub fn recombine(&self) -> f64 {
        let b = self.balance.iter().fold(0.0, |acc, v| acc + v);
        let z = self.zloss.iter().fold(0.0, |acc, v| acc + v);
        self.task_loss + self.balance_weight * b + self.z_weight * z
    }

    /// Name of the first non-finite component, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        if !self.task_loss.is_finite() {
            return Some("task_loss".into());
        }
        for g in GroupKind::APPEND_ORDER {
            if !self.balance[g.index()].is_finite() {
                return Some(format!("balance.{g}"));
            }
            if !self.zloss[g.index()].is_finite() {
                return Some(format!("zloss.{g}"));
            }
        }
        (!self.total.is_finite()).then(|| "total".into())
    }
}

/// Output of a value-level forward pass on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub x_in: FusedSequence,
    pub x_out: FusedSequence,
    /// Router decisions of the active groups; empty for dense connectors.
    pub decisions: Vec<(GroupKind, RouterDecision)>,
    pub selections: Option<SelectionSet>,
}

fn check_streams(cfg: &ModelConfig, streams: &[&FeatureStream]) -> Result<()> {
    if streams.len() != cfg.encoders.len() {
        return Err(Error::Contract(format!(
            "{} streams for {} configured groups",
            streams.len(),
            cfg.encoders.len()
        )));
    }
    for (s, e) in streams.iter().zip(&cfg.encoders) {
        let want = (e.token_count, cfg.input_dim);
        if s.spec.group != e.group || s.features.shape() != want {
            return Err(Error::Contract(format!(
                "stream {} {}x{} does not match {} {}x{}",
                s.spec.group,
                s.features.rows(),
                s.features.cols(),
                e.group,
                want.0,
                want.1
            )));
        }
    }
    Ok(())
}

/// Connectors, append, fusion; standardised streams in, `T x D` out.
pub fn forward(model: &Model, cfg: &ModelConfig, streams: &[FeatureStream]) -> Result<Forward> {
    check_streams(cfg, &streams.iter().collect::<Vec<_>>())?;
    let mc = cfg.moec_config();
    let mut parts = Vec::new();
    let mut decisions = Vec::new();
    for ((g, conn), s) in model.groups.iter().zip(streams) {
        let h = match conn {
            Connector::Mlp(e) => expert_forward(&s.features, e)?,
            Connector::Moec(bank) => {
                let (h, d) = moec_forward(&s.features, bank, &mc)?;
                decisions.push((*g, d));
                h
            }
        };
        parts.push((*g, h));
    }
    let x_in = sequence_append(&parts)?;
    let (x_out, selections) = match cfg.fusion {
        FusionKind::AppendOnly => (x_in.clone(), None),
        FusionKind::Hga => {
            let (tokens, sel) = hga_forward(&x_in, &cfg.hga)?;
            let out = FusedSequence {
                tokens,
                groups: x_in.groups.clone(),
            };
            (out, Some(sel))
        }
    };
    Ok(Forward {
        x_in,
        x_out,
        decisions,
        selections,
    })
}

/// Mean cross-entropy of the linear head applied to mean-pooled outputs.
pub fn task_loss(x_outs: &[&Matrix], head: &Linear, labels: &[usize]) -> Result<f64> {
    if x_outs.len() != labels.len() || labels.is_empty() {
        return Err(Error::Contract(format!("{} outputs for {} labels", x_outs.len(), labels.len())));
    }
    let pooled: Vec<Matrix> = x_outs.iter().map(|x| x.mean_rows()).collect();
    let pooled = Matrix::concat_rows(&pooled.iter().collect::<Vec<_>>())?;
    let logits = pooled.matmul(&head.weight)?.add_row(&head.bias)?;
    let lse = logits.logsumexp_rows();
    let mut nll = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= logits.cols() {
            return Err(Error::Contract(format!("label {y} out of {} classes", logits.cols())));
        }
        nll += lse.get(b, 0) - logits.get(b, y);
    }
    Ok(nll / labels.len() as f64)
}

/// Value-level total loss from fused outputs and router decisions.
pub fn total_loss(
    x_outs: &[&Matrix],
    decisions: &[(GroupKind, RouterDecision)],
    head: &Linear,
    labels: &[usize],
    weights: &LossWeights,
) -> Result<LossReport> {
    let mut report = LossReport {
        task_loss: task_loss(x_outs, head, labels)?,
        balance: [0.0; 4],
        zloss: [0.0; 4],
        total: 0.0,
        balance_weight: weights.balance_weight,
        z_weight: weights.z_weight,
    };
    if weights.aux_losses {
        for (g, d) in decisions {
            report.balance[g.index()] = balance_loss(d);
            report.zloss[g.index()] = z_loss(d);
        }
    }
    report.total = report.recombine();
    Ok(report)
}

#[derive(Clone, Debug)]
enum ConnectorVars {
    Mlp(ExpertVars),
    Moec(BankVars),
}

/// The whole batch loss as one graph.
pub struct Graph {
    pub tape: Tape,
    /// One output per sample, `T x D`.
    pub x_out: Vec<Var>,
    pub routed: Vec<(GroupKind, RoutedVars)>,
    pub selections: Vec<SelectionSet>,
    pub logits: Var,
    pub task: Var,
    pub total: Var,
    balance: Vec<(GroupKind, Var)>,
    zloss: Vec<(GroupKind, Var)>,
    weights: LossWeights,
}

impl Graph {
    /// Every connector runs once on the batch-concatenated tokens of its
    /// group, so the auxiliary losses see all tokens of the batch.
    pub fn build(model: &Model, cfg: &ModelConfig, samples: &[Sample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        for s in samples {
            check_streams(cfg, &s.streams.iter().collect::<Vec<_>>())?;
        }
        let mc = cfg.moec_config();
        let mut tape = Tape::new();
        let vars: Vec<ConnectorVars> = model
            .groups
            .iter()
            .map(|(_, c)| match c {
                Connector::Mlp(e) => ConnectorVars::Mlp(ExpertVars::register(&mut tape, e, true)),
                Connector::Moec(b) => ConnectorVars::Moec(BankVars::register(&mut tape, b, true)),
            })
            .collect();
        let head = LinearVars::register(&mut tape, &model.head, true);

        let mut hidden = Vec::new();
        let mut routed = Vec::new();
        for (gi, ((g, _), v)) in model.groups.iter().zip(&vars).enumerate() {
            let feats: Vec<&Matrix> = samples.iter().map(|s| &s.streams[gi].features).collect();
            let x = tape.constant(Matrix::concat_rows(&feats)?);
            let h = match v {
                ConnectorVars::Mlp(e) => expert_on(&mut tape, x, e)?,
                ConnectorVars::Moec(b) => {
                    let (h, r) = moec_on(&mut tape, x, b, &mc)?;
                    routed.push((*g, r));
                    h
                }
            };
            hidden.push(h);
        }

        let spans = layout(&cfg.encoders.iter().map(|e| (e.group, e.token_count)).collect::<Vec<_>>())?;
        let mut x_out = Vec::with_capacity(samples.len());
        let mut selections = Vec::new();
        let mut pooled = Vec::with_capacity(samples.len());
        for b in 0..samples.len() {
            let mut parts = Vec::with_capacity(hidden.len());
            for (h, e) in hidden.iter().zip(&cfg.encoders) {
                parts.push(tape.slice_rows(*h, b * e.token_count, e.token_count)?);
            }
            let x_in = tape.concat_rows(&parts)?;
            let out = match cfg.fusion {
                FusionKind::AppendOnly => x_in,
                FusionKind::Hga => {
                    let (out, sel) = hga_on(&mut tape, x_in, &spans, &cfg.hga)?;
                    selections.push(sel);
                    out
                }
            };
            pooled.push(tape.mean_rows(out)?);
            x_out.push(out);
        }
        let pooled = tape.concat_rows(&pooled)?;
        let logits = linear_on(&mut tape, pooled, &head)?;
        let lse = tape.logsumexp_rows(logits)?;
        let entries = samples.iter().enumerate().map(|(b, s)| (b, s.label)).collect();
        if let Some(s) = samples.iter().find(|s| s.label >= cfg.task.num_classes) {
            return Err(Error::Contract(format!("label {} out of {} classes", s.label, cfg.task.num_classes)));
        }
        let picked = tape.gather(logits, entries, (samples.len(), 1))?;
        let nll = tape.sub(lse, picked)?;
        let task = tape.mean(nll)?;

        let weights = cfg.loss;
        let mut balance = Vec::new();
        let mut zloss = Vec::new();
        let mut total = task;
        if weights.aux_losses && !routed.is_empty() {
            for (g, r) in &routed {
                balance.push((*g, balance_loss_on(&mut tape, r)?));
                zloss.push((*g, z_loss_on(&mut tape, r)?));
            }
            let sb = sum_vars(&mut tape, &balance)?;
            let sz = sum_vars(&mut tape, &zloss)?;
            let sb = tape.scale(sb, weights.balance_weight)?;
            let sz = tape.scale(sz, weights.z_weight)?;
            total = tape.add(total, sb)?;
            total = tape.add(total, sz)?;
        }
        Ok(Self {
            tape,
            x_out,
            routed,
            selections,
            logits,
            task,
            total,
            balance,
            zloss,
            weights,
        })
    }

    pub fn report(&self) -> LossReport {
        let mut r = LossReport {
            task_loss: self.tape.scalar(self.task),
            balance: [0.0; 4],
            zloss: [0.0; 4],
            total: self.tape.scalar(self.total),
            balance_weight: self.weights.balance_weight,
            z_weight: self.weights.z_weight,
        };
        for (g, v) in &self.balance {
            r.balance[g.index()] = self.tape.scalar(*v);
        }
        for (g, v) in &self.zloss {
            r.zloss[g.index()] = self.tape.scalar(*v);
        }
        r
    }

    pub fn decisions(&self) -> Vec<(GroupKind, RouterDecision)> {
        self.routed.iter().map(|(g, r)| (*g, r.decision(&self.tape))).collect()
    }

    /// Gradients of the total loss for every parameter, in
    /// [`Model::named_params`] order.
    pub fn gradients(&self) -> Result<Vec<Matrix>> {
        let g = self.tape.backward(self.total)?;
        Ok(self.tape.params().iter().map(|&p| g.wrt(p)).collect())
    }
}

/// Adds in group order, matching [`LossReport::recombine`].
fn sum_vars(tape: &mut Tape, vars: &[(GroupKind, Var)]) -> Result<Var> {
    let mut sorted = vars.to_vec();
    sorted.sort_by_key(|(g, _)| g.index());
    let mut acc = tape.constant(Matrix::scalar(0.0));
    for (_, v) in sorted {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// Loss of a batch without gradients.
pub fn evaluate(model: &Model, cfg: &ModelConfig, samples: &[Sample]) -> Result<LossReport> {
    Ok(Graph::build(model, cfg, samples)?.report())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderSpec;
    use crate::hga::{adaptive_gate, aggregate, select};
    use crate::moec::route;
    use crate::pipeline::data::SyntheticTask;
    use crate::pipeline::model::ConnectorKind;

    fn setup(cfg: &ModelConfig, n: usize) -> (Model, Vec<Sample>) {
        let model = Model::init(cfg).unwrap();
        let samples = SyntheticTask::new(cfg).unwrap().batch(0, n).unwrap();
        (model, samples)
    }

    #[test]
    fn default_output_shape() {
        let cfg = ModelConfig::default();
        let (model, samples) = setup(&cfg, 1);
        let f = forward(&model, &cfg, &samples[0].streams).unwrap();
        assert_eq!(f.x_out.tokens.shape(), (1692, 16));
        assert_eq!(f.decisions.len(), 4);
    }

    #[test]
    fn single_token_single_expert_is_the_mlp() {
        let spec = EncoderSpec {
            token_count: 1,
            channel_dim: 4,
            ..EncoderSpec::default_for(GroupKind::Siglip)
        };
        let cfg = ModelConfig {
            encoders: vec![spec],
            num_experts: 1,
            top_k: 1,
            ..ModelConfig::tiny()
        };
        let (model, samples) = setup(&cfg, 1);
        let f = forward(&model, &cfg, &samples[0].streams).unwrap();
        let Connector::Moec(bank) = &model.groups[0].1 else { panic!() };
        let mlp = expert_forward(&samples[0].streams[0].features, &bank.experts[0]).unwrap();
        assert_eq!(f.x_out.tokens, mlp);
    }

    /// Straight-line composition from the value-level building blocks.
    fn reference(model: &Model, cfg: &ModelConfig, s: &Sample) -> (Matrix, Vec<RouterDecision>) {
        let mc = cfg.moec_config();
        let mut parts = Vec::new();
        let mut decisions = Vec::new();
        for ((g, c), st) in model.groups.iter().zip(&s.streams) {
            let Connector::Moec(bank) = c else { panic!() };
            let d = route(&st.features, bank, &mc).unwrap();
            let mut h = Matrix::zeros(st.features.rows(), cfg.output_dim);
            for t in 0..st.features.rows() {
                let row = st.features.slice_rows(t, 1).unwrap();
                for (k, &e) in d.selected_indices[t].iter().enumerate() {
                    let y = expert_forward(&row, &bank.experts[e]).unwrap();
                    let w = d.selected_weights.get(t, k);
                    for (o, v) in h.row_mut(t).iter_mut().zip(y.data()) {
                        *o += w * v;
                    }
                }
            }
            parts.push((*g, h));
            decisions.push(d);
        }
        let seq = sequence_append(&parts).unwrap();
        let sel = select(&seq, &cfg.hga).unwrap();
        let agg = aggregate(&seq, &sel).unwrap();
        (adaptive_gate(&seq.tokens, &agg, &cfg.hga).unwrap(), decisions)
    }

    #[test]
    fn tiny_forward_matches_step_by_step_reference() {
        for seed in 0..5 {
            let cfg = ModelConfig { seed, ..ModelConfig::tiny() };
            let (model, samples) = setup(&cfg, 3);
            for s in &samples {
                let f = forward(&model, &cfg, &s.streams).unwrap();
                let (want, decisions) = reference(&model, &cfg, s);
                assert_eq!(f.x_out.tokens.shape(), (8, 4));
                assert!(f.x_out.tokens.max_abs_diff(&want) < 1e-12);
                for ((_, a), b) in f.decisions.iter().zip(&decisions) {
                    assert_eq!(a.selected_indices, b.selected_indices);
                }
            }
        }
    }

    #[test]
    fn graph_matches_value_forward_and_loss() {
        let cfg = ModelConfig::tiny();
        let (model, samples) = setup(&cfg, 4);
        let g = Graph::build(&model, &cfg, &samples).unwrap();
        let outs: Vec<Matrix> = samples
            .iter()
            .map(|s| forward(&model, &cfg, &s.streams).unwrap().x_out.tokens)
            .collect();
        for (v, want) in g.x_out.iter().zip(&outs) {
            assert_eq!(g.tape.value(*v), want);
        }
        let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
        let value = total_loss(&outs.iter().collect::<Vec<_>>(), &g.decisions(), &model.head, &labels, &cfg.loss).unwrap();
        let graph = g.report();
        assert!((value.total - graph.total).abs() < 1e-12);
        assert!((value.task_loss - graph.task_loss).abs() < 1e-12);
        assert!((graph.total - graph.recombine()).abs() < 1e-12);
        assert!(graph.balance.iter().chain(&graph.zloss).all(|v| *v > 0.0));
    }

    #[test]
    fn zero_weights_make_total_the_task_loss() {
        let cfg = ModelConfig {
            loss: LossWeights {
                balance_weight: 0.0,
                z_weight: 0.0,
                aux_losses: true,
            },
            ..ModelConfig::tiny()
        };
        let (model, samples) = setup(&cfg, 2);
        let r = evaluate(&model, &cfg, &samples).unwrap();
        assert_eq!(r.total, r.task_loss);
        assert!(r.balance[0] > 0.0);
    }

    #[test]
    fn uniform_routing_gives_four_in_balance() {
        let cfg = ModelConfig::tiny();
        let (mut model, samples) = setup(&cfg, 2);
        for (_, c) in &mut model.groups {
            let Connector::Moec(b) = c else { panic!() };
            b.router = Linear::zeros(cfg.input_dim, cfg.num_experts);
        }
        let r = evaluate(&model, &cfg, &samples).unwrap();
        let sum_b: f64 = r.balance.iter().sum();
        assert!((sum_b - 4.0).abs() < 1e-8);
        let z = (4.0f64).ln().powi(2);
        assert!(r.zloss.iter().all(|v| (v - z).abs() < 1e-12));
        let want = r.task_loss + 0.1 * 4.0 + 0.01 * 4.0 * z;
        assert!((r.total - want).abs() < 1e-12);
    }

    #[test]
    fn dense_connector_reports_no_aux_losses() {
        let cfg = ModelConfig {
            connector: ConnectorKind::Mlp,
            ..ModelConfig::tiny()
        };
        let (model, samples) = setup(&cfg, 2);
        let r = evaluate(&model, &cfg, &samples).unwrap();
        assert_eq!(r.balance, [0.0; 4]);
        assert_eq!(r.zloss, [0.0; 4]);
        assert_eq!(r.total, r.task_loss);
        assert!(matches!(model.groups[0].1, Connector::Mlp(_)));
    }

    #[test]
    fn gradient_order_matches_named_params() {
        let cfg = ModelConfig::tiny();
        let (model, samples) = setup(&cfg, 2);
        let g = Graph::build(&model, &cfg, &samples).unwrap();
        let grads = g.gradients().unwrap();
        let named = model.named_params();
        assert_eq!(grads.len(), named.len());
        for ((name, p), gr) in named.iter().zip(&grads) {
            assert_eq!(p.shape(), gr.shape(), "{name}");
        }
    }

    #[test]
    fn mismatched_streams_are_rejected() {
        let cfg = ModelConfig::tiny();
        let (model, mut samples) = setup(&cfg, 1);
        samples[0].streams.swap(0, 1);
        assert!(matches!(forward(&model, &cfg, &samples[0].streams), Err(Error::Contract(_))));
        assert!(Graph::build(&model, &cfg, &[]).is_err());
    }
}
