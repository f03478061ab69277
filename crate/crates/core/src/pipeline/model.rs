use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSpec, GroupKind};
use crate::error::{Error, Result};
use crate::hga::HgaConfig;
use crate::moec::{expert_label, Expert, Linear, MoecBank, MoecConfig, Renormalization};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectorKind {
    /// One dense two-layer projector per group.
    Mlp,
    #[default]
    Moec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Plain token-axis append.
    AppendOnly,
    #[default]
    Hga,
}

/// Weights of the auxiliary terms in the total loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub balance_weight: f64,
    pub z_weight: f64,
    /// Attach the auxiliary losses at all.
    pub aux_losses: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            balance_weight: 0.1,
            z_weight: 0.01,
            aux_losses: true,
        }
    }
}

/// Planted-factor classification task used in place of a language model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_classes: usize,
    /// Rank of the latent shared by all streams.
    pub latent_rank: usize,
    /// Per-token deviation of the latent around the sample mean.
    pub token_spread: f64,
    /// Per-feature Gaussian noise.
    pub noise: f64,
    /// How strongly each group sees latent directions other than its own.
    pub leak: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            latent_rank: 4,
            token_spread: 0.5,
            noise: 0.5,
            leak: 0.25,
        }
    }
}

/// Everything needed to build and evaluate a model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub seed: u64,
    /// Active encoder groups in append order.
    pub encoders: Vec<EncoderSpec>,
    pub connector: ConnectorKind,
    pub fusion: FusionKind,
    /// Channel width every stream is standardised to.
    pub input_dim: usize,
    pub output_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub hidden_dim: usize,
    pub renormalization: Renormalization,
    pub hga: HgaConfig,
    pub loss: LossWeights,
    pub task: TaskConfig,
}

impl Default for ModelConfig {
    /// Four groups at full token counts, `E=4, K=2, M=3, N=7`, 16 channels.
    fn default() -> Self {
        Self {
            seed: 0,
            encoders: GroupKind::APPEND_ORDER.map(EncoderSpec::default_for).to_vec(),
            connector: ConnectorKind::Moec,
            fusion: FusionKind::Hga,
            input_dim: 16,
            output_dim: 16,
            num_experts: 4,
            top_k: 2,
            hidden_dim: 8,
            renormalization: Renormalization::Softmax,
            hga: HgaConfig::default(),
            loss: LossWeights::default(),
            task: TaskConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Two tokens per group, `D=4`, hidden 8: small enough for exhaustive
    /// finite differences.
    pub fn tiny() -> Self {
        let encoders = GroupKind::APPEND_ORDER
            .map(|g| {
                let pooled = g == GroupKind::Convnext;
                EncoderSpec {
                    token_count: 2,
                    channel_dim: if pooled { 8 } else { 4 },
                    ..EncoderSpec::default_for(g)
                }
            })
            .to_vec();
        Self {
            encoders,
            input_dim: 4,
            output_dim: 4,
            hidden_dim: 8,
            ..Self::default()
        }
    }

    pub fn groups(&self) -> Vec<GroupKind> {
        self.encoders.iter().map(|e| e.group).collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.encoders.iter().map(|e| e.token_count).sum()
    }

    pub fn moec_config(&self) -> MoecConfig {
        MoecConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            output_dim: self.output_dim,
            renormalization: self.renormalization,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoders.is_empty() {
            return Err(Error::config("model.encoders", "at least one encoder group is required"));
        }
        let mut seen = Vec::new();
        for e in &self.encoders {
            if seen.contains(&e.group) {
                return Err(Error::config("model.encoders", format!("`{}` listed twice", e.group)));
            }
            seen.push(e.group);
            e.validate()?;
            let key = format!("encoders.{}.channels", e.group);
            if e.needs_channel_pooling {
                if e.channel_dim < self.input_dim || e.channel_dim % self.input_dim != 0 {
                    return Err(Error::config(
                        key,
                        format!("{} channels cannot be pooled to input_dim {}", e.channel_dim, self.input_dim),
                    ));
                }
            } else if e.channel_dim != self.input_dim {
                return Err(Error::config(
                    key,
                    format!("{} channels without pooling must equal input_dim {}", e.channel_dim, self.input_dim),
                ));
            }
        }
        self.moec_config().validate()?;
        self.hga.validate()?;
        if !(self.loss.balance_weight >= 0.0 && self.loss.balance_weight.is_finite()) {
            return Err(Error::config("loss.balance_weight", "must be a finite non-negative number"));
        }
        if !(self.loss.z_weight >= 0.0 && self.loss.z_weight.is_finite()) {
            return Err(Error::config("loss.z_weight", "must be a finite non-negative number"));
        }
        let t = &self.task;
        if t.num_classes < 2 {
            return Err(Error::config("task.num_classes", "need at least two classes"));
        }
        if t.latent_rank == 0 {
            return Err(Error::config("task.latent_rank", "must be at least 1"));
        }
        for (k, v) in [("task.token_spread", t.token_spread), ("task.noise", t.noise), ("task.leak", t.leak)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(k, "must be a finite non-negative number"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Connector {
    Mlp(Expert),
    Moec(MoecBank),
}

/// Trainable state: one connector per active group plus the task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub groups: Vec<(GroupKind, Connector)>,
    pub head: Linear,
}

impl Model {
    /// The dense connector of a group is initialised exactly like expert 0
    /// of that group's mixture, so the two variants start from shared
    /// parameters.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mc = cfg.moec_config();
        let groups = cfg
            .encoders
            .iter()
            .map(|e| {
                let prefix = e.group.name();
                let c = match cfg.connector {
                    ConnectorKind::Mlp => Connector::Mlp(Expert::init(&mc, cfg.seed, &expert_label(prefix, 0))),
                    ConnectorKind::Moec => Connector::Moec(MoecBank::init(&mc, cfg.seed, prefix)),
                };
                (e.group, c)
            })
            .collect();
        Ok(Self {
            groups,
            head: Linear::init(cfg.output_dim, cfg.task.num_classes, cfg.seed, "head"),
        })
    }

    /// Parameters in registration order with stable names.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (g, c) in &self.groups {
            match c {
                Connector::Mlp(e) => push_expert(&mut out, &format!("{g}.mlp"), e),
                Connector::Moec(b) => {
                    push_linear(&mut out, &format!("{g}.router"), &b.router);
                    for (i, e) in b.experts.iter().enumerate() {
                        push_expert(&mut out, &expert_label(g.name(), i), e);
                    }
                }
            }
        }
        push_linear(&mut out, "head", &self.head);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = Vec::new();
        for (_, c) in &mut self.groups {
            match c {
                Connector::Mlp(e) => expert_mut(&mut out, e),
                Connector::Moec(b) => {
                    out.push(&mut b.router.weight);
                    out.push(&mut b.router.bias);
                    for e in &mut b.experts {
                        expert_mut(&mut out, e);
                    }
                }
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }
}

fn push_linear<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, l: &'a Linear) {
    out.push((format!("{prefix}.weight"), &l.weight));
    out.push((format!("{prefix}.bias"), &l.bias));
}

fn push_expert<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, e: &'a Expert) {
    push_linear(out, &format!("{prefix}.fc1"), &e.fc1);
    push_linear(out, &format!("{prefix}.fc2"), &e.fc2);
}

fn expert_mut<'a>(out: &mut Vec<&'a mut Matrix>, e: &'a mut Expert) {
    out.push(&mut e.fc1.weight);
    out.push(&mut e.fc1.bias);
    out.push(&mut e.fc2.weight);
    out.push(&mut e.fc2.bias);
}
