use serde::{Deserialize, Serialize};

use crate::error::Result;

use super::model::{ConnectorKind, FusionKind, ModelConfig};

/// Multiply-add counts for one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsEstimate {
    pub total_tokens: u64,
    /// Channel pooling of flagged streams.
    pub pooling: u64,
    /// `T * in * E`
    pub router: u64,
    /// `T * K * (in * h + h * D)`
    pub experts: u64,
    /// `T * (in * h + h * D)`, the dense connector on the same tokens.
    pub mlp_connector: u64,
    /// `sum_g g * g * D`
    pub intra_similarity: u64,
    /// `sum_g g * (T - g) * D`
    pub inter_similarity: u64,
    /// Weighted mean over `min(M, g-1) + min(N, T-g)` picks per token.
    pub aggregation: u64,
    pub gate: u64,
    /// Mean pooling and the linear head.
    pub head: u64,
    /// Everything with the mixture connector.
    pub total_moec: u64,
    /// Everything with the dense connector.
    pub total_mlp: u64,
}

impl FlopsEstimate {
    /// Cost of the configured connector variant.
    pub fn total(&self, connector: ConnectorKind) -> u64 {
        match connector {
            ConnectorKind::Mlp => self.total_mlp,
            ConnectorKind::Moec => self.total_moec,
        }
    }

    /// `(total_moec - total_mlp) / total_moec`.
    pub fn moec_overhead(&self) -> f64 {
        (self.total_moec as f64 - self.total_mlp as f64) / self.total_moec as f64
    }
}

pub fn flops_estimate(cfg: &ModelConfig) -> Result<FlopsEstimate> {
    cfg.validate()?;
    let u = |v: usize| v as u64;
    let t = u(cfg.total_tokens());
    let (din, h, d) = (u(cfg.input_dim), u(cfg.hidden_dim), u(cfg.output_dim));
    let pooling = cfg
        .encoders
        .iter()
        .filter(|e| e.needs_channel_pooling)
        .map(|e| u(e.token_count) * u(e.channel_dim))
        .sum();
    let per_token = din * h + h * d;
    let (mut intra, mut inter, mut aggregation) = (0, 0, 0);
    if cfg.fusion == FusionKind::Hga {
        for e in &cfg.encoders {
            let g = u(e.token_count);
            intra += g * g * d;
            inter += g * (t - g) * d;
            let picks = g.saturating_sub(1).min(u(cfg.hga.top_m)) + (t - g).min(u(cfg.hga.top_n));
            aggregation += g * picks * d;
        }
    }
    let gate = if cfg.fusion == FusionKind::Hga { t * d } else { 0 };
    let head = t * d + d * u(cfg.task.num_classes);
    let router = t * din * u(cfg.num_experts);
    let experts = t * u(cfg.top_k) * per_token;
    let mlp_connector = t * per_token;
    let shared = pooling + intra + inter + aggregation + gate + head;
    Ok(FlopsEstimate {
        total_tokens: t,
        pooling,
        router,
        experts,
        mlp_connector,
        intra_similarity: intra,
        inter_similarity: inter,
        aggregation,
        gate,
        head,
        total_moec: shared + router + experts,
        total_mlp: shared + mlp_connector,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderSpec, GroupKind};

    #[test]
    fn single_expert_is_mlp_plus_router() {
        let cfg = ModelConfig {
            num_experts: 1,
            top_k: 1,
            ..ModelConfig::default()
        };
        let f = flops_estimate(&cfg).unwrap();
        assert_eq!(f.total_moec, f.total_mlp + f.router);
        assert_eq!(f.experts, f.mlp_connector);
    }

    #[test]
    fn expert_term_is_linear_in_k() {
        let at = |k| flops_estimate(&ModelConfig { top_k: k, ..ModelConfig::default() }).unwrap().experts;
        assert_eq!(at(2), 2 * at(1));
        assert_eq!(at(4), 4 * at(1));
        assert_eq!(at(3) - at(2), at(2) - at(1));
    }

    #[test]
    fn intra_term_is_quadratic_in_group_size() {
        let sized = |n: usize| {
            let spec = EncoderSpec {
                token_count: n,
                ..EncoderSpec::default_for(GroupKind::Siglip)
            };
            let cfg = ModelConfig {
                encoders: vec![spec],
                ..ModelConfig::default()
            };
            flops_estimate(&cfg).unwrap().intra_similarity
        };
        assert_eq!(sized(20), 4 * sized(10));
        assert_eq!(sized(30), 9 * sized(10));
    }

    #[test]
    fn default_numbers() {
        let f = flops_estimate(&ModelConfig::default()).unwrap();
        assert_eq!(f.total_tokens, 1692);
        assert_eq!(f.router, 1692 * 16 * 4);
        assert_eq!(f.intra_similarity + f.inter_similarity, 1692 * 1692 * 16);
        assert!(f.moec_overhead() > 0.0 && f.moec_overhead() < 0.02, "{}", f.moec_overhead());
    }

    #[test]
    fn more_groups_cost_more_and_width_is_monotone() {
        let full = ModelConfig::default();
        let mut last = 0;
        for n in 1..=4 {
            let cfg = ModelConfig {
                encoders: full.encoders[..n].to_vec(),
                ..full.clone()
            };
            let f = flops_estimate(&cfg).unwrap();
            assert!(f.total_moec > last);
            last = f.total_moec;
        }
        let wide = ModelConfig {
            output_dim: 32,
            ..full.clone()
        };
        assert!(flops_estimate(&wide).unwrap().total_moec > last);
    }
}
