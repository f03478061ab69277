use rand_distr::{Distribution, StandardNormal};

use crate::encoders::{generate_stream, shared_basis, standardize_channels, FeatureStream, GroupStats, PlantedFactor};
use crate::error::Result;
use crate::numerics::Matrix;
use crate::seed::{mix, rng_for};

use super::model::ModelConfig;

/// One training example: standardised streams in append order and a class.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub streams: Vec<FeatureStream>,
    pub label: usize,
}

/// Deterministic planted-factor classification task.
///
/// Every sample draws a latent mean `mu` and per-token latents around it;
/// the label is `argmax(mu A)` for a fixed `rank x classes` matrix `A`.
/// Groups lean on different latent directions, so seeing more groups
/// recovers `mu` more accurately.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    cfg: ModelConfig,
    stats: Vec<GroupStats>,
    class_map: Matrix,
    max_tokens: usize,
}

impl SyntheticTask {
    /// Depends only on the seed, the task settings and the encoder specs of
    /// the active groups. A group's streams are the same whichever other
    /// groups are active.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.task;
        let basis = shared_basis(cfg.seed, t.latent_rank, cfg.input_dim);
        let stats = cfg
            .encoders
            .iter()
            .map(|e| GroupStats::for_spec(e, &basis, t.leak))
            .collect();
        let mut rng = rng_for(cfg.seed, "task.class-map");
        let class_map = Matrix::from_fn(t.latent_rank, t.num_classes, |_, _| StandardNormal.sample(&mut rng));
        let max_tokens = cfg.encoders.iter().map(|e| e.token_count).max().unwrap_or(0);
        Ok(Self {
            cfg: cfg.clone(),
            stats,
            class_map,
            max_tokens,
        })
    }

    pub fn label_of(&self, mean: &Matrix) -> Result<usize> {
        let scores = mean.matmul(&self.class_map)?;
        Ok(crate::numerics::topk_indices(scores.row(0), 1)[0])
    }

    pub fn sample(&self, index: u64) -> Result<Sample> {
        let t = &self.cfg.task;
        let factor = PlantedFactor::draw(self.cfg.seed, index, self.max_tokens, t.latent_rank, t.token_spread);
        let label = self.label_of(&factor.mean)?;
        let noise_seed = mix(self.cfg.seed, index);
        let streams = self
            .cfg
            .encoders
            .iter()
            .zip(&self.stats)
            .map(|(spec, stats)| {
                let raw = generate_stream(spec, stats, &factor, t.noise, noise_seed)?;
                if spec.needs_channel_pooling {
                    standardize_channels(&raw, self.cfg.input_dim)
                } else {
                    Ok(raw)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Sample { streams, label })
    }

    /// Samples `start .. start + n`.
    pub fn batch(&self, start: u64, n: usize) -> Result<Vec<Sample>> {
        (start..start + n as u64).map(|i| self.sample(i)).collect()
    }
}
