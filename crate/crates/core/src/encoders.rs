//! Synthetic stand-ins for the four vision encoders.
//!
//! Every stream is an affine image of a per-sample planted factor: token `i`
//! of every group is driven by the same latent row `i`, so matched tokens are
//! genuinely similar across groups. Each group has its own offset, scale and
//! projection, and leans on one latent direction more than the others.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed::{mix, rng_for, rng_for_index};

/// Identity of an encoder group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupKind {
    Siglip,
    Dinov2,
    Convnext,
    Clip,
}

impl GroupKind {
    /// Order in which groups are appended into the fused sequence.
    pub const APPEND_ORDER: [GroupKind; 4] = [GroupKind::Siglip, GroupKind::Dinov2, GroupKind::Convnext, GroupKind::Clip];

    pub fn name(self) -> &'static str {
        match self {
            GroupKind::Siglip => "siglip",
            GroupKind::Dinov2 => "dinov2",
            GroupKind::Convnext => "convnext",
            GroupKind::Clip => "clip",
        }
    }

    /// Position in [`Self::APPEND_ORDER`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Rank of this group when it is a candidate for cross-group selection:
    /// candidates are laid out convnext, clip, dinov2, siglip.
    pub fn inter_rank(self) -> usize {
        match self {
            GroupKind::Convnext => 0,
            GroupKind::Clip => 1,
            GroupKind::Dinov2 => 2,
            GroupKind::Siglip => 3,
        }
    }

    /// Default token count; cumulative sums over siglip, +convnext, +clip,
    /// +dinov2 give 440, 540, 1116, 1692.
    pub fn default_tokens(self) -> usize {
        match self {
            GroupKind::Siglip => 440,
            GroupKind::Dinov2 => 576,
            GroupKind::Convnext => 100,
            GroupKind::Clip => 576,
        }
    }
}

impl fmt::Display for GroupKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GroupKind::APPEND_ORDER
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::config("group", format!("unknown encoder group `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub group: GroupKind,
    pub token_count: usize,
    pub channel_dim: usize,
    pub needs_channel_pooling: bool,
    pub seed: u64,
}

impl EncoderSpec {
    /// Desk-scale defaults: 16 channels, except convnext which emits 64 and
    /// is pooled down.
    pub fn default_for(group: GroupKind) -> Self {
        let pooled = group == GroupKind::Convnext;
        Self {
            group,
            token_count: group.default_tokens(),
            channel_dim: if pooled { 64 } else { 16 },
            needs_channel_pooling: pooled,
            seed: group.index() as u64 + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let key = |k: &str| format!("encoders.{}.{k}", self.group);
        if self.token_count == 0 {
            return Err(Error::config(key("tokens"), "token count must be at least 1"));
        }
        if self.channel_dim == 0 {
            return Err(Error::config(key("channels"), "channel dim must be at least 1"));
        }
        Ok(())
    }
}

/// One encoder group's output.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStream {
    pub spec: EncoderSpec,
    pub features: Matrix,
}

impl FeatureStream {
    pub fn new(spec: EncoderSpec, features: Matrix) -> Result<Self> {
        if features.shape() != (spec.token_count, spec.channel_dim) {
            return Err(Error::shape("FeatureStream", (spec.token_count, spec.channel_dim), features.shape()));
        }
        Ok(Self { spec, features })
    }
}

/// Per-sample latent shared by every group.
#[derive(Clone, Debug, PartialEq)]
pub struct PlantedFactor {
    /// Sample-level latent, `1 x rank`.
    pub mean: Matrix,
    /// Token-level latents, `tokens x rank`: `mean` plus per-token spread.
    pub tokens: Matrix,
}

impl PlantedFactor {
    pub fn draw(seed: u64, index: u64, tokens: usize, rank: usize, spread: f64) -> Self {
        let mut rng = rng_for_index(seed, "planted-factor", index);
        let mean = Matrix::from_fn(1, rank, |_, _| StandardNormal.sample(&mut rng));
        let tokens = Matrix::from_fn(tokens, rank, |_, c| {
            let n: f64 = StandardNormal.sample(&mut rng);
            mean.get(0, c) + spread * n
        });
        Self { mean, tokens }
    }

    pub fn rank(&self) -> usize {
        self.mean.cols()
    }
}

/// Fixed per-group statistics: channel offset, scale and latent projection.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupStats {
    pub offset: Matrix,
    pub scale: f64,
    pub projection: Matrix,
}

impl GroupStats {
    /// `basis` is a `rank x d` matrix shared by all groups; channel `c` of a
    /// `C`-channel group reads basis column `c d / C`, so block pooling down
    /// to `d` channels lines the groups up. On top of the shared part each
    /// group adds its own random component. `leak` is the weight given to
    /// latent directions other than the group's own; `1.0` makes every group
    /// see every direction equally.
    pub fn for_spec(spec: &EncoderSpec, basis: &Matrix, leak: f64) -> Self {
        let mut rng = rng_for(spec.seed, &format!("group-stats.{}", spec.group));
        let c = spec.channel_dim;
        let (rank, d) = basis.shape();
        let offset = Matrix::from_fn(1, c, |_, _| 0.5 * Distribution::<f64>::sample(&StandardNormal, &mut rng));
        let scale = rng.random_range(0.5..2.0);
        let own = spec.group.index() % rank.max(1);
        let norm = 1.0 / (rank as f64).sqrt();
        let projection = Matrix::from_fn(rank, c, |k, ch| {
            let w = if k == own { 1.0 } else { leak };
            let private: f64 = StandardNormal.sample(&mut rng);
            w * norm * (basis.get(k, ch * d / c) + GROUP_PRIVATE * private)
        });
        Self { offset, scale, projection }
    }
}

/// Weight of the group-specific part of a projection relative to the shared
/// basis.
pub const GROUP_PRIVATE: f64 = 0.5;

/// Latent-to-channel basis shared by all groups of one task.
pub fn shared_basis(seed: u64, rank: usize, dim: usize) -> Matrix {
    let mut rng = rng_for(seed, "shared-basis");
    Matrix::from_fn(rank, dim, |_, _| StandardNormal.sample(&mut rng))
}

/// `features[i] = offset + scale * (factor.tokens[i] . projection) + noise * eps`.
pub fn generate_stream(
    spec: &EncoderSpec,
    stats: &GroupStats,
    factor: &PlantedFactor,
    noise: f64,
    seed: u64,
) -> Result<FeatureStream> {
    spec.validate()?;
    if factor.tokens.rows() < spec.token_count {
        return Err(Error::Param {
            op: "generate_stream",
            msg: format!("factor has {} token rows, {} needed", factor.tokens.rows(), spec.token_count),
        });
    }
    if stats.projection.shape() != (factor.rank(), spec.channel_dim) {
        return Err(Error::shape("generate_stream", stats.projection.shape(), (factor.rank(), spec.channel_dim)));
    }
    let latent = factor.tokens.slice_rows(0, spec.token_count)?;
    let signal = latent.matmul(&stats.projection)?.scale(stats.scale);
    let mut rng = rng_for_index(mix(seed, spec.seed), &format!("stream.{}", spec.group), 0);
    let mut features = signal.add_row(&stats.offset)?;
    for v in features.data_mut() {
        let n: f64 = StandardNormal.sample(&mut rng);
        *v += noise * n;
    }
    FeatureStream::new(spec.clone(), features)
}

/// Non-overlapping mean pooling along channels: output channel `j` averages
/// input channels `[j r, (j + 1) r)` with `r = channel_dim / target_dim`.
pub fn standardize_channels(stream: &FeatureStream, target_dim: usize) -> Result<FeatureStream> {
    let c = stream.spec.channel_dim;
    if target_dim == 0 || c < target_dim || c % target_dim != 0 {
        return Err(Error::config(
            format!("encoders.{}.channels", stream.spec.group),
            format!("{c} channels cannot be pooled to {target_dim} without interpolation"),
        ));
    }
    let r = c / target_dim;
    let inv = 1.0 / r as f64;
    let f = &stream.features;
    let pooled = Matrix::from_fn(f.rows(), target_dim, |t, j| f.row(t)[j * r..(j + 1) * r].iter().sum::<f64>() * inv);
    let mut spec = stream.spec.clone();
    spec.channel_dim = target_dim;
    spec.needs_channel_pooling = false;
    FeatureStream::new(spec, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::COSINE_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(group: GroupKind, tokens: usize, channels: usize) -> EncoderSpec {
        EncoderSpec {
            group,
            token_count: tokens,
            channel_dim: channels,
            needs_channel_pooling: false,
            seed: 11,
        }
    }

    fn stream_for(spec: &EncoderSpec, factor: &PlantedFactor, seed: u64) -> FeatureStream {
        let stats = GroupStats::for_spec(spec, &shared_basis(5, factor.rank(), 16), 0.3);
        generate_stream(spec, &stats, factor, 0.1, seed).unwrap()
    }

    #[test]
    fn generation_is_deterministic() {
        let s = spec(GroupKind::Siglip, 440, 16);
        let f = PlantedFactor::draw(7, 0, 440, 4, 1.0);
        let a = stream_for(&s, &f, 7);
        let b = stream_for(&s, &PlantedFactor::draw(7, 0, 440, 4, 1.0), 7);
        assert_eq!(a, b);
        assert_eq!(a.features.shape(), (440, 16));
        assert!(a.features.is_finite());
        assert_ne!(a, stream_for(&s, &f, 8));
    }

    #[test]
    fn matched_tokens_are_more_similar_than_unmatched() {
        let f = PlantedFactor::draw(3, 0, 64, 4, 1.0);
        let a = stream_for(&EncoderSpec { seed: 1, ..spec(GroupKind::Siglip, 64, 16) }, &f, 3);
        let b = stream_for(&EncoderSpec { seed: 2, ..spec(GroupKind::Dinov2, 64, 16) }, &f, 3);
        // cosine on centred features so the per-group offsets do not dominate
        let centre = |m: &Matrix| {
            let mu = m.mean_rows().scale(-1.0);
            m.add_row(&mu).unwrap()
        };
        let (a, b) = (centre(&a.features), centre(&b.features));
        let mut matched = 0.0;
        let mut unmatched = 0.0;
        let mut n_un = 0;
        for i in 0..64 {
            for j in 0..64 {
                let (x, y) = (a.row(i), b.row(j));
                let d: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
                let s = d / (nx * ny).max(COSINE_EPS);
                if i == j {
                    matched += s;
                } else {
                    unmatched += s;
                    n_un += 1;
                }
            }
        }
        let (matched, unmatched) = (matched / 64.0, unmatched / n_un as f64);
        assert!(matched > unmatched + 0.05, "matched {matched} unmatched {unmatched}");
    }

    #[test]
    fn pooling_examples() {
        let s = FeatureStream::new(spec(GroupKind::Convnext, 1, 4), Matrix::from_rows(&[[2.0, 4.0, 6.0, 8.0]])).unwrap();
        let p = standardize_channels(&s, 2).unwrap();
        assert_eq!(p.features, Matrix::from_rows(&[[3.0, 7.0]]));
        assert_eq!(p.spec.channel_dim, 2);
        assert_eq!(standardize_channels(&s, 4).unwrap().features, s.features);
        assert!(matches!(standardize_channels(&s, 3), Err(Error::Config { .. })));
        assert!(standardize_channels(&s, 8).is_err());
    }

    #[test]
    fn pooling_matches_block_mean_loop_and_preserves_token_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = Matrix::from_fn(10, 32, |_, _| rng.random_range(-3.0..3.0));
        let s = FeatureStream::new(spec(GroupKind::Convnext, 10, 32), m.clone()).unwrap();
        let p = standardize_channels(&s, 8).unwrap();
        for t in 0..10 {
            for j in 0..8 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += m.get(t, j * 4 + k);
                }
                assert!((p.features.get(t, j) - acc / 4.0).abs() < 1e-12);
            }
            let before: f64 = m.row(t).iter().sum::<f64>() / 32.0;
            let after: f64 = p.features.row(t).iter().sum::<f64>() / 8.0;
            assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn default_token_totals() {
        let cumulative: Vec<usize> = [GroupKind::Siglip, GroupKind::Convnext, GroupKind::Clip, GroupKind::Dinov2]
            .iter()
            .scan(0, |acc, g| {
                *acc += g.default_tokens();
                Some(*acc)
            })
            .collect();
        assert_eq!(cumulative, vec![440, 540, 1116, 1692]);
    }

    #[test]
    fn spec_validation_and_names() {
        assert!(spec(GroupKind::Clip, 0, 4).validate().is_err());
        assert!(spec(GroupKind::Clip, 4, 0).validate().is_err());
        assert_eq!("dinov2".parse::<GroupKind>().unwrap(), GroupKind::Dinov2);
        assert!("vit".parse::<GroupKind>().is_err());
        let f = PlantedFactor::draw(1, 0, 2, 4, 1.0);
        let s = spec(GroupKind::Clip, 3, 4);
        let stats = GroupStats::for_spec(&s, &shared_basis(5, 4, 16), 0.3);
        assert!(generate_stream(&s, &stats, &f, 0.1, 1).is_err());
    }
}
