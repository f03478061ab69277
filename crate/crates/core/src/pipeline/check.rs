use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{finite_diff_grad, relative_error, Matrix, FD_STEP};

use super::data::{Sample, SyntheticTask};
use super::forward::Graph;
use super::model::{Model, ModelConfig};

/// Denominator floor of the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockError {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockError>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Analytic gradients of the total loss against central differences on a
/// two-sample batch of the config's own task.
pub fn gradient_check(cfg: &ModelConfig, tolerance: f64) -> Result<GradCheckReport> {
    let model = Model::init(cfg)?;
    let batch = SyntheticTask::new(cfg)?.batch(0, 2)?;
    check_gradients(&model, cfg, &batch, tolerance, |_, _| {})
}

/// Like [`gradient_check`] on explicit inputs. `tamper` may edit each
/// analytic gradient block before comparison.
pub fn check_gradients(
    model: &Model,
    cfg: &ModelConfig,
    batch: &[Sample],
    tolerance: f64,
    mut tamper: impl FnMut(&str, &mut Matrix),
) -> Result<GradCheckReport> {
    let graph = Graph::build(model, cfg, batch)?;
    let mut grads = graph.gradients()?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    let mut blocks = Vec::with_capacity(names.len());
    for (i, name) in names.iter().enumerate() {
        tamper(name, &mut grads[i]);
        let x0 = model.named_params()[i].1.data().to_vec();
        let mut probe = model.clone();
        let mut failure = None;
        let numeric = finite_diff_grad(
            |x| {
                probe.params_mut()[i].data_mut().copy_from_slice(x);
                match Graph::build(&probe, cfg, batch) {
                    Ok(g) => g.report().total,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            &x0,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let max_rel_error = grads[i]
            .data()
            .iter()
            .zip(&numeric)
            .map(|(&a, &n)| relative_error(a, n, REL_ERROR_FLOOR))
            .fold(0.0, f64::max);
        blocks.push(BlockError {
            name: name.clone(),
            entries: x0.len(),
            max_rel_error,
        });
    }
    Ok(GradCheckReport { tolerance, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::model::{ConnectorKind, FusionKind};

    #[test]
    fn tiny_default_passes() {
        let r = gradient_check(&ModelConfig::tiny(), 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.blocks.iter().any(|b| b.name == "siglip.router.weight"));
        assert!(r.blocks.iter().any(|b| b.name == "clip.expert3.fc2.bias"));
    }

    #[test]
    fn linear_head_over_dense_connectors_is_near_exact() {
        // the head enters the loss through softmax cross-entropy of a linear
        // map only, so its blocks are near-quadratic
        let cfg = ModelConfig {
            num_experts: 1,
            top_k: 1,
            connector: ConnectorKind::Mlp,
            fusion: FusionKind::AppendOnly,
            ..ModelConfig::tiny()
        };
        let r = gradient_check(&cfg, 1e-4).unwrap();
        assert!(r.passed(), "{r:?}");
        for b in r.blocks.iter().filter(|b| b.name.starts_with("head.")) {
            assert!(b.max_rel_error < 1e-6, "{b:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let cfg = ModelConfig::tiny();
        let model = Model::init(&cfg).unwrap();
        let batch = SyntheticTask::new(&cfg).unwrap().batch(0, 2).unwrap();
        let r = check_gradients(&model, &cfg, &batch, 1e-4, |name, g| {
            if name == "dinov2.router.weight" {
                *g = g.scale(-1.0);
            }
        })
        .unwrap();
        assert!(!r.passed());
        let bad: Vec<&str> = r.blocks.iter().filter(|b| b.max_rel_error >= 1e-4).map(|b| b.name.as_str()).collect();
        assert_eq!(bad, vec!["dinov2.router.weight"]);
    }
}
