//! Per-architecture training recipes: the preprocessing, optimizer settings
//! and model hyperparameters each architecture is trained with by default.
//!
//! Everything starts from the common setting (Adam, lr 0.01, decoupled
//! weight decay 5e-4, 300 epochs, patience 50, stored features, 32 hidden
//! units, grid 32). Deviations are listed in [`Recipe::for_arch`].

use serde::{Deserialize, Serialize};

use crate::amalgam::DistillConfig;
use crate::datasets::{FeatureTransform, Preprocess};
use crate::models::{Arch, ModelSpec};
use crate::trainer::{DecayMode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub preprocess: Preprocess,
    pub train: TrainConfig,
    /// Seed is overwritten per run.
    pub model: ModelSpec,
}

impl Recipe {
    /// The common setting, with no per-architecture adjustment.
    pub fn baseline(arch: Arch) -> Recipe {
        Recipe { preprocess: Preprocess::default(), train: TrainConfig::default(), model: ModelSpec::new(arch) }
    }

    pub fn for_arch(arch: Arch) -> Recipe {
        let mut r = Recipe::baseline(arch);
        match arch {
            // Coupled L2 at 5e-3 for every KAN teacher and SGC; the spline
            // coefficients overfit 20 labels per class without it. Plain
            // GCN/GAT/APPNP underfit at that strength and use it at 5e-4.
            Arch::Gcn | Arch::Gat | Arch::Appnp => r.train.decay_mode = DecayMode::L2,
            Arch::Kappnp | Arch::Ksgc => r.train = strong_l2(r.train),
            Arch::Kgcn1 => {
                r.train = strong_l2(r.train);
                r.model.dropout = 0.7;
            }
            Arch::Kgat2 => {
                r.train = strong_l2(r.train);
                r.train.weight_decay = 2e-3;
            }
            Arch::Kgcn2 | Arch::Kgat1 => {
                r.preprocess.features = FeatureTransform::Binary;
                r.train = strong_l2(r.train);
            }
            Arch::Sgc => {
                r.preprocess.features = FeatureTransform::Binary;
                r.train = strong_l2(r.train);
                r.train.lr = 0.2;
            }
            // The distilled student fits soft targets on every node, which
            // regularizes it already; dropout on top costs about 3 points.
            Arch::Kan => {
                r.train.decay_mode = DecayMode::L2;
                r.model.dropout = 0.0;
            }
            _ => {}
        }
        r
    }

    pub fn spec(&self, seed: u64) -> ModelSpec {
        self.model.clone().with_seed(seed)
    }
}

fn strong_l2(t: TrainConfig) -> TrainConfig {
    TrainConfig { decay_mode: DecayMode::L2, weight_decay: 5e-3, ..t }
}

/// Distillation weights tried per teacher pair; the one with the best mean
/// validation accuracy is kept.
pub const LAMBDA_GRID: [f64; 3] = [0.3, 0.5, 0.7];

pub fn distill_config(lambda: f64) -> DistillConfig {
    DistillConfig { lambda, ..DistillConfig::default() }
}
