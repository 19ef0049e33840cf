//! Named experiment presets with the reference hyperparameters (scaled to
//! desk size where the full-scale run is out of reach).

use crate::data::{DataMode, QueryMode};
use crate::error::{Error, Result};
use crate::flow::{SgdVsFlowConfig, StepControl};
use crate::matrix::MaskMode;
use crate::pseudo::PseudoIndex;
use crate::reference::StdTrainConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone)]
pub enum Preset {
    Train(TrainConfig),
    SgdVsFlow(SgdVsFlowConfig),
    StdTrain(StdTrainConfig),
}

pub const PRESET_NAMES: [&str; 5] = [
    "fig3-weights",
    "fig4-dynamics",
    "fig5-ablation",
    "fig6-scaling",
    "fig2-interpret",
];

pub fn preset(name: &str) -> Result<Preset> {
    match name {
        // End-of-training weight structure: D=16, lambda=1, B=512.
        "fig3-weights" => Ok(Preset::Train(TrainConfig {
            n_pairs: 8,
            dim: 16,
            batch: 512,
            learning_rate: 1.0,
            steps: 800,
            seed: 1,
            mask_mode: MaskMode::CausalInclusiveSelf,
            data: DataMode::Gaussian {
                query: QueryMode::Uniform,
                scale: 1.0,
            },
            ablation: None,
            log_every: 10,
        })),
        // Pseudo-parameter dynamics: D=32, N=16, lambda=1, B=256.
        "fig4-dynamics" => Ok(Preset::Train(TrainConfig {
            n_pairs: 16,
            dim: 32,
            batch: 256,
            learning_rate: 1.0,
            steps: 1000,
            seed: 1,
            mask_mode: MaskMode::CausalInclusiveSelf,
            data: DataMode::Gaussian {
                query: QueryMode::Uniform,
                scale: 1.0,
            },
            ablation: None,
            log_every: 10,
        })),
        // Same run constrained to the three induction-head coefficients.
        "fig5-ablation" => {
            let Preset::Train(mut cfg) = preset("fig4-dynamics")? else {
                unreachable!()
            };
            cfg.ablation = Some(PseudoIndex::induction_head());
            Ok(Preset::Train(cfg))
        }
        // SGD emergence times on orthonormal data: D=256, B=64, lambda=100,
        // q=N, threshold 0.1.
        "fig6-scaling" => Ok(Preset::SgdVsFlow(SgdVsFlowConfig {
            n_pairs: 8,
            dim: 256,
            batch: 64,
            learning_rate: 100.0,
            threshold: 0.1,
            seed: 1,
            max_steps: 2_000_000,
            step_control: StepControl::default_for(8),
        })),
        // Reference transformer at desk scale: 300 steps of 512 sequences.
        "fig2-interpret" => Ok(Preset::StdTrain(StdTrainConfig::desk_scale(1))),
        other => Err(Error::Invalid(format!(
            "unknown preset '{other}' (available: {})",
            PRESET_NAMES.join(", ")
        ))),
    }
}
