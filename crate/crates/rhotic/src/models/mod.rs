//! Classifier zoo: gated-recurrent, convolutional, and combined networks
//! built from first principles with hand-checked gradients, plus random
//! forest and SGD linear baselines, a 25-epoch early-stopping training
//! loop, and decision-threshold search.

pub mod bundle;
pub mod forest;
pub mod layers;
pub mod network;
pub mod sgd;
pub mod train;

pub use bundle::{load_bundle, save_bundle, ModelBundle, ModelKind};
pub use forest::{extend_forest, train_random_forest, ForestParams, RandomForest};
pub use layers::{Activation, ALL_ACTIVATIONS};
pub use network::{ArchKind, ArchitectureSpec, Network};
pub use sgd::{train_sgd_linear, SgdLinear, SgdParams};
pub use train::{
    best_threshold, threshold_grid, train_network, OptimizerKind, Sample, TrainConfig,
    TrainedNetwork, TrainingMeta, ALL_OPTIMIZERS,
};

use crate::error::Result;
use crate::features::FeatureRecord;

/// Build classifier samples from feature records.
pub fn samples_from_records(records: &[FeatureRecord]) -> Vec<Sample> {
    records
        .iter()
        .map(|r| Sample {
            utterance_id: r.utterance_id.clone(),
            participant_id: r.participant_id.clone(),
            positive: r.label == crate::corpus::Label::FullyRhotic,
            steps: r.tensor().step_features(),
            flat: r.flattened_means.clone(),
        })
        .collect()
}

/// Tune a bundle's decision threshold on a validation set: grid over
/// 0.00..=1.00 in 0.01 steps maximizing F1 with fully-rhotic positive.
pub fn tune_threshold(bundle: &ModelBundle, valid: &[Sample]) -> Result<f64> {
    let scores: Vec<f64> = valid
        .iter()
        .map(|s| bundle.score(s))
        .collect::<Result<_>>()?;
    let positives: Vec<bool> = valid.iter().map(|s| s.positive).collect();
    best_threshold(&scores, &positives)
}
