//! Training loop, optimizers, early stopping, and decision-threshold
//! search.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{sigmoid, Param};
use super::network::Network;
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// One classifier input: binned step rows for sequence models and the
/// flattened means for shallow ones.
#[derive(Debug, Clone)]
pub struct Sample {
    pub utterance_id: String,
    pub participant_id: String,
    pub positive: bool,
    pub steps: Vec<Vec<f64>>,
    pub flat: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    RmsProp,
    Sgd,
    Asgd,
}

pub const ALL_OPTIMIZERS: [OptimizerKind; 4] = [
    OptimizerKind::Adam,
    OptimizerKind::RmsProp,
    OptimizerKind::Sgd,
    OptimizerKind::Asgd,
];

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<OptimizerKind> {
        match s.to_ascii_lowercase().as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "rmsprop" => Ok(OptimizerKind::RmsProp),
            "sgd" => Ok(OptimizerKind::Sgd),
            "asgd" => Ok(OptimizerKind::Asgd),
            other => Err(Error::Validation(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 25,
            patience: 5,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Adam/RMSprop conventions: beta = (0.9, 0.999), alpha = 0.99, eps = 1e-8.
/// ASGD keeps a running average of the weights from step 0; validation and
/// the returned weights use that average. Weight decay is classic L2 added
/// to the gradient.
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    avg: Vec<Vec<f64>>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const RMSPROP_ALPHA: f64 = 0.99;
const EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weight_decay: f64, params: &[&Param]) -> Optimizer {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Optimizer {
            kind,
            lr,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros.clone(),
            avg: params.iter().map(|p| p.data.clone()).collect(),
        }
    }

    /// Apply one update. `trainable[i] = false` leaves parameter `i`
    /// untouched (used by personalization freezing).
    pub fn step(&mut self, params: &mut [&mut Param], trainable: &[bool]) {
        self.step += 1;
        let t = self.step as f64;
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in p.data.iter_mut().zip(&p.grad) {
                        let g = g + self.weight_decay * *w;
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Asgd => {
                    for ((w, &g), a) in
                        p.data.iter_mut().zip(&p.grad).zip(self.avg[i].iter_mut())
                    {
                        let g = g + self.weight_decay * *w;
                        *w -= self.lr * g;
                        *a += (*w - *a) / t;
                    }
                }
                OptimizerKind::Adam => {
                    let bc1 = 1.0 - ADAM_BETA1.powf(t);
                    let bc2 = 1.0 - ADAM_BETA2.powf(t);
                    for ((w, &g), (m, v)) in p
                        .data
                        .iter_mut()
                        .zip(&p.grad)
                        .zip(self.m[i].iter_mut().zip(self.v[i].iter_mut()))
                    {
                        let g = g + self.weight_decay * *w;
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        *w -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
                    }
                }
                OptimizerKind::RmsProp => {
                    for ((w, &g), v) in
                        p.data.iter_mut().zip(&p.grad).zip(self.v[i].iter_mut())
                    {
                        let g = g + self.weight_decay * *w;
                        *v = RMSPROP_ALPHA * *v + (1.0 - RMSPROP_ALPHA) * g * g;
                        *w -= self.lr * g / (v.sqrt() + EPS);
                    }
                }
            }
        }
    }

    /// Weights to evaluate with: the running average for ASGD, the current
    /// weights otherwise.
    pub fn eval_weights(&self, params: &[&Param]) -> Vec<Vec<f64>> {
        match self.kind {
            OptimizerKind::Asgd => self.avg.clone(),
            _ => params.iter().map(|p| p.data.clone()).collect(),
        }
    }
}

/// Numerically stable binary cross-entropy from the logit.
pub fn bce_with_logit(logit: f64, positive: bool) -> f64 {
    let y = if positive { 1.0 } else { 0.0 };
    logit.max(0.0) - logit * y + (1.0 + (-logit.abs()).exp()).ln()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_validation_loss: Option<f64>,
    pub best_validation_f1: Option<f64>,
    /// Optimizer the bundle was trained with; personalization reuses it.
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

/// Outcome of `train_network`: the fitted network plus metadata.
pub struct TrainedNetwork {
    pub network: Network,
    pub meta: TrainingMeta,
}

fn mean_valid_loss(net: &Network, weights: &[Vec<f64>], valid: &[Sample]) -> Result<f64> {
    let mut probe = net.clone();
    for (p, w) in probe.params_mut().into_iter().zip(weights) {
        p.data.copy_from_slice(w);
    }
    let mut total = 0.0;
    for s in valid {
        total += bce_with_logit(probe.logit(&s.steps)?, s.positive);
    }
    Ok(total / valid.len() as f64)
}

/// Train with mini-batch gradient descent, 25-epoch cap, and early stopping
/// after `patience` epochs without a strict validation-loss improvement.
/// Returns the weights from the best epoch.
///
/// `trainable` masks parameters (canonical order); pass `None` to train
/// everything.
pub fn train_network(
    mut net: Network,
    config: &TrainConfig,
    train: &[Sample],
    valid: &[Sample],
    trainable: Option<Vec<bool>>,
) -> Result<TrainedNetwork> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Validation(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let n_params = net.params().len();
    let trainable = trainable.unwrap_or_else(|| vec![true; n_params]);
    if trainable.len() != n_params {
        return Err(Error::Shape(format!(
            "trainable mask has {} entries for {} parameters",
            trainable.len(),
            n_params
        )));
    }

    let mut optimizer = Optimizer::new(
        config.optimizer,
        config.learning_rate,
        config.weight_decay,
        &net.params(),
    );

    let mut best_loss = f64::INFINITY;
    let mut best_weights: Vec<Vec<f64>> = optimizer.eval_weights(&net.params());
    let mut epochs_without_improvement = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut dropout_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0xd0, epoch as u64]));

        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            net.zero_grads();
            let mut batch_loss = 0.0;
            for &idx in batch {
                let sample = &train[idx];
                let cache = net.forward_train(&sample.steps, &mut dropout_rng)?;
                let score = sigmoid(cache.logit);
                batch_loss += bce_with_logit(cache.logit, sample.positive);
                let dlogit =
                    (score - if sample.positive { 1.0 } else { 0.0 }) / batch.len() as f64;
                net.backward(&cache, dlogit);
            }
            batch_loss /= batch.len() as f64;
            epoch_loss += batch_loss * batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite training loss at epoch {epoch}"
                )));
            }
            let mut params = net.params_mut();
            optimizer.step(&mut params, &trainable);
        }
        epoch_loss /= train.len() as f64;

        let eval_weights = optimizer.eval_weights(&net.params());
        let valid_loss = mean_valid_loss(&net, &eval_weights, valid)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch} (train loss {epoch_loss})"
            )));
        }
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_weights = eval_weights;
            epochs_without_improvement = 0;
        } else {
            epochs_without_improvement += 1;
            if epochs_without_improvement >= config.patience {
                break;
            }
        }
    }

    for (p, w) in net.params_mut().into_iter().zip(&best_weights) {
        p.data.copy_from_slice(w);
    }

    // Validation F1 at the default 0.5 threshold for the metadata record.
    let scores: Vec<f64> = valid
        .iter()
        .map(|s| net.predict(&s.steps))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = valid.iter().map(|s| s.positive).collect();
    let preds: Vec<bool> = scores.iter().map(|&s| s >= 0.5).collect();
    let best_validation_f1 = crate::eval::f1_from_bools(&labels, &preds);

    Ok(TrainedNetwork {
        network: net,
        meta: TrainingMeta {
            seed: config.seed,
            epochs_run,
            best_validation_loss: Some(best_loss),
            best_validation_f1: Some(best_validation_f1),
            optimizer: config.optimizer,
        },
    })
}

/// Decision-threshold grid: 0.00, 0.01, ..., 1.00.
pub fn threshold_grid() -> Vec<f64> {
    (0..=100).map(|k| k as f64 / 100.0).collect()
}

/// Pick the threshold maximizing F1 (positive class = fully rhotic,
/// prediction positive when `score >= threshold`). Ties take the lowest
/// threshold. Implemented as a descending sweep with incremental counts;
/// tests verify it against naive exhaustive evaluation.
pub fn best_threshold(scores: &[f64], positives: &[bool]) -> Result<f64> {
    assert_eq!(scores.len(), positives.len());
    let total_pos = positives.iter().filter(|&&p| p).count();
    if total_pos == 0 || total_pos == positives.len() {
        return Err(Error::Validation(
            "threshold search needs both classes present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());

    let mut best = (f64::NEG_INFINITY, 1.0f64);
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut cursor = 0usize;
    for k in (0..=100).rev() {
        let threshold = k as f64 / 100.0;
        while cursor < order.len() && scores[order[cursor]] >= threshold {
            if positives[order[cursor]] {
                tp += 1;
            } else {
                fp += 1;
            }
            cursor += 1;
        }
        let fn_count = total_pos - tp;
        let f1 = if 2 * tp + fp + fn_count == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_count) as f64
        };
        // >= so later (lower) thresholds win ties.
        if f1 >= best.0 {
            best = (f1, threshold);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::network::{ArchKind, ArchitectureSpec, Network};
    use crate::models::layers::Activation;
    use rand::Rng;

    fn separable_samples(n: usize, seed: u64, shift: f64) -> Vec<Sample> {
        // Two Gaussian-ish blobs along every feature; label by sign.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let positive = i % 2 == 0;
                let center = if positive { 1.0 + shift } else { -1.0 + shift };
                let steps: Vec<Vec<f64>> = (0..10)
                    .map(|_| {
                        (0..6)
                            .map(|_| center + rng.gen_range(-0.3..0.3))
                            .collect()
                    })
                    .collect();
                let flat = steps.iter().flatten().cloned().collect();
                Sample {
                    utterance_id: format!("u{i}"),
                    participant_id: format!("p{}", i % 4),
                    positive,
                    steps,
                    flat,
                }
            })
            .collect()
    }

    fn small_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            kind: ArchKind::Grnn,
            recurrent_layers: 1,
            recurrent_width: 16,
            conv_layers: 0,
            conv_channels: 0,
            conv_kernel: 3,
            linear_layers: 1,
            linear_width: 8,
            activation: Activation::ReLU,
            dropout: 0.2,
        }
    }

    #[test]
    fn trains_to_separation_on_separable_data() {
        let train = separable_samples(60, 1, 0.0);
        let valid = separable_samples(20, 2, 0.0);
        let net = Network::build(&small_spec(), 10, 6, 5).unwrap();
        let config = TrainConfig {
            learning_rate: 5e-3,
            seed: 5,
            ..TrainConfig::default()
        };
        let trained = train_network(net, &config, &train, &valid, None).unwrap();
        // Training F1 must reach 1.0 within the 25-epoch budget.
        let preds: Vec<bool> = train
            .iter()
            .map(|s| trained.network.predict(&s.steps).unwrap() >= 0.5)
            .collect();
        let labels: Vec<bool> = train.iter().map(|s| s.positive).collect();
        assert_eq!(crate::eval::f1_from_bools(&labels, &preds), 1.0);
        assert!(trained.meta.epochs_run <= 25);
    }

    #[test]
    fn same_seed_same_weights() {
        let train = separable_samples(30, 3, 0.0);
        let valid = separable_samples(10, 4, 0.0);
        let config = TrainConfig {
            seed: 9,
            ..TrainConfig::default()
        };
        let a = train_network(
            Network::build(&small_spec(), 10, 6, 9).unwrap(),
            &config,
            &train,
            &valid,
            None,
        )
        .unwrap();
        let b = train_network(
            Network::build(&small_spec(), 10, 6, 9).unwrap(),
            &config,
            &train,
            &valid,
            None,
        )
        .unwrap();
        for (pa, pb) in a.network.params().iter().zip(b.network.params().iter()) {
            assert_eq!(pa.data, pb.data, "{}", pa.name);
        }
    }

    #[test]
    fn early_stop_returns_best_epoch_weights() {
        let train = separable_samples(40, 5, 0.0);
        let valid = separable_samples(12, 6, 0.0);
        let config = TrainConfig {
            learning_rate: 5e-3,
            seed: 11,
            ..TrainConfig::default()
        };
        let trained = train_network(
            Network::build(&small_spec(), 10, 6, 11).unwrap(),
            &config,
            &train,
            &valid,
            None,
        )
        .unwrap();
        // The stored best loss must equal the loss of the returned weights.
        let mut total = 0.0;
        for s in &valid {
            total += bce_with_logit(trained.network.logit(&s.steps).unwrap(), s.positive);
        }
        let recomputed = total / valid.len() as f64;
        assert!(
            (recomputed - trained.meta.best_validation_loss.unwrap()).abs() < 1e-6,
            "{recomputed} vs {:?}",
            trained.meta.best_validation_loss
        );
    }

    #[test]
    fn frozen_mask_keeps_parameters_bit_identical() {
        let train = separable_samples(30, 7, 0.0);
        let valid = separable_samples(10, 8, 0.0);
        let net = Network::build(&small_spec(), 10, 6, 13).unwrap();
        let before: Vec<Vec<f64>> = net.params().iter().map(|p| p.data.clone()).collect();
        let n = net.params().len();
        // Freeze everything except the last 4 entries (last two layers:
        // linear0 w+b live before out.w/out.b -> freeze all but out layer
        // and hidden layer = 4 params).
        let mut mask = vec![false; n];
        for m in mask.iter_mut().rev().take(4) {
            *m = true;
        }
        let config = TrainConfig {
            seed: 3,
            ..TrainConfig::default()
        };
        let trained = train_network(net, &config, &train, &valid, Some(mask.clone())).unwrap();
        for ((p, was), m) in trained.network.params().iter().zip(&before).zip(&mask) {
            if !*m {
                assert_eq!(&p.data, was, "frozen {} moved", p.name);
            }
        }
    }

    #[test]
    fn threshold_matches_spec_examples() {
        // Fully separable set: lowest maximizer on the grid is 0.21.
        let t = best_threshold(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap();
        assert!((t - 0.21).abs() < 1e-12);
        // All scores equal: everything-positive maximizes F1, so 0.00.
        let t = best_threshold(&[0.5, 0.5, 0.5, 0.5], &[false, true, true, false]).unwrap();
        assert_eq!(t, 0.0);
        // Single-class sets are rejected.
        assert!(best_threshold(&[0.2, 0.8], &[true, true]).is_err());
    }

    #[test]
    fn threshold_equals_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(4..60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut positives: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            if positives.iter().all(|&p| p) {
                positives[0] = false;
            }
            if positives.iter().all(|&p| !p) {
                positives[0] = true;
            }
            let fast = best_threshold(&scores, &positives).unwrap();
            // Independent oracle: naive confusion recount per grid point.
            let mut best = (f64::NEG_INFINITY, 1.0);
            for k in 0..=100 {
                let t = k as f64 / 100.0;
                let (mut tp, mut fp, mut fn_c) = (0, 0, 0);
                for (s, &p) in scores.iter().zip(&positives) {
                    let pred = *s >= t;
                    match (p, pred) {
                        (true, true) => tp += 1,
                        (false, true) => fp += 1,
                        (true, false) => fn_c += 1,
                        _ => {}
                    }
                }
                let f1 = if 2 * tp + fp + fn_c == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / (2 * tp + fp + fn_c) as f64
                };
                if f1 > best.0 || (f1 == best.0 && t < best.1) {
                    best = (f1, t);
                }
            }
            assert_eq!(fast, best.1);
        }
    }

    #[test]
    fn asgd_averages_from_step_zero() {
        let mut p = Param::new("w", 1, 1);
        p.data[0] = 1.0;
        let params_ref = [&p];
        let mut opt = Optimizer::new(OptimizerKind::Asgd, 0.1, 0.0, &params_ref);
        // Two steps with constant gradient 1.0: w goes 1.0 -> 0.9 -> 0.8;
        // averages: after step 1 avg = 0.9; after step 2 avg = 0.85.
        p.grad[0] = 1.0;
        let mut params = [&mut p];
        opt.step(&mut params, &[true]);
        opt.step(&mut params, &[true]);
        let avg = opt.eval_weights(&[&p])[0][0];
        assert!((avg - 0.85).abs() < 1e-12, "{avg}");
    }
}
