//! Hyperparameter random search and per-participant personalization.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::f1_from_bools;
use crate::models::{
    extend_forest, train_network, tune_threshold, Activation, ArchKind, ArchitectureSpec,
    ForestParams, ModelBundle, ModelKind, Network, OptimizerKind, Sample, SgdParams, TrainConfig,
    ALL_ACTIVATIONS, ALL_OPTIMIZERS,
};
use crate::util::derive_seed;

/// Sampling ranges for the random search. The default mirrors the tuning
/// constraints: dropout 0.2-0.5, learning rate and weight decay log-uniform
/// over 1e-5..1e-1, one to four layers, 16-1024 recurrent/conv units,
/// 8-1024 linear units, the nine activations, and four optimizers.
#[derive(Debug, Clone)]
pub struct SearchSpace {
    pub dropout: (f64, f64),
    pub learning_rate: (f64, f64),
    pub weight_decay: (f64, f64),
    pub activations: Vec<Activation>,
    pub optimizers: Vec<OptimizerKind>,
    pub layer_count: (usize, usize),
    pub recurrent_width: (usize, usize),
    pub conv_width: (usize, usize),
    pub linear_width: (usize, usize),
    pub batch_size: usize,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            dropout: (0.2, 0.5),
            learning_rate: (1e-5, 1e-1),
            weight_decay: (1e-5, 1e-1),
            activations: ALL_ACTIVATIONS.to_vec(),
            optimizers: ALL_OPTIMIZERS.to_vec(),
            layer_count: (1, 4),
            recurrent_width: (16, 1024),
            conv_width: (16, 1024),
            linear_width: (8, 1024),
            batch_size: 64,
        }
    }
}

/// One random-search trial.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub spec: ArchitectureSpec,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    /// Mean participant-specific validation F1 at the tuned threshold.
    pub mean_valid_f1: f64,
    pub threshold: f64,
}

fn log_uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    (rng.gen_range(lo.ln()..=hi.ln())).exp()
}

/// Draw one hyperparameter point for the given architecture family.
pub fn sample_trial(
    kind: ArchKind,
    space: &SearchSpace,
    rng: &mut ChaCha8Rng,
) -> (ArchitectureSpec, TrainConfig) {
    let spec = ArchitectureSpec {
        kind,
        recurrent_layers: rng.gen_range(space.layer_count.0..=space.layer_count.1),
        recurrent_width: rng.gen_range(space.recurrent_width.0..=space.recurrent_width.1),
        conv_layers: rng.gen_range(space.layer_count.0..=space.layer_count.1),
        conv_channels: rng.gen_range(space.conv_width.0..=space.conv_width.1),
        conv_kernel: 3,
        linear_layers: rng.gen_range(space.layer_count.0..=space.layer_count.1),
        linear_width: rng.gen_range(space.linear_width.0..=space.linear_width.1),
        activation: *space.activations.choose(rng).expect("non-empty activations"),
        dropout: rng.gen_range(space.dropout.0..=space.dropout.1),
    };
    let config = TrainConfig {
        learning_rate: log_uniform(rng, space.learning_rate),
        weight_decay: log_uniform(rng, space.weight_decay),
        optimizer: *space.optimizers.choose(rng).expect("non-empty optimizers"),
        batch_size: space.batch_size,
        ..TrainConfig::default()
    };
    (spec, config)
}

/// Mean of per-participant F1 scores at the bundle's decision threshold.
pub fn mean_participant_f1(bundle: &ModelBundle, samples: &[Sample]) -> Result<f64> {
    let mut by_participant: BTreeMap<&str, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    for s in samples {
        let entry = by_participant
            .entry(s.participant_id.as_str())
            .or_default();
        entry.0.push(s.positive);
        entry.1.push(bundle.score(s)? >= bundle.decision_threshold);
    }
    let f1s: Vec<f64> = by_participant
        .values()
        .map(|(labels, preds)| f1_from_bools(labels, preds))
        .collect();
    Ok(crate::util::mean(&f1s))
}

/// Outcome of `random_search`.
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub best_bundle: ModelBundle,
    pub trials: Vec<TrialRecord>,
}

/// Seeded random search: each trial samples hyperparameters, trains,
/// tunes the decision threshold on validation, and scores the mean
/// participant-specific validation F1. The winner is the argmax; ties go
/// to the earlier trial. Trials that fail to train (divergence) are logged
/// with F1 = -1 and skipped.
pub fn random_search(
    kind: ArchKind,
    space: &SearchSpace,
    n_trials: usize,
    seed: u64,
    train: &[Sample],
    valid: &[Sample],
    input_shape: (usize, usize),
) -> Result<SearchOutcome> {
    if !kind.is_neural() {
        return Err(Error::Validation(
            "random search tunes the neural architectures".into(),
        ));
    }
    let mut trials: Vec<TrialRecord> = Vec::with_capacity(n_trials);
    let mut best: Option<(usize, ModelBundle)> = None;
    for trial_id in 0..n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[trial_id as u64]));
        let (spec, mut config) = sample_trial(kind, space, &mut rng);
        config.seed = derive_seed(seed, &[trial_id as u64, 0x7a]);

        let record = match run_trial(&spec, &config, train, valid, input_shape) {
            Ok((bundle, mean_f1, threshold)) => {
                let record = TrialRecord {
                    trial_id,
                    spec,
                    learning_rate: config.learning_rate,
                    weight_decay: config.weight_decay,
                    optimizer: config.optimizer,
                    seed: config.seed,
                    mean_valid_f1: mean_f1,
                    threshold,
                };
                let better = match &best {
                    None => true,
                    Some((best_idx, _)) => {
                        mean_f1 > trials[*best_idx].mean_valid_f1
                    }
                };
                if better {
                    best = Some((trial_id, bundle));
                }
                record
            }
            Err(Error::Diverged(msg)) => TrialRecord {
                trial_id,
                spec,
                learning_rate: config.learning_rate,
                weight_decay: config.weight_decay,
                optimizer: config.optimizer,
                seed: config.seed,
                mean_valid_f1: -1.0,
                threshold: f64::NAN,
            }
            .tap_log(&msg),
            Err(e) => return Err(e),
        };
        trials.push(record);
    }
    let (best_idx, best_bundle) = best.ok_or_else(|| {
        Error::Diverged("every random-search trial diverged; see the trial log".into())
    })?;
    Ok(SearchOutcome {
        best: trials[best_idx].clone(),
        best_bundle,
        trials,
    })
}

impl TrialRecord {
    fn tap_log(self, msg: &str) -> TrialRecord {
        eprintln!("trial {} diverged: {msg}", self.trial_id);
        self
    }
}

fn run_trial(
    spec: &ArchitectureSpec,
    config: &TrainConfig,
    train: &[Sample],
    valid: &[Sample],
    input_shape: (usize, usize),
) -> Result<(ModelBundle, f64, f64)> {
    let net = Network::build(spec, input_shape.0, input_shape.1, config.seed)?;
    let trained = train_network(net, config, train, valid, None)?;
    let mut bundle = ModelBundle::neural(
        spec.clone(),
        trained.network,
        trained.meta,
        input_shape,
    );
    bundle.decision_threshold = tune_threshold(&bundle, valid)?;
    let threshold = bundle.decision_threshold;
    let mean_f1 = mean_participant_f1(&bundle, valid)?;
    Ok((bundle, mean_f1, threshold))
}

/// Append trial records to a JSON-Lines log.
pub fn write_trial_log(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for t in trials {
        let line = serde_json::to_string(t)
            .map_err(|e| Error::Validation(format!("serialize trial: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Result of personalizing one participant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PersonalizationResult {
    pub participant_id: String,
    /// True when the guards (>= 10 tokens, both classes, neural model for
    /// `personalize`) were not met; the out-of-box score carries through.
    pub skipped: bool,
    pub skip_reason: Option<String>,
    pub fold_f1: Vec<f64>,
    pub fold_thresholds: Vec<f64>,
    pub out_of_box_f1: f64,
    pub personalized_f1: Option<f64>,
    /// Exactly max(out_of_box, personalized).
    pub final_f1: f64,
    /// Mean of the per-fold re-tuned thresholds.
    pub updated_threshold: Option<f64>,
    /// Held-out-fold confusion counts pooled over the five folds
    /// (tp, fp, tn, fn); every token is predicted exactly once.
    pub pooled_counts: Option<(usize, usize, usize, usize)>,
}

/// Personalization fold count.
pub const N_FOLDS: usize = 5;

/// Minimum participant tokens for personalization.
pub const MIN_TOKENS: usize = 10;

/// Fine-tuning hyperparameters fixed by protocol.
pub const PERSONALIZE_LR: f64 = 1e-3;
pub const PERSONALIZE_WD: f64 = 0.0;
pub const PERSONALIZE_BATCH: usize = 16;

/// Trees added per participant for forest personalization.
pub const FOREST_EXTRA_TREES: usize = 100;

/// Extra epochs for SGD-linear personalization.
pub const SGD_EXTRA_EPOCHS: usize = 10;

/// Label-stratified fold assignment: each class is shuffled under the seed
/// and dealt round-robin, so per-fold class counts differ by at most one.
pub fn stratified_folds(samples: &[Sample], n_folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; samples.len()];
    for class in [true, false] {
        let mut members: Vec<usize> = (0..samples.len())
            .filter(|&i| samples[i].positive == class)
            .collect();
        members.shuffle(&mut rng);
        for (k, idx) in members.into_iter().enumerate() {
            fold_of[idx] = k % n_folds;
        }
    }
    fold_of
}

fn out_of_box_f1(bundle: &ModelBundle, samples: &[Sample]) -> Result<f64> {
    let labels: Vec<bool> = samples.iter().map(|s| s.positive).collect();
    let preds: Vec<bool> = samples
        .iter()
        .map(|s| Ok(bundle.score(s)? >= bundle.decision_threshold))
        .collect::<Result<_>>()?;
    Ok(f1_from_bools(&labels, &preds))
}

fn skipped_result(
    participant_id: &str,
    oob: f64,
    reason: &str,
) -> PersonalizationResult {
    PersonalizationResult {
        participant_id: participant_id.to_string(),
        skipped: true,
        skip_reason: Some(reason.to_string()),
        fold_f1: Vec::new(),
        fold_thresholds: Vec::new(),
        out_of_box_f1: oob,
        personalized_f1: None,
        final_f1: oob,
        updated_threshold: None,
        pooled_counts: None,
    }
}

fn guard_reason(samples: &[Sample]) -> Option<String> {
    if samples.len() < MIN_TOKENS {
        return Some(format!(
            "{} tokens, need at least {MIN_TOKENS}",
            samples.len()
        ));
    }
    let positives = samples.iter().filter(|s| s.positive).count();
    if positives == 0 || positives == samples.len() {
        return Some("single-class participant".into());
    }
    None
}

/// Mask selecting the last two parameterized layers of a network.
pub fn last_two_layers_mask(net: &Network) -> Vec<bool> {
    let layers = net.layer_params();
    let n_layers = layers.len();
    let mut mask = Vec::new();
    for (li, layer) in layers.iter().enumerate() {
        for _ in layer.iter() {
            mask.push(li + 2 >= n_layers);
        }
    }
    mask
}

/// Fine-tune a neural bundle on one participant with 5-fold cross
/// validation: per fold, the last two parameterized layers retrain at
/// lr 1e-3, weight decay 0, and a lowered batch size; the threshold is
/// re-tuned on the re-validation fold; F1 comes from the held-out fold.
pub fn personalize(
    bundle: &ModelBundle,
    participant: &[Sample],
    seed: u64,
) -> Result<PersonalizationResult> {
    let pid = participant
        .first()
        .map(|s| s.participant_id.clone())
        .ok_or_else(|| Error::Validation("no tokens for participant".into()))?;
    let oob = out_of_box_f1(bundle, participant)?;

    let ModelKind::Neural(base_net) = &bundle.model else {
        return Ok(skipped_result(&pid, oob, "not a neural model"));
    };
    if let Some(reason) = guard_reason(participant) {
        return Ok(skipped_result(&pid, oob, &reason));
    }

    let fold_of = stratified_folds(participant, N_FOLDS, derive_seed(seed, &[0xf0]));
    let mut fold_f1 = Vec::with_capacity(N_FOLDS);
    let mut fold_thresholds = Vec::with_capacity(N_FOLDS);
    let mut pooled = (0usize, 0usize, 0usize, 0usize);

    for fold in 0..N_FOLDS {
        let revalid_fold = (fold + 1) % N_FOLDS;
        let test: Vec<Sample> = pick(participant, &fold_of, |f| f == fold);
        let revalid: Vec<Sample> = pick(participant, &fold_of, |f| f == revalid_fold);
        let retrain: Vec<Sample> =
            pick(participant, &fold_of, |f| f != fold && f != revalid_fold);
        if test.is_empty() || revalid.is_empty() || retrain.is_empty() {
            fold_f1.push(oob);
            fold_thresholds.push(bundle.decision_threshold);
            continue;
        }

        let net = base_net.clone();
        let mask = last_two_layers_mask(&net);
        let config = TrainConfig {
            learning_rate: PERSONALIZE_LR,
            weight_decay: PERSONALIZE_WD,
            batch_size: PERSONALIZE_BATCH,
            optimizer: bundle.training_meta.optimizer,
            seed: derive_seed(seed, &[fold as u64]),
            ..TrainConfig::default()
        };
        let trained = train_network(net, &config, &retrain, &revalid, Some(mask))?;
        let mut tuned = ModelBundle::neural(
            bundle.spec.clone(),
            trained.network,
            trained.meta,
            bundle.input_shape,
        );
        // A single-class re-validation slice cannot host a threshold
        // search; keep the incoming threshold then.
        tuned.decision_threshold = match tune_threshold(&tuned, &revalid) {
            Ok(t) => t,
            Err(_) => bundle.decision_threshold,
        };

        let labels: Vec<bool> = test.iter().map(|s| s.positive).collect();
        let preds: Vec<bool> = test
            .iter()
            .map(|s| Ok(tuned.score(s)? >= tuned.decision_threshold))
            .collect::<Result<_>>()?;
        accumulate_counts(&mut pooled, &labels, &preds);
        fold_f1.push(f1_from_bools(&labels, &preds));
        fold_thresholds.push(tuned.decision_threshold);
    }

    let personalized = crate::util::mean(&fold_f1);
    Ok(PersonalizationResult {
        participant_id: pid,
        skipped: false,
        skip_reason: None,
        out_of_box_f1: oob,
        personalized_f1: Some(personalized),
        final_f1: oob.max(personalized),
        updated_threshold: Some(crate::util::mean(&fold_thresholds)),
        fold_f1,
        fold_thresholds,
        pooled_counts: Some(pooled),
    })
}

fn accumulate_counts(
    pooled: &mut (usize, usize, usize, usize),
    labels: &[bool],
    preds: &[bool],
) {
    for (&l, &p) in labels.iter().zip(preds) {
        match (l, p) {
            (true, true) => pooled.0 += 1,
            (false, true) => pooled.1 += 1,
            (false, false) => pooled.2 += 1,
            (true, false) => pooled.3 += 1,
        }
    }
}

fn pick(samples: &[Sample], fold_of: &[usize], keep: impl Fn(usize) -> bool) -> Vec<Sample> {
    samples
        .iter()
        .zip(fold_of)
        .filter(|(_, &f)| keep(f))
        .map(|(s, _)| s.clone())
        .collect()
}

/// Personalize a shallow bundle: the forest gains 100 participant-specific
/// trees per fold; the SGD model trains 10 additional epochs. The fold
/// protocol and threshold update mirror `personalize`.
pub fn personalize_shallow(
    bundle: &ModelBundle,
    participant: &[Sample],
    seed: u64,
) -> Result<PersonalizationResult> {
    let pid = participant
        .first()
        .map(|s| s.participant_id.clone())
        .ok_or_else(|| Error::Validation("no tokens for participant".into()))?;
    let oob = out_of_box_f1(bundle, participant)?;
    if bundle.is_neural() {
        return Err(Error::Validation(
            "personalize_shallow needs a forest or SGD bundle".into(),
        ));
    }
    if let Some(reason) = guard_reason(participant) {
        return Ok(skipped_result(&pid, oob, &reason));
    }

    let fold_of = stratified_folds(participant, N_FOLDS, derive_seed(seed, &[0xf0]));
    let mut fold_f1 = Vec::with_capacity(N_FOLDS);
    let mut fold_thresholds = Vec::with_capacity(N_FOLDS);
    let mut pooled = (0usize, 0usize, 0usize, 0usize);

    for fold in 0..N_FOLDS {
        let revalid_fold = (fold + 1) % N_FOLDS;
        let test: Vec<Sample> = pick(participant, &fold_of, |f| f == fold);
        let revalid: Vec<Sample> = pick(participant, &fold_of, |f| f == revalid_fold);
        let retrain: Vec<Sample> =
            pick(participant, &fold_of, |f| f != fold && f != revalid_fold);
        if test.is_empty() || revalid.is_empty() || retrain.is_empty() {
            fold_f1.push(oob);
            fold_thresholds.push(bundle.decision_threshold);
            continue;
        }

        let features: Vec<Vec<f64>> = retrain.iter().map(|s| s.flat.clone()).collect();
        let labels: Vec<bool> = retrain.iter().map(|s| s.positive).collect();
        let fold_seed = derive_seed(seed, &[fold as u64]);

        let mut tuned = bundle.clone();
        tuned.model = match &bundle.model {
            ModelKind::Forest(forest) => ModelKind::Forest(extend_forest(
                forest,
                &features,
                &labels,
                &ForestParams::default(),
                FOREST_EXTRA_TREES,
                fold_seed,
            )),
            ModelKind::Sgd(model) => {
                let mut m = model.clone();
                m.fit(
                    &features,
                    &labels,
                    &SgdParams {
                        epochs: SGD_EXTRA_EPOCHS,
                        ..SgdParams::default()
                    },
                    fold_seed,
                );
                ModelKind::Sgd(m)
            }
            ModelKind::Neural(_) => unreachable!("guarded above"),
        };
        tuned.decision_threshold = match tune_threshold(&tuned, &revalid) {
            Ok(t) => t,
            Err(_) => bundle.decision_threshold,
        };

        let labels: Vec<bool> = test.iter().map(|s| s.positive).collect();
        let preds: Vec<bool> = test
            .iter()
            .map(|s| Ok(tuned.score(s)? >= tuned.decision_threshold))
            .collect::<Result<_>>()?;
        accumulate_counts(&mut pooled, &labels, &preds);
        fold_f1.push(f1_from_bools(&labels, &preds));
        fold_thresholds.push(tuned.decision_threshold);
    }

    let personalized = crate::util::mean(&fold_f1);
    Ok(PersonalizationResult {
        participant_id: pid,
        skipped: false,
        skip_reason: None,
        out_of_box_f1: oob,
        personalized_f1: Some(personalized),
        final_f1: oob.max(personalized),
        updated_threshold: Some(crate::util::mean(&fold_thresholds)),
        fold_f1,
        fold_thresholds,
        pooled_counts: Some(pooled),
    })
}
