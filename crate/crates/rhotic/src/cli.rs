//! Batch subcommands wiring the pipeline stages through files.
//!
//! Stages communicate only through the documented file formats, so any
//! stage can be rerun or audited in isolation. Every run embeds its
//! resolved configuration in its output artifact (JSON outputs carry a
//! `run_config` field; CSV/JSON-Lines outputs get a `<name>.run.json`
//! sidecar).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::corpus::{self, DownsamplePolicy, Subset};
use crate::error::{Error, Result};
use crate::eval::{Condition, EvaluationReport, ParticipantMetrics};
use crate::features::{FeatureSet, NormTable};
use crate::models::{
    load_bundle, save_bundle, train_network, train_random_forest, train_sgd_linear,
    tune_threshold, Activation, ArchKind, ArchitectureSpec, ForestParams, ModelBundle, Network,
    OptimizerKind, SgdParams, TrainConfig,
};
use crate::pipeline;
use crate::synth::{synth_corpus, SynthSpec};
use crate::tuning::{self, SearchSpace};

/// Resolved invocation recorded into output artifacts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub args: BTreeMap<String, String>,
}

impl RunConfig {
    fn new(command: &str, seed: u64) -> RunConfig {
        RunConfig {
            command: command.to_string(),
            tool_version: crate::VERSION.to_string(),
            seed,
            args: BTreeMap::new(),
        }
    }

    fn arg(mut self, key: &str, value: impl ToString) -> RunConfig {
        self.args.insert(key.to_string(), value.to_string());
        self
    }

    /// Sidecar for outputs whose schema cannot embed the config.
    fn write_sidecar(&self, output: &Path) -> Result<()> {
        let path = output.with_extension(format!(
            "{}run.json",
            output
                .extension()
                .map(|e| format!("{}.", e.to_string_lossy()))
                .unwrap_or_default()
        ));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("serialize run config: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Parser)]
#[command(
    name = "rhotic",
    version,
    about = "Fully rhotic vs derhotic /r/ classification pipeline"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate the synthetic labeled corpus (audio, manifest, norms).
    Synth(SynthArgs),
    /// Extract feature tensors from a manifest and its audio.
    Extract(ExtractArgs),
    /// Profile participants and build down-sampled train/valid/test splits.
    Partition(PartitionArgs),
    /// Random hyperparameter search over the tuning space.
    Tune(TuneArgs),
    /// Train one classifier with fixed hyperparameters.
    Train(TrainArgs),
    /// Re-tune a model's decision threshold on a subset.
    Threshold(ThresholdArgs),
    /// Per-participant fine-tuning with 5-fold cross-validation.
    Personalize(PersonalizeArgs),
    /// Score a subset and write the evaluation report.
    Evaluate(EvaluateArgs),
    /// Render an evaluation report as tables; optionally export strata CSV.
    Report(ReportArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Output directory for audio/, manifest.csv, norms.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub participants: usize,
    /// Tokens per participant.
    #[arg(long, default_value_t = 30)]
    pub tokens: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Formant target jitter sd, Hz.
    #[arg(long, default_value_t = 40.0)]
    pub jitter: f64,
    /// Excitation noise mix in [0, 1].
    #[arg(long, default_value_t = 0.12)]
    pub noise: f64,
    /// Fraction of tokens with non-unanimous (but label-preserving) ratings.
    #[arg(long, default_value_t = 0.0)]
    pub rater_noise: f64,
}

#[derive(Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Norms CSV; required for --feature-set formant-asnorm.
    #[arg(long)]
    pub norms: Option<PathBuf>,
    /// formant-asnorm | formant-unorm | mfcc
    #[arg(long, default_value = "formant-asnorm")]
    pub feature_set: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads (0 = all cores). Output is identical for any value.
    #[arg(long, default_value_t = 0)]
    pub jobs: usize,
    /// Optional ceiling-search audit file (JSON).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PartitionArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Args)]
pub struct TuneArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// grnn | cnn | cnn-grnn
    #[arg(long, default_value = "grnn")]
    pub arch: String,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON-Lines log of every trial.
    #[arg(long)]
    pub trial_log: PathBuf,
    /// Best model bundle.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// grnn | cnn | cnn-grnn | forest | sgd
    #[arg(long, default_value = "grnn")]
    pub arch: String,
    #[arg(long, default_value_t = 1)]
    pub recurrent_layers: usize,
    #[arg(long, default_value_t = 160)]
    pub recurrent_width: usize,
    #[arg(long, default_value_t = 1)]
    pub conv_layers: usize,
    #[arg(long, default_value_t = 64)]
    pub conv_channels: usize,
    #[arg(long, default_value_t = 3)]
    pub conv_kernel: usize,
    #[arg(long, default_value_t = 4)]
    pub linear_layers: usize,
    #[arg(long, default_value_t = 191)]
    pub linear_width: usize,
    /// relu | gelu | sigmoid | tanh | hardswish | elu | hardsigmoid |
    /// rrelu | logsoftmax
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long, default_value_t = 0.25)]
    pub dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub weight_decay: f64,
    /// adam | rmsprop | sgd | asgd
    #[arg(long, default_value = "adam")]
    pub optimizer: String,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    /// Trees for --arch forest.
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    /// Epochs for --arch sgd.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ThresholdArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    /// train | validation | test
    #[arg(long, default_value = "validation")]
    pub subset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output bundle (defaults to overwriting --model).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct PersonalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub splits: PathBuf,
    #[arg(long, default_value = "test")]
    pub subset: String,
    /// Personalization report to merge (adds Personalized/Final rows).
    #[arg(long)]
    pub personalization: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Optional CSV export of the strata tables.
    #[arg(long)]
    pub strata_csv: Option<PathBuf>,
}

fn parse_subset(s: &str) -> Result<Subset> {
    match s {
        "train" => Ok(Subset::Train),
        "validation" | "valid" => Ok(Subset::Validation),
        "test" => Ok(Subset::Test),
        other => Err(Error::Validation(format!(
            "subset must be train, validation, or test, got {other:?}"
        ))),
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Extract(args) => cmd_extract(args),
        Command::Partition(args) => cmd_partition(args),
        Command::Tune(args) => cmd_tune(args),
        Command::Train(args) => cmd_train(args),
        Command::Threshold(args) => cmd_threshold(args),
        Command::Personalize(args) => cmd_personalize(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_participants: args.participants,
        tokens_per_participant: args.tokens,
        jitter_sd: args.jitter,
        noise_level: args.noise,
        rater_noise_fraction: args.rater_noise,
        seed: args.seed,
        ..SynthSpec::default()
    };
    let records = synth_corpus(&spec, &args.out)?;
    RunConfig::new("synth", args.seed)
        .arg("participants", args.participants)
        .arg("tokens", args.tokens)
        .arg("jitter", args.jitter)
        .arg("noise", args.noise)
        .arg("rater_noise", args.rater_noise)
        .arg("out", args.out.display())
        .write_sidecar(&args.out.join("manifest.csv"))?;
    println!(
        "wrote {} utterances to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_extract(args: ExtractArgs) -> Result<()> {
    let feature_set = FeatureSet::parse(&args.feature_set)?;
    let records = corpus::load_manifest(&args.manifest)?;
    let norms = match (&args.norms, feature_set) {
        (Some(path), _) => Some(NormTable::read_csv(path)?),
        (None, FeatureSet::FormantAsnorm) => {
            return Err(Error::Validation(
                "--norms is required for --feature-set formant-asnorm".into(),
            ))
        }
        _ => None,
    };
    let manifest_dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let outcome = pipeline::extract_features(
        &records,
        &manifest_dir,
        feature_set,
        norms.as_ref(),
        args.jobs,
    )?;
    pipeline::write_features(&args.out, &outcome.features)?;
    if let Some(path) = &args.diagnostics {
        pipeline::write_diagnostics(path, &outcome.diagnostics)?;
    }
    for (id, reason) in &outcome.skipped {
        eprintln!("skipped {id}: {reason}");
    }
    RunConfig::new("extract", args.seed)
        .arg("manifest", args.manifest.display())
        .arg("feature_set", feature_set.name())
        .arg("jobs", args.jobs)
        .arg("out", args.out.display())
        .write_sidecar(&args.out)?;
    println!(
        "extracted {} utterances ({} skipped) -> {}",
        outcome.features.len(),
        outcome.skipped.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    let records = corpus::load_manifest(&args.manifest)?;
    let profiles = corpus::profile_participants(&records);
    let [train, valid, test] = corpus::build_splits(&records, &profiles, args.seed)?;
    let train = corpus::downsample(&train, &records, DownsamplePolicy::train(), args.seed);
    let valid = corpus::downsample(&valid, &records, DownsamplePolicy::valid_test(), args.seed);
    let test = corpus::downsample(&test, &records, DownsamplePolicy::valid_test(), args.seed);
    let split_file = corpus::SplitFile::from_assignments(&[train, valid, test], args.seed);
    pipeline::write_split_file(&args.out, &split_file)?;
    RunConfig::new("partition", args.seed)
        .arg("manifest", args.manifest.display())
        .arg("out", args.out.display())
        .write_sidecar(&args.out)?;
    let counts: Vec<String> = split_file
        .subsets
        .iter()
        .map(|(k, v)| format!("{k}: {}", v.len()))
        .collect();
    println!("splits written ({})", counts.join(", "));
    Ok(())
}

struct LoadedData {
    train: Vec<crate::models::Sample>,
    valid: Vec<crate::models::Sample>,
    test: Vec<crate::models::Sample>,
    input_shape: (usize, usize),
    feature_set: String,
    meta: BTreeMap<String, (u32, crate::corpus::Sex)>,
}

fn load_data(features: &Path, splits: &Path) -> Result<LoadedData> {
    let records = crate::features::read_feature_file(features)?;
    if records.is_empty() {
        return Err(Error::Validation(format!(
            "{} holds no feature records",
            features.display()
        )));
    }
    let input_shape = (records[0].dims[0], records[0].dims[1] * records[0].dims[2]);
    let feature_set = records[0].feature_set.name().to_string();
    let meta = pipeline::participant_meta(&records);
    let samples = crate::models::samples_from_records(&records);
    let split_file = pipeline::read_split_file(splits)?;
    Ok(LoadedData {
        train: pipeline::select_samples(&samples, split_file.ids(Subset::Train)),
        valid: pipeline::select_samples(&samples, split_file.ids(Subset::Validation)),
        test: pipeline::select_samples(&samples, split_file.ids(Subset::Test)),
        input_shape,
        feature_set,
        meta,
    })
}

fn cmd_tune(args: TuneArgs) -> Result<()> {
    let kind = ArchKind::parse(&args.arch)?;
    let data = load_data(&args.features, &args.splits)?;
    let outcome = tuning::random_search(
        kind,
        &SearchSpace::default(),
        args.trials,
        args.seed,
        &data.train,
        &data.valid,
        data.input_shape,
    )?;
    tuning::write_trial_log(&args.trial_log, &outcome.trials)?;
    save_bundle(&outcome.best_bundle, &args.out)?;
    RunConfig::new("tune", args.seed)
        .arg("arch", &args.arch)
        .arg("trials", args.trials)
        .arg("features", args.features.display())
        .arg("out", args.out.display())
        .write_sidecar(&args.trial_log)?;
    println!(
        "best trial {} mean validation F1 {:.4} -> {}",
        outcome.best.trial_id,
        outcome.best.mean_valid_f1,
        args.out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let kind = ArchKind::parse(&args.arch)?;
    let data = load_data(&args.features, &args.splits)?;
    let bundle = match kind {
        ArchKind::RandomForest => {
            let features: Vec<Vec<f64>> = data.train.iter().map(|s| s.flat.clone()).collect();
            let labels: Vec<bool> = data.train.iter().map(|s| s.positive).collect();
            let forest = train_random_forest(
                &features,
                &labels,
                &ForestParams {
                    n_trees: args.trees,
                    ..ForestParams::default()
                },
                args.seed,
            );
            ModelBundle::forest(forest, args.seed, data.input_shape)
        }
        ArchKind::SgdLinear => {
            let features: Vec<Vec<f64>> = data.train.iter().map(|s| s.flat.clone()).collect();
            let labels: Vec<bool> = data.train.iter().map(|s| s.positive).collect();
            let model = train_sgd_linear(
                &features,
                &labels,
                &SgdParams {
                    learning_rate: args.learning_rate,
                    weight_decay: args.weight_decay,
                    epochs: args.epochs,
                },
                args.seed,
            );
            ModelBundle::sgd(model, args.seed, data.input_shape)
        }
        _ => {
            let activation = Activation::parse(&args.activation).ok_or_else(|| {
                Error::Validation(format!("unknown activation {:?}", args.activation))
            })?;
            let spec = ArchitectureSpec {
                kind,
                recurrent_layers: args.recurrent_layers,
                recurrent_width: args.recurrent_width,
                conv_layers: args.conv_layers,
                conv_channels: args.conv_channels,
                conv_kernel: args.conv_kernel,
                linear_layers: args.linear_layers,
                linear_width: args.linear_width,
                activation,
                dropout: args.dropout,
            };
            let config = TrainConfig {
                learning_rate: args.learning_rate,
                weight_decay: args.weight_decay,
                optimizer: OptimizerKind::parse(&args.optimizer)?,
                batch_size: args.batch_size,
                seed: args.seed,
                ..TrainConfig::default()
            };
            let net = Network::build(&spec, data.input_shape.0, data.input_shape.1, args.seed)?;
            let trained = train_network(net, &config, &data.train, &data.valid, None)?;
            println!(
                "trained {} epochs, best validation loss {:.4}",
                trained.meta.epochs_run,
                trained.meta.best_validation_loss.unwrap_or(f64::NAN)
            );
            ModelBundle::neural(spec, trained.network, trained.meta, data.input_shape)
        }
    };
    save_bundle(&bundle, &args.out)?;
    RunConfig::new("train", args.seed)
        .arg("arch", &args.arch)
        .arg("features", args.features.display())
        .arg("out", args.out.display())
        .write_sidecar(&args.out)?;
    println!("model written to {}", args.out.display());
    Ok(())
}

fn cmd_threshold(args: ThresholdArgs) -> Result<()> {
    let mut bundle = load_bundle(&args.model)?;
    let data = load_data(&args.features, &args.splits)?;
    let subset = match parse_subset(&args.subset)? {
        Subset::Train => &data.train,
        Subset::Validation => &data.valid,
        Subset::Test => &data.test,
    };
    bundle.decision_threshold = tune_threshold(&bundle, subset)?;
    let out = args.out.clone().unwrap_or_else(|| args.model.clone());
    save_bundle(&bundle, &out)?;
    RunConfig::new("threshold", args.seed)
        .arg("model", args.model.display())
        .arg("subset", &args.subset)
        .arg("out", out.display())
        .write_sidecar(&out)?;
    println!(
        "threshold {:.2} written to {}",
        bundle.decision_threshold,
        out.display()
    );
    Ok(())
}

fn cmd_personalize(args: PersonalizeArgs) -> Result<()> {
    let bundle = load_bundle(&args.model)?;
    let data = load_data(&args.features, &args.splits)?;
    let subset = match parse_subset(&args.subset)? {
        Subset::Train => &data.train,
        Subset::Validation => &data.valid,
        Subset::Test => &data.test,
    };
    let mut results = Vec::new();
    for (pid, samples) in pipeline::by_participant(subset) {
        let seed = crate::util::derive_seed(args.seed, &[results.len() as u64]);
        let result = if bundle.is_neural() {
            tuning::personalize(&bundle, &samples, seed)?
        } else {
            tuning::personalize_shallow(&bundle, &samples, seed)?
        };
        println!(
            "{pid}: out-of-box {:.3}, personalized {}, final {:.3}{}",
            result.out_of_box_f1,
            result
                .personalized_f1
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into()),
            result.final_f1,
            result
                .skip_reason
                .as_ref()
                .map(|r| format!(" (skipped: {r})"))
                .unwrap_or_default()
        );
        results.push(result);
    }
    let report = pipeline::PersonalizationReport {
        schema_version: 1,
        tool_version: crate::VERSION.to_string(),
        seed: args.seed,
        results,
    };
    pipeline::write_personalization_report(&args.out, &report)?;
    RunConfig::new("personalize", args.seed)
        .arg("model", args.model.display())
        .arg("subset", &args.subset)
        .arg("out", args.out.display())
        .write_sidecar(&args.out)?;
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let bundle = load_bundle(&args.model)?;
    let data = load_data(&args.features, &args.splits)?;
    let subset = match parse_subset(&args.subset)? {
        Subset::Train => &data.train,
        Subset::Validation => &data.valid,
        Subset::Test => &data.test,
    };
    let mut rows = pipeline::out_of_box_metrics(&bundle, subset, &data.meta)?;

    if let Some(path) = &args.personalization {
        let personalization = pipeline::read_personalization_report(path)?;
        let oob: BTreeMap<String, ParticipantMetrics> = rows
            .iter()
            .map(|m| (m.participant_id.clone(), m.clone()))
            .collect();
        for result in &personalization.results {
            let Some(oob_row) = oob.get(&result.participant_id) else {
                continue;
            };
            // Personalized rows: cross-validated F1 with fold-pooled counts
            // backing the confusion matrix.
            let (tp, fp, tn, fn_) = result
                .pooled_counts
                .unwrap_or((oob_row.tp, oob_row.fp, oob_row.tn, oob_row.fn_));
            let mut personalized = ParticipantMetrics::from_counts(
                &result.participant_id,
                oob_row.age,
                oob_row.sex,
                Condition::Personalized,
                tp,
                fp,
                tn,
                fn_,
            );
            if let Some(f1) = result.personalized_f1 {
                personalized.f1 = f1;
            }
            // Final takes the better condition per participant, exactly.
            let mut final_row = if result.final_f1 == result.out_of_box_f1 {
                oob_row.clone()
            } else {
                personalized.clone()
            };
            final_row.condition = Condition::Final;
            final_row.f1 = result.final_f1;
            rows.push(personalized);
            rows.push(final_row);
        }
    }

    let report = EvaluationReport::build(rows, args.seed, &data.feature_set);
    pipeline::write_evaluation_report(&args.out, &report)?;
    RunConfig::new("evaluate", args.seed)
        .arg("model", args.model.display())
        .arg("subset", &args.subset)
        .arg("out", args.out.display())
        .write_sidecar(&args.out)?;
    for summary in &report.summaries {
        println!(
            "{:?}: n={} mean F1 {:.3} (sd {:.3}, median {:.3})",
            summary.condition,
            summary.n_participants,
            summary.mean_f1,
            summary.sd_f1,
            summary.median_f1
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report = pipeline::read_evaluation_report(&args.input)?;
    println!(
        "evaluation report (feature set {}, seed {})",
        report.feature_set, report.seed
    );
    for summary in &report.summaries {
        println!(
            "\n{:?} (n = {} participants)",
            summary.condition, summary.n_participants
        );
        println!(
            "  F1 mean {:.3}  sd {:.3}  median {:.3}",
            summary.mean_f1, summary.sd_f1, summary.median_f1
        );
        println!("  confusion (rows = ground truth, row-normalized):");
        println!(
            "    derhotic    [{:.2} {:.2}]",
            summary.confusion[0][0], summary.confusion[0][1]
        );
        println!(
            "    rhotic      [{:.2} {:.2}]",
            summary.confusion[1][0], summary.confusion[1][1]
        );
    }
    println!("\nstrata (age bin x sex):");
    for cell in &report.strata {
        match (cell.mean_f1, cell.token_accuracy) {
            (Some(f1), Some(acc)) => println!(
                "  {:>5} {}  n={:<3} mean F1 {:.3}  token acc {:.3}",
                cell.age_bin, cell.sex, cell.n_participants, f1, acc
            ),
            _ => println!("  {:>5} {}  n=0", cell.age_bin, cell.sex),
        }
    }
    if let Some(path) = &args.strata_csv {
        std::fs::write(path, report.strata_csv()).map_err(|e| Error::io(path, e))?;
        println!("\nstrata CSV -> {}", path.display());
    }
    Ok(())
}
