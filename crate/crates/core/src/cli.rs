//! Command-line front end.
//!
//! Subcommands cover the whole loop: `synth` emits a seeded corpus,
//! `label` joins and labels it, `featurize` freezes a vocabulary,
//! `train` fits one variant and saves a checkpoint, `evaluate` runs
//! expanding-window cross-validation, `explain` scores one claim's
//! fields, and `bench` compares all five variants in one table.
//!
//! Run settings come from an optional key=value config file; any flag
//! given on the command line wins over the file. The `seed` key (or
//! `--seed`) is the master seed: it sets both the parameter
//! initialization seed and the shuffle seed unless `shuffle_seed`
//! overrides the latter.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::explain::{suspiciousness, top_k, ExplainError};
use crate::featurize::{build_vocab, vectorize, Thresholds, Vocabulary};
use crate::ingest::{
    join_and_label, parse_claims, parse_remits, ClaimRecord, DenialCodeSet, IngestError,
    JoinOutcome,
};
use crate::model::{Checkpoint, ModelConfig, ModelError, Variant};
use crate::pipeline::{
    loss_trace_csv, metrics_csv, run_cv, saliency_csv, train_full, PipelineError,
};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}:{line}: expected key=value, got {text:?}")]
    MalformedConfigLine { path: String, line: usize, text: String },
    #[error("{path}:{line}: unknown config key {key:?}")]
    UnknownConfigKey { path: String, line: usize, key: String },
    #[error("{path}:{line}: bad value {value:?} for {key}")]
    BadConfigValue { path: String, line: usize, key: String, value: String },
    #[error("no claim with pcn {0:?} in the claims file")]
    ClaimNotFound(String),
    #[error("claims file is empty")]
    NoClaims,
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Io { path: path.display().to_string(), source }
}

fn json_err(path: &Path, source: serde_json::Error) -> CliError {
    CliError::Json { path: path.display().to_string(), source }
}

/// Settings shared by the model-running subcommands.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub k_splits: usize,
    pub explain_threshold: f64,
    pub thresholds: Thresholds,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::DeepClaim2,
            k_splits: 3,
            explain_threshold: 0.8,
            thresholds: Thresholds::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a key=value config file body. Blank lines and `#` comments
    /// are ignored; unknown keys are errors.
    pub fn parse(text: &str, path: &str) -> Result<RunConfig, CliError> {
        let mut config = RunConfig::default();
        let mut master_seed: Option<u64> = None;
        let mut shuffle_seed: Option<u64> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let Some((key, value)) = content.split_once('=') else {
                return Err(CliError::MalformedConfigLine {
                    path: path.into(),
                    line,
                    text: content.into(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            let bad = || CliError::BadConfigValue {
                path: path.into(),
                line,
                key: key.into(),
                value: value.into(),
            };
            match key {
                "variant" => config.variant = Variant::parse(value).map_err(|_| bad())?,
                "k_splits" => config.k_splits = value.parse().map_err(|_| bad())?,
                "explain_threshold" => {
                    config.explain_threshold = value.parse().map_err(|_| bad())?
                }
                "procedure_min_count" => {
                    config.thresholds.procedure = value.parse().map_err(|_| bad())?
                }
                "diagnosis_min_count" => {
                    config.thresholds.diagnosis = value.parse().map_err(|_| bad())?
                }
                "other_min_count" => config.thresholds.other = value.parse().map_err(|_| bad())?,
                "context_dim" => config.model.context_dim = value.parse().map_err(|_| bad())?,
                "embed_dim" => config.model.embed_dim = value.parse().map_err(|_| bad())?,
                "lambda_claim" => config.model.lambda[0] = value.parse().map_err(|_| bad())?,
                "lambda_service" => config.model.lambda[1] = value.parse().map_err(|_| bad())?,
                "lambda_days" => config.model.lambda[2] = value.parse().map_err(|_| bad())?,
                "seed" => master_seed = Some(value.parse().map_err(|_| bad())?),
                "learning_rate" => config.train.learning_rate = value.parse().map_err(|_| bad())?,
                "beta1" => config.train.beta1 = value.parse().map_err(|_| bad())?,
                "beta2" => config.train.beta2 = value.parse().map_err(|_| bad())?,
                "epsilon" => config.train.epsilon = value.parse().map_err(|_| bad())?,
                "batch_size" => config.train.batch_size = value.parse().map_err(|_| bad())?,
                "epochs" => config.train.epochs = value.parse().map_err(|_| bad())?,
                "shuffle_seed" => shuffle_seed = Some(value.parse().map_err(|_| bad())?),
                _ => {
                    return Err(CliError::UnknownConfigKey {
                        path: path.into(),
                        line,
                        key: key.into(),
                    })
                }
            }
        }
        if let Some(seed) = master_seed {
            config.set_seed(seed);
        }
        if let Some(seed) = shuffle_seed {
            config.train.shuffle_seed = seed;
        }
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.shuffle_seed = seed;
    }
}

#[derive(Parser, Debug)]
#[command(name = "deepclaim", version, about = "Payer-response prediction on healthcare claims")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct CorpusArgs {
    /// Claims JSONL file.
    #[arg(long)]
    pub claims: PathBuf,
    /// Remittances JSONL file.
    #[arg(long)]
    pub remits: PathBuf,
    /// Denial code set text file (one CARC per line).
    #[arg(long = "denial-set")]
    pub denial_set: PathBuf,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Key=value run config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a seeded synthetic corpus with planted denial rules.
    Synth {
        /// SynthConfig as JSON; defaults apply for missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Claim count override.
        #[arg(long = "n-claims")]
        n_claims: Option<usize>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Join claims to remittances and derive training targets.
    Label {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Build and freeze the feature vocabulary from a claims file.
    Featurize {
        /// Claims JSONL file.
        #[arg(long)]
        claims: PathBuf,
        /// Key=value run config file (for the frequency thresholds).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train one variant on the full corpus and save a checkpoint.
    Train {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Model variant; overrides the config file.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Time-series cross-validation for one variant.
    Evaluate {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Model variant; overrides the config file.
        #[arg(long)]
        variant: Option<String>,
        /// Split count; overrides the config file.
        #[arg(long = "k-splits")]
        k_splits: Option<usize>,
    },
    /// Per-field saliency for one claim from a saved checkpoint.
    Explain {
        /// Claims JSONL file.
        #[arg(long)]
        claims: PathBuf,
        /// Checkpoint JSON from `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary JSON from `train` or `featurize`.
        #[arg(long)]
        vocab: PathBuf,
        /// Claim to explain; defaults to the first in the file.
        #[arg(long)]
        pcn: Option<String>,
        /// Flagging threshold on normalized scores.
        #[arg(long)]
        threshold: Option<f64>,
        /// Key=value run config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Cross-validate all five variants and emit one comparison table.
    Bench {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        run: RunArgs,
        /// Split count; overrides the config file.
        #[arg(long = "k-splits")]
        k_splits: Option<usize>,
    },
}

fn read_to_string(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, content).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

fn load_run_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => RunConfig::parse(&read_to_string(p)?, &p.display().to_string()),
        None => Ok(RunConfig::default()),
    }
}

fn load_claims(path: &Path) -> Result<Vec<ClaimRecord>, CliError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    Ok(parse_claims(BufReader::new(file))?)
}

fn load_corpus(corpus: &CorpusArgs) -> Result<(JoinOutcome, DenialCodeSet), CliError> {
    let claims = load_claims(&corpus.claims)?;
    let file = fs::File::open(&corpus.remits).map_err(|e| io_err(&corpus.remits, e))?;
    let remits = parse_remits(BufReader::new(file))?;
    let denial_text = read_to_string(&corpus.denial_set)?;
    let label = corpus.denial_set.display().to_string();
    let denial = DenialCodeSet::parse(&denial_text, label)?;
    Ok((join_and_label(&claims, &remits, &denial), denial))
}

#[derive(Serialize)]
struct LabelLine<'a> {
    pcn: &'a str,
    y0: f64,
    y1: &'a [f64],
    y2: &'a [f64],
    y3: f64,
    remit_date: String,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth { config, seed, n_claims, out } => {
            let mut synth_config = match &config {
                Some(path) => serde_json::from_str::<SynthConfig>(&read_to_string(path)?)
                    .map_err(|e| json_err(path, e))?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                synth_config.seed = seed;
            }
            if let Some(n) = n_claims {
                synth_config.n_claims = n;
            }
            let output = generate(&synth_config)?;
            write_file(&out, "claims.jsonl", &output.claims)?;
            write_file(&out, "remits.jsonl", &output.remits)?;
            write_file(&out, "truth.jsonl", &output.truth)?;
            write_file(&out, "denial_codes.txt", &output.denial_codes)?;
            println!(
                "wrote {} claims, {} rule firings to {}",
                synth_config.n_claims,
                output.truth.lines().count(),
                out.display()
            );
        }
        Command::Label { corpus, out } => {
            let (outcome, denial) = load_corpus(&corpus)?;
            let mut body = String::new();
            for l in &outcome.labeled {
                let line = LabelLine {
                    pcn: &l.claim.patient_control_number,
                    y0: l.target.y0,
                    y1: &l.target.y1,
                    y2: &l.target.y2,
                    y3: l.target.y3,
                    remit_date: crate::ingest::format_date(l.remit_date),
                };
                body.push_str(&serde_json::to_string(&line).expect("label line serializes"));
                body.push('\n');
            }
            let path = write_file(&out, "labels.jsonl", &body)?;
            let denied = outcome.labeled.iter().filter(|l| l.target.y0 == 1.0).count();
            println!(
                "labeled {} claims ({} denied, {} codes in {}); {} missing remit, {} negative interval; wrote {}",
                outcome.labeled.len(),
                denied,
                denial.class_count() - 1,
                denial.label,
                outcome.missing_remit,
                outcome.rejected_negative_interval.len(),
                path.display()
            );
        }
        Command::Featurize { claims, config, out } => {
            let run_config = load_run_config(config.as_ref())?;
            let records = load_claims(&claims)?;
            let vocab = build_vocab(&records, run_config.thresholds)
                .map_err(PipelineError::Featurize)?;
            let body = serde_json::to_string_pretty(&vocab).expect("vocabulary serializes");
            let path = write_file(&out, "vocab.json", &body)?;
            println!(
                "vocabulary dims c={} d={} o={} hash={:016x}; wrote {}",
                vocab.procedure.dim(),
                vocab.diagnosis.dim(),
                vocab.other.dim(),
                vocab.content_hash(),
                path.display()
            );
        }
        Command::Train { corpus, run, variant } => {
            let mut config = load_run_config(run.config.as_ref())?;
            if let Some(seed) = run.seed {
                config.set_seed(seed);
            }
            if let Some(name) = variant {
                config.variant = Variant::parse(&name)?;
            }
            let (outcome, _) = load_corpus(&corpus)?;
            let trained = train_full(
                &outcome.labeled,
                config.variant,
                &config.model,
                &config.train,
                config.thresholds,
            )?;
            fs::create_dir_all(&run.out).map_err(|e| io_err(&run.out, e))?;
            let checkpoint_path = run.out.join("checkpoint.json");
            trained.checkpoint.save(&checkpoint_path)?;
            let vocab_body =
                serde_json::to_string_pretty(&trained.vocab).expect("vocabulary serializes");
            write_file(&run.out, "vocab.json", &vocab_body)?;
            write_file(&run.out, "loss_trace.csv", &loss_trace_csv(&trained.losses))?;
            let last = trained.losses.last();
            println!(
                "trained {} on {} claims for {} epochs (final total loss {}); wrote {}",
                config.variant.name(),
                outcome.labeled.len(),
                trained.losses.len(),
                last.map(|l| l.total.to_string()).unwrap_or_else(|| "n/a".into()),
                checkpoint_path.display()
            );
        }
        Command::Evaluate { corpus, run, variant, k_splits } => {
            let mut config = load_run_config(run.config.as_ref())?;
            if let Some(seed) = run.seed {
                config.set_seed(seed);
            }
            if let Some(name) = variant {
                config.variant = Variant::parse(&name)?;
            }
            if let Some(k) = k_splits {
                config.k_splits = k;
            }
            let (outcome, _) = load_corpus(&corpus)?;
            let cv = run_cv(
                &outcome.labeled,
                config.variant,
                &config.model,
                &config.train,
                config.thresholds,
                config.k_splits,
            )?;
            let json = serde_json::to_string_pretty(&cv.report).expect("report serializes");
            write_file(&run.out, "metrics.json", &json)?;
            write_file(&run.out, "metrics.csv", &metrics_csv(std::slice::from_ref(&cv.report)))?;
            println!(
                "{}: recall@95 {:.4} ± {:.4}, pr_auc {:.4} ± {:.4}, mae {:.4} ± {:.4} over {} splits; wrote {}",
                cv.report.model,
                cv.report.recall_at_95.mean,
                cv.report.recall_at_95.sd,
                cv.report.pr_auc.mean,
                cv.report.pr_auc.sd,
                cv.report.mae.mean,
                cv.report.mae.sd,
                cv.report.splits.len(),
                run.out.display()
            );
        }
        Command::Explain { claims, checkpoint, vocab, pcn, threshold, config, out } => {
            let run_config = load_run_config(config.as_ref())?;
            let threshold = threshold.unwrap_or(run_config.explain_threshold);
            let records = load_claims(&claims)?;
            let vocab: Vocabulary = serde_json::from_str(&read_to_string(&vocab)?)
                .map_err(|e| json_err(&vocab, e))?;
            let checkpoint = Checkpoint::load(&checkpoint)?;
            checkpoint.verify_vocab(&vocab)?;

            let claim = match &pcn {
                Some(id) => records
                    .iter()
                    .find(|c| &c.patient_control_number == id)
                    .ok_or_else(|| CliError::ClaimNotFound(id.clone()))?,
                None => records.first().ok_or(CliError::NoClaims)?,
            };
            let x = vectorize(claim, &vocab);
            let report =
                suspiciousness(&checkpoint.params, &checkpoint.config, &vocab, &x, threshold)?;
            write_file(&out, "saliency.csv", &saliency_csv(&report))?;
            let json = serde_json::to_string_pretty(&report).expect("report serializes");
            write_file(&out, "saliency.json", &json)?;
            println!(
                "claim {}: p_denial {:.4}, {} flagged field(s) at threshold {}",
                claim.patient_control_number,
                report.p_denial,
                report.flagged.len(),
                threshold
            );
            for field in top_k(&report, 5) {
                println!("  {:<28} {:>8.4}  ({})", field.field_name, field.score, field.category.tag());
            }
        }
        Command::Bench { corpus, run, k_splits } => {
            let mut config = load_run_config(run.config.as_ref())?;
            if let Some(seed) = run.seed {
                config.set_seed(seed);
            }
            if let Some(k) = k_splits {
                config.k_splits = k;
            }
            let (outcome, _) = load_corpus(&corpus)?;
            let mut reports = Vec::new();
            for variant in Variant::ALL {
                let cv = run_cv(
                    &outcome.labeled,
                    variant,
                    &config.model,
                    &config.train,
                    config.thresholds,
                    config.k_splits,
                )?;
                println!(
                    "{:<16} recall@95 {:.4} ± {:.4}  pr_auc {:.4} ± {:.4}  mae {:.4} ± {:.4}",
                    cv.report.model,
                    cv.report.recall_at_95.mean,
                    cv.report.recall_at_95.sd,
                    cv.report.pr_auc.mean,
                    cv.report.pr_auc.sd,
                    cv.report.mae.mean,
                    cv.report.mae.sd,
                );
                reports.push(cv.report);
            }
            write_file(&run.out, "metrics.csv", &metrics_csv(&reports))?;
            let json = serde_json::to_string_pretty(&reports).expect("reports serialize");
            write_file(&run.out, "metrics.json", &json)?;
            println!("wrote {}", run.out.join("metrics.csv").display());
        }
    }
    Ok(())
}
