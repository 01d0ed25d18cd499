//! Orchestration of the full loop: folds, per-fold vocabularies,
//! training, scoring, and report assembly.
//!
//! Each cross-validation split builds its vocabulary from its own
//! training fold only, so no test-fold token frequencies leak into
//! featurization. Splits are independent and run in parallel when the
//! `parallel` feature is enabled; every split derives its seeds from the
//! base seeds plus its split number, so results do not depend on
//! execution order.

use thiserror::Error;

use crate::diffkit::Mode;
use crate::eval::{
    average_baseline_mae, mae, pr_auc, pr_curve, recall_at_precision, time_series_splits, CVSplit,
    EvalError, MetricsReport, SplitMetrics,
};
use crate::explain::SuspiciousnessReport;
use crate::featurize::{build_vocab, vectorize, ClaimVector, FeaturizeError, Thresholds, Vocabulary};
use crate::ingest::LabeledClaim;
use crate::model::{
    extract_predictions, forward, init_network, Checkpoint, ModelConfig, ModelError,
    NetworkParams, Prediction, Variant,
};
use crate::train::{train, EpochLoss, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Featurize(#[from] FeaturizeError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("every submission date ties; no usable cross-validation split")]
    NoValidSplits,
    #[error("labeled claims disagree on code distribution widths")]
    MixedTargets,
}

const EVAL_BATCH: usize = 256;

/// Score claims in eval mode, batched. Row order matches input order.
pub fn score_all(
    params: &NetworkParams,
    config: &ModelConfig,
    vectors: &[ClaimVector],
) -> Result<Vec<Prediction>, ModelError> {
    let mut out = Vec::with_capacity(vectors.len());
    for chunk in vectors.chunks(EVAL_BATCH) {
        let refs: Vec<&ClaimVector> = chunk.iter().collect();
        let pass = forward(params, config, &refs, Mode::Eval)?;
        out.extend(extract_predictions(&pass));
    }
    Ok(out)
}

/// Everything one split produced, kept for downstream inspection.
#[derive(Debug)]
pub struct SplitDetail {
    pub split: CVSplit,
    pub vocab: Vocabulary,
    pub params: NetworkParams,
    pub config: ModelConfig,
    pub losses: Vec<EpochLoss>,
    pub metrics: SplitMetrics,
    /// MAE of the predict-the-train-mean day-count baseline on this fold.
    pub baseline_mae: f64,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub report: MetricsReport,
    pub details: Vec<SplitDetail>,
}

fn class_widths(labeled: &[LabeledClaim]) -> Result<[usize; 2], PipelineError> {
    let first = match labeled.first() {
        Some(l) => [l.target.y1.len(), l.target.y2.len()],
        None => return Ok([2, 2]),
    };
    for l in labeled {
        if [l.target.y1.len(), l.target.y2.len()] != first {
            return Err(PipelineError::MixedTargets);
        }
    }
    Ok(first)
}

fn run_split(
    labeled: &[LabeledClaim],
    split: &CVSplit,
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    thresholds: Thresholds,
    class_counts: [usize; 2],
) -> Result<SplitDetail, PipelineError> {
    let train_rows: Vec<&LabeledClaim> = split.train.iter().map(|&i| &labeled[i]).collect();
    let test_rows: Vec<&LabeledClaim> = split.test.iter().map(|&i| &labeled[i]).collect();

    let vocab = build_vocab(train_rows.iter().map(|l| &l.claim), thresholds)?;
    let dims = [vocab.procedure.dim(), vocab.diagnosis.dim(), vocab.other.dim()];

    let mut config = model_config.clone();
    config.class_counts = class_counts;
    config.seed = model_config.seed.wrapping_add(split.index as u64);
    variant.configure(&mut config);

    let mut tc = train_config.clone();
    tc.shuffle_seed = train_config.shuffle_seed.wrapping_add(split.index as u64);

    let data: Vec<(ClaimVector, crate::ingest::TargetVector)> = train_rows
        .iter()
        .map(|l| (vectorize(&l.claim, &vocab), l.target.clone()))
        .collect();
    let params = init_network(variant, &config, dims);
    let (params, losses) = train(&data, params, &config, &tc)?;

    let test_vectors: Vec<ClaimVector> =
        test_rows.iter().map(|l| vectorize(&l.claim, &vocab)).collect();
    let preds = score_all(&params, &config, &test_vectors)?;

    let scores: Vec<f64> = preds.iter().map(|p| p.p_denial).collect();
    let labels: Vec<bool> = test_rows.iter().map(|l| l.target.y0 == 1.0).collect();
    let curve = pr_curve(&scores, &labels)?;
    let recall_at_95 = recall_at_precision(&curve, 0.95);
    let auc = pr_auc(&curve)?;

    let days_pred: Vec<f64> = preds.iter().map(|p| p.response_days).collect();
    let days_true: Vec<f64> = test_rows.iter().map(|l| l.target.y3).collect();
    let days_train: Vec<f64> = train_rows.iter().map(|l| l.target.y3).collect();
    let model_mae = mae(&days_pred, &days_true)?;
    let baseline_mae = average_baseline_mae(&days_train, &days_true)?;

    let positives = labels.iter().filter(|&&l| l).count();
    let metrics = SplitMetrics {
        split: split.index,
        recall_at_95,
        pr_auc: auc,
        mae: model_mae,
        denial_base_rate: positives as f64 / labels.len() as f64,
        test_size: labels.len(),
    };
    Ok(SplitDetail { split: split.clone(), vocab, params, config, losses, metrics, baseline_mae })
}

/// Expanding-window cross-validation of one variant.
pub fn run_cv(
    labeled: &[LabeledClaim],
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    thresholds: Thresholds,
    k: usize,
) -> Result<CvOutcome, PipelineError> {
    let class_counts = class_widths(labeled)?;
    let dates: Vec<_> = labeled.iter().map(|l| l.claim.submission_date).collect();
    let splits = time_series_splits(&dates, k)?;
    if splits.is_empty() {
        return Err(PipelineError::NoValidSplits);
    }

    let run = |split: &CVSplit| {
        run_split(labeled, split, variant, model_config, train_config, thresholds, class_counts)
    };

    #[cfg(feature = "parallel")]
    let details: Vec<SplitDetail> = {
        use rayon::prelude::*;
        splits.par_iter().map(run).collect::<Result<_, _>>()?
    };
    #[cfg(not(feature = "parallel"))]
    let details: Vec<SplitDetail> = splits.iter().map(run).collect::<Result<_, _>>()?;

    let report =
        MetricsReport::from_splits(variant.name(), details.iter().map(|d| d.metrics.clone()).collect());
    Ok(CvOutcome { report, details })
}

/// A model trained on the whole corpus, ready to persist.
pub struct TrainedModel {
    pub vocab: Vocabulary,
    pub checkpoint: Checkpoint,
    pub losses: Vec<EpochLoss>,
}

/// Train one variant on every labeled claim (no held-out fold).
pub fn train_full(
    labeled: &[LabeledClaim],
    variant: Variant,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    thresholds: Thresholds,
) -> Result<TrainedModel, PipelineError> {
    let class_counts = class_widths(labeled)?;
    let vocab = build_vocab(labeled.iter().map(|l| &l.claim), thresholds)?;
    let dims = [vocab.procedure.dim(), vocab.diagnosis.dim(), vocab.other.dim()];

    let mut config = model_config.clone();
    config.class_counts = class_counts;
    variant.configure(&mut config);

    let data: Vec<(ClaimVector, crate::ingest::TargetVector)> = labeled
        .iter()
        .map(|l| (vectorize(&l.claim, &vocab), l.target.clone()))
        .collect();
    let params = init_network(variant, &config, dims);
    let (params, losses) = train(&data, params, &config, train_config)?;

    let checkpoint = Checkpoint {
        variant,
        config,
        params,
        input_dims: dims,
        vocab_hash: vocab.content_hash(),
    };
    Ok(TrainedModel { vocab, checkpoint, losses })
}

pub fn loss_trace_csv(losses: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,bce,cce_claim,cce_service,l1,total\n");
    for l in losses {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            l.epoch, l.bce, l.cce_claim, l.cce_service, l.l1, l.total
        ));
    }
    out
}

pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(MetricsReport::CSV_HEADER);
    out.push('\n');
    for report in reports {
        for row in report.csv_rows() {
            out.push_str(&row);
            out.push('\n');
        }
    }
    out
}

pub fn saliency_csv(report: &SuspiciousnessReport) -> String {
    let mut out = String::from(SuspiciousnessReport::CSV_HEADER);
    out.push('\n');
    for row in report.csv_rows() {
        out.push_str(&row);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{join_and_label, parse_claims, parse_remits, DenialCodeSet};
    use crate::synth::{generate, PlantedRule, RuleLevel, SynthConfig};

    fn planted_corpus(n: usize, seed: u64) -> Vec<LabeledClaim> {
        let config = SynthConfig {
            n_claims: n,
            seed,
            rules: vec![PlantedRule {
                name: "px01".into(),
                trigger_procedures: vec!["PX01".into()],
                trigger_diagnoses: vec![],
                trigger_payer: None,
                carc: "50".into(),
                level: RuleLevel::Claim,
                fire_probability: 1.0,
                inject_rate: 0.25,
            }],
            ..SynthConfig::default()
        };
        let out = generate(&config).unwrap();
        let claims = parse_claims(out.claims.as_bytes()).unwrap();
        let remits = parse_remits(out.remits.as_bytes()).unwrap();
        let denial = DenialCodeSet::parse(&out.denial_codes, "synthetic").unwrap();
        join_and_label(&claims, &remits, &denial).labeled
    }

    fn small_model() -> ModelConfig {
        ModelConfig { context_dim: 16, embed_dim: 12, seed: 3, ..ModelConfig::default() }
    }

    fn small_train(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 32, ..TrainConfig::default() }
    }

    fn small_thresholds() -> Thresholds {
        Thresholds { procedure: 3, diagnosis: 3, other: 1 }
    }

    #[test]
    fn cv_produces_one_row_per_split_with_finite_metrics() {
        let labeled = planted_corpus(240, 5);
        let outcome = run_cv(
            &labeled,
            Variant::DeepClaim2,
            &small_model(),
            &small_train(4),
            small_thresholds(),
            3,
        )
        .unwrap();

        assert_eq!(outcome.report.splits.len(), 3);
        assert_eq!(outcome.details.len(), 3);
        for (detail, expected_index) in outcome.details.iter().zip(1..) {
            assert_eq!(detail.split.index, expected_index);
            assert_eq!(detail.losses.len(), 4);
            let m = &detail.metrics;
            assert!(m.recall_at_95.is_finite() && (0.0..=1.0).contains(&m.recall_at_95));
            assert!(m.pr_auc.is_finite() && (0.0..=1.0).contains(&m.pr_auc));
            assert!(m.mae.is_finite() && m.mae >= 0.0);
            assert!(detail.baseline_mae > 0.0);
            assert!(m.test_size > 0);
        }
        assert!(outcome.report.pr_auc.sd >= 0.0);
    }

    #[test]
    fn per_split_vocabularies_come_from_their_train_folds() {
        let labeled = planted_corpus(240, 6);
        let outcome = run_cv(
            &labeled,
            Variant::BaselineNn,
            &small_model(),
            &small_train(1),
            small_thresholds(),
            3,
        )
        .unwrap();

        for detail in &outcome.details {
            let train_rows: Vec<&LabeledClaim> =
                detail.split.train.iter().map(|&i| &labeled[i]).collect();
            let rebuilt =
                build_vocab(train_rows.iter().map(|l| &l.claim), small_thresholds()).unwrap();
            assert_eq!(rebuilt.content_hash(), detail.vocab.content_hash());
        }
        let hashes: Vec<u64> = outcome.details.iter().map(|d| d.vocab.content_hash()).collect();
        assert!(hashes.windows(2).any(|w| w[0] != w[1]), "folds should grow the vocabulary");
    }

    #[test]
    fn cv_is_deterministic() {
        let labeled = planted_corpus(120, 7);
        let run = || {
            run_cv(
                &labeled,
                Variant::NoGates,
                &small_model(),
                &small_train(2),
                small_thresholds(),
                2,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.report, b.report);
        for (x, y) in a.details.iter().zip(&b.details) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.losses, y.losses);
        }
    }

    #[test]
    fn mixed_code_widths_are_rejected() {
        let mut labeled = planted_corpus(40, 8);
        labeled[0].target.y1.push(0.0);
        let err = run_cv(
            &labeled,
            Variant::BaselineNn,
            &small_model(),
            &small_train(1),
            small_thresholds(),
            2,
        )
        .unwrap_err();
        assert!(matches!(err, PipelineError::MixedTargets));
    }

    #[test]
    fn score_all_matches_per_claim_forwards() {
        let labeled = planted_corpus(40, 9);
        let trained = train_full(
            &labeled,
            Variant::BaselineNn,
            &small_model(),
            &small_train(1),
            small_thresholds(),
        )
        .unwrap();
        let vectors: Vec<ClaimVector> =
            labeled.iter().map(|l| vectorize(&l.claim, &trained.vocab)).collect();

        let batched =
            score_all(&trained.checkpoint.params, &trained.checkpoint.config, &vectors).unwrap();
        for (v, expect) in vectors.iter().zip(&batched) {
            let single =
                score_all(&trained.checkpoint.params, &trained.checkpoint.config, &[v.clone()])
                    .unwrap();
            assert_eq!(&single[0], expect);
        }
    }

    #[test]
    fn train_full_checkpoint_carries_the_vocab_hash() {
        let labeled = planted_corpus(60, 10);
        let trained = train_full(
            &labeled,
            Variant::DeepClaim2,
            &small_model(),
            &small_train(2),
            small_thresholds(),
        )
        .unwrap();
        assert_eq!(trained.checkpoint.vocab_hash, trained.vocab.content_hash());
        assert_eq!(trained.losses.len(), 2);
        assert!(trained.checkpoint.verify_vocab(&trained.vocab).is_ok());
    }

    #[test]
    fn csv_writers_emit_stable_shapes() {
        let losses = vec![
            EpochLoss { epoch: 0, bce: 0.7, cce_claim: 1.1, cce_service: 1.0, l1: 4.0, total: 2.8 },
            EpochLoss { epoch: 1, bce: 0.5, cce_claim: 0.9, cce_service: 0.8, l1: 3.0, total: 2.2 },
        ];
        let trace = loss_trace_csv(&losses);
        let lines: Vec<&str> = trace.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "epoch,bce,cce_claim,cce_service,l1,total");
        assert_eq!(lines[1], "0,0.7,1.1,1,4,2.8");

        let report = MetricsReport::from_splits(
            "deepclaim1",
            vec![SplitMetrics {
                split: 1,
                recall_at_95: 0.5,
                pr_auc: 0.75,
                mae: 2.0,
                denial_base_rate: 0.2,
                test_size: 10,
            }],
        );
        let csv = metrics_csv(&[report]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "model,split,recall95,pr_auc,mae");
        assert_eq!(lines[1], "deepclaim1,1,0.5,0.75,2");
    }
}
