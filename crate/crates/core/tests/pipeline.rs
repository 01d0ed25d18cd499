//! End-to-end runs of the compiled binary: every subcommand in sequence on
//! one small corpus, plus the failure modes a caller actually hits.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use deepclaim::explain::SuspiciousnessReport;
use deepclaim::eval::MetricsReport;
use deepclaim::featurize::Vocabulary;
use deepclaim::ingest::parse_claims;
use deepclaim::model::{Checkpoint, Variant};

fn exe() -> &'static str {
    env!("CARGO_BIN_EXE_deepclaim")
}

fn run(args: &[&str]) -> Output {
    Command::new(exe()).args(args).output().expect("spawn deepclaim")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "deepclaim {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("read {}: {e}", path.display()))
}

struct Corpus {
    claims: PathBuf,
    remits: PathBuf,
    codes: PathBuf,
}

/// Synth a small rule-bearing corpus into `dir` and return the file paths.
fn synth_corpus(dir: &Path, seed: u64) -> Corpus {
    std::fs::create_dir_all(dir).unwrap();
    let config = dir.join("synth.json");
    std::fs::write(
        &config,
        r#"{
            "n_claims": 600,
            "seed": SEED,
            "rules": [
                {"name": "prior-auth", "trigger_procedures": ["PX01"], "carc": "50",
                 "level": "claim", "fire_probability": 1.0, "inject_rate": 0.1},
                {"name": "bundled", "trigger_procedures": ["PX02"], "carc": "197",
                 "level": "service", "fire_probability": 1.0, "inject_rate": 0.1}
            ]
        }"#
        .replace("SEED", &seed.to_string()),
    )
    .unwrap();
    let out = dir.join("corpus");
    run_ok(&["synth", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    Corpus {
        claims: out.join("claims.jsonl"),
        remits: out.join("remits.jsonl"),
        codes: out.join("denial_codes.txt"),
    }
}

fn write_run_config(dir: &Path) -> PathBuf {
    let path = dir.join("run.conf");
    std::fs::write(
        &path,
        "# small end-to-end run\n\
         epochs = 4\n\
         batch_size = 64\n\
         context_dim = 16\n\
         embed_dim = 12\n\
         procedure_min_count = 3\n\
         diagnosis_min_count = 3\n\
         other_min_count = 3\n\
         k_splits = 2\n\
         seed = 5\n",
    )
    .unwrap();
    path
}

#[test]
fn every_subcommand_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 3);
    let run_cfg = write_run_config(dir.path());
    let corpus_args = |cmd: &str| {
        vec![
            cmd.to_string(),
            "--claims".into(),
            corpus.claims.to_str().unwrap().to_string(),
            "--remits".into(),
            corpus.remits.to_str().unwrap().to_string(),
            "--denial-set".into(),
            corpus.codes.to_str().unwrap().to_string(),
        ]
    };

    // label
    let label_out = dir.path().join("labels");
    let mut args = corpus_args("label");
    args.extend(["--out".into(), label_out.to_str().unwrap().to_string()]);
    let stdout = run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(stdout.contains("labeled 600 claims"), "stdout: {stdout}");
    let labels = read(&label_out.join("labels.jsonl"));
    assert_eq!(labels.lines().count(), 600);
    for line in labels.lines().take(5) {
        let v: serde_json::Value = serde_json::from_str(line).expect("labels are JSONL");
        for key in ["pcn", "y0", "y1", "y2", "y3", "remit_date"] {
            assert!(v.get(key).is_some(), "label line missing {key}: {line}");
        }
    }

    // featurize
    let feat_out = dir.path().join("features");
    run_ok(&[
        "featurize",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--config",
        run_cfg.to_str().unwrap(),
        "--out",
        feat_out.to_str().unwrap(),
    ]);
    let vocab: Vocabulary = serde_json::from_str(&read(&feat_out.join("vocab.json"))).unwrap();
    assert!(vocab.total_dim() > 10);

    // train
    let train_out = dir.path().join("model");
    let mut args = corpus_args("train");
    args.extend([
        "--config".into(),
        run_cfg.to_str().unwrap().to_string(),
        "--variant".into(),
        "deepclaim2".into(),
        "--out".into(),
        train_out.to_str().unwrap().to_string(),
    ]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    let checkpoint = Checkpoint::load(&train_out.join("checkpoint.json")).expect("checkpoint");
    assert_eq!(checkpoint.variant, Variant::DeepClaim2);
    let train_vocab: Vocabulary =
        serde_json::from_str(&read(&train_out.join("vocab.json"))).unwrap();
    assert!(checkpoint.verify_vocab(&train_vocab).is_ok());
    // The standalone featurize pass and the train pass froze the same corpus
    // with the same thresholds, so the files must agree byte for byte.
    assert_eq!(read(&feat_out.join("vocab.json")), read(&train_out.join("vocab.json")));

    let trace = read(&train_out.join("loss_trace.csv"));
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("epoch,bce,cce_claim,cce_service,l1,total"));
    let totals: Vec<f64> = lines
        .map(|l| l.rsplit(',').next().unwrap().parse().expect("numeric total"))
        .collect();
    assert_eq!(totals.len(), 4);
    assert!(
        totals.last().unwrap() < &(totals[0] * 0.98),
        "four epochs must visibly cut the loss: {totals:?}"
    );
    assert!(totals.windows(2).all(|w| w[1] <= w[0]), "loss rose mid-run: {totals:?}");

    // evaluate
    let eval_out = dir.path().join("eval");
    let mut args = corpus_args("evaluate");
    args.extend([
        "--config".into(),
        run_cfg.to_str().unwrap().to_string(),
        "--variant".into(),
        "deepclaim2".into(),
        "--out".into(),
        eval_out.to_str().unwrap().to_string(),
    ]);
    run_ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let report: MetricsReport =
        serde_json::from_str(&read(&eval_out.join("metrics.json"))).unwrap();
    assert_eq!(report.model, "deepclaim2");
    assert_eq!(report.splits.len(), 2);
    let csv = read(&eval_out.join("metrics.csv"));
    assert!(csv.starts_with("model,split,recall95,pr_auc,mae\n"));

    // explain, pinned to a claim that exists in the corpus
    let claims = parse_claims(read(&corpus.claims).as_bytes()).unwrap();
    let pcn = &claims[7].patient_control_number;
    let explain_out = dir.path().join("explain");
    run_ok(&[
        "explain",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.json").to_str().unwrap(),
        "--vocab",
        train_out.join("vocab.json").to_str().unwrap(),
        "--pcn",
        pcn,
        "--config",
        run_cfg.to_str().unwrap(),
        "--out",
        explain_out.to_str().unwrap(),
    ]);
    let saliency: SuspiciousnessReport =
        serde_json::from_str(&read(&explain_out.join("saliency.json"))).unwrap();
    assert!(saliency.p_denial >= 0.0 && saliency.p_denial <= 1.0);
    assert_eq!(saliency.fields.len(), train_vocab.total_dim());
    let csv = read(&explain_out.join("saliency.csv"));
    assert_eq!(csv.lines().next(), Some("index,field_name,category,score"));
    assert_eq!(csv.lines().count(), train_vocab.total_dim() + 1);
}

#[test]
fn synth_runs_are_byte_identical_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth_corpus(&dir.path().join("a"), 12);
    let b = synth_corpus(&dir.path().join("b"), 12);
    let c = synth_corpus(&dir.path().join("c"), 13);
    for name in ["claims.jsonl", "remits.jsonl", "truth.jsonl", "denial_codes.txt"] {
        let left = read(&a.claims.parent().unwrap().join(name));
        let right = read(&b.claims.parent().unwrap().join(name));
        assert_eq!(left, right, "{name} differs between identical seeds");
    }
    assert_ne!(
        read(&a.claims),
        read(&c.claims),
        "different seeds must produce different corpora"
    );
}

#[test]
fn bench_table_covers_all_variants() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 8);
    let run_cfg = write_run_config(dir.path());
    let out_dir = dir.path().join("bench");
    run_ok(&[
        "bench",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--remits",
        corpus.remits.to_str().unwrap(),
        "--denial-set",
        corpus.codes.to_str().unwrap(),
        "--config",
        run_cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    let csv = read(&out_dir.join("metrics.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("model,split,recall95,pr_auc,mae"));
    // 5 variants x (2 splits + mean + sd)
    assert_eq!(lines.count(), 20);
    for variant in Variant::ALL {
        assert!(csv.contains(variant.name()), "{} missing from table", variant.name());
    }
    let reports: Vec<MetricsReport> =
        serde_json::from_str(&read(&out_dir.join("metrics.json"))).unwrap();
    assert_eq!(reports.len(), 5);
}

#[test]
fn missing_input_file_fails_with_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let ghost = dir.path().join("nope.jsonl");
    let out = run(&[
        "label",
        "--claims",
        ghost.to_str().unwrap(),
        "--remits",
        ghost.to_str().unwrap(),
        "--denial-set",
        ghost.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("nope.jsonl"), "stderr: {stderr}");
}

#[test]
fn unknown_config_key_is_rejected_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 4);
    let bad_cfg = dir.path().join("bad.conf");
    std::fs::write(&bad_cfg, "epochs = 2\nlerning_rate = 0.1\n").unwrap();
    let out = run(&[
        "evaluate",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--remits",
        corpus.remits.to_str().unwrap(),
        "--denial-set",
        corpus.codes.to_str().unwrap(),
        "--config",
        bad_cfg.to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("lerning_rate") && stderr.contains(":2"),
        "stderr: {stderr}"
    );
}

#[test]
fn explain_rejects_a_vocab_from_another_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = synth_corpus(dir.path(), 6);
    let run_cfg = write_run_config(dir.path());

    let train_out = dir.path().join("model");
    run_ok(&[
        "train",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--remits",
        corpus.remits.to_str().unwrap(),
        "--denial-set",
        corpus.codes.to_str().unwrap(),
        "--config",
        run_cfg.to_str().unwrap(),
        "--variant",
        "baseline_nn",
        "--out",
        train_out.to_str().unwrap(),
    ]);

    // A vocabulary frozen with different thresholds has a different hash.
    let other_cfg = dir.path().join("other.conf");
    std::fs::write(&other_cfg, "procedure_min_count = 1\n").unwrap();
    let other_out = dir.path().join("other");
    run_ok(&[
        "featurize",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--config",
        other_cfg.to_str().unwrap(),
        "--out",
        other_out.to_str().unwrap(),
    ]);

    let out = run(&[
        "explain",
        "--claims",
        corpus.claims.to_str().unwrap(),
        "--checkpoint",
        train_out.join("checkpoint.json").to_str().unwrap(),
        "--vocab",
        other_out.join("vocab.json").to_str().unwrap(),
        "--out",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert!(!out.status.success(), "mismatched vocabulary must be refused");
    let stderr = String::from_utf8_lossy(&out.stderr).to_lowercase();
    assert!(stderr.contains("vocab"), "stderr: {stderr}");
}

#[test]
fn unknown_flags_exit_with_usage_error() {
    let out = run(&["synth", "--does-not-exist"]);
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit 2");
}
