//! Token vocabularies with OOV folding and sparse claim vectorization.
//!
//! Each claim becomes x = (x_c, x_d, x_o): procedure and diagnosis bags as
//! relative-frequency vectors, and every remaining field as a binary
//! key=value token. Tokens seen fewer times than a category's minimum count
//! fold into that category's out-of-vocabulary slot, which occupies the last
//! index of each segment.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ingest::ClaimRecord;

#[derive(Debug, Error)]
pub enum FeaturizeError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("minimum count threshold must be at least 1")]
    ZeroThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    Procedure,
    Diagnosis,
    Other,
}

impl Category {
    /// Short tag used in report output.
    pub fn tag(self) -> &'static str {
        match self {
            Category::Procedure => "c",
            Category::Diagnosis => "d",
            Category::Other => "o",
        }
    }
}

/// Minimum corpus counts per category; tokens with count < threshold fold to
/// OOV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub procedure: usize,
    pub diagnosis: usize,
    pub other: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { procedure: 500, diagnosis: 400, other: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl CategoryVocab {
    fn from_counts(counts: &BTreeMap<String, usize>, min_count: usize) -> Self {
        let tokens: Vec<String> = counts
            .iter()
            .filter(|(_, &c)| c >= min_count)
            .map(|(t, _)| t.clone())
            .collect();
        Self::from_tokens(tokens, min_count)
    }

    fn from_tokens(mut tokens: Vec<String>, min_count: usize) -> Self {
        tokens.sort();
        tokens.dedup();
        let index = tokens.iter().cloned().zip(0..).collect();
        Self { tokens, index, min_count }
    }

    /// Vector dimension including the OOV slot.
    pub fn dim(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn oov_index(&self) -> usize {
        self.tokens.len()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    /// Index for a token, folding unknowns to OOV.
    pub fn resolve(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or_else(|| self.oov_index())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Frozen token→index maps for the three input categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    pub procedure: CategoryVocab,
    pub diagnosis: CategoryVocab,
    pub other: CategoryVocab,
    frozen: bool,
}

/// JSON wire form: per category, the ordered kept-token list plus threshold.
#[derive(Debug, Serialize, Deserialize)]
struct VocabularyFile {
    procedure: CategoryFile,
    diagnosis: CategoryFile,
    other: CategoryFile,
}

#[derive(Debug, Serialize, Deserialize)]
struct CategoryFile {
    tokens: Vec<String>,
    min_count: usize,
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        let cat = |c: &CategoryVocab| CategoryFile {
            tokens: c.tokens.clone(),
            min_count: c.min_count,
        };
        Self { procedure: cat(&v.procedure), diagnosis: cat(&v.diagnosis), other: cat(&v.other) }
    }
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = FeaturizeError;

    fn try_from(f: VocabularyFile) -> Result<Self, FeaturizeError> {
        let cat = |c: CategoryFile| {
            if c.min_count == 0 {
                return Err(FeaturizeError::ZeroThreshold);
            }
            Ok(CategoryVocab::from_tokens(c.tokens, c.min_count))
        };
        Ok(Self {
            procedure: cat(f.procedure)?,
            diagnosis: cat(f.diagnosis)?,
            other: cat(f.other)?,
            frozen: true,
        })
    }
}

impl Vocabulary {
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn category(&self, c: Category) -> &CategoryVocab {
        match c {
            Category::Procedure => &self.procedure,
            Category::Diagnosis => &self.diagnosis,
            Category::Other => &self.other,
        }
    }

    /// Total concatenated input dimension.
    pub fn total_dim(&self) -> usize {
        self.procedure.dim() + self.diagnosis.dim() + self.other.dim()
    }

    /// Map a concatenated index back to (category, name) for reports. OOV
    /// slots report as `<oov>` within their category.
    pub fn field_name(&self, concat_index: usize) -> (Category, String) {
        let pc = self.procedure.dim();
        let dc = self.diagnosis.dim();
        if concat_index < pc {
            (Category::Procedure, self.segment_name(&self.procedure, concat_index, "proc"))
        } else if concat_index < pc + dc {
            (Category::Diagnosis, self.segment_name(&self.diagnosis, concat_index - pc, "diag"))
        } else {
            (Category::Other, self.segment_name(&self.other, concat_index - pc - dc, "other"))
        }
    }

    fn segment_name(&self, cat: &CategoryVocab, i: usize, prefix: &str) -> String {
        if i == cat.oov_index() {
            format!("{prefix}:<oov>")
        } else {
            format!("{prefix}:{}", cat.tokens[i])
        }
    }

    /// Stable content hash (FNV-1a over the serialized form) used to pair
    /// checkpoints with the vocabulary they were trained against.
    pub fn content_hash(&self) -> u64 {
        let file = VocabularyFile::from(self.clone());
        let bytes = serde_json::to_vec(&file).expect("vocabulary serialization cannot fail");
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        for b in bytes {
            hash ^= b as u64;
            hash = hash.wrapping_mul(PRIME);
        }
        hash
    }
}

/// Decompose a dollar amount into thousand/hundred/ten/one digit tokens.
/// Thousands keep their full value; rare ones fold to OOV downstream.
pub fn quantize_charge(amount_cents: u64) -> [String; 4] {
    let d = amount_cents / 100;
    [
        format!("chg_th={}", d / 1000),
        format!("chg_hu={}", d / 100 % 10),
        format!("chg_te={}", d / 10 % 10),
        format!("chg_on={}", d % 10),
    ]
}

/// Single-token features for everything outside the procedure and diagnosis
/// bags, ordered by field name.
pub fn tokenize_other(claim: &ClaimRecord) -> Vec<String> {
    let duration = (claim.service_end_date - claim.service_start_date).num_days();
    let svc = claim.service_start_date;
    let sub = claim.submission_date;
    let mut tokens = vec![
        format!("gender={}", claim.subscriber_gender),
        format!("patient_age={}", claim.patient_age),
        format!("payer={}", claim.payer_id),
        format!("payer_state={}", claim.payer_state),
        format!("rel={}", claim.relationship_code),
        format!("sub_d={:02}", chrono::Datelike::day(&sub)),
        format!("sub_m={:02}", chrono::Datelike::month(&sub)),
        format!("sub_y={}", chrono::Datelike::year(&sub)),
        format!("subscriber_age={}", claim.subscriber_age),
        format!("svc_d={:02}", chrono::Datelike::day(&svc)),
        format!("svc_dur_days={duration}"),
        format!("svc_m={:02}", chrono::Datelike::month(&svc)),
        format!("svc_y={}", chrono::Datelike::year(&svc)),
    ];
    tokens.extend(quantize_charge(claim.total_charge));
    tokens.sort();
    tokens
}

/// Two-pass vocabulary construction: count every token occurrence, keep
/// tokens at or above the category threshold, freeze.
pub fn build_vocab<'a>(
    claims: impl IntoIterator<Item = &'a ClaimRecord>,
    thresholds: Thresholds,
) -> Result<Vocabulary, FeaturizeError> {
    if thresholds.procedure == 0 || thresholds.diagnosis == 0 || thresholds.other == 0 {
        return Err(FeaturizeError::ZeroThreshold);
    }
    let mut seen = 0usize;
    let mut proc_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut diag_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut other_counts: BTreeMap<String, usize> = BTreeMap::new();
    for claim in claims {
        seen += 1;
        for p in &claim.procedures {
            *proc_counts.entry(p.clone()).or_default() += 1;
        }
        for d in &claim.diagnoses {
            *diag_counts.entry(d.clone()).or_default() += 1;
        }
        for t in tokenize_other(claim) {
            *other_counts.entry(t).or_default() += 1;
        }
    }
    if seen == 0 {
        return Err(FeaturizeError::EmptyCorpus);
    }
    Ok(Vocabulary {
        procedure: CategoryVocab::from_counts(&proc_counts, thresholds.procedure),
        diagnosis: CategoryVocab::from_counts(&diag_counts, thresholds.diagnosis),
        other: CategoryVocab::from_counts(&other_counts, thresholds.other),
        frozen: true,
    })
}

/// Sparse vector: sorted (index, value) pairs over a fixed dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseVec {
    pub dim: usize,
    pub entries: Vec<(usize, f64)>,
}

impl SparseVec {
    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn sum(&self) -> f64 {
        self.entries.iter().map(|(_, v)| v).sum()
    }
}

/// The model input x = (x_c, x_d, x_o) in sparse form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimVector {
    pub x_c: SparseVec,
    pub x_d: SparseVec,
    pub x_o: SparseVec,
}

impl ClaimVector {
    pub fn total_dim(&self) -> usize {
        self.x_c.dim + self.x_d.dim + self.x_o.dim
    }

    pub fn nnz(&self) -> usize {
        self.x_c.nnz() + self.x_d.nnz() + self.x_o.nnz()
    }

    /// Nonzero indices in the concatenated (x_c, x_d, x_o) layout.
    pub fn concat_pattern(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.nnz());
        out.extend(self.x_c.entries.iter().map(|(i, _)| *i));
        out.extend(self.x_d.entries.iter().map(|(i, _)| i + self.x_c.dim));
        out.extend(self.x_o.entries.iter().map(|(i, _)| i + self.x_c.dim + self.x_d.dim));
        out
    }

    /// Dense materialization of the concatenated vector.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.total_dim()];
        for (i, v) in &self.x_c.entries {
            out[*i] = *v;
        }
        for (i, v) in &self.x_d.entries {
            out[i + self.x_c.dim] = *v;
        }
        for (i, v) in &self.x_o.entries {
            out[i + self.x_c.dim + self.x_d.dim] = *v;
        }
        out
    }
}

fn bag_to_sparse(tokens: &[String], vocab: &CategoryVocab) -> SparseVec {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for t in tokens {
        *counts.entry(vocab.resolve(t)).or_default() += 1;
    }
    let total: usize = counts.values().sum();
    let entries = counts
        .into_iter()
        .map(|(i, c)| (i, c as f64 / total.max(1) as f64))
        .collect();
    SparseVec { dim: vocab.dim(), entries }
}

/// Map one claim to its sparse input under a frozen vocabulary. Total for
/// any claim: unknown tokens fold to the category OOV slot.
pub fn vectorize(claim: &ClaimRecord, vocab: &Vocabulary) -> ClaimVector {
    debug_assert!(vocab.is_frozen());
    let x_c = bag_to_sparse(&claim.procedures, &vocab.procedure);
    let x_d = bag_to_sparse(&claim.diagnoses, &vocab.diagnosis);
    let mut other_indices: Vec<usize> = tokenize_other(claim)
        .iter()
        .map(|t| vocab.other.resolve(t))
        .collect();
    other_indices.sort_unstable();
    other_indices.dedup();
    let x_o = SparseVec {
        dim: vocab.other.dim(),
        entries: other_indices.into_iter().map(|i| (i, 1.0)).collect(),
    };
    ClaimVector { x_c, x_d, x_o }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::parse_claims;
    use proptest::prelude::*;

    fn sample_claim() -> ClaimRecord {
        let line = concat!(
            "{\"pcn\":\"c1\",\"payer_id\":\"P1\",\"payer_state\":\"WA\",",
            "\"subscriber_gender\":\"F\",\"relationship_code\":\"18\",",
            "\"subscriber_age\":40,\"patient_age\":34,",
            "\"service_start\":\"2019-06-01\",\"service_end\":\"2019-06-04\",",
            "\"submitted\":\"2019-06-03\",\"total_charge_cents\":123456,",
            "\"procedures\":[\"A\",\"A\",\"B\"],\"diagnoses\":[\"J20\"]}"
        );
        parse_claims(line.as_bytes()).unwrap().remove(0)
    }

    #[test]
    fn other_tokens_cover_every_field() {
        let tokens = tokenize_other(&sample_claim());
        for expected in [
            "patient_age=34",
            "sub_y=2019",
            "sub_m=06",
            "sub_d=03",
            "svc_dur_days=3",
            "gender=F",
            "rel=18",
            "payer=P1",
            "payer_state=WA",
            "subscriber_age=40",
            "svc_y=2019",
            "svc_m=06",
            "svc_d=01",
        ] {
            assert!(tokens.iter().any(|t| t == expected), "missing {expected} in {tokens:?}");
        }
        let mut sorted = tokens.clone();
        sorted.sort();
        assert_eq!(tokens, sorted, "tokens must come out ordered by field name");
    }

    #[test]
    fn charge_quantization_decomposes_dollar_digits() {
        // $1,234.56
        assert_eq!(
            quantize_charge(123_456),
            ["chg_th=1", "chg_hu=2", "chg_te=3", "chg_on=4"].map(String::from)
        );
        assert_eq!(
            quantize_charge(0),
            ["chg_th=0", "chg_hu=0", "chg_te=0", "chg_on=0"].map(String::from)
        );
        // $12,505
        assert_eq!(
            quantize_charge(1_250_500),
            ["chg_th=12", "chg_hu=5", "chg_te=0", "chg_on=5"].map(String::from)
        );
    }

    #[test]
    fn threshold_is_strict_less_than_for_folding() {
        let mut claim = sample_claim();
        claim.procedures = Vec::new();
        claim.procedures.extend(std::iter::repeat_n("A".to_string(), 499));
        claim.procedures.extend(std::iter::repeat_n("B".to_string(), 500));
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 500, diagnosis: 1, other: 1 },
        )
        .unwrap();
        assert_eq!(vocab.procedure.tokens(), ["B".to_string()]);
        assert_eq!(vocab.procedure.resolve("A"), vocab.procedure.oov_index());
        assert_eq!(vocab.procedure.resolve("B"), 0);
    }

    #[test]
    fn threshold_one_keeps_every_token() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        assert_eq!(vocab.procedure.tokens(), ["A".to_string(), "B".to_string()]);
        let x = vectorize(&claim, &vocab);
        // OOV slots exist but stay unused.
        assert!(x.x_c.entries.iter().all(|(i, _)| *i != vocab.procedure.oov_index()));
        assert!(x.x_o.entries.iter().all(|(i, _)| *i != vocab.other.oov_index()));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(build_vocab(&[], Thresholds::default()), Err(FeaturizeError::EmptyCorpus)));
    }

    #[test]
    fn procedures_become_relative_frequencies() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let x = vectorize(&claim, &vocab);
        assert_eq!(x.x_c.entries, vec![(0, 2.0 / 3.0), (1, 1.0 / 3.0)]);
        assert!((x.x_c.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_diagnosis_bag_is_all_zero() {
        let mut claim = sample_claim();
        claim.diagnoses.clear();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let x = vectorize(&claim, &vocab);
        assert!(x.x_d.entries.is_empty());
        assert_eq!(x.x_d.sum(), 0.0);
    }

    #[test]
    fn unseen_other_token_folds_to_oov() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let mut moved = claim.clone();
        moved.payer_state = "ZZ".into();
        let x = vectorize(&moved, &vocab);
        let oov = vocab.other.oov_index();
        assert!(x.x_o.entries.iter().any(|(i, v)| *i == oov && *v == 1.0));
    }

    #[test]
    fn procedure_order_does_not_matter() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let mut swapped = claim.clone();
        swapped.procedures = vec!["B".into(), "A".into(), "A".into()];
        assert_eq!(vectorize(&claim, &vocab), vectorize(&swapped, &vocab));
    }

    #[test]
    fn dense_and_sparse_views_agree() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let x = vectorize(&claim, &vocab);
        let dense = x.to_dense();
        assert_eq!(dense.len(), vocab.total_dim());
        let pattern = x.concat_pattern();
        assert_eq!(pattern.len(), x.nnz());
        for (pos, &v) in dense.iter().enumerate() {
            if v != 0.0 {
                assert!(pattern.contains(&pos));
            }
        }
        assert!(x.nnz() <= claim.procedures.len() + claim.diagnoses.len() + 17);
    }

    #[test]
    fn field_names_track_segments() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let (cat, name) = vocab.field_name(0);
        assert_eq!(cat, Category::Procedure);
        assert_eq!(name, "proc:A");
        let (cat, name) = vocab.field_name(vocab.procedure.dim());
        assert_eq!(cat, Category::Diagnosis);
        assert_eq!(name, "diag:J20");
        let (cat, name) = vocab.field_name(vocab.procedure.dim() + vocab.diagnosis.dim());
        assert_eq!(cat, Category::Other);
        assert!(name.starts_with("other:"));
        let (_, oov) = vocab.field_name(vocab.procedure.oov_index());
        assert_eq!(oov, "proc:<oov>");
    }

    #[test]
    fn vocabulary_round_trips_through_json() {
        let claim = sample_claim();
        let vocab = build_vocab(
            std::slice::from_ref(&claim),
            Thresholds { procedure: 1, diagnosis: 1, other: 1 },
        )
        .unwrap();
        let json = serde_json::to_string(&vocab).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(vocab, back);
        assert_eq!(vocab.content_hash(), back.content_hash());
        assert!(back.is_frozen());
    }

    proptest! {
        #[test]
        fn vectorize_is_total_and_normalized(
            procs in proptest::collection::vec("[A-E]", 0..10),
            diags in proptest::collection::vec("[J-M][0-9]", 0..6),
        ) {
            let mut claim = sample_claim();
            claim.procedures = procs;
            claim.diagnoses = diags;
            let base = sample_claim();
            let vocab = build_vocab(
                &[base],
                Thresholds { procedure: 1, diagnosis: 1, other: 1 },
            )
            .unwrap();
            let x = vectorize(&claim, &vocab);
            let sc = x.x_c.sum();
            let sd = x.x_d.sum();
            prop_assert!(sc == 0.0 || (sc - 1.0).abs() < 1e-9);
            prop_assert!(sd == 0.0 || (sd - 1.0).abs() < 1e-9);
            prop_assert!(x.x_o.entries.iter().all(|(_, v)| *v == 1.0));
            prop_assert_eq!(x.total_dim(), vocab.total_dim());
        }
    }
}
