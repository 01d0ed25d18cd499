//! Claim/remittance parsing, joining, and target derivation.
//!
//! Claims and remittances arrive as line-delimited JSON in a canonical
//! extracted schema (no raw X12). Records join on the patient control number;
//! the earliest remittance per claim defines the response. Targets:
//!
//! * `y0`: 1 iff any claim- or service-level CARC is in the denial set,
//! * `y1`/`y2`: relative frequency of in-set codes per level, with a
//!   trailing "no denial" class,
//! * `y3`: whole days from submission to remittance.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("line {line}: {source}")]
    Malformed {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: field \"{field}\": invalid date \"{value}\" (expected YYYY-MM-DD)")]
    BadDate { line: usize, field: &'static str, value: String },
    #[error("line {line}: field \"{field}\": {message}")]
    Invalid { line: usize, field: &'static str, message: String },
    #[error("denial code set is empty")]
    EmptyDenialSet,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClaimRecord {
    pub patient_control_number: String,
    pub payer_id: String,
    pub payer_state: String,
    pub subscriber_gender: String,
    pub relationship_code: String,
    pub subscriber_age: u32,
    pub patient_age: u32,
    pub service_start_date: NaiveDate,
    pub service_end_date: NaiveDate,
    pub submission_date: NaiveDate,
    pub total_charge: u64,
    pub procedures: Vec<String>,
    pub diagnoses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemittanceRecord {
    pub patient_control_number: String,
    pub remit_date: NaiveDate,
    pub claim_level_carcs: Vec<String>,
    pub service_level_carcs: Vec<String>,
}

/// Wire schema for one claims.jsonl line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawClaim {
    pcn: String,
    payer_id: String,
    payer_state: String,
    subscriber_gender: String,
    relationship_code: String,
    subscriber_age: u32,
    patient_age: u32,
    service_start: String,
    service_end: String,
    submitted: String,
    total_charge_cents: u64,
    procedures: Vec<String>,
    diagnoses: Vec<String>,
}

/// Wire schema for one remits.jsonl line.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRemit {
    pcn: String,
    remit_date: String,
    claim_carcs: Vec<String>,
    service_carcs: Vec<String>,
}

const DATE_FMT: &str = "%Y-%m-%d";

fn parse_date(line: usize, field: &'static str, value: &str) -> Result<NaiveDate, IngestError> {
    NaiveDate::parse_from_str(value, DATE_FMT)
        .map_err(|_| IngestError::BadDate { line, field, value: value.to_string() })
}

pub fn format_date(d: NaiveDate) -> String {
    d.format(DATE_FMT).to_string()
}

impl ClaimRecord {
    fn from_raw(raw: RawClaim, line: usize) -> Result<Self, IngestError> {
        if raw.pcn.is_empty() {
            return Err(IngestError::Invalid {
                line,
                field: "pcn",
                message: "patient control number must be non-empty".into(),
            });
        }
        let service_start = parse_date(line, "service_start", &raw.service_start)?;
        let service_end = parse_date(line, "service_end", &raw.service_end)?;
        let submitted = parse_date(line, "submitted", &raw.submitted)?;
        if service_end < service_start {
            return Err(IngestError::Invalid {
                line,
                field: "service_end",
                message: format!(
                    "service_end {} precedes service_start {}",
                    raw.service_end, raw.service_start
                ),
            });
        }
        if submitted < service_start {
            return Err(IngestError::Invalid {
                line,
                field: "submitted",
                message: format!(
                    "submitted {} precedes service_start {}",
                    raw.submitted, raw.service_start
                ),
            });
        }
        Ok(Self {
            patient_control_number: raw.pcn,
            payer_id: raw.payer_id,
            payer_state: raw.payer_state,
            subscriber_gender: raw.subscriber_gender,
            relationship_code: raw.relationship_code,
            subscriber_age: raw.subscriber_age,
            patient_age: raw.patient_age,
            service_start_date: service_start,
            service_end_date: service_end,
            submission_date: submitted,
            total_charge: raw.total_charge_cents,
            procedures: raw.procedures,
            diagnoses: raw.diagnoses,
        })
    }

    pub fn to_jsonl_line(&self) -> String {
        let raw = RawClaim {
            pcn: self.patient_control_number.clone(),
            payer_id: self.payer_id.clone(),
            payer_state: self.payer_state.clone(),
            subscriber_gender: self.subscriber_gender.clone(),
            relationship_code: self.relationship_code.clone(),
            subscriber_age: self.subscriber_age,
            patient_age: self.patient_age,
            service_start: format_date(self.service_start_date),
            service_end: format_date(self.service_end_date),
            submitted: format_date(self.submission_date),
            total_charge_cents: self.total_charge,
            procedures: self.procedures.clone(),
            diagnoses: self.diagnoses.clone(),
        };
        serde_json::to_string(&raw).expect("claim serialization cannot fail")
    }
}

impl RemittanceRecord {
    fn from_raw(raw: RawRemit, line: usize) -> Result<Self, IngestError> {
        if raw.pcn.is_empty() {
            return Err(IngestError::Invalid {
                line,
                field: "pcn",
                message: "patient control number must be non-empty".into(),
            });
        }
        let remit_date = parse_date(line, "remit_date", &raw.remit_date)?;
        Ok(Self {
            patient_control_number: raw.pcn,
            remit_date,
            claim_level_carcs: raw.claim_carcs,
            service_level_carcs: raw.service_carcs,
        })
    }

    pub fn to_jsonl_line(&self) -> String {
        let raw = RawRemit {
            pcn: self.patient_control_number.clone(),
            remit_date: format_date(self.remit_date),
            claim_carcs: self.claim_level_carcs.clone(),
            service_carcs: self.service_level_carcs.clone(),
        };
        serde_json::to_string(&raw).expect("remit serialization cannot fail")
    }
}

pub fn parse_claims(reader: impl BufRead) -> Result<Vec<ClaimRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawClaim = serde_json::from_str(&text)
            .map_err(|source| IngestError::Malformed { line: line_no, source })?;
        out.push(ClaimRecord::from_raw(raw, line_no)?);
    }
    Ok(out)
}

pub fn parse_remits(reader: impl BufRead) -> Result<Vec<RemittanceRecord>, IngestError> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let raw: RawRemit = serde_json::from_str(&text)
            .map_err(|source| IngestError::Malformed { line: line_no, source })?;
        out.push(RemittanceRecord::from_raw(raw, line_no)?);
    }
    Ok(out)
}

/// The configured set of CARC codes that constitute a denial.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenialCodeSet {
    codes: BTreeSet<String>,
    pub label: String,
}

impl DenialCodeSet {
    pub fn new(codes: impl IntoIterator<Item = String>, label: impl Into<String>) -> Result<Self, IngestError> {
        let codes: BTreeSet<String> = codes.into_iter().collect();
        if codes.is_empty() {
            return Err(IngestError::EmptyDenialSet);
        }
        Ok(Self { codes, label: label.into() })
    }

    /// One code per line; `#` starts a comment.
    pub fn parse(text: &str, label: impl Into<String>) -> Result<Self, IngestError> {
        let codes = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .map(String::from);
        Self::new(codes, label)
    }

    pub fn contains(&self, code: &str) -> bool {
        self.codes.contains(code)
    }

    /// Class order for y1/y2: codes sorted lexicographically, then the
    /// implicit no-denial class last.
    pub fn class_codes(&self) -> Vec<&str> {
        self.codes.iter().map(String::as_str).collect()
    }

    /// Number of reason classes including no-denial.
    pub fn class_count(&self) -> usize {
        self.codes.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetVector {
    pub y0: f64,
    pub y1: Vec<f64>,
    pub y2: Vec<f64>,
    pub y3: f64,
}

impl TargetVector {
    pub fn build(
        claim_carcs: &[String],
        service_carcs: &[String],
        denial_set: &DenialCodeSet,
        interval_days: i64,
    ) -> Self {
        debug_assert!(interval_days >= 0);
        let denied = claim_carcs.iter().chain(service_carcs).any(|c| denial_set.contains(c));
        Self {
            y0: if denied { 1.0 } else { 0.0 },
            y1: level_distribution(claim_carcs, denial_set),
            y2: level_distribution(service_carcs, denial_set),
            y3: interval_days as f64,
        }
    }
}

/// Relative frequencies of in-set codes over the class space, or a no-denial
/// one-hot when the level carries no in-set codes.
fn level_distribution(carcs: &[String], denial_set: &DenialCodeSet) -> Vec<f64> {
    let classes = denial_set.class_codes();
    let mut counts = vec![0usize; classes.len() + 1];
    let mut total = 0usize;
    for code in carcs {
        if let Ok(pos) = classes.binary_search(&code.as_str()) {
            counts[pos] += 1;
            total += 1;
        }
    }
    let mut dist = vec![0.0; classes.len() + 1];
    if total == 0 {
        *dist.last_mut().expect("class space includes no-denial") = 1.0;
    } else {
        for (d, c) in dist.iter_mut().zip(&counts) {
            *d = *c as f64 / total as f64;
        }
    }
    dist
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledClaim {
    pub claim: ClaimRecord,
    pub target: TargetVector,
    pub remit_date: NaiveDate,
}

/// Join result plus exclusion tallies.
#[derive(Debug, Default)]
pub struct JoinOutcome {
    pub labeled: Vec<LabeledClaim>,
    /// Claims with no matching remittance (no label exists).
    pub missing_remit: usize,
    /// Claims whose earliest remittance predates submission (y3 would be
    /// negative); their patient control numbers, for diagnostics.
    pub rejected_negative_interval: Vec<String>,
}

/// Join claims to their earliest remittance and derive targets. The earliest
/// remittance is selected by (date, claim codes, service codes) so the result
/// is invariant under permutation of the remits list.
pub fn join_and_label(
    claims: &[ClaimRecord],
    remits: &[RemittanceRecord],
    denial_set: &DenialCodeSet,
) -> JoinOutcome {
    let mut earliest: BTreeMap<&str, &RemittanceRecord> = BTreeMap::new();
    for remit in remits {
        earliest
            .entry(remit.patient_control_number.as_str())
            .and_modify(|held| {
                if remit_key(remit) < remit_key(held) {
                    *held = remit;
                }
            })
            .or_insert(remit);
    }

    let mut outcome = JoinOutcome::default();
    for claim in claims {
        let Some(remit) = earliest.get(claim.patient_control_number.as_str()) else {
            outcome.missing_remit += 1;
            continue;
        };
        let interval = (remit.remit_date - claim.submission_date).num_days();
        if interval < 0 {
            outcome.rejected_negative_interval.push(claim.patient_control_number.clone());
            continue;
        }
        let target = TargetVector::build(
            &remit.claim_level_carcs,
            &remit.service_level_carcs,
            denial_set,
            interval,
        );
        outcome.labeled.push(LabeledClaim {
            claim: claim.clone(),
            target,
            remit_date: remit.remit_date,
        });
    }
    outcome
}

fn remit_key(r: &RemittanceRecord) -> (NaiveDate, &[String], &[String]) {
    (r.remit_date, &r.claim_level_carcs, &r.service_level_carcs)
}
