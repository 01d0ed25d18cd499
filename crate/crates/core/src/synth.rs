//! Seeded synthetic claim corpora with planted denial rules.
//!
//! Claims draw token bags from skewed background pools; a planted rule
//! injects its trigger tokens into a configurable fraction of claims and
//! stamps its CARC on the remittance whenever the full trigger is present
//! and the rule fires. Because trigger tokens live outside the background
//! pools, each firing is attributable, and the emitted truth log records
//! exactly which rule caused which code on which claim. Response days
//! follow base + per-payer offset + rounded Gaussian noise.

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

use crate::ingest::{ClaimRecord, RemittanceRecord};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("n_claims must be at least 1")]
    NoClaims,
    #[error("{0} pool must not be empty")]
    EmptyPool(&'static str),
    #[error("{field} must lie in {range}, got {value}")]
    RateOutOfRange { field: &'static str, range: &'static str, value: f64 },
    #[error("rule {name}: {message}")]
    BadRule { name: String, message: String },
    #[error("date range is empty: {start} to {end}")]
    EmptyDateRange { start: NaiveDate, end: NaiveDate },
    #[error("charge range is empty")]
    EmptyChargeRange,
}

/// Which remittance list a rule's CARC lands in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RuleLevel {
    Claim,
    Service,
}

/// A denial rule planted into the corpus.
///
/// The trigger is a conjunction: every listed procedure and diagnosis
/// must appear on the claim, and the claim's payer must equal
/// `trigger_payer` when one is set. Injection forces the trigger onto a
/// random `inject_rate` fraction of claims; firing then emits the CARC
/// with probability `fire_probability`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRule {
    pub name: String,
    #[serde(default)]
    pub trigger_procedures: Vec<String>,
    #[serde(default)]
    pub trigger_diagnoses: Vec<String>,
    #[serde(default)]
    pub trigger_payer: Option<String>,
    pub carc: String,
    pub level: RuleLevel,
    #[serde(default = "default_fire_probability")]
    pub fire_probability: f64,
    #[serde(default)]
    pub inject_rate: f64,
}

fn default_fire_probability() -> f64 {
    1.0
}

impl PlantedRule {
    fn validate(&self) -> Result<(), SynthError> {
        let empty = self.trigger_procedures.is_empty()
            && self.trigger_diagnoses.is_empty()
            && self.trigger_payer.is_none();
        if empty {
            return Err(SynthError::BadRule {
                name: self.name.clone(),
                message: "trigger is empty".into(),
            });
        }
        if self.carc.trim().is_empty() {
            return Err(SynthError::BadRule {
                name: self.name.clone(),
                message: "carc is empty".into(),
            });
        }
        if !(self.fire_probability > 0.0 && self.fire_probability <= 1.0) {
            return Err(SynthError::RateOutOfRange {
                field: "fire_probability",
                range: "(0, 1]",
                value: self.fire_probability,
            });
        }
        if !(0.0..=1.0).contains(&self.inject_rate) {
            return Err(SynthError::RateOutOfRange {
                field: "inject_rate",
                range: "[0, 1]",
                value: self.inject_rate,
            });
        }
        Ok(())
    }

    fn triggered_by(&self, claim: &ClaimRecord) -> bool {
        self.trigger_procedures.iter().all(|p| claim.procedures.contains(p))
            && self.trigger_diagnoses.iter().all(|d| claim.diagnoses.contains(d))
            && self.trigger_payer.as_ref().is_none_or(|p| &claim.payer_id == p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_claims: usize,
    /// Background pool sizes; trigger tokens are separate from these.
    pub procedure_pool: usize,
    pub diagnosis_pool: usize,
    pub payer_pool: usize,
    pub state_pool: usize,
    pub max_procedures: usize,
    pub max_diagnoses: usize,
    pub submission_start: NaiveDate,
    pub submission_end: NaiveDate,
    pub charge_cents_min: u64,
    pub charge_cents_max: u64,
    pub rules: Vec<PlantedRule>,
    /// Chance of a denial CARC appearing with no rule behind it.
    pub background_denial_rate: f64,
    pub noise_carc: String,
    /// Chance of a benign (non-denial) CARC on the remit.
    pub benign_carc_rate: f64,
    pub benign_carcs: Vec<String>,
    pub response_base_days: f64,
    pub response_payer_step: f64,
    pub response_noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_claims: 1000,
            procedure_pool: 60,
            diagnosis_pool: 40,
            payer_pool: 8,
            state_pool: 10,
            max_procedures: 4,
            max_diagnoses: 3,
            submission_start: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            submission_end: NaiveDate::from_ymd_opt(2024, 12, 31).unwrap(),
            charge_cents_min: 10_00,
            charge_cents_max: 5_000_00,
            rules: Vec::new(),
            background_denial_rate: 0.0,
            noise_carc: "96".into(),
            benign_carc_rate: 0.1,
            benign_carcs: vec!["1".into(), "2".into(), "3".into()],
            response_base_days: 4.0,
            response_payer_step: 1.0,
            response_noise_sd: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.n_claims == 0 {
            return Err(SynthError::NoClaims);
        }
        for (name, size) in [
            ("procedure", self.procedure_pool),
            ("diagnosis", self.diagnosis_pool),
            ("payer", self.payer_pool),
            ("state", self.state_pool),
            ("procedures per claim", self.max_procedures),
            ("diagnoses per claim", self.max_diagnoses),
        ] {
            if size == 0 {
                return Err(SynthError::EmptyPool(name));
            }
        }
        if self.submission_start > self.submission_end {
            return Err(SynthError::EmptyDateRange {
                start: self.submission_start,
                end: self.submission_end,
            });
        }
        if self.charge_cents_min == 0 || self.charge_cents_min > self.charge_cents_max {
            return Err(SynthError::EmptyChargeRange);
        }
        for (field, value) in [
            ("background_denial_rate", self.background_denial_rate),
            ("benign_carc_rate", self.benign_carc_rate),
        ] {
            if !(0.0..1.0).contains(&value) {
                return Err(SynthError::RateOutOfRange { field, range: "[0, 1)", value });
            }
        }
        if self.response_base_days < 0.0 {
            return Err(SynthError::RateOutOfRange {
                field: "response_base_days",
                range: "[0, inf)",
                value: self.response_base_days,
            });
        }
        if self.response_noise_sd < 0.0 {
            return Err(SynthError::RateOutOfRange {
                field: "response_noise_sd",
                range: "[0, inf)",
                value: self.response_noise_sd,
            });
        }
        for rule in &self.rules {
            rule.validate()?;
        }
        Ok(())
    }

    /// Text for the denial code set file: every rule CARC plus the noise
    /// CARC, one per line.
    pub fn denial_set_text(&self) -> String {
        let mut codes: BTreeSet<&str> = self.rules.iter().map(|r| r.carc.as_str()).collect();
        if self.background_denial_rate > 0.0 {
            codes.insert(self.noise_carc.as_str());
        }
        let mut out = String::from("# synthetic denial code set\n");
        for code in codes {
            out.push_str(code);
            out.push('\n');
        }
        out
    }
}

/// One rule firing, as written to the truth log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleFiring {
    pub pcn: String,
    pub rule: String,
    pub carc: String,
    pub level: RuleLevel,
}

/// A generated corpus in its on-disk JSONL/text forms.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthOutput {
    pub claims: String,
    pub remits: String,
    pub truth: String,
    pub denial_codes: String,
}

pub fn parse_truth(content: &str) -> Result<Vec<RuleFiring>, serde_json::Error> {
    content.lines().filter(|l| !l.trim().is_empty()).map(serde_json::from_str).collect()
}

const GENDERS: [&str; 2] = ["F", "M"];
const RELATIONSHIPS: [&str; 3] = ["18", "01", "19"];
const ZIPF_EXPONENT: f64 = 1.1;

fn zipf_index(rng: &mut ChaCha8Rng, dist: &Zipf<f64>, pool: usize) -> usize {
    (dist.sample(rng) as usize).clamp(1, pool) - 1
}

/// Generate a corpus: claims, remittances, rule-firing truth log, and the
/// matching denial code set, all as file contents.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput, SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let proc_dist = Zipf::new(config.procedure_pool as f64, ZIPF_EXPONENT).expect("pool checked");
    let diag_dist = Zipf::new(config.diagnosis_pool as f64, ZIPF_EXPONENT).expect("pool checked");
    let noise = if config.response_noise_sd > 0.0 {
        Some(Normal::new(0.0, config.response_noise_sd).expect("sd checked"))
    } else {
        None
    };
    let span_days = (config.submission_end - config.submission_start).num_days();

    let mut claims = String::new();
    let mut remits = String::new();
    let mut truth = String::new();

    for serial in 0..config.n_claims {
        let pcn = format!("C{serial:06}");
        let payer_index = rng.random_range(0..config.payer_pool);
        let payer_id = format!("PAY{payer_index:02}");
        let payer_state = format!("S{:02}", rng.random_range(0..config.state_pool));
        let subscriber_gender = GENDERS[rng.random_range(0..GENDERS.len())].to_string();
        let relationship_code = RELATIONSHIPS[rng.random_range(0..RELATIONSHIPS.len())].to_string();
        let subscriber_age = rng.random_range(18..=80);
        let patient_age = if relationship_code == "18" {
            subscriber_age
        } else {
            rng.random_range(1..=80)
        };

        let submission_date =
            config.submission_start + chrono::Duration::days(rng.random_range(0..=span_days));
        let service_start_date = submission_date - chrono::Duration::days(rng.random_range(0..=30));
        let service_end_date = service_start_date + chrono::Duration::days(rng.random_range(0..=3));
        let total_charge = rng.random_range(config.charge_cents_min..=config.charge_cents_max);

        let n_procs = rng.random_range(1..=config.max_procedures);
        let mut procedures: Vec<String> = (0..n_procs)
            .map(|_| format!("P{:04}", zipf_index(&mut rng, &proc_dist, config.procedure_pool)))
            .collect();
        let n_diags = rng.random_range(1..=config.max_diagnoses);
        let mut diagnoses: Vec<String> = (0..n_diags)
            .map(|_| format!("D{:04}", zipf_index(&mut rng, &diag_dist, config.diagnosis_pool)))
            .collect();

        let mut payer_id = payer_id;
        for rule in &config.rules {
            if rule.inject_rate > 0.0 && rng.random_bool(rule.inject_rate) {
                for p in &rule.trigger_procedures {
                    if !procedures.contains(p) {
                        procedures.push(p.clone());
                    }
                }
                for d in &rule.trigger_diagnoses {
                    if !diagnoses.contains(d) {
                        diagnoses.push(d.clone());
                    }
                }
                if let Some(p) = &rule.trigger_payer {
                    payer_id = p.clone();
                }
            }
        }

        let claim = ClaimRecord {
            patient_control_number: pcn.clone(),
            payer_id,
            payer_state,
            subscriber_gender,
            relationship_code,
            subscriber_age,
            patient_age,
            service_start_date,
            service_end_date,
            submission_date,
            total_charge,
            procedures,
            diagnoses,
        };

        let mut claim_level_carcs = Vec::new();
        let mut service_level_carcs = Vec::new();
        for rule in &config.rules {
            if rule.triggered_by(&claim) && rng.random_bool(rule.fire_probability) {
                match rule.level {
                    RuleLevel::Claim => claim_level_carcs.push(rule.carc.clone()),
                    RuleLevel::Service => service_level_carcs.push(rule.carc.clone()),
                }
                let firing = RuleFiring {
                    pcn: pcn.clone(),
                    rule: rule.name.clone(),
                    carc: rule.carc.clone(),
                    level: rule.level,
                };
                truth.push_str(&serde_json::to_string(&firing).expect("firing serializes"));
                truth.push('\n');
            }
        }
        if config.background_denial_rate > 0.0 && rng.random_bool(config.background_denial_rate) {
            claim_level_carcs.push(config.noise_carc.clone());
        }
        if config.benign_carc_rate > 0.0
            && !config.benign_carcs.is_empty()
            && rng.random_bool(config.benign_carc_rate)
        {
            let pick = rng.random_range(0..config.benign_carcs.len());
            claim_level_carcs.push(config.benign_carcs[pick].clone());
        }

        // The payer carries the response-time structure: base plus a fixed
        // per-payer offset plus rounded noise, never negative.
        let claim_payer_index = claim
            .payer_id
            .strip_prefix("PAY")
            .and_then(|s| s.parse::<usize>().ok())
            .unwrap_or(payer_index);
        let mut days = config.response_base_days
            + claim_payer_index as f64 * config.response_payer_step;
        if let Some(dist) = &noise {
            days += dist.sample(&mut rng);
        }
        let days = days.round().max(0.0) as i64;

        let remit = RemittanceRecord {
            patient_control_number: pcn,
            remit_date: submission_date + chrono::Duration::days(days),
            claim_level_carcs,
            service_level_carcs,
        };

        claims.push_str(&claim.to_jsonl_line());
        claims.push('\n');
        remits.push_str(&remit.to_jsonl_line());
        remits.push('\n');
    }

    Ok(SynthOutput { claims, remits, truth, denial_codes: config.denial_set_text() })
}
