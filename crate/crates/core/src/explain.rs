//! Input-gradient saliency for single claims.
//!
//! The suspiciousness of field `j` is the magnitude of the denial
//! probability's gradient with respect to the dense input entry `x_j`,
//! normalized by the per-claim maximum so the top field always scores 1.
//! Fields at or above the flag threshold are reported as suspect. The
//! gradient is taken against the materialized dense vector, but only
//! fields present on the claim are scored: an absent token can carry a
//! large gradient (the model would react if it appeared) without having
//! played any part in this claim's prediction.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffkit::Mode;
use crate::featurize::{Category, ClaimVector, Vocabulary};
use crate::model::{forward, ModelConfig, ModelError, NetworkParams};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("claim vector dims {actual:?} do not match vocabulary dims {expected:?}")]
    DimensionMismatch { expected: [usize; 3], actual: [usize; 3] },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Saliency of one input field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldScore {
    pub index: usize,
    pub field_name: String,
    pub category: Category,
    /// |∂p_denial/∂x_j| before normalization.
    pub raw_gradient: f64,
    /// Max-normalized suspiciousness in [0, 1].
    pub score: f64,
}

/// Per-field saliency for one claim, with the flagged index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuspiciousnessReport {
    pub p_denial: f64,
    pub threshold: f64,
    pub fields: Vec<FieldScore>,
    pub flagged: Vec<usize>,
}

impl SuspiciousnessReport {
    pub const CSV_HEADER: &'static str = "index,field_name,category,score";

    /// Assemble a report from raw gradient magnitudes in concatenated
    /// (x_c, x_d, x_o) order. Scores are raw values divided by the max;
    /// an all-zero gradient leaves every score 0.
    pub fn from_raw(
        p_denial: f64,
        threshold: f64,
        raw: &[f64],
        vocab: &Vocabulary,
    ) -> SuspiciousnessReport {
        debug_assert_eq!(raw.len(), vocab.total_dim());
        let max = raw.iter().fold(0.0, |m, g| g.abs().max(m));
        let fields: Vec<FieldScore> = raw
            .iter()
            .enumerate()
            .map(|(index, g)| {
                let (category, field_name) = vocab.field_name(index);
                let magnitude = g.abs();
                FieldScore {
                    index,
                    field_name,
                    category,
                    raw_gradient: magnitude,
                    score: if max > 0.0 { magnitude / max } else { 0.0 },
                }
            })
            .collect();
        let flagged = fields.iter().filter(|f| f.score >= threshold).map(|f| f.index).collect();
        SuspiciousnessReport { p_denial, threshold, fields, flagged }
    }

    pub fn csv_rows(&self) -> Vec<String> {
        self.fields
            .iter()
            .map(|f| format!("{},{},{},{}", f.index, f.field_name, f.category.tag(), f.score))
            .collect()
    }
}

/// Score every input field of one claim by input-gradient saliency.
///
/// Runs a single eval-mode forward pass and one backward pass from the
/// denial probability to the input leaves.
pub fn suspiciousness(
    params: &NetworkParams,
    config: &ModelConfig,
    vocab: &Vocabulary,
    x: &ClaimVector,
    threshold: f64,
) -> Result<SuspiciousnessReport, ExplainError> {
    let expected = [vocab.procedure.dim(), vocab.diagnosis.dim(), vocab.other.dim()];
    let actual = [x.x_c.dim, x.x_d.dim, x.x_o.dim];
    if expected != actual {
        return Err(ExplainError::DimensionMismatch { expected, actual });
    }

    let pass = forward(params, config, &[x], Mode::Eval)?;
    let p_denial = pass.graph.value(pass.p_denial).data()[0];
    let grads = pass.graph.backward(pass.p_denial, true).map_err(ModelError::from)?;

    let mut raw = Vec::with_capacity(x.total_dim());
    for &leaf in &pass.inputs {
        match grads.by_id(leaf) {
            Some(g) => raw.extend(g.data().iter().map(|v| v.abs())),
            None => raw.extend(std::iter::repeat_n(0.0, pass.graph.value(leaf).len())),
        }
    }

    // Mask fields the claim does not contain; they cannot have caused it.
    let present: BTreeSet<usize> = x.concat_pattern().into_iter().collect();
    for (j, g) in raw.iter_mut().enumerate() {
        if !present.contains(&j) {
            *g = 0.0;
        }
    }
    Ok(SuspiciousnessReport::from_raw(p_denial, threshold, &raw, vocab))
}

/// The `k` highest-scoring fields, score descending, ties by index.
pub fn top_k(report: &SuspiciousnessReport, k: usize) -> Vec<&FieldScore> {
    let mut ordered: Vec<&FieldScore> = report.fields.iter().collect();
    ordered.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.index.cmp(&b.index)));
    ordered.truncate(k);
    ordered
}
