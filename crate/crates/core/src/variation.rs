//! Correct-sample filtering and semantics-preserving hypothesis variations.
//!
//! A generated hypothesis `h'` is accepted only when the classifier predicts
//! entailment in both directions, `(h, h')` and `(h', h)`. Generation is
//! repeated until `k` candidates pass or the round budget runs out.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::{Classifier, GenerationParams, Generator, TemperatureRange};
use crate::error::{Error, Result};
use crate::text::candidate_key;
use crate::types::{Label, LabelDistribution, NliRecord, Prediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilteredRecord {
    pub record: NliRecord,
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<FilteredRecord>,
    pub total: usize,
    pub accuracy: f64,
}

/// Classifies every record and keeps the ones predicted correctly.
pub fn filter_correct(records: &[NliRecord], classifier: &dyn Classifier) -> Result<FilterOutcome> {
    if records.is_empty() {
        return Err(Error::Precondition("filter_correct needs at least one record".into()));
    }
    let predictions: Vec<Prediction> = records
        .par_iter()
        .map(|r| {
            classifier
                .classify(&r.premise, &r.hypothesis)
                .map(|d| Prediction::new(r.record_id.clone(), d))
                .map_err(|e| e.context(format!("classifying record {}", r.record_id)))
        })
        .collect::<Result<_>>()?;
    let kept: Vec<FilteredRecord> = records
        .iter()
        .zip(predictions)
        .filter(|(r, p)| p.predicted == r.gold)
        .map(|(r, p)| FilteredRecord {
            record: r.clone(),
            prediction: p,
        })
        .collect();
    Ok(FilterOutcome {
        accuracy: kept.len() as f64 / records.len() as f64,
        total: records.len(),
        kept,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Equivalence {
    pub accepted: bool,
    pub forward: LabelDistribution,
    pub backward: LabelDistribution,
}

/// Symmetric-entailment check between a hypothesis and its variant.
pub fn check_equivalence(h: &str, h_prime: &str, classifier: &dyn Classifier) -> Result<Equivalence> {
    if h.trim().is_empty() || h_prime.trim().is_empty() {
        return Err(Error::Precondition("equivalence check on empty text".into()));
    }
    let forward = classifier.classify(h, h_prime)?;
    let backward = classifier.classify(h_prime, h)?;
    Ok(Equivalence {
        accepted: symmetric_entailment(&forward, &backward),
        forward,
        backward,
    })
}

pub fn symmetric_entailment(forward: &LabelDistribution, backward: &LabelDistribution) -> bool {
    forward.argmax() == Label::Entailment && backward.argmax() == Label::Entailment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationCandidate {
    pub record_id: String,
    /// 1-based position within the accepted (or rejected) list.
    pub index: usize,
    pub text: String,
    pub forward_check: LabelDistribution,
    pub backward_check: LabelDistribution,
    pub accepted: bool,
    pub generation_round: u32,
}

impl VariationCandidate {
    /// Re-derives acceptance from the stored evidence.
    pub fn evidence_accepts(&self) -> bool {
        symmetric_entailment(&self.forward_check, &self.backward_check)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationSet {
    pub model: String,
    pub dataset_id: String,
    pub record_id: String,
    pub hypothesis: String,
    pub accepted: Vec<VariationCandidate>,
    pub rejected: Vec<VariationCandidate>,
    pub shortfall: bool,
    pub excluded: bool,
    pub rounds_used: u32,
}

impl VariationSet {
    /// Checks the stored set against its invariants for target size `k`.
    pub fn validate(&self, k: usize) -> Result<()> {
        let fail = |msg: String| Err(Error::Consistency(format!("record {}: {msg}", self.record_id)));
        if self.accepted.len() > k {
            return fail(format!("{} accepted candidates exceed k = {k}", self.accepted.len()));
        }
        if self.shortfall != (self.accepted.len() < k) || self.excluded != self.accepted.is_empty() {
            return fail("shortfall/excluded flags disagree with accepted count".into());
        }
        let mut seen = HashSet::from([candidate_key(&self.hypothesis)]);
        for c in self.accepted.iter().chain(&self.rejected) {
            if c.accepted != c.evidence_accepts() {
                return fail(format!("candidate {:?} acceptance contradicts its evidence", c.text));
            }
            if !seen.insert(candidate_key(&c.text)) {
                return fail(format!("candidate {:?} duplicates another text", c.text));
            }
        }
        if self.accepted.iter().any(|c| !c.accepted) || self.rejected.iter().any(|c| c.accepted) {
            return fail("candidate stored in the wrong list".into());
        }
        Ok(())
    }
}

/// Decoding parameters plus the per-round temperature sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationSettings {
    pub params: GenerationParams,
    pub temperature: TemperatureRange,
}

impl GenerationSettings {
    pub fn params_for_round(&self, round: u32, budget: u32) -> GenerationParams {
        GenerationParams {
            temperature: self.temperature.for_round(round, budget),
            ..self.params.clone()
        }
    }
}

/// Refinement loop for one record.
///
/// Each round asks the generator for fresh candidates, drops ones whose
/// canonical text matches the parent or an earlier candidate, and checks the
/// rest in order until `k` are accepted. An empty generation consumes the
/// round. Records ending with no accepted candidate are marked excluded.
pub fn acquire_variations(
    record: &NliRecord,
    prediction: &Prediction,
    k: usize,
    budget: u32,
    settings: &GenerationSettings,
    generator: &dyn Generator,
    classifier: &dyn Classifier,
) -> Result<VariationSet> {
    if k == 0 || budget == 0 {
        return Err(Error::Precondition("k and budget must be >= 1".into()));
    }
    if prediction.record_id != record.record_id {
        return Err(Error::Precondition(format!(
            "prediction for {} paired with record {}",
            prediction.record_id, record.record_id
        )));
    }
    let h = &record.hypothesis;
    let mut seen = HashSet::from([candidate_key(h)]);
    let mut accepted = Vec::new();
    let mut rejected = Vec::new();
    let mut rounds_used = 0;

    'rounds: for round in 0..budget {
        rounds_used = round + 1;
        let params = settings.params_for_round(round, budget);
        let candidates = match generator.generate_candidates(h, &params, round) {
            Ok(c) => c,
            Err(e) if matches!(e.root(), Error::EmptyGeneration) => continue,
            Err(e) => {
                return Err(e.context(format!("generating for record {} round {round}", record.record_id)))
            }
        };
        for text in candidates {
            let key = candidate_key(&text);
            if key.is_empty() || !seen.insert(key) {
                continue;
            }
            let eq = check_equivalence(h, &text, classifier)
                .map_err(|e| e.context(format!("checking candidate for record {}", record.record_id)))?;
            let list = if eq.accepted { &mut accepted } else { &mut rejected };
            list.push(VariationCandidate {
                record_id: record.record_id.clone(),
                index: list.len() + 1,
                text,
                forward_check: eq.forward,
                backward_check: eq.backward,
                accepted: eq.accepted,
                generation_round: round,
            });
            if accepted.len() == k {
                break 'rounds;
            }
        }
    }

    Ok(VariationSet {
        model: classifier.model().to_string(),
        dataset_id: record.dataset_id.clone(),
        record_id: record.record_id.clone(),
        hypothesis: h.clone(),
        shortfall: accepted.len() < k,
        excluded: accepted.is_empty(),
        accepted,
        rejected,
        rounds_used,
    })
}
