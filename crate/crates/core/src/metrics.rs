//! Flip classification and fooling rates.
//!
//! A record counts toward the relaxed rate `r_r` when at least one of its
//! accepted variations changes the predicted label, and toward the strict rate
//! `r_s` when at least one variation moves entailment to contradiction (or
//! back). A neutral original has no opposite, so any change from neutral is
//! strict. Hence `r_s <= r_r <= 1`, with equality on the neutral class.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backend::Classifier;
use crate::error::{Error, Result};
use crate::types::{Label, LabelDistribution};
use crate::variation::{FilteredRecord, VariationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    None,
    Relaxed,
    Strict,
}

pub fn flip_type(original: Label, varied: Label) -> Flip {
    if original == varied {
        return Flip::None;
    }
    match original.opposite() {
        Some(opp) if opp == varied => Flip::Strict,
        Some(_) => Flip::Relaxed,
        None => Flip::Strict,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationPair {
    pub model: String,
    pub dataset_id: String,
    pub record_id: String,
    pub gold: Label,
    pub candidate_index: usize,
    pub hypothesis: String,
    pub variation: String,
    pub original_distribution: LabelDistribution,
    pub original_label: Label,
    pub variation_distribution: LabelDistribution,
    pub variation_label: Label,
    pub flip: Flip,
}

impl EvaluationPair {
    /// Stored labels agree with their distributions and the flip with the labels.
    pub fn is_consistent(&self) -> bool {
        self.original_label == self.original_distribution.argmax()
            && self.variation_label == self.variation_distribution.argmax()
            && self.flip == flip_type(self.original_label, self.variation_label)
    }
}

/// Re-classifies each accepted variation against the record's premise.
///
/// Output order follows `sets` and, within a set, candidate order.
pub fn evaluate_variations(
    sets: &[VariationSet],
    originals: &[FilteredRecord],
    classifier: &dyn Classifier,
) -> Result<Vec<EvaluationPair>> {
    let by_id: HashMap<&str, &FilteredRecord> = originals
        .iter()
        .map(|f| (f.record.record_id.as_str(), f))
        .collect();
    let mut jobs = Vec::new();
    for set in sets {
        let original = by_id.get(set.record_id.as_str()).ok_or_else(|| {
            Error::Precondition(format!("no stored prediction for record {}", set.record_id))
        })?;
        for candidate in &set.accepted {
            jobs.push((*original, candidate));
        }
    }
    jobs.par_iter()
        .map(|(original, candidate)| {
            let record = &original.record;
            let distribution = classifier
                .classify(&record.premise, &candidate.text)
                .map_err(|e| {
                    e.context(format!(
                        "classifying record {} candidate {}",
                        record.record_id, candidate.index
                    ))
                })?;
            let variation_label = distribution.argmax();
            let original_label = original.prediction.predicted;
            Ok(EvaluationPair {
                model: classifier.model().to_string(),
                dataset_id: record.dataset_id.clone(),
                record_id: record.record_id.clone(),
                gold: record.gold,
                candidate_index: candidate.index,
                hypothesis: record.hypothesis.clone(),
                variation: candidate.text.clone(),
                original_distribution: original.prediction.distribution,
                original_label,
                variation_distribution: distribution,
                variation_label,
                flip: flip_type(original_label, variation_label),
            })
        })
        .collect()
}

/// Rates for one group of records. Rates are `None` when the group is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RatePair {
    pub n: usize,
    pub strict_count: usize,
    pub relaxed_count: usize,
    pub r_s: Option<f64>,
    pub r_r: Option<f64>,
}

impl RatePair {
    pub fn from_counts(n: usize, strict_count: usize, relaxed_count: usize) -> Self {
        let rate = |c: usize| (n > 0).then(|| c as f64 / n as f64);
        RatePair {
            n,
            strict_count,
            relaxed_count,
            r_s: rate(strict_count),
            r_r: rate(relaxed_count),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerClass {
    pub entailment: RatePair,
    pub neutral: RatePair,
    pub contradiction: RatePair,
}

impl PerClass {
    pub fn get(&self, label: Label) -> &RatePair {
        match label {
            Label::Entailment => &self.entailment,
            Label::Neutral => &self.neutral,
            Label::Contradiction => &self.contradiction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoolingRates {
    pub model: String,
    pub dataset_id: String,
    /// Records with at least one evaluated variation.
    pub n_prime: usize,
    pub overall: RatePair,
    pub per_class: PerClass,
    /// Records dropped for having no accepted variation.
    pub excluded: usize,
    /// Evaluated records with fewer than k accepted variations.
    pub shortfall: usize,
}

impl FoolingRates {
    pub fn r_s(&self) -> Option<f64> {
        self.overall.r_s
    }

    pub fn r_r(&self) -> Option<f64> {
        self.overall.r_r
    }
}

/// Fooling rates over `pairs`, treated as one group.
pub fn fooling_rates(pairs: &[EvaluationPair], excluded: usize) -> FoolingRates {
    // record -> (gold, any change, any strict change)
    let mut records: BTreeMap<&str, (Label, bool, bool)> = BTreeMap::new();
    for p in pairs {
        let entry = records.entry(p.record_id.as_str()).or_insert((p.gold, false, false));
        entry.1 |= p.flip != Flip::None;
        entry.2 |= p.flip == Flip::Strict;
    }
    let count = |filter: &dyn Fn(Label) -> bool| {
        let group: Vec<_> = records.values().filter(|(g, _, _)| filter(*g)).collect();
        RatePair::from_counts(
            group.len(),
            group.iter().filter(|(_, _, s)| *s).count(),
            group.iter().filter(|(_, r, _)| *r).count(),
        )
    };
    let first = pairs.first();
    FoolingRates {
        model: first.map(|p| p.model.clone()).unwrap_or_default(),
        dataset_id: first.map(|p| p.dataset_id.clone()).unwrap_or_default(),
        n_prime: records.len(),
        overall: count(&|_| true),
        per_class: PerClass {
            entailment: count(&|g| g == Label::Entailment),
            neutral: count(&|g| g == Label::Neutral),
            contradiction: count(&|g| g == Label::Contradiction),
        },
        excluded,
        shortfall: 0,
    }
}

/// Splits pairs by `(model, dataset)` and computes rates per group.
pub fn grouped_rates(pairs: &[EvaluationPair]) -> BTreeMap<(String, String), FoolingRates> {
    let mut groups: BTreeMap<(String, String), Vec<EvaluationPair>> = BTreeMap::new();
    for p in pairs {
        groups
            .entry((p.model.clone(), p.dataset_id.clone()))
            .or_default()
            .push(p.clone());
    }
    groups
        .into_iter()
        .map(|(key, group)| (key, fooling_rates(&group, 0)))
        .collect()
}

/// `n'`-weighted mean of `(r_s, r_r)` across groups. Groups with `n' = 0` carry no weight.
///
/// Weighting each rate by its `n'` equals pooling the underlying counts, which
/// is how it is computed.
pub fn weighted_average<'a>(rates: impl IntoIterator<Item = &'a RatePair>) -> Result<(f64, f64)> {
    let (mut total, mut strict, mut relaxed) = (0usize, 0usize, 0usize);
    for r in rates {
        total += r.n;
        strict += r.strict_count;
        relaxed += r.relaxed_count;
    }
    if total == 0 {
        return Err(Error::Undefined("weighted average over groups with n' = 0".into()));
    }
    Ok((strict as f64 / total as f64, relaxed as f64 / total as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use Label::*;

    fn dist(l: Label) -> LabelDistribution {
        LabelDistribution::one_hot(l)
    }

    fn pair(record: &str, gold: Label, original: Label, varied: Label) -> EvaluationPair {
        EvaluationPair {
            model: "m".into(),
            dataset_id: "d".into(),
            record_id: record.into(),
            gold,
            candidate_index: 1,
            hypothesis: "h".into(),
            variation: "v".into(),
            original_distribution: dist(original),
            original_label: original,
            variation_distribution: dist(varied),
            variation_label: varied,
            flip: flip_type(original, varied),
        }
    }

    #[test]
    fn flip_examples() {
        assert_eq!(flip_type(Entailment, Contradiction), Flip::Strict);
        assert_eq!(flip_type(Contradiction, Entailment), Flip::Strict);
        assert_eq!(flip_type(Entailment, Neutral), Flip::Relaxed);
        assert_eq!(flip_type(Contradiction, Neutral), Flip::Relaxed);
        assert_eq!(flip_type(Neutral, Contradiction), Flip::Strict);
        assert_eq!(flip_type(Neutral, Entailment), Flip::Strict);
        assert_eq!(flip_type(Entailment, Entailment), Flip::None);
    }

    #[test]
    fn four_record_example() {
        let pairs = vec![
            pair("a", Entailment, Entailment, Contradiction),
            pair("b", Neutral, Neutral, Entailment),
            pair("c", Contradiction, Contradiction, Neutral),
            pair("d", Entailment, Entailment, Entailment),
        ];
        let r = fooling_rates(&pairs, 0);
        assert_eq!(r.n_prime, 4);
        assert_eq!(r.r_r(), Some(0.75));
        assert_eq!(r.r_s(), Some(0.5));
    }

    #[test]
    fn all_none_and_all_strict() {
        let none: Vec<_> = (0..5).map(|i| pair(&i.to_string(), Neutral, Neutral, Neutral)).collect();
        let r = fooling_rates(&none, 0);
        assert_eq!((r.r_s(), r.r_r()), (Some(0.0), Some(0.0)));
        let strict: Vec<_> = (0..5).map(|i| pair(&i.to_string(), Entailment, Entailment, Contradiction)).collect();
        let r = fooling_rates(&strict, 0);
        assert_eq!((r.r_s(), r.r_r()), (Some(1.0), Some(1.0)));
    }

    #[test]
    fn empty_input_is_undefined() {
        let r = fooling_rates(&[], 3);
        assert_eq!(r.n_prime, 0);
        assert_eq!(r.r_r(), None);
        assert_eq!(r.excluded, 3);
    }

    #[test]
    fn weighted_examples() {
        let a = RatePair::from_counts(100, 10, 20);
        let b = RatePair::from_counts(300, 30, 120);
        let (s, r) = weighted_average([&a, &b]).unwrap();
        assert_eq!((s, r), (0.1, 0.35));
        assert_eq!(weighted_average([&a]).unwrap(), (0.1, 0.2));
        let empty = RatePair::from_counts(0, 0, 0);
        assert_eq!(weighted_average([&a, &empty]).unwrap(), (0.1, 0.2));
        assert!(weighted_average([&empty]).is_err());
    }

    #[test]
    fn grouping_splits_models_and_datasets() {
        let mut p1 = pair("a", Entailment, Entailment, Contradiction);
        p1.dataset_id = "x".into();
        let p2 = pair("a", Entailment, Entailment, Entailment);
        let g = grouped_rates(&[p1, p2]);
        assert_eq!(g.len(), 2);
        assert_eq!(g[&("m".into(), "x".into())].r_s(), Some(1.0));
        assert_eq!(g[&("m".into(), "d".into())].r_s(), Some(0.0));
    }

    fn label() -> impl Strategy<Value = Label> {
        prop_oneof![Just(Entailment), Just(Neutral), Just(Contradiction)]
    }

    fn dataset() -> impl Strategy<Value = Vec<EvaluationPair>> {
        prop::collection::vec((label(), prop::collection::vec(label(), 1..=5)), 0..60).prop_map(|records| {
            records
                .into_iter()
                .enumerate()
                .flat_map(|(i, (gold, varied))| {
                    varied.into_iter().map(move |v| pair(&format!("r{i}"), gold, gold, v))
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn ordering_invariants(pairs in dataset()) {
            let r = fooling_rates(&pairs, 0);
            if let (Some(s), Some(rr)) = (r.r_s(), r.r_r()) {
                prop_assert!(s <= rr && rr <= 1.0);
            }
            prop_assert_eq!(r.per_class.neutral.r_s, r.per_class.neutral.r_r);
        }

        #[test]
        fn order_independent(pairs in dataset(), seed: u64) {
            let mut shuffled = pairs.clone();
            let n = shuffled.len();
            if n > 1 {
                for i in 0..n {
                    let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % n as u64) as usize;
                    shuffled.swap(i, j);
                }
            }
            prop_assert_eq!(fooling_rates(&pairs, 0), fooling_rates(&shuffled, 0));
        }
    }
}
