//! Label algebra and the record/prediction vocabulary shared by every stage.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the component sum of a [`LabelDistribution`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// The three NLI classes, ordered `Entailment < Neutral < Contradiction`.
///
/// The ordering is used for argmax tie-breaking and for building CDFs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Entailment,
    Neutral,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Entailment, Label::Neutral, Label::Contradiction];

    pub fn index(self) -> usize {
        match self {
            Label::Entailment => 0,
            Label::Neutral => 1,
            Label::Contradiction => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Entailment => "entailment",
            Label::Neutral => "neutral",
            Label::Contradiction => "contradiction",
        }
    }

    pub fn short(self) -> char {
        match self {
            Label::Entailment => 'E',
            Label::Neutral => 'N',
            Label::Contradiction => 'C',
        }
    }

    /// Parses either the full lowercase name or the one-letter code.
    pub fn parse(s: &str) -> Option<Label> {
        match s.trim().to_ascii_lowercase().as_str() {
            "entailment" | "e" => Some(Label::Entailment),
            "neutral" | "n" => Some(Label::Neutral),
            "contradiction" | "c" => Some(Label::Contradiction),
            _ => None,
        }
    }

    /// Direct opposite: entailment and contradiction swap, neutral has none.
    pub fn opposite(self) -> Option<Label> {
        match self {
            Label::Entailment => Some(Label::Contradiction),
            Label::Contradiction => Some(Label::Entailment),
            Label::Neutral => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Free-function form of [`Label::opposite`].
pub fn opposite_label(label: Label) -> Option<Label> {
    label.opposite()
}

/// A validated three-class probability vector in `(E, N, C)` order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WireProbs", into = "WireProbs")]
pub struct LabelDistribution([f64; 3]);

impl LabelDistribution {
    pub fn new(entailment: f64, neutral: f64, contradiction: f64) -> Result<Self> {
        Self::from_array([entailment, neutral, contradiction])
    }

    pub fn from_array(probs: [f64; 3]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "component {p} is negative or not finite"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "components sum to {sum}, expected 1"
            )));
        }
        Ok(LabelDistribution(probs))
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: [f64; 3]) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if sum.is_nan() || sum <= 0.0 || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidDistribution(format!(
                "weights {weights:?} cannot be normalized"
            )));
        }
        Self::from_array(weights.map(|w| w / sum))
    }

    pub fn uniform() -> Self {
        LabelDistribution([1.0 / 3.0; 3])
    }

    pub fn one_hot(label: Label) -> Self {
        let mut probs = [0.0; 3];
        probs[label.index()] = 1.0;
        LabelDistribution(probs)
    }

    pub fn probs(&self) -> [f64; 3] {
        self.0
    }

    pub fn prob(&self, label: Label) -> f64 {
        self.0[label.index()]
    }

    pub fn argmax(&self) -> Label {
        argmax_label(self)
    }
}

/// Label of the largest component; exact ties go to the earlier label in `E < N < C`.
pub fn argmax_label(d: &LabelDistribution) -> Label {
    let mut best = Label::Entailment;
    for label in [Label::Neutral, Label::Contradiction] {
        if d.prob(label) > d.prob(best) {
            best = label;
        }
    }
    best
}

/// Serialized shape of a distribution, identical to the `/v1/nli` `probs` object.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireProbs {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl TryFrom<WireProbs> for LabelDistribution {
    type Error = Error;

    fn try_from(w: WireProbs) -> Result<Self> {
        LabelDistribution::new(w.entailment, w.neutral, w.contradiction)
    }
}

impl From<LabelDistribution> for WireProbs {
    fn from(d: LabelDistribution) -> Self {
        let [entailment, neutral, contradiction] = d.0;
        WireProbs {
            entailment,
            neutral,
            contradiction,
        }
    }
}

/// One premise/hypothesis/gold triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliRecord {
    pub record_id: String,
    pub dataset_id: String,
    pub premise: String,
    pub hypothesis: String,
    pub gold: Label,
}

/// A classifier output on one record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub record_id: String,
    pub distribution: LabelDistribution,
    pub predicted: Label,
}

impl Prediction {
    pub fn new(record_id: impl Into<String>, distribution: LabelDistribution) -> Self {
        Prediction {
            record_id: record_id.into(),
            predicted: distribution.argmax(),
            distribution,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.predicted == self.distribution.argmax()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(e: f64, n: f64, c: f64) -> LabelDistribution {
        LabelDistribution::new(e, n, c).unwrap()
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_label(&d(0.7, 0.2, 0.1)), Label::Entailment);
        assert_eq!(argmax_label(&d(0.4, 0.4, 0.2)), Label::Entailment);
        assert_eq!(argmax_label(&d(0.1, 0.2, 0.7)), Label::Contradiction);
        assert_eq!(argmax_label(&d(0.2, 0.4, 0.4)), Label::Neutral);
        assert_eq!(argmax_label(&LabelDistribution::uniform()), Label::Entailment);
    }

    #[test]
    fn opposites() {
        assert_eq!(opposite_label(Label::Entailment), Some(Label::Contradiction));
        assert_eq!(opposite_label(Label::Contradiction), Some(Label::Entailment));
        assert_eq!(opposite_label(Label::Neutral), None);
        for l in [Label::Entailment, Label::Contradiction] {
            assert_eq!(l.opposite().and_then(Label::opposite), Some(l));
        }
    }

    #[test]
    fn rejects_malformed() {
        assert!(LabelDistribution::new(0.2, 0.2, 0.2).is_err());
        assert!(LabelDistribution::new(1.1, -0.1, 0.0).is_err());
        assert!(LabelDistribution::new(f64::NAN, 0.5, 0.5).is_err());
        assert!(LabelDistribution::new(0.5, 0.5, 1e-7).is_ok());
    }

    #[test]
    fn serde_shape_matches_wire() {
        let json = serde_json::to_string(&d(0.9, 0.05, 0.05)).unwrap();
        assert_eq!(json, r#"{"entailment":0.9,"neutral":0.05,"contradiction":0.05}"#);
        let bad: std::result::Result<LabelDistribution, _> =
            serde_json::from_str(r#"{"entailment":0.2,"neutral":0.2,"contradiction":0.2}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn label_parse() {
        assert_eq!(Label::parse(" Entailment "), Some(Label::Entailment));
        assert_eq!(Label::parse("c"), Some(Label::Contradiction));
        assert_eq!(Label::parse("-"), None);
    }

    proptest! {
        #[test]
        fn argmax_scale_free(w in prop::array::uniform3(0.001f64..1.0), scale in 0.01f64..100.0) {
            let p = LabelDistribution::from_weights(w).unwrap();
            let q = LabelDistribution::from_weights(p.probs().map(|x| x * scale)).unwrap();
            prop_assert_eq!(p.argmax(), q.argmax());
        }

        #[test]
        fn constructed_distributions_are_valid(w in prop::array::uniform3(0.0f64..1.0)) {
            prop_assume!(w.iter().sum::<f64>() > 1e-9);
            let p = LabelDistribution::from_weights(w).unwrap();
            prop_assert!((p.probs().iter().sum::<f64>() - 1.0).abs() <= SUM_TOLERANCE);
            prop_assert!(p.probs().iter().all(|x| *x >= 0.0));
        }
    }
}
