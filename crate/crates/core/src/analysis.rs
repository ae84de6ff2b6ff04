//! Distribution-shift statistics between original and varied predictions.
//!
//! Divergences are in bits (log base 2), which bounds JSD to `[0, 1]`.
//! The K-S statistic on a single 3-class output is taken over the CDF in the
//! fixed `E, N, C` order; [`KsMode::Scalar`] instead runs a two-sample K-S
//! over the per-group max-confidence samples.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{EvaluationPair, Flip};
use crate::text::tokens;
use crate::types::LabelDistribution;

/// Upper bound of [`softmax_std`], reached on one-hot inputs: `sqrt(2) / 3`.
pub const SIGMA_MAX: f64 = std::f64::consts::SQRT_2 / 3.0;

pub const DEFAULT_FUZZY_THRESHOLD: f64 = 0.8;
pub const COSINE_BINS: usize = 50;

/// Kullback–Leibler divergence `D(P || Q)` in bits.
pub fn kl_divergence(p: &LabelDistribution, q: &LabelDistribution) -> Result<f64> {
    kl_bits(&p.probs(), &q.probs())
}

/// KL divergence in bits over arbitrary discrete distributions of equal length.
pub fn kl_bits(p: &[f64], q: &[f64]) -> Result<f64> {
    const NAMES: [&str; 3] = ["entailment", "neutral", "contradiction"];
    let mut total = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::SupportViolation {
                label: NAMES.get(i).copied().unwrap_or("component"),
            });
        }
        total += pi * (pi / qi).log2();
    }
    Ok(total.max(0.0))
}

/// Jensen–Shannon divergence in bits.
pub fn js_divergence(p: &LabelDistribution, q: &LabelDistribution) -> f64 {
    jsd_bits(&p.probs(), &q.probs())
}

pub fn jsd_bits(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let half = |x: &[f64]| kl_bits(x, &m).expect("mixture dominates both inputs");
    (0.5 * half(p) + 0.5 * half(q)).clamp(0.0, 1.0)
}

/// Largest CDF gap over the `E, N, C` ordering.
pub fn ks_statistic_discrete(p: &LabelDistribution, q: &LabelDistribution) -> f64 {
    let (mut cp, mut cq, mut best) = (0.0, 0.0, 0.0f64);
    for (a, b) in p.probs().iter().zip(q.probs()) {
        cp += a;
        cq += b;
        best = best.max((cp - cq).abs());
    }
    best.min(1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic `sup |F_a - F_b|`; `None` if either sample is empty.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut best) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        best = best.max((i as f64 / na - j as f64 / nb).abs());
    }
    Some(best)
}

/// Population standard deviation of the three probabilities.
pub fn softmax_std(p: &LabelDistribution) -> f64 {
    let probs = p.probs();
    let mean = probs.iter().sum::<f64>() / 3.0;
    let var = probs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    var.sqrt()
}

/// `1 - cos(u, v)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            actual: v.len(),
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((1.0 - (dot / (nu * nv)).clamp(-1.0, 1.0)).clamp(0.0, 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairTokenStats {
    pub fuzzy_percent: f64,
    pub len_h: usize,
    pub len_h_prime: usize,
    pub overlap: usize,
}

pub fn token_stats(h: &str, h_prime: &str) -> PairTokenStats {
    token_stats_with(h, h_prime, DEFAULT_FUZZY_THRESHOLD)
}

/// Token lengths, exact multiset overlap, and greedy one-to-one fuzzy matching.
///
/// Each token of `h`, in order, takes the unmatched token of `h_prime` with the
/// highest normalized edit similarity (earliest on ties) if that similarity is
/// at least `threshold`.
pub fn token_stats_with(h: &str, h_prime: &str, threshold: f64) -> PairTokenStats {
    let a = tokens(h);
    let b = tokens(h_prime);

    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &b {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &a {
        if let Some(c) = counts.get_mut(t.as_str()).filter(|c| **c > 0) {
            *c -= 1;
            overlap += 1;
        }
    }

    let mut used = vec![false; b.len()];
    let mut matched = 0;
    for t in &a {
        let best = b
            .iter()
            .enumerate()
            .filter(|(j, _)| !used[*j])
            .map(|(j, u)| (j, strsim::normalized_levenshtein(t, u)))
            .fold(None, |best: Option<(usize, f64)>, (j, s)| match best {
                Some((_, bs)) if bs >= s => best,
                _ => Some((j, s)),
            });
        if let Some((j, s)) = best {
            if s >= threshold {
                used[j] = true;
                matched += 1;
            }
        }
    }
    let denom = a.len().max(b.len());
    PairTokenStats {
        fuzzy_percent: if denom == 0 { 100.0 } else { 100.0 * matched as f64 / denom as f64 },
        len_h: a.len(),
        len_h_prime: b.len(),
        overlap,
    }
}

/// Dataset-level averages of [`PairTokenStats`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenStats {
    pub dataset_id: String,
    pub pairs: usize,
    pub fuzzy_percent: f64,
    pub avg_len_h: f64,
    pub avg_len_h_prime: f64,
    pub avg_overlap: f64,
}

impl TokenStats {
    pub fn aggregate(dataset_id: &str, stats: &[PairTokenStats]) -> Option<TokenStats> {
        if stats.is_empty() {
            return None;
        }
        let mean = |f: &dyn Fn(&PairTokenStats) -> f64| stable_mean(stats.iter().map(f));
        Some(TokenStats {
            dataset_id: dataset_id.to_string(),
            pairs: stats.len(),
            fuzzy_percent: mean(&|s| s.fuzzy_percent),
            avg_len_h: mean(&|s| s.len_h as f64),
            avg_len_h_prime: mean(&|s| s.len_h_prime as f64),
            avg_overlap: mean(&|s| s.overlap as f64),
        })
    }
}

/// Neumaier-compensated mean.
pub fn stable_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut comp, mut n) = (0.0f64, 0.0f64, 0usize);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        (sum + comp) / n as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KsMode {
    /// Per-pair K-S over the label CDF, averaged per group.
    #[default]
    Discrete,
    /// Two-sample K-S between original and varied max-confidence samples.
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupTag {
    Flip,
    NoFlip,
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: GroupTag,
    pub count: usize,
    pub mean_jsd: Option<f64>,
    pub ks: Option<f64>,
    pub mean_sigma: f64,
    pub mean_cosine_distance: Option<f64>,
}

/// Statistics for one evaluation pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairStats {
    pub model: String,
    pub dataset_id: String,
    pub record_id: String,
    pub candidate_index: usize,
    pub flipped: bool,
    pub jsd: f64,
    pub ks: f64,
    pub sigma_original: f64,
    pub sigma_variation: f64,
    pub cosine_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceAnalysis {
    pub ks_mode: KsMode,
    pub flip: Option<GroupStats>,
    pub no_flip: Option<GroupStats>,
    pub original: Option<GroupStats>,
    /// Flip minus no-flip mean JSD.
    pub delta_jsd: Option<f64>,
    /// Flip minus no-flip K-S.
    pub delta_ks: Option<f64>,
    /// No-flip minus flip mean σ (the confidence drop on flipping pairs).
    pub delta_sigma: Option<f64>,
    pub mean_cosine_distance: Option<f64>,
    /// JSD between flip and no-flip cosine-distance histograms.
    pub cosine_histogram_jsd: Option<f64>,
    pub pairs: Vec<PairStats>,
}

/// Normalized histogram of values in `[0, 2]` over [`COSINE_BINS`] equal bins.
pub fn cosine_histogram(values: &[f64]) -> Option<Vec<f64>> {
    if values.is_empty() {
        return None;
    }
    let mut bins = vec![0.0; COSINE_BINS];
    for v in values {
        let idx = ((v / 2.0) * COSINE_BINS as f64).floor() as isize;
        bins[idx.clamp(0, COSINE_BINS as isize - 1) as usize] += 1.0;
    }
    let n = values.len() as f64;
    Some(bins.into_iter().map(|c| c / n).collect())
}

/// Splits pairs by whether they flipped and summarizes each group.
///
/// `cosine_distances`, when given, is aligned with `pairs`.
pub fn group_divergence_analysis(
    pairs: &[EvaluationPair],
    cosine_distances: Option<&[f64]>,
    mode: KsMode,
) -> Result<DivergenceAnalysis> {
    if let Some(c) = cosine_distances {
        if c.len() != pairs.len() {
            return Err(Error::Precondition(format!(
                "{} cosine distances for {} pairs",
                c.len(),
                pairs.len()
            )));
        }
    }
    let per_pair: Vec<PairStats> = pairs
        .iter()
        .enumerate()
        .map(|(i, p)| PairStats {
            model: p.model.clone(),
            dataset_id: p.dataset_id.clone(),
            record_id: p.record_id.clone(),
            candidate_index: p.candidate_index,
            flipped: p.flip != Flip::None,
            jsd: js_divergence(&p.original_distribution, &p.variation_distribution),
            ks: ks_statistic_discrete(&p.original_distribution, &p.variation_distribution),
            sigma_original: softmax_std(&p.original_distribution),
            sigma_variation: softmax_std(&p.variation_distribution),
            cosine_distance: cosine_distances.map(|c| c[i]),
        })
        .collect();

    let confidence = |d: &LabelDistribution| d.prob(d.argmax());
    let summarize = |flipped: bool, tag: GroupTag| -> Option<GroupStats> {
        let idx: Vec<usize> = (0..pairs.len()).filter(|i| per_pair[*i].flipped == flipped).collect();
        if idx.is_empty() {
            return None;
        }
        let ks = match mode {
            KsMode::Discrete => stable_mean(idx.iter().map(|i| per_pair[*i].ks)),
            KsMode::Scalar => {
                let orig: Vec<f64> = idx.iter().map(|i| confidence(&pairs[*i].original_distribution)).collect();
                let var: Vec<f64> = idx.iter().map(|i| confidence(&pairs[*i].variation_distribution)).collect();
                ks_two_sample(&orig, &var).expect("non-empty group")
            }
        };
        Some(GroupStats {
            group: tag,
            count: idx.len(),
            mean_jsd: Some(stable_mean(idx.iter().map(|i| per_pair[*i].jsd))),
            ks: Some(ks),
            mean_sigma: stable_mean(idx.iter().map(|i| per_pair[*i].sigma_variation)),
            mean_cosine_distance: cosine_distances
                .map(|c| stable_mean(idx.iter().map(|i| c[*i]))),
        })
    };
    let flip = summarize(true, GroupTag::Flip);
    let no_flip = summarize(false, GroupTag::NoFlip);

    let mut seen = BTreeSet::new();
    let originals: Vec<f64> = pairs
        .iter()
        .zip(&per_pair)
        .filter(|(p, _)| seen.insert((p.model.as_str(), p.record_id.as_str())))
        .map(|(_, s)| s.sigma_original)
        .collect();
    let original = (!originals.is_empty()).then(|| GroupStats {
        group: GroupTag::Original,
        count: originals.len(),
        mean_jsd: None,
        ks: None,
        mean_sigma: stable_mean(originals.iter().copied()),
        mean_cosine_distance: None,
    });

    let both = flip.as_ref().zip(no_flip.as_ref());
    let diff = |f: &dyn Fn(&GroupStats) -> Option<f64>| {
        both.and_then(|(a, b)| Some(f(a)? - f(b)?))
    };
    let cosine_histogram_jsd = cosine_distances.and_then(|c| {
        let split = |flipped: bool| -> Vec<f64> {
            per_pair.iter().zip(c).filter(|(s, _)| s.flipped == flipped).map(|(_, d)| *d).collect()
        };
        let a = cosine_histogram(&split(true))?;
        let b = cosine_histogram(&split(false))?;
        Some(jsd_bits(&a, &b))
    });

    Ok(DivergenceAnalysis {
        ks_mode: mode,
        delta_jsd: diff(&|g| g.mean_jsd),
        delta_ks: diff(&|g| g.ks),
        delta_sigma: both.map(|(f, n)| n.mean_sigma - f.mean_sigma),
        mean_cosine_distance: cosine_distances.filter(|c| !c.is_empty()).map(|c| stable_mean(c.iter().copied())),
        cosine_histogram_jsd,
        flip,
        no_flip,
        original,
        pairs: per_pair,
    })
}
