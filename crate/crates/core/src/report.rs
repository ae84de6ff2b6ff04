//! Run reports: a pure projection of the stage outputs into tables.
//!
//! Percentages are rounded half-to-even at two decimals; a rate pair renders
//! as `r_s/r_r`, e.g. `6.64%/12.35%`. Undefined rates render as `n/a` and
//! absent divergence groups as `absent`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{DivergenceAnalysis, GroupStats, KsMode, TokenStats};
use crate::artifacts::{self, AccuracyRow, GenerationRow, RunInfo, Statistics};
use crate::error::{Error, Result};
use crate::metrics::{grouped_rates, weighted_average, EvaluationPair, Flip, FoolingRates, RatePair};
use crate::types::Label;

/// Distance from an exact half below which a value is treated as a tie.
const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Markdown,
    Delimited,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "delimited" | "csv" => Ok(ReportFormat::Delimited),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightedRates {
    pub model: String,
    pub n_prime: usize,
    pub r_s: Option<f64>,
    pub r_r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounts {
    pub records: usize,
    pub correct: usize,
    pub evaluated: usize,
    pub pairs: usize,
    pub excluded: usize,
    pub shortfall: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub config_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_at: Option<String>,
    pub ks_mode: KsMode,
    pub k: usize,
    pub accuracy: Vec<AccuracyRow>,
    /// Per model and dataset, including the per-class breakdown.
    pub rates: Vec<FoolingRates>,
    pub weighted: Vec<WeightedRates>,
    /// Overall divergence statistics; per-pair values stay in the statistics file.
    pub divergence: DivergenceAnalysis,
    pub token_stats: Vec<TokenStats>,
    pub counts: RunCounts,
}

/// Rounds half-to-even at `decimals` places, treating values within
/// [`TIE_TOLERANCE`] of a half as ties.
pub fn round_half_even(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let scaled = value * scale;
    let floor = scaled.floor();
    let rounded = if ((scaled - floor) - 0.5).abs() < TIE_TOLERANCE {
        if floor % 2.0 == 0.0 {
            floor
        } else {
            floor + 1.0
        }
    } else {
        scaled.round()
    };
    let out = rounded / scale;
    if out == 0.0 {
        0.0
    } else {
        out
    }
}

pub fn fixed(value: f64, decimals: u32) -> String {
    format!("{:.*}", decimals as usize, round_half_even(value, decimals))
}

/// A fraction as a percentage with two decimals, e.g. `0.0664` -> `6.64%`.
pub fn percent(fraction: f64) -> String {
    format!("{}%", fixed(fraction * 100.0, 2))
}

/// `r_s/r_r` cell, e.g. `6.64%/12.35%`.
pub fn rate_cell(r_s: Option<f64>, r_r: Option<f64>) -> String {
    match (r_s, r_r) {
        (Some(s), Some(r)) => format!("{}/{}", percent(s), percent(r)),
        _ => "n/a".to_string(),
    }
}

fn pair_cell(rates: &RatePair) -> String {
    rate_cell(rates.r_s, rates.r_r)
}

/// Token-statistics table row: dataset, fuzzy match %, mean |h|, mean |h'|, mean overlap.
pub fn token_row(stats: &TokenStats) -> String {
    format!(
        "| {} | {} | {} | {} | {} |",
        stats.dataset_id,
        fixed(stats.fuzzy_percent, 2),
        fixed(stats.avg_len_h, 2),
        fixed(stats.avg_len_h_prime, 2),
        fixed(stats.avg_overlap, 2)
    )
}

fn opt(value: Option<f64>, decimals: u32) -> String {
    value.map(|v| fixed(v, decimals)).unwrap_or_else(|| "n/a".into())
}

pub fn render(report: &RunReport, format: ReportFormat) -> Result<Vec<u8>> {
    match format {
        ReportFormat::Json => {
            let mut bytes = serde_json::to_vec_pretty(report)?;
            bytes.push(b'\n');
            Ok(bytes)
        }
        ReportFormat::Markdown => Ok(render_markdown(report).into_bytes()),
        ReportFormat::Delimited => render_delimited(report),
    }
}

fn render_markdown(r: &RunReport) -> String {
    let mut out = String::new();
    let w = &mut out;
    let _ = writeln!(w, "# Semantic sensitivity report\n");
    let _ = writeln!(w, "- run: `{}`", r.run_id);
    let _ = writeln!(w, "- config digest: `{}`", r.config_digest);
    if let Some(t) = &r.created_at {
        let _ = writeln!(w, "- created: {t}");
    }
    let _ = writeln!(w, "- k: {}", r.k);
    let _ = writeln!(
        w,
        "- records: {}, correct: {}, evaluated: {}, pairs: {}, excluded: {}, shortfall: {}\n",
        r.counts.records, r.counts.correct, r.counts.evaluated, r.counts.pairs, r.counts.excluded, r.counts.shortfall
    );

    let _ = writeln!(w, "## Accuracy\n");
    let _ = writeln!(w, "| model | dataset | n | correct | accuracy |");
    let _ = writeln!(w, "|---|---|---|---|---|");
    for a in &r.accuracy {
        let _ = writeln!(
            w,
            "| {} | {} | {} | {} | {} |",
            a.model,
            a.dataset_id,
            a.total,
            a.correct,
            percent(a.accuracy)
        );
    }

    let datasets: BTreeSet<&str> = r.rates.iter().map(|f| f.dataset_id.as_str()).collect();
    let _ = writeln!(w, "\n## Fooling rates (r_s/r_r)\n");
    let _ = write!(w, "| model |");
    for d in &datasets {
        let _ = write!(w, " {d} |");
    }
    let _ = writeln!(w, " weighted |");
    let _ = writeln!(w, "|---|{}---|", "---|".repeat(datasets.len()));
    for wr in &r.weighted {
        let _ = write!(w, "| {} |", wr.model);
        for d in &datasets {
            let cell = r
                .rates
                .iter()
                .find(|f| f.model == wr.model && f.dataset_id == *d)
                .map(|f| pair_cell(&f.overall))
                .unwrap_or_else(|| "n/a".into());
            let _ = write!(w, " {cell} |");
        }
        let _ = writeln!(w, " {} |", rate_cell(wr.r_s, wr.r_r));
    }

    let _ = writeln!(w, "\n## Fooling rates by gold label (r_s/r_r)\n");
    let _ = writeln!(w, "| model | dataset | n' | entailment | neutral | contradiction |");
    let _ = writeln!(w, "|---|---|---|---|---|---|");
    for f in &r.rates {
        let _ = writeln!(
            w,
            "| {} | {} | {} | {} | {} | {} |",
            f.model,
            f.dataset_id,
            f.n_prime,
            pair_cell(f.per_class.get(Label::Entailment)),
            pair_cell(f.per_class.get(Label::Neutral)),
            pair_cell(f.per_class.get(Label::Contradiction)),
        );
    }

    let _ = writeln!(w, "\n## Coverage\n");
    let _ = writeln!(w, "| model | dataset | n' | excluded | shortfall |");
    let _ = writeln!(w, "|---|---|---|---|---|");
    for f in &r.rates {
        let _ = writeln!(
            w,
            "| {} | {} | {} | {} | {} |",
            f.model, f.dataset_id, f.n_prime, f.excluded, f.shortfall
        );
    }

    let d = &r.divergence;
    let _ = writeln!(w, "\n## Divergence ({} K-S)\n", match d.ks_mode {
        KsMode::Discrete => "discrete",
        KsMode::Scalar => "scalar",
    });
    let _ = writeln!(w, "| group | count | mean JSD | K-S | mean sigma | mean cosine distance |");
    let _ = writeln!(w, "|---|---|---|---|---|---|");
    for (name, group) in [("flip", &d.flip), ("no-flip", &d.no_flip), ("original", &d.original)] {
        match group {
            Some(g) => {
                let _ = writeln!(w, "{}", group_row(name, g));
            }
            None => {
                let _ = writeln!(w, "| {name} | absent | | | | |");
            }
        }
    }
    let _ = writeln!(
        w,
        "\ndelta JSD {}, delta K-S {}, delta sigma {}, cosine histogram JSD {}",
        opt(d.delta_jsd, 4),
        opt(d.delta_ks, 4),
        opt(d.delta_sigma, 4),
        opt(d.cosine_histogram_jsd, 4)
    );

    let _ = writeln!(w, "\n## Token statistics\n");
    let _ = writeln!(w, "| dataset | fuzzy match % | len h | len h' | overlap |");
    let _ = writeln!(w, "|---|---|---|---|---|");
    for t in &r.token_stats {
        let _ = writeln!(w, "{}", token_row(t));
    }
    out
}

fn group_row(name: &str, g: &GroupStats) -> String {
    format!(
        "| {name} | {} | {} | {} | {} | {} |",
        g.count,
        opt(g.mean_jsd, 4),
        opt(g.ks, 4),
        fixed(g.mean_sigma, 4),
        opt(g.mean_cosine_distance, 4)
    )
}

fn render_delimited(r: &RunReport) -> Result<Vec<u8>> {
    let csv_err = |e: csv::Error| Error::Consistency(format!("csv rendering: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "dataset_id", "gold", "n", "strict_count", "relaxed_count", "r_s", "r_r"])
        .map_err(csv_err)?;
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for f in &r.rates {
        let rows = [
            ("all", &f.overall),
            ("entailment", &f.per_class.entailment),
            ("neutral", &f.per_class.neutral),
            ("contradiction", &f.per_class.contradiction),
        ];
        for (gold, rp) in rows {
            w.write_record([
                f.model.as_str(),
                f.dataset_id.as_str(),
                gold,
                &rp.n.to_string(),
                &rp.strict_count.to_string(),
                &rp.relaxed_count.to_string(),
                &num(rp.r_s),
                &num(rp.r_r),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Consistency(format!("csv rendering: {e}")))
}

fn key(model: &str, dataset: &str) -> (String, String) {
    (model.to_string(), dataset.to_string())
}

/// Reads the stage outputs in `dir`, cross-checks them and builds the report.
pub fn aggregate(dir: &Path) -> Result<RunReport> {
    let run: RunInfo = artifacts::read_json(&artifacts::require(dir, artifacts::RUN, "ingest")?)?;
    let accuracy: Vec<AccuracyRow> = artifacts::read_json(&artifacts::require(dir, artifacts::ACCURACY, "filter")?)?;
    let generation: Vec<GenerationRow> =
        artifacts::read_json(&artifacts::require(dir, artifacts::GENERATION_REPORT, "generate")?)?;
    let pairs: Vec<EvaluationPair> = artifacts::read_jsonl(&artifacts::require(dir, artifacts::PAIRS, "evaluate")?)?;
    let rates: Vec<FoolingRates> = artifacts::read_jsonl(&artifacts::require(dir, artifacts::RATES, "evaluate")?)?;
    let statistics: Statistics = artifacts::read_json(&artifacts::require(dir, artifacts::STATISTICS, "analyze")?)?;
    build_report(run, accuracy, generation, &pairs, rates, statistics)
}

/// Checks that every stored number is reproducible from the pairs, then assembles the report.
pub fn build_report(
    run: RunInfo,
    accuracy: Vec<AccuracyRow>,
    generation: Vec<GenerationRow>,
    pairs: &[EvaluationPair],
    rates: Vec<FoolingRates>,
    statistics: Statistics,
) -> Result<RunReport> {
    let fail = |msg: String| Err(Error::Consistency(msg));

    for p in pairs {
        if !p.is_consistent() {
            return fail(format!(
                "pair {} #{} ({}) has labels or flip inconsistent with its distributions",
                p.record_id, p.candidate_index, p.model
            ));
        }
    }

    let recomputed = grouped_rates(pairs);
    let gen_by_key: BTreeMap<_, _> = generation.iter().map(|g| (key(&g.model, &g.dataset_id), g)).collect();
    let mut seen = BTreeSet::new();
    for f in &rates {
        let k = key(&f.model, &f.dataset_id);
        if !seen.insert(k.clone()) {
            return fail(format!("duplicate rates row for {} / {}", f.model, f.dataset_id));
        }
        for (class, rp) in [
            ("all", &f.overall),
            ("entailment", &f.per_class.entailment),
            ("neutral", &f.per_class.neutral),
            ("contradiction", &f.per_class.contradiction),
        ] {
            if rp.strict_count > rp.relaxed_count || rp.relaxed_count > rp.n {
                return fail(format!(
                    "{} / {} ({class}): r_s > r_r or rate above 1",
                    f.model, f.dataset_id
                ));
            }
            if *rp != RatePair::from_counts(rp.n, rp.strict_count, rp.relaxed_count) {
                return fail(format!("{} / {} ({class}): rates disagree with counts", f.model, f.dataset_id));
            }
        }
        match recomputed.get(&k) {
            Some(r) => {
                if r.overall != f.overall || r.per_class != f.per_class || r.n_prime != f.n_prime {
                    return fail(format!(
                        "{} / {}: stored rates differ from rates recomputed from pairs",
                        f.model, f.dataset_id
                    ));
                }
            }
            None if f.n_prime == 0 => {}
            None => return fail(format!("{} / {}: rates without pairs", f.model, f.dataset_id)),
        }
        match gen_by_key.get(&k) {
            Some(g) if g.evaluated == f.n_prime && g.excluded == f.excluded && g.shortfall == f.shortfall => {}
            Some(_) => {
                return fail(format!(
                    "{} / {}: n', excluded or shortfall disagree with the generation report",
                    f.model, f.dataset_id
                ))
            }
            None => return fail(format!("{} / {}: missing from the generation report", f.model, f.dataset_id)),
        }
    }
    if let Some(k) = recomputed.keys().find(|k| !seen.contains(*k)) {
        return fail(format!("pairs for {} / {} have no rates row", k.0, k.1));
    }

    let overall = statistics.overall;
    if overall.pairs.len() != pairs.len() {
        return fail(format!(
            "statistics cover {} pairs, pairs file has {}",
            overall.pairs.len(),
            pairs.len()
        ));
    }
    let flips = pairs.iter().filter(|p| p.flip != Flip::None).count();
    let flip_count = overall.flip.as_ref().map_or(0, |g| g.count);
    let no_flip_count = overall.no_flip.as_ref().map_or(0, |g| g.count);
    if flip_count != flips || no_flip_count != pairs.len() - flips {
        return fail("statistics flip/no-flip group sizes disagree with the pairs file".into());
    }

    let mut weighted = Vec::new();
    for model in &run.models {
        let group: Vec<&RatePair> = rates.iter().filter(|f| &f.model == model).map(|f| &f.overall).collect();
        let n_prime = group.iter().map(|r| r.n).sum();
        let (r_s, r_r) = match weighted_average(group) {
            Ok((s, r)) => (Some(s), Some(r)),
            Err(_) => (None, None),
        };
        weighted.push(WeightedRates {
            model: model.clone(),
            n_prime,
            r_s,
            r_r,
        });
    }

    let counts = RunCounts {
        records: accuracy.iter().map(|a| a.total).sum(),
        correct: accuracy.iter().map(|a| a.correct).sum(),
        evaluated: rates.iter().map(|f| f.n_prime).sum(),
        pairs: pairs.len(),
        excluded: rates.iter().map(|f| f.excluded).sum(),
        shortfall: rates.iter().map(|f| f.shortfall).sum(),
    };

    Ok(RunReport {
        run_id: run.run_id,
        config_digest: run.config_digest,
        created_at: run.created_at,
        ks_mode: statistics.ks_mode,
        k: run.k,
        accuracy,
        rates,
        weighted,
        divergence: DivergenceAnalysis {
            pairs: Vec::new(),
            ..overall
        },
        token_stats: statistics.token_stats,
        counts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{group_divergence_analysis, token_stats, KsMode};
    use crate::metrics::{flip_type, fooling_rates};
    use crate::types::LabelDistribution;

    #[test]
    fn rate_cells() {
        assert_eq!(rate_cell(Some(0.0664), Some(0.1235)), "6.64%/12.35%");
        assert_eq!(rate_cell(Some(0.0), Some(0.0)), "0.00%/0.00%");
        assert_eq!(rate_cell(Some(0.1433), Some(0.1433)), "14.33%/14.33%");
        assert_eq!(rate_cell(None, None), "n/a");
        assert_eq!(percent(0.901), "90.10%");
    }

    #[test]
    fn half_even_ties() {
        assert_eq!(fixed(0.125, 2), "0.12");
        assert_eq!(fixed(0.135, 2), "0.14");
        assert_eq!(fixed(2.5, 0), "2");
        assert_eq!(fixed(3.5, 0), "4");
        assert_eq!(fixed(-0.001, 2), "0.00");
        // 1/8 of a percent point
        assert_eq!(percent(0.00125), "0.12%");
        assert_eq!(fixed(1.0 / 3.0 * 100.0, 2), "33.33");
    }

    #[test]
    fn token_row_layout() {
        let stats = TokenStats {
            dataset_id: "mnli".into(),
            pairs: 1,
            fuzzy_percent: 84.83,
            avg_len_h: 14.31,
            avg_len_h_prime: 14.14,
            avg_overlap: 13.25,
        };
        assert_eq!(token_row(&stats), "| mnli | 84.83 | 14.31 | 14.14 | 13.25 |");
    }

    #[test]
    fn unknown_format() {
        assert!(matches!("xml".parse::<ReportFormat>(), Err(Error::UnknownFormat(_))));
        assert_eq!("md".parse::<ReportFormat>().unwrap(), ReportFormat::Markdown);
    }

    fn pair(record: &str, gold: Label, varied: Label) -> EvaluationPair {
        let d = |l: Label| {
            let mut p = [0.1, 0.1, 0.1];
            p[l.index()] = 0.8;
            LabelDistribution::from_array(p).unwrap()
        };
        EvaluationPair {
            model: "m".into(),
            dataset_id: "d".into(),
            record_id: record.into(),
            gold,
            candidate_index: 1,
            hypothesis: "a cat sleeps".into(),
            variation: "a cat is sleeping".into(),
            original_distribution: d(gold),
            original_label: gold,
            variation_distribution: d(varied),
            variation_label: varied,
            flip: flip_type(gold, varied),
        }
    }

    fn fixture(pairs: &[EvaluationPair]) -> (RunInfo, Vec<AccuracyRow>, Vec<GenerationRow>, Vec<FoolingRates>, Statistics) {
        let run = RunInfo {
            run_id: "run-test".into(),
            config_digest: "abc".into(),
            created_at: None,
            models: vec!["m".into()],
            datasets: vec!["d".into()],
            k: 5,
            budget: 3,
            ks_mode: KsMode::Discrete,
            fuzzy_threshold: 0.8,
        };
        let accuracy = vec![AccuracyRow {
            model: "m".into(),
            dataset_id: "d".into(),
            total: 4,
            correct: 3,
            accuracy: 0.75,
        }];
        let rates = fooling_rates(pairs, 0);
        let generation = vec![GenerationRow {
            model: "m".into(),
            dataset_id: "d".into(),
            records: 3,
            evaluated: rates.n_prime,
            ..Default::default()
        }];
        let overall = group_divergence_analysis(pairs, None, KsMode::Discrete).unwrap();
        let stats = pairs.iter().map(|p| token_stats(&p.hypothesis, &p.variation)).collect::<Vec<_>>();
        let statistics = Statistics {
            ks_mode: KsMode::Discrete,
            overall,
            groups: vec![],
            token_stats: TokenStats::aggregate("d", &stats).into_iter().collect(),
        };
        (run, accuracy, generation, vec![rates], statistics)
    }

    fn pairs() -> Vec<EvaluationPair> {
        vec![
            pair("r1", Label::Entailment, Label::Contradiction),
            pair("r2", Label::Neutral, Label::Entailment),
            pair("r3", Label::Contradiction, Label::Neutral),
        ]
    }

    #[test]
    fn report_is_deterministic() {
        let p = pairs();
        let (run, acc, gen, rates, stats) = fixture(&p);
        let report = build_report(run, acc, gen, &p, rates, stats).unwrap();
        for format in [ReportFormat::Markdown, ReportFormat::Json, ReportFormat::Delimited] {
            assert_eq!(render(&report, format).unwrap(), render(&report, format).unwrap());
        }
        let md = String::from_utf8(render(&report, ReportFormat::Markdown).unwrap()).unwrap();
        assert!(md.contains("| m | 66.67%/100.00% | 66.67%/100.00% |"), "{md}");
        assert!(md.contains("| no-flip | absent |"));
        let json: RunReport = serde_json::from_slice(&render(&report, ReportFormat::Json).unwrap()).unwrap();
        assert_eq!(json, report);
    }

    #[test]
    fn inconsistent_flip_rejected() {
        let mut p = pairs();
        let (run, acc, gen, rates, stats) = fixture(&p);
        p[2].flip = Flip::Strict;
        assert!(matches!(
            build_report(run, acc, gen, &p, rates, stats),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn injected_rates_rejected() {
        let p = pairs();
        let (run, acc, gen, mut rates, stats) = fixture(&p);
        rates[0].overall = RatePair::from_counts(3, 3, 2);
        assert!(matches!(
            build_report(run, acc, gen, &p, rates, stats),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn stale_rates_rejected() {
        let p = pairs();
        let (run, acc, gen, mut rates, stats) = fixture(&p);
        rates[0].overall = RatePair::from_counts(3, 1, 2);
        assert!(matches!(
            build_report(run, acc, gen, &p, rates, stats),
            Err(Error::Consistency(_))
        ));
    }
}
