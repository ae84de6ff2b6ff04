//! End-to-end fixture run against scripted mock backends.
//!
//! The corpus has 60 records in two datasets. Dataset `a` (40 records plus
//! two rows with unresolvable labels) is line-delimited JSON; dataset `b`
//! (20 records) is tab-separated. Ten records are misclassified and five of
//! `a`'s correct records get no accepted variation, leaving n' = 45. Of those,
//! 18 records have a label-changing variation and 9 a strict one, so the
//! designed rates are r_r = 0.40 and r_s = 0.20.
//!
//! Evaluated records cycle through three generation scripts: all k accepted
//! in the first round (with a rejected candidate in each direction and a
//! case-only copy of the hypothesis), acceptance spread over rounds with an
//! empty round in between, and a shortfall with a duplicate candidate.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::{Pipeline, RunConfig, RunStats};
use crate::artifacts;
use crate::error::{Error, Result};
use crate::report::RunReport;
use crate::types::Label;

pub const GOLDEN_REPORT_JSON: &str = include_str!("../../fixtures/golden/report.json");
pub const GOLDEN_REPORT_MD: &str = include_str!("../../fixtures/golden/report.md");
/// Where `bless` writes new golden files.
pub const GOLDEN_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/golden");

pub const CONFIG_FILE: &str = "selftest.toml";
pub const MODEL: &str = "mock-nli";
pub const K: usize = 5;
pub const BUDGET: u32 = 3;
pub const NLI_DEFAULT: [f64; 3] = [0.2, 0.5, 0.3];

const SUBJECTS: [(&str, &str); 8] = [
    ("A man", "is"),
    ("A woman", "is"),
    ("Two children", "are"),
    ("An old dog", "is"),
    ("A young chef", "is"),
    ("The band", "is"),
    ("A cyclist", "is"),
    ("Three students", "are"),
];

const ACTIVITIES: [&str; 8] = [
    "cooking dinner",
    "reading a book",
    "playing outside",
    "sleeping on a couch",
    "painting a fence",
    "singing loudly",
    "riding uphill",
    "walking home",
];

const PLACES: [&str; 5] = ["old bridge", "train station", "city park", "harbor", "market square"];

const TEMPLATES: [&str; 12] = [
    "{S} {be} {V} right now.",
    "Right now, {s} {be} {V}.",
    "At the moment {s} {be} {V}.",
    "{S} {be} busy {V}.",
    "{S} {be} currently {V}.",
    "It is clear that {s} {be} {V}.",
    "We can see that {s} {be} {V}.",
    "{S} {be} {V} at this time.",
    "{S} {be} {V} today.",
    "Currently, {s} {be} {V}.",
    "{S} {be} seen {V}.",
    "{S} {be} out {V}.",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlipPlan {
    None,
    Relaxed,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plan {
    Misclassified,
    Excluded,
    /// Generation script index (0..3) and the designed flip.
    Evaluated(usize, FlipPlan),
}

#[derive(Debug, Clone)]
pub struct FixtureRecord {
    pub dataset_id: &'static str,
    pub index: usize,
    pub premise: String,
    pub hypothesis: String,
    pub gold: Label,
    pub plan: Plan,
}

#[derive(Clone, Copy)]
enum Cand {
    Pass(usize),
    FailBackward(usize),
    FailForward(usize),
    /// The hypothesis itself, lowercased without its final period.
    CopyOfHypothesis,
    /// An earlier template, uppercased.
    CopyOf(usize),
}

fn label_at(i: usize) -> Label {
    Label::ALL[i % 3]
}

fn gold_for(dataset: &str, index: usize, plan: Plan) -> Label {
    use Label::*;
    match plan {
        Plan::Evaluated(_, FlipPlan::Relaxed) => [Entailment, Contradiction][index % 2],
        Plan::Evaluated(_, FlipPlan::Strict) if dataset == "b" => [Neutral, Entailment, Contradiction][index % 3],
        _ => label_at(index),
    }
}

fn plan_for(dataset: &str, index: usize) -> Plan {
    let (miss, excl, strict, relaxed) = match dataset {
        "a" => (5, 5, 6, 6),
        _ => (5, 0, 3, 3),
    };
    let mut i = index;
    if i < miss {
        return Plan::Misclassified;
    }
    i -= miss;
    if i < excl {
        return Plan::Excluded;
    }
    i -= excl;
    let flip = if i < strict {
        FlipPlan::Strict
    } else if i < strict + relaxed {
        FlipPlan::Relaxed
    } else {
        FlipPlan::None
    };
    Plan::Evaluated(index % 3, flip)
}

/// The 60 designed records in file order.
pub fn records() -> Vec<FixtureRecord> {
    let mut out = Vec::new();
    for (dataset, count, offset) in [("a", 40, 0), ("b", 20, 40)] {
        for index in 0..count {
            let g = offset + index;
            let (subject, be) = SUBJECTS[g % 8];
            let activity = ACTIVITIES[g / 8];
            let plan = plan_for(dataset, index);
            out.push(FixtureRecord {
                dataset_id: dataset,
                index,
                premise: format!(
                    "{subject} {be} {activity} near the {} while friends watch.",
                    PLACES[g % PLACES.len()]
                ),
                hypothesis: format!("{subject} {be} {activity}."),
                gold: gold_for(dataset, index, plan),
                plan,
            });
        }
    }
    out
}

fn template(record: &FixtureRecord, t: usize) -> String {
    let g = if record.dataset_id == "a" { record.index } else { 40 + record.index };
    let (subject, be) = SUBJECTS[g % 8];
    let mut lower = subject.to_string();
    lower[..1].make_ascii_lowercase();
    TEMPLATES[t]
        .replace("{S}", subject)
        .replace("{s}", &lower)
        .replace("{be}", be)
        .replace("{V}", ACTIVITIES[g / 8])
}

fn script(plan: Plan) -> Vec<Vec<Cand>> {
    use Cand::*;
    match plan {
        Plan::Misclassified => Vec::new(),
        Plan::Excluded => vec![
            vec![FailBackward(0), FailBackward(1), FailForward(2)],
            vec![],
            vec![FailForward(3), FailBackward(4)],
        ],
        Plan::Evaluated(0, _) => vec![vec![
            Pass(0),
            FailBackward(1),
            Pass(2),
            CopyOfHypothesis,
            Pass(3),
            FailForward(4),
            Pass(5),
            Pass(6),
        ]],
        Plan::Evaluated(1, _) => vec![
            vec![Pass(0), Pass(1), FailBackward(2), Pass(3)],
            vec![],
            vec![FailForward(4), Pass(5), Pass(6), Pass(7)],
        ],
        Plan::Evaluated(_, _) => vec![
            vec![Pass(0), FailBackward(1), FailForward(2)],
            vec![CopyOf(0), Pass(3)],
            vec![FailBackward(4)],
        ],
    }
}

fn confidence(seed: usize) -> f64 {
    0.55 + 0.04 * ((seed * 7) % 10) as f64
}

/// Distribution with argmax `label` at `conf`; the rest split 70/30.
fn dist(label: Label, conf: f64) -> [f64; 3] {
    let rest = 1.0 - conf;
    let mut p = [0.0; 3];
    p[label.index()] = conf;
    p[(label.index() + 1) % 3] = rest * 0.7;
    p[(label.index() + 2) % 3] = rest * 0.3;
    p
}

/// Label the classifier gives to the `j`-th accepted variation (1-based, of `m`).
fn varied_label(gold: Label, flip: FlipPlan, j: usize, m: usize) -> Label {
    use Label::*;
    match flip {
        FlipPlan::None => gold,
        FlipPlan::Relaxed if j == m => Neutral,
        FlipPlan::Strict if j == m => match gold {
            Entailment => Contradiction,
            Contradiction | Neutral => Entailment,
        },
        FlipPlan::Strict if j == 1 && gold != Neutral => Neutral,
        _ => gold,
    }
}

struct Tables {
    nli: Vec<serde_json::Value>,
    generator: Vec<serde_json::Value>,
}

fn tables(records: &[FixtureRecord]) -> Tables {
    let mut nli = Vec::new();
    let mut generator = Vec::new();
    let row = |p: &str, h: &str, probs: [f64; 3]| {
        json!({"premise": p, "hypothesis": h, "probs": {
            "entailment": probs[0], "neutral": probs[1], "contradiction": probs[2]}})
    };
    for (n, r) in records.iter().enumerate() {
        let predicted = match r.plan {
            Plan::Misclassified => Label::ALL[(r.gold.index() + 1) % 3],
            _ => r.gold,
        };
        nli.push(row(&r.premise, &r.hypothesis, dist(predicted, confidence(n))));
        let rounds = script(r.plan);
        if rounds.is_empty() {
            continue;
        }
        let passing: Vec<usize> = rounds
            .iter()
            .flatten()
            .filter_map(|c| match c {
                Cand::Pass(t) => Some(*t),
                _ => None,
            })
            .take(K)
            .collect();
        let mut texts = Vec::new();
        for round in &rounds {
            let mut out = Vec::new();
            for c in round {
                let text = match *c {
                    Cand::Pass(t) => {
                        let v = template(r, t);
                        nli.push(row(&r.hypothesis, &v, dist(Label::Entailment, 0.8 + 0.01 * t as f64)));
                        nli.push(row(&v, &r.hypothesis, dist(Label::Entailment, 0.75 + 0.02 * t as f64)));
                        v
                    }
                    Cand::FailBackward(t) => {
                        let v = template(r, t);
                        nli.push(row(&r.hypothesis, &v, dist(Label::Entailment, 0.7)));
                        nli.push(row(&v, &r.hypothesis, dist(Label::Neutral, 0.6)));
                        v
                    }
                    Cand::FailForward(t) => {
                        let v = template(r, t);
                        nli.push(row(&r.hypothesis, &v, dist(Label::Neutral, 0.65)));
                        nli.push(row(&v, &r.hypothesis, dist(Label::Entailment, 0.9)));
                        v
                    }
                    Cand::CopyOfHypothesis => r.hypothesis.trim_end_matches('.').to_lowercase(),
                    Cand::CopyOf(t) => template(r, t).to_uppercase(),
                };
                out.push(text);
            }
            texts.push(out);
        }
        if let Plan::Evaluated(_, flip) = r.plan {
            for (j, t) in passing.iter().enumerate() {
                let label = varied_label(r.gold, flip, j + 1, passing.len());
                nli.push(row(&r.premise, &template(r, *t), dist(label, confidence(n + j + 1))));
            }
        }
        generator.push(json!({"hypothesis": r.hypothesis, "rounds": texts}));
    }
    Tables { nli, generator }
}

fn jsonl(rows: &[serde_json::Value]) -> String {
    rows.iter().map(|r| format!("{r}\n")).collect()
}

fn config_text() -> String {
    format!(
        r#"out_dir = "out"
k = {K}
budget = {BUDGET}
ks_mode = "discrete"
fuzzy_threshold = 0.8

[seeds]
subset = 20240229
annotation = 7

[[datasets]]
dataset_id = "a"
path = "data/a.jsonl"
format = "jsonl"
fields = {{ premise = "premise", hypothesis = "hypothesis", label = "label", id = "uid" }}
labels = {{ "0" = "entailment", "1" = "neutral", "2" = "contradiction" }}

[[datasets]]
dataset_id = "b"
path = "data/b.tsv"
format = "delimited"
delimiter = "\t"
fields = {{ premise = "sentence1", hypothesis = "sentence2", label = "gold_label" }}
labels = {{ entailment = "entailment", neutral = "neutral", contradiction = "contradiction" }}
sample_count = 20

[backend]
kind = "mock"
nli_models = ["{MODEL}"]
generation_model = "mock-gen"
embedding_model = "mock-embed"
max_inflight = 4
cache_path = "cache/responses.jsonl"

[backend.mock]
nli_table = "mock/nli.jsonl"
generator_table = "mock/generator.jsonl"
nli_default = [{}, {}, {}]
embed_dim = 64

[annotation]
annotators = ["ann-1", "ann-2"]
sample = 20
"#,
        NLI_DEFAULT[0], NLI_DEFAULT[1], NLI_DEFAULT[2]
    )
}

/// Writes the corpus, mock tables and config under `dir`; returns the config path.
pub fn write_fixture(dir: &Path) -> Result<PathBuf> {
    let records = records();
    for sub in ["data", "mock"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }

    let mut a = String::new();
    let mut b = String::from("sentence1\tsentence2\tgold_label\n");
    for r in &records {
        match r.dataset_id {
            "a" => {
                a.push_str(&json!({"uid": format!("a-{:02}", r.index), "premise": r.premise,
                    "hypothesis": r.hypothesis, "label": r.gold.index()}).to_string());
                a.push('\n');
                if r.index == 19 || r.index == 39 {
                    let _ = writeln!(
                        a,
                        "{}",
                        json!({"uid": format!("a-x{}", r.index), "premise": "Nobody agreed on this one.",
                            "hypothesis": "It is unclear.", "label": -1})
                    );
                }
            }
            _ => {
                let _ = writeln!(b, "{}\t{}\t{}", r.premise, r.hypothesis, r.gold.name());
            }
        }
    }
    let t = tables(&records);
    let files = [
        ("data/a.jsonl", a),
        ("data/b.tsv", b),
        ("mock/nli.jsonl", jsonl(&t.nli)),
        ("mock/generator.jsonl", jsonl(&t.generator)),
        (CONFIG_FILE, config_text()),
    ];
    for (name, text) in files {
        let p = dir.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(dir.join(CONFIG_FILE))
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: RunReport,
    pub report_json: String,
    pub report_md: String,
    pub stats: RunStats,
}

fn run_once(config: RunConfig) -> Result<RunOutput> {
    let pipeline = Pipeline::new(config)?;
    let report = pipeline.run_all().and_then(|_| pipeline.report())?;
    let read = |name: &str| {
        let p = pipeline.out_dir().join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    Ok(RunOutput {
        report,
        report_json: read(artifacts::REPORT_JSON)?,
        report_md: read(artifacts::REPORT_MD)?,
        stats: pipeline.run_stats(),
    })
}

#[derive(Debug, Clone)]
pub struct SelftestOutcome {
    pub cold: RunOutput,
    pub warm: RunOutput,
    pub golden_json_matches: bool,
    pub golden_md_matches: bool,
}

impl SelftestOutcome {
    pub fn warm_identical(&self) -> bool {
        self.cold.report_json == self.warm.report_json && self.cold.report_md == self.warm.report_md
    }

    pub fn passed(&self) -> bool {
        self.golden_json_matches
            && self.golden_md_matches
            && self.warm_identical()
            && self.warm.stats.backend_calls == Some(0)
    }

    pub fn summary(&self) -> Vec<String> {
        let yes = |b: bool| if b { "ok" } else { "MISMATCH" };
        vec![
            format!("report.json vs golden: {}", yes(self.golden_json_matches)),
            format!("report.md vs golden: {}", yes(self.golden_md_matches)),
            format!(
                "cold run: {} backend calls; warm run: {} backend calls",
                self.cold.stats.backend_calls.unwrap_or(0),
                self.warm.stats.backend_calls.unwrap_or(0)
            ),
            format!("warm run byte-identical: {}", yes(self.warm_identical())),
        ]
    }
}

/// Writes the fixture into `dir`, runs the pipeline cold into `dir/out` and
/// again on the warm cache into `dir/out-warm`, and compares with the golden report.
pub fn run(dir: &Path) -> Result<SelftestOutcome> {
    let config_path = write_fixture(dir)?;
    let config = RunConfig::load(&config_path)?;
    let mut warm_config = config.clone();
    warm_config.out_dir = dir.join("out-warm");
    let cold = run_once(config)?;
    let warm = run_once(warm_config)?;
    Ok(SelftestOutcome {
        golden_json_matches: cold.report_json == GOLDEN_REPORT_JSON,
        golden_md_matches: cold.report_md == GOLDEN_REPORT_MD,
        cold,
        warm,
    })
}

/// Replaces the golden files with the output of a fresh cold run.
pub fn bless(dir: &Path) -> Result<()> {
    let outcome = run(dir)?;
    let golden = Path::new(GOLDEN_DIR);
    std::fs::create_dir_all(golden).map_err(|e| Error::io(golden, e))?;
    for (name, text) in [
        (artifacts::REPORT_JSON, &outcome.cold.report_json),
        (artifacts::REPORT_MD, &outcome.cold.report_md),
    ] {
        let p = golden.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}
