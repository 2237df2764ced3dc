//! Ranking metrics at fixed cutoffs: precision, recall and F-beta, macro
//! averaged over records, for both gold-label and human-judged evaluation.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RankingResult;

/// Judged pool depth per record.
pub const JUDGMENT_DEPTH: usize = 20;

const MAX_LISTED: usize = 20;

/// Gold subject codes per article id, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GoldLabels {
    ids: Vec<String>,
    sets: HashMap<String, HashSet<String>>,
}

impl GoldLabels {
    pub fn insert(&mut self, id: String, codes: Vec<String>) -> Result<()> {
        if codes.is_empty() {
            return Err(Error::Validation(format!("gold record '{id}' has no subjects")));
        }
        if codes.iter().any(|c| c.is_empty()) {
            return Err(Error::Validation(format!("gold record '{id}' has an empty code")));
        }
        if self.sets.contains_key(&id) {
            return Err(Error::Validation(format!("duplicate gold record '{id}'")));
        }
        self.ids.push(id.clone());
        self.sets.insert(id, codes.into_iter().collect());
        Ok(())
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&HashSet<String>> {
        self.sets.get(id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgment {
    /// Correct.
    Y,
    /// Irrelevant but admissible.
    I,
    /// Incorrect (also a blank label).
    N,
}

/// Human labels per (record, subject code) over the judged pool.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JudgmentSet {
    records: Vec<String>,
    labels: HashMap<String, HashMap<String, Judgment>>,
}

impl JudgmentSet {
    /// Re-judging a pair with the same label is a no-op; a conflicting
    /// label is an error.
    pub fn insert(&mut self, record: &str, code: &str, j: Judgment) -> Result<()> {
        if !self.labels.contains_key(record) {
            self.records.push(record.to_string());
        }
        let per = self.labels.entry(record.to_string()).or_default();
        match per.get(code) {
            Some(prev) if *prev != j => Err(Error::Validation(format!(
                "conflicting labels {prev:?} and {j:?} for ({record}, {code})"
            ))),
            _ => {
                per.insert(code.to_string(), j);
                Ok(())
            }
        }
    }

    pub fn label(&self, record: &str, code: &str) -> Option<Judgment> {
        self.labels.get(record)?.get(code).copied()
    }

    pub fn records(&self) -> &[String] {
        &self.records
    }

    pub fn depth(&self) -> usize {
        JUDGMENT_DEPTH
    }

    /// Codes of `record` counted as correct under `case` (1: Y or I, 2: Y).
    pub fn relevant(&self, record: &str, case: JudgedCase) -> HashSet<String> {
        self.labels
            .get(record)
            .map(|m| {
                m.iter()
                    .filter(|(_, j)| case.accepts(**j))
                    .map(|(c, _)| c.clone())
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JudgedCase {
    /// Y and I count as correct.
    Lenient,
    /// Only Y counts.
    Strict,
}

impl JudgedCase {
    pub fn from_number(n: u32) -> Result<Self> {
        match n {
            1 => Ok(JudgedCase::Lenient),
            2 => Ok(JudgedCase::Strict),
            _ => Err(Error::config(format!("case must be 1 or 2, got {n}"))),
        }
    }

    pub fn number(self) -> u32 {
        match self {
            JudgedCase::Lenient => 1,
            JudgedCase::Strict => 2,
        }
    }

    fn accepts(self, j: Judgment) -> bool {
        matches!((self, j), (_, Judgment::Y) | (JudgedCase::Lenient, Judgment::I))
    }
}

/// Hits among the first `k` codes.
pub fn hits_at_k<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<String>, k: usize) -> usize {
    ranked.iter().take(k).filter(|c| relevant.contains(c.as_ref())).count()
}

/// `(hits / k, hits / |relevant|)`. Slots missing from a short ranking count
/// as misses.
pub fn pr_at_k<S: AsRef<str>>(ranked: &[S], relevant: &HashSet<String>, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::contract("cutoff k must be >= 1"));
    }
    if relevant.is_empty() {
        return Err(Error::Validation("recall undefined for an empty relevant set".into()));
    }
    let hits = hits_at_k(ranked, relevant, k) as f64;
    Ok((hits / k as f64, hits / relevant.len() as f64))
}

pub fn f_beta(p: f64, r: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let denom = b2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + b2) * p * r / denom
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Parses `start:end:step` into the inclusive list of cutoffs.
pub fn parse_cutoffs(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || Error::config(format!("cutoffs '{s}' must be start:end:step with 1 <= start <= end, step >= 1"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let nums: Vec<usize> = parts
        .iter()
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad())?;
    let (start, end, step) = (nums[0], nums[1], nums[2]);
    if start == 0 || step == 0 || start > end {
        return Err(bad());
    }
    Ok((start..=end).step_by(step).collect())
}

fn check_cutoffs(cutoffs: &[usize]) -> Result<()> {
    if cutoffs.is_empty() {
        return Err(Error::config("no cutoffs"));
    }
    if cutoffs[0] == 0 || cutoffs.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config(format!("cutoffs {cutoffs:?} must be positive and strictly ascending")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportKind {
    Quantitative,
    Judged { case: u32 },
}

/// Per-cutoff macro averages. `f1[i]` combines `precision[i]` and
/// `recall[i]`; each average is the mean of its column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ReportKind,
    pub records: usize,
    pub cutoffs: Vec<usize>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub average_precision: f64,
    pub average_recall: f64,
    pub average_f1: f64,
}

impl EvalReport {
    fn from_sums(kind: ReportKind, records: usize, cutoffs: &[usize], p_sum: &[f64], r_sum: &[f64]) -> Self {
        let n = records.max(1) as f64;
        let precision: Vec<f64> = p_sum.iter().map(|s| s / n).collect();
        let recall: Vec<f64> = r_sum.iter().map(|s| s / n).collect();
        let f1: Vec<f64> = precision.iter().zip(&recall).map(|(p, r)| f_beta(*p, *r, 1.0)).collect();
        EvalReport {
            kind,
            records,
            cutoffs: cutoffs.to_vec(),
            average_precision: mean(&precision),
            average_recall: mean(&recall),
            average_f1: mean(&f1),
            precision,
            recall,
            f1,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table with one row per cutoff and an averages footer.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let title = match self.kind {
            ReportKind::Quantitative => "quantitative".to_string(),
            ReportKind::Judged { case } => format!("judged, case {case}"),
        };
        let _ = writeln!(s, "{title} ({} records)", self.records);
        let _ = writeln!(s, "{:>6}  {:>9}  {:>9}  {:>9}", "k", "Precision", "Recall", "F1");
        for i in 0..self.cutoffs.len() {
            let _ = writeln!(
                s,
                "{:>6}  {:>9.4}  {:>9.4}  {:>9.4}",
                self.cutoffs[i], self.precision[i], self.recall[i], self.f1[i]
            );
        }
        let _ = writeln!(
            s,
            "{:>6}  {:>9.4}  {:>9.4}  {:>9.4}",
            "avg", self.average_precision, self.average_recall, self.average_f1
        );
        s
    }
}

fn prediction_index(preds: &[RankingResult]) -> HashMap<&str, &RankingResult> {
    preds.iter().map(|p| (p.article_id.as_str(), p)).collect()
}

fn missing_error(what: &str, missing: &[String]) -> Error {
    let listed: Vec<&str> = missing.iter().take(MAX_LISTED).map(String::as_str).collect();
    let more = missing.len().saturating_sub(listed.len());
    let suffix = if more > 0 { format!(" (and {more} more)") } else { String::new() };
    Error::Coverage(format!("{what}: {}{suffix}", listed.join(", ")))
}

/// Scores predictions against gold labels; every gold id must be predicted.
/// Predictions for ids without gold labels are ignored.
pub fn eval_quantitative(preds: &[RankingResult], gold: &GoldLabels, cutoffs: &[usize]) -> Result<EvalReport> {
    check_cutoffs(cutoffs)?;
    let by_id = prediction_index(preds);
    let missing: Vec<String> = gold.ids().iter().filter(|id| !by_id.contains_key(id.as_str())).cloned().collect();
    if !missing.is_empty() {
        return Err(missing_error("no prediction for gold ids", &missing));
    }
    let mut p_sum = vec![0.0; cutoffs.len()];
    let mut r_sum = vec![0.0; cutoffs.len()];
    for id in gold.ids() {
        let relevant = gold.get(id).expect("id listed");
        let codes: Vec<&str> = by_id[id.as_str()].ranked.iter().map(|(c, _)| c.as_str()).collect();
        for (i, &k) in cutoffs.iter().enumerate() {
            let (p, r) = pr_at_k(&codes, relevant, k)?;
            p_sum[i] += p;
            r_sum[i] += r;
        }
    }
    Ok(EvalReport::from_sums(ReportKind::Quantitative, gold.len(), cutoffs, &p_sum, &r_sum))
}

/// Scores predictions against human judgments for every judged record. The
/// recall denominator is the record's relevant count within its judged pool;
/// a record with no relevant codes contributes zero precision and recall.
pub fn eval_judged(
    preds: &[RankingResult],
    judgments: &JudgmentSet,
    case: JudgedCase,
    cutoffs: &[usize],
) -> Result<EvalReport> {
    check_cutoffs(cutoffs)?;
    let max_k = *cutoffs.last().expect("nonempty");
    if max_k > judgments.depth() {
        return Err(Error::config(format!(
            "cutoff {max_k} exceeds judged depth {}",
            judgments.depth()
        )));
    }
    let by_id = prediction_index(preds);
    let missing: Vec<String> = judgments
        .records()
        .iter()
        .filter(|id| !by_id.contains_key(id.as_str()))
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(missing_error("no prediction for judged records", &missing));
    }
    let mut unjudged = Vec::new();
    for id in judgments.records() {
        for (code, _) in by_id[id.as_str()].ranked.iter().take(max_k) {
            if judgments.label(id, code).is_none() {
                unjudged.push(format!("{id}/{code}"));
            }
        }
    }
    if !unjudged.is_empty() {
        return Err(missing_error("unjudged codes inside evaluated cutoffs", &unjudged));
    }

    let mut p_sum = vec![0.0; cutoffs.len()];
    let mut r_sum = vec![0.0; cutoffs.len()];
    for id in judgments.records() {
        let relevant = judgments.relevant(id, case);
        if relevant.is_empty() {
            continue;
        }
        let codes: Vec<&str> = by_id[id.as_str()].ranked.iter().map(|(c, _)| c.as_str()).collect();
        for (i, &k) in cutoffs.iter().enumerate() {
            let (p, r) = pr_at_k(&codes, &relevant, k)?;
            p_sum[i] += p;
            r_sum[i] += r;
        }
    }
    Ok(EvalReport::from_sums(
        ReportKind::Judged { case: case.number() },
        judgments.records().len(),
        cutoffs,
        &p_sum,
        &r_sum,
    ))
}
