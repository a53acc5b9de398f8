//! Retrieval metrics over Hamming rankings: mean average precision
//! (optionally truncated to the top N), precision within a Hamming radius,
//! micro-averaged precision-recall curves, and precision at top-k.
//!
//! Per-query work runs in parallel; every reduction happens afterwards in
//! query order, so results do not depend on the thread count.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::{radius_search, rank_all, CodeDatabase, LabelSet};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceRule {
    /// Relevant when the first labels are equal.
    #[default]
    SingleLabel,
    /// Relevant when at least one label is shared.
    MultilabelShareAny,
}

impl RelevanceRule {
    pub fn relevant(self, a: &LabelSet, b: &LabelSet) -> bool {
        match self {
            RelevanceRule::SingleLabel => matches!((a.first(), b.first()), (Some(x), Some(y)) if x == y),
            RelevanceRule::MultilabelShareAny => a.iter().any(|l| b.contains(l)),
        }
    }

    fn mask(self, query: &LabelSet, db: &CodeDatabase) -> Vec<bool> {
        db.labels().iter().map(|l| self.relevant(query, l)).collect()
    }
}

/// Normaliser of truncated average precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApDenominator {
    /// Number of relevant items inside the top N.
    #[default]
    RelevantRetrieved,
    /// Total relevant items, capped at N.
    TotalRelevant,
}

/// How a query whose radius search returns nothing is scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyRetrieval {
    #[default]
    Zero,
    Skip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub relevance: RelevanceRule,
    /// Truncate MAP to the top N returned items.
    pub truncate: Option<usize>,
    pub ap_denominator: ApDenominator,
    pub radius: u32,
    pub empty_retrieval: EmptyRetrieval,
    /// Cutoffs for precision at top-k; values above the database size are
    /// dropped by [`evaluate`].
    pub topk: Vec<usize>,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            relevance: RelevanceRule::SingleLabel,
            truncate: None,
            ap_denominator: ApDenominator::RelevantRetrieved,
            radius: 2,
            empty_retrieval: EmptyRetrieval::Zero,
            topk: vec![1, 10, 50, 100, 200, 500, 1000],
        }
    }
}

/// Average precision of one ranking.
///
/// `relevant[i]` marks database item `i`. Untruncated, the sum of
/// precision@p over relevant positions is divided by the number of relevant
/// items. With `truncate = Some(n)` only the first `n` positions count and
/// the divisor follows `denominator`; a truncated list without relevant
/// items scores 0.
pub fn average_precision(
    ranking: &[usize],
    relevant: &[bool],
    truncate: Option<usize>,
    denominator: ApDenominator,
) -> Result<f64> {
    let total = relevant.iter().filter(|&&r| r).count();
    if total == 0 {
        return Err(Error::Undefined("query has no relevant items".into()));
    }
    let cutoff = truncate.map_or(ranking.len(), |n| n.min(ranking.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (p, &i) in ranking[..cutoff].iter().enumerate() {
        if relevant[i] {
            hits += 1;
            sum += hits as f64 / (p + 1) as f64;
        }
    }
    let denom = match truncate {
        None => total,
        Some(n) => match denominator {
            ApDenominator::RelevantRetrieved => hits,
            ApDenominator::TotalRelevant => total.min(n),
        },
    };
    Ok(if denom == 0 { 0.0 } else { sum / denom as f64 })
}

/// MAP together with the per-query values it averages.
#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// `None` for queries without relevant items, which are skipped.
    pub per_query: Vec<Option<f64>>,
}

fn check_pair(queries: &CodeDatabase, db: &CodeDatabase) -> Result<()> {
    if queries.bits() != db.bits() {
        return Err(Error::LengthMismatch {
            expected: db.bits(),
            actual: queries.bits(),
        });
    }
    if db.is_empty() {
        return Err(Error::Domain("database is empty".into()));
    }
    Ok(())
}

pub fn mean_average_precision(
    queries: &CodeDatabase,
    db: &CodeDatabase,
    rule: RelevanceRule,
    truncate: Option<usize>,
    denominator: ApDenominator,
) -> Result<MapResult> {
    check_pair(queries, db)?;
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let ranking = rank_all(&queries.code(qi), db)?;
            let mask = rule.mask(&queries.labels()[qi], db);
            match average_precision(&ranking, &mask, truncate, denominator) {
                Ok(ap) => Ok(Some(ap)),
                Err(Error::Undefined(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let defined: Vec<f64> = per_query.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::Undefined("no query has a relevant item".into()));
    }
    let map = defined.iter().sum::<f64>() / defined.len() as f64;
    Ok(MapResult { map, per_query })
}

/// Mean precision of the items retrieved within Hamming radius `r`.
pub fn precision_within_radius(
    queries: &CodeDatabase,
    db: &CodeDatabase,
    rule: RelevanceRule,
    r: u32,
    empty: EmptyRetrieval,
) -> Result<f64> {
    check_pair(queries, db)?;
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|qi| {
            let found = radius_search(&queries.code(qi), db, r)?;
            if found.is_empty() {
                return Ok(match empty {
                    EmptyRetrieval::Zero => Some(0.0),
                    EmptyRetrieval::Skip => None,
                });
            }
            let ql = &queries.labels()[qi];
            let rel = found
                .iter()
                .filter(|&&i| rule.relevant(ql, &db.labels()[i]))
                .count();
            Ok(Some(rel as f64 / found.len() as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let counted: Vec<f64> = per_query.into_iter().flatten().collect();
    Ok(if counted.is_empty() {
        0.0
    } else {
        counted.iter().sum::<f64>() / counted.len() as f64
    })
}

/// Relevant hits within each prefix of the ranking: `out[k - 1]` counts the
/// relevant items among the top k.
fn cumulative_hits(queries: &CodeDatabase, qi: usize, db: &CodeDatabase, rule: RelevanceRule) -> Result<Vec<u64>> {
    let ranking = rank_all(&queries.code(qi), db)?;
    let ql = &queries.labels()[qi];
    let mut hits = 0u64;
    Ok(ranking
        .iter()
        .map(|&i| {
            hits += u64::from(rule.relevant(ql, &db.labels()[i]));
            hits
        })
        .collect())
}

/// Micro-averaged `(recall, precision)` at every cutoff `k = 1..=|db|`.
pub fn precision_recall_curve(
    queries: &CodeDatabase,
    db: &CodeDatabase,
    rule: RelevanceRule,
) -> Result<Vec<(f64, f64)>> {
    check_pair(queries, db)?;
    if queries.is_empty() {
        return Err(Error::Undefined("no queries".into()));
    }
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|qi| cumulative_hits(queries, qi, db, rule))
        .collect::<Result<Vec<_>>>()?;
    let n = db.len();
    let mut total = vec![0u64; n];
    for hits in &per_query {
        for (t, h) in total.iter_mut().zip(hits) {
            *t += h;
        }
    }
    let relevant = total[n - 1];
    if relevant == 0 {
        return Err(Error::Undefined("no query has a relevant item".into()));
    }
    let nq = queries.len() as f64;
    Ok(total
        .iter()
        .enumerate()
        .map(|(k, &h)| (h as f64 / relevant as f64, h as f64 / ((k + 1) as f64 * nq)))
        .collect())
}

/// Mean over queries of the relevant fraction among the top `k` items.
pub fn precision_at_topk(
    queries: &CodeDatabase,
    db: &CodeDatabase,
    rule: RelevanceRule,
    ks: &[usize],
) -> Result<Vec<(usize, f64)>> {
    check_pair(queries, db)?;
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > db.len()) {
        return Err(Error::Domain(format!(
            "top-k cutoff {k} outside 1..={}",
            db.len()
        )));
    }
    if queries.is_empty() {
        return Err(Error::Undefined("no queries".into()));
    }
    let per_query = (0..queries.len())
        .into_par_iter()
        .map(|qi| cumulative_hits(queries, qi, db, rule))
        .collect::<Result<Vec<_>>>()?;
    Ok(ks
        .iter()
        .map(|&k| {
            let sum: f64 = per_query
                .iter()
                .map(|h| h[k - 1] as f64 / k as f64)
                .sum();
            (k, sum / queries.len() as f64)
        })
        .collect())
}

/// All four metrics for one query/database pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bits: usize,
    pub queries: usize,
    pub database: usize,
    pub map: f64,
    pub map_truncate: Option<usize>,
    pub precision_at_radius: f64,
    pub radius: u32,
    pub per_query_ap: Vec<Option<f64>>,
    /// Query positions skipped by MAP because nothing is relevant to them.
    pub skipped_queries: Vec<usize>,
    #[serde(skip)]
    pub pr_curve: Vec<(f64, f64)>,
    #[serde(skip)]
    pub precision_at_topk: Vec<(usize, f64)>,
}

pub fn evaluate(queries: &CodeDatabase, db: &CodeDatabase, opts: &MetricOptions) -> Result<MetricReport> {
    let map = mean_average_precision(queries, db, opts.relevance, opts.truncate, opts.ap_denominator)?;
    let precision_at_radius =
        precision_within_radius(queries, db, opts.relevance, opts.radius, opts.empty_retrieval)?;
    let pr_curve = precision_recall_curve(queries, db, opts.relevance)?;
    let ks: Vec<usize> = opts.topk.iter().copied().filter(|&k| k >= 1 && k <= db.len()).collect();
    let precision_at_topk = precision_at_topk(queries, db, opts.relevance, &ks)?;
    let skipped_queries = map
        .per_query
        .iter()
        .enumerate()
        .filter(|(_, ap)| ap.is_none())
        .map(|(i, _)| i)
        .collect();
    Ok(MetricReport {
        bits: db.bits(),
        queries: queries.len(),
        database: db.len(),
        map: map.map,
        map_truncate: opts.truncate,
        precision_at_radius,
        radius: opts.radius,
        per_query_ap: map.per_query,
        skipped_queries,
        pr_curve,
        precision_at_topk,
    })
}

pub const REPORT_FILE: &str = "report.json";
pub const PR_CURVE_FILE: &str = "pr_curve.csv";
pub const TOPK_FILE: &str = "topk.csv";

impl MetricReport {
    pub fn pr_curve_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr_curve {
            let _ = writeln!(s, "{r},{p}");
        }
        s
    }

    pub fn topk_csv(&self) -> String {
        let mut s = String::from("k,precision\n");
        for (k, p) in &self.precision_at_topk {
            let _ = writeln!(s, "{k},{p}");
        }
        s
    }

    /// Writes `report.json`, `pr_curve.csv` and `topk.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serialises");
        write_atomic(&dir.join(REPORT_FILE), json.as_bytes())?;
        write_atomic(&dir.join(PR_CURVE_FILE), self.pr_curve_csv().as_bytes())?;
        write_atomic(&dir.join(TOPK_FILE), self.topk_csv().as_bytes())?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let json = fs::read_to_string(dir.join(REPORT_FILE))?;
        let mut report: MetricReport =
            serde_json::from_str(&json).map_err(|e| Error::Format(format!("report: {e}")))?;
        report.pr_curve = parse_pairs(&fs::read_to_string(dir.join(PR_CURVE_FILE))?, "recall,precision")?;
        report.precision_at_topk = parse_pairs::<usize>(&fs::read_to_string(dir.join(TOPK_FILE))?, "k,precision")?;
        Ok(report)
    }
}

fn parse_pairs<A: std::str::FromStr>(text: &str, header: &str) -> Result<Vec<(A, f64)>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(header) {
        return Err(Error::Format(format!("expected header `{header}`")));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(row, l)| {
            let (a, b) = l
                .split_once(',')
                .ok_or_else(|| Error::Format(format!("row {row}: expected two columns")))?;
            let a = a.trim().parse::<A>().map_err(|_| Error::Format(format!("row {row}: bad value")))?;
            let b = b.trim().parse::<f64>().map_err(|_| Error::Format(format!("row {row}: bad value")))?;
            Ok((a, b))
        })
        .collect()
}
