use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::metrics::{average_precision_at_k, hit_at_k, ndcg_at_k, positives, reciprocal_rank, Grades};
use crate::error::{Error, Result};
use crate::io::tsv::RankingRows;
use crate::par;
use crate::retrieval::RankedList;

/// Graded judgments keyed by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RelevanceJudgments {
    pub queries: BTreeMap<String, Grades>,
}

impl RelevanceJudgments {
    pub fn from_triples(triples: impl IntoIterator<Item = (String, String, f64)>) -> Self {
        let mut queries: BTreeMap<String, Grades> = BTreeMap::new();
        for (q, item, g) in triples {
            queries.entry(q).or_default().insert(item, g);
        }
        Self { queries }
    }

    pub fn get(&self, query: &str) -> Option<&Grades> {
        self.queries.get(query)
    }
}

/// Ranked item ids keyed by query id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Run {
    pub rankings: BTreeMap<String, Vec<String>>,
}

impl Run {
    pub fn from_ranked_lists(lists: &[RankedList]) -> Self {
        Self {
            rankings: lists
                .iter()
                .map(|l| (l.query_id.clone(), l.entries.iter().map(|e| e.id.clone()).collect()))
                .collect(),
        }
    }

    pub fn from_rows(rows: Vec<RankingRows>) -> Self {
        Self {
            rankings: rows
                .into_iter()
                .map(|r| (r.query_id, r.items.into_iter().map(|(id, _)| id).collect()))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub ap_k: usize,
    pub ndcg_k: usize,
    pub recall_k: usize,
    /// Grade an item needs to count for recall@k.
    pub recall_grade: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ap_k: 50,
            ndcg_k: 50,
            recall_k: 1,
            recall_grade: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryMetrics {
    pub ap: f64,
    pub ndcg: f64,
    pub rr: f64,
    pub recall: f64,
}

impl QueryMetrics {
    fn values(&self) -> [f64; 4] {
        [self.ap, self.ndcg, self.rr, self.recall]
    }
}

/// Per-query metrics and their macro means over queries with at least one
/// positive judgment.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub settings: EvalSettings,
    pub per_query: BTreeMap<String, QueryMetrics>,
    /// Ranked or judged queries left out for lack of positives.
    pub excluded: Vec<String>,
}

impl MetricReport {
    pub fn metric_names(&self) -> [String; 4] {
        let s = &self.settings;
        [
            format!("map@{}", s.ap_k),
            format!("ndcg@{}", s.ndcg_k),
            "mrr".to_string(),
            format!("recall@{}", s.recall_k),
        ]
    }

    pub fn query_count(&self) -> usize {
        self.per_query.len()
    }

    /// Means in the order of [`MetricReport::metric_names`].
    pub fn means(&self) -> [f64; 4] {
        let n = self.per_query.len();
        let mut sums = [0.0; 4];
        for m in self.per_query.values() {
            for (s, v) in sums.iter_mut().zip(m.values()) {
                *s += v;
            }
        }
        sums.map(|s| if n == 0 { 0.0 } else { s / n as f64 })
    }

    pub fn mean_ap(&self) -> f64 {
        self.means()[0]
    }

    pub fn mean_ndcg(&self) -> f64 {
        self.means()[1]
    }

    pub fn mrr(&self) -> f64 {
        self.means()[2]
    }

    pub fn recall(&self) -> f64 {
        self.means()[3]
    }

    /// Header, one row per query, then `mean` and `excluded` rows.
    pub fn to_tsv(&self) -> String {
        let names = self.metric_names();
        let mut out = format!("query_id\t{}\n", names.join("\t"));
        for (q, m) in &self.per_query {
            let vals: Vec<String> = m.values().iter().map(|v| format!("{v:.6}")).collect();
            let _ = writeln!(out, "{q}\t{}", vals.join("\t"));
        }
        let means: Vec<String> = self.means().iter().map(|v| format!("{v:.6}")).collect();
        let _ = writeln!(out, "mean\t{}", means.join("\t"));
        let _ = writeln!(out, "# queries\t{}", self.per_query.len());
        let _ = writeln!(out, "# excluded\t{}", self.excluded.len());
        out
    }
}

/// Scores `run` against `judgments`. Judged queries missing from the run
/// count as empty rankings.
pub fn evaluate(run: &Run, judgments: &RelevanceJudgments, settings: EvalSettings) -> Result<MetricReport> {
    if settings.ap_k == 0 || settings.ndcg_k == 0 || settings.recall_k == 0 {
        return Err(Error::Usage("metric cutoffs must be at least 1".into()));
    }
    let queries: BTreeSet<&String> = run.rankings.keys().chain(judgments.queries.keys()).collect();
    let queries: Vec<&String> = queries.into_iter().collect();
    let empty = Grades::new();
    let results = par::map_indexed(queries.len(), |i| {
        let q = queries[i];
        let judg = judgments.get(q).unwrap_or(&empty);
        let ranking: &[String] = run.rankings.get(q).map_or(&[], Vec::as_slice);
        if positives(judg) == 0 {
            return None;
        }
        Some(QueryMetrics {
            ap: average_precision_at_k(ranking, judg, settings.ap_k)?,
            ndcg: ndcg_at_k(ranking, judg, settings.ndcg_k)?,
            rr: reciprocal_rank(ranking, judg),
            recall: hit_at_k(ranking, judg, settings.recall_k, settings.recall_grade),
        })
    });
    let mut per_query = BTreeMap::new();
    let mut excluded = Vec::new();
    for (q, m) in queries.into_iter().zip(results) {
        match m {
            Some(m) => {
                per_query.insert(q.clone(), m);
            }
            None => excluded.push(q.clone()),
        }
    }
    Ok(MetricReport {
        settings,
        per_query,
        excluded,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricDelta {
    pub metric: String,
    pub baseline: f64,
    pub adapted: f64,
    pub delta: f64,
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
}

/// Side-by-side means and per-query win/loss counts of two runs.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub queries: usize,
    pub rows: Vec<MetricDelta>,
}

impl Comparison {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tbaseline\tadapted\tdelta\twins\tlosses\tties\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:+.6}\t{}\t{}\t{}",
                r.metric, r.baseline, r.adapted, r.delta, r.wins, r.losses, r.ties
            );
        }
        out
    }
}

pub fn compare_runs(baseline: &MetricReport, adapted: &MetricReport) -> Result<Comparison> {
    if baseline.settings != adapted.settings {
        return Err(Error::Config(format!(
            "reports use different cutoffs: {:?} vs {:?}",
            baseline.settings, adapted.settings
        )));
    }
    let a: BTreeSet<&String> = baseline.per_query.keys().collect();
    let b: BTreeSet<&String> = adapted.per_query.keys().collect();
    let diff: Vec<String> = a.symmetric_difference(&b).map(|s| (*s).clone()).collect();
    if !diff.is_empty() {
        return Err(Error::QueryMismatch(diff));
    }
    let (mb, ma) = (baseline.means(), adapted.means());
    let rows = baseline
        .metric_names()
        .into_iter()
        .enumerate()
        .map(|(m, metric)| {
            let (mut wins, mut losses, mut ties) = (0, 0, 0);
            for (q, bm) in &baseline.per_query {
                let (x, y) = (bm.values()[m], adapted.per_query[q].values()[m]);
                if y > x {
                    wins += 1;
                } else if y < x {
                    losses += 1;
                } else {
                    ties += 1;
                }
            }
            MetricDelta {
                metric,
                baseline: mb[m],
                adapted: ma[m],
                delta: ma[m] - mb[m],
                wins,
                losses,
                ties,
            }
        })
        .collect();
    Ok(Comparison {
        queries: baseline.per_query.len(),
        rows,
    })
}
