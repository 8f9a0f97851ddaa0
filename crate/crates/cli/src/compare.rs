use std::collections::BTreeMap;
use std::fmt;

use lms_fd::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::runner::Summary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub baseline: f64,
    pub candidate: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub baseline_route: String,
    pub candidate_route: String,
    pub pairs: BTreeMap<String, PairDelta>,
    pub mean_delta: f64,
    /// Percentage of pairs where the candidate is strictly better.
    pub win_ratio: f64,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "baseline route: {}, candidate route: {}",
            self.baseline_route, self.candidate_route
        )?;
        writeln!(
            f,
            "{:<12} {:>10} {:>10} {:>8}",
            "pair", "baseline", "candidate", "delta"
        )?;
        for (k, p) in &self.pairs {
            writeln!(
                f,
                "{:<12} {:>10.2} {:>10.2} {:>+8.2}",
                k, p.baseline, p.candidate, p.delta
            )?;
        }
        writeln!(f, "mean delta: {:+.3}", self.mean_delta)?;
        write!(f, "win ratio:  {:.1}%", self.win_ratio)
    }
}

/// Per-pair comparison of two `pair → score` tables with identical keys.
/// Wins are strict: ties count for neither side.
pub fn compare_scores(
    baseline: &BTreeMap<String, f64>,
    candidate: &BTreeMap<String, f64>,
) -> Result<(BTreeMap<String, PairDelta>, f64, f64)> {
    if baseline.is_empty() {
        return Err(Error::Comparison("no language pairs to compare".into()));
    }
    if baseline.keys().ne(candidate.keys()) {
        let only_base: Vec<_> = baseline.keys().filter(|k| !candidate.contains_key(*k)).collect();
        let only_cand: Vec<_> = candidate.keys().filter(|k| !baseline.contains_key(*k)).collect();
        return Err(Error::Comparison(format!(
            "pair sets differ: only in baseline {only_base:?}, only in candidate {only_cand:?}"
        )));
    }
    let pairs: BTreeMap<String, PairDelta> = baseline
        .iter()
        .map(|(k, &b)| {
            let c = candidate[k];
            (
                k.clone(),
                PairDelta {
                    baseline: b,
                    candidate: c,
                    delta: c - b,
                },
            )
        })
        .collect();
    let n = pairs.len() as f64;
    let mean_delta = pairs.values().map(|p| p.delta).sum::<f64>() / n;
    let wins = pairs.values().filter(|p| p.candidate > p.baseline).count() as f64;
    Ok((pairs, mean_delta, 100.0 * wins / n))
}

/// Default route of a summary: the shared route when the run has one.
pub fn default_route(s: &Summary) -> &'static str {
    if s.accuracy.contains_key("shared") {
        "shared"
    } else {
        "ls"
    }
}

pub fn compare(
    baseline: &Summary,
    candidate: &Summary,
    baseline_route: Option<&str>,
    candidate_route: Option<&str>,
) -> Result<ComparisonReport> {
    let br = baseline_route.unwrap_or(default_route(baseline));
    let cr = candidate_route.unwrap_or(default_route(candidate));
    let scores = |s: &Summary, route: &str, who: &str| -> Result<BTreeMap<String, f64>> {
        let r = s
            .route(route)
            .ok_or_else(|| Error::Comparison(format!("{who} summary has no {route:?} route")))?;
        Ok(r.pairs.iter().map(|(k, p)| (k.clone(), p.accuracy)).collect())
    };
    let (pairs, mean_delta, win_ratio) =
        compare_scores(&scores(baseline, br, "baseline")?, &scores(candidate, cr, "candidate")?)?;
    Ok(ComparisonReport {
        baseline_route: br.to_string(),
        candidate_route: cr.to_string(),
        pairs,
        mean_delta,
        win_ratio,
    })
}
