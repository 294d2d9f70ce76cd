//! Leaderboard rank aggregation: competition-style per-metric ranks, rank
//! sums and the fewer-parameters tie-break.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Whether larger or smaller metric values rank better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Default direction of each named metric.
pub fn default_direction(metric: &str) -> Direction {
    match metric {
        "lpips" | "dists" => Direction::LowerBetter,
        _ => Direction::HigherBetter,
    }
}

/// One team's metric values (optionally with externally given ranks) and
/// parameter count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub team: String,
    pub values: BTreeMap<String, f64>,
    /// Ranks supplied by the source leaderboard; when present the
    /// aggregation can consume them verbatim instead of re-deriving ranks
    /// from values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranks: Option<BTreeMap<String, u32>>,
    pub params: u64,
}

impl MetricRecord {
    pub fn validate(&self, metrics: &[String]) -> Result<()> {
        if self.params == 0 {
            return Err(Error::data(format!("team '{}' has params = 0", self.team)));
        }
        for m in metrics {
            if !self.values.contains_key(m) {
                return Err(Error::data(format!(
                    "team '{}' is missing metric '{m}'",
                    self.team
                )));
            }
        }
        Ok(())
    }
}

/// Competition ranking: rank 1 is best; ties share the smallest applicable
/// rank and the following ranks are skipped.
pub fn per_metric_rank(
    values: &BTreeMap<String, f64>,
    direction: Direction,
) -> Result<BTreeMap<String, u32>> {
    if values.is_empty() {
        return Err(Error::config("cannot rank an empty value map"));
    }
    for (team, v) in values {
        if !v.is_finite() {
            return Err(Error::data(format!(
                "team '{team}' has a non-finite metric value {v}"
            )));
        }
    }
    let mut sorted: Vec<(&String, f64)> = values.iter().map(|(k, v)| (k, *v)).collect();
    sorted.sort_by(|a, b| {
        let ord = a.1.partial_cmp(&b.1).expect("finite values");
        match direction {
            Direction::HigherBetter => ord.reverse(),
            Direction::LowerBetter => ord,
        }
        .then_with(|| a.0.cmp(b.0))
    });
    let mut ranks = BTreeMap::new();
    let mut prev_value: Option<f64> = None;
    let mut prev_rank = 0u32;
    for (i, (team, v)) in sorted.into_iter().enumerate() {
        let rank = match prev_value {
            Some(pv) if pv == v => prev_rank,
            _ => i as u32 + 1,
        };
        prev_value = Some(v);
        prev_rank = rank;
        ranks.insert(team.clone(), rank);
    }
    Ok(ranks)
}

/// Mismatch between a printed rank and the rank implied by sorting values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankDiscrepancy {
    pub metric: String,
    pub team: String,
    pub printed: u32,
    pub computed: u32,
}

/// Compares externally given ranks with value-derived ones.
pub fn rank_discrepancies(
    metric: &str,
    values: &BTreeMap<String, f64>,
    direction: Direction,
    printed: &BTreeMap<String, u32>,
) -> Result<Vec<RankDiscrepancy>> {
    let computed = per_metric_rank(values, direction)?;
    let mut out = Vec::new();
    for (team, computed_rank) in &computed {
        if let Some(&printed_rank) = printed.get(team) {
            if printed_rank != *computed_rank {
                out.push(RankDiscrepancy {
                    metric: metric.to_string(),
                    team: team.clone(),
                    printed: printed_rank,
                    computed: *computed_rank,
                });
            }
        }
    }
    Ok(out)
}

/// Per-metric ranks plus directions; the input to the aggregation rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub directions: BTreeMap<String, Direction>,
    pub per_metric_ranks: BTreeMap<String, BTreeMap<String, u32>>,
}

/// One row of the final ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalEntry {
    pub rank: u32,
    pub team: String,
    pub rank_sum: u32,
    pub params: u64,
}

/// Full aggregation output in the wire format consumed by downstream
/// tooling: directions, per-metric ranks, rank sums and the final ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub directions: BTreeMap<String, Direction>,
    pub per_metric_ranks: BTreeMap<String, BTreeMap<String, u32>>,
    pub rank_sums: BTreeMap<String, u32>,
    pub final_ranking: Vec<FinalEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub discrepancies: Vec<RankDiscrepancy>,
}

/// Aggregates per-metric ranks: ascending rank-sum order, ties broken by
/// ascending parameter count (then team name for full determinism).
pub fn aggregate_ranks(
    table: &RankTable,
    params: &BTreeMap<String, u64>,
) -> Result<Vec<FinalEntry>> {
    if table.per_metric_ranks.is_empty() {
        return Err(Error::config("rank table has no metrics"));
    }
    // every team must appear in every metric and in params
    let mut teams: Vec<String> = Vec::new();
    for (metric, ranks) in &table.per_metric_ranks {
        if teams.is_empty() {
            teams = ranks.keys().cloned().collect();
        }
        for team in &teams {
            if !ranks.contains_key(team) {
                return Err(Error::data(format!(
                    "team '{team}' missing from metric '{metric}'"
                )));
            }
        }
        if ranks.len() != teams.len() {
            let extra = ranks.keys().find(|t| !teams.contains(t)).unwrap();
            return Err(Error::data(format!(
                "team '{extra}' appears in metric '{metric}' but not in all metrics"
            )));
        }
    }
    for team in &teams {
        if !params.contains_key(team) {
            return Err(Error::data(format!("team '{team}' missing a parameter count")));
        }
    }
    let mut rows: Vec<FinalEntry> = teams
        .iter()
        .map(|team| {
            let rank_sum = table
                .per_metric_ranks
                .values()
                .map(|ranks| ranks[team])
                .sum();
            FinalEntry {
                rank: 0,
                team: team.clone(),
                rank_sum,
                params: params[team],
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        a.rank_sum
            .cmp(&b.rank_sum)
            .then(a.params.cmp(&b.params))
            .then(a.team.cmp(&b.team))
    });
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i as u32 + 1;
    }
    Ok(rows)
}

/// Builds a rank table from records. With `use_given_ranks` the records'
/// printed ranks are consumed verbatim (and compared against value-derived
/// ranks, reporting discrepancies); otherwise ranks are derived from the
/// values.
pub fn build_rank_report(
    records: &[MetricRecord],
    directions: &BTreeMap<String, Direction>,
    use_given_ranks: bool,
) -> Result<RankReport> {
    if records.is_empty() {
        return Err(Error::data("no metric records given"));
    }
    let metrics: Vec<String> = directions.keys().cloned().collect();
    if metrics.is_empty() {
        return Err(Error::config("no metrics configured for ranking"));
    }
    for r in records {
        r.validate(&metrics)?;
    }
    let mut per_metric_ranks: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    let mut discrepancies = Vec::new();
    for metric in &metrics {
        let values: BTreeMap<String, f64> = records
            .iter()
            .map(|r| (r.team.clone(), r.values[metric]))
            .collect();
        if use_given_ranks {
            let mut printed: BTreeMap<String, u32> = BTreeMap::new();
            for r in records {
                let rank = r
                    .ranks
                    .as_ref()
                    .and_then(|m| m.get(metric))
                    .copied()
                    .ok_or_else(|| {
                        Error::data(format!(
                            "team '{}' has no given rank for metric '{metric}'",
                            r.team
                        ))
                    })?;
                printed.insert(r.team.clone(), rank);
            }
            discrepancies.extend(rank_discrepancies(
                metric,
                &values,
                directions[metric],
                &printed,
            )?);
            per_metric_ranks.insert(metric.clone(), printed);
        } else {
            per_metric_ranks.insert(metric.clone(), per_metric_rank(&values, directions[metric])?);
        }
    }
    let table = RankTable {
        directions: directions.clone(),
        per_metric_ranks: per_metric_ranks.clone(),
    };
    let params: BTreeMap<String, u64> = records.iter().map(|r| (r.team.clone(), r.params)).collect();
    let final_ranking = aggregate_ranks(&table, &params)?;
    let rank_sums = final_ranking
        .iter()
        .map(|e| (e.team.clone(), e.rank_sum))
        .collect();
    Ok(RankReport {
        directions: directions.clone(),
        per_metric_ranks,
        rank_sums,
        final_ranking,
        discrepancies,
    })
}

/// The metric set of the bundled leaderboard snapshot, with directions.
pub fn leaderboard_directions() -> BTreeMap<String, Direction> {
    ["ssim", "lpips", "dists", "liqe", "musiq", "qalign"]
        .iter()
        .map(|m| (m.to_string(), default_direction(m)))
        .collect()
}

/// A bundled 17-team leaderboard snapshot (metric values, printed ranks,
/// parameter counts and the published final ranks) used as a regression
/// fixture for the aggregation protocol.
pub fn reference_leaderboard() -> Vec<(MetricRecord, u32)> {
    // team, ssim, lpips, dists, liqe, musiq, qalign (value, printed rank), params, final rank
    #[allow(clippy::type_complexity)]
    let rows: [(&str, [(f64, u32); 6], u64, u32); 17] = [
        ("MiVideo", [(0.5654, 8), (0.3632, 1), (0.1376, 1), (3.2561, 1), (68.8805, 1), (3.7699, 1)], 927_049, 1),
        ("CVPR TCD", [(0.5500, 14), (0.4801, 2), (0.2005, 3), (2.8661, 2), (63.9676, 5), (3.3778, 2)], 557_618, 2),
        ("S3", [(0.5183, 16), (0.4157, 6), (0.2222, 2), (2.3865, 3), (64.9443, 2), (3.3718, 3)], 741_600, 3),
        ("sun", [(0.5688, 7), (0.4446, 9), (0.2231, 4), (2.2382, 7), (62.4497, 4), (3.2333, 4)], 907_414, 4),
        ("NCHU-CVLab", [(0.5557, 10), (0.5045, 5), (0.2542, 7), (2.3933, 4), (62.0570, 8), (3.3015, 10)], 957_239, 5),
        ("NUDT_DeepIter", [(0.5211, 15), (0.5031, 4), (0.2317, 8), (2.4856, 6), (61.7693, 7), (3.2415, 5)], 897_160, 6),
        ("HIT-LLIE-team", [(0.5766, 4), (0.5176, 8), (0.2319, 11), (2.2977, 9), (60.3387, 12), (3.2007, 6)], 101_922, 7),
        ("VARCHASVI_SVNIT", [(0.5575, 9), (0.4408, 17), (0.2414, 5), (1.5017, 12), (62.2430, 3), (3.0040, 8)], 890_915, 8),
        ("Xie_Liu", [(0.5551, 11), (0.5171, 7), (0.2791, 6), (2.3798, 8), (62.0840, 10), (3.2130, 12)], 913_388, 9),
        ("JialuXu(IVC)", [(0.5122, 17), (0.5171, 3), (0.2430, 10), (2.6049, 5), (60.6554, 11), (3.2501, 9)], 919_594, 10),
        ("Bustaaa", [(0.5509, 12), (0.5143, 10), (0.2397, 9), (2.1875, 16), (61.2102, 9), (2.9807, 7)], 205_361, 11),
        ("sysu_701", [(0.5748, 5), (0.4828, 12), (0.2924, 14), (2.1568, 15), (56.7397, 6), (2.9837, 16)], 965_254, 12),
        ("SYSU-FVL_ELLIE", [(0.5819, 1), (0.5561, 13), (0.2804, 15), (2.1494, 11), (55.9899, 15), (3.0264, 13)], 994_871, 13),
        ("KLETech-CEVI", [(0.5791, 2), (0.5894, 11), (0.3019, 13), (2.1737, 14), (57.5888, 17), (2.9884, 17)], 525_429, 14),
        ("ShinNam!", [(0.5789, 3), (0.5711, 15), (0.2677, 17), (2.0345, 13), (53.9563, 16), (2.9956, 11)], 726_498, 15),
        ("IIMAS-UNAM", [(0.5504, 13), (0.5536, 14), (0.2805, 12), (2.0970, 10), (57.9082, 14), (3.1247, 14)], 890_915, 16),
        ("Cidaut AI", [(0.5731, 6), (0.5282, 16), (0.2882, 16), (1.9627, 17), (54.5327, 13), (2.7156, 15)], 797_222, 17),
    ];
    let metric_names = ["ssim", "lpips", "dists", "liqe", "musiq", "qalign"];
    rows.iter()
        .map(|(team, cells, params, final_rank)| {
            let mut values = BTreeMap::new();
            let mut ranks = BTreeMap::new();
            for (name, (v, r)) in metric_names.iter().zip(cells.iter()) {
                values.insert(name.to_string(), *v);
                ranks.insert(name.to_string(), *r);
            }
            (
                MetricRecord {
                    team: team.to_string(),
                    values,
                    ranks: Some(ranks),
                    params: *params,
                },
                *final_rank,
            )
        })
        .collect()
}
