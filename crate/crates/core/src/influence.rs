//! Streamer-influence analyses over an interaction graph: Monte Carlo
//! purchase probability for items inside vs. outside the catalogs of a
//! user's followed streamers, and purchase-set similarity of entity pairs
//! that do or do not share a streamer.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{nearest_rank, TripartiteGraph};
use crate::rng;

/// Monte Carlo samples per independently seeded chunk.
pub const MC_CHUNK: usize = 16_384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    /// Items sold by a streamer the user follows.
    S1,
    /// Items not sold by any streamer the user follows.
    S2,
}

impl std::str::FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S1" | "s1" => Ok(Setting::S1),
            "S2" | "s2" => Ok(Setting::S2),
            _ => Err(Error::Argument(format!("unknown setting {s:?}; expected S1 or S2"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub setting: Setting,
    pub n_samples: usize,
    pub positives: usize,
    pub probability: f64,
    /// Users drawn and rejected because they had no eligible item.
    pub resampled_users: usize,
}

/// Sorted item ids not in `excluded` (sorted), indexed without materializing.
fn kth_outside(excluded: &[usize], mut k: usize) -> usize {
    for &x in excluded {
        if x <= k {
            k += 1;
        } else {
            break;
        }
    }
    k
}

pub fn purchase_probability_sim(
    graph: &TripartiteGraph,
    setting: Setting,
    n_mc: usize,
    seed: u64,
) -> Result<ProbEstimate> {
    if n_mc == 0 {
        return Err(Error::Argument("n_mc must be positive".into()));
    }
    let unions: Vec<Vec<usize>> = (0..graph.n_users).map(|u| graph.followed_catalog(u)).collect();
    let eligible = |u: usize| match setting {
        Setting::S1 => !unions[u].is_empty(),
        Setting::S2 => unions[u].len() < graph.n_items,
    };
    if !(0..graph.n_users).any(eligible) {
        return Err(Error::Analysis(format!("no eligible (user, item) pairs for {setting:?}")));
    }
    let tag = match setting {
        Setting::S1 => 1,
        Setting::S2 => 2,
    };
    let n_chunks = n_mc.div_ceil(MC_CHUNK);
    let (positives, resampled) = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut r = rng::stream(seed, &[0x3c, tag, c as u64]);
            let size = MC_CHUNK.min(n_mc - c * MC_CHUNK);
            let (mut pos, mut rej) = (0usize, 0usize);
            for _ in 0..size {
                let u = loop {
                    let u = r.random_range(0..graph.n_users);
                    if eligible(u) {
                        break u;
                    }
                    rej += 1;
                };
                let union = &unions[u];
                let item = match setting {
                    Setting::S1 => union[r.random_range(0..union.len())],
                    Setting::S2 => kth_outside(union, r.random_range(0..graph.n_items - union.len())),
                };
                pos += graph.buy.contains(u, item) as usize;
            }
            (pos, rej)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(ProbEstimate {
        setting,
        n_samples: n_mc,
        positives,
        probability: positives as f64 / n_mc as f64,
        resampled_users: resampled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairMode {
    UserPairs,
    ItemPairs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Cohort {
    SharedStreamer,
    NoSharedStreamer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    Cosine,
    Jaccard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub metric: Metric,
    pub levels: Vec<f64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub n_pairs: usize,
}

fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

/// Similarity of two sorted id sets; 0 when either is empty.
pub fn set_similarity(a: &[usize], b: &[usize], metric: Metric) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let inter = intersection_len(a, b) as f64;
    match metric {
        Metric::Cosine => inter / ((a.len() * b.len()) as f64).sqrt(),
        Metric::Jaccard => inter / ((a.len() + b.len()) as f64 - inter),
    }
}

/// Rejection-samples up to `n_pairs` distinct unordered pairs in the cohort.
pub fn sample_pairs(
    graph: &TripartiteGraph,
    mode: PairMode,
    cohort: Cohort,
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<(usize, usize)>> {
    if n_pairs == 0 {
        return Err(Error::Argument("n_pairs must be positive".into()));
    }
    // streamer lists per entity: followed streamers for users, sellers for items
    let (n, streamers) = match mode {
        PairMode::UserPairs => (graph.n_users, graph.follow.forward()),
        PairMode::ItemPairs => (graph.n_items, graph.sell.reverse()),
    };
    if n < 2 {
        return Err(Error::Analysis(format!("{mode:?} needs at least two entities")));
    }
    let tag = match (mode, cohort) {
        (PairMode::UserPairs, Cohort::SharedStreamer) => 1,
        (PairMode::UserPairs, Cohort::NoSharedStreamer) => 2,
        (PairMode::ItemPairs, Cohort::SharedStreamer) => 3,
        (PairMode::ItemPairs, Cohort::NoSharedStreamer) => 4,
    };
    let mut r = rng::stream(seed, &[0x9a, tag]);
    let max_attempts = n_pairs.saturating_mul(50).max(100_000);
    let mut seen = HashSet::with_capacity(n_pairs);
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..max_attempts {
        if pairs.len() == n_pairs {
            break;
        }
        let a = r.random_range(0..n);
        let b = r.random_range(0..n);
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if seen.contains(&key) {
            continue;
        }
        let shares = intersection_len(streamers.neighbors(a), streamers.neighbors(b)) > 0;
        if shares == (cohort == Cohort::SharedStreamer) {
            seen.insert(key);
            pairs.push(key);
        }
    }
    if pairs.is_empty() {
        return Err(Error::Analysis(format!(
            "no {mode:?} found in cohort {cohort:?} after {max_attempts} attempts"
        )));
    }
    Ok(pairs)
}

/// Nearest-rank quantiles and mean of a set of values in [0, 1].
pub fn summarize(mut values: Vec<f64>, levels: &[f64], metric: Metric) -> Result<QuantileSummary> {
    if values.is_empty() {
        return Err(Error::Analysis("no values to summarize".into()));
    }
    if levels.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return Err(Error::Argument("quantile levels must lie in (0, 1)".into()));
    }
    let mut levels = levels.to_vec();
    levels.sort_by(f64::total_cmp);
    values.sort_by(f64::total_cmp);
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(QuantileSummary {
        metric,
        values: levels.iter().map(|&p| nearest_rank(&values, p)).collect(),
        levels,
        mean,
        n_pairs: values.len(),
    })
}

fn purchase_set(graph: &TripartiteGraph, mode: PairMode, id: usize) -> &[usize] {
    match mode {
        PairMode::UserPairs => graph.buy.forward().neighbors(id),
        PairMode::ItemPairs => graph.buy.reverse().neighbors(id),
    }
}

#[allow(clippy::too_many_arguments)]
pub fn pair_similarity(
    graph: &TripartiteGraph,
    mode: PairMode,
    cohort: Cohort,
    metric: Metric,
    n_pairs: usize,
    levels: &[f64],
    seed: u64,
) -> Result<QuantileSummary> {
    let pairs = sample_pairs(graph, mode, cohort, n_pairs, seed)?;
    let values = pairs
        .iter()
        .map(|&(a, b)| set_similarity(purchase_set(graph, mode, a), purchase_set(graph, mode, b), metric))
        .collect();
    summarize(values, levels, metric)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Monte Carlo draws per setting; `None` means ten per buy edge.
    pub n_mc: Option<usize>,
    pub n_pairs: usize,
    pub user_levels: Vec<f64>,
    pub item_levels: Vec<f64>,
    pub settings: Vec<Setting>,
    pub similarity: bool,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            n_mc: None,
            n_pairs: 100_000,
            user_levels: vec![0.5, 0.75, 0.9, 0.99],
            item_levels: vec![0.98, 0.99, 0.999, 0.9999],
            settings: vec![Setting::S1, Setting::S2],
            similarity: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRow {
    pub mode: PairMode,
    pub cohort: Cohort,
    pub summary: QuantileSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceReport {
    pub probabilities: Vec<ProbEstimate>,
    /// Prob(S1) / Prob(S2) when both settings ran and Prob(S2) > 0.
    pub ratio: Option<f64>,
    pub similarities: Vec<SimilarityRow>,
    pub notes: Vec<String>,
}

impl InfluenceReport {
    pub fn probability(&self, setting: Setting) -> Option<f64> {
        self.probabilities
            .iter()
            .find(|p| p.setting == setting)
            .map(|p| p.probability)
    }

    pub fn similarity(&self, mode: PairMode, cohort: Cohort, metric: Metric) -> Option<&QuantileSummary> {
        self.similarities
            .iter()
            .find(|r| r.mode == mode && r.cohort == cohort && r.summary.metric == metric)
            .map(|r| &r.summary)
    }

    /// Aligned plain-text tables: probabilities, then one similarity block per mode.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if !self.probabilities.is_empty() {
            let _ = writeln!(out, "{:<8} {:>14} {:>12} {:>12}", "setting", "probability", "positives", "samples");
            for p in &self.probabilities {
                let _ = writeln!(
                    out,
                    "{:<8} {:>14.4e} {:>12} {:>12}",
                    format!("{:?}", p.setting),
                    p.probability,
                    p.positives,
                    p.n_samples
                );
            }
            if let Some(r) = self.ratio {
                let _ = writeln!(out, "ratio S1/S2 = {r:.3}");
            }
        }
        for mode in [PairMode::UserPairs, PairMode::ItemPairs] {
            let rows: Vec<&SimilarityRow> = self.similarities.iter().filter(|r| r.mode == mode).collect();
            let Some(first) = rows.first() else { continue };
            let _ = writeln!(out);
            let _ = write!(out, "{:<32}", format!("{mode:?}"));
            for l in &first.summary.levels {
                let _ = write!(out, " {:>10}", format!("q{l}"));
            }
            let _ = writeln!(out, " {:>10} {:>8}", "mean", "pairs");
            for r in rows {
                let label = format!("{:?} {:?}", r.summary.metric, r.cohort);
                let _ = write!(out, "{label:<32}");
                for v in &r.summary.values {
                    let _ = write!(out, " {v:>10.4}");
                }
                let _ = writeln!(out, " {:>10.4} {:>8}", r.summary.mean, r.summary.n_pairs);
            }
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }
}

pub fn run_analysis(graph: &TripartiteGraph, config: &AnalysisConfig) -> Result<InfluenceReport> {
    let n_mc = config.n_mc.unwrap_or(10 * graph.buy.n_edges()).max(1);
    let mut notes = Vec::new();
    let probabilities = config
        .settings
        .iter()
        .map(|&s| purchase_probability_sim(graph, s, n_mc, config.seed))
        .collect::<Result<Vec<_>>>()?;
    if config.settings.contains(&Setting::S2) {
        let lonely = (0..graph.n_users)
            .filter(|&u| graph.follow.forward().degree(u) == 0)
            .count();
        if lonely > 0 {
            notes.push(format!(
                "{lonely} users follow no streamer and were eligible for S2 over the full catalog"
            ));
        }
    }
    let ratio = match (
        probabilities.iter().find(|p| p.setting == Setting::S1),
        probabilities.iter().find(|p| p.setting == Setting::S2),
    ) {
        (Some(a), Some(b)) if b.probability > 0.0 => Some(a.probability / b.probability),
        _ => None,
    };

    let mut similarities = Vec::new();
    if config.similarity {
        for (mode, levels) in [
            (PairMode::UserPairs, &config.user_levels),
            (PairMode::ItemPairs, &config.item_levels),
        ] {
            for cohort in [Cohort::SharedStreamer, Cohort::NoSharedStreamer] {
                let pairs = sample_pairs(graph, mode, cohort, config.n_pairs, config.seed)?;
                if pairs.len() < config.n_pairs {
                    notes.push(format!(
                        "{mode:?}/{cohort:?}: only {} distinct pairs found",
                        pairs.len()
                    ));
                }
                for metric in [Metric::Cosine, Metric::Jaccard] {
                    let values = pairs
                        .iter()
                        .map(|&(a, b)| {
                            set_similarity(purchase_set(graph, mode, a), purchase_set(graph, mode, b), metric)
                        })
                        .collect();
                    similarities.push(SimilarityRow {
                        mode,
                        cohort,
                        summary: summarize(values, levels, metric)?,
                    });
                }
            }
        }
    }
    Ok(InfluenceReport {
        probabilities,
        ratio,
        similarities,
        notes,
    })
}
