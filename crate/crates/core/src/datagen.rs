//! Synthetic tripartite data with tunable streamer influence, and the
//! chronological train/validation/test split.
//!
//! The generator follows three steps:
//! 1. every streamer sells a power-law sized random subset of items;
//! 2. every user follows `~Poisson(follows_per_user)` streamers picked by
//!    popularity;
//! 3. purchase events are interleaved over all users in random order; each
//!    event picks, with probability `influence_strength`, a uniform item from
//!    the catalogs the user's streamers sell, and otherwise an item by global
//!    popularity. The event counter is the timestamp.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{Edge, EntityKind, TripartiteGraph};
use crate::rng;

/// Smallest catalog drawn before the power-law tail.
const MIN_CATALOG: f64 = 5.0;
/// Zipf exponent of item and streamer popularity.
const POPULARITY_EXPONENT: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_streamers: usize,
    /// Probability a purchase is drawn from a followed streamer's catalog.
    pub influence_strength: f64,
    pub buys_per_user: f64,
    pub follows_per_user: f64,
    pub catalog_exponent: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_users: 2000,
            n_items: 1000,
            n_streamers: 100,
            influence_strength: 0.8,
            buys_per_user: 15.0,
            follows_per_user: 8.0,
            catalog_exponent: 1.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 || self.n_streamers == 0 {
            return Err(Error::Config("entity counts must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.influence_strength) {
            return Err(Error::Config(format!(
                "influence_strength {} outside [0, 1]",
                self.influence_strength
            )));
        }
        if !(self.buys_per_user >= 1.0 && self.follows_per_user >= 1.0) {
            return Err(Error::Config("per-user means must be at least 1".into()));
        }
        if !(self.catalog_exponent > 1.0) {
            return Err(Error::Config("catalog_exponent must exceed 1".into()));
        }
        Ok(())
    }
}

fn zipf_weights(n: usize, r: &mut rng::Rng) -> Vec<f64> {
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(r);
    ranks
        .iter()
        .map(|&k| 1.0 / ((k + 1) as f64).powf(POPULARITY_EXPONENT))
        .collect()
}

fn poisson_at_least_one(mean: f64, cap: usize, r: &mut rng::Rng) -> usize {
    let draw: f64 = Poisson::new(mean).expect("positive mean").sample(r);
    (draw as usize).clamp(1, cap.max(1))
}

/// Generates a graph whose buy edges carry event-counter timestamps.
pub fn generate(config: &GenConfig) -> Result<TripartiteGraph> {
    config.validate()?;
    let (nu, ni, ns) = (config.n_users, config.n_items, config.n_streamers);
    let mut r = rng::stream(config.seed, &[0xda7a]);

    let item_pop = WeightedIndex::new(zipf_weights(ni, &mut r)).expect("positive weights");
    let streamer_pop = WeightedIndex::new(zipf_weights(ns, &mut r)).expect("positive weights");

    let max_catalog = (ni / 4).max(1);
    let mut sell = Vec::new();
    for s in 0..ns {
        let u: f64 = r.random_range(f64::EPSILON..1.0);
        let size = (MIN_CATALOG * u.powf(-1.0 / config.catalog_exponent)).round();
        let size = (size as usize).clamp(1, max_catalog);
        let mut items = index::sample(&mut r, ni, size).into_vec();
        items.sort_unstable();
        sell.extend(items.into_iter().map(|i| Edge::new(s, i)));
    }

    let mut follow = Vec::new();
    let mut followed: Vec<Vec<usize>> = Vec::with_capacity(nu);
    for u in 0..nu {
        let k = poisson_at_least_one(config.follows_per_user, ns, &mut r);
        let mut picked: Vec<usize> = Vec::with_capacity(k);
        while picked.len() < k {
            let s = streamer_pop.sample(&mut r);
            if !picked.contains(&s) {
                picked.push(s);
            }
        }
        picked.sort_unstable();
        follow.extend(picked.iter().map(|&s| Edge::new(u, s)));
        followed.push(picked);
    }

    let mut catalogs: Vec<Vec<usize>> = vec![Vec::new(); ns];
    for e in &sell {
        catalogs[e.left].push(e.right);
    }
    let unions: Vec<Vec<usize>> = followed
        .iter()
        .map(|ss| {
            let mut items: Vec<usize> = ss.iter().flat_map(|&s| catalogs[s].iter().copied()).collect();
            items.sort_unstable();
            items.dedup();
            items
        })
        .collect();

    let mut events: Vec<usize> = Vec::new();
    for u in 0..nu {
        let k = poisson_at_least_one(config.buys_per_user, usize::MAX, &mut r);
        events.extend(std::iter::repeat_n(u, k));
    }
    events.shuffle(&mut r);
    let mut buy = Vec::with_capacity(events.len());
    for (t, &u) in events.iter().enumerate() {
        let union = &unions[u];
        let item = if !union.is_empty() && r.random::<f64>() < config.influence_strength {
            union[r.random_range(0..union.len())]
        } else {
            item_pop.sample(&mut r)
        };
        buy.push(Edge::at(u, item, t as i64));
    }

    TripartiteGraph::build(nu, ni, ns, &buy, &follow, &sell)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_frac: 0.8,
            val_frac: 0.1,
            test_frac: 0.1,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let fr = [self.train_frac, self.val_frac, self.test_frac];
        if fr.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::Config("split fractions must be positive".into()));
        }
        if (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitReport {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    pub dropped_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// Training buy edges plus every follow and sell edge.
    pub train: TripartiteGraph,
    pub val: Vec<Edge>,
    pub test: Vec<Edge>,
    pub report: SplitReport,
}

/// Global chronological split of buy edges. Ties in timestamp keep the
/// graph's edge order. Held-out edges whose user or item has no edge in the
/// training graph are dropped and counted.
pub fn chronological_split(graph: &TripartiteGraph, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    if graph.buy.timestamps().is_none() {
        return Err(Error::Contract("chronological split needs timestamped buy edges".into()));
    }
    let mut buys = graph.buy.edges();
    buys.sort_by_key(|e| e.timestamp);
    let n = buys.len();
    let n_train = ((n as f64 * spec.train_frac).round() as usize).min(n);
    let n_val = ((n as f64 * spec.val_frac).round() as usize).min(n - n_train);

    let train = TripartiteGraph::build(
        graph.n_users,
        graph.n_items,
        graph.n_streamers,
        &buys[..n_train],
        &graph.follow.edges(),
        &graph.sell.edges(),
    )?;
    let mut dropped = 0;
    let mut keep = |edges: &[Edge]| -> Vec<Edge> {
        let kept: Vec<Edge> = edges
            .iter()
            .filter(|e| {
                train.has_presence(EntityKind::User, e.left) && train.has_presence(EntityKind::Item, e.right)
            })
            .copied()
            .collect();
        dropped += edges.len() - kept.len();
        kept
    };
    let val = keep(&buys[n_train..n_train + n_val]);
    let test = keep(&buys[n_train + n_val..]);
    let report = SplitReport {
        train_count: n_train,
        val_count: val.len(),
        test_count: test.len(),
        dropped_count: dropped,
    };
    Ok(Split {
        train,
        val,
        test,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_users: 200,
            n_items: 150,
            n_streamers: 20,
            seed: 4,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 5, ..small() }).unwrap();
        assert_ne!(a.buy.edges(), c.buy.edges());
    }

    #[test]
    fn generated_graph_shape() {
        let g = generate(&small()).unwrap();
        assert!(g.buy.timestamps().is_some());
        for u in 0..g.n_users {
            assert!(g.follow.forward().degree(u) >= 1);
            assert!(g.buy.forward().degree(u) >= 1);
        }
        for s in 0..g.n_streamers {
            assert!((1..=150 / 4).contains(&g.sell.forward().degree(s)));
        }
    }

    #[test]
    fn full_influence_with_one_single_item_catalog() {
        let cfg = GenConfig {
            n_users: 30,
            n_items: 3,
            n_streamers: 1,
            influence_strength: 1.0,
            seed: 1,
            ..GenConfig::default()
        };
        let g = generate(&cfg).unwrap();
        assert_eq!(g.sell.n_edges(), 1);
        let only = g.sell.forward().neighbors(0)[0];
        assert!(g.buy.edges().iter().all(|e| e.right == only));
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            GenConfig { n_users: 0, ..small() },
            GenConfig { influence_strength: 1.5, ..small() },
            GenConfig { buys_per_user: 0.5, ..small() },
            GenConfig { catalog_exponent: 1.0, ..small() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        }
    }

    fn timed_graph(ts: &[i64]) -> TripartiteGraph {
        let n = ts.len();
        let buys: Vec<Edge> = ts.iter().enumerate().map(|(k, &t)| Edge::at(k, k, t)).collect();
        // every user and item also appears through follow/sell so nothing is cold
        let follow: Vec<Edge> = (0..n).map(|u| Edge::new(u, 0)).collect();
        let sell: Vec<Edge> = (0..n).map(|i| Edge::new(0, i)).collect();
        TripartiteGraph::build(n, n, 1, &buys, &follow, &sell).unwrap()
    }

    #[test]
    fn exact_fraction_sizes() {
        let g = timed_graph(&[9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);
        let s = chronological_split(&g, &SplitSpec::default()).unwrap();
        assert_eq!((s.train.buy.n_edges(), s.val.len(), s.test.len()), (8, 1, 1));
        // latest timestamps are held out
        assert_eq!(s.test[0].timestamp, Some(9));
        assert_eq!(s.val[0].timestamp, Some(8));
    }

    #[test]
    fn equal_timestamps_use_stable_order() {
        let g = timed_graph(&[5; 10]);
        let s = chronological_split(&g, &SplitSpec::default()).unwrap();
        assert_eq!((s.report.train_count, s.report.val_count, s.report.test_count), (8, 1, 1));
        assert_eq!(s.val[0].left, 8);
        assert_eq!(s.test[0].left, 9);
    }

    #[test]
    fn cold_start_edges_are_dropped() {
        let buys = [Edge::at(0, 0, 0), Edge::at(1, 1, 1)];
        let g = TripartiteGraph::build(2, 2, 1, &buys, &[Edge::new(0, 0)], &[]).unwrap();
        let spec = SplitSpec {
            train_frac: 0.5,
            val_frac: 0.25,
            test_frac: 0.25,
        };
        let s = chronological_split(&g, &spec).unwrap();
        // user 1 and item 1 only occur in the held-out edge
        assert_eq!(s.report.dropped_count, 1);
        assert!(s.val.is_empty() && s.test.is_empty());
    }

    #[test]
    fn untimed_graph_is_rejected() {
        let g = TripartiteGraph::build(1, 1, 1, &[Edge::new(0, 0)], &[], &[]).unwrap();
        assert!(matches!(chronological_split(&g, &SplitSpec::default()), Err(Error::Contract(_))));
    }

    #[test]
    fn generated_split_invariants() {
        let g = generate(&small()).unwrap();
        let s = chronological_split(&g, &SplitSpec::default()).unwrap();
        let train_max = s.train.buy.timestamps().unwrap().iter().max().copied().unwrap();
        let val_ts: Vec<i64> = s.val.iter().map(|e| e.timestamp.unwrap()).collect();
        let test_ts: Vec<i64> = s.test.iter().map(|e| e.timestamp.unwrap()).collect();
        assert!(val_ts.iter().all(|&t| t >= train_max));
        let val_max = val_ts.iter().max().copied().unwrap();
        assert!(test_ts.iter().all(|&t| t >= val_max));
        let r = s.report;
        assert_eq!(r.train_count + r.val_count + r.test_count + r.dropped_count, g.buy.n_edges());
        for e in s.val.iter().chain(&s.test) {
            assert!(!s.train.buy.contains(e.left, e.right));
        }
    }
}
