//! Full-catalog ranking evaluation: AUC, MRR, NDCG@K and Recall@K,
//! macro-averaged over users.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::TripartiteGraph;
use crate::model::{Model, PairScorer, Task};

pub const DEFAULT_KS: [usize; 2] = [10, 50];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub recall: BTreeMap<usize, f64>,
    pub n_users_evaluated: usize,
    /// Users with held-out positives but no rankable candidate.
    pub n_users_skipped: usize,
}

impl RankingMetrics {
    pub fn recall_at(&self, k: usize) -> f64 {
        self.recall.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: usize,
    pub auc: f64,
    pub mrr: f64,
    /// Aligned with the `ks` the metrics were computed for.
    pub ndcg: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Candidate `(item, score)` pairs for `user` in item order, masked items removed.
pub fn rank_items(scorer: &PairScorer, user: usize, mask: &[usize]) -> Vec<(usize, f64)> {
    let mut scores = Vec::new();
    scorer.score_all(user, &mut scores);
    let mut masked = vec![false; scores.len()];
    for &i in mask {
        if i < masked.len() {
            masked[i] = true;
        }
    }
    scores
        .into_iter()
        .enumerate()
        .filter(|(i, _)| !masked[*i])
        .collect()
}

/// Descending score, ties by ascending item id.
fn order(a: &(usize, f64), b: &(usize, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Metrics of one user's candidates against their held-out positives.
/// Positives missing from the candidates are ignored; returns `None` when
/// no positive is rankable.
pub fn user_metrics(user: usize, candidates: &[(usize, f64)], positives: &[usize], ks: &[usize]) -> Option<UserMetrics> {
    let mut sorted_pos = positives.to_vec();
    sorted_pos.sort_unstable();
    sorted_pos.dedup();
    let is_pos = |i: usize| sorted_pos.binary_search(&i).is_ok();

    let mut ranked = candidates.to_vec();
    ranked.sort_by(order);
    let ranks: Vec<usize> = ranked
        .iter()
        .enumerate()
        .filter(|(_, c)| is_pos(c.0))
        .map(|(r, _)| r + 1)
        .collect();
    if ranks.is_empty() {
        return None;
    }
    let n_pos = ranks.len();

    let mut neg: Vec<f64> = ranked.iter().filter(|c| !is_pos(c.0)).map(|c| c.1).collect();
    neg.sort_by(f64::total_cmp);
    let auc = if neg.is_empty() {
        1.0
    } else {
        let mut correct = 0.0;
        for c in ranked.iter().filter(|c| is_pos(c.0)) {
            let below = neg.partition_point(|&s| s < c.1);
            let tied = neg.partition_point(|&s| s <= c.1) - below;
            correct += below as f64 + 0.5 * tied as f64;
        }
        correct / (n_pos * neg.len()) as f64
    };

    let mrr = 1.0 / ranks[0] as f64;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let mut ndcg = Vec::with_capacity(ks.len());
    let mut recall = Vec::with_capacity(ks.len());
    for &k in ks {
        let hits: Vec<usize> = ranks.iter().copied().filter(|&r| r <= k).collect();
        recall.push(hits.len() as f64 / n_pos as f64);
        let dcg: f64 = hits.iter().map(|&r| discount(r)).sum();
        let ideal: f64 = (1..=n_pos.min(k)).map(discount).sum();
        ndcg.push(if ideal > 0.0 { dcg / ideal } else { 0.0 });
    }
    Some(UserMetrics {
        user,
        auc,
        mrr,
        ndcg,
        recall,
    })
}

/// Macro average of per-user results; `None` entries count as skipped.
pub fn aggregate(per_user: &[Option<UserMetrics>], ks: &[usize]) -> Result<RankingMetrics> {
    let rows: Vec<&UserMetrics> = per_user.iter().flatten().collect();
    let skipped = per_user.len() - rows.len();
    if rows.is_empty() {
        return Err(Error::Analysis("no user could be evaluated".into()));
    }
    let n = rows.len() as f64;
    let mut auc = 0.0;
    let mut mrr = 0.0;
    let mut ndcg = vec![0.0; ks.len()];
    let mut recall = vec![0.0; ks.len()];
    for r in &rows {
        auc += r.auc;
        mrr += r.mrr;
        for j in 0..ks.len() {
            ndcg[j] += r.ndcg[j];
            recall[j] += r.recall[j];
        }
    }
    Ok(RankingMetrics {
        auc: auc / n,
        mrr: mrr / n,
        ndcg: ks.iter().zip(&ndcg).map(|(&k, v)| (k, v / n)).collect(),
        recall: ks.iter().zip(&recall).map(|(&k, v)| (k, v / n)).collect(),
        n_users_evaluated: rows.len(),
        n_users_skipped: skipped,
    })
}

/// One user's scored candidates and held-out positives.
#[derive(Debug, Clone, PartialEq)]
pub struct UserCandidates {
    pub user: usize,
    pub candidates: Vec<(usize, f64)>,
    pub positives: Vec<usize>,
}

pub fn compute_metrics(users: &[UserCandidates], ks: &[usize]) -> Result<(RankingMetrics, Vec<UserMetrics>)> {
    let per_user: Vec<Option<UserMetrics>> = users
        .par_iter()
        .map(|u| user_metrics(u.user, &u.candidates, &u.positives, ks))
        .collect();
    let metrics = aggregate(&per_user, ks)?;
    Ok((metrics, per_user.into_iter().flatten().collect()))
}

fn group_by_user(pairs: &[(usize, usize)]) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(u, i) in pairs {
        out.entry(u).or_default().push(i);
    }
    out
}

/// Ranks every item for each user holding a positive in `held_out`, masking
/// the user's training purchases plus any pairs in `extra_mask`.
pub fn evaluate(
    model: &Model,
    train: &TripartiteGraph,
    held_out: &[(usize, usize)],
    extra_mask: &[(usize, usize)],
    ks: &[usize],
) -> Result<(RankingMetrics, Vec<UserMetrics>)> {
    if held_out.is_empty() {
        return Err(Error::Config("held-out split is empty".into()));
    }
    let unified = model.embed_all(train)?;
    let scorer = model.scorer(&unified, Task::Buy)?;
    let positives = group_by_user(held_out);
    let extra = group_by_user(extra_mask);
    let users: Vec<(&usize, &Vec<usize>)> = positives.iter().collect();
    let per_user: Vec<Option<UserMetrics>> = users
        .par_iter()
        .map(|&(&u, pos)| {
            if u >= train.n_users {
                return None;
            }
            let mut mask = train.buy.forward().neighbors(u).to_vec();
            if let Some(e) = extra.get(&u) {
                mask.extend(e);
            }
            let candidates = rank_items(&scorer, u, &mask);
            user_metrics(u, &candidates, pos, ks)
        })
        .collect();
    let metrics = aggregate(&per_user, ks)?;
    Ok((metrics, per_user.into_iter().flatten().collect()))
}

/// CSV of per-user metrics; `name` maps a user index to its printed id.
pub fn write_user_csv(
    w: &mut impl Write,
    rows: &[UserMetrics],
    ks: &[usize],
    name: impl Fn(usize) -> String,
) -> Result<()> {
    let mut header = String::from("user_id,auc,mrr");
    for k in ks {
        header.push_str(&format!(",ndcg{k}"));
    }
    for k in ks {
        header.push_str(&format!(",recall{k}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let mut line = format!("{},{},{}", name(r.user), r.auc, r.mrr);
        for v in r.ndcg.iter().chain(&r.recall) {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}")?;
    }
    Ok(())
}
