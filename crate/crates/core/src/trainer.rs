//! Epoch loop: mini-batch scheduling over both tasks, Adam updates, early
//! stopping on validation Recall@10, and the relation/task ablation grid.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::eval::{evaluate, RankingMetrics, UserMetrics, DEFAULT_KS};
use crate::graph_store::{Edge, TripartiteGraph};
use crate::model::{EntityCounts, Model, ModelConfig, Task};
use crate::numkit::AdamConfig;
use crate::rng;
use crate::sampler::{BatchSpec, FanoutPlan, MiniBatch};

/// The metric early stopping watches.
pub const EARLY_STOP_K: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Degree quantile that sets every fanout.
    pub fanout_p: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 4096,
            max_epochs: 100,
            patience: 3,
            eval_every: 1,
            seed: 0,
            fanout_p: 0.9,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.patience == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size, patience and eval_every must be at least 1".into()));
        }
        if !(self.fanout_p > 0.0 && self.fanout_p <= 1.0) {
            return Err(Error::Config(format!("fanout_p {} outside (0, 1]", self.fanout_p)));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// Mean per-task batch losses of one epoch; absent tasks stay `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub buy: Option<f64>,
    pub follow: Option<f64>,
    pub n_batches: usize,
}

fn pairs(edges: &[Edge]) -> Vec<(usize, usize)> {
    edges.iter().map(|e| (e.left, e.right)).collect()
}

/// Slice `b` of `n` near-equal contiguous parts of `items`; never empty when
/// `items` is not.
fn share<T>(items: &[T], b: usize, n: usize) -> &[T] {
    if items.is_empty() {
        return items;
    }
    let lo = b * items.len() / n;
    let hi = (b + 1) * items.len() / n;
    if lo == hi {
        let k = lo.min(items.len() - 1);
        &items[k..k + 1]
    } else {
        &items[lo..hi]
    }
}

/// One pass over the training positives.
pub fn train_epoch(
    model: &mut Model,
    graph: &TripartiteGraph,
    config: &TrainConfig,
    fanout: &FanoutPlan,
    epoch: usize,
) -> Result<EpochLoss> {
    let mc = model.config.clone();
    let mut r = rng::stream(config.seed, &[0xe90c, epoch as u64]);
    let mut buys = pairs(&graph.buy.edges());
    let mut follows = pairs(&graph.follow.edges());
    buys.shuffle(&mut r);
    follows.shuffle(&mut r);
    let use_buy = mc.has_task(Task::Buy);
    let use_follow = mc.has_task(Task::Follow);
    if (use_buy && buys.is_empty()) || (use_follow && follows.is_empty()) {
        return Err(Error::Contract("training split has no positives for an active task".into()));
    }
    // the buy task drives the schedule when active
    let driver = if use_buy { buys.len() } else { follows.len() };
    let n_batches = driver.div_ceil(config.batch_size);
    let relations = mc.active_relations();
    let adam = config.adam();
    let mut sums = [0.0, 0.0];
    for b in 0..n_batches {
        let spec = BatchSpec {
            buy_positives: use_buy.then(|| share(&buys, b, n_batches)),
            follow_positives: use_follow.then(|| share(&follows, b, n_batches)),
            negative_ratio: mc.negative_ratio,
            relations: &relations,
            fanout,
            n_layers: mc.n_layers(),
        };
        let batch = MiniBatch::assemble(graph, &spec, rng::derive_seed(config.seed, &[0xba7c, epoch as u64, b as u64]))?;
        let loss = model.forward_backward(&batch)?;
        model.step(&adam);
        sums[0] += loss.buy.unwrap_or(0.0);
        sums[1] += loss.follow.unwrap_or(0.0);
    }
    let n = n_batches as f64;
    Ok(EpochLoss {
        buy: use_buy.then_some(sums[0] / n),
        follow: use_follow.then_some(sums[1] / n),
        n_batches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: EpochLoss,
    pub val: Option<RankingMetrics>,
    /// Not serialized so that history files are reproducible.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Validation metrics of the untrained model (epoch 0).
    pub initial: RankingMetrics,
    pub epochs: Vec<EpochRecord>,
    /// Epoch of the returned parameters; 0 means the untrained model.
    pub best_epoch: usize,
    pub best_recall: f64,
    pub stopped_early: bool,
}

/// Counts evaluations without improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    bad: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            bad: 0,
        }
    }

    /// Records a value; returns true when it is a new best.
    pub fn observe(&mut self, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.bad = 0;
            true
        } else {
            self.bad += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.bad >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

pub struct FitResult {
    pub model: Model,
    pub history: TrainHistory,
    pub fanout: FanoutPlan,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Trains on `split.train`, early-stopping on validation Recall@10, and
/// returns the best model seen (the untrained one included).
pub fn fit(model_config: &ModelConfig, config: &TrainConfig, split: &Split) -> Result<FitResult> {
    config.validate()?;
    model_config.validate()?;
    if split.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let graph = &split.train;
    let val = pairs(&split.val);
    let fanout = FanoutPlan::from_quantile(graph, config.fanout_p)?;
    let mut model = Model::init(
        model_config.clone(),
        EntityCounts::of(graph),
        rng::derive_seed(config.seed, &[0x1417]),
    )?;
    let validate = |m: &Model| evaluate(m, graph, &val, &[], &DEFAULT_KS).map(|r| r.0);

    let initial = validate(&model)?;
    log::info!(
        "epoch=0 loss_buy=NA loss_follow=NA recall10={:.6}",
        initial.recall_at(EARLY_STOP_K)
    );
    let mut stopper = EarlyStopper::new(config.patience);
    stopper.observe(initial.recall_at(EARLY_STOP_K));
    let mut best = model.clone();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let start = Instant::now();
        let loss = train_epoch(&mut model, graph, config, &fanout, epoch)?;
        let val_metrics = if epoch % config.eval_every == 0 || epoch == config.max_epochs {
            Some(validate(&model)?)
        } else {
            None
        };
        log::info!(
            "epoch={epoch} loss_buy={} loss_follow={} recall10={}",
            fmt_opt(loss.buy),
            fmt_opt(loss.follow),
            fmt_opt(val_metrics.as_ref().map(|m| m.recall_at(EARLY_STOP_K)))
        );
        let mut stop = false;
        if let Some(m) = &val_metrics {
            if stopper.observe(m.recall_at(EARLY_STOP_K)) {
                best = model.clone();
                best_epoch = epoch;
            }
            stop = stopper.should_stop();
        }
        epochs.push(EpochRecord {
            epoch,
            loss,
            val: val_metrics,
            wall_secs: start.elapsed().as_secs_f64(),
        });
        if stop {
            stopped_early = true;
            break;
        }
    }
    Ok(FitResult {
        model: best,
        history: TrainHistory {
            initial,
            epochs,
            best_epoch,
            best_recall: stopper.best(),
            stopped_early,
        },
        fanout,
    })
}

/// Test metrics with training and validation purchases masked.
pub fn evaluate_test(model: &Model, split: &Split) -> Result<(RankingMetrics, Vec<UserMetrics>)> {
    evaluate(model, &split.train, &pairs(&split.test), &pairs(&split.val), &DEFAULT_KS)
}

/// The (relations, tasks) rows of the ablation grid.
pub fn ablation_grid() -> Vec<(Vec<u8>, Vec<u8>)> {
    vec![
        (vec![0], vec![0]),
        (vec![0, 1], vec![0]),
        (vec![0, 2], vec![0]),
        (vec![0, 1, 2], vec![0]),
        (vec![0, 1, 2], vec![0, 1]),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub relations: Vec<u8>,
    pub tasks: Vec<u8>,
    /// Test metrics of each repeat.
    pub runs: Vec<RankingMetrics>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl AblationRow {
    /// Mean and sample standard deviation of a metric across repeats.
    pub fn summary(&self, metric: impl Fn(&RankingMetrics) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(metric).collect::<Vec<_>>())
    }
}

/// Trains every grid row `repeat_count` times (seeds `seed`, `seed+1`, ...)
/// and records test metrics.
pub fn run_ablation(
    base: &ModelConfig,
    config: &TrainConfig,
    split: &Split,
    repeat_count: usize,
) -> Result<Vec<AblationRow>> {
    if repeat_count == 0 {
        return Err(Error::Config("repeat_count must be at least 1".into()));
    }
    ablation_grid()
        .into_iter()
        .map(|(relations, tasks)| {
            let mc = ModelConfig {
                relations: relations.clone(),
                tasks: tasks.clone(),
                ..base.clone()
            };
            let runs = (0..repeat_count)
                .map(|k| {
                    let tc = TrainConfig {
                        seed: config.seed + k as u64,
                        ..config.clone()
                    };
                    let fit = fit(&mc, &tc, split)?;
                    Ok(evaluate_test(&fit.model, split)?.0)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(AblationRow { relations, tasks, runs })
        })
        .collect()
}

/// Aligned mean ± std table of the ablation rows.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let ids = |v: &[u8]| v.iter().map(u8::to_string).collect::<Vec<_>>().join(",");
    let mut out = String::new();
    let cols = ["AUC", "MRR", "NDCG@10", "NDCG@50", "Recall@10", "Recall@50"];
    let _ = write!(out, "{:<10}{:<7}", "relations", "tasks");
    for c in cols {
        let _ = write!(out, "{c:>20}");
    }
    out.push('\n');
    for row in rows {
        let _ = write!(out, "{:<10}{:<7}", ids(&row.relations), ids(&row.tasks));
        let metrics: [&dyn Fn(&RankingMetrics) -> f64; 6] = [
            &|m| m.auc,
            &|m| m.mrr,
            &|m| m.ndcg_at(10),
            &|m| m.ndcg_at(50),
            &|m| m.recall_at(10),
            &|m| m.recall_at(50),
        ];
        for f in metrics {
            let (mean, std) = row.summary(f);
            let _ = write!(out, "{:>20}", format!("{mean:.4}±{std:.4}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{chronological_split, generate, GenConfig, SplitSpec};
    use crate::model::Aggregator;

    fn tiny_split(seed: u64) -> Split {
        let g = generate(&GenConfig {
            n_users: 150,
            n_items: 80,
            n_streamers: 10,
            buys_per_user: 8.0,
            seed,
            ..Default::default()
        })
        .unwrap();
        chronological_split(&g, &SplitSpec::default()).unwrap()
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            embed_dim: 16,
            layer_dims: vec![8, 8],
            mlp_hidden: 8,
            ..Default::default()
        }
    }

    #[test]
    fn share_partitions_and_never_starves() {
        let xs: Vec<usize> = (0..10).collect();
        let parts: Vec<usize> = (0..3).flat_map(|b| share(&xs, b, 3).to_vec()).collect();
        assert_eq!(parts, xs);
        let few = [7, 8];
        for b in 0..5 {
            assert_eq!(share(&few, b, 5).len(), 1);
        }
    }

    #[test]
    fn early_stopper_rule_trace() {
        // strictly worsening with patience 1: stop after the second evaluation
        let mut s = EarlyStopper::new(1);
        assert!(s.observe(0.5));
        assert!(!s.should_stop());
        assert!(!s.observe(0.4));
        assert!(s.should_stop());
        let mut s = EarlyStopper::new(2);
        for v in [0.1, 0.2, 0.2, 0.3, 0.25, 0.2] {
            s.observe(v);
        }
        assert!(s.should_stop());
        assert_eq!(s.best(), 0.3);
    }

    #[test]
    fn first_epoch_loss_near_ln2_and_single_task_reports_absent_follow() {
        let split = tiny_split(1);
        let mc = ModelConfig {
            relations: vec![0],
            tasks: vec![0],
            ..tiny_model()
        };
        let tc = TrainConfig {
            batch_size: 256,
            ..Default::default()
        };
        let fanout = FanoutPlan::from_quantile(&split.train, 0.9).unwrap();
        let mut m = Model::init(mc, EntityCounts::of(&split.train), 3).unwrap();
        let loss = train_epoch(&mut m, &split.train, &tc, &fanout, 1).unwrap();
        assert!(loss.follow.is_none());
        assert!((loss.buy.unwrap() - std::f64::consts::LN_2).abs() < 0.1, "{loss:?}");
    }

    #[test]
    fn fit_is_deterministic_and_returns_best() {
        let split = tiny_split(2);
        let tc = TrainConfig {
            lr: 0.01,
            batch_size: 256,
            max_epochs: 4,
            patience: 2,
            seed: 9,
            ..Default::default()
        };
        let a = fit(&tiny_model(), &tc, &split).unwrap();
        let b = fit(&tiny_model(), &tc, &split).unwrap();
        assert_eq!(a.model, b.model);
        let losses = |h: &TrainHistory| h.epochs.iter().map(|e| e.loss).collect::<Vec<_>>();
        assert_eq!(losses(&a.history), losses(&b.history));
        let h = &a.history;
        let observed = h
            .epochs
            .iter()
            .filter_map(|e| e.val.as_ref())
            .map(|m| m.recall_at(10))
            .chain([h.initial.recall_at(10)]);
        for v in observed {
            assert!(v <= h.best_recall);
        }
        let returned = crate::eval::evaluate(&a.model, &split.train, &pairs(&split.val), &[], &DEFAULT_KS).unwrap().0;
        assert_eq!(returned.recall_at(10), h.best_recall);
    }

    #[test]
    fn empty_validation_is_a_config_error() {
        let mut split = tiny_split(3);
        split.val.clear();
        assert!(matches!(
            fit(&tiny_model(), &TrainConfig::default(), &split),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ablation_grid_rows_and_table() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 5);
        assert_eq!(grid[4], (vec![0, 1, 2], vec![0, 1]));
        let split = tiny_split(4);
        let tc = TrainConfig {
            lr: 0.01,
            batch_size: 512,
            max_epochs: 1,
            ..Default::default()
        };
        let base = ModelConfig {
            aggregator: Aggregator::None,
            ..tiny_model()
        };
        let rows = run_ablation(&base, &tc, &split, 2).unwrap();
        assert_eq!(rows.len(), 5);
        assert!(rows.iter().all(|r| r.runs.len() == 2));
        let table = ablation_table(&rows);
        assert_eq!(table.lines().count(), 6);
        assert!(table.lines().nth(5).unwrap().starts_with("0,1,2     0,1"));
    }
}
