//! The recommender network: shared embedding tables, one encoder per active
//! relation, concatenation into unified embeddings, and per-task MLP scoring.

mod checkpoint;
mod encoder;
mod predictor;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{EntityKind, Relation, Side, TripartiteGraph};
use crate::numkit::{adam_step, bce_with_logits, bce_with_logits_backward, glorot_init, AdamConfig, DenseMatrix, ParamTensor};
use crate::rng;
use crate::sampler::{MiniBatch, RelationBlocks, TaskEdges};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use encoder::{block_norm, encode_full};
pub use predictor::{Mlp, PairScorer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Gcn,
    LightGcn,
    None,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gcn" => Ok(Aggregator::Gcn),
            "lightgcn" => Ok(Aggregator::LightGcn),
            "none" => Ok(Aggregator::None),
            _ => Err(Error::Argument(format!("unknown aggregator {s:?}"))),
        }
    }
}

/// Prediction tasks: 0 = buy (user-item), 1 = follow (user-streamer).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Buy,
    Follow,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Buy, Task::Follow];

    pub fn id(self) -> u8 {
        match self {
            Task::Buy => 0,
            Task::Follow => 1,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Task::Buy),
            1 => Ok(Task::Follow),
            _ => Err(Error::Config(format!("unknown task id {id}"))),
        }
    }

    /// The relation whose edges are the task's positives.
    pub fn relation(self) -> Relation {
        match self {
            Task::Buy => Relation::Buy,
            Task::Follow => Relation::Follow,
        }
    }

    pub fn right_kind(self) -> EntityKind {
        self.relation().right_kind()
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Buy => "buy",
            Task::Follow => "follow",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub layer_dims: Vec<usize>,
    pub aggregator: Aggregator,
    pub relations: Vec<u8>,
    pub tasks: Vec<u8>,
    pub alpha: f64,
    pub mlp_hidden: usize,
    pub negative_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 200,
            layer_dims: vec![128, 64],
            aggregator: Aggregator::Gcn,
            relations: vec![0, 1, 2],
            tasks: vec![0, 1],
            alpha: 0.5,
            mlp_hidden: 128,
            negative_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.embed_dim == 0 || self.mlp_hidden == 0 {
            return bad("embed_dim and mlp_hidden must be positive".into());
        }
        if self.aggregator != Aggregator::None && (self.layer_dims.is_empty() || self.layer_dims.contains(&0)) {
            return bad(format!("layer_dims {:?} must be nonempty and positive", self.layer_dims));
        }
        if self.negative_ratio == 0 {
            return bad("negative_ratio must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        for &r in &self.relations {
            Relation::from_id(r).map_err(|_| Error::Config(format!("unknown relation id {r}")))?;
        }
        for &t in &self.tasks {
            Task::from_id(t)?;
        }
        if self.tasks.is_empty() {
            return bad("at least one task is required".into());
        }
        for task in self.active_tasks() {
            if !self.relations.contains(&task.relation().id()) {
                return bad(format!(
                    "task {} requires relation {}",
                    task.name(),
                    task.relation().id()
                ));
            }
        }
        Ok(())
    }

    /// Active relations, ascending by id.
    pub fn active_relations(&self) -> Vec<Relation> {
        let mut ids = self.relations.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().filter_map(|r| Relation::from_id(r).ok()).collect()
    }

    pub fn active_tasks(&self) -> Vec<Task> {
        let mut ids = self.tasks.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter().filter_map(|t| Task::from_id(t).ok()).collect()
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.tasks.contains(&task.id())
    }

    /// Message-passing depth; the no-graph baseline has none.
    pub fn n_layers(&self) -> usize {
        match self.aggregator {
            Aggregator::None => 0,
            _ => self.layer_dims.len(),
        }
    }

    /// Width of one relation's output.
    pub fn output_width(&self) -> usize {
        match self.aggregator {
            Aggregator::None => self.embed_dim,
            _ => *self.layer_dims.last().unwrap_or(&self.embed_dim),
        }
    }

    pub fn unified_width(&self, kind: EntityKind) -> usize {
        let parts = self
            .active_relations()
            .iter()
            .filter(|r| r.side_of(kind).is_some())
            .count();
        parts * self.output_width()
    }
}

/// Entity counts a model was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityCounts {
    pub n_users: usize,
    pub n_items: usize,
    pub n_streamers: usize,
}

impl EntityCounts {
    pub fn of(graph: &TripartiteGraph) -> Self {
        Self {
            n_users: graph.n_users,
            n_items: graph.n_items,
            n_streamers: graph.n_streamers,
        }
    }

    pub fn get(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.n_users,
            EntityKind::Item => self.n_items,
            EntityKind::Streamer => self.n_streamers,
        }
    }
}

fn kind_slot(kind: EntityKind) -> usize {
    match kind {
        EntityKind::User => 0,
        EntityKind::Item => 1,
        EntityKind::Streamer => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One table per entity kind, shared by every relation touching it.
    embeddings: [ParamTensor; 3],
    /// Per relation id, one weight per layer (GCN only).
    gcn: [Vec<ParamTensor>; 3],
    /// Shared layer-mean projection (LightGCN only).
    projection: Option<ParamTensor>,
    /// Per task id.
    mlps: [Option<Mlp>; 2],
}

fn init_tensor(rows: usize, cols: usize, seed: u64, path: &[u64]) -> ParamTensor {
    if rows == 0 || cols == 0 {
        return ParamTensor::zeros(rows, cols);
    }
    ParamTensor::new(glorot_init(rows, cols, rng::derive_seed(seed, path)))
}

impl ModelParams {
    pub fn init(config: &ModelConfig, counts: &EntityCounts, seed: u64) -> Result<Self> {
        config.validate()?;
        let d0 = config.embed_dim;
        let embeddings = EntityKind::ALL.map(|k| init_tensor(counts.get(k), d0, seed, &[1, kind_slot(k) as u64]));
        let mut gcn: [Vec<ParamTensor>; 3] = Default::default();
        if config.aggregator == Aggregator::Gcn {
            for rel in config.active_relations() {
                let mut dims = vec![d0];
                dims.extend(&config.layer_dims);
                gcn[rel.id() as usize] = dims
                    .windows(2)
                    .enumerate()
                    .map(|(l, w)| init_tensor(w[0], w[1], seed, &[2, rel.id() as u64, l as u64]))
                    .collect();
            }
        }
        let projection =
            (config.aggregator == Aggregator::LightGcn).then(|| init_tensor(d0, config.output_width(), seed, &[3]));
        let mut mlps: [Option<Mlp>; 2] = [None, None];
        for task in config.active_tasks() {
            let input = config.unified_width(EntityKind::User) + config.unified_width(task.right_kind());
            let h = config.mlp_hidden;
            let t = task.id() as u64;
            mlps[task.id() as usize] = Some(Mlp {
                w1: init_tensor(input, h, seed, &[4, t, 1]),
                b1: ParamTensor::zeros(1, h),
                w2: init_tensor(h, 1, seed, &[4, t, 2]),
                b2: ParamTensor::zeros(1, 1),
            });
        }
        Ok(Self {
            embeddings,
            gcn,
            projection,
            mlps,
        })
    }

    pub fn embedding(&self, kind: EntityKind) -> &ParamTensor {
        &self.embeddings[kind_slot(kind)]
    }

    pub fn embedding_mut(&mut self, kind: EntityKind) -> &mut ParamTensor {
        &mut self.embeddings[kind_slot(kind)]
    }

    pub fn gcn_weights(&self, relation: Relation) -> &[ParamTensor] {
        &self.gcn[relation.id() as usize]
    }

    pub fn gcn_weights_mut(&mut self, relation: Relation) -> &mut [ParamTensor] {
        &mut self.gcn[relation.id() as usize]
    }

    /// The LightGCN projection. Panics for other aggregators.
    pub fn projection(&self) -> &ParamTensor {
        self.projection.as_ref().expect("projection exists only for LightGCN")
    }

    pub fn projection_mut(&mut self) -> &mut ParamTensor {
        self.projection.as_mut().expect("projection exists only for LightGCN")
    }

    pub fn mlp(&self, task: Task) -> Option<&Mlp> {
        self.mlps[task.id() as usize].as_ref()
    }

    pub fn mlp_mut(&mut self, task: Task) -> Option<&mut Mlp> {
        self.mlps[task.id() as usize].as_mut()
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &ParamTensor)> {
        let mut out: Vec<(String, &ParamTensor)> = Vec::new();
        for k in EntityKind::ALL {
            out.push((format!("embedding.{}", k.name()), self.embedding(k)));
        }
        for r in Relation::ALL {
            for (l, w) in self.gcn_weights(r).iter().enumerate() {
                out.push((format!("gcn.{}.{l}", r.name()), w));
            }
        }
        if let Some(p) = &self.projection {
            out.push(("projection".into(), p));
        }
        for t in Task::ALL {
            if let Some(m) = self.mlp(t) {
                for (name, p) in [("w1", &m.w1), ("b1", &m.b1), ("w2", &m.w2), ("b2", &m.b2)] {
                    out.push((format!("mlp.{}.{name}", t.name()), p));
                }
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = self.embeddings.iter_mut().collect();
        for layer in self.gcn.iter_mut() {
            out.extend(layer.iter_mut());
        }
        out.extend(self.projection.iter_mut());
        for m in self.mlps.iter_mut().flatten() {
            out.extend([&mut m.w1, &mut m.b1, &mut m.w2, &mut m.b2]);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.tensors_mut() {
            p.zero_grad();
        }
    }

    pub fn n_parameters(&self) -> usize {
        self.named().iter().map(|(_, p)| p.value.values().len()).sum()
    }
}

/// Concatenates one kind's per-relation outputs in ascending relation id.
pub fn unify_embeddings(parts: &[(Relation, &DenseMatrix)], kind: EntityKind) -> Result<DenseMatrix> {
    let mut sorted: Vec<&(Relation, &DenseMatrix)> = parts.iter().filter(|(r, _)| r.side_of(kind).is_some()).collect();
    if sorted.is_empty() {
        return Err(Error::Contract(format!("{kind} nodes appear in no active relation")));
    }
    sorted.sort_by_key(|(r, _)| r.id());
    let mats: Vec<&DenseMatrix> = sorted.iter().map(|(_, m)| *m).collect();
    DenseMatrix::hcat(&mats)
}

/// Unified embeddings of every node of every kind covered by the active relations.
#[derive(Debug, Clone, PartialEq)]
pub struct Unified {
    parts: [Option<DenseMatrix>; 3],
}

impl Unified {
    pub fn get(&self, kind: EntityKind) -> Result<&DenseMatrix> {
        self.parts[kind_slot(kind)]
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("no unified embedding for {kind} nodes")))
    }
}

/// Per-task mean BCE and the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub buy: Option<f64>,
    pub follow: Option<f64>,
    pub total: f64,
}

/// `alpha * buy + (1 - alpha) * follow` with both tasks, else the single task.
pub fn combine_losses(buy: Option<f64>, follow: Option<f64>, alpha: f64) -> Result<f64> {
    match (buy, follow) {
        (Some(b), Some(f)) => Ok(alpha * b + (1.0 - alpha) * f),
        (Some(x), None) | (None, Some(x)) => Ok(x),
        (None, None) => Err(Error::Contract("no active task in the loss".into())),
    }
}

fn task_weight(config: &ModelConfig, task: Task) -> f64 {
    let both = config.has_task(Task::Buy) && config.has_task(Task::Follow);
    match (both, task) {
        (false, _) => 1.0,
        (true, Task::Buy) => config.alpha,
        (true, Task::Follow) => 1.0 - config.alpha,
    }
}

struct TaskForward {
    task: Task,
    logits: Vec<f64>,
    cache: predictor::PredictorCache,
}

struct BatchForward {
    caches: Vec<encoder::EncoderCache>,
    /// Per-relation (left rows, right rows) split of each block output.
    n_left: Vec<usize>,
    unified: [Option<DenseMatrix>; 3],
    tasks: Vec<TaskForward>,
    loss: BatchLoss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub counts: EntityCounts,
    pub params: ModelParams,
}

impl Model {
    pub fn init(config: ModelConfig, counts: EntityCounts, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, &counts, seed)?;
        Ok(Self { config, counts, params })
    }

    fn task_edges(batch: &MiniBatch, task: Task) -> Option<&TaskEdges> {
        match task {
            Task::Buy => batch.buy.as_ref(),
            Task::Follow => batch.follow.as_ref(),
        }
    }

    fn forward(&self, batch: &MiniBatch) -> Result<BatchForward> {
        let relations = self.config.active_relations();
        let got: Vec<Relation> = batch.blocks.iter().map(|b| b.relation).collect();
        if got != relations {
            return Err(Error::Contract(format!(
                "batch blocks {got:?} do not match active relations {relations:?}"
            )));
        }
        let encoded: Vec<(DenseMatrix, encoder::EncoderCache)> = {
            use rayon::prelude::*;
            batch
                .blocks
                .par_iter()
                .map(|b| encoder::encode_blocks(&self.params, &self.config, b))
                .collect::<Result<_>>()?
        };
        let n_left: Vec<usize> = batch.blocks.iter().map(|b| b.n_left_targets).collect();
        let mut unified: [Option<DenseMatrix>; 3] = [None, None, None];
        for kind in EntityKind::ALL {
            let slices: Vec<(Relation, DenseMatrix)> = relations
                .iter()
                .zip(&encoded)
                .zip(&n_left)
                .filter_map(|((&rel, (out, _)), &nl)| match rel.side_of(kind) {
                    Some(Side::Left) => Some((rel, out.row_slice(0, nl))),
                    Some(Side::Right) => Some((rel, out.row_slice(nl, out.rows()))),
                    None => None,
                })
                .collect();
            if !slices.is_empty() {
                let refs: Vec<(Relation, &DenseMatrix)> = slices.iter().map(|(r, m)| (*r, m)).collect();
                unified[kind_slot(kind)] = Some(unify_embeddings(&refs, kind)?);
            }
        }

        let mut tasks = Vec::new();
        let mut losses = [None, None];
        for task in self.config.active_tasks() {
            let edges = Self::task_edges(batch, task)
                .ok_or_else(|| Error::Contract(format!("batch has no {} edges", task.name())))?;
            let mlp = self.params.mlp(task).expect("active task has an MLP");
            let left = unified[0].as_ref().expect("users are covered by every task relation");
            let right = unified[kind_slot(task.right_kind())].as_ref().expect("task relation covers its right kind");
            let (logits, cache) = predictor::predict_forward(mlp, left, right, &edges.left_pos, &edges.right_pos)?;
            let loss = bce_with_logits(&logits, &edges.labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss", task.name())));
            }
            losses[task.id() as usize] = Some(loss);
            tasks.push(TaskForward { task, logits, cache });
        }
        let total = combine_losses(losses[0], losses[1], self.config.alpha)?;
        Ok(BatchForward {
            caches: encoded.into_iter().map(|(_, c)| c).collect(),
            n_left,
            unified,
            tasks,
            loss: BatchLoss {
                buy: losses[0],
                follow: losses[1],
                total,
            },
        })
    }

    /// Loss of a batch without touching gradients.
    pub fn batch_loss(&self, batch: &MiniBatch) -> Result<BatchLoss> {
        Ok(self.forward(batch)?.loss)
    }

    /// Loss of a batch; gradients are accumulated into the parameters.
    pub fn forward_backward(&mut self, batch: &MiniBatch) -> Result<BatchLoss> {
        let fwd = self.forward(batch)?;
        let loss = fwd.loss;
        let BatchForward {
            caches,
            n_left,
            unified,
            tasks,
            ..
        } = fwd;

        let mut grads: [Option<DenseMatrix>; 3] =
            unified.each_ref().map(|u| u.as_ref().map(|m| DenseMatrix::zeros(m.rows(), m.cols())));
        for tf in tasks {
            let edges = Self::task_edges(batch, tf.task).expect("checked in forward");
            let weight = task_weight(&self.config, tf.task);
            let mut g = bce_with_logits_backward(&tf.logits, &edges.labels)?;
            for v in g.iter_mut() {
                *v *= weight;
            }
            let right_slot = kind_slot(tf.task.right_kind());
            let left = unified[0].as_ref().expect("users present");
            let right = unified[right_slot].as_ref().expect("right kind present");
            let mlp = self.params.mlp_mut(tf.task).expect("active task has an MLP");
            let (gl, gr) =
                predictor::predict_backward(mlp, left, right, &edges.left_pos, &edges.right_pos, tf.cache, &g)?;
            grads[0].as_mut().expect("users present").add_assign(&gl)?;
            grads[right_slot].as_mut().expect("right kind present").add_assign(&gr)?;
        }

        // split unified gradients back into per-relation column blocks
        let width = self.config.output_width();
        let relations = self.config.active_relations();
        let mut offsets = [0usize; 3];
        for ((rel, cache), nl) in relations.iter().zip(caches).zip(n_left) {
            let mut part = |kind: EntityKind| -> Result<DenseMatrix> {
                let slot = kind_slot(kind);
                let g = grads[slot].as_ref().expect("kind covered by an active relation");
                let m = g.column_slice(offsets[slot], offsets[slot] + width)?;
                offsets[slot] += width;
                Ok(m)
            };
            let top = part(rel.left_kind())?;
            let bottom = part(rel.right_kind())?;
            debug_assert_eq!(top.rows(), nl);
            let rows = top.rows() + bottom.rows();
            let mut values = top.into_values();
            values.extend(bottom.into_values());
            let grad_out = DenseMatrix::new(rows, width, values)?;
            encoder::backward_blocks(&mut self.params, cache, grad_out)?;
        }
        Ok(loss)
    }

    /// One Adam step from the accumulated gradients.
    pub fn step(&mut self, adam: &AdamConfig) {
        adam_step(self.params.tensors_mut(), adam);
    }

    /// Encoder output rows for the targets of one relation's blocks.
    pub fn encode_blocks(&self, blocks: &RelationBlocks) -> Result<DenseMatrix> {
        Ok(encoder::encode_blocks(&self.params, &self.config, blocks)?.0)
    }

    /// Whole-graph unified embeddings for every covered kind.
    pub fn embed_all(&self, graph: &TripartiteGraph) -> Result<Unified> {
        if EntityCounts::of(graph) != self.counts {
            return Err(Error::Shape(format!(
                "graph counts {:?} differ from model counts {:?}",
                EntityCounts::of(graph),
                self.counts
            )));
        }
        let outputs: Vec<(Relation, DenseMatrix)> = {
            use rayon::prelude::*;
            self.config
                .active_relations()
                .into_par_iter()
                .map(|rel| Ok((rel, encode_full(&self.params, &self.config, graph, rel)?)))
                .collect::<Result<_>>()?
        };
        let mut parts: [Option<DenseMatrix>; 3] = [None, None, None];
        for kind in EntityKind::ALL {
            let slices: Vec<(Relation, DenseMatrix)> = outputs
                .iter()
                .filter_map(|(rel, out)| {
                    let nl = graph.relation(*rel).left_count();
                    match rel.side_of(kind) {
                        Some(Side::Left) => Some((*rel, out.row_slice(0, nl))),
                        Some(Side::Right) => Some((*rel, out.row_slice(nl, out.rows()))),
                        None => None,
                    }
                })
                .collect();
            if !slices.is_empty() {
                let refs: Vec<(Relation, &DenseMatrix)> = slices.iter().map(|(r, m)| (*r, m)).collect();
                let u = unify_embeddings(&refs, kind)?;
                u.ensure_finite("unified embedding")?;
                parts[kind_slot(kind)] = Some(u);
            }
        }
        Ok(Unified { parts })
    }

    /// Logits of `(user, right)` pairs for a task.
    pub fn predict_pairs(&self, unified: &Unified, pairs: &[(usize, usize)], task: Task) -> Result<Vec<f64>> {
        let mlp = self
            .params
            .mlp(task)
            .ok_or_else(|| Error::Config(format!("task {} is not active", task.name())))?;
        let left = unified.get(EntityKind::User)?;
        let right = unified.get(task.right_kind())?;
        for &(l, r) in pairs {
            if l >= left.rows() || r >= right.rows() {
                return Err(Error::Index(format!("pair ({l}, {r}) out of range")));
            }
        }
        let lp: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let rp: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        Ok(predictor::predict_forward(mlp, left, right, &lp, &rp)?.0)
    }

    /// Scorer over all users and all right-kind nodes of a task.
    pub fn scorer(&self, unified: &Unified, task: Task) -> Result<PairScorer> {
        let mlp = self
            .params
            .mlp(task)
            .ok_or_else(|| Error::Config(format!("task {} is not active", task.name())))?;
        mlp.scorer(unified.get(EntityKind::User)?, unified.get(task.right_kind())?)
    }
}

#[cfg(test)]
mod tests;
