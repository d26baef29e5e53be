//! Negative sampling and layered neighbor-sampled blocks for mini-batches.
//!
//! Node ids inside a block are "union ids" of one bipartite graph: left nodes
//! keep their index, right nodes are offset by the left count. Every layer's
//! destination nodes form a prefix of its source nodes, so the final targets
//! are a prefix of every layer.

use std::collections::{HashMap, HashSet};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_store::{Adjacency, BipartiteGraph, Direction, EntityKind, Relation, TripartiteGraph};
use crate::rng;

/// Per (relation, direction) cap on neighbors sampled per node and layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanoutPlan {
    /// Indexed by relation id, then forward/reverse.
    pub fanouts: [[usize; 2]; 3],
}

impl FanoutPlan {
    /// No sampling: every neighbor is kept.
    pub fn full() -> Self {
        Self {
            fanouts: [[usize::MAX; 2]; 3],
        }
    }

    /// Degree quantile `p` of every relation and direction. Empty directions
    /// fall back to fanout 1.
    pub fn from_quantile(graph: &TripartiteGraph, p: f64) -> Result<Self> {
        let mut fanouts = [[1usize; 2]; 3];
        for r in Relation::ALL {
            for (d, dir) in [Direction::Forward, Direction::Reverse].into_iter().enumerate() {
                let g = graph.relation(r);
                let has_nodes = match dir {
                    Direction::Forward => g.left_count() > 0,
                    Direction::Reverse => g.right_count() > 0,
                };
                if has_nodes {
                    fanouts[r.id() as usize][d] = g.degree_quantile(dir, p)?;
                } else if !(p > 0.0 && p <= 1.0) {
                    return Err(Error::Argument(format!("quantile level {p} outside (0, 1]")));
                }
            }
        }
        Ok(Self { fanouts })
    }

    pub fn get(&self, relation: Relation, direction: Direction) -> usize {
        let d = match direction {
            Direction::Forward => 0,
            Direction::Reverse => 1,
        };
        self.fanouts[relation.id() as usize][d]
    }
}

/// Uniform negatives for each positive `(left, right)`, rejecting rights that
/// are known positives of `left`. Returns the negatives and the number of
/// distinct left nodes skipped because every right id is a known positive.
pub fn sample_negatives(
    positives: &[(usize, usize)],
    known: &Adjacency,
    right_count: usize,
    ratio: usize,
    r: &mut rng::Rng,
) -> (Vec<(usize, usize)>, usize) {
    let mut out = Vec::with_capacity(positives.len() * ratio);
    let mut skipped = HashSet::new();
    for &(left, _) in positives {
        let taken = known.neighbors(left);
        if taken.len() >= right_count {
            skipped.insert(left);
            continue;
        }
        for _ in 0..ratio {
            let neg = if 2 * taken.len() < right_count {
                loop {
                    let c = r.random_range(0..right_count);
                    if taken.binary_search(&c).is_err() {
                        break c;
                    }
                }
            } else {
                let mut k = r.random_range(0..right_count - taken.len());
                for &t in taken {
                    if t <= k {
                        k += 1;
                    } else {
                        break;
                    }
                }
                k
            };
            out.push((left, neg));
        }
    }
    (out, skipped.len())
}

/// One message-passing layer: destination rows aggregate sampled source rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBlock {
    /// Union ids of the source nodes; the first `n_dst` are the destinations.
    pub src_nodes: Vec<usize>,
    pub n_dst: usize,
    /// CSR over destination rows into local source indices (neighbors only,
    /// no self entries).
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    /// Full-graph degree of each source node.
    pub src_degree: Vec<usize>,
}

impl LayerBlock {
    pub fn neighbors(&self, dst: usize) -> &[usize] {
        &self.indices[self.indptr[dst]..self.indptr[dst + 1]]
    }
}

/// Blocks for one bipartite graph, outermost (input) layer first.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationBlocks {
    pub relation: Relation,
    pub left_count: usize,
    /// Union ids of the output nodes: left seeds, then right seeds.
    pub targets: Vec<usize>,
    pub n_left_targets: usize,
    pub layers: Vec<LayerBlock>,
}

impl RelationBlocks {
    /// Entity kind and index of a union id.
    pub fn resolve(&self, union_id: usize) -> (EntityKind, usize) {
        if union_id < self.left_count {
            (self.relation.left_kind(), union_id)
        } else {
            (self.relation.right_kind(), union_id - self.left_count)
        }
    }

    /// Input nodes of the outermost layer (the targets when there are no layers).
    pub fn input_nodes(&self) -> &[usize] {
        self.layers.first().map_or(&self.targets, |l| &l.src_nodes)
    }
}

/// Sorted, deduplicated seed nodes per entity kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeedSets {
    pub users: Vec<usize>,
    pub items: Vec<usize>,
    pub streamers: Vec<usize>,
}

impl SeedSets {
    pub fn new(mut users: Vec<usize>, mut items: Vec<usize>, mut streamers: Vec<usize>) -> Self {
        for v in [&mut users, &mut items, &mut streamers] {
            v.sort_unstable();
            v.dedup();
        }
        Self {
            users,
            items,
            streamers,
        }
    }

    /// Every node of every kind.
    pub fn all(graph: &TripartiteGraph) -> Self {
        Self {
            users: (0..graph.n_users).collect(),
            items: (0..graph.n_items).collect(),
            streamers: (0..graph.n_streamers).collect(),
        }
    }

    pub fn get(&self, kind: EntityKind) -> &[usize] {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
            EntityKind::Streamer => &self.streamers,
        }
    }

    /// Position of `index` within the seeds of `kind`.
    pub fn position(&self, kind: EntityKind, index: usize) -> Option<usize> {
        self.get(kind).binary_search(&index).ok()
    }
}

fn neighbors_of(g: &BipartiteGraph, union_id: usize) -> (&[usize], usize, Direction) {
    if union_id < g.left_count() {
        (g.forward().neighbors(union_id), g.left_count(), Direction::Forward)
    } else {
        (g.reverse().neighbors(union_id - g.left_count()), 0, Direction::Reverse)
    }
}

/// Expands `n_layers` hops around the seeds in one bipartite graph.
pub fn build_relation_blocks(
    graph: &TripartiteGraph,
    relation: Relation,
    seeds: &SeedSets,
    fanout: &FanoutPlan,
    n_layers: usize,
    r: &mut rng::Rng,
) -> RelationBlocks {
    let g = graph.relation(relation);
    let left = seeds.get(relation.left_kind());
    let right = seeds.get(relation.right_kind());
    let targets: Vec<usize> = left
        .iter()
        .copied()
        .chain(right.iter().map(|&x| x + g.left_count()))
        .collect();

    let mut layers = Vec::with_capacity(n_layers);
    let mut nodes = targets.clone();
    for _ in 0..n_layers {
        let n_dst = nodes.len();
        let mut local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let mut indptr = Vec::with_capacity(n_dst + 1);
        let mut indices = Vec::new();
        indptr.push(0);
        for d in 0..n_dst {
            let (nbrs, offset, dir) = neighbors_of(g, nodes[d]);
            let cap = fanout.get(relation, dir);
            let mut picked: Vec<usize> = if nbrs.len() <= cap {
                nbrs.to_vec()
            } else {
                let mut sel: Vec<usize> = index::sample(r, nbrs.len(), cap).into_iter().map(|k| nbrs[k]).collect();
                sel.sort_unstable();
                sel
            };
            for v in picked.iter_mut() {
                let u = *v + offset;
                let next = nodes.len();
                *v = *local.entry(u).or_insert_with(|| {
                    nodes.push(u);
                    next
                });
            }
            indices.extend(picked);
            indptr.push(indices.len());
        }
        let src_degree = nodes.iter().map(|&u| g.union_degree(u)).collect();
        layers.push(LayerBlock {
            src_nodes: nodes.clone(),
            n_dst,
            indptr,
            indices,
            src_degree,
        });
    }
    layers.reverse();
    RelationBlocks {
        relation,
        left_count: g.left_count(),
        targets,
        n_left_targets: left.len(),
        layers,
    }
}

/// Blocks for each requested relation, each from its own RNG stream.
pub fn build_blocks(
    graph: &TripartiteGraph,
    relations: &[Relation],
    seeds: &SeedSets,
    fanout: &FanoutPlan,
    n_layers: usize,
    seed: u64,
) -> Vec<RelationBlocks> {
    relations
        .iter()
        .map(|&rel| {
            let mut r = rng::stream(seed, &[0xb10c, rel.id() as u64]);
            build_relation_blocks(graph, rel, seeds, fanout, n_layers, &mut r)
        })
        .collect()
}

/// Labeled pairs for one task; positions index into the batch's seed sets.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEdges {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<f64>,
    pub left_pos: Vec<usize>,
    pub right_pos: Vec<usize>,
    pub n_positive: usize,
    pub skipped_nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub buy: Option<TaskEdges>,
    pub follow: Option<TaskEdges>,
    pub seeds: SeedSets,
    pub blocks: Vec<RelationBlocks>,
}

/// What to put in one batch.
#[derive(Debug, Clone, Copy)]
pub struct BatchSpec<'a> {
    pub buy_positives: Option<&'a [(usize, usize)]>,
    pub follow_positives: Option<&'a [(usize, usize)]>,
    pub negative_ratio: usize,
    pub relations: &'a [Relation],
    pub fanout: &'a FanoutPlan,
    pub n_layers: usize,
}

fn labeled(positives: &[(usize, usize)], negatives: Vec<(usize, usize)>) -> (Vec<(usize, usize)>, Vec<f64>) {
    let mut labels = vec![1.0; positives.len()];
    labels.resize(positives.len() + negatives.len(), 0.0);
    let mut pairs = positives.to_vec();
    pairs.extend(negatives);
    (pairs, labels)
}

impl MiniBatch {
    /// Samples negatives against the graph's own edges, collects seeds from
    /// every endpoint, and expands blocks for the requested relations.
    pub fn assemble(graph: &TripartiteGraph, spec: &BatchSpec<'_>, seed: u64) -> Result<Self> {
        if spec.negative_ratio == 0 {
            return Err(Error::Argument("negative ratio must be at least 1".into()));
        }
        let mut r = rng::stream(seed, &[0x4e6]);
        let buy = spec.buy_positives.map(|pos| {
            let (neg, skipped) = sample_negatives(pos, graph.buy.forward(), graph.n_items, spec.negative_ratio, &mut r);
            (labeled(pos, neg), pos.len(), skipped)
        });
        let follow = spec.follow_positives.map(|pos| {
            let (neg, skipped) =
                sample_negatives(pos, graph.follow.forward(), graph.n_streamers, spec.negative_ratio, &mut r);
            (labeled(pos, neg), pos.len(), skipped)
        });

        let mut users = Vec::new();
        let mut items = Vec::new();
        let mut streamers = Vec::new();
        if let Some(((pairs, _), _, _)) = &buy {
            users.extend(pairs.iter().map(|p| p.0));
            items.extend(pairs.iter().map(|p| p.1));
        }
        if let Some(((pairs, _), _, _)) = &follow {
            users.extend(pairs.iter().map(|p| p.0));
            streamers.extend(pairs.iter().map(|p| p.1));
        }
        let seeds = SeedSets::new(users, items, streamers);

        let finish = |task: Option<((Vec<(usize, usize)>, Vec<f64>), usize, usize)>, right_kind: EntityKind| {
            task.map(|((pairs, labels), n_positive, skipped_nodes)| TaskEdges {
                left_pos: pairs.iter().map(|p| seeds.position(EntityKind::User, p.0).unwrap()).collect(),
                right_pos: pairs.iter().map(|p| seeds.position(right_kind, p.1).unwrap()).collect(),
                pairs,
                labels,
                n_positive,
                skipped_nodes,
            })
        };
        let buy = finish(buy, EntityKind::Item);
        let follow = finish(follow, EntityKind::Streamer);
        let blocks = build_blocks(graph, spec.relations, &seeds, spec.fanout, spec.n_layers, seed);
        Ok(Self {
            buy,
            follow,
            seeds,
            blocks,
        })
    }
}
