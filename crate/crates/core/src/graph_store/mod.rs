//! The tripartite interaction graph, stored as three binarized bipartite
//! graphs with adjacency in both directions.

mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::SparseMatrix;

pub use io::{load_edges, read_snapshot, write_edges, write_snapshot, Dataset, IdDictionary, IdMaps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EntityKind {
    User,
    Item,
    Streamer,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::User, EntityKind::Item, EntityKind::Streamer];

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::User => "user",
            EntityKind::Item => "item",
            EntityKind::Streamer => "streamer",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId {
    pub kind: EntityKind,
    pub index: usize,
}

/// The three interaction relations. Ids follow the ablation labels:
/// 0 = buy, 1 = follow, 2 = sell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Buy,
    Follow,
    Sell,
}

impl Relation {
    pub const ALL: [Relation; 3] = [Relation::Buy, Relation::Follow, Relation::Sell];

    pub fn id(self) -> u8 {
        match self {
            Relation::Buy => 0,
            Relation::Follow => 1,
            Relation::Sell => 2,
        }
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Relation::Buy),
            1 => Ok(Relation::Follow),
            2 => Ok(Relation::Sell),
            _ => Err(Error::Argument(format!("unknown relation id {id}"))),
        }
    }

    pub fn left_kind(self) -> EntityKind {
        match self {
            Relation::Buy | Relation::Follow => EntityKind::User,
            Relation::Sell => EntityKind::Streamer,
        }
    }

    pub fn right_kind(self) -> EntityKind {
        match self {
            Relation::Buy | Relation::Sell => EntityKind::Item,
            Relation::Follow => EntityKind::Streamer,
        }
    }

    /// Which side of this relation `kind` sits on, if any.
    pub fn side_of(self, kind: EntityKind) -> Option<Side> {
        if self.left_kind() == kind {
            Some(Side::Left)
        } else if self.right_kind() == kind {
            Some(Side::Right)
        } else {
            None
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Buy => "buy",
            Relation::Follow => "follow",
            Relation::Sell => "sell",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tsv", self.name())
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
}

/// Traversal direction: forward walks left→right, reverse walks right→left.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    pub left: usize,
    pub right: usize,
    pub timestamp: Option<i64>,
}

impl Edge {
    pub fn new(left: usize, right: usize) -> Self {
        Self {
            left,
            right,
            timestamp: None,
        }
    }

    pub fn at(left: usize, right: usize, timestamp: i64) -> Self {
        Self {
            left,
            right,
            timestamp: Some(timestamp),
        }
    }
}

/// Row-compressed neighbor lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    indptr: Vec<usize>,
    indices: Vec<usize>,
}

impl Adjacency {
    pub fn from_parts(indptr: Vec<usize>, indices: Vec<usize>) -> Self {
        Self { indptr, indices }
    }

    pub fn n_rows(&self) -> usize {
        self.indptr.len() - 1
    }

    pub fn n_edges(&self) -> usize {
        self.indices.len()
    }

    #[inline]
    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.indices[self.indptr[row]..self.indptr[row + 1]]
    }

    #[inline]
    pub fn degree(&self, row: usize) -> usize {
        self.indptr[row + 1] - self.indptr[row]
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.neighbors(row).binary_search(&col).is_ok()
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BipartiteGraph {
    relation: Relation,
    left_count: usize,
    right_count: usize,
    forward: Adjacency,
    reverse: Adjacency,
    timestamps: Option<Vec<i64>>,
}

impl BipartiteGraph {
    /// Builds both CSR directions. Duplicate edges collapse to one, keeping the
    /// earliest timestamp. Timestamps are kept only if every edge carries one.
    pub fn build(
        relation: Relation,
        edges: &[Edge],
        left_count: usize,
        right_count: usize,
    ) -> Result<Self> {
        for (i, e) in edges.iter().enumerate() {
            if e.left >= left_count || e.right >= right_count {
                return Err(Error::Index(format!(
                    "{relation} edge #{i} ({}, {}) outside {left_count}x{right_count}",
                    e.left, e.right
                )));
            }
        }
        let timed = !edges.is_empty() && edges.iter().all(|e| e.timestamp.is_some());
        let mut sorted: Vec<Edge> = edges.to_vec();
        sorted.sort_by_key(|e| (e.left, e.right));
        sorted.dedup_by(|later, kept| {
            if later.left == kept.left && later.right == kept.right {
                kept.timestamp = match (kept.timestamp, later.timestamp) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
                true
            } else {
                false
            }
        });

        let mut indptr = vec![0usize; left_count + 1];
        for e in &sorted {
            indptr[e.left + 1] += 1;
        }
        for r in 0..left_count {
            indptr[r + 1] += indptr[r];
        }
        let indices: Vec<usize> = sorted.iter().map(|e| e.right).collect();
        let forward = Adjacency { indptr, indices };
        let reverse = transpose(&forward, right_count);
        let timestamps = timed.then(|| sorted.iter().map(|e| e.timestamp.unwrap()).collect());
        Ok(Self {
            relation,
            left_count,
            right_count,
            forward,
            reverse,
            timestamps,
        })
    }

    pub fn relation(&self) -> Relation {
        self.relation
    }

    pub fn left_kind(&self) -> EntityKind {
        self.relation.left_kind()
    }

    pub fn right_kind(&self) -> EntityKind {
        self.relation.right_kind()
    }

    pub fn left_count(&self) -> usize {
        self.left_count
    }

    pub fn right_count(&self) -> usize {
        self.right_count
    }

    pub fn n_edges(&self) -> usize {
        self.forward.n_edges()
    }

    pub fn forward(&self) -> &Adjacency {
        &self.forward
    }

    pub fn reverse(&self) -> &Adjacency {
        &self.reverse
    }

    pub fn adjacency(&self, direction: Direction) -> &Adjacency {
        match direction {
            Direction::Forward => &self.forward,
            Direction::Reverse => &self.reverse,
        }
    }

    pub fn timestamps(&self) -> Option<&[i64]> {
        self.timestamps.as_deref()
    }

    pub fn contains(&self, left: usize, right: usize) -> bool {
        self.forward.contains(left, right)
    }

    /// Edges in forward CSR order, with timestamps when present.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::with_capacity(self.n_edges());
        for l in 0..self.left_count {
            let start = self.forward.indptr[l];
            for (k, &r) in self.forward.neighbors(l).iter().enumerate() {
                out.push(Edge {
                    left: l,
                    right: r,
                    timestamp: self.timestamps.as_ref().map(|t| t[start + k]),
                });
            }
        }
        out
    }

    /// Degree of every node on the source side of `direction`.
    pub fn degrees(&self, direction: Direction) -> Vec<usize> {
        let adj = self.adjacency(direction);
        (0..adj.n_rows()).map(|r| adj.degree(r)).collect()
    }

    /// Nearest-rank `p`-quantile of source-side degrees, at least 1.
    pub fn degree_quantile(&self, direction: Direction, p: f64) -> Result<usize> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Argument(format!("quantile level {p} outside (0, 1]")));
        }
        let mut degrees = self.degrees(direction);
        if degrees.is_empty() {
            return Err(Error::Argument(format!(
                "{} has no nodes in the {direction:?} direction",
                self.relation
            )));
        }
        degrees.sort_unstable();
        Ok(nearest_rank(&degrees, p).max(1))
    }

    /// Symmetric normalization `D^-1/2 (A [+ I]) D^-1/2` of the block adjacency
    /// `[[0, A], [Aᵀ, 0]]` over left nodes followed by right nodes. Without
    /// self loops, isolated nodes get an all-zero row.
    pub fn normalized_blocks(&self, self_loops: bool) -> SparseMatrix {
        let n = self.left_count + self.right_count;
        let loop_term = if self_loops { 1.0 } else { 0.0 };
        let deg: Vec<f64> = (0..n)
            .map(|u| self.union_degree(u) as f64 + loop_term)
            .collect();
        let weight = |a: usize, b: usize| {
            let p = deg[a] * deg[b];
            if p > 0.0 {
                1.0 / p.sqrt()
            } else {
                0.0
            }
        };
        let mut indptr = Vec::with_capacity(n + 1);
        let mut indices = Vec::with_capacity(2 * self.n_edges() + n);
        let mut values = Vec::with_capacity(2 * self.n_edges() + n);
        indptr.push(0);
        for u in 0..n {
            let (neighbors, offset) = if u < self.left_count {
                (self.forward.neighbors(u), self.left_count)
            } else {
                (self.reverse.neighbors(u - self.left_count), 0)
            };
            // Left nodes precede right nodes, so the self loop sorts before
            // neighbors on a left row and after them on a right row.
            if self_loops && u < self.left_count {
                indices.push(u);
                values.push(weight(u, u));
            }
            for &v in neighbors {
                let g = v + offset;
                indices.push(g);
                values.push(weight(u, g));
            }
            if self_loops && u >= self.left_count {
                indices.push(u);
                values.push(weight(u, u));
            }
            indptr.push(indices.len());
        }
        SparseMatrix::new(n, n, indptr, indices, values).expect("normalized block structure is valid")
    }

    /// Degree of a node in the left-then-right union indexing.
    pub fn union_degree(&self, u: usize) -> usize {
        if u < self.left_count {
            self.forward.degree(u)
        } else {
            self.reverse.degree(u - self.left_count)
        }
    }
}

/// 1-based nearest rank `ceil(p * n)` on an ascending slice.
pub fn nearest_rank<T: Copy>(sorted: &[T], p: f64) -> T {
    let n = sorted.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

fn transpose(adj: &Adjacency, n_cols: usize) -> Adjacency {
    let mut indptr = vec![0usize; n_cols + 1];
    for &c in &adj.indices {
        indptr[c + 1] += 1;
    }
    for c in 0..n_cols {
        indptr[c + 1] += indptr[c];
    }
    let mut next = indptr.clone();
    let mut indices = vec![0usize; adj.n_edges()];
    // Rows are visited in ascending order, so each reversed list comes out sorted.
    for r in 0..adj.n_rows() {
        for &c in adj.neighbors(r) {
            indices[next[c]] = r;
            next[c] += 1;
        }
    }
    Adjacency { indptr, indices }
}

/// Users, items and streamers joined by the buy, follow and sell graphs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TripartiteGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub n_streamers: usize,
    pub buy: BipartiteGraph,
    pub follow: BipartiteGraph,
    pub sell: BipartiteGraph,
}

impl TripartiteGraph {
    pub fn build(
        n_users: usize,
        n_items: usize,
        n_streamers: usize,
        buy: &[Edge],
        follow: &[Edge],
        sell: &[Edge],
    ) -> Result<Self> {
        Ok(Self {
            n_users,
            n_items,
            n_streamers,
            buy: BipartiteGraph::build(Relation::Buy, buy, n_users, n_items)?,
            follow: BipartiteGraph::build(Relation::Follow, follow, n_users, n_streamers)?,
            sell: BipartiteGraph::build(Relation::Sell, sell, n_streamers, n_items)?,
        })
    }

    pub fn relation(&self, r: Relation) -> &BipartiteGraph {
        match r {
            Relation::Buy => &self.buy,
            Relation::Follow => &self.follow,
            Relation::Sell => &self.sell,
        }
    }

    pub fn count(&self, kind: EntityKind) -> usize {
        match kind {
            EntityKind::User => self.n_users,
            EntityKind::Item => self.n_items,
            EntityKind::Streamer => self.n_streamers,
        }
    }

    /// Whether a node has at least one edge in any relation.
    pub fn has_presence(&self, kind: EntityKind, index: usize) -> bool {
        Relation::ALL.iter().any(|&r| {
            let g = self.relation(r);
            match r.side_of(kind) {
                Some(Side::Left) => g.forward.degree(index) > 0,
                Some(Side::Right) => g.reverse.degree(index) > 0,
                None => false,
            }
        })
    }

    /// Sorted union of the catalogs sold by the streamers `user` follows.
    pub fn followed_catalog(&self, user: usize) -> Vec<usize> {
        let mut items: Vec<usize> = self
            .follow
            .forward
            .neighbors(user)
            .iter()
            .flat_map(|&s| self.sell.forward.neighbors(s).iter().copied())
            .collect();
        items.sort_unstable();
        items.dedup();
        items
    }
}
