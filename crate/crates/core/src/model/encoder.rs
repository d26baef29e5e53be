//! Per-relation encoders over sampled blocks (training) and over the whole
//! graph (inference).

use crate::error::Result;
use crate::graph_store::{EntityKind, Relation, TripartiteGraph};
use crate::model::{Aggregator, ModelConfig, ModelParams};
use crate::numkit::{activation, activation_backward, Activation, DenseMatrix, SparseMatrix};
use crate::sampler::{LayerBlock, RelationBlocks};

const GCN_ACTIVATION: Activation = Activation::LeakyRelu;

fn norm_weight(deg_a: f64, deg_b: f64) -> f64 {
    let p = deg_a * deg_b;
    if p > 0.0 {
        1.0 / p.sqrt()
    } else {
        0.0
    }
}

/// Normalized propagation matrix of one sampled layer (`n_dst x n_src`).
///
/// Entries use full-graph degrees, `1/sqrt(d_a d_b)` with `d = degree + 1`
/// when self loops are on. Sampled neighbor entries of a destination are
/// scaled by `degree / sampled`, which is 1 when nothing was dropped, so a
/// full-fanout block reproduces the whole-graph propagation row for row.
pub fn block_norm(layer: &LayerBlock, self_loops: bool) -> Result<SparseMatrix> {
    let loop_term = if self_loops { 1.0 } else { 0.0 };
    let deg: Vec<f64> = layer.src_degree.iter().map(|&d| d as f64 + loop_term).collect();
    let mut trip = Vec::with_capacity(layer.indices.len() + layer.n_dst);
    for a in 0..layer.n_dst {
        let nbrs = layer.neighbors(a);
        if self_loops {
            trip.push((a, a, norm_weight(deg[a], deg[a])));
        }
        if nbrs.is_empty() {
            continue;
        }
        let scale = layer.src_degree[a] as f64 / nbrs.len() as f64;
        for &b in nbrs {
            let w = norm_weight(deg[a], deg[b]);
            trip.push((a, b, if scale == 1.0 { w } else { w * scale }));
        }
    }
    SparseMatrix::from_triplets(layer.n_dst, layer.src_nodes.len(), &trip)
}

struct GcnLayerCache {
    norm: SparseMatrix,
    aggregated: DenseMatrix,
    pre: DenseMatrix,
}

enum CacheKind {
    Gcn(Vec<GcnLayerCache>),
    LightGcn {
        norms: Vec<SparseMatrix>,
        mean: DenseMatrix,
        n_targets: usize,
    },
    Plain,
}

pub(crate) struct EncoderCache {
    relation: Relation,
    input_nodes: Vec<(EntityKind, usize)>,
    kind: CacheKind,
}

fn gather(params: &ModelParams, nodes: &[(EntityKind, usize)], width: usize) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(nodes.len(), width);
    for (i, &(kind, idx)) in nodes.iter().enumerate() {
        out.row_mut(i).copy_from_slice(params.embedding(kind).value.row(idx));
    }
    out
}

fn scatter(params: &mut ModelParams, nodes: &[(EntityKind, usize)], grad: &DenseMatrix) {
    for (i, &(kind, idx)) in nodes.iter().enumerate() {
        let target = params.embedding_mut(kind).grad.row_mut(idx);
        for (t, g) in target.iter_mut().zip(grad.row(i)) {
            *t += g;
        }
    }
}

/// Encodes the block targets; rows follow `blocks.targets`.
pub(crate) fn encode_blocks(
    params: &ModelParams,
    config: &ModelConfig,
    blocks: &RelationBlocks,
) -> Result<(DenseMatrix, EncoderCache)> {
    let relation = blocks.relation;
    let input_nodes: Vec<(EntityKind, usize)> = blocks.input_nodes().iter().map(|&u| blocks.resolve(u)).collect();
    let h0 = gather(params, &input_nodes, config.embed_dim);
    let (out, kind) = match config.aggregator {
        Aggregator::None => (h0, CacheKind::Plain),
        Aggregator::Gcn => {
            let weights = params.gcn_weights(relation);
            let mut h = h0;
            let mut caches = Vec::with_capacity(blocks.layers.len());
            for (layer, w) in blocks.layers.iter().zip(weights) {
                let norm = block_norm(layer, true)?;
                let aggregated = norm.spmm(&h)?;
                let pre = aggregated.matmul(&w.value)?;
                h = activation(&pre, GCN_ACTIVATION);
                caches.push(GcnLayerCache { norm, aggregated, pre });
            }
            (h, CacheKind::Gcn(caches))
        }
        Aggregator::LightGcn => {
            let n_targets = blocks.targets.len();
            let mut sum = h0.row_slice(0, n_targets);
            let mut h = h0;
            let mut norms = Vec::with_capacity(blocks.layers.len());
            for layer in &blocks.layers {
                let norm = block_norm(layer, false)?;
                h = norm.spmm(&h)?;
                sum.add_assign(&h.row_slice(0, n_targets))?;
                norms.push(norm);
            }
            sum.scale(1.0 / (blocks.layers.len() + 1) as f64);
            let out = sum.matmul(&params.projection().value)?;
            (
                out,
                CacheKind::LightGcn {
                    norms,
                    mean: sum,
                    n_targets,
                },
            )
        }
    };
    Ok((
        out,
        EncoderCache {
            relation,
            input_nodes,
            kind,
        },
    ))
}

/// Accumulates parameter gradients given the gradient of the block output.
pub(crate) fn backward_blocks(params: &mut ModelParams, cache: EncoderCache, grad_out: DenseMatrix) -> Result<()> {
    let grad_inputs = match cache.kind {
        CacheKind::Plain => grad_out,
        CacheKind::Gcn(layers) => {
            let mut g = grad_out;
            for (l, layer) in layers.iter().enumerate().rev() {
                let g_pre = activation_backward(&layer.pre, &g, GCN_ACTIVATION)?;
                let w = &mut params.gcn_weights_mut(cache.relation)[l];
                DenseMatrix::accumulate_t_matmul(&mut w.grad, &layer.aggregated, &g_pre)?;
                let g_agg = g_pre.matmul_t(&w.value)?;
                g = layer.norm.spmm_t(&g_agg)?;
            }
            g
        }
        CacheKind::LightGcn {
            norms,
            mean,
            n_targets,
        } => {
            let proj = params.projection_mut();
            DenseMatrix::accumulate_t_matmul(&mut proj.grad, &mean, &grad_out)?;
            let mut share = grad_out.matmul_t(&proj.value)?;
            share.scale(1.0 / (norms.len() + 1) as f64);
            let mut g = share.clone();
            for norm in norms.iter().rev() {
                g = norm.spmm_t(&g)?;
                for r in 0..n_targets {
                    for (a, b) in g.row_mut(r).iter_mut().zip(share.row(r)) {
                        *a += b;
                    }
                }
            }
            g
        }
    };
    scatter(params, &cache.input_nodes, &grad_inputs);
    Ok(())
}

/// Whole-graph encoding of one relation; rows are left nodes then right nodes.
pub fn encode_full(
    params: &ModelParams,
    config: &ModelConfig,
    graph: &TripartiteGraph,
    relation: Relation,
) -> Result<DenseMatrix> {
    let g = graph.relation(relation);
    let nodes: Vec<(EntityKind, usize)> = (0..g.left_count())
        .map(|i| (relation.left_kind(), i))
        .chain((0..g.right_count()).map(|i| (relation.right_kind(), i)))
        .collect();
    let h0 = gather(params, &nodes, config.embed_dim);
    match config.aggregator {
        Aggregator::None => Ok(h0),
        Aggregator::Gcn => {
            let norm = g.normalized_blocks(true);
            let mut h = h0;
            for w in params.gcn_weights(relation) {
                h = activation(&norm.spmm(&h)?.matmul(&w.value)?, GCN_ACTIVATION);
            }
            Ok(h)
        }
        Aggregator::LightGcn => {
            let norm = g.normalized_blocks(false);
            let mut sum = h0.clone();
            let mut h = h0;
            for _ in 0..config.layer_dims.len() {
                h = norm.spmm(&h)?;
                sum.add_assign(&h)?;
            }
            sum.scale(1.0 / (config.layer_dims.len() + 1) as f64);
            sum.matmul(&params.projection().value)
        }
    }
}
