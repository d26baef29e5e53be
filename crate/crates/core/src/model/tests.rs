use rand::Rng;

use super::*;
use crate::graph_store::{Edge, TripartiteGraph};
use crate::sampler::{build_blocks, BatchSpec, FanoutPlan, SeedSets};

fn random_graph(n_users: usize, n_items: usize, n_streamers: usize, p: f64, seed: u64) -> TripartiteGraph {
    let mut r = rng::stream(seed, &[]);
    let mut pick = |n_left: usize, n_right: usize| -> Vec<Edge> {
        let mut out = Vec::new();
        for a in 0..n_left {
            for b in 0..n_right {
                if r.random::<f64>() < p {
                    out.push(Edge::new(a, b));
                }
            }
        }
        out
    };
    let buy = pick(n_users, n_items);
    let follow = pick(n_users, n_streamers);
    let sell = pick(n_streamers, n_items);
    TripartiteGraph::build(n_users, n_items, n_streamers, &buy, &follow, &sell).unwrap()
}

fn small_config(aggregator: Aggregator, relations: Vec<u8>, tasks: Vec<u8>) -> ModelConfig {
    ModelConfig {
        embed_dim: 4,
        layer_dims: vec![3, 2],
        aggregator,
        relations,
        tasks,
        alpha: 0.3,
        mlp_hidden: 3,
        negative_ratio: 2,
    }
}

fn leaky(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.01 * x
    }
}

/// Dense `D^-1/2 (A [+ I]) D^-1/2` over the union of both sides.
fn dense_norm(g: &crate::graph_store::BipartiteGraph, self_loops: bool) -> Vec<Vec<f64>> {
    let n = g.left_count() + g.right_count();
    let mut a = vec![vec![0.0; n]; n];
    for e in g.edges() {
        let (x, y) = (e.left, g.left_count() + e.right);
        a[x][y] = 1.0;
        a[y][x] = 1.0;
    }
    if self_loops {
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1.0;
        }
    }
    let d: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    for i in 0..n {
        for j in 0..n {
            if a[i][j] != 0.0 {
                a[i][j] /= (d[i] * d[j]).sqrt();
            }
        }
    }
    a
}

fn dense_mul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let k = b.len();
    let m = if k == 0 { 0 } else { b[0].len() };
    a.iter()
        .map(|row| (0..m).map(|j| (0..k).map(|t| row[t] * b[t][j]).sum()).collect())
        .collect()
}

fn to_rows(m: &DenseMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Whole-graph encoder output computed with dense matrices only.
fn dense_oracle(model: &Model, graph: &TripartiteGraph, rel: Relation) -> Vec<Vec<f64>> {
    let g = graph.relation(rel);
    let mut h: Vec<Vec<f64>> = to_rows(&model.params.embedding(rel.left_kind()).value);
    h.extend(to_rows(&model.params.embedding(rel.right_kind()).value));
    match model.config.aggregator {
        Aggregator::None => h,
        Aggregator::Gcn => {
            let n = dense_norm(g, true);
            for w in model.params.gcn_weights(rel) {
                h = dense_mul(&dense_mul(&n, &h), &to_rows(&w.value));
                for row in h.iter_mut() {
                    for v in row.iter_mut() {
                        *v = leaky(*v);
                    }
                }
            }
            h
        }
        Aggregator::LightGcn => {
            let n = dense_norm(g, false);
            let k = model.config.layer_dims.len();
            let mut sum = h.clone();
            for _ in 0..k {
                h = dense_mul(&n, &h);
                for (s, row) in sum.iter_mut().zip(&h) {
                    for (a, b) in s.iter_mut().zip(row) {
                        *a += b;
                    }
                }
            }
            for row in sum.iter_mut() {
                for v in row.iter_mut() {
                    *v /= (k + 1) as f64;
                }
            }
            dense_mul(&sum, &to_rows(&model.params.projection().value))
        }
    }
}

fn max_diff(a: &DenseMatrix, b: &[Vec<f64>]) -> f64 {
    assert_eq!(a.rows(), b.len());
    let mut m: f64 = 0.0;
    for (r, row) in b.iter().enumerate() {
        for (x, y) in a.row(r).iter().zip(row) {
            m = m.max((x - y).abs());
        }
    }
    m
}

#[test]
fn gcn_hand_example() {
    let graph = TripartiteGraph::build(1, 1, 1, &[Edge::new(0, 0)], &[], &[]).unwrap();
    let config = ModelConfig {
        embed_dim: 2,
        layer_dims: vec![2],
        relations: vec![0],
        tasks: vec![0],
        mlp_hidden: 2,
        ..Default::default()
    };
    let mut m = Model::init(config, EntityCounts::of(&graph), 0).unwrap();
    m.params.embedding_mut(EntityKind::User).value = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
    m.params.embedding_mut(EntityKind::Item).value = DenseMatrix::from_rows(&[vec![0.0, 1.0]]).unwrap();
    m.params.gcn_weights_mut(Relation::Buy)[0].value = DenseMatrix::identity(2);
    let full = encode_full(&m.params, &m.config, &graph, Relation::Buy).unwrap();
    assert_eq!(to_rows(&full), vec![vec![0.5, 0.5], vec![0.5, 0.5]]);

    let blocks = build_blocks(&graph, &[Relation::Buy], &SeedSets::all(&graph), &FanoutPlan::full(), 1, 0);
    let (out, _) = encoder::encode_blocks(&m.params, &m.config, &blocks[0]).unwrap();
    assert_eq!(out, full);
}

#[test]
fn aggregator_none_returns_embedding_rows() {
    let graph = random_graph(5, 4, 2, 0.4, 1);
    let m = Model::init(small_config(Aggregator::None, vec![0, 1, 2], vec![0, 1]), EntityCounts::of(&graph), 3).unwrap();
    for rel in Relation::ALL {
        let out = encode_full(&m.params, &m.config, &graph, rel).unwrap();
        let left = &m.params.embedding(rel.left_kind()).value;
        let right = &m.params.embedding(rel.right_kind()).value;
        assert_eq!(out.row_slice(0, left.rows()), *left);
        assert_eq!(out.row_slice(left.rows(), out.rows()), *right);
    }
}

#[test]
fn full_fanout_blocks_match_dense_oracle() {
    for (t, agg) in [Aggregator::Gcn, Aggregator::LightGcn, Aggregator::None].into_iter().enumerate() {
        let graph = random_graph(12, 10, 8, 0.2, 40 + t as u64);
        let m = Model::init(small_config(agg, vec![0, 1, 2], vec![0, 1]), EntityCounts::of(&graph), 5).unwrap();
        // seed a subset, so deeper layers must pull in outside nodes
        let seeds = SeedSets::new(vec![0, 3, 7], vec![1, 2, 9], vec![4]);
        let blocks = build_blocks(&graph, &m.config.active_relations(), &seeds, &FanoutPlan::full(), m.config.n_layers(), 9);
        for rb in &blocks {
            let oracle = dense_oracle(&m, &graph, rb.relation);
            let full = encode_full(&m.params, &m.config, &graph, rb.relation).unwrap();
            assert!(max_diff(&full, &oracle) < 1e-10);
            let (out, _) = encoder::encode_blocks(&m.params, &m.config, rb).unwrap();
            let expect: Vec<Vec<f64>> = rb.targets.iter().map(|&u| oracle[u].clone()).collect();
            assert!(max_diff(&out, &expect) < 1e-10, "{agg:?} {:?}", rb.relation);
        }
    }
}

fn batch_for(graph: &TripartiteGraph, config: &ModelConfig, plan: &FanoutPlan, seed: u64) -> MiniBatch {
    let buys: Vec<(usize, usize)> = graph.buy.edges().iter().map(|e| (e.left, e.right)).collect();
    let follows: Vec<(usize, usize)> = graph.follow.edges().iter().map(|e| (e.left, e.right)).collect();
    let relations = config.active_relations();
    let spec = BatchSpec {
        buy_positives: config.has_task(Task::Buy).then_some(buys.as_slice()),
        follow_positives: config.has_task(Task::Follow).then_some(follows.as_slice()),
        negative_ratio: config.negative_ratio,
        relations: &relations,
        fanout: plan,
        n_layers: config.n_layers(),
    };
    MiniBatch::assemble(graph, &spec, seed).unwrap()
}

fn gradient_check(agg: Aggregator, relations: Vec<u8>, tasks: Vec<u8>, seed: u64) {
    let graph = random_graph(10, 8, 4, 0.3, seed);
    let config = small_config(agg, relations, tasks);
    let plan = FanoutPlan {
        fanouts: [[2, 2]; 3],
    };
    let batch = batch_for(&graph, &config, &plan, seed);
    let mut model = Model::init(config, EntityCounts::of(&graph), seed).unwrap();
    let base = model.clone();
    model.forward_backward(&batch).unwrap();
    let grads: Vec<DenseMatrix> = model.params.tensors_mut().into_iter().map(|p| p.grad.clone()).collect();
    let names: Vec<String> = base.params.named().into_iter().map(|(n, _)| n).collect();
    let h = 1e-5;
    let mut checked = 0;
    for (k, g) in grads.iter().enumerate() {
        for i in 0..g.values().len() {
            let eval = |delta: f64| {
                let mut m = base.clone();
                m.params.tensors_mut()[k].value.values_mut()[i] += delta;
                m.batch_loss(&batch).unwrap().total
            };
            let num = (eval(h) - eval(-h)) / (2.0 * h);
            let ana = g.values()[i];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
            assert!(rel < 1e-3, "{agg:?} {} [{i}]: analytic {ana} numeric {num}", names[k]);
            checked += 1;
        }
    }
    assert!(checked > 100);
}

#[test]
fn end_to_end_gradients_gcn() {
    gradient_check(Aggregator::Gcn, vec![0, 1, 2], vec![0, 1], 3);
}

#[test]
fn end_to_end_gradients_lightgcn() {
    gradient_check(Aggregator::LightGcn, vec![0, 1, 2], vec![0, 1], 4);
}

#[test]
fn end_to_end_gradients_plain_and_subsets() {
    gradient_check(Aggregator::None, vec![0, 1], vec![1, 0], 5);
    gradient_check(Aggregator::Gcn, vec![0, 2], vec![0], 6);
}

#[test]
fn initial_loss_is_near_ln2() {
    let graph = crate::datagen::generate(&crate::datagen::GenConfig {
        n_users: 300,
        n_items: 200,
        n_streamers: 20,
        seed: 2,
        ..Default::default()
    })
    .unwrap();
    let config = ModelConfig {
        aggregator: Aggregator::None,
        relations: vec![0],
        tasks: vec![0],
        ..Default::default()
    };
    let batch = batch_for(&graph, &config, &FanoutPlan::full(), 1);
    let model = Model::init(config, EntityCounts::of(&graph), 8).unwrap();
    let loss = model.batch_loss(&batch).unwrap();
    assert!((loss.total - std::f64::consts::LN_2).abs() < 0.05, "{loss:?}");
    assert!(loss.follow.is_none());
}

#[test]
fn shared_tables_couple_relations() {
    let graph = random_graph(10, 8, 4, 0.3, 12);
    let grads_for = |relations: Vec<u8>| {
        let config = small_config(Aggregator::Gcn, relations, vec![0]);
        let batch = batch_for(&graph, &config, &FanoutPlan::full(), 3);
        let mut m = Model::init(config, EntityCounts::of(&graph), 1).unwrap();
        m.forward_backward(&batch).unwrap();
        (
            m.params.embedding(EntityKind::User).grad.clone(),
            m.params.embedding(EntityKind::Streamer).grad.clone(),
        )
    };
    let (user_a, streamer_a) = grads_for(vec![0]);
    let (user_b, streamer_b) = grads_for(vec![0, 1]);
    assert!(streamer_a.values().iter().all(|&g| g == 0.0));
    // streamers only enter through follow-graph message passing into users
    assert!(streamer_b.values().iter().any(|&g| g != 0.0));
    assert!(user_a.max_abs_diff(&user_b) > 1e-9);
}

#[test]
fn width_bookkeeping() {
    let graph = random_graph(6, 5, 3, 0.4, 2);
    let subsets: [&[u8]; 7] = [&[0], &[1], &[2], &[0, 1], &[0, 2], &[1, 2], &[0, 1, 2]];
    for agg in [Aggregator::Gcn, Aggregator::LightGcn, Aggregator::None] {
        for rels in subsets {
            let mut tasks = Vec::new();
            if rels.contains(&0) {
                tasks.push(0);
            }
            if rels.contains(&1) {
                tasks.push(1);
            }
            if tasks.is_empty() {
                let c = small_config(agg, rels.to_vec(), vec![0]);
                assert!(matches!(c.validate(), Err(Error::Config(_))));
                continue;
            }
            let m = Model::init(small_config(agg, rels.to_vec(), tasks), EntityCounts::of(&graph), 0).unwrap();
            let unified = m.embed_all(&graph).unwrap();
            for task in m.config.active_tasks() {
                let lw = unified.get(EntityKind::User).unwrap().cols();
                let rw = unified.get(task.right_kind()).unwrap().cols();
                assert_eq!(lw, m.config.unified_width(EntityKind::User));
                assert_eq!(rw, m.config.unified_width(task.right_kind()));
                assert_eq!(m.params.mlp(task).unwrap().input_width(), lw + rw);
            }
        }
    }
    let c = ModelConfig::default();
    assert_eq!(c.unified_width(EntityKind::Item), 128);
    let single = ModelConfig {
        relations: vec![0],
        tasks: vec![0],
        ..Default::default()
    };
    assert_eq!(single.unified_width(EntityKind::User), 64);
    assert_eq!(single.unified_width(EntityKind::Item), 64);
}

#[test]
fn unify_is_independent_of_part_order() {
    let a = DenseMatrix::from_fn(3, 2, |r, c| (r * 2 + c) as f64);
    let b = DenseMatrix::from_fn(3, 2, |r, c| -((r * 2 + c) as f64));
    let one = unify_embeddings(&[(Relation::Buy, &a), (Relation::Follow, &b)], EntityKind::User).unwrap();
    let two = unify_embeddings(&[(Relation::Follow, &b), (Relation::Buy, &a)], EntityKind::User).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.row(1), &[2.0, 3.0, -2.0, -3.0]);
    assert!(matches!(
        unify_embeddings(&[(Relation::Buy, &a)], EntityKind::Streamer),
        Err(Error::Contract(_))
    ));
}

#[test]
fn config_rules_and_loss_mix() {
    let mut c = ModelConfig {
        relations: vec![0, 2],
        tasks: vec![0, 1],
        ..Default::default()
    };
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.relations = vec![0, 1, 2];
    c.alpha = 1.5;
    assert!(c.validate().is_err());
    c.alpha = 0.5;
    c.tasks.clear();
    assert!(c.validate().is_err());
    assert_eq!(ModelConfig::default().alpha, 0.5);
    assert!((combine_losses(Some(0.8), Some(0.4), 0.5).unwrap() - 0.6).abs() < 1e-15);
    assert_eq!(combine_losses(Some(0.8), Some(0.4), 1.0).unwrap(), 0.8);
    assert_eq!(combine_losses(None, Some(0.4), 0.3).unwrap(), 0.4);
    assert!(combine_losses(None, None, 0.5).is_err());
    let parsed: ModelConfig = serde_json::from_str(r#"{"aggregator":"lightgcn","relations":[0]}"#).unwrap();
    assert_eq!(parsed.aggregator, Aggregator::LightGcn);
    assert_eq!(parsed.layer_dims, vec![128, 64]);
    assert!(serde_json::from_str::<ModelConfig>(r#"{"embed":3}"#).is_err());
}

#[test]
fn init_allocation_and_determinism() {
    let counts = EntityCounts {
        n_users: 29_422,
        n_items: 31_630,
        n_streamers: 10,
    };
    let small = EntityCounts {
        n_users: 9,
        n_items: 7,
        n_streamers: 3,
    };
    let config = ModelConfig {
        aggregator: Aggregator::None,
        ..Default::default()
    };
    let m = Model::init(config.clone(), counts, 0).unwrap();
    assert_eq!(m.params.embedding(EntityKind::User).shape(), (29_422, 200));
    assert!(m.params.named().iter().all(|(n, _)| !n.starts_with("gcn")));
    let a = Model::init(ModelConfig::default(), small, 4).unwrap();
    let b = Model::init(ModelConfig::default(), small, 4).unwrap();
    let c = Model::init(ModelConfig::default(), small, 5).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.params.gcn_weights(Relation::Sell).len(), 2);
}

#[test]
fn predict_pairs_matches_scorer() {
    let graph = random_graph(6, 5, 3, 0.4, 8);
    let m = Model::init(small_config(Aggregator::Gcn, vec![0, 1, 2], vec![0, 1]), EntityCounts::of(&graph), 2).unwrap();
    let unified = m.embed_all(&graph).unwrap();
    let pairs = [(0, 1), (5, 4), (3, 0)];
    let logits = m.predict_pairs(&unified, &pairs, Task::Buy).unwrap();
    let scorer = m.scorer(&unified, Task::Buy).unwrap();
    for (z, &(u, i)) in logits.iter().zip(&pairs) {
        assert!((z - scorer.score(u, i)).abs() < 1e-12);
    }
    assert!(matches!(m.predict_pairs(&unified, &[(6, 0)], Task::Buy), Err(Error::Index(_))));
}

#[test]
fn training_steps_reduce_loss() {
    let graph = random_graph(10, 8, 4, 0.3, 21);
    let config = small_config(Aggregator::Gcn, vec![0, 1, 2], vec![0, 1]);
    let batch = batch_for(&graph, &config, &FanoutPlan::full(), 2);
    let mut m = Model::init(config, EntityCounts::of(&graph), 3).unwrap();
    let adam = AdamConfig {
        lr: 0.01,
        ..Default::default()
    };
    let first = m.forward_backward(&batch).unwrap().total;
    m.step(&adam);
    for _ in 0..50 {
        m.forward_backward(&batch).unwrap();
        m.step(&adam);
    }
    assert!(m.batch_loss(&batch).unwrap().total < first);
}
