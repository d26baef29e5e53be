//! Where a run's graph comes from, and the on-disk split layout.
//!
//! A split directory holds `train/{buy,follow,sell}.tsv`, `val.tsv`,
//! `test.tsv` (raw `user<TAB>item<TAB>timestamp`) and `split.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use lsec_core::datagen::{chronological_split, generate, Split, SplitReport, SplitSpec};
use lsec_core::graph_store::{load_edges, write_edges, Dataset, Edge, EntityKind, IdMaps, Relation, TripartiteGraph};
use lsec_core::{Error, Result};

use crate::manifest::RunManifest;

pub const SPLIT_REPORT: &str = "split.json";
const VAL_FILE: &str = "val.tsv";
const TEST_FILE: &str = "test.tsv";
const TRAIN_DIR: &str = "train";

pub fn is_split_dir(dir: &Path) -> bool {
    dir.join(SPLIT_REPORT).is_file()
}

/// The full interaction graph: loaded from `data_dir` or generated.
pub fn load_dataset(manifest: &RunManifest) -> Result<Dataset> {
    match &manifest.data_dir {
        Some(dir) if is_split_dir(dir) => Dataset::load_dir(&dir.join(TRAIN_DIR)),
        Some(dir) => Dataset::load_dir(dir),
        None => Ok(Dataset::synthetic(generate(&manifest.gen)?)),
    }
}

/// A split plus the id dictionaries of its training graph.
pub struct SplitData {
    pub split: Split,
    pub ids: IdMaps,
}

pub fn load_split(manifest: &RunManifest) -> Result<SplitData> {
    match &manifest.data_dir {
        Some(dir) if is_split_dir(dir) => read_split_dir(dir),
        _ => {
            let data = load_dataset(manifest)?;
            split_dataset(&data, &manifest.split)
        }
    }
}

pub fn split_dataset(data: &Dataset, spec: &SplitSpec) -> Result<SplitData> {
    Ok(SplitData {
        split: chronological_split(&data.graph, spec)?,
        ids: data.ids.clone(),
    })
}

pub fn write_split_dir(data: &SplitData, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let train = Dataset {
        graph: data.split.train.clone(),
        ids: data.ids.clone(),
    };
    train.write_dir(&dir.join(TRAIN_DIR))?;
    write_edges(&dir.join(VAL_FILE), Relation::Buy, &data.split.val, &data.ids)?;
    write_edges(&dir.join(TEST_FILE), Relation::Buy, &data.split.test, &data.ids)?;
    write_json(&dir.join(SPLIT_REPORT), &data.split.report)
}

/// Reloads a split directory. Held-out edges naming entities absent from
/// the training files are dropped, as the split itself would have done.
pub fn read_split_dir(dir: &Path) -> Result<SplitData> {
    let train = Dataset::load_dir(&dir.join(TRAIN_DIR))?;
    let report: SplitReport = serde_json::from_slice(&fs::read(dir.join(SPLIT_REPORT))?)
        .map_err(|e| Error::Format(format!("{}: {e}", dir.join(SPLIT_REPORT).display())))?;
    let held_out = |name: &str| -> Result<Vec<Edge>> {
        let mut ids = train.ids.clone();
        let edges = load_edges(&dir.join(name), Relation::Buy, &mut ids)?;
        Ok(edges
            .into_iter()
            .filter(|e| {
                e.left < train.graph.n_users
                    && e.right < train.graph.n_items
                    && train.graph.has_presence(EntityKind::User, e.left)
                    && train.graph.has_presence(EntityKind::Item, e.right)
            })
            .collect())
    };
    let val = held_out(VAL_FILE)?;
    let test = held_out(TEST_FILE)?;
    Ok(SplitData {
        split: Split {
            train: train.graph,
            val,
            test,
            report,
        },
        ids: train.ids,
    })
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

fn argmax_lowest(counts: impl Iterator<Item = (usize, usize)>) -> Option<usize> {
    let mut best: Option<(usize, usize)> = None;
    for (id, c) in counts {
        match best {
            Some((b, bc)) if bc > c || (bc == c && b < id) => {}
            _ => best = Some((id, c)),
        }
    }
    best.map(|(id, _)| id)
}

/// The streamer a node interacts with most, used as an export label.
///
/// Users: the followed streamer whose catalog covers most of the user's
/// purchases. Items: the seller with most buyers of the item among its
/// followers. Streamers: themselves. Ties go to the lowest index; `None`
/// when there is no candidate streamer.
pub fn dominant_streamer(graph: &TripartiteGraph, kind: EntityKind, node: usize) -> Option<usize> {
    match kind {
        EntityKind::Streamer => Some(node),
        EntityKind::User => {
            let bought = graph.buy.forward().neighbors(node);
            argmax_lowest(graph.follow.forward().neighbors(node).iter().map(|&s| {
                let catalog = graph.sell.forward().neighbors(s);
                (s, bought.iter().filter(|i| catalog.binary_search(i).is_ok()).count())
            }))
        }
        EntityKind::Item => {
            let buyers = graph.buy.reverse().neighbors(node);
            argmax_lowest(graph.sell.reverse().neighbors(node).iter().map(|&s| {
                let followers = graph.follow.reverse().neighbors(s);
                (s, buyers.iter().filter(|u| followers.binary_search(u).is_ok()).count())
            }))
        }
    }
}
