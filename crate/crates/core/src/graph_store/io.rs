use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph_store::{Adjacency, BipartiteGraph, Edge, EntityKind, Relation, TripartiteGraph};

/// Bijection between raw string ids and dense indices, in first-seen order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdDictionary {
    index: HashMap<String, usize>,
    raw: Vec<String>,
}

impl IdDictionary {
    pub fn encode(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        let i = self.raw.len();
        self.index.insert(raw.to_string(), i);
        self.raw.push(raw.to_string());
        i
    }

    pub fn lookup(&self, raw: &str) -> Option<usize> {
        self.index.get(raw).copied()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.raw.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMaps {
    pub users: IdDictionary,
    pub items: IdDictionary,
    pub streamers: IdDictionary,
}

impl IdMaps {
    /// Dictionaries `u0..`, `i0..`, `s0..` for generated data.
    pub fn synthetic(n_users: usize, n_items: usize, n_streamers: usize) -> Self {
        let mut ids = IdMaps::default();
        for u in 0..n_users {
            ids.users.encode(&format!("u{u}"));
        }
        for i in 0..n_items {
            ids.items.encode(&format!("i{i}"));
        }
        for s in 0..n_streamers {
            ids.streamers.encode(&format!("s{s}"));
        }
        ids
    }

    pub fn get(&self, kind: EntityKind) -> &IdDictionary {
        match kind {
            EntityKind::User => &self.users,
            EntityKind::Item => &self.items,
            EntityKind::Streamer => &self.streamers,
        }
    }

    pub fn get_mut(&mut self, kind: EntityKind) -> &mut IdDictionary {
        match kind {
            EntityKind::User => &mut self.users,
            EntityKind::Item => &mut self.items,
            EntityKind::Streamer => &mut self.streamers,
        }
    }
}

/// Reads `left<TAB>right[<TAB>timestamp]` lines. Duplicate pairs collapse to
/// their first occurrence carrying the earliest timestamp. Blank lines are
/// skipped.
pub fn load_edges(path: &Path, relation: Relation, ids: &mut IdMaps) -> Result<Vec<Edge>> {
    let file = fs::File::open(path)?;
    parse_edges(BufReader::new(file), path, relation, ids)
}

fn parse_edges(reader: impl BufRead, path: &Path, relation: Relation, ids: &mut IdMaps) -> Result<Vec<Edge>> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut edges: Vec<Edge> = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&fields.len()) || fields[..2].iter().any(|f| f.is_empty()) {
            return Err(parse_err(
                lineno,
                format!("expected left<TAB>right[<TAB>timestamp], got {} fields", fields.len()),
            ));
        }
        let timestamp = match fields.get(2) {
            Some(t) => Some(
                t.trim()
                    .parse::<i64>()
                    .map_err(|_| parse_err(lineno, format!("timestamp {t:?} is not an integer")))?,
            ),
            None => None,
        };
        let left = ids.get_mut(relation.left_kind()).encode(fields[0]);
        let right = ids.get_mut(relation.right_kind()).encode(fields[1]);
        match seen.get(&(left, right)) {
            Some(&at) => {
                let kept = &mut edges[at];
                kept.timestamp = match (kept.timestamp, timestamp) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
            None => {
                seen.insert((left, right), edges.len());
                edges.push(Edge {
                    left,
                    right,
                    timestamp,
                });
            }
        }
    }
    Ok(edges)
}

pub fn write_edges(path: &Path, relation: Relation, edges: &[Edge], ids: &IdMaps) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let (lk, rk) = (relation.left_kind(), relation.right_kind());
    for e in edges {
        let l = ids
            .get(lk)
            .decode(e.left)
            .ok_or_else(|| Error::Index(format!("no raw id for {lk} {}", e.left)))?;
        let r = ids
            .get(rk)
            .decode(e.right)
            .ok_or_else(|| Error::Index(format!("no raw id for {rk} {}", e.right)))?;
        match e.timestamp {
            Some(t) => writeln!(w, "{l}\t{r}\t{t}")?,
            None => writeln!(w, "{l}\t{r}")?,
        }
    }
    w.flush()?;
    Ok(())
}

/// A graph together with the raw-id dictionaries it was loaded through.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub graph: TripartiteGraph,
    pub ids: IdMaps,
}

impl Dataset {
    pub fn synthetic(graph: TripartiteGraph) -> Self {
        let ids = IdMaps::synthetic(graph.n_users, graph.n_items, graph.n_streamers);
        Self { graph, ids }
    }

    /// Loads `buy.tsv`, `follow.tsv` and `sell.tsv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut ids = IdMaps::default();
        let buy = load_edges(&dir.join(Relation::Buy.file_name()), Relation::Buy, &mut ids)?;
        let follow = load_edges(&dir.join(Relation::Follow.file_name()), Relation::Follow, &mut ids)?;
        let sell = load_edges(&dir.join(Relation::Sell.file_name()), Relation::Sell, &mut ids)?;
        let graph = TripartiteGraph::build(
            ids.users.len(),
            ids.items.len(),
            ids.streamers.len(),
            &buy,
            &follow,
            &sell,
        )?;
        Ok(Self { graph, ids })
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for r in Relation::ALL {
            write_edges(&dir.join(r.file_name()), r, &self.graph.relation(r).edges(), &self.ids)?;
        }
        Ok(())
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"LSECGRPH";
const SNAPSHOT_VERSION: u32 = 1;

fn put_u64(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    w.write_all(&(v as u64).to_le_bytes())
}

fn get_u64(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b) as usize)
}

/// Binary snapshot: magic, version, counts, then per relation the forward CSR
/// and optional timestamps, all little-endian.
pub fn write_snapshot(graph: &TripartiteGraph, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(SNAPSHOT_MAGIC)?;
    w.write_all(&SNAPSHOT_VERSION.to_le_bytes())?;
    for n in [graph.n_users, graph.n_items, graph.n_streamers] {
        put_u64(&mut w, n)?;
    }
    for r in Relation::ALL {
        let g = graph.relation(r);
        put_u64(&mut w, g.left_count())?;
        put_u64(&mut w, g.right_count())?;
        put_u64(&mut w, g.n_edges())?;
        for &p in g.forward().indptr() {
            put_u64(&mut w, p)?;
        }
        for &i in g.forward().indices() {
            put_u64(&mut w, i)?;
        }
        match g.timestamps() {
            Some(ts) => {
                w.write_all(&[1])?;
                for &t in ts {
                    w.write_all(&t.to_le_bytes())?;
                }
            }
            None => w.write_all(&[0])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_snapshot(path: &Path) -> Result<TripartiteGraph> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SNAPSHOT_MAGIC {
        return Err(Error::Format("not a graph snapshot".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v)?;
    let version = u32::from_le_bytes(v);
    if version != SNAPSHOT_VERSION {
        return Err(Error::Format(format!("unsupported snapshot version {version}")));
    }
    let n_users = get_u64(&mut r)?;
    let n_items = get_u64(&mut r)?;
    let n_streamers = get_u64(&mut r)?;
    let mut graphs = Vec::with_capacity(3);
    for rel in Relation::ALL {
        let left = get_u64(&mut r)?;
        let right = get_u64(&mut r)?;
        let nnz = get_u64(&mut r)?;
        let indptr = (0..=left).map(|_| get_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let indices = (0..nnz).map(|_| get_u64(&mut r)).collect::<Result<Vec<_>>>()?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let timestamps = if flag[0] == 1 {
            let mut ts = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                ts.push(i64::from_le_bytes(b));
            }
            Some(ts)
        } else {
            None
        };
        let adj = Adjacency::from_parts(indptr, indices);
        let mut edges = Vec::with_capacity(nnz);
        for l in 0..left {
            let start = adj.indptr()[l];
            for (k, &rr) in adj.neighbors(l).iter().enumerate() {
                edges.push(Edge {
                    left: l,
                    right: rr,
                    timestamp: timestamps.as_ref().map(|t| t[start + k]),
                });
            }
        }
        graphs.push(BipartiteGraph::build(rel, &edges, left, right)?);
    }
    let sell = graphs.pop().unwrap();
    let follow = graphs.pop().unwrap();
    let buy = graphs.pop().unwrap();
    let graph = TripartiteGraph {
        n_users,
        n_items,
        n_streamers,
        buy,
        follow,
        sell,
    };
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, ids: &mut IdMaps) -> Result<Vec<Edge>> {
        parse_edges(text.as_bytes(), Path::new("mem.tsv"), Relation::Buy, ids)
    }

    #[test]
    fn duplicate_lines_collapse_to_earliest() {
        let mut ids = IdMaps::default();
        let edges = parse("u1\ti1\t100\nu1\ti1\t90\n", &mut ids).unwrap();
        assert_eq!(edges, vec![Edge::at(0, 0, 90)]);
    }

    #[test]
    fn untimed_lines() {
        let mut ids = IdMaps::default();
        let edges = parse("u1\ti1\nu2\ti2\n", &mut ids).unwrap();
        assert_eq!(edges, vec![Edge::new(0, 0), Edge::new(1, 1)]);
        assert_eq!(ids.users.len(), 2);
        assert_eq!(ids.items.len(), 2);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let mut ids = IdMaps::default();
        match parse("u1\ti1\nbroken\n", &mut ids) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        match parse("u1\ti1\tnoon\n", &mut ids) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("timestamp"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dictionary_is_a_bijection() {
        let mut d = IdDictionary::default();
        let raws = ["alpha", "β", "alpha", "x y", ""];
        for r in raws {
            let i = d.encode(r);
            assert_eq!(d.decode(i), Some(r));
        }
        assert_eq!(d.len(), 4);
    }

    #[test]
    fn directory_and_snapshot_round_trip() {
        let graph = TripartiteGraph::build(
            3,
            2,
            2,
            &[Edge::at(0, 1, 5), Edge::at(2, 0, 3)],
            &[Edge::new(0, 0), Edge::new(1, 1)],
            &[Edge::new(0, 1), Edge::new(1, 0), Edge::new(1, 1)],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::synthetic(graph.clone());
        ds.write_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(back.graph.buy.n_edges(), 2);
        assert_eq!(back.graph.sell.n_edges(), 3);
        assert_eq!(back.graph.n_users, 3);

        let snap = dir.path().join("g.bin");
        write_snapshot(&graph, &snap).unwrap();
        assert_eq!(read_snapshot(&snap).unwrap(), graph);
        fs::write(&snap, b"garbage!garbage").unwrap();
        assert!(matches!(read_snapshot(&snap), Err(Error::Format(_))));
    }
}
