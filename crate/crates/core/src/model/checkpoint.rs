//! Binary checkpoints: magic, version, a JSON header with the config and
//! entity counts, then every named tensor's values as little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EntityCounts, Model, ModelConfig};

const MAGIC: &[u8; 8] = b"LSECCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    counts: EntityCounts,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_bytes(r: &mut impl Read, n: u64, what: &str) -> Result<Vec<u8>> {
    if n > (1 << 40) {
        return Err(Error::Format(format!("implausible {what} length {n}")));
    }
    let mut buf = vec![0u8; n as usize];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        counts: model.counts,
    })?;
    put_u64(w, header.len() as u64)?;
    w.write_all(&header)?;
    let named = model.params.named();
    put_u64(w, named.len() as u64)?;
    for (name, p) in named {
        put_u64(w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        put_u64(w, p.value.rows() as u64)?;
        put_u64(w, p.value.cols() as u64)?;
        for v in p.value.values() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Rebuilds a model from a checkpoint. Optimizer state is not stored, so the
/// result is ready for inference or a fresh optimizer.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let mut vb = [0u8; 4];
    r.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u64(r)?;
    let header: Header = serde_json::from_slice(&get_bytes(r, n, "header")?)?;
    let mut model = Model::init(header.config, header.counts, 0)?;
    let names: Vec<String> = model.params.named().into_iter().map(|(n, _)| n).collect();
    let count = get_u64(r)? as usize;
    if count != names.len() {
        return Err(Error::Format(format!("expected {} tensors, found {count}", names.len())));
    }
    for (expected, p) in names.iter().zip(model.params.tensors_mut()) {
        let len = get_u64(r)?;
        let name = String::from_utf8(get_bytes(r, len, "name")?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(Error::Format(format!("expected tensor {expected}, found {name}")));
        }
        let rows = get_u64(r)? as usize;
        let cols = get_u64(r)? as usize;
        if (rows, cols) != p.shape() {
            return Err(Error::Format(format!(
                "tensor {name} has shape {rows}x{cols}, expected {:?}",
                p.shape()
            )));
        }
        let bytes = get_bytes(r, (rows * cols * 8) as u64, "tensor")?;
        for (v, chunk) in p.value.values_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Aggregator;

    fn small(aggregator: Aggregator) -> Model {
        let config = ModelConfig {
            embed_dim: 6,
            layer_dims: vec![5, 4],
            aggregator,
            mlp_hidden: 3,
            ..Default::default()
        };
        let counts = EntityCounts {
            n_users: 7,
            n_items: 5,
            n_streamers: 2,
        };
        Model::init(config, counts, 11).unwrap()
    }

    #[test]
    fn round_trip_preserves_values() {
        for agg in [Aggregator::Gcn, Aggregator::LightGcn, Aggregator::None] {
            let m = small(agg);
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back = read_checkpoint(&mut buf.as_slice()).unwrap();
            assert_eq!(back.config, m.config);
            for ((n1, a), (n2, b)) in m.params.named().iter().zip(back.params.named()) {
                assert_eq!(n1, &n2);
                assert_eq!(a.value, b.value);
            }
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(buf, again);
        }
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let m = small(Aggregator::Gcn);
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&mut bad.as_slice()), Err(Error::Format(_))));
        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());
    }
}
