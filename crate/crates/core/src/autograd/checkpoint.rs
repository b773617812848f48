//! Parameter checkpoint files.
//!
//! Line-delimited JSON. The first line is a header
//! `{"format":"groupcvr-params","version":1,"count":N}`, followed by one
//! `{"name":..,"shape":[..],"values":[..]}` line per parameter in store
//! order. Floats are written in shortest round-trip form, so saving the same
//! store twice yields identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT: &str = "groupcvr-params";

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    count: usize,
}

#[derive(Serialize, Deserialize)]
struct Record {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub fn write_params<W: Write>(store: &ParamStore, mut out: W) -> Result<()> {
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        count: store.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for (name, t) in store.iter() {
        let rec = Record {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.values().to_vec(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_params(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(store, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint into a fresh store, preserving file order.
pub fn load_params(path: &Path) -> Result<ParamStore> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty checkpoint".into())),
    };
    if header.format != FORMAT {
        return Err(parse_err(1, format!("unexpected format {}", header.format)));
    }
    let mut store = ParamStore::new();
    for (i, line) in lines.enumerate() {
        let rec: Record = serde_json::from_str(&line?).map_err(|e| parse_err(i + 2, e.to_string()))?;
        let t = Tensor::new(&rec.shape, rec.values).map_err(|e| parse_err(i + 2, e.to_string()))?;
        store.add(rec.name, t);
    }
    if store.len() != header.count {
        return Err(parse_err(
            0,
            format!("header promises {} tensors, found {}", header.count, store.len()),
        ));
    }
    Ok(store)
}

/// Copies values from `src` into same-named, same-shaped tensors of `dst`.
pub fn restore_into(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for id in dst.ids().collect::<Vec<_>>() {
        let name = dst.name(id).to_string();
        let sid = src
            .find(&name)
            .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks parameter {name}")))?;
        let s = src.get(sid);
        if s.shape() != dst.get(id).shape() {
            return Err(Error::shape(
                "restore",
                format!("{name}: {:?} vs {:?}", s.shape(), dst.get(id).shape()),
            ));
        }
        dst.get_mut(id).values_mut().copy_from_slice(s.values());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::new(&[2, 2], vec![0.1, -1e-300, 3.0, 1.0 / 3.0]).unwrap());
        store.add("b", Tensor::new(&[3], vec![7.0, 8.5, -0.0]).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        save_params(&store, &path).unwrap();
        let back = load_params(&path).unwrap();
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.values(), t2.values());
        }
        let first = std::fs::read(&path).unwrap();
        save_params(&back, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
    }
}
