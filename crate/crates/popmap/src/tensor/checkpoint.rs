//! Flat binary parameter checkpoints.
//!
//! Layout: magic `NDT1`, then per-parameter records of
//! `name_len: u64 LE, name bytes, rank: u64 LE, dims: u64 LE each,
//! data: f64 LE each`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"NDT1";

pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn save_checkpoint(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = t.shape();
        w.write_all(&(shape.len() as u64).to_le_bytes())?;
        for d in &shape {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        for v in t.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<NamedParam>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format("bad checkpoint magic, expected NDT1"));
    }
    let mut out = Vec::new();
    loop {
        let mut len8 = [0u8; 8];
        match r.read_exact(&mut len8) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u64::from_le_bytes(len8) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint name is not utf-8"))?;
        r.read_exact(&mut len8)?;
        let rank = u64::from_le_bytes(len8) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut len8)?;
            shape.push(u64::from_le_bytes(len8) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut len8)?;
            data.push(f64::from_le_bytes(len8));
        }
        out.push(NamedParam { name, shape, data });
    }
    Ok(out)
}

/// Copies checkpoint values into existing parameter tensors by name.
/// Errors when a name is missing or a shape disagrees.
pub fn restore_into(loaded: &[NamedParam], params: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in params {
        let rec = loaded
            .iter()
            .find(|p| &p.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint missing parameter {name}")))?;
        if rec.shape != t.shape() {
            return Err(Error::format(format!(
                "checkpoint parameter {name}: shape {:?} vs expected {:?}",
                rec.shape,
                t.shape()
            )));
        }
        t.set_data(rec.data.clone());
    }
    Ok(())
}
