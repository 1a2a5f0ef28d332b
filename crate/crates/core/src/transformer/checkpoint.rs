//! Binary checkpoint: `"STN1"`, a u32 tensor count, then per tensor a u32
//! name length, the UTF-8 name, a u32 rank, the dims as u32 and the
//! row-major f32 payload. All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Params, Scalar, Tensor};

use super::{Net, NetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"STN1";

/// Longest tensor name accepted when reading.
const MAX_NAME: u32 = 4096;

pub fn write_checkpoint<F: Scalar>(net: &Net<F>, out: &mut impl Write) -> std::io::Result<()> {
    let tensors = net.named_tensors();
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.dims() {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for v in t.data() {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

/// Reasons a checkpoint stream is rejected, without the file name.
fn read_into<F: Scalar>(net: &mut Net<F>, input: &mut impl Read) -> std::result::Result<(), String> {
    fn u32_of(input: &mut impl Read, what: &str) -> std::result::Result<u32, String> {
        let mut b = [0u8; 4];
        input
            .read_exact(&mut b)
            .map_err(|_| format!("truncated while reading {what}"))?;
        Ok(u32::from_le_bytes(b))
    }

    let mut magic = [0u8; 4];
    input
        .read_exact(&mut magic)
        .map_err(|_| "truncated before the magic bytes".to_string())?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format!("bad magic {magic:?}, expected \"STN1\""));
    }
    let expected: Vec<(String, Vec<usize>)> = net
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.dims().to_vec()))
        .collect();
    let count = u32_of(input, "the tensor count")? as usize;
    if count != expected.len() {
        return Err(format!(
            "holds {count} tensors but the configured network has {}",
            expected.len()
        ));
    }
    let mut loaded: Vec<Tensor<F>> = Vec::with_capacity(count);
    for (want_name, want_dims) in &expected {
        let len = u32_of(input, "a tensor name length")?;
        if len > MAX_NAME {
            return Err(format!("tensor name length {len} is implausible"));
        }
        let mut name = vec![0u8; len as usize];
        input
            .read_exact(&mut name)
            .map_err(|_| "truncated inside a tensor name".to_string())?;
        let name = String::from_utf8(name).map_err(|_| "tensor name is not UTF-8".to_string())?;
        if &name != want_name {
            return Err(format!("found tensor '{name}' where '{want_name}' was expected"));
        }
        let rank = u32_of(input, "a tensor rank")? as usize;
        if rank != want_dims.len() {
            return Err(format!("tensor '{name}' has rank {rank}, expected {}", want_dims.len()));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u32_of(input, "tensor dims")? as usize);
        }
        if &dims != want_dims {
            return Err(format!("tensor '{name}' has dims {dims:?}, expected {want_dims:?}"));
        }
        let n: usize = dims.iter().product();
        let mut raw = vec![0u8; n * 4];
        input
            .read_exact(&mut raw)
            .map_err(|_| format!("truncated inside the data of '{name}'"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        loaded.push(Tensor::new(dims, data).map_err(|e| e.to_string())?);
    }
    let mut extra = [0u8; 1];
    if input.read(&mut extra).map_err(|e| e.to_string())? != 0 {
        return Err("trailing bytes after the last tensor".into());
    }
    let mut it = loaded.into_iter();
    net.visit_mut("", &mut |_, t| *t = it.next().expect("counted above"));
    Ok(())
}

/// Reads a checkpoint for a network of the given configuration. Names and
/// shapes must match the configuration exactly.
pub fn read_checkpoint<F: Scalar>(config: NetConfig, input: &mut impl Read, source: &Path) -> Result<Net<F>> {
    let mut net = Net::zeros(config)?;
    read_into(&mut net, input).map_err(|reason| Error::format(source, reason))?;
    Ok(net)
}

pub fn save_checkpoint<F: Scalar>(net: &Net<F>, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_checkpoint(net, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<F: Scalar>(config: NetConfig, path: &Path) -> Result<Net<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(config, &mut BufReader::new(file), path)
}
