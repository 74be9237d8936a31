//! Model checkpoints.
//!
//! Layout (little-endian): magic `FDCK`, `u32` version, the model
//! configuration as `u32`-length-prefixed `key = value` text, then a `u32`
//! tensor count and per tensor its name, rank, extents and raw `f64` bits.
//! Driver-attention parameters are stored under the `da.` prefix.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::DrivingModel;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"FDCK";
const VERSION: u32 = 1;
const DA_PREFIX: &str = "da.";

fn bad(detail: impl Into<String>) -> Error {
    Error::Format {
        what: "checkpoint",
        detail: detail.into(),
    }
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn get_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn put_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    put_u32(w, s.len() as u32)?;
    Ok(w.write_all(s.as_bytes())?)
}

fn get_str<R: Read>(r: &mut R, limit: usize) -> Result<String> {
    let n = get_u32(r)? as usize;
    if n > limit {
        return Err(bad(format!("string of {n} bytes")));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| bad(e.to_string()))
}

fn model_kv(model: &DrivingModel) -> String {
    let c = RunConfig {
        model: model.config.clone(),
        ..Default::default()
    };
    c.to_kv().lines().filter(|l| l.starts_with("model.")).map(|l| format!("{l}\n")).collect()
}

pub fn write_model<W: Write>(w: &mut W, model: &DrivingModel) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    put_str(w, &model_kv(model))?;
    let mut all = model.params.clone();
    all.merge_prefixed(DA_PREFIX, &model.saliency.params);
    put_u32(w, all.len() as u32)?;
    for (name, t) in all.iter() {
        put_str(w, name)?;
        put_u32(w, t.shape().len() as u32)?;
        for &d in t.shape() {
            put_u32(w, d as u32)?;
        }
        for v in t.data() {
            w.write_all(&v.to_bits().to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_model<R: Read>(r: &mut R) -> Result<DrivingModel> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != MAGIC {
        return Err(bad("bad magic"));
    }
    let v = get_u32(r)?;
    if v != VERSION {
        return Err(bad(format!("version {v}")));
    }
    let cfg = RunConfig::from_kv(&get_str(r, 1 << 16)?)?;
    let mut model = DrivingModel::new(cfg.model)?;
    let n = get_u32(r)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = get_str(r, 1 << 10)?;
        let rank = get_u32(r)? as usize;
        if rank > 8 {
            return Err(bad(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(get_u32(r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(|e| bad(format!("{name}: {e}")))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect();
        store.insert(name, Tensor::new(&shape, data)?);
    }
    let da = store.extract_prefixed(DA_PREFIX);
    for (target, source, what) in [(&mut model.params, &store, "network"), (&mut model.saliency.params, &da, "attention")] {
        for (name, t) in target.iter_mut() {
            let loaded = source
                .get(name)
                .map_err(|_| bad(format!("missing {what} tensor {name}")))?;
            if loaded.shape() != t.shape() {
                return Err(bad(format!("{name}: shape {:?} vs {:?}", loaded.shape(), t.shape())));
            }
            *t = loaded.clone();
        }
    }
    Ok(model)
}

pub fn save(path: &Path, model: &DrivingModel) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<DrivingModel> {
    read_model(&mut std::io::BufReader::new(std::fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            lva_fusion: false,
            init_seed: 3,
            ..Default::default()
        };
        let mut m = DrivingModel::new(cfg).unwrap();
        m.saliency.params.get_mut("out.b").unwrap().data_mut()[0] = 0.125;
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_corruption() {
        let m = DrivingModel::new(ModelConfig::default()).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert!(read_model(&mut &buf[..buf.len() - 3]).is_err());
        buf[1] = b'x';
        assert!(read_model(&mut buf.as_slice()).is_err());
    }
}
