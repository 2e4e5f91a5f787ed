//! Checkpoint container: format version, config snapshot, iteration counter,
//! named f32 parameter payloads (little-endian) and optimizer moments.
//! Save -> load restores parameters bit-identically.

use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::AdamW;
use ndarray::ArrayD;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"STGFCKPT";
pub const FORMAT_VERSION: u32 = 1;

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_array(w: &mut impl Write, a: &ArrayD<f32>) -> Result<()> {
    write_u32(w, a.ndim() as u32)?;
    for &d in a.shape() {
        write_u64(w, d as u64)?;
    }
    for &v in a.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| Error::Format("unexpected end of checkpoint".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_exact::<8>(r)?))
}

fn read_array(r: &mut impl Read) -> Result<ArrayD<f32>> {
    let ndim = read_u32(r)? as usize;
    if ndim > 8 {
        return Err(Error::Format(format!("implausible rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(read_u64(r)? as usize);
    }
    let len: usize = dims.iter().product();
    if len > 1 << 30 {
        return Err(Error::Format("implausible tensor size".into()));
    }
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        data.push(f32::from_le_bytes(read_exact::<4>(r)?));
    }
    ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
        .map_err(|e| Error::Format(format!("bad tensor shape: {e}")))
}

pub fn save(path: &Path, model: &Model, opt: &AdamW<f32>, iteration: u64) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    write_u32(&mut w, FORMAT_VERSION)?;
    let cfg_json = serde_json::to_vec(&model.cfg)
        .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
    write_u64(&mut w, cfg_json.len() as u64)?;
    w.write_all(&cfg_json)?;
    write_u64(&mut w, iteration)?;
    let (step, ms, vs) = opt.state();
    write_u64(&mut w, step)?;
    write_u32(&mut w, model.store.len() as u32)?;
    for id in model.store.ids() {
        let name = model.store.name(id).as_bytes();
        write_u32(&mut w, name.len() as u32)?;
        w.write_all(name)?;
        write_array(&mut w, model.store.value(id))?;
        for state in [ms.get(id.0 as usize), vs.get(id.0 as usize)] {
            match state.and_then(|s| s.as_ref()) {
                Some(a) => {
                    w.write_all(&[1u8])?;
                    write_array(&mut w, a)?;
                }
                None => w.write_all(&[0u8])?,
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Rebuild a model (and optimizer state) from a checkpoint file.
pub fn load(path: &Path) -> Result<(Model, AdamW<f32>, u64)> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let magic = read_exact::<8>(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "format version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let cfg_len = read_u64(&mut r)? as usize;
    if cfg_len > 1 << 24 {
        return Err(Error::Format("implausible config length".into()));
    }
    let mut cfg_buf = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_buf)
        .map_err(|_| Error::Format("truncated config".into()))?;
    let cfg: TrainConfig = serde_json::from_slice(&cfg_buf)
        .map_err(|e| Error::Format(format!("bad config json: {e}")))?;
    let iteration = read_u64(&mut r)?;
    let adam_step = read_u64(&mut r)?;
    let count = read_u32(&mut r)? as usize;

    let mut model = Model::build(&cfg)?;
    if count != model.store.len() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match the configured model ({})",
            model.store.len()
        )));
    }
    let mut ms = vec![None; count];
    let mut vs = vec![None; count];
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format("implausible name length".into()));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)
            .map_err(|_| Error::Format("truncated name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::Format("non-utf8 parameter name".into()))?;
        let value = read_array(&mut r)?;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter {name}")))?;
        if model.store.value(id).shape() != value.shape() {
            return Err(Error::Format(format!("shape mismatch for {name}")));
        }
        model.store.set(id, value);
        for slot in [&mut ms, &mut vs] {
            let present = read_exact::<1>(&mut r)?[0];
            if present == 1 {
                slot[id.0 as usize] = Some(read_array(&mut r)?);
            }
        }
    }
    let mut opt = AdamW::new(cfg.adam_betas, cfg.weight_decay, Some(cfg.grad_clip));
    opt.restore(adam_step, ms, vs);
    Ok((model, opt, iteration))
}
