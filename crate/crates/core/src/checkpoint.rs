//! Model checkpoint file: magic `ALNN1`, architecture and sensor-config
//! tags, the input geometry, then a named little-endian f64 tensor list.
//! Batch-norm running statistics ride along as `<bn>.running_mean` /
//! `<bn>.running_var` entries and the fitted channel normalizer as
//! `norm.mean` / `norm.std`, so a checkpoint is everything evaluation needs.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{EngineError, Tensor};
use crate::models::{Model, ModelError, ModelKind, ModelSpec};
use crate::preprocess::{ChannelStats, SensorConfig};

const MAGIC: &[u8; 5] = b"ALNN1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

fn annotate(path: &Path, e: std::io::Error) -> std::io::Error {
    std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn write_entry(
    w: &mut impl Write,
    name: &str,
    shape: &[usize],
    data: &[f64],
) -> std::io::Result<()> {
    write_str(w, name)?;
    write_u32(w, shape.len() as u32)?;
    for d in shape {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    config: SensorConfig,
    normalizer: &ChannelStats,
) -> Result<(), CheckpointError> {
    let spec = model.spec();
    let store = model.store();
    let file = std::fs::File::create(path).map_err(|e| annotate(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    write_str(&mut w, spec.kind.tag())?;
    write_str(&mut w, config.tag())?;
    write_u32(&mut w, spec.in_channels as u32)?;
    write_u32(&mut w, spec.window_length as u32)?;
    write_u32(&mut w, spec.n_classes as u32)?;
    let n_entries = store.params().len() + 2 * store.bn_states().len() + 2;
    write_u32(&mut w, n_entries as u32)?;
    for p in store.params() {
        write_entry(&mut w, &p.name, p.value.shape(), p.value.data())?;
    }
    for bn in store.bn_states() {
        let c = [bn.mean.len()];
        write_entry(&mut w, &format!("{}.running_mean", bn.name), &c, &bn.mean)?;
        write_entry(&mut w, &format!("{}.running_var", bn.name), &c, &bn.var)?;
    }
    let c = [normalizer.mean.len()];
    write_entry(&mut w, "norm.mean", &c, &normalizer.mean)?;
    write_entry(&mut w, "norm.std", &c, &normalizer.std)?;
    w.flush()?;
    Ok(())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> Result<Vec<u8>, CheckpointError> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)
        .map_err(|_| CheckpointError::Format("truncated checkpoint".into()))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 4096 {
        return Err(CheckpointError::Format(format!(
            "implausible string length {len}"
        )));
    }
    String::from_utf8(read_exact_buf(r, len)?)
        .map_err(|_| CheckpointError::Format("non-UTF8 name".into()))
}

fn read_entry(r: &mut impl Read) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
    let name = read_str(r)?;
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(CheckpointError::Format(format!(
            "implausible tensor rank {rank}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let b = read_exact_buf(r, 8)?;
        shape.push(u64::from_le_bytes(b.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    if n > 64 << 20 {
        return Err(CheckpointError::Format(format!(
            "implausible tensor size {n}"
        )));
    }
    let bytes = read_exact_buf(r, n * 8)?;
    let data = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((name, shape, data))
}

/// Rebuilds the model a checkpoint describes and restores every parameter,
/// batch-norm state, and the channel normalizer.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(Model, SensorConfig, ChannelStats), CheckpointError> {
    let file = std::fs::File::open(path).map_err(|e| annotate(path, e))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_buf(&mut r, 5)?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(
            "bad magic (not a checkpoint)".into(),
        ));
    }
    let kind: ModelKind = read_str(&mut r)?
        .parse()
        .map_err(|e| CheckpointError::Format(format!("{e}")))?;
    let config: SensorConfig = read_str(&mut r)?
        .parse()
        .map_err(|e| CheckpointError::Format(format!("{e}")))?;
    let spec = ModelSpec {
        kind,
        in_channels: read_u32(&mut r)? as usize,
        window_length: read_u32(&mut r)? as usize,
        n_classes: read_u32(&mut r)? as usize,
    };
    let mut model = Model::build(spec, 0)?;
    let n_entries = read_u32(&mut r)? as usize;

    let mut restored_params = 0usize;
    let mut restored_bn = 0usize;
    let mut norm_mean: Option<Vec<f64>> = None;
    let mut norm_std: Option<Vec<f64>> = None;
    for _ in 0..n_entries {
        let (name, shape, data) = read_entry(&mut r)?;
        if name == "norm.mean" {
            norm_mean = Some(data);
        } else if name == "norm.std" {
            norm_std = Some(data);
        } else if let Some(base) = name.strip_suffix(".running_mean") {
            let slot = model
                .store()
                .bn_slot_by_name(base)
                .ok_or_else(|| CheckpointError::Format(format!("unknown entry {name:?}")))?;
            let var = model.store().bn(slot).var.clone();
            model.store_mut().set_bn_state(slot, data, var)?;
            restored_bn += 1;
        } else if let Some(base) = name.strip_suffix(".running_var") {
            let slot = model
                .store()
                .bn_slot_by_name(base)
                .ok_or_else(|| CheckpointError::Format(format!("unknown entry {name:?}")))?;
            let mean = model.store().bn(slot).mean.clone();
            model.store_mut().set_bn_state(slot, mean, data)?;
            restored_bn += 1;
        } else {
            let slot = model
                .store()
                .slot_by_name(&name)
                .ok_or_else(|| CheckpointError::Format(format!("unknown entry {name:?}")))?;
            let tensor = Tensor::new(&shape, data)?;
            model.store_mut().set_value(slot, tensor)?;
            restored_params += 1;
        }
    }
    if restored_params != model.store().params().len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint restored {restored_params} of {} parameters",
            model.store().params().len()
        )));
    }
    if restored_bn != 2 * model.store().bn_states().len() {
        return Err(CheckpointError::Format(
            "checkpoint is missing batch-norm running statistics".into(),
        ));
    }
    let normalizer = match (norm_mean, norm_std) {
        (Some(mean), Some(std)) if mean.len() == std.len() => ChannelStats { mean, std },
        _ => {
            return Err(CheckpointError::Format(
                "checkpoint is missing the channel normalizer".into(),
            ))
        }
    };
    if normalizer.mean.len() != spec.in_channels {
        return Err(CheckpointError::Format(format!(
            "normalizer covers {} channels, model expects {}",
            normalizer.mean.len(),
            spec.in_channels
        )));
    }
    Ok((model, config, normalizer))
}
