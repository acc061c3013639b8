//! Model checkpoints.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic        [u8; 4] = "DTDN"
//! version      u16     = 1
//! levels       u32
//! base_width   u32
//! in_channels  u32
//! out_channels u32
//! residual     u8
//! norm tag     u8      0 = fixed, 1 = z-score
//! norm payload         fixed: scale f64; z-score: 6 means then 6 stds
//! seed         u64
//! hash length  u16, then the config-hash bytes (utf-8)
//! param count  u64, then the parameters f64, generator slice order
//! ```
//!
//! A JSON manifest (same stem, `.json`) records the training history and any
//! caller-supplied provenance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::denoise::norm::NormStats;
use crate::denoise::train::{DenoiserModel, TrainHistory};
use crate::denoise::unet::{Generator, GeneratorConfig};
use crate::error::{Error, Result};
use crate::tensor::TENSOR_CHANNELS;

const MAGIC: &[u8; 4] = b"DTDN";
const VERSION: u16 = 1;

pub fn write_model(
    path: &Path,
    model: &DenoiserModel,
    history: Option<&TrainHistory>,
    provenance: &Value,
) -> Result<()> {
    let cfg = model.generator.cfg;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.levels as u32).to_le_bytes())?;
    w.write_all(&(cfg.base_width as u32).to_le_bytes())?;
    w.write_all(&(cfg.in_channels as u32).to_le_bytes())?;
    w.write_all(&(cfg.out_channels as u32).to_le_bytes())?;
    w.write_all(&[cfg.residual as u8])?;
    match &model.norm {
        NormStats::Fixed { scale } => {
            w.write_all(&[0u8])?;
            w.write_all(&scale.to_le_bytes())?;
        }
        NormStats::ZScore { mean, std } => {
            w.write_all(&[1u8])?;
            for v in mean.iter().chain(std.iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.write_all(&model.seed.to_le_bytes())?;
    let hash = model.config_hash.as_bytes();
    w.write_all(&(hash.len() as u16).to_le_bytes())?;
    w.write_all(hash)?;
    let slices = model.generator.param_slices();
    let count: usize = slices.iter().map(|s| s.len()).sum();
    w.write_all(&(count as u64).to_le_bytes())?;
    for s in slices {
        for v in s {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;

    let manifest = serde_json::json!({
        "kind": "denoiser_model",
        "generator": cfg,
        "norm": model.norm,
        "seed": model.seed,
        "config_hash": model.config_hash,
        "parameters": count,
        "history": history,
        "provenance": provenance,
    });
    std::fs::write(
        path.with_extension("json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

pub fn read_model(path: &Path) -> Result<DenoiserModel> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
    }
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    if u16::from_le_bytes(b2) != VERSION {
        return Err(Error::Format("unsupported checkpoint version".into()));
    }
    let mut b4 = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut b4)?;
        Ok(u32::from_le_bytes(b4))
    };
    let levels = read_u32(&mut r)? as usize;
    let base_width = read_u32(&mut r)? as usize;
    let in_channels = read_u32(&mut r)? as usize;
    let out_channels = read_u32(&mut r)? as usize;
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let residual = b1[0] != 0;
    r.read_exact(&mut b1)?;
    let read_f64 = |r: &mut BufReader<File>| -> Result<f64> {
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        Ok(f64::from_le_bytes(b8))
    };
    let norm = match b1[0] {
        0 => NormStats::Fixed {
            scale: read_f64(&mut r)?,
        },
        1 => {
            let mut mean = [0.0; TENSOR_CHANNELS];
            let mut std = [0.0; TENSOR_CHANNELS];
            for m in mean.iter_mut() {
                *m = read_f64(&mut r)?;
            }
            for s in std.iter_mut() {
                *s = read_f64(&mut r)?;
            }
            NormStats::ZScore { mean, std }
        }
        other => return Err(Error::Format(format!("unknown norm tag {other}"))),
    };
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    let mut b2 = [0u8; 2];
    r.read_exact(&mut b2)?;
    let hash_len = u16::from_le_bytes(b2) as usize;
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let config_hash =
        String::from_utf8(hash).map_err(|_| Error::Format("config hash is not utf-8".into()))?;
    r.read_exact(&mut b8)?;
    let count = u64::from_le_bytes(b8) as usize;

    let cfg = GeneratorConfig {
        levels,
        base_width,
        in_channels,
        out_channels,
        residual,
    };
    let mut generator = Generator::init(cfg, 0)?;
    if generator.param_count() != count {
        return Err(Error::Format(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            generator.param_count()
        )));
    }
    let mut raw = vec![0u8; count * 8];
    r.read_exact(&mut raw)?;
    let mut values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    for slice in generator.param_slices_mut() {
        for v in slice {
            *v = values.next().unwrap();
        }
    }
    if !generator.all_finite() {
        return Err(Error::Format(
            "checkpoint contains non-finite weights".into(),
        ));
    }
    Ok(DenoiserModel {
        generator,
        norm,
        seed,
        config_hash,
    })
}
