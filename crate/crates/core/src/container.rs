//! Flat binary container for image-plane data.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    [u8; 4]  = "DTCF"
//! version  u16      = 1
//! rows     u32
//! cols     u32
//! channels u32                         data planes that follow
//! planes   channels * rows * cols f64  row-major, plane by plane
//! mask     rows * cols f64             0.0 / 1.0
//! ```
//!
//! A JSON sidecar (same stem, `.json` extension) carries the metadata:
//! protocol and frame keys for a [`DwiStack`], channel names for a
//! [`TensorField`] or [`MapSet`], plus any caller-provided provenance.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::maps::MapSet;
use crate::protocol::AcquisitionProtocol;
use crate::stack::{DwiStack, FrameKey, Image};
use crate::tensor::{TensorField, CHANNEL_NAMES, TENSOR_CHANNELS};

const MAGIC: &[u8; 4] = b"DTCF";
const VERSION: u16 = 1;

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Raw contents of a container file.
pub struct Planes {
    pub data: Array3<f64>,
    pub mask: Array2<bool>,
    pub meta: Value,
}

pub fn write_planes(
    path: &Path,
    data: &Array3<f64>,
    mask: &Array2<bool>,
    meta: &Value,
) -> Result<()> {
    let (channels, rows, cols) = data.dim();
    if mask.dim() != (rows, cols) {
        return Err(Error::ShapeMismatch(format!(
            "mask {:?} vs planes {:?}",
            mask.dim(),
            (rows, cols)
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    for ch in 0..channels {
        for r in 0..rows {
            for c in 0..cols {
                w.write_all(&data[(ch, r, c)].to_le_bytes())?;
            }
        }
    }
    for r in 0..rows {
        for c in 0..cols {
            let v: f64 = if mask[(r, c)] { 1.0 } else { 0.0 };
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    std::fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(meta)? + "\n",
    )?;
    Ok(())
}

pub fn read_planes(path: &Path) -> Result<Planes> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut buf4 = [0u8; 4];
    let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
        r.read_exact(&mut buf4)?;
        Ok(u32::from_le_bytes(buf4))
    };
    let rows = read_u32(&mut r)? as usize;
    let cols = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Format("zero-sized container".into()));
    }
    let plane = rows * cols;
    let mut raw = vec![0u8; (channels + 1) * plane * 8];
    r.read_exact(&mut raw)?;
    let mut values = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let mut data = Array3::zeros((channels, rows, cols));
    for ch in 0..channels {
        for r0 in 0..rows {
            for c0 in 0..cols {
                data[(ch, r0, c0)] = values.next().unwrap();
            }
        }
    }
    let mut mask = Array2::from_elem((rows, cols), false);
    for r0 in 0..rows {
        for c0 in 0..cols {
            mask[(r0, c0)] = values.next().unwrap() != 0.0;
        }
    }
    let meta: Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(path))?)?;
    Ok(Planes { data, mask, meta })
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    kind: String,
    channel_names: Vec<String>,
    units: String,
    #[serde(default)]
    provenance: Value,
}

pub fn write_tensor_field(path: &Path, field: &TensorField, provenance: &Value) -> Result<()> {
    let meta = serde_json::to_value(TensorMeta {
        kind: "tensor_field".into(),
        channel_names: CHANNEL_NAMES.iter().map(|s| s.to_string()).collect(),
        units: "mm^2/s".into(),
        provenance: provenance.clone(),
    })?;
    write_planes(path, &field.components, &field.mask, &meta)
}

pub fn read_tensor_field(path: &Path) -> Result<TensorField> {
    let planes = read_planes(path)?;
    if planes.meta.get("kind").and_then(Value::as_str) != Some("tensor_field") {
        return Err(Error::Format(format!(
            "{} is not a tensor_field container",
            path.display()
        )));
    }
    if planes.data.dim().0 != TENSOR_CHANNELS {
        return Err(Error::Format(format!(
            "tensor_field with {} channels",
            planes.data.dim().0
        )));
    }
    TensorField::new(planes.data, planes.mask)
}

#[derive(Serialize, Deserialize)]
struct StackMeta {
    kind: String,
    protocol: AcquisitionProtocol,
    frame_keys: Vec<FrameKey>,
    #[serde(default)]
    provenance: Value,
}

pub fn write_dwi_stack(path: &Path, stack: &DwiStack, provenance: &Value) -> Result<()> {
    let (rows, cols) = stack.image_size();
    let keys: Vec<FrameKey> = stack.frames.keys().copied().collect();
    let mut data = Array3::zeros((keys.len(), rows, cols));
    for (i, key) in keys.iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), i)
            .assign(&stack.frames[key]);
    }
    let meta = serde_json::to_value(StackMeta {
        kind: "dwi_stack".into(),
        protocol: stack.protocol.clone(),
        frame_keys: keys,
        provenance: provenance.clone(),
    })?;
    write_planes(path, &data, &stack.mask, &meta)
}

pub fn read_dwi_stack(path: &Path) -> Result<DwiStack> {
    let planes = read_planes(path)?;
    let meta: StackMeta = serde_json::from_value(planes.meta)?;
    if meta.kind != "dwi_stack" {
        return Err(Error::Format(format!(
            "{} is not a dwi_stack container",
            path.display()
        )));
    }
    if meta.frame_keys.len() != planes.data.dim().0 {
        return Err(Error::Format(format!(
            "sidecar lists {} frames, container holds {}",
            meta.frame_keys.len(),
            planes.data.dim().0
        )));
    }
    let mut frames = std::collections::BTreeMap::new();
    for (i, key) in meta.frame_keys.iter().enumerate() {
        let img: Image = planes.data.index_axis(ndarray::Axis(0), i).to_owned();
        frames.insert(*key, img);
    }
    DwiStack::new(meta.protocol, frames, planes.mask)
}

const MAP_CHANNELS: [&str; 4] = ["MD", "FA", "HA", "E2A"];

pub fn write_map_set(path: &Path, maps: &MapSet, provenance: &Value) -> Result<()> {
    let (rows, cols) = maps.mask.dim();
    let mut data = Array3::zeros((4, rows, cols));
    for (i, img) in [&maps.md, &maps.fa, &maps.ha, &maps.e2a].iter().enumerate() {
        data.index_axis_mut(ndarray::Axis(0), i).assign(img);
    }
    let meta = serde_json::json!({
        "kind": "map_set",
        "channel_names": MAP_CHANNELS,
        "units": ["mm^2/s", "1", "deg", "deg"],
        "provenance": provenance,
    });
    write_planes(path, &data, &maps.mask, &meta)
}

pub fn read_map_set(path: &Path) -> Result<MapSet> {
    let planes = read_planes(path)?;
    if planes.meta.get("kind").and_then(Value::as_str) != Some("map_set") {
        return Err(Error::Format(format!(
            "{} is not a map_set container",
            path.display()
        )));
    }
    if planes.data.dim().0 != 4 {
        return Err(Error::Format("map_set needs 4 channels".into()));
    }
    let take = |i: usize| planes.data.index_axis(ndarray::Axis(0), i).to_owned();
    Ok(MapSet {
        md: take(0),
        fa: take(1),
        ha: take(2),
        e2a: take(3),
        mask: planes.mask,
    })
}
