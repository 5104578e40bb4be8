//! Model persistence: a small versioned container with a JSON header
//! describing the configuration and tensor manifest, followed by raw
//! little-endian f64 payloads.
//!
//! The header is serialized from plain structs (never maps), so the byte
//! stream is deterministic for a given model.

use crate::cascade::{CascadeConfig, CascadeModel, CascadeStage};
use crate::error::{Error, Result};
use crate::features::feature_len;
use crate::location::LocationRegressor;
use crate::occlusion::OcclusionPrior;
use crate::shape::{Point, Shape};
use crate::visibility::VisibilityRegressor;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: [u8; 4] = *b"LCMD";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorInfo {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    landmarks: usize,
    hidden_units: usize,
    stages: usize,
    config: CascadeConfig,
    tensors: Vec<TensorInfo>,
}

fn tensor_manifest(model: &CascadeModel) -> Vec<TensorInfo> {
    let d = model.landmarks();
    let f = feature_len(d);
    let h = model.prior.hidden_dim();
    let mut tensors = vec![TensorInfo {
        name: "mean_face".into(),
        rows: d,
        cols: 2,
    }];
    for t in 0..model.stages.len() {
        tensors.push(TensorInfo {
            name: format!("stage{t}.visibility"),
            rows: d,
            cols: f,
        });
        tensors.push(TensorInfo {
            name: format!("stage{t}.location"),
            rows: 2 * d,
            cols: f,
        });
    }
    tensors.push(TensorInfo { name: "prior.w1".into(), rows: h, cols: d });
    tensors.push(TensorInfo { name: "prior.b1".into(), rows: 1, cols: h });
    tensors.push(TensorInfo { name: "prior.w2".into(), rows: d, cols: h });
    tensors.push(TensorInfo { name: "prior.b2".into(), rows: 1, cols: d });
    tensors
}

fn write_values<W: Write>(writer: &mut W, values: impl Iterator<Item = f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(8 * 1024);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
        if buf.len() >= 8 * 1024 {
            writer.write_all(&buf)?;
            buf.clear();
        }
    }
    writer.write_all(&buf)?;
    Ok(())
}

/// Writes a trained model to `path`.
pub fn save_model(model: &CascadeModel, path: &Path) -> Result<()> {
    let header = ModelHeader {
        landmarks: model.landmarks(),
        hidden_units: model.prior.hidden_dim(),
        stages: model.stages.len(),
        config: model.config.clone(),
        tensors: tensor_manifest(model),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::ModelFormat(format!("header serialization failed: {e}")))?;
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(&MAGIC)?;
    w.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;

    write_values(&mut w, model.mean_face.points.iter().flat_map(|p| [p.x, p.y]))?;
    for stage in &model.stages {
        write_values(&mut w, stage.visibility.t.iter().copied())?;
        write_values(&mut w, stage.location.r.iter().copied())?;
    }
    write_values(&mut w, model.prior.w1.iter().copied())?;
    write_values(&mut w, model.prior.b1.iter().copied())?;
    write_values(&mut w, model.prior.w2.iter().copied())?;
    write_values(&mut w, model.prior.b2.iter().copied())?;
    w.flush()?;
    Ok(())
}

fn read_exact_checked<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::ModelFormat(format!("truncated model file while reading {what}")))
}

fn read_tensor<R: Read>(r: &mut R, info: &TensorInfo) -> Result<Array2<f64>> {
    let count = info.rows * info.cols;
    let mut bytes = vec![0u8; count * 8];
    read_exact_checked(r, &mut bytes, &info.name)?;
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelFormat(format!(
            "tensor {} contains non-finite values",
            info.name
        )));
    }
    Array2::from_shape_vec((info.rows, info.cols), values)
        .map_err(|e| Error::ModelFormat(format!("tensor {} shape error: {e}", info.name)))
}

fn expect_shape(info: &TensorInfo, name: &str, rows: usize, cols: usize) -> Result<()> {
    if info.name != name || info.rows != rows || info.cols != cols {
        return Err(Error::ModelFormat(format!(
            "expected tensor {name} of shape {rows}x{cols}, found {} of shape {}x{}",
            info.name, info.rows, info.cols
        )));
    }
    Ok(())
}

/// Reads a model written by [`save_model`], refusing unknown versions
/// and inconsistent shapes.
pub fn load_model(path: &Path) -> Result<CascadeModel> {
    let file = File::open(path)?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_checked(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::ModelFormat("not a cascade model file".into()));
    }
    let mut version_bytes = [0u8; 4];
    read_exact_checked(&mut r, &mut version_bytes, "version")?;
    let version = u32::from_le_bytes(version_bytes);
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::ModelFormat(format!(
            "unsupported model version {version}, expected {MODEL_FORMAT_VERSION}"
        )));
    }
    let mut len_bytes = [0u8; 8];
    read_exact_checked(&mut r, &mut len_bytes, "header length")?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 * 1024 * 1024 {
        return Err(Error::ModelFormat("header length is implausible".into()));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_checked(&mut r, &mut header_bytes, "header")?;
    let header: ModelHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::ModelFormat(format!("header parse failed: {e}")))?;

    let d = header.landmarks;
    let h = header.hidden_units;
    let f = feature_len(d);
    if d == 0 || h == 0 {
        return Err(Error::ModelFormat(
            "landmarks and hidden_units must be positive".into(),
        ));
    }
    let expected_tensors = 1 + 2 * header.stages + 4;
    if header.tensors.len() != expected_tensors {
        return Err(Error::ModelFormat(format!(
            "expected {expected_tensors} tensors, manifest lists {}",
            header.tensors.len()
        )));
    }

    let mut infos = header.tensors.iter();
    let info = infos.next().expect("counted above");
    expect_shape(info, "mean_face", d, 2)?;
    let mean = read_tensor(&mut r, info)?;
    let mean_face = Shape {
        points: mean
            .rows()
            .into_iter()
            .map(|row| Point { x: row[0], y: row[1] })
            .collect(),
    };

    let mut stages = Vec::with_capacity(header.stages);
    for t in 0..header.stages {
        let info = infos.next().expect("counted above");
        expect_shape(info, &format!("stage{t}.visibility"), d, f)?;
        let vis = read_tensor(&mut r, info)?;
        let info = infos.next().expect("counted above");
        expect_shape(info, &format!("stage{t}.location"), 2 * d, f)?;
        let loc = read_tensor(&mut r, info)?;
        stages.push(CascadeStage {
            visibility: VisibilityRegressor { t: vis },
            location: LocationRegressor { r: loc },
        });
    }

    let info = infos.next().expect("counted above");
    expect_shape(info, "prior.w1", h, d)?;
    let w1 = read_tensor(&mut r, info)?;
    let info = infos.next().expect("counted above");
    expect_shape(info, "prior.b1", 1, h)?;
    let b1 = read_tensor(&mut r, info)?.row(0).to_owned();
    let info = infos.next().expect("counted above");
    expect_shape(info, "prior.w2", d, h)?;
    let w2 = read_tensor(&mut r, info)?;
    let info = infos.next().expect("counted above");
    expect_shape(info, "prior.b2", 1, d)?;
    let b2 = read_tensor(&mut r, info)?.row(0).to_owned();

    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::ModelFormat("trailing bytes after payload".into()));
    }

    let model = CascadeModel {
        mean_face,
        stages,
        prior: OcclusionPrior { w1, b1, w2, b2 },
        config: header.config,
    };
    if model.config.hidden_units != h {
        return Err(Error::ModelFormat(format!(
            "config hidden_units {} disagrees with prior width {h}",
            model.config.hidden_units
        )));
    }
    Ok(model)
}
