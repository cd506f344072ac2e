//! `SSNM` model files.
//!
//! ```text
//! "SSNM" | version u32 | stamp str | payload_len u32 | payload | crc32(payload) u32
//! payload:
//!   kind u8 (0 siamese, 1 classifier)
//!   grid: start f64 | end f64 | len u32
//!   in_channels u32 | layer_count u32 | layer records
//!   blob_count u32 | per blob: len u32 | len x f32
//!   siamese:    bias_enabled u8  (metric w and b are the last two blobs)
//!   classifier: K u32 | K x class_id u32
//! ```
//! Layer records are a tag byte followed by the layer's fields:
//! Conv = 1 (filters u32, kernel u32, padding u8), BatchNorm = 2,
//! LeakyRelu = 3 (slope f64), MaxPool = 4 (kernel u32, stride u32),
//! Dense = 5 (units u32), Flatten = 6.
//!
//! Blobs follow layer declaration order and include batch-norm running
//! statistics. The snapshot id of a model is the CRC-32 of its payload; the
//! stamp sits outside the payload so it does not affect the id.

use std::fs;
use std::path::Path;

use crate::bytes::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Padding};
use crate::siamese::{ClassifierModel, SiameseModel};
use crate::spectra::Grid;

pub const MAGIC: &[u8; 4] = b"SSNM";
pub const VERSION: u32 = 1;

const KIND_SIAMESE: u8 = 0;
const KIND_CLASSIFIER: u8 = 1;

#[derive(Debug, Clone)]
pub enum SavedModel {
    Siamese(SiameseModel<f32>),
    Classifier(ClassifierModel<f32>),
}

fn write_layer(w: &mut ByteWriter, spec: &LayerSpec) {
    match *spec {
        LayerSpec::Conv { filters, kernel, padding } => {
            w.u8(1);
            w.u32(filters as u32);
            w.u32(kernel as u32);
            w.u8(match padding {
                Padding::Valid => 0,
                Padding::Same => 1,
            });
        }
        LayerSpec::BatchNorm => w.u8(2),
        LayerSpec::LeakyRelu { slope } => {
            w.u8(3);
            w.f64(slope);
        }
        LayerSpec::MaxPool { kernel, stride } => {
            w.u8(4);
            w.u32(kernel as u32);
            w.u32(stride as u32);
        }
        LayerSpec::Dense { units } => {
            w.u8(5);
            w.u32(units as u32);
        }
        LayerSpec::Flatten => w.u8(6),
    }
}

fn read_layer(r: &mut ByteReader) -> Result<LayerSpec> {
    Ok(match r.u8()? {
        1 => {
            let filters = r.u32()? as usize;
            let kernel = r.u32()? as usize;
            let padding = match r.u8()? {
                0 => Padding::Valid,
                1 => Padding::Same,
                p => return Err(Error::Format(format!("unknown padding tag {p}"))),
            };
            LayerSpec::Conv { filters, kernel, padding }
        }
        2 => LayerSpec::BatchNorm,
        3 => LayerSpec::LeakyRelu { slope: r.f64()? },
        4 => LayerSpec::MaxPool { kernel: r.u32()? as usize, stride: r.u32()? as usize },
        5 => LayerSpec::Dense { units: r.u32()? as usize },
        6 => LayerSpec::Flatten,
        t => return Err(Error::Format(format!("unknown layer tag {t}"))),
    })
}

fn write_network(w: &mut ByteWriter, kind: u8, grid: Grid, net: &Network<f32>, extra: &[&[f32]]) {
    w.u8(kind);
    w.f64(grid.start);
    w.f64(grid.end);
    w.u32(grid.len as u32);
    let specs = net.specs();
    w.u32(net.input_shape().0 as u32);
    w.u32(specs.len() as u32);
    for s in &specs {
        write_layer(w, s);
    }
    let state = net.state();
    w.u32((state.len() + extra.len()) as u32);
    for blob in state.iter().chain(extra) {
        w.u32(blob.len() as u32);
        w.f32s(blob);
    }
}

pub fn siamese_payload(m: &SiameseModel<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    let b = [m.metric_b()];
    write_network(&mut w, KIND_SIAMESE, m.grid(), m.twin(), &[m.metric_w(), &b]);
    w.u8(m.bias_enabled() as u8);
    w.into_inner()
}

pub fn classifier_payload(m: &ClassifierModel<f32>) -> Vec<u8> {
    let mut w = ByteWriter::new();
    write_network(&mut w, KIND_CLASSIFIER, m.grid(), m.net(), &[]);
    w.u32(m.classes().len() as u32);
    for &c in m.classes() {
        w.u32(c);
    }
    w.into_inner()
}

pub fn snapshot_id(m: &SiameseModel<f32>) -> u32 {
    crc32fast::hash(&siamese_payload(m))
}

fn wrap(payload: &[u8], stamp: &str) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(stamp);
    w.u32(payload.len() as u32);
    w.bytes(payload);
    w.u32(crc32fast::hash(payload));
    w.into_inner()
}

pub fn encode(model: &SavedModel, stamp: &str) -> Vec<u8> {
    match model {
        SavedModel::Siamese(m) => wrap(&siamese_payload(m), stamp),
        SavedModel::Classifier(m) => wrap(&classifier_payload(m), stamp),
    }
}

/// Decoded model, its stamp and its snapshot id.
pub fn decode(bytes: &[u8]) -> Result<(SavedModel, String, u32)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported SSNM version {version}")));
    }
    let stamp = r.str()?;
    let n = r.u32()? as usize;
    let payload = r.take(n)?;
    let crc = r.u32()?;
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes after SSNM checksum".into()));
    }
    let id = crc32fast::hash(payload);
    if crc != id {
        return Err(Error::Format(format!("SSNM checksum mismatch: stored {crc:08x}, computed {id:08x}")));
    }
    let model = decode_payload(payload)?;
    Ok((model, stamp, id))
}

fn decode_payload(payload: &[u8]) -> Result<SavedModel> {
    let mut r = ByteReader::new(payload);
    let kind = r.u8()?;
    let start = r.f64()?;
    let end = r.f64()?;
    let grid = Grid::new(start, end, r.u32()? as usize)?;
    let in_channels = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let specs = (0..n_layers).map(|_| read_layer(&mut r)).collect::<Result<Vec<_>>>()?;
    let n_blobs = r.u32()? as usize;
    let mut blobs = Vec::with_capacity(n_blobs);
    for _ in 0..n_blobs {
        let len = r.u32()? as usize;
        blobs.push(r.f32s(len)?);
    }
    let mut net = Network::<f32>::new(&specs, in_channels, grid.len, 0)?;
    let n_state = net.state().len();
    let expected_extra = if kind == KIND_SIAMESE { 2 } else { 0 };
    if blobs.len() != n_state + expected_extra {
        return Err(Error::Format(format!(
            "expected {} parameter blobs, found {}",
            n_state + expected_extra,
            blobs.len()
        )));
    }
    let extra = blobs.split_off(n_state);
    for (dst, src) in net.state_mut().into_iter().zip(&blobs) {
        if dst.len() != src.len() {
            return Err(Error::Format(format!("blob of {} values where {} expected", src.len(), dst.len())));
        }
        dst.copy_from_slice(src);
    }
    let model = match kind {
        KIND_SIAMESE => {
            let bias_enabled = r.u8()? != 0;
            let [w, b]: [Vec<f32>; 2] = extra.try_into().unwrap();
            if b.len() != 1 {
                return Err(Error::Format("metric bias blob must hold one value".into()));
            }
            SavedModel::Siamese(SiameseModel::from_parts(net, w, b[0], bias_enabled, grid)?)
        }
        KIND_CLASSIFIER => {
            let k = r.u32()? as usize;
            let classes = (0..k).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            SavedModel::Classifier(ClassifierModel::from_parts(net, classes, grid)?)
        }
        k => return Err(Error::Format(format!("unknown model kind {k}"))),
    };
    if !r.is_at_end() {
        return Err(Error::Format("trailing bytes in SSNM payload".into()));
    }
    Ok(model)
}

pub fn save(model: &SavedModel, stamp: &str, path: &Path) -> Result<()> {
    fs::write(path, encode(model, stamp))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(SavedModel, String, u32)> {
    decode(&fs::read(path)?)
}

pub fn load_siamese(path: &Path) -> Result<(SiameseModel<f32>, u32)> {
    match load(path)? {
        (SavedModel::Siamese(m), _, id) => Ok((m, id)),
        _ => Err(Error::Format(format!("{} holds a classifier, not a siamese model", path.display()))),
    }
}
