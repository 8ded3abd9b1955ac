//! Versioned binary container for a trained model: the sparse encoder stack
//! plus the clustered output layer.
//!
//! Layout (version 1, all integers little endian):
//!
//! ```text
//! magic "APLCMODL" | version u32 | total param count u64 | gate flag u8
//! D u64 | d_e u64 | d_h u64 | L u64
//! C u64 | proportions C x f64 | decay f64 | spec head dim u64
//! cluster hidden dims C x u64
//! per cluster: len u64, label ids len x u32
//! matrices, each (rows u64, cols u64, rows*cols f32):
//!   W_in, W_h, bias, head, then per tail projection and classifier
//! ```
//!
//! Loading validates the magic, the version, every matrix shape against the
//! header geometry, and the stored parameter count against the closed-form
//! count implied by the geometry, so a truncated or internally inconsistent
//! file is rejected before any weight is used.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::encoder::EncoderStack;
use crate::layer::AplcLayer;
use crate::numerics::Matrix;
use crate::partition::{LabelClusters, PartitionError, PartitionSpec};

const MAGIC: &[u8; 8] = b"APLCMODL";
const VERSION: u32 = 1;
/// Sanity cap on header counts so a corrupt file cannot trigger a huge
/// allocation before validation fails.
const MAX_CLUSTERS: u64 = 1024;
const MAX_INDEX: u64 = u32::MAX as u64;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("stored parameter count {found} does not match the geometry's {expected}")]
    CountMismatch { expected: u64, found: u64 },
    #[error("inconsistent model geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Partition(#[from] PartitionError),
}

/// A trained model: encoder, output layer, and the partition recipe that
/// produced the layer's clusters (kept for reporting and inspection).
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: PartitionSpec,
    pub encoder: EncoderStack<f32>,
    pub layer: AplcLayer<f32>,
}

impl Model {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model, ModelError> {
        let mut r = BufReader::new(File::open(path)?);
        Model::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<(), ModelError> {
        w.write_all(MAGIC)?;
        write_u32(w, VERSION)?;
        let total =
            self.encoder.parameter_count() + self.layer.enumerated_parameter_count();
        write_u64(w, total)?;
        w.write_all(&[u8::from(self.layer.gate_bce())])?;

        write_u64(w, self.encoder.num_features() as u64)?;
        write_u64(w, self.encoder.embed_dim() as u64)?;
        write_u64(w, self.encoder.hidden_dim() as u64)?;
        write_u64(w, self.layer.num_labels() as u64)?;

        let clusters = self.layer.clusters();
        write_u64(w, clusters.num_clusters() as u64)?;
        for &p in self.spec.proportions() {
            write_f64(w, p)?;
        }
        write_f64(w, self.spec.decay_factor())?;
        write_u64(w, self.spec.head_dim() as u64)?;
        for &dim in clusters.dims() {
            write_u64(w, dim as u64)?;
        }
        for c in 0..clusters.num_clusters() {
            let members = clusters.cluster(c);
            write_u64(w, members.len() as u64)?;
            for &id in members {
                w.write_all(&id.to_le_bytes())?;
            }
        }

        write_matrix(w, self.encoder.input_weights())?;
        write_matrix(w, self.encoder.hidden_weights())?;
        write_matrix(w, self.encoder.bias())?;
        for m in self.layer.matrices() {
            write_matrix(w, m)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Model, ModelError> {
        let mut magic = [0u8; 8];
        read_bytes(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(ModelError::UnsupportedVersion { found: version });
        }
        let stored_count = read_u64(r)?;
        let mut flag = [0u8; 1];
        read_bytes(r, &mut flag)?;
        let gate_bce = flag[0] != 0;

        let num_features = read_index(r, "feature count")?;
        let embed_dim = read_index(r, "embedding dimension")?;
        let hidden_dim = read_index(r, "hidden dimension")?;
        let num_labels = read_index(r, "label count")?;

        let num_clusters = read_u64(r)?;
        if num_clusters == 0 || num_clusters > MAX_CLUSTERS {
            return Err(ModelError::Geometry(format!(
                "implausible cluster count {num_clusters}"
            )));
        }
        let num_clusters = num_clusters as usize;
        let mut proportions = Vec::with_capacity(num_clusters);
        for _ in 0..num_clusters {
            proportions.push(read_f64(r)?);
        }
        let decay = read_f64(r)?;
        let spec_head_dim = read_index(r, "partition head dimension")?;
        let spec = PartitionSpec::new(proportions, decay, spec_head_dim)?;

        let mut dims = Vec::with_capacity(num_clusters);
        for _ in 0..num_clusters {
            dims.push(read_index(r, "cluster hidden dimension")?);
        }
        if dims[0] != hidden_dim {
            return Err(ModelError::Geometry(format!(
                "head dimension {} does not match hidden dimension {}",
                dims[0], hidden_dim
            )));
        }
        let mut members: Vec<Vec<u32>> = Vec::with_capacity(num_clusters);
        for _ in 0..num_clusters {
            let len = read_u64(r)?;
            if len > num_labels as u64 {
                return Err(ModelError::Geometry(format!(
                    "cluster of {len} labels in a {num_labels}-label model"
                )));
            }
            let mut ids = Vec::with_capacity(len as usize);
            let mut buf = [0u8; 4];
            for _ in 0..len {
                read_bytes(r, &mut buf)?;
                ids.push(u32::from_le_bytes(buf));
            }
            members.push(ids);
        }
        let total_members: usize = members.iter().map(Vec::len).sum();
        if total_members != num_labels {
            return Err(ModelError::Geometry(format!(
                "clusters hold {total_members} labels, header says {num_labels}"
            )));
        }
        let clusters = LabelClusters::from_layout(members, dims)?;

        let mut layer = AplcLayer::<f32>::zeros(clusters).with_gate_bce(gate_bce);
        let expected =
            (num_features * embed_dim + embed_dim * hidden_dim + hidden_dim) as u64
                + layer.parameter_count();
        if stored_count != expected {
            return Err(ModelError::CountMismatch {
                expected,
                found: stored_count,
            });
        }

        let input_weights = read_matrix(r, num_features, embed_dim, "input weights")?;
        let hidden_weights = read_matrix(r, embed_dim, hidden_dim, "hidden weights")?;
        let bias = read_matrix(r, 1, hidden_dim, "bias")?;
        let encoder = EncoderStack::from_parts(input_weights, hidden_weights, bias);
        for slot in layer.matrices_mut() {
            let got = read_matrix(r, slot.rows(), slot.cols(), "layer weights")?;
            *slot = got;
        }

        Ok(Model {
            spec,
            encoder,
            layer,
        })
    }
}

fn read_bytes(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ModelError::Truncated
        } else {
            ModelError::Io(e)
        }
    })
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> Result<(), ModelError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    read_bytes(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> Result<(), ModelError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64, ModelError> {
    let mut buf = [0u8; 8];
    read_bytes(r, &mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> Result<(), ModelError> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_f64(r: &mut impl Read) -> Result<f64, ModelError> {
    let mut buf = [0u8; 8];
    read_bytes(r, &mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

/// A u64 that must fit the 32-bit index space used throughout the engine.
fn read_index(r: &mut impl Read, what: &str) -> Result<usize, ModelError> {
    let v = read_u64(r)?;
    if v == 0 || v > MAX_INDEX {
        return Err(ModelError::Geometry(format!("implausible {what} {v}")));
    }
    Ok(v as usize)
}

pub(crate) fn write_f32_slice(w: &mut impl Write, data: &[f32]) -> Result<(), ModelError> {
    let mut buf = Vec::with_capacity(data.len().min(65536) * 4);
    for chunk in data.chunks(16384) {
        buf.clear();
        for v in chunk {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_f32_vec(r: &mut impl Read, len: usize) -> Result<Vec<f32>, ModelError> {
    let mut out = Vec::with_capacity(len);
    let mut buf = vec![0u8; 16384 * 4];
    let mut remaining = len;
    while remaining > 0 {
        let take = remaining.min(16384);
        let bytes = &mut buf[..take * 4];
        read_bytes(r, bytes)?;
        for chunk in bytes.chunks_exact(4) {
            out.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        remaining -= take;
    }
    Ok(out)
}

fn write_matrix(w: &mut impl Write, m: &Matrix<f32>) -> Result<(), ModelError> {
    write_u64(w, m.rows() as u64)?;
    write_u64(w, m.cols() as u64)?;
    write_f32_slice(w, m.as_slice())
}

fn read_matrix(
    r: &mut impl Read,
    rows: usize,
    cols: usize,
    what: &str,
) -> Result<Matrix<f32>, ModelError> {
    let stored_rows = read_u64(r)?;
    let stored_cols = read_u64(r)?;
    if stored_rows != rows as u64 || stored_cols != cols as u64 {
        return Err(ModelError::Geometry(format!(
            "{what}: stored {stored_rows}x{stored_cols}, geometry requires {rows}x{cols}"
        )));
    }
    let data = read_f32_vec(r, rows * cols)?;
    Ok(Matrix::from_vec(rows, cols, data))
}
