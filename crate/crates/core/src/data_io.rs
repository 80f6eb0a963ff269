//! File formats and dataset joining.
//!
//! Three formats, all little-endian and bit-exact:
//!
//! * Embedding file: magic "XEMB", version u32 = 1, dim u32, count u32,
//!   then count*dim f32 values row-major. Values are widened to f64 on
//!   load; non-finite values are hard errors.
//! * Manifest: one JSON object per line with fields
//!   row, id, lang, image_id (optional), caption (optional).
//! * Checkpoint: magic "XCKP", version u32 = 1, header length u32, a JSON
//!   header (configs, seed, epochs trained, per-layer shapes), then per
//!   block the weight matrix (row-major, out x in) followed by the bias
//!   vector, f32 little-endian.
//!
//! Weights are stored as f32; widening on load is exact, so
//! save -> load -> save reproduces a file byte for byte.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::matrix::Mat;
use crate::projection::{Layer, NetworkWeights, ProjectionConfig};
use crate::train::TrainConfig;

const XEMB_MAGIC: &[u8; 4] = b"XEMB";
const XCKP_MAGIC: &[u8; 4] = b"XCKP";
const FORMAT_VERSION: u32 = 1;

/// A dense matrix of row-indexed embedding vectors. Stored as f32 on disk,
/// widened to f64 for computation.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub data: Mat,
}

impl EmbeddingSet {
    pub fn new(data: Mat) -> Self {
        EmbeddingSet { data }
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    pub fn count(&self) -> usize {
        self.data.rows()
    }
}

/// One manifest line: which embedding row it names, its id and language,
/// and (for text records) the paired image id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub row: usize,
    pub id: String,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

/// A text row joined to its positive image row.
#[derive(Debug, Clone, PartialEq)]
pub struct Pair {
    pub text_row: usize,
    pub image_row: usize,
    pub lang: String,
}

/// Joined text/image embeddings plus the pair list used for training.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub text_embeddings: EmbeddingSet,
    pub image_embeddings: EmbeddingSet,
    pub pairs: Vec<Pair>,
    /// text_row -> positive image id (for in-batch negative exclusion).
    pub image_id_of: HashMap<usize, String>,
}

/// Serialized model: weights plus the full configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ProjectionConfig,
    pub loss_config: LossConfig,
    pub train_config: TrainConfig,
    pub weights: NetworkWeights,
    pub epochs_trained: u64,
    pub seed: u64,
}

fn u32_le(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<EmbeddingSet> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    if bytes.len() >= 4 && &bytes[0..4] != XEMB_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "XEMB",
        });
    }
    if bytes.len() < 16 {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected: 16,
            found: bytes.len() as u64,
        });
    }
    let version = u32_le(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let dim = u32_le(&bytes, 8) as usize;
    let count = u32_le(&bytes, 12) as usize;
    if dim == 0 && count > 0 {
        return Err(Error::Validation(format!(
            "{}: dim must be positive when count > 0",
            path.display()
        )));
    }
    let expected = 16 + 4 * (dim as u64) * (count as u64);
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }

    let mut data = Mat::zeros(count, dim);
    let out = data.as_mut_slice();
    for (idx, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        let value = f32::from_le_bytes(chunk.try_into().unwrap());
        if !value.is_finite() {
            return Err(Error::NonFinite {
                path: path.into(),
                row: idx / dim,
                col: idx % dim,
            });
        }
        out[idx] = value as f64;
    }
    Ok(EmbeddingSet::new(data))
}

pub fn write_embedding_file(set: &EmbeddingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(idx) = set.data.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.into(),
            row: idx / set.dim().max(1),
            col: idx % set.dim().max(1),
        });
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(XEMB_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(set.dim() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(set.count() as u32).to_le_bytes()).map_err(io_err)?;
    for &v in set.data.as_slice() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

/// Records in file order. Blank lines are skipped; malformed lines and
/// duplicate ids report their 1-based line number.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                path: path.into(),
                line: line_no,
                msg: e.to_string(),
            })?;
        if seen.insert(record.id.clone(), line_no).is_some() {
            return Err(Error::DuplicateId {
                path: path.into(),
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(records: &[ManifestRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Validation(format!("cannot serialize record {:?}: {e}", record.id)))?;
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Every record's row must index into a set with `count` rows.
pub fn check_rows(records: &[ManifestRecord], count: usize) -> Result<()> {
    for record in records {
        if record.row >= count {
            return Err(Error::RowOutOfRange {
                id: record.id.clone(),
                row: record.row,
                count,
            });
        }
    }
    Ok(())
}

/// Join text records to image rows through their image_id. With a language
/// filter, pairs contain exactly the text records whose lang matches, in
/// manifest order. A single image row may back multiple pairs.
pub fn join_pairs(
    text_embeddings: EmbeddingSet,
    text_manifest: &[ManifestRecord],
    image_embeddings: EmbeddingSet,
    image_manifest: &[ManifestRecord],
    lang_filter: Option<&str>,
) -> Result<PairedDataset> {
    check_rows(text_manifest, text_embeddings.count())?;
    check_rows(image_manifest, image_embeddings.count())?;

    let mut image_row: HashMap<&str, usize> = HashMap::new();
    for record in image_manifest {
        if image_row.insert(&record.id, record.row).is_some() {
            return Err(Error::Validation(format!(
                "duplicate image id {:?} in image manifest",
                record.id
            )));
        }
    }

    let mut pairs = Vec::new();
    let mut image_id_of = HashMap::new();
    for record in text_manifest {
        let image_id = record.image_id.as_deref().ok_or_else(|| Error::MissingImageId {
            text_id: record.id.clone(),
        })?;
        let &img_row = image_row.get(image_id).ok_or_else(|| Error::UnresolvedImageId {
            text_id: record.id.clone(),
            image_id: image_id.to_string(),
        })?;
        if lang_filter.is_some_and(|l| l != record.lang) {
            continue;
        }
        pairs.push(Pair {
            text_row: record.row,
            image_row: img_row,
            lang: record.lang.clone(),
        });
        image_id_of.insert(record.row, image_id.to_string());
    }

    Ok(PairedDataset {
        text_embeddings,
        image_embeddings,
        pairs,
        image_id_of,
    })
}

#[derive(Serialize, Deserialize)]
struct LayerShape {
    out_dim: usize,
    in_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: ProjectionConfig,
    loss_config: LossConfig,
    train_config: TrainConfig,
    epochs_trained: u64,
    seed: u64,
    layers: Vec<LayerShape>,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ckpt.weights.matches_config(&ckpt.config)?;

    let header = CheckpointHeader {
        config: ckpt.config.clone(),
        loss_config: ckpt.loss_config.clone(),
        train_config: ckpt.train_config.clone(),
        epochs_trained: ckpt.epochs_trained,
        seed: ckpt.seed,
        layers: ckpt
            .weights
            .layers
            .iter()
            .map(|l| LayerShape {
                out_dim: l.out_dim(),
                in_dim: l.in_dim(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Validation(format!("cannot serialize checkpoint header: {e}")))?;

    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path, e);
    w.write_all(XCKP_MAGIC).map_err(io_err)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for layer in &ckpt.weights.layers {
        for &v in layer.weight.as_slice() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
        for &v in &layer.bias {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    if bytes.len() >= 4 && &bytes[0..4] != XCKP_MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: "XCKP",
        });
    }
    if bytes.len() < 12 {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected: 12,
            found: bytes.len() as u64,
        });
    }
    let version = u32_le(&bytes, 4);
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            path: path.into(),
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let header_len = u32_le(&bytes, 8) as u64;
    if (bytes.len() as u64) < 12 + header_len {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected: 12 + header_len,
            found: bytes.len() as u64,
        });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + header_len as usize])
        .map_err(|e| Error::Validation(format!("{}: bad checkpoint header: {e}", path.display())))?;

    let n_params: u64 = header
        .layers
        .iter()
        .map(|s| (s.out_dim as u64) * (s.in_dim as u64) + s.out_dim as u64)
        .sum();
    let expected = 12 + header_len + 4 * n_params;
    if bytes.len() as u64 != expected {
        return Err(Error::SizeMismatch {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }

    let mut offset = (12 + header_len) as usize;
    let mut next = |n: usize, what: &str| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let value = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            if !value.is_finite() {
                return Err(Error::Validation(format!(
                    "{}: non-finite value in {what}",
                    path.display()
                )));
            }
            out.push(value as f64);
            offset += 4;
        }
        Ok(out)
    };

    let mut layers = Vec::with_capacity(header.layers.len());
    for (k, shape) in header.layers.iter().enumerate() {
        let weight = next(shape.out_dim * shape.in_dim, &format!("layer {k} weights"))?;
        let bias = next(shape.out_dim, &format!("layer {k} bias"))?;
        layers.push(Layer {
            weight: Mat::from_vec(shape.out_dim, shape.in_dim, weight),
            bias,
        });
    }
    let weights = NetworkWeights { layers };
    weights.matches_config(&header.config)?;

    Ok(Checkpoint {
        config: header.config,
        loss_config: header.loss_config,
        train_config: header.train_config,
        weights,
        epochs_trained: header.epochs_trained,
        seed: header.seed,
    })
}
