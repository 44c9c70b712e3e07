//! On-disk formats.
//!
//! Embedding file (`.cape`), all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "CAPE"
//! 4       4           version (u32) = 1
//! 8       4           n_rows (u32)
//! 12      4           dim (u32)
//! 16      1           flags; bit 0 = labels present, other bits must be 0
//! 17      4*n*dim     rows, f32, row-major
//! ...     4*n         labels, u32 (only if flags bit 0)
//! ```
//!
//! Checkpoint (`.capc`) plus a JSON sidecar at `<path>.json`:
//!
//! ```text
//! 0       4           magic "CAPC"
//! 4       4           version (u32) = 1
//! 8       4           Y (u32)
//! 12      4           K (u32)
//! 16      4           D (u32)
//! 20      4           tau (f32)
//! 24      4           flags (u32), reserved, must be 0
//! 28      4*Y*K*D     W, class-major, then prompt, then feature
//! ...     4*Y*K       alpha
//! ```
//!
//! Prompt banks are JSON objects mapping class name to a list of prompts;
//! key order defines class indices.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{CapelError, Result};
use crate::model::CapelModel;
use crate::tensor::{ClassIndex, EmbeddingMatrix};
use crate::trainer::TrainConfig;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CAPE";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CAPC";
pub const FORMAT_VERSION: u32 = 1;

const EMBEDDING_HEADER_LEN: usize = 17;
const CHECKPOINT_HEADER_LEN: usize = 28;
const FLAG_LABELS: u8 = 0b1;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| CapelError::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CapelError::io(path, e))
}

/// Little-endian reader over a byte slice. Callers check lengths up front.
struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Cursor { bytes, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().unwrap();
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }

    fn f32s(&mut self, n: usize) -> Vec<f32> {
        (0..n).map(|_| self.f32()).collect()
    }
}

fn dim_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| CapelError::DimMismatch(format!("{what} = {value} exceeds u32")))
}

fn check_magic(found: [u8; 4], expected: [u8; 4]) -> Result<()> {
    if found != expected {
        return Err(CapelError::BadMagic { expected, found });
    }
    Ok(())
}

fn check_version(found: u32) -> Result<()> {
    if found != FORMAT_VERSION {
        return Err(CapelError::BadVersion {
            found,
            supported: FORMAT_VERSION,
        });
    }
    Ok(())
}

fn check_size(expected: u64, actual: usize) -> Result<()> {
    if expected != actual as u64 {
        return Err(CapelError::SizeMismatch {
            expected,
            actual: actual as u64,
        });
    }
    Ok(())
}

/// Serializes an embedding file. Rows must already be unit-norm so that the
/// reader accepts everything the writer produces.
pub fn encode_embeddings(matrix: &EmbeddingMatrix, labels: Option<&[u32]>) -> Result<Vec<u8>> {
    if let Some(l) = labels {
        if l.len() != matrix.rows() {
            return Err(CapelError::LengthMismatch {
                left: l.len(),
                right: matrix.rows(),
            });
        }
    }
    matrix.validate_unit_rows()?;
    let n = matrix.rows();
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * n * (matrix.dim() + 1));
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(n, "n_rows")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(matrix.dim(), "dim")?.to_le_bytes());
    out.push(if labels.is_some() { FLAG_LABELS } else { 0 });
    for v in matrix.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(l) = labels {
        for v in l {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses and validates an embedding file image.
pub fn decode_embeddings(bytes: &[u8]) -> Result<(EmbeddingMatrix, Option<Vec<u32>>)> {
    if bytes.len() < EMBEDDING_HEADER_LEN {
        return Err(CapelError::SizeMismatch {
            expected: EMBEDDING_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut c = Cursor::new(bytes);
    check_magic(c.take(), EMBEDDING_MAGIC)?;
    check_version(c.u32())?;
    let n = c.u32() as u64;
    let dim = c.u32() as u64;
    let flags = c.u8();
    if flags & !FLAG_LABELS != 0 {
        return Err(CapelError::BadFlags(flags as u32));
    }
    let has_labels = flags & FLAG_LABELS != 0;
    let expected = EMBEDDING_HEADER_LEN as u64 + 4 * n * dim + if has_labels { 4 * n } else { 0 };
    check_size(expected, bytes.len())?;
    if dim == 0 {
        return Err(CapelError::DimMismatch("embedding dimension is zero".into()));
    }
    let (n, dim) = (n as usize, dim as usize);
    let matrix = EmbeddingMatrix::new(n, dim, c.f32s(n * dim))?;
    matrix.validate_unit_rows()?;
    let labels = has_labels.then(|| (0..n).map(|_| c.u32()).collect());
    Ok((matrix, labels))
}

pub fn write_embeddings(path: impl AsRef<Path>, matrix: &EmbeddingMatrix, labels: Option<&[u32]>) -> Result<()> {
    write_file(path.as_ref(), &encode_embeddings(matrix, labels)?)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<(EmbeddingMatrix, Option<Vec<u32>>)> {
    decode_embeddings(&read_file(path.as_ref())?)
}

/// Checks every label against the class count and widens to `usize`.
pub fn validate_labels(labels: &[u32], classes: usize) -> Result<Vec<usize>> {
    labels
        .iter()
        .enumerate()
        .map(|(row, &l)| {
            let label = l as usize;
            if label >= classes {
                Err(CapelError::LabelOutOfRange { row, label, classes })
            } else {
                Ok(label)
            }
        })
        .collect()
}

/// Class name to ordered prompts, uniform prompt count per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBank {
    entries: IndexMap<String, Vec<String>>,
}

impl PromptBank {
    pub fn new(entries: IndexMap<String, Vec<String>>) -> Result<Self> {
        let mut expected = None;
        for (class, prompts) in &entries {
            let k = *expected.get_or_insert(prompts.len());
            if k == 0 {
                return Err(CapelError::EmptyBank);
            }
            if prompts.len() != k {
                return Err(CapelError::RaggedBank {
                    class: class.clone(),
                    expected: k,
                    found: prompts.len(),
                });
            }
            if let Some(index) = prompts.iter().position(|p| p.trim().is_empty()) {
                return Err(CapelError::EmptyPrompt {
                    class: class.clone(),
                    index,
                });
            }
        }
        if expected.is_none() {
            return Err(CapelError::EmptyBank);
        }
        Ok(PromptBank { entries })
    }

    pub fn parse(json: &str) -> Result<Self> {
        let entries: IndexMap<String, Vec<String>> =
            serde_json::from_str(json).map_err(|e| CapelError::Parse(e.to_string()))?;
        Self::new(entries)
    }

    pub fn num_classes(&self) -> usize {
        self.entries.len()
    }

    pub fn prompts_per_class(&self) -> usize {
        self.entries.values().next().map_or(0, Vec::len)
    }

    pub fn class_index(&self) -> ClassIndex {
        ClassIndex::new(self.entries.keys().cloned().collect()).expect("map keys are unique")
    }

    pub fn prompts(&self, class: &str) -> Option<&[String]> {
        self.entries.get(class).map(Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("string map serializes")
    }
}

pub fn read_prompt_bank(path: impl AsRef<Path>) -> Result<PromptBank> {
    let path = path.as_ref();
    let text = String::from_utf8(read_file(path)?).map_err(|e| CapelError::Parse(format!("{}: {e}", path.display())))?;
    PromptBank::parse(&text)
}

pub fn write_prompt_bank(path: impl AsRef<Path>, bank: &PromptBank) -> Result<()> {
    write_file(path.as_ref(), format!("{}\n", bank.to_json()).as_bytes())
}

/// JSON sidecar stored next to every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub classes: ClassIndex,
    pub num_classes: usize,
    pub num_prompts: usize,
    pub dim: usize,
    pub tau: f32,
    #[serde(default)]
    pub train_config: Option<TrainConfig>,
    /// SHA-256 of the training history JSON, if the model was trained.
    #[serde(default)]
    pub history_digest: Option<String>,
    /// Free-form provenance, e.g. the command line that produced the file.
    #[serde(default)]
    pub provenance: serde_json::Value,
}

impl CheckpointMetadata {
    pub fn for_model(model: &CapelModel) -> Self {
        CheckpointMetadata {
            classes: model.classes().clone(),
            num_classes: model.num_classes(),
            num_prompts: model.num_prompts(),
            dim: model.dim(),
            tau: model.tau(),
            train_config: None,
            history_digest: None,
            provenance: serde_json::Value::Null,
        }
    }
}

/// `<path>.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode_checkpoint(model: &CapelModel) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(CHECKPOINT_HEADER_LEN + 4 * (model.weights().len() + model.alpha().len()));
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(model.num_classes(), "Y")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(model.num_prompts(), "K")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(model.dim(), "D")?.to_le_bytes());
    out.extend_from_slice(&model.tau().to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    for v in model.weights().iter().chain(model.alpha()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Raw checkpoint contents before they are joined with the sidecar.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointBody {
    pub num_classes: usize,
    pub num_prompts: usize,
    pub dim: usize,
    pub tau: f32,
    pub weights: Vec<f32>,
    pub alpha: Vec<f32>,
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointBody> {
    if bytes.len() < CHECKPOINT_HEADER_LEN {
        return Err(CapelError::SizeMismatch {
            expected: CHECKPOINT_HEADER_LEN as u64,
            actual: bytes.len() as u64,
        });
    }
    let mut c = Cursor::new(bytes);
    check_magic(c.take(), CHECKPOINT_MAGIC)?;
    check_version(c.u32())?;
    let (y, k, d) = (c.u32() as u64, c.u32() as u64, c.u32() as u64);
    let tau = c.f32();
    let flags = c.u32();
    if flags != 0 {
        return Err(CapelError::BadFlags(flags));
    }
    check_size(CHECKPOINT_HEADER_LEN as u64 + 4 * (y * k * d + y * k), bytes.len())?;
    let (y, k, d) = (y as usize, k as usize, d as usize);
    let weights = c.f32s(y * k * d);
    let alpha = c.f32s(y * k);
    Ok(CheckpointBody {
        num_classes: y,
        num_prompts: k,
        dim: d,
        tau,
        weights,
        alpha,
    })
}

/// Joins a decoded body with its metadata, checking that they agree.
pub fn assemble_checkpoint(body: CheckpointBody, meta: &CheckpointMetadata) -> Result<CapelModel> {
    let header = (body.num_classes, body.num_prompts, body.dim);
    let declared = (meta.num_classes, meta.num_prompts, meta.dim);
    if header != declared || meta.classes.len() != body.num_classes {
        return Err(CapelError::DimMismatch(format!(
            "header says Y={} K={} D={}, metadata says Y={} K={} D={} with {} class names",
            header.0,
            header.1,
            header.2,
            declared.0,
            declared.1,
            declared.2,
            meta.classes.len()
        )));
    }
    if body.tau.to_bits() != meta.tau.to_bits() {
        return Err(CapelError::DimMismatch(format!(
            "header tau {} disagrees with metadata tau {}",
            body.tau, meta.tau
        )));
    }
    CapelModel::from_parts(
        meta.classes.clone(),
        body.num_prompts,
        body.dim,
        body.weights,
        body.alpha,
        body.tau,
    )
}

/// Writes `path` and its sidecar. The sidecar's dimensions are taken from
/// the model, whatever `meta` says.
pub fn write_checkpoint(path: impl AsRef<Path>, model: &CapelModel, meta: &CheckpointMetadata) -> Result<()> {
    let path = path.as_ref();
    let mut meta = meta.clone();
    let fresh = CheckpointMetadata::for_model(model);
    meta.classes = fresh.classes;
    meta.num_classes = fresh.num_classes;
    meta.num_prompts = fresh.num_prompts;
    meta.dim = fresh.dim;
    meta.tau = fresh.tau;
    write_file(path, &encode_checkpoint(model)?)?;
    let json = serde_json::to_string_pretty(&meta).map_err(|e| CapelError::Parse(e.to_string()))?;
    write_file(&sidecar_path(path), format!("{json}\n").as_bytes())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(CapelModel, CheckpointMetadata)> {
    let path = path.as_ref();
    let body = decode_checkpoint(&read_file(path)?)?;
    let side = sidecar_path(path);
    let meta: CheckpointMetadata = serde_json::from_slice(&read_file(&side)?)
        .map_err(|e| CapelError::Parse(format!("{}: {e}", side.display())))?;
    let model = assemble_checkpoint(body, &meta)?;
    Ok((model, meta))
}

/// Serializes any report as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| CapelError::Parse(e.to_string()))?;
    write_file(path.as_ref(), format!("{json}\n").as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    serde_json::from_slice(&read_file(path)?).map_err(|e| CapelError::Parse(format!("{}: {e}", path.display())))
}

/// Writes an RFC 4180 CSV file from a header and string rows.
pub fn write_csv(path: impl AsRef<Path>, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CapelError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CapelError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CapelError::io(path, io),
        other => CapelError::Parse(format!("{}: {other:?}", path.display())),
    }
}
