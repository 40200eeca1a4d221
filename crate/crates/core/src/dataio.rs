//! Bit-exact file formats: embedding files, bank checkpoints, network
//! checkpoints, names manifests, labels, and metrics streams.
//!
//! The embedding container is fixed little-endian with no padding:
//!
//! ```text
//! magic "LGDE" (4) | version u16 (=1) | rows u32 | cols u32 | dtype u8
//! | payload (rows*cols values, row-major) | crc32(payload) u32
//! ```
//!
//! dtype 0 means f32: values narrow from the in-memory f64 on write and
//! widen back on read, the only precision loss in the system. Writers stage
//! into a temp file and rename atomically; identical inputs produce
//! byte-identical files on every platform.

use std::io::Write;
use std::path::Path;

use crate::banks::{TextualSemanticsBank, VisualSemanticsBank};
use crate::error::{Error, FormatErrorKind, Result};
use crate::numerics::EmbeddingMatrix;
use crate::student::{Linear, ProjectionHead, Schedule, StudentNet};

const MAGIC: &[u8; 4] = b"LGDE";
const FORMAT_VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Serializes a matrix into the embedding container.
pub fn encode_embeddings(matrix: &EmbeddingMatrix) -> Result<Vec<u8>> {
    if let Some((i, j)) = matrix.find_non_finite() {
        return Err(Error::NonFiniteInput {
            op: "encode_embeddings",
            row: i,
            col: j,
        });
    }
    let (rows, cols) = matrix.shape();
    let mut payload = Vec::with_capacity(rows * cols * 4);
    for v in matrix.data() {
        payload.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(4 + 2 + 4 + 4 + 1 + payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    out.push(DTYPE_F32);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Parses the embedding container; `path` is only used in error reporting.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<EmbeddingMatrix> {
    let header_len = 4 + 2 + 4 + 4 + 1;
    if bytes.len() < header_len {
        return Err(Error::format(path, FormatErrorKind::Truncated));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(path, FormatErrorKind::BadMagic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::format(path, FormatErrorKind::UnsupportedVersion(version)));
    }
    let rows = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let cols = u32::from_le_bytes([bytes[10], bytes[11], bytes[12], bytes[13]]) as usize;
    let dtype = bytes[14];
    if dtype != DTYPE_F32 {
        return Err(Error::format(path, FormatErrorKind::BadDtype(dtype)));
    }
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(path, FormatErrorKind::Truncated))?;
    if bytes.len() != header_len + payload_len + 4 {
        return Err(Error::format(path, FormatErrorKind::Truncated));
    }
    let payload = &bytes[header_len..header_len + payload_len];
    let stored_crc = u32::from_le_bytes([
        bytes[header_len + payload_len],
        bytes[header_len + payload_len + 1],
        bytes[header_len + payload_len + 2],
        bytes[header_len + payload_len + 3],
    ]);
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::format(
            path,
            FormatErrorKind::ChecksumMismatch {
                expected: stored_crc,
                found: crc,
            },
        ));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    EmbeddingMatrix::new(rows, cols, data)
}

/// Writes `bytes` to `path` via a temp file in the same directory plus an
/// atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes a matrix file (f64 values narrow to f32).
pub fn write_embeddings(path: impl AsRef<Path>, matrix: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    atomic_write(path, &encode_embeddings(matrix)?)
}

/// Reads a matrix file, widening the payload back to f64.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Reads a names manifest: UTF-8, one name per line, order-significant.
pub fn read_names(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

pub fn write_names(path: impl AsRef<Path>, names: &[String]) -> Result<()> {
    let mut out = String::new();
    for n in names {
        out.push_str(n);
        out.push('\n');
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

/// Evaluation labels, one decimal index per line.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            l.trim().parse::<usize>().map_err(|_| {
                Error::Config(format!("{}: line {} is not a label index", path.display(), i + 1))
            })
        })
        .collect()
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    atomic_write(path.as_ref(), out.as_bytes())
}

/// Loads a textual bank from an embedding file (one anchor per row) and a
/// names manifest. Rows are normalized on load; a deviation above 1e-3 from
/// unit norm (typical of raw encoder exports) is logged as a warning.
pub fn load_tsb(
    embeddings_path: impl AsRef<Path>,
    names_path: impl AsRef<Path>,
) -> Result<TextualSemanticsBank> {
    let embeddings_path = embeddings_path.as_ref();
    let rows = read_embeddings(embeddings_path)?;
    let names = read_names(names_path.as_ref())?;
    if names.len() != rows.rows() {
        return Err(Error::CountMismatch {
            what: "category name",
            left: names.len(),
            right: rows.rows(),
        });
    }
    for i in 0..rows.rows() {
        let norm = rows.row_norm(i);
        if (norm - 1.0).abs() > 1e-3 {
            log::warn!(
                "{}: anchor row {i} has norm {norm:.6}; normalizing on load",
                embeddings_path.display()
            );
        }
    }
    TextualSemanticsBank::from_anchor_rows(
        &rows,
        names,
        embeddings_path.display().to_string(),
    )
}

/// Writes a textual bank: anchors (one per row) plus the names manifest.
pub fn save_tsb(
    tsb: &TextualSemanticsBank,
    embeddings_path: impl AsRef<Path>,
    names_path: impl AsRef<Path>,
) -> Result<()> {
    write_embeddings(embeddings_path, &tsb.anchor_rows())?;
    write_names(names_path, tsb.names())
}

/// JSON sidecar carried next to a visual-bank checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VsbSidecar {
    pub format_version: u32,
    pub category_names: Vec<String>,
    pub initialized: Vec<bool>,
    pub momentum: f64,
}

/// Saves a visual bank: anchors as rows plus the JSON sidecar.
pub fn save_vsb(
    vsb: &VisualSemanticsBank,
    names: &[String],
    embeddings_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<()> {
    write_embeddings(embeddings_path, &vsb.anchors().transpose())?;
    let sidecar = VsbSidecar {
        format_version: 1,
        category_names: names.to_vec(),
        initialized: vsb.initialized().to_vec(),
        momentum: vsb.momentum(),
    };
    write_json(sidecar_path.as_ref(), &sidecar)
}

/// Loads a visual bank and its category names. Columns that were flagged
/// initialized keep their f32-quantized values, re-normalized to unit length.
pub fn load_vsb(
    embeddings_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<(VisualSemanticsBank, Vec<String>)> {
    let rows = read_embeddings(embeddings_path.as_ref())?;
    let sidecar: VsbSidecar = read_json(sidecar_path.as_ref())?;
    if sidecar.category_names.len() != rows.rows() {
        return Err(Error::CountMismatch {
            what: "category name",
            left: sidecar.category_names.len(),
            right: rows.rows(),
        });
    }
    let mut anchors = rows.transpose();
    for j in 0..anchors.cols() {
        if sidecar.initialized[j] {
            let mut col = anchors.column(j);
            crate::numerics::normalize_in_place(&mut col);
            for (i, v) in col.iter().enumerate() {
                anchors.set(i, j, *v);
            }
        }
    }
    let vsb = VisualSemanticsBank::from_parts(anchors, sidecar.initialized, sidecar.momentum)?;
    Ok((vsb, sidecar.category_names))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
    text.push('\n');
    atomic_write(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// RNG position recorded in checkpoints: algorithm, seed, stream tag, and the
/// generator's word position (as a decimal string; it is a 128-bit counter).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    pub word_pos: String,
}

/// JSON manifest stored next to network parameter files.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkManifest {
    pub format_version: u32,
    /// (out_dim, in_dim) per layer.
    pub layer_dims: Vec<(usize, usize)>,
    /// Whether the network normalizes its output rows (student) or not
    /// (projection head).
    pub normalize_output: bool,
    pub step_count: u64,
    pub schedule: Option<Schedule>,
    /// Epoch fraction in [0, 1] the checkpoint was taken at.
    pub schedule_position: f64,
    pub rng: Option<RngState>,
}

fn params_to_matrix(flat: &[f64]) -> Result<EmbeddingMatrix> {
    EmbeddingMatrix::new(1, flat.len(), flat.to_vec())
}

fn layers_from_flat(layer_dims: &[(usize, usize)], flat: &[f64]) -> Result<Vec<Linear>> {
    let expected: usize = layer_dims.iter().map(|(o, i)| o * i + o).sum();
    if flat.len() != expected {
        return Err(Error::CountMismatch {
            what: "parameter",
            left: flat.len(),
            right: expected,
        });
    }
    let mut layers = Vec::with_capacity(layer_dims.len());
    let mut off = 0;
    for &(out_dim, in_dim) in layer_dims {
        let w_len = out_dim * in_dim;
        let weight = EmbeddingMatrix::new(out_dim, in_dim, flat[off..off + w_len].to_vec())?;
        off += w_len;
        let bias = flat[off..off + out_dim].to_vec();
        off += out_dim;
        layers.push(Linear::new(weight, bias)?);
    }
    Ok(layers)
}

/// Saves student parameters (f32 on disk) plus the JSON manifest.
pub fn save_student(
    student: &StudentNet,
    params_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
    step_count: u64,
    schedule: Option<Schedule>,
    schedule_position: f64,
    rng: Option<RngState>,
) -> Result<()> {
    write_embeddings(params_path, &params_to_matrix(&student.flatten_params())?)?;
    let manifest = NetworkManifest {
        format_version: 1,
        layer_dims: student.layer_dims(),
        normalize_output: true,
        step_count,
        schedule,
        schedule_position,
        rng,
    };
    write_json(manifest_path.as_ref(), &manifest)
}

pub fn load_student(
    params_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<(StudentNet, NetworkManifest)> {
    let manifest: NetworkManifest = read_json(manifest_path.as_ref())?;
    if !manifest.normalize_output {
        return Err(Error::Config(
            "manifest describes a projection head, not a student network".into(),
        ));
    }
    let flat = read_embeddings(params_path)?;
    let layers = layers_from_flat(&manifest.layer_dims, flat.data())?;
    Ok((StudentNet::from_layers(layers)?, manifest))
}

pub fn save_projection(
    projection: &ProjectionHead,
    params_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
    step_count: u64,
) -> Result<()> {
    write_embeddings(
        params_path,
        &params_to_matrix(&projection.flatten_params())?,
    )?;
    let manifest = NetworkManifest {
        format_version: 1,
        layer_dims: projection.layer_dims(),
        normalize_output: false,
        step_count,
        schedule: None,
        schedule_position: 0.0,
        rng: None,
    };
    write_json(manifest_path.as_ref(), &manifest)
}

pub fn load_projection(
    params_path: impl AsRef<Path>,
    manifest_path: impl AsRef<Path>,
) -> Result<(ProjectionHead, NetworkManifest)> {
    let manifest: NetworkManifest = read_json(manifest_path.as_ref())?;
    if manifest.normalize_output {
        return Err(Error::Config(
            "manifest describes a student network, not a projection head".into(),
        ));
    }
    let flat = read_embeddings(params_path)?;
    let layers = layers_from_flat(&manifest.layer_dims, flat.data())?;
    Ok((ProjectionHead::from_layers(layers)?, manifest))
}

/// One metrics record. Step rows stream to JSON-lines; epoch summaries go to
/// CSV with the fixed header
/// `step,epoch,lr,loss_total,loss_visual,loss_textual,vsb_initialized_count,zeroshot_acc`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_visual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_textual: Option<f64>,
    pub vsb_initialized_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub zeroshot_acc: Option<f64>,
}

pub const METRICS_CSV_HEADER: &str =
    "step,epoch,lr,loss_total,loss_visual,loss_textual,vsb_initialized_count,zeroshot_acc";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.lr,
            self.loss_total,
            opt_field(self.loss_visual),
            opt_field(self.loss_textual),
            self.vsb_initialized_count,
            opt_field(self.zeroshot_acc),
        )
    }
}

/// File-backed metrics sink: every step row to JSON-lines, every epoch
/// summary to CSV.
pub struct MetricsWriter {
    csv: std::io::BufWriter<std::fs::File>,
    jsonl: std::io::BufWriter<std::fs::File>,
    csv_path: std::path::PathBuf,
    jsonl_path: std::path::PathBuf,
}

impl MetricsWriter {
    pub fn create(csv_path: impl AsRef<Path>, jsonl_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref().to_path_buf();
        let jsonl_path = jsonl_path.as_ref().to_path_buf();
        let mut csv = std::io::BufWriter::new(
            std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?,
        );
        writeln!(csv, "{METRICS_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
        let jsonl = std::io::BufWriter::new(
            std::fs::File::create(&jsonl_path).map_err(|e| Error::io(&jsonl_path, e))?,
        );
        Ok(Self {
            csv,
            jsonl,
            csv_path,
            jsonl_path,
        })
    }

    pub fn write_step(&mut self, row: &MetricsRow) -> Result<()> {
        let line = serde_json::to_string(row).map_err(|e| Error::Json {
            path: self.jsonl_path.clone(),
            source: e,
        })?;
        writeln!(self.jsonl, "{line}").map_err(|e| Error::io(&self.jsonl_path, e))
    }

    pub fn write_epoch(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.csv, "{}", row.to_csv_line()).map_err(|e| Error::io(&self.csv_path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.csv.flush().map_err(|e| Error::io(&self.csv_path, e))?;
        self.jsonl
            .flush()
            .map_err(|e| Error::io(&self.jsonl_path, e))
    }
}
