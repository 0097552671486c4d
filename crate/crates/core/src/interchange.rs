//! On-disk formats: the `LTNS` tensor file, PGM images, keypoint and
//! metrics text, and the feature-export manifest.
//!
//! Tensor file layout, all integers little-endian:
//!
//! ```text
//! "LTNS" | version u32 = 1 | dtype u8 (1 = f32, 2 = f64) | rank u8
//!        | dims: rank x u32 | payload | crc32(payload) u32
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::decoder::{EmbeddingSource, ImageEmbedding};
use crate::error::{LensError, Result};
use crate::keypoint::KeypointSet;
use crate::numerics::{grid_dims, Tensor};
use crate::seg_head::HeadInput;
use crate::trainer::StepRecord;

pub const MAGIC: [u8; 4] = *b"LTNS";
pub const VERSION: u32 = 1;
const HEADER: usize = 4 + 4 + 1 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn code(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

pub fn encode_tensor(t: &Tensor, precision: Precision) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER + 4 * t.rank() + t.len() * precision.width() + 4);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(precision.code());
    out.push(t.rank() as u8);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let start = out.len();
    for &v in t.data() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out[start..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn truncated(what: &str) -> LensError {
    LensError::Checksum(format!("file truncated in {what}"))
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Decodes a tensor file, widening `f32` payloads to `f64`.
pub fn decode_tensor(bytes: &[u8]) -> Result<(Tensor, Precision)> {
    if bytes.len() < 4 {
        return Err(truncated("magic"));
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(LensError::BadMagic(magic));
    }
    if bytes.len() < HEADER {
        return Err(truncated("header"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(LensError::UnsupportedVersion(version));
    }
    let precision = Precision::from_code(bytes[8])
        .ok_or_else(|| LensError::Format(format!("unknown dtype code {}", bytes[8])))?;
    let rank = bytes[9] as usize;
    if rank == 0 {
        return Err(LensError::Format("rank 0 tensors are not allowed".into()));
    }
    if rank > 3 {
        return Err(LensError::Format(format!("rank {rank} exceeds the supported 3")));
    }
    let dims_end = HEADER + 4 * rank;
    if bytes.len() < dims_end {
        return Err(truncated("dims"));
    }
    let dims: Vec<usize> = (0..rank).map(|i| u32_at(bytes, HEADER + 4 * i) as usize).collect();
    if dims.contains(&0) {
        return Err(LensError::Format(format!("zero extent in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| LensError::Format(format!("dims {dims:?} overflow")))?;
    let payload_len = count
        .checked_mul(precision.width())
        .ok_or_else(|| LensError::Format(format!("dims {dims:?} overflow")))?;
    let expected = dims_end + payload_len + 4;
    if bytes.len() < expected {
        return Err(truncated("payload"));
    }
    if bytes.len() > expected {
        return Err(LensError::Format(format!(
            "{} trailing bytes after checksum",
            bytes.len() - expected
        )));
    }
    let payload = &bytes[dims_end..dims_end + payload_len];
    let stored = u32_at(bytes, dims_end + payload_len);
    let actual = crc32fast::hash(payload);
    if stored != actual {
        return Err(LensError::Checksum(format!(
            "stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let data = match precision {
        Precision::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Precision::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok((Tensor::new(dims, data)?, precision))
}

pub fn write_tensor(path: &Path, t: &Tensor, precision: Precision) -> Result<()> {
    std::fs::write(path, encode_tensor(t, precision))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Ok(decode_tensor(&std::fs::read(path)?)?.0)
}

/// Binary greyscale PGM bytes; values are clamped to `[0, 1]` and rounded
/// half up to `0..=255`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let (h, w, c) = grid_dims(map);
    if c != 1 {
        return Err(LensError::shape(format!("PGM needs a single channel, got {:?}", map.dims())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(map.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    (255.0 * v.clamp(0.0, 1.0) + 0.5).floor() as u8
}

pub fn export_pgm(map: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_pgm(map)?)?;
    Ok(())
}

/// One `x y score` line per keypoint, six decimals.
pub fn format_keypoints(points: &KeypointSet) -> String {
    let mut s = String::new();
    for p in &points.points {
        let _ = writeln!(s, "{:.6} {:.6} {:.6}", p.x, p.y, p.score);
    }
    s
}

pub const METRICS_HEADER: &str = "step,total,attn,seg,dice,bce";

pub fn metrics_csv(records: &[StepRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let l = &r.loss;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.step, l.total, l.attn, l.seg, l.dice, l.bce);
    }
    s
}

pub const SEED_VAR: &str = "LENS_SEED";

/// Replaces `config.seed` with `LENS_SEED` when that variable is set.
pub fn apply_seed_override(config: &mut RunConfig) -> Result<()> {
    if let Ok(text) = std::env::var(SEED_VAR) {
        config.seed = text
            .trim()
            .parse()
            .map_err(|_| LensError::InvalidArgument(format!("{SEED_VAR}={text:?} is not a seed")))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestFile {
    pub role: String,
    pub path: String,
    pub dims: Vec<usize>,
}

/// Description of a feature export written by the extraction tool.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub model: String,
    pub layer: usize,
    #[serde(rename = "L_i")]
    pub image_len: usize,
    #[serde(rename = "L_t")]
    pub text_len: usize,
    pub d: usize,
    pub files: Vec<ManifestFile>,
    /// Vision grid; inferred as square from `L_i` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<String>,
}

pub const ROLE_IMAGE: &str = "image_features";
pub const ROLE_TEXT: &str = "text_features";
pub const ROLE_EMBEDDING: &str = "sam_embedding";
pub const ROLE_MASK: &str = "gt_mask";

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedExport {
    pub manifest: ExportManifest,
    pub input: HeadInput,
    /// `h_e x w_e x d_s`, when exported.
    pub embedding: Option<ImageEmbedding>,
    pub mask: Option<Tensor>,
}

impl ExportManifest {
    pub fn grid(&self) -> Result<(usize, usize)> {
        if let Some(g) = self.grid {
            if g.0 * g.1 != self.image_len {
                return Err(LensError::Manifest(format!("grid {g:?} does not hold L_i = {}", self.image_len)));
            }
            return Ok(g);
        }
        let side = (self.image_len as f64).sqrt().round() as usize;
        if side * side != self.image_len {
            return Err(LensError::Manifest(format!(
                "L_i = {} is not square and no grid is given",
                self.image_len
            )));
        }
        Ok((side, side))
    }

    fn file(&self, role: &str) -> Option<&ManifestFile> {
        self.files.iter().find(|f| f.role == role)
    }
}

/// Reads `manifest.json` (or the given file) and every tensor it lists,
/// checking declared dims against the files and the token counts.
pub fn load_export(path: &Path) -> Result<LoadedExport> {
    let manifest_path: PathBuf = if path.is_dir() {
        path.join("manifest.json")
    } else {
        path.to_path_buf()
    };
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let manifest: ExportManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
    let load = |role: &str| -> Result<Option<Tensor>> {
        let Some(f) = manifest.file(role) else { return Ok(None) };
        let t = read_tensor(&base.join(&f.path))?;
        if t.dims() != f.dims.as_slice() {
            return Err(LensError::Manifest(format!(
                "{role}: file dims {:?}, manifest dims {:?}",
                t.dims(),
                f.dims
            )));
        }
        Ok(Some(t))
    };
    let need = |role: &str| -> Result<Tensor> {
        load(role)?.ok_or_else(|| LensError::Manifest(format!("missing {role} entry")))
    };
    let image = need(ROLE_IMAGE)?.as_matrix();
    let text = need(ROLE_TEXT)?.as_matrix();
    if image.rows() != manifest.image_len || image.cols() != manifest.d {
        return Err(LensError::Manifest(format!(
            "image features {:?} vs L_i = {}, d = {}",
            image.dims(),
            manifest.image_len,
            manifest.d
        )));
    }
    if text.rows() != manifest.text_len || text.cols() != manifest.d {
        return Err(LensError::Manifest(format!(
            "text features {:?} vs L_t = {}, d = {}",
            text.dims(),
            manifest.text_len,
            manifest.d
        )));
    }
    let input = HeadInput::new(image, text, manifest.grid()?)?;
    let embedding = load(ROLE_EMBEDDING)?
        .map(|t| ImageEmbedding::from_field(t, EmbeddingSource::File))
        .transpose()?;
    let mask = load(ROLE_MASK)?;
    Ok(LoadedExport {
        manifest,
        input,
        embedding,
        mask,
    })
}
