//! Named-array archives.
//!
//! Layout: an 8-byte little-endian header length `n`, `n` bytes of UTF-8 JSON, then the
//! raw array bytes. The JSON maps each array name to
//! `{"dtype": "F64", "shape": [...], "data_offsets": [begin, end]}` (offsets relative to
//! the start of the data section, row-major little-endian f64) and carries free-form
//! run information under `"__metadata__"`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Backbone, Extractor, LcnnConfig, MelSpecConfig, TrainingPhase, LCNN_BACKBONE_ID};
use crate::nn::Module;
use crate::similarity::{HeadConfig, SimilarityHead};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub metadata: Map<String, Value>,
    pub arrays: BTreeMap<String, ArrayD<f64>>,
}

impl Archive {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        header.insert(METADATA_KEY.into(), Value::Object(self.metadata.clone()));
        let mut offset = 0usize;
        for (name, a) in &self.arrays {
            let end = offset + 8 * a.len();
            header.insert(
                name.clone(),
                json!({"dtype": "F64", "shape": a.shape(), "data_offsets": [offset, end]}),
            );
            offset = end;
        }
        let header = serde_json::to_vec(&Value::Object(header)).expect("serializable header");
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in self.arrays.values() {
            for v in a.as_standard_layout().iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        let n = bytes
            .get(..8)
            .map(|b| u64::from_le_bytes(b.try_into().expect("8 bytes")) as usize)
            .ok_or_else(|| bad("truncated header length"))?;
        let header_end = 8usize.checked_add(n).filter(|&e| e <= bytes.len());
        let header_end = header_end.ok_or_else(|| bad("truncated header"))?;
        let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])?;
        let data = &bytes[header_end..];
        let mut archive = Archive::default();
        for (name, entry) in header {
            if name == METADATA_KEY {
                archive.metadata = match entry {
                    Value::Object(m) => m,
                    _ => return Err(bad("metadata must be an object")),
                };
                continue;
            }
            let info: ArrayInfo = serde_json::from_value(entry)?;
            if info.dtype != "F64" {
                return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", info.dtype)));
            }
            let [begin, end] = info.data_offsets;
            let count: usize = info.shape.iter().product();
            if end < begin || end > data.len() || end - begin != 8 * count {
                return Err(Error::Checkpoint(format!("{name}: inconsistent data offsets")));
            }
            let values = data[begin..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let a = ArrayD::from_shape_vec(IxDyn(&info.shape), values)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            archive.arrays.insert(name, a);
        }
        Ok(archive)
    }

    /// Writes the archive and returns the SHA-256 of the written bytes.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<String> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(sha256_hex(&bytes))
    }

    /// Reads an archive and the SHA-256 of its bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok((Self::from_bytes(&bytes)?, sha256_hex(&bytes)))
    }

    fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .metadata
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {key}")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("{key}: {e}")))
    }

    /// Copies every state tensor of `module` out of the archive, checking shapes.
    fn restore(&self, prefix: &str, module: &mut dyn Module) -> Result<()> {
        let mut err = None;
        module.visit_state(prefix, &mut |name, dst| {
            if err.is_some() {
                return;
            }
            match self.arrays.get(name) {
                None => err = Some(Error::Checkpoint(format!("missing array {name}"))),
                Some(src) if src.shape() != dst.shape() => {
                    err = Some(Error::Checkpoint(format!(
                        "{name}: shape {:?} does not match {:?}",
                        src.shape(),
                        dst.shape()
                    )))
                }
                Some(src) => dst.assign(src),
            }
        });
        err.map_or(Ok(()), Err)
    }
}

#[derive(Deserialize)]
struct ArrayInfo {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_state(prefix: &str, module: &mut dyn Module) -> BTreeMap<String, ArrayD<f64>> {
    let mut arrays = BTreeMap::new();
    module.visit_state(prefix, &mut |name, a| {
        arrays.insert(name.to_string(), a.clone());
    });
    arrays
}

/// Hash of a module's full state (names, shapes and exact values).
pub fn state_hash(module: &mut dyn Module) -> String {
    let mut h = Sha256::new();
    module.visit_state("", &mut |name, a| {
        h.update(name.as_bytes());
        for d in a.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in a.iter() {
            h.update(v.to_le_bytes());
        }
    });
    hex::encode(h.finalize())
}

/// Header fields of an extractor archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorMeta {
    pub backbone_id: String,
    pub embedding_dim: usize,
    pub n_classes: usize,
    pub class_labels: Vec<usize>,
    pub mel: MelSpecConfig,
    pub lcnn: LcnnConfig,
    pub phase: TrainingPhase,
    pub segment_len: usize,
}

impl ExtractorMeta {
    pub fn of(extractor: &Extractor) -> Self {
        Self {
            backbone_id: LCNN_BACKBONE_ID.to_string(),
            embedding_dim: extractor.net.embedding_dim(),
            n_classes: extractor.class_labels.len(),
            class_labels: extractor.class_labels.clone(),
            mel: extractor.frontend.config().clone(),
            lcnn: extractor.net.config().clone(),
            phase: extractor.phase,
            segment_len: extractor.segment_len,
        }
    }
}

fn to_metadata<T: Serialize>(value: &T) -> Map<String, Value> {
    match serde_json::to_value(value).expect("serializable") {
        Value::Object(m) => m,
        _ => unreachable!("struct serializes to an object"),
    }
}

pub fn extractor_archive(extractor: &Extractor) -> Archive {
    let mut e = extractor.clone();
    let mut metadata = to_metadata(&ExtractorMeta::of(extractor));
    metadata.insert("kind".into(), json!("extractor"));
    Archive {
        metadata,
        arrays: collect_state("", &mut e),
    }
}

pub fn extractor_from_archive(archive: &Archive) -> Result<Extractor> {
    let kind: String = archive.meta("kind")?;
    if kind != "extractor" {
        return Err(Error::Checkpoint(format!("expected an extractor archive, found {kind}")));
    }
    let meta: ExtractorMeta = serde_json::from_value(Value::Object(archive.metadata.clone()))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if meta.backbone_id != LCNN_BACKBONE_ID {
        return Err(Error::Checkpoint(format!("unknown backbone {}", meta.backbone_id)));
    }
    let mut extractor = Extractor::new(
        meta.mel,
        meta.lcnn,
        meta.class_labels,
        meta.segment_len,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    if extractor.net.embedding_dim() != meta.embedding_dim || extractor.n_classes() != meta.n_classes
    {
        return Err(Error::Checkpoint("header dimensions disagree with the configs".into()));
    }
    extractor.phase = meta.phase;
    archive.restore("", &mut extractor)?;
    Ok(extractor)
}

pub fn save_extractor(path: impl AsRef<Path>, extractor: &Extractor) -> Result<String> {
    extractor_archive(extractor).save(path)
}

/// Loads an extractor and the content hash of its file.
pub fn load_extractor(path: impl AsRef<Path>) -> Result<(Extractor, String)> {
    let (archive, hash) = Archive::load(path)?;
    Ok((extractor_from_archive(&archive)?, hash))
}

/// Header fields of a similarity-head archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadMeta {
    pub head: HeadConfig,
    pub projection_dim: usize,
    pub embedding_dim: usize,
    /// Segment length (samples) the head was trained on.
    pub segment_len: usize,
    /// Content hash of the extractor archive this head was trained with.
    pub extractor_hash: String,
}

pub fn head_archive(head: &SimilarityHead, segment_len: usize, extractor_hash: &str) -> Archive {
    let mut h = head.clone();
    let meta = HeadMeta {
        head: head.cfg.clone(),
        projection_dim: head.cfg.projection_dim,
        embedding_dim: head.cfg.embedding_dim,
        segment_len,
        extractor_hash: extractor_hash.to_string(),
    };
    let mut metadata = to_metadata(&meta);
    metadata.insert("kind".into(), json!("similarity_head"));
    Archive {
        metadata,
        arrays: collect_state("", &mut h),
    }
}

pub fn save_head(
    path: impl AsRef<Path>,
    head: &SimilarityHead,
    segment_len: usize,
    extractor_hash: &str,
) -> Result<String> {
    head_archive(head, segment_len, extractor_hash).save(path)
}

/// Restores a head. With `extractor_hash` given, the head must have been trained
/// against exactly that extractor archive.
pub fn head_from_archive(archive: &Archive, extractor_hash: Option<&str>) -> Result<(SimilarityHead, HeadMeta)> {
    let kind: String = archive.meta("kind")?;
    if kind != "similarity_head" {
        return Err(Error::Checkpoint(format!("expected a similarity-head archive, found {kind}")));
    }
    let meta: HeadMeta = serde_json::from_value(Value::Object(archive.metadata.clone()))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(expected) = extractor_hash {
        if expected != meta.extractor_hash {
            return Err(Error::Checkpoint(format!(
                "head was trained with extractor {}, but extractor {expected} was supplied",
                meta.extractor_hash
            )));
        }
    }
    let mut head = SimilarityHead::new(meta.head.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    archive.restore("", &mut head)?;
    Ok((head, meta))
}

pub fn load_head(path: impl AsRef<Path>, extractor_hash: Option<&str>) -> Result<(SimilarityHead, HeadMeta)> {
    let (archive, _) = Archive::load(path)?;
    head_from_archive(&archive, extractor_hash)
}
