//! Perception-trace container: a UTF-8 JSON manifest plus one little-endian
//! binary blob.
//!
//! Blob records:
//!
//! * tensor: `b"AR2TENSR"`, `u32 rank`, `u32 dims[rank]`, then `f32` payload;
//! * mask: `b"AR2MASKB"`, `u32 height`, `u32 width`, then `height` rows of
//!   `ceil(width / 8)` bytes, MSB-first.
//!
//! Each proposal offset points at its mask record, which is immediately
//! followed by the proposal's identity-embedding tensor. Everything is
//! addressed by byte offsets into the blob.

use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::types::{BBox, FeatureGrid, PerceptionFrame, Proposal, QuerySpec};

pub const FORMAT_VERSION: u32 = 1;
pub const TENSOR_MAGIC: &[u8; 8] = b"AR2TENSR";
pub const MASK_MAGIC: &[u8; 8] = b"AR2MASKB";

const MAX_RANK: u32 = 8;

/// Fixed-view extent shared by every frame of a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceExtent {
    pub height: usize,
    pub width: usize,
    pub feature_dim: usize,
    pub text_dim: usize,
}

/// Random access to the frames of a trace.
pub trait FrameSource: Sync {
    fn extent(&self) -> TraceExtent;
    fn num_frames(&self) -> usize;
    fn frame(&self, index: usize) -> Result<PerceptionFrame>;
    fn queries(&self) -> Result<Vec<QuerySpec>>;
}

/// A fully materialized trace.
#[derive(Debug, Clone, PartialEq)]
pub struct InMemoryTrace {
    pub extent: TraceExtent,
    pub frames: Vec<PerceptionFrame>,
    pub queries: Vec<QuerySpec>,
}

impl InMemoryTrace {
    /// Builds a trace, taking the extent from the first frame.
    pub fn from_frames(frames: Vec<PerceptionFrame>, queries: Vec<QuerySpec>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Invalid("trace has no frames".into()))?;
        let text_dim = queries.first().map(|q| q.embedding.dim()).unwrap_or(0);
        Ok(InMemoryTrace {
            extent: TraceExtent {
                height: first.height(),
                width: first.width(),
                feature_dim: first.features.channels(),
                text_dim,
            },
            frames,
            queries,
        })
    }

    pub fn collect(source: &dyn FrameSource) -> Result<Self> {
        let frames = (0..source.num_frames())
            .map(|i| source.frame(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(InMemoryTrace {
            extent: source.extent(),
            frames,
            queries: source.queries()?,
        })
    }
}

impl FrameSource for InMemoryTrace {
    fn extent(&self) -> TraceExtent {
        self.extent
    }

    fn num_frames(&self) -> usize {
        self.frames.len()
    }

    fn frame(&self, index: usize) -> Result<PerceptionFrame> {
        self.frames
            .get(index)
            .cloned()
            .ok_or_else(|| Error::Invalid(format!("frame {index} out of range")))
    }

    fn queries(&self) -> Result<Vec<QuerySpec>> {
        Ok(self.queries.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub text: String,
    pub embedding_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub detector_score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refiner_score: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_index: u64,
    pub mean_brightness: f32,
    pub feature_offset: u64,
    pub proposal_count: usize,
    pub proposal_offsets: Vec<u64>,
    pub proposals: Vec<ProposalRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceManifest {
    pub format_version: u32,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub num_frames: usize,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub queries: Vec<QueryRecord>,
    pub frames: Vec<FrameRecord>,
    /// Ground-truth JSON file, relative to the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// Free-form provenance of generated traces (PRNG algorithm, seed, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<serde_json::Value>,
}

impl TraceManifest {
    pub fn extent(&self) -> TraceExtent {
        TraceExtent {
            height: self.height,
            width: self.width,
            feature_dim: self.d_v,
            text_dim: self.d_l,
        }
    }
}

// ---------------------------------------------------------------------------
// record encoding

pub fn encode_tensor(out: &mut Vec<u8>, dims: &[usize], data: &[f32]) {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_mask(out: &mut Vec<u8>, mask: &BinaryMask) {
    out.extend_from_slice(MASK_MAGIC);
    out.extend_from_slice(&(mask.height() as u32).to_le_bytes());
    out.extend_from_slice(&(mask.width() as u32).to_le_bytes());
    out.extend_from_slice(mask.packed());
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("record truncated")
    } else {
        Error::Io(e)
    }
}

fn expect_magic<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<()> {
    let mut m = [0u8; 8];
    r.read_exact(&mut m).map_err(truncated)?;
    if &m != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&m),
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

/// Reads one tensor record from the current position.
pub fn read_tensor<R: Read>(r: &mut R) -> Result<(Vec<usize>, Vec<f32>)> {
    expect_magic(r, TENSOR_MAGIC)?;
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::format(format!("tensor rank {rank} too large")));
    }
    let dims = (0..rank)
        .map(|_| read_u32(r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let n = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor size overflows"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

/// Reads one mask record from the current position.
pub fn read_mask<R: Read>(r: &mut R) -> Result<BinaryMask> {
    expect_magic(r, MASK_MAGIC)?;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let mut bits = vec![0u8; w.div_ceil(8) * h];
    r.read_exact(&mut bits).map_err(truncated)?;
    BinaryMask::from_packed(h, w, bits)
}

pub fn read_tensor_at<R: Read + Seek>(r: &mut R, offset: u64) -> Result<(Vec<usize>, Vec<f32>)> {
    r.seek(SeekFrom::Start(offset))?;
    read_tensor(r)
}

pub fn read_mask_at<R: Read + Seek>(r: &mut R, offset: u64) -> Result<BinaryMask> {
    r.seek(SeekFrom::Start(offset))?;
    read_mask(r)
}

pub(crate) fn expect_dims(dims: &[usize], expected: &[usize], what: &str) -> Result<()> {
    if dims != expected {
        return Err(Error::dim(format!(
            "{what}: tensor dims {dims:?}, expected {expected:?}"
        )));
    }
    Ok(())
}

/// Canonical blob bytes of one frame (features, then each proposal's mask
/// and identity tensor). Also returns the proposal offsets relative to the
/// start of the encoding.
pub fn encode_frame(frame: &PerceptionFrame, out: &mut Vec<u8>) -> Vec<u64> {
    let f = &frame.features;
    encode_tensor(out, &[f.height(), f.width(), f.channels()], f.values());
    let mut offsets = Vec::with_capacity(frame.proposals.len());
    for p in &frame.proposals {
        offsets.push(out.len() as u64);
        encode_mask(out, &p.mask);
        encode_tensor(out, &[p.identity.dim()], p.identity.as_slice());
    }
    offsets
}

/// Append-only writer over a blob, tracking byte offsets.
pub struct BlobWriter<W: Write> {
    inner: W,
    pos: u64,
    scratch: Vec<u8>,
}

impl<W: Write> BlobWriter<W> {
    pub fn new(inner: W) -> Self {
        BlobWriter {
            inner,
            pos: 0,
            scratch: Vec::new(),
        }
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    fn flush_scratch(&mut self) -> Result<u64> {
        let at = self.pos;
        self.inner.write_all(&self.scratch)?;
        self.pos += self.scratch.len() as u64;
        self.scratch.clear();
        Ok(at)
    }

    pub fn write_tensor(&mut self, dims: &[usize], data: &[f32]) -> Result<u64> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::dim("tensor dims do not match payload length"));
        }
        encode_tensor(&mut self.scratch, dims, data);
        self.flush_scratch()
    }

    pub fn write_mask(&mut self, mask: &BinaryMask) -> Result<u64> {
        encode_mask(&mut self.scratch, mask);
        self.flush_scratch()
    }

    /// Writes a frame; returns `(feature_offset, proposal_offsets)`.
    pub fn write_frame(&mut self, frame: &PerceptionFrame) -> Result<(u64, Vec<u64>)> {
        let rel = encode_frame(frame, &mut self.scratch);
        let at = self.flush_scratch()?;
        Ok((at, rel.into_iter().map(|o| o + at).collect()))
    }

    pub fn into_inner(mut self) -> Result<W> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Path of the blob that accompanies a manifest (`x.json` → `x.bin`).
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub(crate) fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Streams frames into a manifest + blob pair.
pub struct TraceWriter {
    manifest_path: PathBuf,
    blob: BlobWriter<BufWriter<File>>,
    manifest: TraceManifest,
}

impl TraceWriter {
    pub fn create(manifest_path: impl AsRef<Path>, extent: TraceExtent) -> Result<Self> {
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let blob_path = blob_path_for(&manifest_path);
        let blob = BlobWriter::new(BufWriter::new(File::create(&blob_path)?));
        Ok(TraceWriter {
            manifest: TraceManifest {
                format_version: FORMAT_VERSION,
                height: extent.height,
                width: extent.width,
                d_v: extent.feature_dim,
                d_l: extent.text_dim,
                num_frames: 0,
                blob: file_name(&blob_path),
                queries: Vec::new(),
                frames: Vec::new(),
                ground_truth: None,
                generator: None,
            },
            manifest_path,
            blob,
        })
    }

    pub fn write_query(&mut self, query: &QuerySpec) -> Result<()> {
        if query.embedding.dim() != self.manifest.d_l {
            return Err(Error::dim(format!(
                "query embedding dim {} vs d_l {}",
                query.embedding.dim(),
                self.manifest.d_l
            )));
        }
        let embedding_offset = self
            .blob
            .write_tensor(&[query.embedding.dim()], query.embedding.as_slice())?;
        self.manifest.queries.push(QueryRecord {
            text: query.text.clone(),
            embedding_offset,
        });
        Ok(())
    }

    pub fn write_frame(&mut self, frame: &PerceptionFrame) -> Result<()> {
        let m = &self.manifest;
        let f = &frame.features;
        if f.height() != m.height || f.width() != m.width || f.channels() != m.d_v {
            return Err(Error::dim(format!(
                "frame {} is {}×{}×{}, trace is {}×{}×{}",
                frame.frame_index,
                f.height(),
                f.width(),
                f.channels(),
                m.height,
                m.width,
                m.d_v
            )));
        }
        let (feature_offset, proposal_offsets) = self.blob.write_frame(frame)?;
        self.manifest.frames.push(FrameRecord {
            frame_index: frame.frame_index,
            mean_brightness: frame.mean_brightness,
            feature_offset,
            proposal_count: frame.proposals.len(),
            proposal_offsets,
            proposals: frame
                .proposals
                .iter()
                .map(|p| ProposalRecord {
                    bbox: p.bbox,
                    detector_score: p.detector_score,
                    refiner_score: p.refiner_score,
                })
                .collect(),
        });
        self.manifest.num_frames += 1;
        Ok(())
    }

    pub fn set_ground_truth(&mut self, file_name: impl Into<String>) {
        self.manifest.ground_truth = Some(file_name.into());
    }

    pub fn set_generator(&mut self, info: serde_json::Value) {
        self.manifest.generator = Some(info);
    }

    pub fn finish(self) -> Result<TraceManifest> {
        self.blob.into_inner()?;
        let text = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(&self.manifest_path, text)?;
        Ok(self.manifest)
    }
}

/// Writes any frame source to disk.
pub fn write_trace(manifest_path: impl AsRef<Path>, source: &dyn FrameSource) -> Result<TraceManifest> {
    let mut w = TraceWriter::create(manifest_path, source.extent())?;
    for q in source.queries()? {
        w.write_query(&q)?;
    }
    for i in 0..source.num_frames() {
        w.write_frame(&source.frame(i)?)?;
    }
    w.finish()
}

/// Lazily reads frames of an on-disk trace.
pub struct TraceReader {
    manifest_path: PathBuf,
    manifest: TraceManifest,
    blob: Mutex<File>,
}

impl TraceReader {
    pub fn open(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref().to_path_buf();
        let text = std::fs::read_to_string(&manifest_path)?;
        let manifest: TraceManifest =
            serde_json::from_str(&text).map_err(|e| Error::format(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        if manifest.height == 0 || manifest.width == 0 || manifest.d_v == 0 {
            return Err(Error::format("manifest extent must be nonzero"));
        }
        if manifest.frames.len() != manifest.num_frames {
            return Err(Error::format(format!(
                "num_frames {} but {} frame records",
                manifest.num_frames,
                manifest.frames.len()
            )));
        }
        for fr in &manifest.frames {
            if fr.proposal_offsets.len() != fr.proposal_count || fr.proposals.len() != fr.proposal_count {
                return Err(Error::format(format!(
                    "frame {}: proposal_count disagrees with proposal records",
                    fr.frame_index
                )));
            }
        }
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = Mutex::new(File::open(&blob_path)?);
        Ok(TraceReader {
            manifest_path,
            manifest,
            blob,
        })
    }

    pub fn manifest(&self) -> &TraceManifest {
        &self.manifest
    }

    /// Ground-truth path resolved against the manifest directory.
    pub fn ground_truth_path(&self) -> Option<PathBuf> {
        let dir = self.manifest_path.parent().unwrap_or_else(|| Path::new("."));
        self.manifest.ground_truth.as_ref().map(|g| dir.join(g))
    }
}

impl FrameSource for TraceReader {
    fn extent(&self) -> TraceExtent {
        self.manifest.extent()
    }

    fn num_frames(&self) -> usize {
        self.manifest.num_frames
    }

    fn frame(&self, index: usize) -> Result<PerceptionFrame> {
        let rec = self
            .manifest
            .frames
            .get(index)
            .ok_or_else(|| Error::Invalid(format!("frame {index} out of range")))?;
        let mut file = self.blob.lock().expect("blob lock poisoned");
        let (dims, data) = read_tensor_at(&mut *file, rec.feature_offset)?;
        if dims.len() != 3 {
            return Err(Error::format(format!(
                "frame {}: feature tensor has rank {}",
                rec.frame_index,
                dims.len()
            )));
        }
        // Extent mismatches are reported by validation, not rejected here.
        let features = FeatureGrid::new(dims[0], dims[1], dims[2], data)?;
        let mut proposals = Vec::with_capacity(rec.proposal_count);
        for (off, pr) in rec.proposal_offsets.iter().zip(&rec.proposals) {
            let mask = read_mask_at(&mut *file, *off)?;
            let (idims, ivals) = read_tensor(&mut *file)?;
            if idims.len() != 1 {
                return Err(Error::format("identity embedding must be rank 1"));
            }
            proposals.push(Proposal {
                bbox: pr.bbox,
                mask,
                identity: Embedding::new(ivals),
                detector_score: pr.detector_score,
                refiner_score: pr.refiner_score,
            });
        }
        Ok(PerceptionFrame {
            frame_index: rec.frame_index,
            mean_brightness: rec.mean_brightness,
            features,
            proposals,
        })
    }

    fn queries(&self) -> Result<Vec<QuerySpec>> {
        let mut file = self.blob.lock().expect("blob lock poisoned");
        self.manifest
            .queries
            .iter()
            .map(|q| {
                let (dims, data) = read_tensor_at(&mut *file, q.embedding_offset)?;
                if dims.len() != 1 {
                    return Err(Error::format("query embedding must be rank 1"));
                }
                Ok(QuerySpec {
                    text: q.text.clone(),
                    embedding: Embedding::new(data),
                })
            })
            .collect()
    }
}

/// SHA-256 over the canonical encoding of every frame, in order.
pub fn trace_digest(source: &dyn FrameSource) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = Vec::new();
    for i in 0..source.num_frames() {
        let frame = source.frame(i)?;
        buf.clear();
        buf.extend_from_slice(&frame.frame_index.to_le_bytes());
        buf.extend_from_slice(&frame.mean_brightness.to_le_bytes());
        encode_frame(&frame, &mut buf);
        for p in &frame.proposals {
            let b: [u32; 4] = p.bbox.into();
            for v in b {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            buf.extend_from_slice(&p.detector_score.to_le_bytes());
            buf.extend_from_slice(&p.refiner_score.map_or(f32::NAN, |s| s).to_le_bytes());
        }
        hasher.update(&buf);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn tensor_record_layout() {
        let mut out = Vec::new();
        encode_tensor(&mut out, &[2], &[1.0, -2.5]);
        assert_eq!(&out[..8], b"AR2TENSR");
        assert_eq!(u32::from_le_bytes(out[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(out[12..16].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(out[16..20].try_into().unwrap()), 1.0);
        assert_eq!(out.len(), 24);
        let (dims, data) = read_tensor(&mut Cursor::new(&out)).unwrap();
        assert_eq!(dims, vec![2]);
        assert_eq!(data, vec![1.0, -2.5]);
    }

    #[test]
    fn mask_record_layout() {
        let mut m = BinaryMask::empty(2, 10);
        m.set(0, 0, true);
        m.set(1, 9, true);
        let mut out = Vec::new();
        encode_mask(&mut out, &m);
        assert_eq!(&out[..8], b"AR2MASKB");
        assert_eq!(&out[16..], &[0x80, 0x00, 0x00, 0x40]);
        assert_eq!(read_mask(&mut Cursor::new(&out)).unwrap(), m);
    }

    #[test]
    fn corrupt_records_rejected() {
        let mut out = Vec::new();
        encode_tensor(&mut out, &[3], &[1.0, 2.0, 3.0]);
        out[0] = b'X';
        assert!(matches!(
            read_tensor(&mut Cursor::new(&out)),
            Err(Error::Format(_))
        ));
        let mut out = Vec::new();
        encode_tensor(&mut out, &[3], &[1.0, 2.0, 3.0]);
        out.truncate(out.len() - 2);
        assert!(matches!(
            read_tensor(&mut Cursor::new(&out)),
            Err(Error::Format(_))
        ));
    }
}
