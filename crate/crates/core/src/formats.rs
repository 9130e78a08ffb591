//! Little-endian binary formats for sequences (`PSTS`) and checkpoints (`PSTW`).
//!
//! Sequence file:
//!
//! ```text
//! magic "PSTS" | version u16 | flags u16 (bit 0: labels present)
//! frames u32 | points u32 | feat_width u32 | num_classes u32
//! per frame: coords f32[points·3] | feats f32[points·feat_width] | labels u16[points]?
//! ```
//!
//! Checkpoint:
//!
//! ```text
//! magic "PSTW" | version u16 | reserved u16
//! metadata_len u32 | metadata (UTF-8 key-value text)
//! param_count u32
//! per param: name_len u16 | name (UTF-8) | ndim u8 | dims u32[ndim]
//! payload: every param's values as f32, in table order
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::point_ops::{PointCloudFrame, PointCloudSequence};
use crate::tensor::{ParamStore, Tensor};

pub const SEQUENCE_MAGIC: &[u8; 4] = b"PSTS";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PSTW";
pub const FORMAT_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn u16s(&mut self, n: usize) -> Result<Vec<u16>> {
        let bytes = self.take(n.checked_mul(2).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(2).map(|c| u16::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4]) -> Result<u16> {
        if self.take(4)? != magic {
            return Err(Error::Format(format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        self.u16()
    }

    fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn to_u32(x: usize, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Format(format!("{what} {x} does not fit in u32")))
}

pub fn encode_sequence(seq: &PointCloudSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let n = seq.frames[0].len();
    if seq.frames.iter().any(|f| f.len() != n) {
        return Err(Error::Format("sequence files need the same point count in every frame".into()));
    }
    let labelled = seq.frames[0].labels.is_some();
    if seq.frames.iter().any(|f| f.labels.is_some() != labelled) {
        return Err(Error::Format("either every frame or no frame must carry labels".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SEQUENCE_MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((if labelled { FLAG_LABELS } else { 0 }).to_le_bytes());
    for x in [seq.len(), n, seq.feat_width(), seq.num_classes] {
        out.extend(to_u32(x, "header field")?.to_le_bytes());
    }
    for f in &seq.frames {
        out.extend(f.coords.data().iter().flat_map(|x| x.to_le_bytes()));
        out.extend(f.feats.data().iter().flat_map(|x| x.to_le_bytes()));
        if let Some(labels) = &f.labels {
            out.extend(labels.iter().flat_map(|x| x.to_le_bytes()));
        }
    }
    Ok(out)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<PointCloudSequence> {
    let mut r = Reader::new(bytes);
    let flags = r.header(SEQUENCE_MAGIC)?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown flags {flags:#06x}")));
    }
    let frames = r.u32()? as usize;
    let n = r.u32()? as usize;
    let fw = r.u32()? as usize;
    let classes = r.u32()? as usize;
    let mut out = Vec::with_capacity(frames.min(1 << 16));
    for _ in 0..frames {
        let coords = Tensor::new([n, 3], r.f32s(n * 3)?)?;
        let feats = Tensor::new([n, fw], r.f32s(n * fw)?)?;
        let labels = if flags & FLAG_LABELS != 0 { Some(r.u16s(n)?) } else { None };
        out.push(PointCloudFrame::new(coords, feats, labels)?);
    }
    r.finish()?;
    PointCloudSequence::new(out, classes)
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_sequence(path: &Path, seq: &PointCloudSequence) -> Result<()> {
    write_atomic(path, &encode_sequence(seq)?)
}

pub fn read_sequence(path: &Path) -> Result<PointCloudSequence> {
    decode_sequence(&fs::read(path)?)
}

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: String,
    pub params: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore<f32>, metadata: impl Into<String>) -> Self {
        let params = store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
        Self { metadata: metadata.into(), params }
    }

    /// Copies values into `store`, which must hold exactly the same names and
    /// shapes in the same order.
    pub fn load_into(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if store.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                store.len()
            )));
        }
        let ids: Vec<_> = store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(&self.params) {
            let p = store.get(id);
            if &p.name != name || p.value.shape() != value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint parameter `{name}` {:?} does not match model `{}` {:?}",
                    value.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            store.set_value(id, value.clone())?;
        }
        Ok(())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend(FORMAT_VERSION.to_le_bytes());
        out.extend(0u16.to_le_bytes());
        out.extend(to_u32(self.metadata.len(), "metadata length")?.to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        out.extend(to_u32(self.params.len(), "parameter count")?.to_le_bytes());
        for (name, t) in &self.params {
            let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{name}` too long")))?;
            let ndim = u8::try_from(t.ndim()).map_err(|_| Error::Format(format!("`{name}` has too many dims")))?;
            out.extend(len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(ndim);
            for &d in t.shape() {
                out.extend(to_u32(d, "dimension")?.to_le_bytes());
            }
        }
        for (_, t) in &self.params {
            out.extend(t.data().iter().flat_map(|x| x.to_le_bytes()));
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.header(CHECKPOINT_MAGIC)?;
        let meta_len = r.u32()? as usize;
        let metadata = String::from_utf8(r.take(meta_len)?.to_vec())
            .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut table = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = r.u8()? as usize;
            let dims = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            table.push((name, dims));
        }
        let mut params = Vec::with_capacity(table.len());
        for (name, dims) in table {
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| Error::Format(format!("`{name}` is too large")))?;
            let t = Tensor::new(dims, r.f32s(numel)?)?;
            params.push((name, t));
        }
        r.finish()?;
        Ok(Self { metadata, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}
