//! On-disk feature cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ETTF" | version u16 | id_len u16 | task_id bytes | T u32 | D u32 | dtype u8
//! T·D f32 values, row-major
//! T f64 timestamps
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::align::{Dtype, FeatureSequence};
use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

pub const MAGIC: &[u8; 4] = b"ETTF";
pub const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

/// Header length for a task id of `id_len` bytes.
pub fn header_len(id_len: usize) -> usize {
    4 + 2 + 2 + id_len + 4 + 4 + 1
}

/// Exact file size for a `t × d` sequence.
pub fn file_len(id_len: usize, t: usize, d: usize) -> usize {
    header_len(id_len) + 4 * t * d + 8 * t
}

/// Serializes a sequence. Values must be exactly representable as f32.
pub fn encode(seq: &FeatureSequence) -> Result<Vec<u8>> {
    let id = seq.task_id().as_bytes();
    let id_len = u16::try_from(id.len())
        .map_err(|_| Error::InvalidArgument("task id longer than 65535 bytes".into()))?;
    let (t, d) = seq.values().shape();
    let t32 = u32::try_from(t).map_err(|_| Error::InvalidArgument("too many rows".into()))?;
    let d32 = u32::try_from(d).map_err(|_| Error::InvalidArgument("too many columns".into()))?;
    let mut out = Vec::with_capacity(file_len(id.len(), t, d));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    out.extend_from_slice(&t32.to_le_bytes());
    out.extend_from_slice(&d32.to_le_bytes());
    out.push(DTYPE_F32);
    for &v in seq.values().as_slice() {
        let f = v as f32;
        if f as f64 != v && !v.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "value {v} is not representable as f32; round with to_f32 first"
            )));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    for &ts in seq.frame_times_s() {
        out.extend_from_slice(&ts.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos,
                reason: format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }
}

/// Parses a cache file. Any defect yields an error, never a partial value.
pub fn decode(buf: &[u8]) -> Result<FeatureSequence> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic bytes".into(),
        });
    }
    let version = u16::from_le_bytes(r.array("version")?);
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let id_len = u16::from_le_bytes(r.array("task id length")?) as usize;
    let id_at = r.pos;
    let task_id = std::str::from_utf8(r.take(id_len, "task id")?)
        .map_err(|_| Error::Format {
            offset: id_at,
            reason: "task id is not UTF-8".into(),
        })?
        .to_string();
    let t = u32::from_le_bytes(r.array("T")?) as usize;
    let d = u32::from_le_bytes(r.array("D")?) as usize;
    let dtype_at = r.pos;
    let dtype = r.array::<1>("dtype")?[0];
    if dtype != DTYPE_F32 {
        return Err(Error::Format {
            offset: dtype_at,
            reason: format!("unknown dtype tag {dtype}"),
        });
    }
    let expected = file_len(id_len, t, d);
    if buf.len() != expected {
        return Err(Error::Format {
            offset: buf.len().min(expected),
            reason: format!("file is {} bytes, header implies {expected}", buf.len()),
        });
    }
    let values = r
        .take(4 * t * d, "values")?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64)
        .collect();
    let times: Vec<f64> = r
        .take(8 * t, "timestamps")?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let ts_at = r.pos - 8 * t;
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Format {
            offset: ts_at,
            reason: "timestamps are not strictly increasing".into(),
        });
    }
    Ok(FeatureSequence::from_parts_unchecked(
        task_id,
        Tensor2D::from_vec(t, d, values)?,
        times,
        Dtype::F32,
    ))
}

pub fn cache_store(path: &Path, seq: &FeatureSequence) -> Result<()> {
    let bytes = encode(seq)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    // write then rename so readers never see a partial file
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn cache_load(path: &Path) -> Result<FeatureSequence> {
    decode(&fs::read(path)?)
}

/// Cache directory keyed by `(task_id, stage-1 checksum, clip id)`.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path_for(&self, task_id: &str, checksum: &str, clip_id: &str) -> PathBuf {
        let short = &checksum[..checksum.len().min(16)];
        self.root
            .join(format!("{task_id}-{short}"))
            .join(format!("{clip_id}.ettf"))
    }

    /// Loads a cached sequence, or computes, stores and returns it.
    pub fn get_or_insert<F>(&self, task_id: &str, checksum: &str, clip_id: &str, compute: F) -> Result<FeatureSequence>
    where
        F: FnOnce() -> Result<FeatureSequence>,
    {
        let path = self.path_for(task_id, checksum, clip_id);
        if path.exists() {
            return cache_load(&path);
        }
        let seq = compute()?.to_f32();
        cache_store(&path, &seq)?;
        Ok(seq)
    }
}
