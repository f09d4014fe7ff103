//! Binary checkpoint format.
//!
//! ```text
//! "ANYSR1\n"
//! u32 tensor count
//! per tensor: u32 name length, name (UTF-8), u8 dtype code, u32 rank, u64 extents
//! payloads, little-endian, in manifest order
//! u32 config length, config text (`key=value` lines)
//! ```
//! All integers are little-endian. Readers reject trailing or missing bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::backbone::{BackboneConfig, SharedWeightStore};
use crate::error::{Error, Result};
use crate::numerics::{DType, Real, Tensor};

pub const MAGIC: &[u8; 7] = b"ANYSR1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl ManifestEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Parsed checkpoint header plus the trailing config.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub config: BackboneConfig,
    payload_offset: usize,
}

impl Manifest {
    /// Element type shared by all tensors.
    pub fn dtype(&self) -> Option<DType> {
        let first = self.entries.first()?.dtype;
        self.entries
            .iter()
            .all(|e| e.dtype == first)
            .then_some(first)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Validates magic and total length and parses the manifest.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry { name, dtype, shape });
    }
    let payload_offset = r.pos;
    let payload: usize = entries.iter().map(|e| e.len() * e.dtype.size()).sum();
    r.take(payload)?;
    let cfg_len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config = BackboneConfig::from_text(text)?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes, file has {}",
            r.pos,
            bytes.len()
        )));
    }
    Ok(Manifest {
        entries,
        config,
        payload_offset,
    })
}

impl<T: Real> SharedWeightStore<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out =
            Vec::with_capacity(MAGIC.len() + self.total_params() * T::DTYPE.size() + 4096);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.params().len() as u32).to_le_bytes());
        for (name, p) in self.names().iter().zip(self.params()) {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE as u8);
            out.extend_from_slice(&(p.rank() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for p in self.params() {
            for &v in p.data() {
                v.write_le(&mut out);
            }
        }
        let text = self.config().to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        let size = T::DTYPE.size();
        let mut pos = manifest.payload_offset;
        let mut params = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            if e.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` is {}, expected {}",
                    e.name,
                    e.dtype.name(),
                    T::DTYPE.name()
                )));
            }
            let n = e.len();
            let data = bytes[pos..pos + n * size]
                .chunks_exact(size)
                .map(T::read_le)
                .collect();
            pos += n * size;
            params.push(Tensor::new(&e.shape, data)?);
        }
        let store = Self::from_parts(manifest.config, params)?;
        for (e, name) in manifest.entries.iter().zip(store.names()) {
            if &e.name != name {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` found where `{name}` was expected",
                    e.name
                )));
            }
        }
        Ok(store)
    }

    /// Writes through a temporary file in the same directory, then renames.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Data(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        file_name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
