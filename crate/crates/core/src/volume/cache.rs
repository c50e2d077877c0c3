use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};

use super::SliceRecord;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheEntry {
    pub volume_id: String,
    pub slice_index: usize,
    /// Relative to the cache directory.
    pub path: PathBuf,
}

/// A directory of per-slice `f32` files described by `index.txt`.
///
/// The index starts with a `# h,w` line followed by one
/// `volume_id,slice_index,path` line per slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceCache {
    pub dir: PathBuf,
    pub h: usize,
    pub w: usize,
    pub entries: Vec<CacheEntry>,
}

/// Raw little-endian `f32` dump of one slice, row-major.
pub fn write_slice_file(path: &Path, pixels: ArrayView2<f64>) -> Result<()> {
    let bytes: Vec<u8> = pixels.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_slice_file(path: &Path, h: usize, w: usize) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != h * w * 4 {
        return Err(Error::SizeMismatch {
            expected: (h * w * 4) as u64,
            actual: bytes.len() as u64,
        });
    }
    let v = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((h, w), v).expect("length checked"))
}

pub fn write_slice_cache(dir: &Path, records: &[SliceRecord]) -> Result<SliceCache> {
    let first = records
        .first()
        .ok_or_else(|| Error::Invalid("no slices to cache".into()))?;
    let (h, w) = first.pixels.dim();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = format!("# {h},{w}\n");
    let mut entries = Vec::with_capacity(records.len());
    let mut seen = std::collections::HashSet::new();
    for r in records {
        if r.pixels.dim() != (h, w) {
            return Err(Error::Geometry(format!(
                "slice {}:{} is {:?}, cache holds {h}x{w}",
                r.volume_id,
                r.slice_index,
                r.pixels.dim()
            )));
        }
        if r.volume_id.contains([',', '\n', '/', '\\']) || r.volume_id.is_empty() {
            return Err(Error::Invalid(format!("volume id `{}` cannot be cached", r.volume_id)));
        }
        if !seen.insert((r.volume_id.clone(), r.slice_index)) {
            return Err(Error::Invalid(format!(
                "duplicate slice {}:{}",
                r.volume_id, r.slice_index
            )));
        }
        let rel = PathBuf::from(format!("{}_{:05}.f32", r.volume_id, r.slice_index));
        write_slice_file(&dir.join(&rel), r.pixels.view())?;
        writeln!(index, "{},{},{}", r.volume_id, r.slice_index, rel.display()).unwrap();
        entries.push(CacheEntry {
            volume_id: r.volume_id.clone(),
            slice_index: r.slice_index,
            path: rel,
        });
    }
    let index_path = dir.join(INDEX_FILE);
    std::fs::write(&index_path, index).map_err(|e| Error::io(&index_path, e))?;
    Ok(SliceCache {
        dir: dir.to_path_buf(),
        h,
        w,
        entries,
    })
}

impl SliceCache {
    pub fn open(dir: &Path) -> Result<Self> {
        let index_path = dir.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let bad = |line: usize, msg: &str| Error::Ingest {
            path: index_path.clone(),
            message: format!("line {line}: {msg}"),
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty index"))?;
        let dims = header
            .strip_prefix('#')
            .ok_or_else(|| bad(1, "missing `# h,w` header"))?;
        let (h, w) = dims
            .trim()
            .split_once(',')
            .and_then(|(h, w)| Some((h.trim().parse().ok()?, w.trim().parse().ok()?)))
            .ok_or_else(|| bad(1, "malformed dimensions"))?;
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.splitn(3, ',');
            let (Some(id), Some(idx), Some(path)) = (parts.next(), parts.next(), parts.next()) else {
                return Err(bad(i + 1, "expected volume_id,slice_index,path"));
            };
            entries.push(CacheEntry {
                volume_id: id.to_string(),
                slice_index: idx.trim().parse().map_err(|_| bad(i + 1, "bad slice index"))?,
                path: PathBuf::from(path.trim()),
            });
        }
        Ok(SliceCache {
            dir: dir.to_path_buf(),
            h,
            w,
            entries,
        })
    }

    pub fn load(&self, entry: &CacheEntry) -> Result<SliceRecord> {
        let pixels = read_slice_file(&self.dir.join(&entry.path), self.h, self.w)?;
        if pixels.iter().any(|v| !(-1.0..=1.0).contains(v)) {
            return Err(Error::Invalid(format!(
                "cached slice {} holds values outside [-1, 1]",
                entry.path.display()
            )));
        }
        Ok(SliceRecord {
            pixels,
            volume_id: entry.volume_id.clone(),
            slice_index: entry.slice_index,
        })
    }

    pub fn volume_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for e in &self.entries {
            if !ids.contains(&e.volume_id) {
                ids.push(e.volume_id.clone());
            }
        }
        ids
    }

    /// Loads every slice belonging to one of `ids`, in index order.
    pub fn load_volumes(&self, ids: &[String]) -> Result<Vec<SliceRecord>> {
        self.entries
            .iter()
            .filter(|e| ids.contains(&e.volume_id))
            .map(|e| self.load(e))
            .collect()
    }
}

pub fn read_slice_cache(dir: &Path) -> Result<Vec<SliceRecord>> {
    let cache = SliceCache::open(dir)?;
    cache.entries.iter().map(|e| cache.load(e)).collect()
}
