//! Checkpoint layout: `manifest.txt` with one `name<TAB>shape<TAB>offset`
//! line per tensor (shape comma-separated, offset in bytes), and
//! `tensors.bin` holding little-endian f32 data back to back.

use std::fs;
use std::path::Path;

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.txt";
pub const BLOB: &str = "tensors.bin";

/// Write `contents` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(params: &ParamSet<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    let mut blob = Vec::with_capacity(params.numel() * 4);
    for (name, t) in params.iter() {
        if name.contains(['\t', '\n']) {
            return Err(Error::contract(format!("tensor name {name:?} not representable")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join(","), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(&dir.join(BLOB), &blob)?;
    write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let loc = || format!("{}:{}", path.display(), i + 1);
            let mut parts = line.split('\t');
            let (Some(name), Some(shape), Some(offset), None) =
                (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(Error::parse(loc(), "expected name, shape, offset"));
            };
            let shape = shape
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(loc(), format!("shape: {e}")))?;
            let offset = offset
                .parse()
                .map_err(|e| Error::parse(loc(), format!("offset: {e}")))?;
            Ok(ManifestEntry {
                name: name.to_string(),
                shape,
                offset,
            })
        })
        .collect()
}

pub fn load(dir: &Path) -> Result<ParamSet<f32>> {
    let entries = read_manifest(dir)?;
    let blob_path = dir.join(BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut params = ParamSet::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        let end = e.offset + numel * 4;
        if end > blob.len() {
            return Err(Error::parse(
                blob_path.display().to_string(),
                format!("tensor `{}` extends past end of blob", e.name),
            ));
        }
        let data = blob[e.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        params.insert(e.name, Tensor::new(e.shape, data)?);
    }
    Ok(params)
}
