//! Binary matrix container.
//!
//! A file is a sequence of sections. Each section is
//! `magic (8 bytes) | version u32 | rows u64 | cols u64 | tag (16 bytes, NUL padded)`
//! followed by `rows · cols` little-endian `f64` values in column-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub const MAGIC: [u8; 8] = *b"SWEOCPMX";
pub const VERSION: u32 = 1;
pub const TAG_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    pub tag: String,
    pub matrix: DMatrix<f64>,
}

impl Section {
    pub fn new(tag: impl Into<String>, matrix: DMatrix<f64>) -> Self {
        Self {
            tag: tag.into(),
            matrix,
        }
    }
}

pub fn write_sections(path: &Path, sections: &[Section]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut out = BufWriter::new(File::create(path)?);
    for s in sections {
        let tag = s.tag.as_bytes();
        if tag.len() > TAG_LEN {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("tag '{}' longer than {TAG_LEN} bytes", s.tag),
            });
        }
        out.write_all(&MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&(s.matrix.nrows() as u64).to_le_bytes())?;
        out.write_all(&(s.matrix.ncols() as u64).to_le_bytes())?;
        let mut padded = [0u8; TAG_LEN];
        padded[..tag.len()].copy_from_slice(tag);
        out.write_all(&padded)?;
        for v in s.matrix.as_slice() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_sections(path: &Path) -> Result<Vec<Section>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(bad("truncated section".into()));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut sections = Vec::new();
    loop {
        let magic = match take(MAGIC.len()) {
            Ok(m) => m,
            Err(_) => break,
        };
        if magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let tag_raw = take(TAG_LEN)?;
        let end = tag_raw.iter().position(|&b| b == 0).unwrap_or(TAG_LEN);
        let tag = String::from_utf8(tag_raw[..end].to_vec()).map_err(|_| bad("tag is not UTF-8".into()))?;
        let count = rows
            .checked_mul(cols)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| bad("section size overflow".into()))?;
        let raw = take(count)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        sections.push(Section {
            tag,
            matrix: DMatrix::from_vec(rows, cols, values),
        });
    }
    if sections.is_empty() {
        return Err(bad("no sections".into()));
    }
    Ok(sections)
}

/// Looks a section up by tag.
pub fn find<'a>(sections: &'a [Section], tag: &str, path: &Path) -> Result<&'a DMatrix<f64>> {
    sections
        .iter()
        .find(|s| s.tag == tag)
        .map(|s| &s.matrix)
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing section '{tag}'"),
        })
}
