//! Binary feature-store layout (all integers and floats little-endian):
//!
//! ```text
//! magic       4 bytes   "SAFF"
//! version     u16       1
//! P           u32       patches per image
//! D           u32       embedding width
//! n_classes   u32
//! n_images    u64
//! class names n_classes × (u32 byte length, UTF-8 bytes)
//! records     n_images × (label u32, class token D × f32, patches P×D × f32 row-major)
//! ```
//!
//! Split membership lives next to the store in `<path>.splits`, one line per
//! class: `<class index>\t<train|val|test>\t<class name>`. Lines starting with
//! `#` are comments. Without that file every class is assigned to `test`.

use std::fs;
use std::path::{Path, PathBuf};

use super::{FeatureStore, ImageFeatures, Split};
use crate::error::{FormatError, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SAFF";
pub const FORMAT_VERSION: u16 = 1;

/// Serializes a store. Values are written as `f32`.
pub fn encode_store(store: &FeatureStore) -> Vec<u8> {
    let (p, d) = (store.n_patches, store.dim);
    let mut out = Vec::with_capacity(26 + store.images.len() * (4 + (p + 1) * d * 4));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(p as u32).to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(store.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(store.images.len() as u64).to_le_bytes());
    for name in &store.class_names {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for img in &store.images {
        out.extend_from_slice(&(img.label as u32).to_le_bytes());
        for v in img.class_token.data().iter().chain(img.patches.data()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated { what: what.to_string() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, FormatError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>, FormatError> {
        let bytes = self.take(n * 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

/// Parses a store. Every class is assigned to [`Split::Test`]; apply split
/// metadata separately.
pub fn decode_store(bytes: &[u8]) -> Result<FeatureStore> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(FormatError::BadMagic { found: magic }.into());
    }
    let version = r.u16("version")?;
    if version != FORMAT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            expected: FORMAT_VERSION,
        }
        .into());
    }
    let p = r.u32("patch count")? as usize;
    let d = r.u32("embedding width")? as usize;
    let n_classes = r.u32("class count")?;
    let n_images = r.u64("image count")?;

    let mut class_names = Vec::with_capacity(n_classes as usize);
    for index in 0..n_classes {
        let len = r.u32("class name length")? as usize;
        let raw = r.take(len, "class name")?;
        let name = std::str::from_utf8(raw).map_err(|_| FormatError::InvalidClassName { index })?;
        class_names.push(name.to_string());
    }

    let mut images = Vec::new();
    for record in 0..n_images {
        let what = format!("record {record}");
        let label = r.u32(&what)?;
        if label >= n_classes {
            return Err(FormatError::LabelOutOfRange {
                record,
                label,
                n_classes,
            }
            .into());
        }
        let token = r.f32s(d, &what)?;
        let patches = r.f32s(p * d, &what)?;
        if !token.iter().chain(&patches).all(|v| v.is_finite()) {
            return Err(FormatError::NonFinite { record }.into());
        }
        images.push(ImageFeatures {
            label: label as usize,
            patches: Tensor::from_parts(vec![p, d], patches),
            class_token: Tensor::from_parts(vec![d], token),
        });
    }
    if r.pos != bytes.len() {
        return Err(FormatError::TrailingBytes(bytes.len() - r.pos).into());
    }
    Ok(FeatureStore {
        n_patches: p,
        dim: d,
        class_splits: vec![Split::Test; class_names.len()],
        class_names,
        images,
    })
}

pub fn splits_path(store_path: &Path) -> PathBuf {
    let mut s = store_path.as_os_str().to_owned();
    s.push(".splits");
    PathBuf::from(s)
}

pub fn render_splits(store: &FeatureStore) -> String {
    let mut out = String::from("# class\tsplit\tname\n");
    for (i, (name, split)) in store.class_names.iter().zip(&store.class_splits).enumerate() {
        out.push_str(&format!("{i}\t{split}\t{name}\n"));
    }
    out
}

/// Parses split metadata for a store with `class_names`. Every class must be
/// listed exactly once.
pub fn parse_splits(text: &str, class_names: &[String]) -> Result<Vec<Split>> {
    let bad = |msg: String| FormatError::Metadata(msg);
    let mut splits: Vec<Option<Split>> = vec![None; class_names.len()];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let index: usize = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: missing class index", lineno + 1)))?;
        let split: Split = fields
            .next()
            .ok_or_else(|| bad(format!("line {}: missing split", lineno + 1)))?
            .trim()
            .parse()
            .map_err(|_| bad(format!("line {}: unknown split", lineno + 1)))?;
        let slot = splits
            .get_mut(index)
            .ok_or_else(|| bad(format!("line {}: class {index} out of range", lineno + 1)))?;
        if slot.replace(split).is_some() {
            return Err(bad(format!("class {index} listed twice")).into());
        }
        if let Some(name) = fields.next() {
            if name != class_names[index] {
                return Err(bad(format!(
                    "class {index} is named {:?} in the store but {name:?} in the metadata",
                    class_names[index]
                ))
                .into());
            }
        }
    }
    splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| bad(format!("class {i} has no split")).into()))
        .collect()
}

/// Writes the store and its split metadata.
pub fn save_store(store: &FeatureStore, path: &Path) -> Result<()> {
    store.validate()?;
    fs::write(path, encode_store(store))?;
    fs::write(splits_path(path), render_splits(store))?;
    Ok(())
}

/// Reads a store and, when present, its split metadata.
pub fn load_store(path: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut store = decode_store(&bytes)?;
    let meta = splits_path(path);
    if meta.exists() {
        store.class_splits = parse_splits(&fs::read_to_string(meta)?, &store.class_names)?;
    }
    Ok(store)
}
