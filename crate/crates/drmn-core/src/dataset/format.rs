//! On-disk dataset layout. All multi-byte integers are little-endian, so
//! loading is byte-order independent of the host.
//!
//! - `meta.json` — shape descriptor
//! - `level_<l>.feat` — magic "DRMNFEAT", u32 version, u32 n_images, u32 C,
//!   u32 H, u32 W, then n_images*C*H*W IEEE-754 f32, [image][channel][row][col]
//! - `class_attrs.csv` — header of attribute names, then one row per class
//! - `splits.json` — class sets, labels, and id lists

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ClassSemanticMatrix, LevelShape, MultiLevelFeatures, Split, ZslDataset, META_FILE,
    SEMANTICS_FILE, SPLITS_FILE,
};
use crate::error::{Error, Result};

pub const FEAT_MAGIC: &[u8; 8] = b"DRMNFEAT";
pub const FEAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format_version: u32,
    n_images: usize,
    n_classes: usize,
    n_attributes: usize,
    n_levels: usize,
    ref_level: usize,
    level_shapes: Vec<LevelShape>,
    attribute_names: Vec<String>,
}

fn format_err(file: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        file: file.display().to_string(),
        detail: detail.into(),
    }
}

/// Write a dataset directory. Feature payloads are stored as f32; callers
/// that need exact write/read round-trips must hold f32-representable data
/// (the synthetic generator quantizes accordingly).
pub fn write_dataset(ds: &ZslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;

    let meta = Meta {
        format_version: 1,
        n_images: ds.features.n_images,
        n_classes: ds.semantics.n_classes,
        n_attributes: ds.semantics.n_attributes,
        n_levels: ds.features.n_levels(),
        ref_level: ds.features.ref_level,
        level_shapes: ds.features.shapes.clone(),
        attribute_names: ds.semantics.attribute_names.clone(),
    };
    fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;

    for l in 0..ds.features.n_levels() {
        let shape = ds.features.shapes[l];
        let path = dir.join(format!("level_{l}.feat"));
        let mut buf = Vec::with_capacity(32 + ds.features.level_data(l).len() * 4);
        buf.extend_from_slice(FEAT_MAGIC);
        buf.extend_from_slice(&FEAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(ds.features.n_images as u32).to_le_bytes());
        buf.extend_from_slice(&(shape.channels() as u32).to_le_bytes());
        buf.extend_from_slice(&(shape.height() as u32).to_le_bytes());
        buf.extend_from_slice(&(shape.width() as u32).to_le_bytes());
        for &v in ds.features.level_data(l) {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, buf)?;
    }

    let mut csv = String::new();
    csv.push_str(&ds.semantics.attribute_names.join(","));
    csv.push('\n');
    for c in 0..ds.semantics.n_classes {
        let row: Vec<String> = ds.semantics.row(c).iter().map(|v| format!("{v}")).collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    fs::write(dir.join(SEMANTICS_FILE), csv)?;

    fs::write(
        dir.join(SPLITS_FILE),
        serde_json::to_string_pretty(&ds.split)?,
    )?;
    Ok(())
}

fn read_u32(r: &mut impl Read, file: &Path, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| format_err(file, format!("truncated while reading {what}")))?;
    Ok(u32::from_le_bytes(b))
}

fn read_level_file(path: &Path, expect: LevelShape, expect_images: usize) -> Result<Vec<f64>> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)
        .map_err(|_| format_err(path, "truncated magic"))?;
    if &magic != FEAT_MAGIC {
        return Err(format_err(path, "bad magic bytes"));
    }
    let version = read_u32(&mut f, path, "version")?;
    if version != FEAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let n_images = read_u32(&mut f, path, "n_images")? as usize;
    let c = read_u32(&mut f, path, "channels")? as usize;
    let h = read_u32(&mut f, path, "height")? as usize;
    let w = read_u32(&mut f, path, "width")? as usize;
    if n_images != expect_images || (c, h, w) != (expect.0, expect.1, expect.2) {
        return Err(format_err(
            path,
            format!(
                "shape ({n_images} x {c} x {h} x {w}) disagrees with descriptor ({expect_images} x {} x {} x {})",
                expect.0, expect.1, expect.2
            ),
        ));
    }
    let count = n_images * c * h * w;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw)?;
    if raw.len() != count * 4 {
        return Err(format_err(
            path,
            format!("payload is {} bytes, expected {}", raw.len(), count * 4),
        ));
    }
    let mut data = Vec::with_capacity(count);
    for chunk in raw.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
    }
    Ok(data)
}

fn read_semantics(path: &Path, n_classes: usize, n_attributes: usize) -> Result<ClassSemanticMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| format_err(path, "missing header row"))?;
    let attribute_names: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    if attribute_names.len() != n_attributes {
        return Err(format_err(
            path,
            format!(
                "header has {} attribute names, descriptor says {n_attributes}",
                attribute_names.len()
            ),
        ));
    }
    let mut values = Vec::with_capacity(n_classes * n_attributes);
    let mut rows = 0;
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != n_attributes {
            return Err(format_err(
                path,
                format!("row {i} has {} fields, expected {n_attributes}", fields.len()),
            ));
        }
        for f in fields {
            let v: f64 = f
                .trim()
                .parse()
                .map_err(|_| format_err(path, format!("row {i}: bad number {f:?}")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != n_classes {
        return Err(format_err(
            path,
            format!("{rows} class rows, descriptor says {n_classes}"),
        ));
    }
    Ok(ClassSemanticMatrix {
        n_classes,
        n_attributes,
        values,
        attribute_names,
    })
}

/// Load and validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<ZslDataset> {
    let meta_path = dir.join(META_FILE);
    let meta_text = fs::read_to_string(&meta_path)?;
    let meta: Meta =
        serde_json::from_str(&meta_text).map_err(|e| format_err(&meta_path, e.to_string()))?;
    if meta.format_version != 1 {
        return Err(format_err(
            &meta_path,
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    if meta.level_shapes.len() != meta.n_levels {
        return Err(format_err(
            &meta_path,
            format!(
                "{} level shapes, descriptor says {}",
                meta.level_shapes.len(),
                meta.n_levels
            ),
        ));
    }

    let mut levels = Vec::with_capacity(meta.n_levels);
    for (l, &shape) in meta.level_shapes.iter().enumerate() {
        let path = dir.join(format!("level_{l}.feat"));
        levels.push(read_level_file(&path, shape, meta.n_images)?);
    }
    let features = MultiLevelFeatures::new(
        meta.level_shapes.clone(),
        meta.ref_level,
        meta.n_images,
        levels,
    )?;

    let semantics = read_semantics(
        &dir.join(SEMANTICS_FILE),
        meta.n_classes,
        meta.n_attributes,
    )?;
    let splits_path = dir.join(SPLITS_FILE);
    let splits_text = fs::read_to_string(&splits_path)?;
    let split: Split = serde_json::from_str(&splits_text)
        .map_err(|e| format_err(&splits_path, e.to_string()))?;

    let mut semantics = semantics;
    if semantics.attribute_names.len() == meta.n_attributes {
        // Names may legitimately differ in whitespace between csv and meta;
        // the descriptor wins.
        semantics.attribute_names = meta.attribute_names.clone();
    }

    let ds = ZslDataset {
        features,
        semantics,
        split,
    };
    ds.validate()?;
    Ok(ds)
}

/// Overwrite one byte of a file (test support for corruption scenarios).
pub fn corrupt_byte(path: &Path, offset: u64, value: u8) -> Result<()> {
    use std::io::{Seek, SeekFrom};
    let mut f = fs::OpenOptions::new().write(true).open(path)?;
    f.seek(SeekFrom::Start(offset))?;
    f.write_all(&[value])?;
    Ok(())
}
