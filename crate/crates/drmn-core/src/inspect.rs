//! Attention-map and channel-gate export for qualitative inspection:
//! per-attribute spatial heatmaps as CSV and 8-bit binary PGM (min-max
//! scaled; a flat map renders mid-gray), plus the gate matrix as CSV.

use std::fs;
use std::path::Path;

use crate::dataset::ZslDataset;
use crate::error::{Error, Result};
use crate::eval::{eval_image, ImageEval};
use crate::model::fusion::prepare_image;
use crate::model::heads::normalized_semantics;
use crate::model::{ModelConfig, ModelParams};

/// Render one H x W map as binary PGM with min-max scaling.
pub fn pgm_bytes(map: &[f64], h: usize, w: usize) -> Vec<u8> {
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    if hi - lo < 1e-300 {
        out.extend(std::iter::repeat_n(128u8, h * w));
    } else {
        for &v in map {
            out.push(((v - lo) / (hi - lo) * 255.0).round() as u8);
        }
    }
    out
}

fn csv_grid(map: &[f64], h: usize, w: usize) -> String {
    let mut s = String::new();
    for row in 0..h {
        let cells: Vec<String> = (0..w).map(|c| format!("{}", map[row * w + c])).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Evaluate one image and write its per-attribute heatmaps and gate matrix
/// under `out_dir`: `att_<a>.pgm`, `att_<a>.csv`, and `gates.csv`.
pub fn export_attention(
    ds: &ZslDataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    image: usize,
    out_dir: &Path,
) -> Result<ImageEval> {
    if image >= ds.n_images() {
        return Err(Error::Domain(format!(
            "image id {image} outside dataset of {} images",
            ds.n_images()
        )));
    }
    let zhat = normalized_semantics(&ds.semantics)?;
    let input = prepare_image(ds, cfg, image);
    let ev = eval_image(params, cfg, &zhat, &input)?;

    let ref_shape = cfg.level_shapes[cfg.ref_level];
    let (h, w) = (ref_shape.height(), ref_shape.width());
    let r = cfg.n_regions();
    let a = cfg.n_attributes;
    fs::create_dir_all(out_dir)?;
    for attr in 0..a {
        let row = &ev.omega[attr * r..(attr + 1) * r];
        fs::write(out_dir.join(format!("att_{attr}.pgm")), pgm_bytes(row, h, w))?;
        fs::write(out_dir.join(format!("att_{attr}.csv")), csv_grid(row, h, w))?;
    }

    let d = cfg.embed_dim();
    let mut gates = String::from("attribute");
    for ch in 0..d {
        gates.push_str(&format!(",c{ch}"));
    }
    gates.push('\n');
    for attr in 0..a {
        gates.push_str(&ds.semantics.attribute_names[attr]);
        for ch in 0..d {
            let v = match &ev.eta {
                Some(eta) => eta[attr * d + ch],
                None => 1.0,
            };
            gates.push_str(&format!(",{v}"));
        }
        gates.push('\n');
    }
    fs::write(out_dir.join("gates.csv"), gates)?;
    Ok(ev)
}
