//! Multi-level feature fusion: every pyramid level is resampled to the
//! reference resolution (bilinear up, box-average down), channel-projected
//! to the embedding width, and pixel-wise added onto the raw reference map,
//! which doubles as the identity residual.

use crate::autodiff::{Graph, NodeId};
use crate::dataset::ZslDataset;
use crate::error::Result;
use crate::kernels::resample_plane;
use crate::model::{ModelConfig, ModelParams, ParamNodes};

/// Constant per-image inputs, precomputed once: each level resampled to the
/// reference grid (C_l x R), the raw reference map (D x R), and the raw
/// last-level map for the global branch (C_last x H*W).
#[derive(Debug, Clone)]
pub struct ImageInput {
    pub resampled: Vec<Vec<f64>>,
    pub ref_map: Vec<f64>,
    pub last_map: Vec<f64>,
    pub label: usize,
}

/// Resampling is input preprocessing (no parameters), so it happens off the
/// tape; gradients only flow through the projection weights.
pub fn prepare_image(ds: &ZslDataset, cfg: &ModelConfig, image: usize) -> ImageInput {
    let ref_shape = cfg.level_shapes[cfg.ref_level];
    let (rh, rw) = (ref_shape.height(), ref_shape.width());
    let mut resampled = Vec::with_capacity(cfg.level_shapes.len());
    for (l, shape) in cfg.level_shapes.iter().enumerate() {
        let raw = ds.features.image_level(l, image);
        let plane = shape.plane();
        let mut out = Vec::with_capacity(shape.channels() * rh * rw);
        for ch in 0..shape.channels() {
            out.extend(resample_plane(
                &raw[ch * plane..(ch + 1) * plane],
                shape.height(),
                shape.width(),
                rh,
                rw,
            ));
        }
        resampled.push(out);
    }
    ImageInput {
        resampled,
        ref_map: ds.features.image_level(cfg.ref_level, image).to_vec(),
        last_map: ds.features.image_level(cfg.last_level(), image).to_vec(),
        label: ds.label(image),
    }
}

pub fn prepare_images(ds: &ZslDataset, cfg: &ModelConfig, ids: &[usize]) -> Vec<ImageInput> {
    ids.iter().map(|&i| prepare_image(ds, cfg, i)).collect()
}

/// Fused feature map v (D x R): the raw reference map plus one projected,
/// resampled term per level. With fusion toggled off, v is the raw
/// reference map alone.
pub fn fuse_levels(
    g: &mut Graph,
    params: &ParamNodes,
    cfg: &ModelConfig,
    input: &ImageInput,
) -> Result<NodeId> {
    let d = cfg.embed_dim();
    let r = cfg.n_regions();
    let mut v = g.constant(d, r, input.ref_map.clone())?;
    if !cfg.toggles.mff {
        return Ok(v);
    }
    for (l, shape) in cfg.level_shapes.iter().enumerate() {
        let level = g.constant(shape.channels(), r, input.resampled[l].clone())?;
        let proj = params.get(&format!("fusion.proj.{l}"));
        let projected = g.matmul(proj, level)?;
        v = g.add(v, projected)?;
    }
    Ok(v)
}

/// Plain-value fusion used by paths that do not need gradients.
pub fn fuse_levels_value(params: &ModelParams, cfg: &ModelConfig, input: &ImageInput) -> Vec<f64> {
    let d = cfg.embed_dim();
    let r = cfg.n_regions();
    let mut v = input.ref_map.clone();
    if !cfg.toggles.mff {
        return v;
    }
    for (l, shape) in cfg.level_shapes.iter().enumerate() {
        let proj = params.get(&format!("fusion.proj.{l}"));
        let p = crate::kernels::matmul(
            proj.data(),
            &input.resampled[l],
            d,
            shape.channels(),
            r,
        );
        for (vi, pi) in v.iter_mut().zip(p.iter()) {
            *vi += pi;
        }
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, LevelShape, SynthConfig};
    use crate::model::{micro_config, ModelParams};
    use crate::tensor::Tensor;

    fn micro_dataset() -> (crate::dataset::ZslDataset, ModelConfig) {
        let cfg = SynthConfig {
            n_classes: 4,
            n_seen: 3,
            n_attributes: 3,
            images_per_class: 2,
            level_shapes: vec![LevelShape(6, 4, 4), LevelShape(8, 2, 2)],
            ref_level: 1,
            noise_sigma: 0.05,
            train_fraction: 0.5,
            signature_scale: 1.0,
        };
        let (ds, _) = generate(&cfg, 7).unwrap();
        let mut mc = micro_config();
        mc.level_shapes = ds.features.shapes.clone();
        mc.ref_level = ds.features.ref_level;
        (ds, mc)
    }

    #[test]
    fn zero_projections_leave_raw_reference_map() {
        let (ds, cfg) = micro_dataset();
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        for l in 0..cfg.level_shapes.len() {
            let name = format!("fusion.proj.{l}");
            let t = params.map_mut().get_mut(&name).unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let input = prepare_image(&ds, &cfg, 0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let v = fuse_levels(&mut g, &bound, &cfg, &input).unwrap();
        assert_eq!(g.value(v), input.ref_map.as_slice());
    }

    #[test]
    fn single_level_identity_projection_doubles_the_map() {
        // L = 1, proj = identity, ref = 0: v = f0 + I f0 = 2 f0.
        let cfg = ModelConfig {
            n_classes: 3,
            n_attributes: 2,
            level_shapes: vec![LevelShape(4, 2, 2)],
            ref_level: 0,
            reduction: 2,
            n_heads: 2,
            mlp_ratio: 2,
            gamma: 5.0,
            ln_eps: 1e-5,
            toggles: Default::default(),
            gc_all_classes: true,
        };
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let d = cfg.embed_dim();
        {
            let t = params.map_mut().get_mut("fusion.proj.0").unwrap();
            let data = t.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v = if i / d == i % d { 1.0 } else { 0.0 };
            }
        }
        let ref_map: Vec<f64> = (0..16).map(|i| i as f64 * 0.5 - 3.0).collect();
        let input = ImageInput {
            resampled: vec![ref_map.clone()],
            ref_map: ref_map.clone(),
            last_map: ref_map.clone(),
            label: 0,
        };
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let v = fuse_levels(&mut g, &bound, &cfg, &input).unwrap();
        let want: Vec<f64> = ref_map.iter().map(|x| 2.0 * x).collect();
        for (got, want) in g.value(v).iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_naive_resample_project_oracle() {
        // Independent oracle: nested loops doing clamped bilinear /
        // box-average resampling and explicit projection sums.
        let shapes = [
            LevelShape(16, 16, 16),
            LevelShape(24, 8, 8),
            LevelShape(32, 4, 4),
            LevelShape(48, 2, 2),
        ];
        let synth = SynthConfig {
            n_classes: 3,
            n_seen: 2,
            n_attributes: 4,
            images_per_class: 2,
            level_shapes: shapes.to_vec(),
            ref_level: 2,
            noise_sigma: 0.2,
            train_fraction: 0.5,
            signature_scale: 1.0,
        };
        let (ds, _) = generate(&synth, 13).unwrap();
        let mut cfg = ModelConfig::for_dataset(&ds);
        cfg.reduction = 4;
        let params = ModelParams::init(&cfg, 3).unwrap();

        let image = 1;
        let input = prepare_image(&ds, &cfg, image);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let v = fuse_levels(&mut g, &bound, &cfg, &input).unwrap();
        let got = g.value(v);

        let d = cfg.embed_dim();
        let (rh, rw) = (4usize, 4usize);
        let raw_ref = ds.features.image_level(cfg.ref_level, image);
        let mut want = raw_ref.to_vec();
        for (l, shape) in shapes.iter().enumerate() {
            let raw = ds.features.image_level(l, image);
            let (h, w, c) = (shape.height(), shape.width(), shape.channels());
            // Naive per-channel resample.
            let mut res = vec![0.0f64; c * rh * rw];
            for ch in 0..c {
                for oi in 0..rh {
                    for oj in 0..rw {
                        let val = if h == rh && w == rw {
                            raw[ch * h * w + oi * w + oj]
                        } else if h <= rh && w <= rw {
                            // Bilinear with half-pixel centers, clamped.
                            let sy = h as f64 / rh as f64;
                            let sx = w as f64 / rw as f64;
                            let py = (oi as f64 + 0.5) * sy - 0.5;
                            let px = (oj as f64 + 0.5) * sx - 0.5;
                            let y0 = py.floor();
                            let x0 = px.floor();
                            let fy = py - y0;
                            let fx = px - x0;
                            let yi0 = (y0.max(0.0) as usize).min(h - 1);
                            let yi1 = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
                            let xi0 = (x0.max(0.0) as usize).min(w - 1);
                            let xi1 = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
                            let at = |y: usize, x: usize| raw[ch * h * w + y * w + x];
                            at(yi0, xi0) * (1.0 - fy) * (1.0 - fx)
                                + at(yi0, xi1) * (1.0 - fy) * fx
                                + at(yi1, xi0) * fy * (1.0 - fx)
                                + at(yi1, xi1) * fy * fx
                        } else {
                            // Integer-factor block mean.
                            let fy = h / rh;
                            let fx = w / rw;
                            let mut acc = 0.0;
                            for dy in 0..fy {
                                for dx in 0..fx {
                                    acc += raw[ch * h * w + (oi * fy + dy) * w + (oj * fx + dx)];
                                }
                            }
                            acc / (fy * fx) as f64
                        };
                        res[ch * rh * rw + oi * rw + oj] = val;
                    }
                }
            }
            // Naive projection: want[dd, p] += sum_c proj[dd, c] * res[c, p].
            let proj = params.get(&format!("fusion.proj.{l}"));
            for dd in 0..d {
                for p in 0..rh * rw {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += proj.data()[dd * c + ch] * res[ch * rh * rw + p];
                    }
                    want[dd * rh * rw + p] += acc;
                }
            }
        }
        for (i, (a, b)) in got.iter().zip(want.iter()).enumerate() {
            assert!((a - b).abs() < 1e-10, "cell {i}: {a} vs {b}");
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let (ds, cfg) = micro_dataset();
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        // Corrupt the projection for level 0 to the wrong width.
        params
            .map_mut()
            .insert(
                "fusion.proj.0".into(),
                Tensor::new(vec![cfg.embed_dim(), 5], vec![0.0; cfg.embed_dim() * 5])
                    .unwrap()
                    .with_grad(),
            );
        let input = prepare_image(&ds, &cfg, 0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        assert!(matches!(
            fuse_levels(&mut g, &bound, &cfg, &input),
            Err(crate::error::Error::Shape { .. })
        ));
    }
}
