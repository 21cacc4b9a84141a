//! Scoring heads: bilinear attribute confidence, cosine class logits on the
//! hypersphere, and the pooled linear global branch.

use crate::autodiff::{Graph, NodeId};
use crate::dataset::ClassSemanticMatrix;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamNodes};

/// Attribute confidences e (1 x A): e_a = p_a^T W4 h_a, bilinear in the
/// prototype and the semantic feature.
pub fn attribute_scores(
    g: &mut Graph,
    prototypes: NodeId,
    w4: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let a = g.rows(prototypes);
    let pw = g.matmul(prototypes, w4)?; // A x D
    let e_col = g.row_dot(pw, h)?; // A x 1
    g.reshape(e_col, 1, a)
}

/// Row-normalized class semantics (C x A), precomputed once per dataset.
/// Fails on a zero-norm row (the validator rejects those datasets anyway).
pub fn normalized_semantics(sem: &ClassSemanticMatrix) -> Result<Vec<f64>> {
    let mut z = Vec::with_capacity(sem.n_classes * sem.n_attributes);
    for c in 0..sem.n_classes {
        let row = sem.row(c);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Domain(format!("class {c} has zero-norm semantics")));
        }
        z.extend(row.iter().map(|v| v / norm));
    }
    Ok(z)
}

/// Cosine class logits (1 x C): gamma^2 * cos(z_c, e). Scale-invariant in e
/// and bounded by gamma^2 (the cosine is clamped to [-1, 1], which only
/// trims float round-off above 1).
pub fn hyperspherical_logits(
    g: &mut Graph,
    e: NodeId,
    zhat: NodeId,
    gamma: f64,
) -> Result<NodeId> {
    let e_hat = g.row_l2_normalize(e)?;
    let dots = g.matmul_bt(e_hat, zhat)?; // 1 x C
    let clamped = g.clamp(dots, -1.0, 1.0)?;
    g.scale(clamped, gamma * gamma)
}

/// Global branch logits (1 x C): linear head over the spatially pooled raw
/// last-level feature map.
pub fn global_logits(
    g: &mut Graph,
    params: &ParamNodes,
    cfg: &ModelConfig,
    last_map: &[f64],
) -> Result<NodeId> {
    let c_last = cfg.global_in_dim();
    let plane = cfg.level_shapes[cfg.last_level()].plane();
    let feat = g.constant(c_last, plane, last_map.to_vec())?;
    let pooled = g.mean_cols(feat)?; // C_last x 1
    let pooled_row = g.reshape(pooled, 1, c_last)?;
    let z = g.matmul_bt(pooled_row, params.get("global.w"))?;
    g.row_add_vec(z, params.get("global.b"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{micro_config, ModelParams};
    use crate::rng::Rng;

    #[test]
    fn identity_embedding_gives_squared_norm() {
        // W4 = I and p_a = h_a: e_a = ||h_a||^2.
        let (a, d) = (3, 4);
        let mut g = Graph::new();
        let mut rng = Rng::new(2);
        let hv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let h = g.constant(a, d, hv.clone()).unwrap();
        let p = g.constant(a, d, hv.clone()).unwrap();
        let eye: Vec<f64> = (0..d * d)
            .map(|i| if i / d == i % d { 1.0 } else { 0.0 })
            .collect();
        let w4 = g.constant(d, d, eye).unwrap();
        let e = attribute_scores(&mut g, p, w4, h).unwrap();
        for attr in 0..a {
            let want: f64 = hv[attr * d..(attr + 1) * d].iter().map(|v| v * v).sum();
            assert!((g.value(e)[attr] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_features_zero_scores() {
        let (a, d) = (2, 4);
        let mut g = Graph::new();
        let mut rng = Rng::new(3);
        let p: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let p = g.constant(a, d, p).unwrap();
        let w4 = g.constant(d, d, w).unwrap();
        let h = g.constant(a, d, vec![0.0; a * d]).unwrap();
        let e = attribute_scores(&mut g, p, w4, h).unwrap();
        assert!(g.value(e).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scores_match_naive_triple_loop_oracle() {
        let (a, d) = (4, 6);
        let mut g = Graph::new();
        let mut rng = Rng::new(4);
        let pv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let wv: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
        let hv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let p = g.constant(a, d, pv.clone()).unwrap();
        let w4 = g.constant(d, d, wv.clone()).unwrap();
        let h = g.constant(a, d, hv.clone()).unwrap();
        let e = attribute_scores(&mut g, p, w4, h).unwrap();
        for attr in 0..a {
            let mut want = 0.0;
            for i in 0..d {
                for j in 0..d {
                    want += pv[attr * d + i] * wv[i * d + j] * hv[attr * d + j];
                }
            }
            assert!((g.value(e)[attr] - want).abs() < 1e-12);
        }
    }

    fn semantics_3x4() -> ClassSemanticMatrix {
        ClassSemanticMatrix {
            n_classes: 3,
            n_attributes: 4,
            values: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0],
            attribute_names: (0..4).map(|i| format!("a{i}")).collect(),
        }
    }

    #[test]
    fn aligned_scores_hit_gamma_squared() {
        let sem = semantics_3x4();
        let zhat_v = normalized_semantics(&sem).unwrap();
        let gamma = 5.0;
        let mut g = Graph::new();
        let zhat = g.constant(3, 4, zhat_v).unwrap();
        // e proportional to class 0 semantics.
        let e = g.constant(1, 4, vec![2.0, 0.0, 2.0, 0.0]).unwrap();
        let o = hyperspherical_logits(&mut g, e, zhat, gamma).unwrap();
        assert!((g.value(o)[0] - gamma * gamma).abs() < 1e-12);
        // Orthogonal scores give zero: class 1 shares no attribute.
        assert!(g.value(o)[1].abs() < 1e-12);
    }

    #[test]
    fn logits_are_scale_invariant_and_match_cosine_oracle() {
        let sem = semantics_3x4();
        let zhat_v = normalized_semantics(&sem).unwrap();
        let gamma = 5.0;
        let mut rng = Rng::new(7);
        let ev: Vec<f64> = (0..4).map(|_| rng.normal()).collect();

        let run = |scale: f64| -> Vec<f64> {
            let mut g = Graph::new();
            let zhat = g.constant(3, 4, zhat_v.clone()).unwrap();
            let e = g
                .constant(1, 4, ev.iter().map(|v| v * scale).collect())
                .unwrap();
            let o = hyperspherical_logits(&mut g, e, zhat, gamma).unwrap();
            g.value(o).to_vec()
        };
        let base = run(1.0);
        let scaled = run(3.7);
        for (a, b) in base.iter().zip(scaled.iter()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
        // Naive cosine oracle.
        let en = ev.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..3 {
            let row = sem.row(c);
            let zn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let dot: f64 = row.iter().zip(ev.iter()).map(|(z, e)| z * e).sum();
            let want = gamma * gamma * dot / (zn * en);
            assert!((base[c] - want).abs() < 1e-10);
            assert!(base[c].abs() <= gamma * gamma);
        }
    }

    #[test]
    fn zero_score_vector_is_surfaced() {
        let sem = semantics_3x4();
        let zhat_v = normalized_semantics(&sem).unwrap();
        let mut g = Graph::new();
        let zhat = g.constant(3, 4, zhat_v).unwrap();
        let e = g.constant(1, 4, vec![0.0; 4]).unwrap();
        assert!(matches!(
            hyperspherical_logits(&mut g, e, zhat, 5.0),
            Err(Error::DegenerateScore)
        ));
    }

    #[test]
    fn constant_map_with_identity_extended_head() {
        // Constant feature value c and W = [I | extended zeros]: g = c per
        // matching channel row (bias zero).
        let mut cfg = micro_config();
        cfg.n_classes = 4;
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let c_last = cfg.global_in_dim(); // 8
        {
            let t = params.map_mut().get_mut("global.w").unwrap();
            let data = t.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                let (row, col) = (i / c_last, i % c_last);
                *v = if row == col { 1.0 } else { 0.0 };
            }
        }
        let plane = cfg.level_shapes[cfg.last_level()].plane();
        let cval = -2.25;
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let out = global_logits(&mut g, &bound, &cfg, &vec![cval; c_last * plane]).unwrap();
        for row in 0..cfg.n_classes {
            assert!((g.value(out)[row] - cval).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_head_returns_bias() {
        let cfg = micro_config();
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        {
            let t = params.map_mut().get_mut("global.w").unwrap();
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        {
            let t = params.map_mut().get_mut("global.b").unwrap();
            let data = t.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v = i as f64 * 0.5;
            }
        }
        let c_last = cfg.global_in_dim();
        let plane = cfg.level_shapes[cfg.last_level()].plane();
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let out = global_logits(&mut g, &bound, &cfg, &vec![1.0; c_last * plane]).unwrap();
        for (i, &v) in g.value(out).iter().enumerate() {
            assert_eq!(v, i as f64 * 0.5);
        }
    }

    #[test]
    fn global_logits_match_loop_oracle() {
        let cfg = micro_config();
        let params = ModelParams::init(&cfg, 2).unwrap();
        let c_last = cfg.global_in_dim();
        let plane = cfg.level_shapes[cfg.last_level()].plane();
        let mut rng = Rng::new(21);
        let map: Vec<f64> = (0..c_last * plane).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let out = global_logits(&mut g, &bound, &cfg, &map).unwrap();

        let w = params.get("global.w").data();
        let b = params.get("global.b").data();
        let pooled: Vec<f64> = (0..c_last)
            .map(|ch| map[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect();
        for cls in 0..cfg.n_classes {
            let want: f64 = (0..c_last)
                .map(|ch| w[cls * c_last + ch] * pooled[ch])
                .sum::<f64>()
                + b[cls];
            assert!((g.value(out)[cls] - want).abs() < 1e-12);
        }
    }
}
