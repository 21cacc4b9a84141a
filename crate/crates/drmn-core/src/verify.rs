//! Gradient verification entry points shared by the CLI and the test
//! suites: isolated kernel checks on small random inputs, and the
//! end-to-end check of the full training loss on a fixed micro setup.

use std::collections::BTreeMap;

use crate::dataset::{generate, LevelShape, SynthConfig};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::model::fusion::prepare_images;
use crate::model::heads::normalized_semantics;
use crate::model::{ModelConfig, ModelParams, ParamNodes, Toggles};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::forward::{forward_batch, LossWeights};
use crate::train::loss::ClassPartition;

/// Relative-error tolerance for kernels checked in isolation.
pub const KERNEL_TOL: f64 = 1e-6;
/// Relative-error tolerance for the end-to-end micro check.
pub const E2E_TOL: f64 = 1e-4;

fn single(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
    let mut m = BTreeMap::new();
    m.insert(name.to_string(), t);
    m
}

/// Check each differentiable kernel in isolation on random 4-16 element
/// inputs. Returns (kernel name, max relative error) per kernel.
pub fn kernel_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut rng = Rng::new(seed);
    let mut results = Vec::new();
    let mut rand = |n: usize, scale: f64| -> Vec<f64> {
        (0..n).map(|_| rng.normal() * scale).collect()
    };

    // Each case pairs an input with a scalar-valued graph; the weighting
    // constant keeps the loss sensitive to every input entry.
    type Builder = Box<
        dyn Fn(
            &mut crate::autodiff::Graph,
            &BTreeMap<String, crate::autodiff::NodeId>,
        ) -> Result<crate::autodiff::NodeId>,
    >;
    let mut cases: Vec<(String, BTreeMap<String, Tensor>, Builder)> = Vec::new();

    let w8 = rand(8, 1.0);
    cases.push((
        "softmax".into(),
        single("x", Tensor::new(vec![1, 8], rand(8, 1.5))?.with_grad()),
        {
            let w8 = w8.clone();
            Box::new(move |g, p| {
                let y = g.softmax_rows(p["x"])?;
                let w = g.constant(1, 8, w8.clone())?;
                let m = g.mul(y, w)?;
                g.sum_all(m)
            })
        },
    ));

    cases.push((
        "log_softmax".into(),
        single("x", Tensor::new(vec![2, 4], rand(8, 2.0))?.with_grad()),
        {
            let w8 = w8.clone();
            Box::new(move |g, p| {
                let y = g.log_softmax_rows(p["x"])?;
                let w = g.constant(2, 4, w8.clone())?;
                let m = g.mul(y, w)?;
                g.sum_all(m)
            })
        },
    ));

    cases.push((
        "layer_norm".into(),
        single("x", Tensor::new(vec![2, 6], rand(12, 1.0))?.with_grad()),
        {
            let w = rand(12, 1.0);
            let gain = rand(6, 0.5);
            let bias = rand(6, 0.3);
            Box::new(move |g, p| {
                let std = g.standardize_rows(p["x"], 1e-5)?;
                let gn = g.constant(1, 6, gain.clone())?;
                let bn = g.constant(1, 6, bias.clone())?;
                let scaled = g.row_mul_vec(std, gn)?;
                let shifted = g.row_add_vec(scaled, bn)?;
                let wc = g.constant(2, 6, w.clone())?;
                let m = g.mul(shifted, wc)?;
                g.sum_all(m)
            })
        },
    ));

    cases.push((
        "sigmoid".into(),
        single("x", Tensor::new(vec![1, 7], rand(7, 2.0))?.with_grad()),
        Box::new(|g, p| {
            let y = g.sigmoid(p["x"])?;
            let sq = g.mul(y, y)?;
            g.sum_all(sq)
        }),
    ));

    cases.push((
        "relu_matmul".into(),
        single("x", Tensor::new(vec![2, 4], rand(8, 1.0))?.with_grad()),
        {
            let w = rand(8, 0.7);
            Box::new(move |g, p| {
                let wc = g.constant(4, 2, w[..8].to_vec())?;
                let y = g.matmul(p["x"], wc)?;
                let r = g.relu(y)?;
                g.sum_all(r)
            })
        },
    ));

    cases.push((
        "matmul_bt".into(),
        single("x", Tensor::new(vec![2, 5], rand(10, 1.0))?.with_grad()),
        Box::new(|g, p| {
            let y = g.matmul_bt(p["x"], p["x"])?;
            let s = g.sigmoid(y)?;
            g.sum_all(s)
        }),
    ));

    cases.push((
        "l2_normalize".into(),
        single("x", Tensor::new(vec![2, 5], rand(10, 1.0))?.with_grad()),
        {
            let w = rand(10, 1.0);
            Box::new(move |g, p| {
                let y = g.row_l2_normalize(p["x"])?;
                let wc = g.constant(2, 5, w.clone())?;
                let m = g.mul(y, wc)?;
                g.sum_all(m)
            })
        },
    ));

    cases.push((
        "mean_cols_row_dot".into(),
        single("x", Tensor::new(vec![3, 4], rand(12, 1.0))?.with_grad()),
        Box::new(|g, p| {
            let m = g.mean_cols(p["x"])?;
            let d = g.row_dot(m, m)?;
            g.sum_all(d)
        }),
    ));

    for (name, params, builder) in cases {
        let report = grad_check(&builder, &params, 1e-5, None)?;
        results.push((name, report.max_rel_err()));
    }
    Ok(results)
}

/// The fixed micro setup of the end-to-end check: 2 images, 3 attributes,
/// embedding width 8, 4 classes (3 seen), a 2x2 reference grid, transformer
/// in train mode, lambda_sc 0.1, lambda_gc 0.6.
pub fn micro_setup() -> Result<(ModelConfig, ModelParams, MicroBatch)> {
    let synth = SynthConfig {
        n_classes: 4,
        n_seen: 3,
        n_attributes: 3,
        images_per_class: 2,
        level_shapes: vec![LevelShape(6, 4, 4), LevelShape(8, 2, 2)],
        ref_level: 1,
        noise_sigma: 0.1,
        train_fraction: 0.5,
        signature_scale: 1.0,
    };
    let (ds, _) = generate(&synth, 42)?;
    let mut cfg = ModelConfig::for_dataset(&ds);
    cfg.reduction = 4;
    cfg.n_heads = 2;
    cfg.mlp_ratio = 2;
    cfg.toggles = Toggles::default();
    let params = ModelParams::init(&cfg, 7)?;

    // Two training images from different seen classes.
    let ids = [ds.split.train_ids[0], ds.split.train_ids[1]];
    let inputs = prepare_images(&ds, &cfg, &ids);
    let part = ClassPartition::new(&ds.split.seen_classes, &ds.split.unseen_classes, 4);
    let zhat = normalized_semantics(&ds.semantics)?;
    Ok((
        cfg,
        params,
        MicroBatch {
            inputs,
            part,
            zhat,
        },
    ))
}

pub struct MicroBatch {
    pub inputs: Vec<crate::model::fusion::ImageInput>,
    pub part: ClassPartition,
    pub zhat: Vec<f64>,
}

/// Central-difference check of the full training loss on the micro setup.
/// `corrupt` perturbs one named parameter's analytic gradient (negative
/// control for the failure path).
pub fn micro_e2e_gradcheck(corrupt: Option<&str>) -> Result<GradCheckReport> {
    let (cfg, params, batch) = micro_setup()?;
    let weights = LossWeights {
        lambda_sc: 0.1,
        lambda_gc: 0.6,
        sit_mix: 0.5,
    };
    let builder = move |g: &mut crate::autodiff::Graph,
                        bound: &BTreeMap<String, crate::autodiff::NodeId>|
          -> Result<crate::autodiff::NodeId> {
        let nodes = ParamNodes::from_map(bound.clone());
        let fwd = forward_batch(g, &nodes, &cfg, &batch.part, &weights, &batch.inputs, &batch.zhat)?;
        Ok(fwd.loss_total)
    };
    grad_check(&builder, params.map(), 1e-5, corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_pass_in_isolation() {
        for (name, err) in kernel_gradchecks(123).unwrap() {
            assert!(err < KERNEL_TOL, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn micro_end_to_end_passes() {
        let report = micro_e2e_gradcheck(None).unwrap();
        for p in &report.per_param {
            assert!(
                p.max_rel_err < E2E_TOL,
                "{}: max rel err {} at flat index {}",
                p.name,
                p.max_rel_err,
                p.worst_index
            );
        }
    }

    #[test]
    fn corrupted_gradient_is_named() {
        let report = micro_e2e_gradcheck(Some("spatial.w1")).unwrap();
        assert!(report.max_rel_err() > E2E_TOL);
        assert_eq!(report.worst_param().unwrap().name, "spatial.w1");
    }
}
