//! The optimization loop: deterministic batches, the taped forward/backward
//! pass, Adam with a step-decay schedule, per-epoch evaluation, and
//! checkpointing.

pub mod checkpoint;
pub mod forward;
pub mod loss;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::{batch_iter, ZslDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EnsembleConfig};
use crate::model::fusion::{prepare_image, ImageInput};
use crate::model::heads::normalized_semantics;
use crate::model::{ModelConfig, ModelParams, Toggles};
use crate::optim::{adam_step, AdamState, LrSchedule};
use crate::rng::{derive_seed, Rng};
use checkpoint::{Checkpoint, DimsEcho};
use forward::{forward_batch, LossWeights};
use loss::ClassPartition;

const TAG_TRAIN_RNG: u64 = 0x5452_4149_4e52_4e47;

fn default_epochs() -> usize {
    40
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    0.001
}
fn default_decay_every() -> usize {
    10
}
fn default_decay_factor() -> f64 {
    0.5
}
fn default_lambda_sc() -> f64 {
    0.1
}
fn default_lambda_gc() -> f64 {
    0.6
}
fn default_gamma() -> f64 {
    5.0
}
fn default_reduction() -> usize {
    4
}
fn default_heads() -> usize {
    4
}
fn default_mlp_ratio() -> usize {
    2
}
fn default_sit_mix() -> f64 {
    0.5
}
fn default_seed() -> u64 {
    1
}
fn default_true() -> bool {
    true
}

/// Training hyperparameters. Serialized with strict unknown-key rejection;
/// missing keys take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub base_lr: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default = "default_decay_factor")]
    pub decay_factor: f64,
    #[serde(default = "default_lambda_sc")]
    pub lambda_sc: f64,
    #[serde(default = "default_lambda_gc")]
    pub lambda_gc: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    #[serde(default = "default_heads")]
    pub n_heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Weight of the post-interaction stream in the attribute loss.
    #[serde(default = "default_sit_mix")]
    pub sit_mix: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub mff: bool,
    #[serde(default = "default_true")]
    pub aca: bool,
    #[serde(default = "default_true")]
    pub sit: bool,
    #[serde(default = "default_true")]
    pub global_branch: bool,
    #[serde(default = "default_true")]
    pub gc_all_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.lambda_sc < 0.0 || self.lambda_gc < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.sit_mix) {
            return Err(Error::Config(format!(
                "sit mix must lie in [0, 1], got {}",
                self.sit_mix
            )));
        }
        Ok(())
    }

    pub fn model_config(&self, ds: &ZslDataset) -> ModelConfig {
        let mut cfg = ModelConfig::for_dataset(ds);
        cfg.reduction = self.reduction;
        cfg.n_heads = self.n_heads;
        cfg.mlp_ratio = self.mlp_ratio;
        cfg.gamma = self.gamma;
        cfg.toggles = Toggles {
            mff: self.mff,
            aca: self.aca,
            sit: self.sit,
            global_branch: self.global_branch,
        };
        cfg.gc_all_classes = self.gc_all_classes;
        cfg
    }
}

/// One metrics-log row. Loss columns for disabled terms stay empty.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_total: f64,
    pub loss_ac_pre: f64,
    pub loss_ac_post: Option<f64>,
    pub loss_gc: Option<f64>,
    pub czsl_acc: f64,
    pub gzsl_u: f64,
    pub gzsl_s: f64,
    pub gzsl_h: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,lr,loss_total,loss_ac_pre,loss_ac_post,loss_gc,czsl_acc,gzsl_u,gzsl_s,gzsl_h";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.lr,
            r.loss_total,
            r.loss_ac_pre,
            opt(r.loss_ac_post),
            opt(r.loss_gc),
            r.czsl_acc,
            r.gzsl_u,
            r.gzsl_s,
            r.gzsl_h
        ));
    }
    out
}

pub struct TrainResult {
    pub params: ModelParams,
    pub opt: BTreeMap<String, AdamState>,
    pub epoch: usize,
    pub rows: Vec<MetricsRow>,
    pub rng_state: [u64; 4],
    pub model_config: ModelConfig,
}

impl TrainResult {
    pub fn to_checkpoint(&self, tc: &TrainConfig, ens: &EnsembleConfig) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            dims: DimsEcho {
                n_classes: self.model_config.n_classes,
                n_attributes: self.model_config.n_attributes,
                level_shapes: self.model_config.level_shapes.clone(),
                ref_level: self.model_config.ref_level,
            },
            params: self.params.map().clone(),
            opt: self.opt.clone(),
            rng_state: self.rng_state,
            train_config: tc.clone(),
            ensemble: *ens,
        }
    }
}

/// Check a checkpoint's dataset-shape echo against a dataset.
pub fn check_dims(ckpt: &Checkpoint, ds: &ZslDataset) -> Result<()> {
    let want = DimsEcho {
        n_classes: ds.semantics.n_classes,
        n_attributes: ds.semantics.n_attributes,
        level_shapes: ds.features.shapes.clone(),
        ref_level: ds.features.ref_level,
    };
    if ckpt.dims != want {
        return Err(Error::ShapeEcho(format!(
            "checkpoint {:?} vs dataset {:?}",
            ckpt.dims, want
        )));
    }
    Ok(())
}

/// Train from scratch, or continue from a checkpoint when `resume` is set.
/// Fully deterministic given (dataset, config): two runs produce identical
/// parameters and metrics, and a resumed run matches an uninterrupted one.
pub fn fit(
    ds: &ZslDataset,
    tc: &TrainConfig,
    ens: &EnsembleConfig,
    resume: Option<Checkpoint>,
) -> Result<TrainResult> {
    tc.check()?;
    ens.check()?;
    let cfg = tc.model_config(ds);
    cfg.check()?;
    let schedule = LrSchedule::new(tc.base_lr, tc.decay_every, tc.decay_factor)?;
    let zhat = normalized_semantics(&ds.semantics)?;
    let part = ClassPartition::new(
        &ds.split.seen_classes,
        &ds.split.unseen_classes,
        cfg.n_classes,
    );
    let weights = LossWeights {
        lambda_sc: tc.lambda_sc,
        lambda_gc: tc.lambda_gc,
        sit_mix: tc.sit_mix,
    };

    let (mut params, mut opt, start_epoch, train_rng) = match resume {
        Some(ckpt) => {
            check_dims(&ckpt, ds)?;
            (
                ModelParams::from_map(ckpt.params),
                ckpt.opt,
                ckpt.epoch,
                Rng::from_state(ckpt.rng_state),
            )
        }
        None => {
            let params = ModelParams::init(&cfg, tc.seed)?;
            let opt = params
                .map()
                .iter()
                .map(|(name, t)| (name.clone(), AdamState::new(t.len())))
                .collect();
            (
                params,
                opt,
                0,
                Rng::new(derive_seed(tc.seed, TAG_TRAIN_RNG)),
            )
        }
    };
    // The training stream is reserved for future stochastic components;
    // batch order derives from (seed, epoch) directly so resume stays exact.
    let _ = train_rng.state();

    let active = params.active_names(&cfg);
    let inputs: BTreeMap<usize, ImageInput> = ds
        .split
        .train_ids
        .iter()
        .map(|&id| (id, prepare_image(ds, &cfg, id)))
        .collect();

    let mut rows = Vec::with_capacity(tc.epochs.saturating_sub(start_epoch));
    for epoch in start_epoch..tc.epochs {
        let lr = schedule.lr(epoch);
        let batches = batch_iter(&ds.split.train_ids, tc.batch_size, tc.seed, epoch)?;
        let n_train = ds.split.train_ids.len() as f64;
        let mut sum_total = 0.0;
        let mut sum_pre = 0.0;
        let mut sum_post = 0.0;
        let mut sum_gc = 0.0;
        for (bi, batch_ids) in batches.iter().enumerate() {
            let batch: Vec<ImageInput> =
                batch_ids.iter().map(|id| inputs[id].clone()).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g)?;
            let fwd = forward_batch(&mut g, &bound, &cfg, &part, &weights, &batch, &zhat)
                .map_err(|e| wrap_nan(e, epoch, bi))?;
            let total = g.scalar(fwd.loss_total);
            if !total.is_finite() {
                return Err(Error::NanLoss {
                    epoch,
                    batch: bi,
                    term: "loss_total",
                });
            }
            let bw = batch.len() as f64;
            sum_total += total * bw;
            sum_pre += g.scalar(fwd.loss_ac_pre) * bw;
            if let Some(p) = fwd.loss_ac_post {
                sum_post += g.scalar(p) * bw;
            }
            if let Some(p) = fwd.loss_gc {
                sum_gc += g.scalar(p) * bw;
            }
            g.backward(fwd.loss_total)?;
            for name in &active {
                let node = bound.get(name);
                let tensor = params.map_mut().get_mut(name).expect("active param");
                let state = opt.get_mut(name).expect("adam state");
                match g.grad(node) {
                    Some(grad) => {
                        let grad = grad.to_vec();
                        adam_step(tensor, &grad, state, lr)
                            .map_err(|e| wrap_nan(e, epoch, bi))?;
                    }
                    None => {
                        let zeros = vec![0.0; tensor.len()];
                        adam_step(tensor, &zeros, state, lr)?;
                    }
                }
            }
        }

        let report = evaluate(ds, &params, &cfg, ens, true)?;
        rows.push(MetricsRow {
            epoch,
            lr,
            loss_total: sum_total / n_train,
            loss_ac_pre: sum_pre / n_train,
            loss_ac_post: tc.sit.then_some(sum_post / n_train),
            loss_gc: tc.global_branch.then_some(sum_gc / n_train),
            czsl_acc: report.czsl_acc,
            gzsl_u: report.gzsl.u,
            gzsl_s: report.gzsl.s,
            gzsl_h: report.gzsl.h,
        });
    }

    Ok(TrainResult {
        params,
        opt,
        epoch: tc.epochs,
        rows,
        rng_state: train_rng.state(),
        model_config: cfg,
    })
}

fn wrap_nan(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NumericDomain { op, .. } => Error::NanLoss {
            epoch,
            batch,
            term: op,
        },
        other => other,
    }
}
