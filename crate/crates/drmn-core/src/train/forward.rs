//! The taped training forward pass for one batch: encodes every image,
//! scores the pre-interaction stream, runs the batch transformer, scores
//! the post-interaction stream with the same head weights, evaluates the
//! global branch, and assembles the combined loss.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::model::attention::encode;
use crate::model::fusion::{fuse_levels, ImageInput};
use crate::model::heads::{attribute_scores, global_logits, hyperspherical_logits};
use crate::model::sit::{sit_forward, Mode};
use crate::model::{ModelConfig, ParamNodes};
use crate::train::loss::{loss_ac, loss_gc, total_loss, ClassPartition};

pub struct LossWeights {
    pub lambda_sc: f64,
    pub lambda_gc: f64,
    pub sit_mix: f64,
}

pub struct BatchForward {
    pub loss_total: NodeId,
    pub loss_ac_pre: NodeId,
    pub loss_ac_post: Option<NodeId>,
    pub loss_gc: Option<NodeId>,
    /// B x C attribute-branch logits of the pre-interaction stream.
    pub o_pre: NodeId,
}

/// Build the full training loss for a batch. `zhat` is the row-normalized
/// class semantic matrix (C x A).
pub fn forward_batch(
    g: &mut Graph,
    params: &ParamNodes,
    cfg: &ModelConfig,
    part: &ClassPartition,
    weights: &LossWeights,
    batch: &[ImageInput],
    zhat: &[f64],
) -> Result<BatchForward> {
    let a = cfg.n_attributes;
    let d = cfg.embed_dim();
    let b = batch.len();
    let labels: Vec<usize> = batch.iter().map(|i| i.label).collect();
    let zc = g.constant(cfg.n_classes, a, zhat.to_vec())?;
    let prototypes = params.get("prototypes");
    let w4 = params.get("score.w4");

    let mut h_per_image = Vec::with_capacity(b);
    let mut o_pre_rows = Vec::with_capacity(b);
    let mut g_rows = Vec::with_capacity(b);
    for input in batch {
        let v = fuse_levels(g, params, cfg, input)?;
        let enc = encode(g, params, cfg, v)?;
        h_per_image.push(enc.h);
        let e = attribute_scores(g, prototypes, w4, enc.h)?;
        o_pre_rows.push(hyperspherical_logits(g, e, zc, cfg.gamma)?);
        if cfg.toggles.global_branch {
            g_rows.push(global_logits(g, params, cfg, &input.last_map)?);
        }
    }
    let o_pre = g.concat_rows(&o_pre_rows)?;
    let l_ac_pre = loss_ac(g, o_pre, &labels, part, weights.lambda_sc)?;

    // Batch-level interaction on the flattened (B*A) x D semantic features,
    // then the shared classifier on the post stream.
    let l_ac_post = if cfg.toggles.sit {
        let h_flat = g.concat_rows(&h_per_image)?;
        let h_hat = sit_forward(g, params, cfg, h_flat, Mode::Train)?;
        let mut o_post_rows = Vec::with_capacity(b);
        for i in 0..b {
            let h_i = g.slice_rows(h_hat, i * a, a)?;
            debug_assert_eq!(g.cols(h_i), d);
            let e = attribute_scores(g, prototypes, w4, h_i)?;
            o_post_rows.push(hyperspherical_logits(g, e, zc, cfg.gamma)?);
        }
        let o_post = g.concat_rows(&o_post_rows)?;
        Some(loss_ac(g, o_post, &labels, part, weights.lambda_sc)?)
    } else {
        None
    };

    let l_gc = if cfg.toggles.global_branch {
        let g_all = g.concat_rows(&g_rows)?;
        Some(loss_gc(g, g_all, &labels, part, cfg.gc_all_classes)?)
    } else {
        None
    };

    let loss = total_loss(
        g,
        l_ac_pre,
        l_ac_post,
        l_gc,
        weights.sit_mix,
        weights.lambda_gc,
    )?;
    Ok(BatchForward {
        loss_total: loss,
        loss_ac_pre: l_ac_pre,
        loss_ac_post: l_ac_post,
        loss_gc: l_gc,
        o_pre,
    })
}
