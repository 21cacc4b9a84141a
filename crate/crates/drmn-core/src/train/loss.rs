//! Training losses: seen-class cross entropy with a self-calibration term
//! that presses probability mass toward unseen classes, the global-branch
//! cross entropy, and their weighted combination.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Class-partition view used by the attribute loss: sorted seen/unseen ids
/// plus the position of each seen class inside the seen-restricted logits.
pub struct ClassPartition {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub n_classes: usize,
    seen_pos: Vec<Option<usize>>,
}

impl ClassPartition {
    pub fn new(seen: &[usize], unseen: &[usize], n_classes: usize) -> Self {
        let mut seen = seen.to_vec();
        seen.sort_unstable();
        let mut unseen = unseen.to_vec();
        unseen.sort_unstable();
        let mut seen_pos = vec![None; n_classes];
        for (i, &c) in seen.iter().enumerate() {
            seen_pos[c] = Some(i);
        }
        ClassPartition {
            seen,
            unseen,
            n_classes,
            seen_pos,
        }
    }

    pub fn seen_position(&self, class: usize) -> Result<usize> {
        self.seen_pos
            .get(class)
            .copied()
            .flatten()
            .ok_or_else(|| Error::Domain(format!("label {class} is not a seen class")))
    }

    pub fn unseen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_classes];
        for &c in &self.unseen {
            mask[c] = true;
        }
        mask
    }
}

/// Attribute-branch loss on a B x C logit matrix: mean cross entropy of the
/// seen-restricted softmax at the true label, minus lambda_sc times the mean
/// total log-probability that the (+1 unseen-shifted) full softmax assigns
/// to unseen classes. With lambda_sc = 0 the second term is omitted and the
/// result is exactly the seen-class cross entropy.
pub fn loss_ac(
    g: &mut Graph,
    o: NodeId,
    labels: &[usize],
    part: &ClassPartition,
    lambda_sc: f64,
) -> Result<NodeId> {
    let b = g.rows(o);
    if labels.len() != b {
        return Err(Error::Shape {
            op: "loss_ac",
            detail: format!("{b} logit rows vs {} labels", labels.len()),
        });
    }
    let mut entries = Vec::with_capacity(b);
    for (i, &label) in labels.iter().enumerate() {
        entries.push((i, part.seen_position(label)?));
    }
    let o_seen = g.gather_cols(o, &part.seen)?;
    let lsm_seen = g.log_softmax_rows(o_seen)?;
    let picks = g.select_entries(lsm_seen, &entries)?;
    let sum = g.sum_all(picks)?;
    let term1 = g.scale(sum, -1.0 / b as f64)?;

    if lambda_sc == 0.0 || part.unseen.is_empty() {
        return Ok(term1);
    }

    // +1 added to unseen logits inside every exponential.
    let c = part.n_classes;
    let mask = part.unseen_mask();
    let mut bonus = Vec::with_capacity(b * c);
    for _ in 0..b {
        bonus.extend(mask.iter().map(|&u| if u { 1.0 } else { 0.0 }));
    }
    let bonus = g.constant(b, c, bonus)?;
    let shifted = g.add(o, bonus)?;
    let lsm_all = g.log_softmax_rows(shifted)?;
    let unseen_cols = g.gather_cols(lsm_all, &part.unseen)?;
    let sum2 = g.sum_all(unseen_cols)?;
    let term2 = g.scale(sum2, -lambda_sc / b as f64)?;
    g.add(term1, term2)
}

/// Global-branch loss: mean cross entropy over the full class range (or the
/// seen classes only, when configured that way).
pub fn loss_gc(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
    part: &ClassPartition,
    all_classes: bool,
) -> Result<NodeId> {
    let b = g.rows(logits);
    if labels.len() != b {
        return Err(Error::Shape {
            op: "loss_gc",
            detail: format!("{b} logit rows vs {} labels", labels.len()),
        });
    }
    let (lsm, entries) = if all_classes {
        let c = g.cols(logits);
        for &l in labels {
            if l >= c {
                return Err(Error::Domain(format!("label {l} outside {c} classes")));
            }
        }
        let lsm = g.log_softmax_rows(logits)?;
        let entries: Vec<(usize, usize)> =
            labels.iter().enumerate().map(|(i, &l)| (i, l)).collect();
        (lsm, entries)
    } else {
        let restricted = g.gather_cols(logits, &part.seen)?;
        let lsm = g.log_softmax_rows(restricted)?;
        let mut entries = Vec::with_capacity(b);
        for (i, &l) in labels.iter().enumerate() {
            entries.push((i, part.seen_position(l)?));
        }
        (lsm, entries)
    };
    let picks = g.select_entries(lsm, &entries)?;
    let sum = g.sum_all(picks)?;
    g.scale(sum, -1.0 / b as f64)
}

/// Combine the loss terms: the attribute loss is the sit-mix blend of the
/// pre- and post-interaction streams (pre alone when the transformer is
/// off), plus lambda_gc times the global loss when that branch is on.
pub fn total_loss(
    g: &mut Graph,
    l_ac_pre: NodeId,
    l_ac_post: Option<NodeId>,
    l_gc: Option<NodeId>,
    sit_mix: f64,
    lambda_gc: f64,
) -> Result<NodeId> {
    let l_ac = match l_ac_post {
        Some(post) => {
            let pre_part = g.scale(l_ac_pre, 1.0 - sit_mix)?;
            let post_part = g.scale(post, sit_mix)?;
            g.add(pre_part, post_part)?
        }
        None => l_ac_pre,
    };
    match l_gc {
        Some(gc) => {
            let weighted = g.scale(gc, lambda_gc)?;
            g.add(l_ac, weighted)
        }
        None => Ok(l_ac),
    }
}
