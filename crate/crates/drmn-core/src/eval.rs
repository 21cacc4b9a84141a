//! Zero-shot prediction and metrics: restricted-argmax CZSL, the
//! calibrated-stacking + softmax-blend ensemble for GZSL, macro-averaged
//! per-class top-1, and the U/S/H summary.

use serde::Serialize;

use crate::autodiff::Graph;
use crate::dataset::ZslDataset;
use crate::error::{Error, Result};
use crate::kernels::softmax;
use crate::model::attention::encode;
use crate::model::fusion::{fuse_levels, prepare_image, ImageInput};
use crate::model::heads::{attribute_scores, global_logits, hyperspherical_logits, normalized_semantics};
use crate::model::{ModelConfig, ModelParams};

/// Ensemble weight and the additive bonus given to unseen-class logits in
/// the calibrated stage.
#[derive(Debug, Clone, Copy, PartialEq, serde::Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_bonus")]
    pub unseen_bonus: f64,
}

fn default_beta() -> f64 {
    0.3
}

fn default_bonus() -> f64 {
    1.0
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            beta: 0.3,
            unseen_bonus: 1.0,
        }
    }
}

impl EnsembleConfig {
    pub fn check(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!(
                "ensemble beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

/// Index of the maximum, ties broken by the lowest index.
pub fn argmax_lowest(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Restricted argmax over the unseen classes only.
pub fn czsl_predict(o: &[f64], unseen: &[usize]) -> Result<usize> {
    if unseen.is_empty() {
        return Err(Error::Domain("czsl prediction needs a non-empty unseen set".into()));
    }
    let mut best = unseen[0];
    for &c in unseen {
        if c >= o.len() {
            return Err(Error::Domain(format!("unseen class {c} outside logit range")));
        }
        if o[c] > o[best] || (o[c] == o[best] && c < best) {
            best = c;
        }
    }
    Ok(best)
}

/// Stage-1 calibrated prediction: argmax of o with the bonus added to
/// unseen entries.
pub fn calibrated_predict(o: &[f64], unseen_mask: &[bool], bonus: f64) -> usize {
    let adjusted: Vec<f64> = o
        .iter()
        .zip(unseen_mask.iter())
        .map(|(&v, &u)| if u { v + bonus } else { v })
        .collect();
    argmax_lowest(&adjusted)
}

/// Two-stage ensemble. Stage 1 is calibrated stacking on the attribute
/// branch; an unseen winner is final. A seen winner falls through to the
/// softmax blend beta*softmax(o) + (1-beta)*softmax(g) over all classes.
pub fn ensemble_predict(
    o: &[f64],
    g: &[f64],
    unseen_mask: &[bool],
    cfg: &EnsembleConfig,
) -> Result<usize> {
    if o.len() != g.len() || o.len() != unseen_mask.len() {
        return Err(Error::Shape {
            op: "ensemble_predict",
            detail: format!("o {} vs g {} vs mask {}", o.len(), g.len(), unseen_mask.len()),
        });
    }
    let y1 = calibrated_predict(o, unseen_mask, cfg.unseen_bonus);
    if unseen_mask[y1] {
        return Ok(y1);
    }
    let o_hat = softmax(o)?;
    let g_hat = softmax(g)?;
    let blend: Vec<f64> = o_hat
        .iter()
        .zip(g_hat.iter())
        .map(|(a, b)| cfg.beta * a + (1.0 - cfg.beta) * b)
        .collect();
    Ok(argmax_lowest(&blend))
}

/// Macro-averaged top-1: accuracy within each class, then an unweighted
/// mean over classes. Every class must have at least one sample.
pub fn per_class_top1(preds: &[usize], labels: &[usize], classes: &[usize]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::Shape {
            op: "per_class_top1",
            detail: format!("{} predictions vs {} labels", preds.len(), labels.len()),
        });
    }
    let mut acc_sum = 0.0;
    for &c in classes {
        let mut total = 0usize;
        let mut correct = 0usize;
        for (&p, &l) in preds.iter().zip(labels.iter()) {
            if l == c {
                total += 1;
                if p == c {
                    correct += 1;
                }
            }
        }
        if total == 0 {
            return Err(Error::Domain(format!("class {c} has zero test samples")));
        }
        acc_sum += correct as f64 / total as f64;
    }
    Ok(acc_sum / classes.len() as f64)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerClassAccuracy {
    pub class_id: usize,
    pub partition: &'static str,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GzslMetrics {
    pub u: f64,
    pub s: f64,
    pub h: f64,
    pub per_class: Vec<PerClassAccuracy>,
}

/// Harmonic mean of seen and unseen accuracy; zero when both vanish.
pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u > 0.0 {
        2.0 * s * u / (s + u)
    } else {
        0.0
    }
}

/// U, S, H plus the per-class table from full-label-space predictions on
/// both test partitions.
pub fn gzsl_metrics(
    preds_seen: &[usize],
    labels_seen: &[usize],
    preds_unseen: &[usize],
    labels_unseen: &[usize],
    seen_classes: &[usize],
    unseen_classes: &[usize],
) -> Result<GzslMetrics> {
    if preds_seen.is_empty() || preds_unseen.is_empty() {
        return Err(Error::Domain("both gzsl test partitions must be non-empty".into()));
    }
    let s = per_class_top1(preds_seen, labels_seen, seen_classes)?;
    let u = per_class_top1(preds_unseen, labels_unseen, unseen_classes)?;
    let mut per_class = Vec::new();
    for (classes, preds, labels, partition) in [
        (seen_classes, preds_seen, labels_seen, "seen"),
        (unseen_classes, preds_unseen, labels_unseen, "unseen"),
    ] {
        for &c in classes {
            let total = labels.iter().filter(|&&l| l == c).count();
            let correct = preds
                .iter()
                .zip(labels.iter())
                .filter(|&(&p, &l)| l == c && p == c)
                .count();
            per_class.push(PerClassAccuracy {
                class_id: c,
                partition,
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            });
        }
    }
    per_class.sort_by_key(|p| p.class_id);
    Ok(GzslMetrics {
        u,
        s,
        h: harmonic_mean(s, u),
        per_class,
    })
}

/// Eval-mode forward for one image: attribute-branch logits, optional
/// global logits, and the attention/gate maps for inspection.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub o: Vec<f64>,
    pub g: Option<Vec<f64>>,
    pub omega: Vec<f64>,
    pub eta: Option<Vec<f64>>,
}

pub fn eval_image(
    params: &ModelParams,
    cfg: &ModelConfig,
    zhat: &[f64],
    input: &ImageInput,
) -> Result<ImageEval> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let v = fuse_levels(&mut g, &bound, cfg, input)?;
    let enc = encode(&mut g, &bound, cfg, v)?;
    let e = attribute_scores(&mut g, bound.get("prototypes"), bound.get("score.w4"), enc.h)?;
    let zc = g.constant(cfg.n_classes, cfg.n_attributes, zhat.to_vec())?;
    let o = hyperspherical_logits(&mut g, e, zc, cfg.gamma)?;
    let g_logits = if cfg.toggles.global_branch {
        Some(
            global_logits(&mut g, &bound, cfg, &input.last_map)
                .map(|n| g.value(n).to_vec())?,
        )
    } else {
        None
    };
    Ok(ImageEval {
        o: g.value(o).to_vec(),
        g: g_logits,
        omega: g.value(enc.omega).to_vec(),
        eta: enc.eta.map(|n| g.value(n).to_vec()),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Gzsl {
    #[serde(rename = "U")]
    pub u: f64,
    #[serde(rename = "S")]
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

/// The metrics report emitted as JSON.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub czsl_acc: f64,
    pub gzsl: Gzsl,
    pub per_class: Vec<PerClassAccuracy>,
}

/// Full test-set evaluation. The transformer stage is removed in eval mode,
/// so every image is scored independently. With the ensemble disabled (or
/// the global branch off) GZSL predictions come from calibrated stacking of
/// the attribute branch alone.
pub fn evaluate(
    ds: &ZslDataset,
    params: &ModelParams,
    cfg: &ModelConfig,
    ens: &EnsembleConfig,
    use_ensemble: bool,
) -> Result<EvalReport> {
    ens.check()?;
    let zhat = normalized_semantics(&ds.semantics)?;
    let mut unseen_mask = vec![false; cfg.n_classes];
    for &c in &ds.split.unseen_classes {
        unseen_mask[c] = true;
    }
    let ensemble_active = use_ensemble && cfg.toggles.global_branch;

    let mut czsl_preds = Vec::new();
    let mut czsl_labels = Vec::new();
    let mut preds_unseen = Vec::new();
    let mut labels_unseen = Vec::new();
    for &img in &ds.split.test_unseen_ids {
        let input = prepare_image(ds, cfg, img);
        let ev = eval_image(params, cfg, &zhat, &input)?;
        czsl_preds.push(czsl_predict(&ev.o, &ds.split.unseen_classes)?);
        czsl_labels.push(ds.label(img));
        let pred = if ensemble_active {
            ensemble_predict(&ev.o, ev.g.as_ref().unwrap(), &unseen_mask, ens)?
        } else {
            calibrated_predict(&ev.o, &unseen_mask, ens.unseen_bonus)
        };
        preds_unseen.push(pred);
        labels_unseen.push(ds.label(img));
    }

    let mut preds_seen = Vec::new();
    let mut labels_seen = Vec::new();
    for &img in &ds.split.test_seen_ids {
        let input = prepare_image(ds, cfg, img);
        let ev = eval_image(params, cfg, &zhat, &input)?;
        let pred = if ensemble_active {
            ensemble_predict(&ev.o, ev.g.as_ref().unwrap(), &unseen_mask, ens)?
        } else {
            calibrated_predict(&ev.o, &unseen_mask, ens.unseen_bonus)
        };
        preds_seen.push(pred);
        labels_seen.push(ds.label(img));
    }

    let czsl_acc = per_class_top1(&czsl_preds, &czsl_labels, &ds.split.unseen_classes)?;
    let gz = gzsl_metrics(
        &preds_seen,
        &labels_seen,
        &preds_unseen,
        &labels_unseen,
        &ds.split.seen_classes,
        &ds.split.unseen_classes,
    )?;
    Ok(EvalReport {
        czsl_acc,
        gzsl: Gzsl {
            u: gz.u,
            s: gz.s,
            h: gz.h,
        },
        per_class: gz.per_class,
    })
}
