//! Finite-difference verification of analytic gradients.
//!
//! The checker rebuilds the loss graph from scratch for every probe, so the
//! central differences are fully independent of the reverse-mode path they
//! verify.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Builds a scalar loss node from bound parameter nodes. The map is keyed by
/// canonical parameter name; binding order is the sorted key order.
pub trait LossBuilder {
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, NodeId>) -> Result<NodeId>;
}

impl<F> LossBuilder for F
where
    F: Fn(&mut Graph, &BTreeMap<String, NodeId>) -> Result<NodeId>,
{
    fn build(&self, g: &mut Graph, params: &BTreeMap<String, NodeId>) -> Result<NodeId> {
        self(g, params)
    }
}

#[derive(Debug, Clone)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&ParamReport> {
        self.per_param
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

fn eval_loss(
    builder: &dyn LossBuilder,
    params: &BTreeMap<String, Tensor>,
) -> Result<f64> {
    let mut g = Graph::new();
    let mut bound = BTreeMap::new();
    for (name, t) in params {
        let (r, c) = t.as_rows_cols();
        bound.insert(name.clone(), g.param(r, c, t.data().to_vec())?);
    }
    let loss = builder.build(&mut g, &bound)?;
    Ok(g.scalar(loss))
}

/// Compare reverse-mode gradients of `builder` against central differences.
///
/// Relative error per entry is |analytic - fd| / max(1, |analytic|, |fd|).
/// `corrupt` is a test hook: when it names a parameter, that parameter's
/// analytic gradient is perturbed before comparison so the failure path can
/// be exercised.
pub fn grad_check(
    builder: &dyn LossBuilder,
    params: &BTreeMap<String, Tensor>,
    eps: f64,
    corrupt: Option<&str>,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Config(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }

    // Determinism gate: the loss must reproduce bit-for-bit.
    let l1 = eval_loss(builder, params)?;
    let l2 = eval_loss(builder, params)?;
    if l1.to_bits() != l2.to_bits() {
        return Err(Error::NonDeterministic {
            first: l1,
            second: l2,
        });
    }

    // Analytic gradients from one taped evaluation.
    let mut g = Graph::new();
    let mut bound = BTreeMap::new();
    for (name, t) in params {
        let (r, c) = t.as_rows_cols();
        bound.insert(name.clone(), g.param(r, c, t.data().to_vec())?);
    }
    let loss = builder.build(&mut g, &bound)?;
    g.backward(loss)?;

    let mut per_param = Vec::new();
    for (name, tensor) in params {
        let node = bound[name];
        let analytic: Vec<f64> = match g.grad(node) {
            Some(gr) => gr.to_vec(),
            None => vec![0.0; tensor.len()],
        };
        let mut analytic = analytic;
        if corrupt == Some(name.as_str()) {
            for a in analytic.iter_mut() {
                *a += 1.0;
            }
        }

        let mut max_rel = 0.0;
        let mut worst = 0;
        // i is the perturbation index, not just a read index.
        #[allow(clippy::needless_range_loop)]
        for i in 0..tensor.len() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[i] += eps;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[i] -= eps;
            let fd = (eval_loss(builder, &plus)? - eval_loss(builder, &minus)?) / (2.0 * eps);
            let denom = 1.0f64.max(analytic[i].abs()).max(fd.abs());
            let rel = (analytic[i] - fd).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
                worst = i;
            }
        }
        per_param.push(ParamReport {
            name: name.clone(),
            max_rel_err: max_rel,
            worst_index: worst,
        });
    }

    Ok(GradCheckReport { per_param })
}
