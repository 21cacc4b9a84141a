//! The two-branch recognition model.
//!
//! Attribute branch: multi-level fusion -> per-attribute spatial attention
//! over regions -> attribute-guided channel gate -> (train only) batch-level
//! semantic transformer -> bilinear attribute scoring -> hyperspherical
//! class logits. Global branch: pooled last-level feature through a linear
//! head. Parameters live in a name-keyed map; canonical order is the sorted
//! name order, which fixes the init stream, optimizer traversal, and
//! checkpoint layout.

pub mod attention;
pub mod fusion;
pub mod heads;
pub mod sit;

use std::collections::BTreeMap;

use crate::autodiff::{Graph, NodeId};
use crate::dataset::{LevelShape, ZslDataset};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const TAG_INIT: u64 = 0x494e_4954_5354_524d;

/// Ablation switches. All independent; everything on is the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Toggles {
    /// Multi-level feature fusion; off means the raw reference map alone.
    pub mff: bool,
    /// Attribute-guided channel attention; off pins every gate to 1.
    pub aca: bool,
    /// Batch-level semantic transformer (train-time only either way).
    pub sit: bool,
    /// Global classification branch and the test-time ensemble.
    pub global_branch: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            mff: true,
            aca: true,
            sit: true,
            global_branch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_attributes: usize,
    pub level_shapes: Vec<LevelShape>,
    pub ref_level: usize,
    /// Channel-gate bottleneck reduction ratio.
    pub reduction: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    /// Cosine logit scale; logits span [-gamma^2, gamma^2].
    pub gamma: f64,
    pub ln_eps: f64,
    pub toggles: Toggles,
    /// Global-branch cross entropy over all classes (true) or seen only.
    pub gc_all_classes: bool,
}

impl ModelConfig {
    pub fn for_dataset(ds: &ZslDataset) -> Self {
        ModelConfig {
            n_classes: ds.semantics.n_classes,
            n_attributes: ds.semantics.n_attributes,
            level_shapes: ds.features.shapes.clone(),
            ref_level: ds.features.ref_level,
            reduction: 4,
            n_heads: 4,
            mlp_ratio: 2,
            gamma: 5.0,
            ln_eps: 1e-5,
            toggles: Toggles::default(),
            gc_all_classes: true,
        }
    }

    /// Embedding width D; tied to the reference-level channel count so the
    /// identity residual in fusion is well-typed.
    pub fn embed_dim(&self) -> usize {
        self.level_shapes[self.ref_level].channels()
    }

    /// Region count R of the reference grid.
    pub fn n_regions(&self) -> usize {
        self.level_shapes[self.ref_level].plane()
    }

    pub fn last_level(&self) -> usize {
        self.level_shapes.len() - 1
    }

    pub fn global_in_dim(&self) -> usize {
        self.level_shapes[self.last_level()].channels()
    }

    pub fn check(&self) -> Result<()> {
        if self.level_shapes.is_empty() || self.ref_level >= self.level_shapes.len() {
            return Err(Error::Config(format!(
                "ref_level {} out of range for {} levels",
                self.ref_level,
                self.level_shapes.len()
            )));
        }
        let d = self.embed_dim();
        if self.reduction == 0 || !d.is_multiple_of(self.reduction) {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible by reduction {}",
                self.reduction
            )));
        }
        if self.n_heads == 0 || !d.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed dim {d} not divisible by {} heads",
                self.n_heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp ratio must be at least 1".into()));
        }
        if self.gamma <= 0.0 {
            return Err(Error::Config(format!(
                "gamma must be positive, got {}",
                self.gamma
            )));
        }
        if self.n_attributes == 0 || self.n_classes == 0 {
            return Err(Error::Config("need at least one attribute and class".into()));
        }
        Ok(())
    }
}

/// All trainable tensors keyed by canonical name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Allocate and initialize every parameter. Random matrices draw from a
    /// single stream in canonical name order: fan-in-scaled uniform for
    /// projections, normal(0, 1/sqrt(D)) for prototypes, ones for layer-norm
    /// gains, zeros for biases. Toggled-off modules still allocate (and
    /// draw) so the stream does not shift between ablations; they are
    /// excluded from training by `active_names`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.check()?;
        let d = cfg.embed_dim();
        let a = cfg.n_attributes;
        let dm = d / cfg.reduction;
        let hidden = cfg.mlp_ratio * d;

        let mut shapes: BTreeMap<String, (Vec<usize>, InitKind)> = BTreeMap::new();
        for (l, shape) in cfg.level_shapes.iter().enumerate() {
            shapes.insert(
                format!("fusion.proj.{l}"),
                (vec![d, shape.channels()], InitKind::FanIn),
            );
        }
        shapes.insert("prototypes".into(), (vec![a, d], InitKind::Prototype));
        shapes.insert("spatial.w1".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("gate.w2".into(), (vec![dm, d], InitKind::FanIn));
        shapes.insert("gate.w3".into(), (vec![d, dm], InitKind::FanIn));
        shapes.insert("score.w4".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("sit.wq".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("sit.wk".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("sit.wv".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("sit.wo".into(), (vec![d, d], InitKind::FanIn));
        shapes.insert("sit.mlp.w1".into(), (vec![hidden, d], InitKind::FanIn));
        shapes.insert("sit.mlp.w2".into(), (vec![d, hidden], InitKind::FanIn));
        shapes.insert("sit.ln1.gain".into(), (vec![1, d], InitKind::One));
        shapes.insert("sit.ln1.bias".into(), (vec![1, d], InitKind::Zero));
        shapes.insert("sit.ln2.gain".into(), (vec![1, d], InitKind::One));
        shapes.insert("sit.ln2.bias".into(), (vec![1, d], InitKind::Zero));
        shapes.insert(
            "global.w".into(),
            (vec![cfg.n_classes, cfg.global_in_dim()], InitKind::FanIn),
        );
        shapes.insert("global.b".into(), (vec![1, cfg.n_classes], InitKind::Zero));

        let mut rng = Rng::new(derive_seed(seed, TAG_INIT));
        let mut map = BTreeMap::new();
        for (name, (shape, kind)) in shapes {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match kind {
                InitKind::Zero => vec![0.0; n],
                InitKind::One => vec![1.0; n],
                InitKind::FanIn => {
                    let fan_in = *shape.last().unwrap() as f64;
                    let bound = 1.0 / fan_in.sqrt();
                    (0..n).map(|_| rng.uniform_range(-bound, bound)).collect()
                }
                InitKind::Prototype => {
                    let scale = 1.0 / (d as f64).sqrt();
                    (0..n).map(|_| rng.normal() * scale).collect()
                }
            };
            map.insert(name, Tensor::new(shape, data)?.with_grad());
        }
        Ok(ModelParams { map })
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParams { map }
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.map[name]
    }

    /// Parameter names trained under the given toggles, canonical order.
    pub fn active_names(&self, cfg: &ModelConfig) -> Vec<String> {
        self.map
            .keys()
            .filter(|name| {
                if name.starts_with("fusion.") {
                    cfg.toggles.mff
                } else if name.starts_with("gate.") {
                    cfg.toggles.aca
                } else if name.starts_with("sit.") {
                    cfg.toggles.sit
                } else if name.starts_with("global.") {
                    cfg.toggles.global_branch
                } else {
                    true
                }
            })
            .cloned()
            .collect()
    }

    /// Bind every parameter into a graph as gradient-tracked leaves.
    pub fn bind(&self, g: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.map {
            let (r, c) = t.as_rows_cols();
            nodes.insert(name.clone(), g.param(r, c, t.data().to_vec())?);
        }
        Ok(ParamNodes { nodes })
    }
}

enum InitKind {
    Zero,
    One,
    FanIn,
    Prototype,
}

/// Graph bindings of the parameter set.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }

    pub fn from_map(nodes: BTreeMap<String, NodeId>) -> Self {
        ParamNodes { nodes }
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.nodes.keys()
    }
}

#[cfg(test)]
pub(crate) fn micro_config() -> ModelConfig {
    ModelConfig {
        n_classes: 4,
        n_attributes: 3,
        level_shapes: vec![LevelShape(6, 4, 4), LevelShape(8, 2, 2)],
        ref_level: 1,
        reduction: 4,
        n_heads: 2,
        mlp_ratio: 2,
        gamma: 5.0,
        ln_eps: 1e-5,
        toggles: Toggles::default(),
        gc_all_classes: true,
    }
}
