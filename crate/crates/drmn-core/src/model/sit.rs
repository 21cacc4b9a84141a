//! Train-only semantic interaction: the batch of attribute features is
//! flattened to a (B*A) x D sequence and passed through one post-norm
//! transformer encoder layer (no positional encoding; attribute identity is
//! carried by content). At evaluation time the module is removed entirely —
//! the output is the input, bit for bit — so predictions never depend on
//! batch composition.

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::model::{ModelConfig, ParamNodes};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Multi-head scaled dot-product self-attention on an S x D sequence.
/// Per-head projections are column blocks of the combined D x D weights.
pub fn mhsa(g: &mut Graph, params: &ParamNodes, cfg: &ModelConfig, x: NodeId) -> Result<NodeId> {
    let d = cfg.embed_dim();
    let n_heads = cfg.n_heads;
    let dh = d / n_heads;
    let q_all = g.matmul_bt(x, params.get("sit.wq"))?;
    let k_all = g.matmul_bt(x, params.get("sit.wk"))?;
    let v_all = g.matmul_bt(x, params.get("sit.wv"))?;
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let q = g.slice_cols(q_all, h * dh, dh)?;
        let k = g.slice_cols(k_all, h * dh, dh)?;
        let v = g.slice_cols(v_all, h * dh, dh)?;
        let scores = g.matmul_bt(q, k)?;
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax_rows(scaled)?;
        heads.push(g.matmul(attn, v)?);
    }
    let concat = g.concat_cols(&heads)?;
    g.matmul_bt(concat, params.get("sit.wo"))
}

fn layer_norm_rows(
    g: &mut Graph,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let std = g.standardize_rows(x, eps)?;
    let scaled = g.row_mul_vec(std, gain)?;
    g.row_add_vec(scaled, bias)
}

/// One encoder layer over the flattened batch. `b` and `a` describe the
/// B x A x D layout of `h_flat` ((B*A) x D, image-major); they are carried
/// for shape checking only since attention is position-free.
pub fn sit_forward(
    g: &mut Graph,
    params: &ParamNodes,
    cfg: &ModelConfig,
    h_flat: NodeId,
    mode: Mode,
) -> Result<NodeId> {
    if mode == Mode::Eval {
        // Removed at test time: identity, same node.
        return Ok(h_flat);
    }
    let attn = mhsa(g, params, cfg, h_flat)?;
    let res1 = g.add(attn, h_flat)?;
    let h1 = layer_norm_rows(
        g,
        res1,
        params.get("sit.ln1.gain"),
        params.get("sit.ln1.bias"),
        cfg.ln_eps,
    )?;
    let hidden = g.matmul_bt(h1, params.get("sit.mlp.w1"))?;
    let act = g.relu(hidden)?;
    let mlp = g.matmul_bt(act, params.get("sit.mlp.w2"))?;
    let res2 = g.add(mlp, h1)?;
    layer_norm_rows(
        g,
        res2,
        params.get("sit.ln2.gain"),
        params.get("sit.ln2.bias"),
        cfg.ln_eps,
    )
}
