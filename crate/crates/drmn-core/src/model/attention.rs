//! Spatial and channel attention over the fused feature map.
//!
//! Spatial: each attribute prototype scores every region through a learned
//! compatibility matrix; a per-attribute softmax over regions yields the
//! attention map, and the attribute feature is the attention-weighted sum
//! of region vectors (a convex combination). Channel: a descriptor built
//! from the standardized prototype plus the standardized pooled visual
//! vector drives a shared bottleneck MLP with a sigmoid gate; gating the
//! attribute features disentangles attributes that attend to similar
//! regions.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamNodes};

/// Attention map (A x R) and pre-gate attribute features k (A x D).
pub fn spatial_attention(
    g: &mut Graph,
    prototypes: NodeId,
    w1: NodeId,
    v: NodeId,
) -> Result<(NodeId, NodeId)> {
    if g.cols(v) == 0 {
        return Err(Error::EmptyInput("spatial_attention regions"));
    }
    let pw = g.matmul(prototypes, w1)?; // A x D
    let scores = g.matmul(pw, v)?; // A x R
    let omega = g.softmax_rows(scores)?;
    let k = g.matmul_bt(omega, v)?; // A x D
    Ok((omega, k))
}

/// Channel descriptor q (A x D): standardized prototype plus standardized
/// spatially-pooled visual vector, broadcast over attributes.
pub fn channel_descriptor(
    g: &mut Graph,
    prototypes: NodeId,
    v: NodeId,
    eps: f64,
) -> Result<NodeId> {
    let d = g.rows(v);
    let pooled = g.mean_cols(v)?; // D x 1
    let pooled_row = g.reshape(pooled, 1, d)?;
    let pooled_norm = g.standardize_rows(pooled_row, eps)?;
    let proto_norm = g.standardize_rows(prototypes, eps)?;
    g.row_add_vec(proto_norm, pooled_norm)
}

/// Bottleneck gate: sigmoid(W3 relu(W2 q)) per attribute, entries in (0,1).
pub fn channel_gate(g: &mut Graph, q: NodeId, w2: NodeId, w3: NodeId) -> Result<NodeId> {
    let hidden = g.matmul_bt(q, w2)?; // A x D/m
    let act = g.relu(hidden)?;
    let pre = g.matmul_bt(act, w3)?; // A x D
    g.sigmoid(pre)
}

pub fn apply_gate(g: &mut Graph, k: NodeId, eta: NodeId) -> Result<NodeId> {
    g.mul(k, eta)
}

/// Everything the attribute branch produces for one image before scoring.
pub struct ImageEncoding {
    /// A x R attention map.
    pub omega: NodeId,
    /// A x D pre-gate attribute features.
    pub k: NodeId,
    /// A x D channel gates (absent when channel attention is off).
    pub eta: Option<NodeId>,
    /// A x D gated semantic features.
    pub h: NodeId,
}

/// Fused map -> spatial attention -> channel gate -> semantic features.
pub fn encode(
    g: &mut Graph,
    params: &ParamNodes,
    cfg: &ModelConfig,
    v: NodeId,
) -> Result<ImageEncoding> {
    let prototypes = params.get("prototypes");
    let (omega, k) = spatial_attention(g, prototypes, params.get("spatial.w1"), v)?;
    if !cfg.toggles.aca {
        return Ok(ImageEncoding {
            omega,
            k,
            eta: None,
            h: k,
        });
    }
    let q = channel_descriptor(g, prototypes, v, cfg.ln_eps)?;
    let eta = channel_gate(g, q, params.get("gate.w2"), params.get("gate.w3"))?;
    let h = apply_gate(g, k, eta)?;
    Ok(ImageEncoding {
        omega,
        k,
        eta: Some(eta),
        h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants(
        g: &mut Graph,
        a: usize,
        d: usize,
        r: usize,
        seed: u64,
    ) -> (NodeId, NodeId, NodeId) {
        let mut rng = crate::rng::Rng::new(seed);
        let p: Vec<f64> = (0..a * d).map(|_| rng.normal() * 0.5).collect();
        let w: Vec<f64> = (0..d * d).map(|_| rng.normal() * 0.3).collect();
        let v: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
        (
            g.param(a, d, p).unwrap(),
            g.param(d, d, w).unwrap(),
            g.constant(d, r, v).unwrap(),
        )
    }

    #[test]
    fn zero_compat_matrix_gives_uniform_attention_and_region_mean() {
        let (a, d, r) = (3, 5, 6);
        let mut g = Graph::new();
        let (p, _, v) = constants(&mut g, a, d, r, 1);
        let w_zero = g.param(d, d, vec![0.0; d * d]).unwrap();
        let (omega, k) = spatial_attention(&mut g, p, w_zero, v).unwrap();
        for &x in g.value(omega) {
            assert!((x - 1.0 / r as f64).abs() < 1e-12);
        }
        // k rows all equal the mean region vector.
        let vv = g.value(v).to_vec();
        for attr in 0..a {
            for dd in 0..d {
                let mean: f64 = (0..r).map(|rr| vv[dd * r + rr]).sum::<f64>() / r as f64;
                let got = g.value(k)[attr * d + dd];
                assert!((got - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_region_attention_is_one_and_copies_the_region() {
        let (a, d) = (2, 4);
        let mut g = Graph::new();
        let (p, w, _) = constants(&mut g, a, d, 1, 2);
        let region: Vec<f64> = vec![0.3, -1.2, 0.8, 2.0];
        let v = g.constant(d, 1, region.clone()).unwrap();
        let (omega, k) = spatial_attention(&mut g, p, w, v).unwrap();
        assert_eq!(g.value(omega), &[1.0, 1.0]);
        for attr in 0..a {
            for dd in 0..d {
                assert!((g.value(k)[attr * d + dd] - region[dd]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_naive_double_loop_oracle_and_convex_hull() {
        let (a, d, r) = (3, 5, 6);
        let mut g = Graph::new();
        let (p, w, v) = constants(&mut g, a, d, r, 3);
        let (omega, k) = spatial_attention(&mut g, p, w, v).unwrap();

        // Independent oracle: explicit loops plus naive exp/sum softmax.
        let (pv, wv, vv) = (
            g.value(p).to_vec(),
            g.value(w).to_vec(),
            g.value(v).to_vec(),
        );
        for attr in 0..a {
            let mut scores = vec![0.0f64; r];
            for rr in 0..r {
                let mut s = 0.0;
                for i in 0..d {
                    for j in 0..d {
                        s += pv[attr * d + i] * wv[i * d + j] * vv[j * r + rr];
                    }
                }
                scores[rr] = s;
            }
            let sum: f64 = scores.iter().map(|s| s.exp()).sum();
            for rr in 0..r {
                let want = scores[rr].exp() / sum;
                let got = g.value(omega)[attr * r + rr];
                assert!((got - want).abs() < 1e-10, "omega[{attr},{rr}]");
            }
            for dd in 0..d {
                let want: f64 = (0..r)
                    .map(|rr| scores[rr].exp() / sum * vv[dd * r + rr])
                    .sum();
                let got = g.value(k)[attr * d + dd];
                assert!((got - want).abs() < 1e-10, "k[{attr},{dd}]");
                // Convex hull: bounded by per-channel region extremes.
                let lo = (0..r).map(|rr| vv[dd * r + rr]).fold(f64::INFINITY, f64::min);
                let hi = (0..r)
                    .map(|rr| vv[dd * r + rr])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(got >= lo - 1e-12 && got <= hi + 1e-12);
            }
        }
        // Rows sum to one.
        for attr in 0..a {
            let s: f64 = g.value(omega)[attr * r..(attr + 1) * r].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn descriptor_vanishes_for_constant_prototype_and_map() {
        let (a, d, r) = (2, 4, 3);
        let mut g = Graph::new();
        let p = g.param(a, d, vec![0.7; a * d]).unwrap();
        let v = g.constant(d, r, vec![-1.3; d * r]).unwrap();
        let q = channel_descriptor(&mut g, p, v, 1e-5).unwrap();
        for &x in g.value(q) {
            assert!(x.abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn constant_prototype_leaves_pooled_term_only() {
        let (a, d, r) = (2, 4, 3);
        let mut g = Graph::new();
        let p = g.param(a, d, vec![0.7; a * d]).unwrap();
        let mut rng = crate::rng::Rng::new(5);
        let vv: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
        let v = g.constant(d, r, vv.clone()).unwrap();
        let q = channel_descriptor(&mut g, p, v, 1e-5).unwrap();
        // Oracle: standardize the pooled vector directly.
        let pooled: Vec<f64> = (0..d)
            .map(|dd| (0..r).map(|rr| vv[dd * r + rr]).sum::<f64>() / r as f64)
            .collect();
        let want = crate::kernels::standardize(&pooled, 1e-5);
        for attr in 0..a {
            for dd in 0..d {
                assert!((g.value(q)[attr * d + dd] - want[dd]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn descriptor_matches_direct_mean_variance_oracle() {
        let (a, d, r) = (3, 6, 4);
        let mut g = Graph::new();
        let mut rng = crate::rng::Rng::new(8);
        let pv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let vv: Vec<f64> = (0..d * r).map(|_| rng.normal()).collect();
        let p = g.param(a, d, pv.clone()).unwrap();
        let v = g.constant(d, r, vv.clone()).unwrap();
        let eps = 1e-5;
        let q = channel_descriptor(&mut g, p, v, eps).unwrap();

        let std = |x: &[f64]| {
            let n = x.len() as f64;
            let mean = x.iter().sum::<f64>() / n;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            x.iter().map(|v| (v - mean) * inv).collect::<Vec<f64>>()
        };
        let pooled: Vec<f64> = (0..d)
            .map(|dd| (0..r).map(|rr| vv[dd * r + rr]).sum::<f64>() / r as f64)
            .collect();
        let pooled_n = std(&pooled);
        for attr in 0..a {
            let proto_n = std(&pv[attr * d..(attr + 1) * d]);
            for dd in 0..d {
                let want = proto_n[dd] + pooled_n[dd];
                let got = g.value(q)[attr * d + dd];
                assert!((got - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_weights_or_zero_descriptor_gate_at_half() {
        let (a, d, m) = (2, 8, 4);
        let mut g = Graph::new();
        let mut rng = crate::rng::Rng::new(4);
        let qv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let q = g.constant(a, d, qv).unwrap();
        let w2z = g.param(d / m, d, vec![0.0; d / m * d]).unwrap();
        let w3z = g.param(d, d / m, vec![0.0; d / m * d]).unwrap();
        let eta = channel_gate(&mut g, q, w2z, w3z).unwrap();
        for &x in g.value(eta) {
            assert_eq!(x, 0.5);
        }
        let q0 = g.constant(a, d, vec![0.0; a * d]).unwrap();
        let mut rng = crate::rng::Rng::new(6);
        let w2: Vec<f64> = (0..d / m * d).map(|_| rng.normal()).collect();
        let w3: Vec<f64> = (0..d / m * d).map(|_| rng.normal()).collect();
        let w2 = g.param(d / m, d, w2).unwrap();
        let w3 = g.param(d, d / m, w3).unwrap();
        let eta0 = channel_gate(&mut g, q0, w2, w3).unwrap();
        for &x in g.value(eta0) {
            assert_eq!(x, 0.5);
        }
    }

    #[test]
    fn gate_matches_naive_matrix_vector_oracle_and_stays_open() {
        let (a, d, m) = (3, 8, 4);
        let dm = d / m;
        let mut g = Graph::new();
        let mut rng = crate::rng::Rng::new(9);
        let qv: Vec<f64> = (0..a * d).map(|_| rng.normal()).collect();
        let w2v: Vec<f64> = (0..dm * d).map(|_| rng.normal() * 0.5).collect();
        let w3v: Vec<f64> = (0..d * dm).map(|_| rng.normal() * 0.5).collect();
        let q = g.constant(a, d, qv.clone()).unwrap();
        let w2 = g.param(dm, d, w2v.clone()).unwrap();
        let w3 = g.param(d, dm, w3v.clone()).unwrap();
        let eta = channel_gate(&mut g, q, w2, w3).unwrap();

        for attr in 0..a {
            // Oracle: naive matrix-vector chain.
            let mut hidden = vec![0.0f64; dm];
            for i in 0..dm {
                for j in 0..d {
                    hidden[i] += w2v[i * d + j] * qv[attr * d + j];
                }
                hidden[i] = hidden[i].max(0.0);
            }
            for o in 0..d {
                let mut pre = 0.0;
                for i in 0..dm {
                    pre += w3v[o * dm + i] * hidden[i];
                }
                let want = 1.0 / (1.0 + (-pre).exp());
                let got = g.value(eta)[attr * d + o];
                assert!((got - want).abs() < 1e-12);
                assert!(got > 0.0 && got < 1.0);
            }
        }
    }

    #[test]
    fn gate_application_is_entrywise() {
        let (a, d) = (2, 3);
        let mut g = Graph::new();
        let k = g.constant(a, d, vec![1.0, -2.0, 3.0, 0.5, 0.0, -1.0]).unwrap();
        let ones = g.constant(a, d, vec![1.0; a * d]).unwrap();
        let h = apply_gate(&mut g, k, ones).unwrap();
        assert_eq!(g.value(h), g.value(k));

        let zeros = g.constant(a, d, vec![0.0; a * d]).unwrap();
        let eta = g.constant(a, d, vec![0.9; a * d]).unwrap();
        let h0 = apply_gate(&mut g, zeros, eta).unwrap();
        assert!(g.value(h0).iter().all(|&x| x == 0.0));

        let kv = vec![0.3, -0.4, 1.2, 2.0, -0.7, 0.1];
        let ev = vec![0.2, 0.5, 0.9, 0.1, 0.6, 0.8];
        let k2 = g.constant(a, d, kv.clone()).unwrap();
        let e2 = g.constant(a, d, ev.clone()).unwrap();
        let h2 = apply_gate(&mut g, k2, e2).unwrap();
        for i in 0..a * d {
            assert_eq!(g.value(h2)[i], kv[i] * ev[i]);
            // Gates in (0,1) shrink every entry.
            assert!(g.value(h2)[i].abs() <= kv[i].abs());
        }
    }

    #[test]
    fn attention_is_shift_invariant_per_attribute() {
        // Adding a constant to all R scores of one attribute leaves its
        // softmax row unchanged; exercised through W1 since scores are
        // linear in v: shift v by adding c to a rank-one direction won't do,
        // so check at the kernel level on the softmax of shifted scores.
        let scores = [0.4, -1.0, 2.2, 0.0];
        let base = crate::kernels::softmax(&scores).unwrap();
        let shifted: Vec<f64> = scores.iter().map(|s| s + 7.3).collect();
        let moved = crate::kernels::softmax(&shifted).unwrap();
        for (a, b) in base.iter().zip(moved.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
