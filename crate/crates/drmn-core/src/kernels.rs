//! Elementary numeric kernels on plain slices. The autodiff graph and the
//! resampling paths build on these; they are also the directly-testable
//! scalar operations.

use crate::error::{Error, Result};

/// Max-subtracted softmax over a score vector. Output entries lie in (0,1]
/// and sum to 1; shift-invariant by construction.
pub fn softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("softmax"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericDomain {
            op: "softmax",
            detail: "non-finite input".into(),
        });
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Log-softmax via max subtraction and a single logsumexp.
pub fn log_softmax(x: &[f64]) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::EmptyInput("log_softmax"));
    }
    if !x.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericDomain {
            op: "log_softmax",
            detail: "non-finite input".into(),
        });
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
    Ok(x.iter().map(|v| v - lse).collect())
}

/// Standardize a vector to mean 0, variance 1 (population variance, eps
/// inside the square root). A constant vector maps to the zero vector.
pub fn standardize(x: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// Layer normalization: standardize, then apply per-entry gain and bias.
pub fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != x.len() || bias.len() != x.len() {
        return Err(Error::Shape {
            op: "layer_norm",
            detail: format!(
                "x has {} entries, gain {}, bias {}",
                x.len(),
                gain.len(),
                bias.len()
            ),
        });
    }
    if eps <= 0.0 {
        return Err(Error::NumericDomain {
            op: "layer_norm",
            detail: format!("eps must be positive, got {eps}"),
        });
    }
    let std = standardize(x, eps);
    Ok(std
        .iter()
        .zip(gain.iter().zip(bias.iter()))
        .map(|(s, (g, b))| s * g + b)
        .collect())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// out(m x n) = a(m x k) @ b(k x n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// out(m x n) = a(m x k) @ b(n x k)^T, row-major.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Resample one channel plane from (h, w) to (oh, ow): bilinear when
/// upsizing, box-average when downsizing, identity when equal. Mixed
/// directions per axis are handled by resampling height then width.
pub fn resample_plane(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if h == oh && w == ow {
        return src.to_vec();
    }
    // Separable: rows first, then columns.
    let rows = resample_axis_major(src, h, w, oh);
    transpose_then(&rows, oh, w, ow)
}

// Resample along the row axis: (h, w) -> (oh, w).
fn resample_axis_major(src: &[f64], h: usize, w: usize, oh: usize) -> Vec<f64> {
    if h == oh {
        return src.to_vec();
    }
    let mut out = vec![0.0; oh * w];
    if oh > h {
        // Bilinear, half-pixel centers.
        let scale = h as f64 / oh as f64;
        for oi in 0..oh {
            let pos = (oi as f64 + 0.5) * scale - 0.5;
            let i0 = pos.floor();
            let frac = pos - i0;
            let a = (i0.max(0.0) as usize).min(h - 1);
            let b = ((i0 + 1.0).max(0.0) as usize).min(h - 1);
            for j in 0..w {
                out[oi * w + j] = src[a * w + j] * (1.0 - frac) + src[b * w + j] * frac;
            }
        }
    } else {
        // Box average over fractional source spans.
        let scale = h as f64 / oh as f64;
        for oi in 0..oh {
            let lo = oi as f64 * scale;
            let hi = (oi + 1) as f64 * scale;
            let i_lo = lo.floor() as usize;
            let i_hi = (hi.ceil() as usize).min(h);
            for j in 0..w {
                let mut acc = 0.0;
                for i in i_lo..i_hi {
                    let cover = (hi.min((i + 1) as f64) - lo.max(i as f64)).max(0.0);
                    acc += src[i * w + j] * cover;
                }
                out[oi * w + j] = acc / (hi - lo);
            }
        }
    }
    out
}

// Resample along the column axis by transposing, reusing the row kernel,
// and transposing back: (h, w) -> (h, ow).
fn transpose_then(src: &[f64], h: usize, w: usize, ow: usize) -> Vec<f64> {
    if w == ow {
        return src.to_vec();
    }
    let mut t = vec![0.0; w * h];
    for i in 0..h {
        for j in 0..w {
            t[j * h + i] = src[i * w + j];
        }
    }
    let rt = resample_axis_major(&t, w, h, ow);
    let mut out = vec![0.0; h * ow];
    for j in 0..ow {
        for i in 0..h {
            out[i * ow + j] = rt[j * h + i];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (i, (a, e)) in actual.iter().zip(expected.iter()).enumerate() {
            assert!(
                (a - e).abs() <= tol,
                "index {i}: {a} vs {e} (diff {})",
                (a - e).abs()
            );
        }
    }

    #[test]
    fn softmax_symmetric_input() {
        let y = softmax(&[0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_close(&y, &[0.25; 4], 1e-15);
    }

    #[test]
    fn softmax_ln2_case() {
        let y = softmax(&[2.0f64.ln(), 0.0]).unwrap();
        assert_close(&y, &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn softmax_matches_naive_two_pass_oracle() {
        // Independent oracle: plain exp/sum without max subtraction.
        let x: [f64; 7] = [0.3, -1.2, 2.7, 0.05, -0.6, 1.9, -2.2];
        let sum: f64 = x.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.iter().map(|v| v.exp() / sum).collect();
        let y = softmax(&x).unwrap();
        assert_close(&y, &oracle, 1e-12);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax(&[1.0, f64::NAN]),
            Err(Error::NumericDomain { .. })
        ));
    }

    #[test]
    fn layer_norm_constant_vector_is_zero() {
        let y = layer_norm(&[3.0, 3.0, 3.0], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_close(&y, &[0.0; 3], 1e-12);
    }

    #[test]
    fn layer_norm_already_standardized() {
        // eps -> 0 limit: [1,-1] has mean 0, var 1.
        let y = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-12).unwrap();
        assert_close(&y, &[1.0, -1.0], 1e-9);
    }

    #[test]
    fn layer_norm_matches_direct_formula_oracle() {
        let x: Vec<f64> = (0..16).map(|i| ((i * 37) % 11) as f64 * 0.3 - 1.4).collect();
        let eps = 1e-5;
        // Independent oracle: direct mean/variance computation.
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let oracle: Vec<f64> = x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();
        let y = layer_norm(&x, &vec![1.0; 16], &vec![0.0; 16], eps).unwrap();
        assert_close(&y, &oracle, 1e-10);
        // Standardization is exact up to eps: tiny eps gives variance 1.
        let z = layer_norm(&x, &vec![1.0; 16], &vec![0.0; 16], 1e-12).unwrap();
        let mean_z = z.iter().sum::<f64>() / n;
        let var_z = z.iter().map(|v| (v - mean_z).powi(2)).sum::<f64>() / n;
        assert!(mean_z.abs() < 1e-10);
        assert!((var_z - 1.0).abs() < 1e-6);
        // At the default eps the deviation is bounded by eps/var.
        let mean_y = y.iter().sum::<f64>() / n;
        let var_y = y.iter().map(|v| (v - mean_y).powi(2)).sum::<f64>() / n;
        assert!((var_y - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_length_mismatch() {
        assert!(matches!(
            layer_norm(&[1.0, 2.0], &[1.0], &[0.0, 0.0], 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn standardize_zero_variance_maps_to_zero() {
        let y = standardize(&[5.0, 5.0, 5.0, 5.0], 1e-5);
        assert_close(&y, &[0.0; 4], 1e-12);
    }

    #[test]
    fn matmul_small_case() {
        // [[1,2],[3,4]] @ [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_close(&c, &[19.0, 22.0, 43.0, 50.0], 1e-12);
    }

    #[test]
    fn matmul_bt_matches_matmul_with_transposed_arg() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5, -1.0, 2.0, 1.5, 0.0, -2.5]; // 2x3, used as B^T
        let direct = matmul_bt(&a, &b, 2, 3, 2);
        // Oracle: explicit transpose then plain matmul.
        let bt = [0.5, 1.5, -1.0, 0.0, 2.0, -2.5]; // 3x2
        let via_t = matmul(&a, &bt, 2, 3, 2);
        assert_close(&direct, &via_t, 1e-12);
    }

    #[test]
    fn resample_identity_when_same_size() {
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(resample_plane(&src, 2, 2, 2, 2), src.to_vec());
    }

    #[test]
    fn resample_downsize_is_block_mean_for_integer_factors() {
        // 4x4 -> 2x2 with factor 2: each output is the mean of a 2x2 block.
        let src: Vec<f64> = (0..16).map(|i| i as f64).collect();
        let out = resample_plane(&src, 4, 4, 2, 2);
        assert_close(&out, &[2.5, 4.5, 10.5, 12.5], 1e-12);
    }

    #[test]
    fn resample_upsize_preserves_constant_planes() {
        let src = vec![3.25; 4];
        let out = resample_plane(&src, 2, 2, 4, 4);
        assert_close(&out, &vec![3.25; 16], 1e-12);
    }

    #[test]
    fn resample_upsize_interpolates_between_samples() {
        // 1x2 -> 1x4 bilinear with half-pixel centers:
        // positions 0.25,0.75,1.25,1.75 over sources at 0,1 (clamped).
        let out = resample_plane(&[0.0, 1.0], 1, 2, 1, 4);
        assert_close(&out, &[0.0, 0.25, 0.75, 1.0], 1e-12);
    }
}
