//! Scaled dot-product attention with an optional cross-frame variant.
//!
//! Accumulation runs in f64 so row-stochasticity of the weights and the
//! identical-frames identity hold well below 1e-6 even for long
//! concatenated key sequences.

use ndarray::Array2;

use crate::error::{Error, Result};

fn check_qkv(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Result<()> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            "attention q/k dims",
            format!("key dim {}", q.ncols()),
            format!("{}", k.ncols()),
        ));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::shape(
            "attention k/v rows",
            format!("{} rows", k.nrows()),
            format!("{}", v.nrows()),
        ));
    }
    Ok(())
}

/// Row-stochastic attention weights `softmax(q kᵀ / sqrt(d))` in f64.
pub fn attention_weights(q: &Array2<f32>, k: &Array2<f32>) -> Result<Array2<f64>> {
    if q.ncols() != k.ncols() {
        return Err(Error::shape(
            "attention_weights",
            format!("key dim {}", q.ncols()),
            format!("{}", k.ncols()),
        ));
    }
    let (n, m, d) = (q.nrows(), k.nrows(), q.ncols());
    let scale = 1.0 / (d as f64).sqrt();
    let mut weights = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let mut row_max = f64::NEG_INFINITY;
        for j in 0..m {
            let mut dot = 0.0f64;
            for c in 0..d {
                dot += q[[i, c]] as f64 * k[[j, c]] as f64;
            }
            let s = dot * scale;
            weights[[i, j]] = s;
            row_max = row_max.max(s);
        }
        let mut denom = 0.0f64;
        for j in 0..m {
            let e = (weights[[i, j]] - row_max).exp();
            weights[[i, j]] = e;
            denom += e;
        }
        for j in 0..m {
            weights[[i, j]] /= denom;
        }
    }
    Ok(weights)
}

/// `softmax(q kᵀ / sqrt(d)) v`. Shapes: q `[n, d]`, k `[m, d]`, v `[m, dv]`.
pub fn attention(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Result<Array2<f32>> {
    check_qkv(q, k, v)?;
    let weights = attention_weights(q, k)?;
    let (n, m, dv) = (q.nrows(), v.nrows(), v.ncols());
    let mut out = Array2::<f32>::zeros((n, dv));
    for i in 0..n {
        for c in 0..dv {
            let mut acc = 0.0f64;
            for j in 0..m {
                acc += weights[[i, j]] * v[[j, c]] as f64;
            }
            out[[i, c]] = acc as f32;
        }
    }
    Ok(out)
}

/// Cross-frame attention: each frame's queries attend over the concatenation
/// of every frame's keys and values along the token axis. A single-frame
/// batch takes the same code path as [`attention`] and is therefore an exact
/// identity with it.
pub fn cross_frame_attention(
    queries: &[Array2<f32>],
    keys: &[Array2<f32>],
    values: &[Array2<f32>],
) -> Result<Vec<Array2<f32>>> {
    if queries.is_empty() || queries.len() != keys.len() || keys.len() != values.len() {
        return Err(Error::shape(
            "cross_frame_attention",
            "equal non-zero frame counts for q/k/v",
            format!("{}/{}/{}", queries.len(), keys.len(), values.len()),
        ));
    }
    let k_dim = keys[0].dim();
    let v_dim = values[0].dim();
    for (k, v) in keys.iter().zip(values.iter()) {
        if k.dim() != k_dim || v.dim() != v_dim {
            return Err(Error::shape(
                "cross_frame_attention",
                format!("uniform k {:?} / v {:?}", k_dim, v_dim),
                format!("k {:?} / v {:?}", k.dim(), v.dim()),
            ));
        }
    }
    let all_keys = ndarray::concatenate(
        ndarray::Axis(0),
        &keys.iter().map(|k| k.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::shape("cross_frame_attention concat", "stackable keys", e))?;
    let all_values = ndarray::concatenate(
        ndarray::Axis(0),
        &values.iter().map(|v| v.view()).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::shape("cross_frame_attention concat", "stackable values", e))?;
    queries
        .iter()
        .map(|q| attention(q, &all_keys, &all_values))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_mat(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Array2<f32> {
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0))
    }

    /// Direct dense-softmax oracle, written independently of the
    /// implementation path (plain loops, no shared helpers).
    fn oracle(q: &Array2<f32>, k: &Array2<f32>, v: &Array2<f32>) -> Array2<f64> {
        let (n, m, d, dv) = (q.nrows(), k.nrows(), q.ncols(), v.ncols());
        let mut out = Array2::<f64>::zeros((n, dv));
        for i in 0..n {
            let mut scores = vec![0.0f64; m];
            for (j, s) in scores.iter_mut().enumerate() {
                for c in 0..d {
                    *s += q[[i, c]] as f64 * k[[j, c]] as f64;
                }
                *s /= (d as f64).sqrt();
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..dv {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += exps[j] / denom * v[[j, c]] as f64;
                }
                out[[i, c]] = acc;
            }
        }
        out
    }

    #[test]
    fn matches_dense_softmax_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (q, k, v) = (
            random_mat(&mut rng, 5, 4),
            random_mat(&mut rng, 7, 4),
            random_mat(&mut rng, 7, 3),
        );
        let got = attention(&q, &k, &v).unwrap();
        let want = oracle(&q, &k, &v);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((*g as f64 - w).abs() < 1e-6, "got {g}, want {w}");
        }
    }

    #[test]
    fn rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let q = random_mat(&mut rng, 6, 8);
        let k = random_mat(&mut rng, 9, 8);
        let w = attention_weights(&q, &k).unwrap();
        for row in w.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
        }
    }

    #[test]
    fn single_frame_batch_is_exact_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let (q, k, v) = (
            random_mat(&mut rng, 4, 4),
            random_mat(&mut rng, 4, 4),
            random_mat(&mut rng, 4, 4),
        );
        let per_frame = attention(&q, &k, &v).unwrap();
        let batched =
            cross_frame_attention(&[q.clone()], &[k.clone()], &[v.clone()]).unwrap();
        assert_eq!(batched[0], per_frame);
    }

    #[test]
    fn identical_frames_match_per_frame_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(14);
        let (q, k, v) = (
            random_mat(&mut rng, 8, 4),
            random_mat(&mut rng, 8, 4),
            random_mat(&mut rng, 8, 4),
        );
        let per_frame = attention(&q, &k, &v).unwrap();
        let frames = 5;
        let batched = cross_frame_attention(
            &vec![q.clone(); frames],
            &vec![k.clone(); frames],
            &vec![v.clone(); frames],
        )
        .unwrap();
        for f in 0..frames {
            for (g, w) in batched[f].iter().zip(per_frame.iter()) {
                assert!((g - w).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn distinct_frames_differ_from_per_frame_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let (q1, k1, v1) = (
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
        );
        let (q2, k2, v2) = (
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
            random_mat(&mut rng, 6, 4),
        );
        let solo = attention(&q1, &k1, &v1).unwrap();
        let batched = cross_frame_attention(&[q1, q2], &[k1, k2], &[v1, v2]).unwrap();
        let max_diff = batched[0]
            .iter()
            .zip(solo.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 1e-4, "cross-frame mixing had no effect");
    }

    #[test]
    fn ragged_shapes_rejected() {
        let q = array![[1.0f32, 0.0], [0.0, 1.0]];
        let k_ok = q.clone();
        let k_bad = array![[1.0f32, 0.0, 0.0]];
        assert!(attention_weights(&q, &k_bad).is_err());
        let frames_bad = cross_frame_attention(
            &[q.clone(), q.clone()],
            &[k_ok, array![[1.0f32, 0.0]]],
            &[q.clone(), q.clone()],
        );
        assert!(frames_bad.is_err());
    }
}
