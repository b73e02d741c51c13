use rayon::prelude::*;

use super::Tensor;
use crate::error::{MakdError, Result};

/// Additive surrogate for `-inf` on masked attention logits.
pub const MASK_FILL: f64 = -1e9;

// Below this many multiply-adds a product runs on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// Rows of the output computed together, so each row of `b` is loaded once
/// per group.
const ROW_BLOCK: usize = 4;

/// Output columns held in registers per tile.
const COL_BLOCK: usize = 8;

/// `out[rows×n] = a[rows×k] · b[k×n]` for one group of at most `ROW_BLOCK`
/// rows. Each output element is summed over `p` in increasing order.
fn nn_rows(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize) {
    let rows = out.len() / n;
    let full = n - n % COL_BLOCK;
    if rows == ROW_BLOCK {
        for j0 in (0..full).step_by(COL_BLOCK) {
            let mut acc = [[0.0f64; COL_BLOCK]; ROW_BLOCK];
            for p in 0..k {
                let b_blk: &[f64; COL_BLOCK] = b[p * n + j0..p * n + j0 + COL_BLOCK].try_into().unwrap();
                for (r, acc_r) in acc.iter_mut().enumerate() {
                    let av = a[r * k + p];
                    for c in 0..COL_BLOCK {
                        acc_r[c] += av * b_blk[c];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                out[r * n + j0..r * n + j0 + COL_BLOCK].copy_from_slice(acc_r);
            }
        }
    } else {
        for r in 0..rows {
            for j0 in (0..full).step_by(COL_BLOCK) {
                let mut acc = [0.0f64; COL_BLOCK];
                for p in 0..k {
                    let av = a[r * k + p];
                    let b_blk = &b[p * n + j0..p * n + j0 + COL_BLOCK];
                    for c in 0..COL_BLOCK {
                        acc[c] += av * b_blk[c];
                    }
                }
                out[r * n + j0..r * n + j0 + COL_BLOCK].copy_from_slice(&acc);
            }
        }
    }
    if full < n {
        for r in 0..rows {
            let o = &mut out[r * n + full..(r + 1) * n];
            for p in 0..k {
                let av = a[r * k + p];
                for (x, &bv) in o.iter_mut().zip(&b[p * n + full..(p + 1) * n]) {
                    *x += av * bv;
                }
            }
        }
    }
}

/// `out[m×n] = a[m×k] · b[k×n]`, with `out` zero on entry. Each output
/// element is accumulated over `p = 0..k` in order, so results do not depend
/// on the thread count.
pub(crate) fn matmul_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let group = |(g, out_rows): (usize, &mut [f64])| {
        let r0 = g * ROW_BLOCK;
        let nrows = out_rows.len() / n;
        nn_rows(&a[r0 * k..(r0 + nrows) * k], b, out_rows, k, n);
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        out.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(group);
    } else {
        out.chunks_mut(ROW_BLOCK * n).enumerate().for_each(group);
    }
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`, with `out` zero on entry.
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    let mut bt = vec![0.0; k * n];
    for (j, b_row) in b.chunks(k).enumerate() {
        for (p, &v) in b_row.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul_nn(a, &bt, out, m, k, n);
}

/// Row-wise softmax. `mask[i] == false` excludes entry `i` (same layout as
/// `x`); excluded entries come out exactly zero. A row with every entry
/// excluded is an error.
pub fn softmax_rows(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if let Some(m) = mask {
        if m.len() != x.len() {
            return Err(MakdError::Shape { op: "softmax_rows", lhs: x.shape().to_vec(), rhs: vec![m.len()] });
        }
    }
    let cols = x.cols();
    let mut out = x.clone();
    for (r, row) in out.data_mut().chunks_mut(cols).enumerate() {
        if let Some(m) = mask {
            let mrow = &m[r * cols..(r + 1) * cols];
            if !mrow.iter().any(|&keep| keep) {
                return Err(MakdError::DegenerateRow { row: r });
            }
            for (v, &keep) in row.iter_mut().zip(mrow) {
                if !keep {
                    *v += MASK_FILL;
                }
            }
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(out)
}

/// Per-row statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub normalized: Tensor,
    pub inv_std: Vec<f64>,
}

/// Normalizes each row to zero mean and unit (population) variance, then
/// applies `gain` and `bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    if eps <= 0.0 {
        return Err(MakdError::invalid("layer_norm eps must be positive"));
    }
    let d = x.cols();
    if gain.len() != d || bias.len() != d {
        return Err(MakdError::Shape { op: "layer_norm", lhs: x.shape().to_vec(), rhs: gain.shape().to_vec() });
    }
    let mut normalized = x.clone();
    let mut inv_std = Vec::with_capacity(x.rows());
    for row in normalized.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let is = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * is;
        }
        inv_std.push(is);
    }
    let mut out = normalized.clone();
    for row in out.data_mut().chunks_mut(d) {
        for ((v, g), b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// GELU flavour. `Tanh` is the usual approximation found in BERT/GPT-2
/// checkpoints; `Erf` is the exact form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GeluKind {
    #[default]
    Tanh,
    Erf,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `tanh` through a single `exp`; absolute error stays near 1e-16, which is
/// all the GELU needs, at well under half the cost of the libm routine.
fn fast_tanh(u: f64) -> f64 {
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

fn gelu_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            0.5 * x * (1.0 + fast_tanh(inner))
        }
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
    }
}

fn gelu_grad_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Tanh => {
            let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
            let t = fast_tanh(inner);
            let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
        }
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
    }
}

pub fn gelu(x: &Tensor, kind: GeluKind) -> Tensor {
    x.map(|v| gelu_scalar(v, kind))
}

/// Elementwise derivative of [`gelu`].
pub fn gelu_grad(x: &Tensor, kind: GeluKind) -> Tensor {
    x.map(|v| gelu_grad_scalar(v, kind))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_hand_case() {
        let a = Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[[0.0], [1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric_pair() {
        let x = Tensor::from_rows(&[[0.0, 0.0]]).unwrap();
        assert_eq!(softmax_rows(&x, None).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_large_logit_is_stable() {
        let x = Tensor::from_rows(&[[1000.0, 0.0]]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.all_finite());
    }

    #[test]
    fn softmax_matches_exp_normalize() {
        let x = Tensor::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let y = softmax_rows(&x, None).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((y.data()[i] - v.exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = Tensor::from_rows(&[[0.3, 5.0, -1.0]]).unwrap();
        let y = softmax_rows(&x, Some(&[true, false, true])).unwrap();
        assert_eq!(y.data()[1], 0.0);
        assert!((y.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::from_rows(&[[1.0, 2.0], [0.0, 0.0]]).unwrap();
        let err = softmax_rows(&x, Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, MakdError::DegenerateRow { row: 1 }));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_rows(&[[4.0, 4.0, 4.0]]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::full(&[3], 1.0), &Tensor::zeros(&[3]), 1e-12).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn layer_norm_already_normalized() {
        let x = Tensor::from_rows(&[[1.0, -1.0]]).unwrap();
        let (y, _) = layer_norm(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-14).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!((y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let x = Tensor::zeros(&[1, 2]);
        assert!(layer_norm(&x, &Tensor::zeros(&[2]), &Tensor::zeros(&[2]), 0.0).is_err());
    }

    #[test]
    fn gelu_asymptotes() {
        for kind in [GeluKind::Tanh, GeluKind::Erf] {
            assert_eq!(gelu_scalar(0.0, kind), 0.0);
            assert!((gelu_scalar(10.0, kind) - 10.0).abs() < 1e-9);
            assert!(gelu_scalar(-10.0, kind).abs() < 1e-9);
        }
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        out
    }

    #[test]
    fn tiled_matmul_matches_triple_loop_on_ragged_shapes() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        // Remainders in both tile directions, plus one case above the
        // parallel threshold.
        for (m, k, n) in [(1, 1, 1), (3, 5, 7), (4, 8, 8), (5, 3, 9), (13, 17, 11), (9, 1, 17), (70, 40, 33)] {
            let a = Tensor::randn(&[m, k], 1.0, &mut rng);
            let b = Tensor::randn(&[k, n], 1.0, &mut rng);
            let want = naive_matmul(&a, &b);
            let got = a.matmul(&b).unwrap();
            let nt = a.matmul_nt(&b.transpose()).unwrap();
            for ((x, y), z) in got.data().iter().zip(&want).zip(nt.data()) {
                assert!((x - y).abs() < 1e-12 * (1.0 + y.abs()), "{m}x{k}x{n}");
                assert!((z - y).abs() < 1e-12 * (1.0 + y.abs()), "{m}x{k}x{n} nt");
            }
        }
    }

    /// `erf` from its Maclaurin series, accurate to ~1e-15 for |x| < 3.
    fn series_erf(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        for n in 1..200 {
            term *= -x * x / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn exact_gelu_matches_series_and_tanh_form_stays_close() {
        for i in -40..=40 {
            let x = i as f64 * 0.1;
            let exact = 0.5 * x * (1.0 + series_erf(x / std::f64::consts::SQRT_2));
            assert!((gelu_scalar(x, GeluKind::Erf) - exact).abs() < 1e-12, "x = {x}");
            assert!((gelu_scalar(x, GeluKind::Tanh) - exact).abs() < 1e-3, "x = {x}");
            let libm_tanh = 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh());
            assert!((gelu_scalar(x, GeluKind::Tanh) - libm_tanh).abs() < 1e-15, "x = {x}");
        }
    }
}
