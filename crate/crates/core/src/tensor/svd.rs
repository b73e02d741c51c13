//! Thin SVD by one-sided (Hestenes) Jacobi rotations.
//!
//! For `w` of shape `n×m` the result has `r = min(n, m)` columns in `U` and
//! `V`. Zero singular values are kept, with the matching `U` columns
//! completed to an orthonormal set. Each `U` column is sign-normalized so its
//! largest-magnitude entry is positive.

use super::Tensor;
use crate::error::{MakdError, Result};

const ROTATION_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct Svd {
    /// `n × r`, orthonormal columns.
    pub u: Tensor,
    /// Descending, nonnegative.
    pub s: Vec<f64>,
    /// `m × r`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let (n, r) = (self.u.rows(), self.s.len());
        let mut us = self.u.clone();
        for i in 0..n {
            for (j, s) in self.s.iter().enumerate() {
                us.data_mut()[i * r + j] *= s;
            }
        }
        us.matmul_nt(&self.v).expect("svd factors are conformant")
    }
}

pub fn svd(w: &Tensor) -> Result<Svd> {
    if w.shape().len() != 2 {
        return Err(MakdError::Shape { op: "svd", lhs: w.shape().to_vec(), rhs: vec![] });
    }
    if !w.all_finite() {
        return Err(MakdError::NonFinite("svd input".into()));
    }
    let (n, m) = (w.rows(), w.cols());
    if n >= m {
        jacobi(w)
    } else {
        let t = jacobi(&w.transpose())?;
        // Wᵀ = U' S V'ᵀ  ⇒  W = V' S U'ᵀ; re-fix signs on the new U.
        let mut out = Svd { u: t.v, s: t.s, v: t.u };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// Tall-or-square case (`n >= m`). Columns are stored as contiguous rows.
fn jacobi(w: &Tensor) -> Result<Svd> {
    let (n, m) = (w.rows(), w.cols());
    let mut cols: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| w.at(i, j)).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();

    let max_sweeps = 10 * n.max(m);
    let mut converged = false;
    for _ in 0..max_sweeps {
        let mut rotated = false;
        for p in 0..m {
            for q in p + 1..m {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    let mut g = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        a += x * x;
                        b += y * y;
                        g += x * y;
                    }
                    (a, b, g)
                };
                if gamma == 0.0 || gamma.abs() <= ROTATION_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MakdError::NoConvergence { sweeps: max_sweeps });
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms[order[0]];
    let negligible = smax * (n.max(m) as f64) * f64::EPSILON;
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    let mut s = Vec::with_capacity(m);
    let mut v_cols = Vec::with_capacity(m);
    for &j in &order {
        let sigma = norms[j];
        if sigma > negligible && sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|v| v / sigma).collect());
        } else {
            u_cols.push(Vec::new());
        }
        s.push(sigma);
        v_cols.push(vcols[j].clone());
    }
    complete_basis(&mut u_cols, n);

    let mut out = Svd { u: from_columns(&u_cols, n), s, v: from_columns(&v_cols, m) };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills empty columns with unit vectors orthogonal to every other column.
fn complete_basis(cols: &mut [Vec<f64>], n: usize) {
    for j in 0..cols.len() {
        if !cols[j].is_empty() {
            continue;
        }
        let mut best: Option<Vec<f64>> = None;
        let mut best_norm = 0.0;
        for e in 0..n {
            let mut cand = vec![0.0; n];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes for numerical orthogonality.
            for _ in 0..2 {
                for other in cols.iter().filter(|c| !c.is_empty()) {
                    let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= dot * o;
                    }
                }
            }
            let norm = cand.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > best_norm {
                best_norm = norm;
                best = Some(cand);
            }
            if best_norm > 0.5 {
                break;
            }
        }
        let v = best.expect("orthogonal complement exists while columns < n");
        cols[j] = v.into_iter().map(|x| x / best_norm).collect();
    }
}

fn from_columns(cols: &[Vec<f64>], n: usize) -> Tensor {
    let r = cols.len();
    let mut data = vec![0.0; n * r];
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            data[i * r + j] = v;
        }
    }
    Tensor::new(vec![n, r], data).expect("column count matches")
}

fn fix_signs(svd: &mut Svd) {
    let r = svd.s.len();
    let (n, m) = (svd.u.rows(), svd.v.rows());
    for j in 0..r {
        let mut pivot = 0.0f64;
        for i in 0..n {
            let v = svd.u.at(i, j);
            if v.abs() > pivot.abs() {
                pivot = v;
            }
        }
        if pivot < 0.0 {
            for i in 0..n {
                svd.u.data_mut()[i * r + j] *= -1.0;
            }
            for i in 0..m {
                svd.v.data_mut()[i * r + j] *= -1.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_spectrum() {
        let w = Tensor::from_diag(&[3.0, 2.0, 1.0]);
        let d = svd(&w).unwrap();
        for (got, want) in d.s.iter().zip([3.0, 2.0, 1.0]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_has_unit_spectrum() {
        let d = svd(&Tensor::eye(4)).unwrap();
        assert!(d.s.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn rank_deficient_keeps_orthonormal_u() {
        let w = Tensor::from_diag(&[3.0, 2.0, 0.0]);
        let d = svd(&w).unwrap();
        let utu = d.u.transpose().matmul(&d.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::eye(3)) < 1e-12);
        assert!(d.reconstruct().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let w = Tensor::zeros(&[3, 2]);
        let d = svd(&w).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        let utu = d.u.transpose().matmul(&d.u).unwrap();
        assert!(utu.max_abs_diff(&Tensor::eye(2)) < 1e-12);
    }

    #[test]
    fn wide_matrix_signs_fixed_on_u() {
        let w = Tensor::from_rows(&[[1.0, -2.0, 0.5, 3.0], [-4.0, 0.0, 1.0, 2.0]]).unwrap();
        let d = svd(&w).unwrap();
        assert_eq!(d.u.shape(), &[2, 2]);
        assert_eq!(d.v.shape(), &[4, 2]);
        for j in 0..2 {
            let col = [d.u.at(0, j), d.u.at(1, j)];
            let pivot = if col[0].abs() >= col[1].abs() { col[0] } else { col[1] };
            assert!(pivot > 0.0);
        }
        assert!(d.reconstruct().max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let w = Tensor::from_rows(&[[f64::NAN, 1.0]]).unwrap();
        assert!(svd(&w).is_err());
    }

    mod against_nalgebra {
        use super::*;
        use proptest::prelude::*;

        fn check(w: &Tensor) {
            let (n, m) = (w.rows(), w.cols());
            let ours = svd(w).unwrap();
            let oracle = nalgebra::DMatrix::from_row_slice(n, m, w.data()).svd(false, false);
            let mut want: Vec<f64> = oracle.singular_values.iter().copied().collect();
            want.sort_by(|a, b| b.total_cmp(a));
            let scale = 1.0 + want[0];
            for (a, b) in ours.s.iter().zip(&want) {
                assert!((a - b).abs() < 1e-10 * scale, "{:?} vs {want:?}", ours.s);
            }
            assert!(ours.reconstruct().max_abs_diff(w) < 1e-10 * scale);
            let r = ours.s.len();
            for f in [&ours.u, &ours.v] {
                let gram = f.transpose().matmul(f).unwrap();
                assert!(gram.max_abs_diff(&Tensor::eye(r)) < 1e-10);
            }
            assert!(ours.s.windows(2).all(|p| p[0] >= p[1]));
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn spectrum_matches_reference(
                n in 1usize..12,
                m in 1usize..12,
                seed in any::<u64>(),
                rank_cap in 1usize..12,
            ) {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                // Products of thin factors give exactly rank-deficient inputs.
                let k = rank_cap.min(n).min(m);
                let a = Tensor::randn(&[n, k], 1.0, &mut rng);
                let b = Tensor::randn(&[k, m], 1.0, &mut rng);
                check(&a.matmul(&b).unwrap());
                check(&Tensor::randn(&[n, m], 1.0, &mut rng));
            }
        }
    }
}
