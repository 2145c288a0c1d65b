//! Thin SVD by one-sided (Hestenes) Jacobi rotations, and the second
//! singular value with its analytic gradient.
//!
//! Matrices in this crate are small (tens of rows, at most a few hundred
//! columns), so Jacobi's robustness and high relative accuracy matter more
//! than its cost.

use std::sync::atomic::{AtomicUsize, Ordering};

use super::Tensor;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;
const ORTH_TOL: f64 = 1e-15;
const DEGENERATE_GAP: f64 = 1e-9;

static DEGENERATE_GRADIENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of σ₂ gradients taken at a (near-)repeated singular value so far.
pub fn degenerate_gradient_count() -> usize {
    DEGENERATE_GRADIENTS.load(Ordering::Relaxed)
}

/// `M = U · diag(S) · Vᵀ` with `U: m×r`, `V: n×r`, `r = min(m, n)`.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Tensor,
    pub s: Vec<f64>,
    pub v: Tensor,
}

pub fn svd(m: &Tensor) -> Result<Svd> {
    if m.shape().len() != 2 {
        return Err(Error::shape("svd", format!("expected rank 2, got {:?}", m.shape())));
    }
    let (rows, cols) = (m.rows(), m.cols());
    if rows == 0 || cols == 0 {
        return Err(Error::shape("svd", "empty matrix"));
    }
    if m.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input"));
    }
    if rows >= cols {
        let cols_major = to_columns(m.values(), rows, cols);
        let (u, s, v) = jacobi(cols_major, rows)?;
        Ok(Svd {
            u: from_columns(&u, rows),
            s,
            v: from_columns(&v, cols),
        })
    } else {
        // Factor Mᵀ = V S Uᵀ and swap.
        let mt = m.transpose();
        let cols_major = to_columns(mt.values(), cols, rows);
        let (v, s, u) = jacobi(cols_major, cols)?;
        Ok(Svd {
            u: from_columns(&u, rows),
            s,
            v: from_columns(&v, cols),
        })
    }
}

fn to_columns(values: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..cols)
        .map(|j| (0..rows).map(|i| values[i * cols + j]).collect())
        .collect()
}

fn from_columns(columns: &[Vec<f64>], rows: usize) -> Tensor {
    let k = columns.len();
    let mut out = vec![0.0; rows * k];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * k + j] = *v;
        }
    }
    Tensor::from_parts(vec![rows, k], out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi on the columns of a tall matrix (`rows ≥ columns.len()`).
/// Returns (left vectors, singular values descending, right vectors).
#[allow(clippy::type_complexity)]
fn jacobi(mut a: Vec<Vec<f64>>, rows: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // Columns below this squared norm are round-off in a rank-deficient input.
    let floor = (rows as f64 * f64::EPSILON).powi(2) * a.iter().map(|c| dot(c, c)).sum::<f64>();
    let mut converged = n < 2;
    let mut residual = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        residual = 0.0f64;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&a[p], &a[p]);
                let beta = dot(&a[q], &a[q]);
                let gamma = dot(&a[p], &a[q]);
                if alpha <= floor || beta <= floor || gamma == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= ORTH_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut a, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        converged = residual <= ORTH_TOL;
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = a.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let smax = norms.iter().cloned().fold(0.0, f64::max);
    let cutoff = smax * 1e-14 * (rows.max(n) as f64);
    let mut s = Vec::with_capacity(n);
    let mut u: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vv = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        vv.push(v[j].clone());
        if sigma > cutoff && sigma > 0.0 {
            s.push(sigma);
            u.push(a[j].iter().map(|x| x / sigma).collect());
        } else {
            s.push(0.0);
            u.push(vec![0.0; rows]);
            pending.push(slot);
        }
    }
    for slot in pending {
        u[slot] = complete_basis(&u, slot, rows);
    }
    Ok((u, s, vv))
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

/// Unit vector orthogonal to every non-zero column of `basis` other than `skip`.
fn complete_basis(basis: &[Vec<f64>], skip: usize, rows: usize) -> Vec<f64> {
    let mut best = vec![0.0; rows];
    let mut best_norm = -1.0;
    for k in 0..rows {
        let mut e = vec![0.0; rows];
        e[k] = 1.0;
        for _ in 0..2 {
            for (j, b) in basis.iter().enumerate() {
                if j == skip || b.iter().all(|x| *x == 0.0) {
                    continue;
                }
                let proj = dot(&e, b);
                e.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
            }
        }
        let norm = dot(&e, &e).sqrt();
        if norm > best_norm {
            best_norm = norm;
            best = e;
        }
        if best_norm > 0.7 {
            break;
        }
    }
    best.iter_mut().for_each(|x| *x /= best_norm);
    best
}

/// σ₂ of `m` together with `∂σ₂/∂m = u₂ v₂ᵀ`.
///
/// Matrices with fewer than two rows or columns have rank at most one, so the
/// proxy is 0 with a zero gradient.
pub fn second_singular_value(m: &Tensor) -> Result<(f64, Tensor)> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < 2 || cols < 2 {
        if m.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("second_singular_value input"));
        }
        return Ok((0.0, Tensor::zeros(vec![rows, cols])));
    }
    let dec = svd(m)?;
    let s = &dec.s;
    let gap_above = s[0] - s[1];
    let gap_below = if s.len() > 2 { s[1] - s[2] } else { f64::INFINITY };
    if gap_above < DEGENERATE_GAP || gap_below < DEGENERATE_GAP {
        DEGENERATE_GRADIENTS.fetch_add(1, Ordering::Relaxed);
    }
    let mut grad = vec![0.0; rows * cols];
    let r = dec.u.cols();
    for i in 0..rows {
        let ui = dec.u.values()[i * r + 1];
        for j in 0..cols {
            grad[i * cols + j] = ui * dec.v.values()[j * r + 1];
        }
    }
    Ok((s[1], Tensor::from_parts(vec![rows, cols], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn reconstruct(d: &Svd) -> Vec<f64> {
        let (m, r) = (d.u.rows(), d.u.cols());
        let n = d.v.rows();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = (0..r).map(|k| d.u.at(i, k) * d.s[k] * d.v.at(j, k)).sum();
            }
        }
        out
    }

    fn orth_defect(t: &Tensor) -> f64 {
        let (m, r) = (t.rows(), t.cols());
        let mut worst = 0.0f64;
        for a in 0..r {
            for b in 0..r {
                let d: f64 = (0..m).map(|i| t.at(i, a) * t.at(i, b)).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((d - want).abs());
            }
        }
        worst
    }

    fn check(m: &Tensor) {
        let d = svd(m).unwrap();
        let rec = reconstruct(&d);
        let err: f64 = rec
            .iter()
            .zip(m.values())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(err <= 1e-8 * d.s[0].max(1e-300), "reconstruction error {err}");
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.s.iter().all(|&x| x >= 0.0));
        assert!(orth_defect(&d.u) <= 1e-8, "U defect {}", orth_defect(&d.u));
        assert!(orth_defect(&d.v) <= 1e-8, "V defect {}", orth_defect(&d.v));
    }

    #[test]
    fn identity() {
        let m = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = svd(&m).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0]);
        check(&m);
    }

    #[test]
    fn diagonal_sorted() {
        let m = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
        let d = svd(&m).unwrap();
        assert!((d.s[0] - 2.0).abs() < 1e-15 && (d.s[1] - 1.0).abs() < 1e-15);
        check(&m);
    }

    #[test]
    fn random_shapes_reconstruct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(r, c) in &[(8, 5), (5, 8), (1, 4), (4, 1), (16, 128), (30, 7)] {
            let vals = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            check(&Tensor::matrix(r, c, vals).unwrap());
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        // rank 1, 4×3
        let m = Tensor::matrix(
            4,
            3,
            vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, -1.0, -2.0, -3.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let d = svd(&m).unwrap();
        assert!(d.s[1].abs() < 1e-12 && d.s[2].abs() < 1e-12);
        check(&m);
        check(&Tensor::zeros(vec![3, 3]));
    }

    #[test]
    fn repeated_rows_converge() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let base: Vec<Vec<f64>> = (0..6).map(|_| (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        for _ in 0..20 {
            let rows: Vec<f64> = (0..20).flat_map(|_| base[rng.gen_range(0..6)].clone()).collect();
            let m = Tensor::matrix(20, 16, rows).unwrap();
            let d = svd(&m).unwrap();
            let back = reconstruct(&d);
            for (a, b) in back.iter().zip(m.values()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn non_finite_rejected() {
        let m = Tensor::from_parts(vec![2, 2], vec![1.0, f64::INFINITY, 0.0, 1.0]);
        assert!(matches!(svd(&m), Err(Error::NonFinite(_))));
    }

    #[test]
    fn sigma2_examples() {
        let rank1 = Tensor::matrix(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        assert!(second_singular_value(&rank1).unwrap().0.abs() < 1e-12);
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((second_singular_value(&eye).unwrap().0 - 1.0).abs() < 1e-15);
        let row = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let (v, g) = second_singular_value(&row).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.values().iter().all(|x| *x == 0.0));
    }
}
