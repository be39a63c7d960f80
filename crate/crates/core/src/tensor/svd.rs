//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.

use super::Matrix;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_SWEEPS: usize = 80;

/// `M = U · diag(S) · Vᵀ` with `U: m×p`, `V: q×p`, `p = min(m, q)`.
///
/// `S` is sorted descending. Left/right singular vectors belonging to zero
/// singular values are completed to an orthonormal basis, so `UᵀU = VᵀV = I`
/// holds even for rank-deficient input. Each column of `U` has its
/// largest-magnitude component positive (first such index on ties).
#[derive(Debug, Clone, PartialEq)]
pub struct SvdTriple<T> {
    pub u: Matrix<T>,
    pub s: Vec<T>,
    pub v: Matrix<T>,
}

impl<T: Scalar> SvdTriple<T> {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let (m, q, p) = (self.u.rows(), self.v.rows(), self.s.len());
        Matrix::from_fn(m, q, |i, j| {
            (0..p).fold(T::zero(), |acc, k| acc + self.u.get(i, k) * self.s[k] * self.v.get(j, k))
        })
    }
}

/// Computes the thin SVD of `m`. Deterministic for a fixed input.
pub fn svd<T: Scalar>(m: &Matrix<T>) -> Result<SvdTriple<T>> {
    if m.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("svd input contains non-finite values"));
    }
    if m.rows() >= m.cols() {
        let (u, s, v) = one_sided_jacobi(m)?;
        Ok(canonical_signs(SvdTriple { u, s, v }))
    } else {
        let (u, s, v) = one_sided_jacobi(&m.transpose())?;
        Ok(canonical_signs(SvdTriple { u: v, s, v: u }))
    }
}

/// Orthogonalizes the columns of a tall `rows × cols` matrix (rows ≥ cols).
/// Returns `(U: rows×cols, S, V: cols×cols)`.
fn one_sided_jacobi<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Vec<T>, Matrix<T>)> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut g: Vec<Vec<T>> = (0..cols).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<T>> = (0..cols)
        .map(|j| (0..cols).map(|i| if i == j { T::one() } else { T::zero() }).collect())
        .collect();
    let tol = T::TOLERANCE * T::of_usize(rows.max(4));

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let (alpha, beta, gamma) = norms_and_dot(&g[p], &g[q]);
                if alpha == T::zero() || beta == T::zero() {
                    continue;
                }
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric("jacobi svd did not converge"));
    }

    let norms: Vec<T> = g.iter().map(|col| col.iter().map(|&x| x * x).sum::<T>().sqrt()).collect();
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).expect("finite norms").then(i.cmp(&j)));

    let sigma_max = norms[order[0]];
    let cutoff = sigma_max * T::of_usize(rows) * T::epsilon() * T::of(8.0);
    let mut s = Vec::with_capacity(cols);
    let mut u_cols: Vec<Option<Vec<T>>> = Vec::with_capacity(cols);
    for &j in &order {
        let sigma = norms[j];
        if sigma > cutoff && sigma > T::zero() {
            s.push(sigma);
            u_cols.push(Some(g[j].iter().map(|&x| x / sigma).collect()));
        } else {
            s.push(T::zero());
            u_cols.push(None);
        }
    }
    let u_cols = complete_basis(u_cols, rows);
    let u = Matrix::from_fn(rows, cols, |i, k| u_cols[k][i]);
    let vm = Matrix::from_fn(cols, cols, |i, k| v[order[k]][i]);
    Ok((u, s, vm))
}

fn norms_and_dot<T: Scalar>(a: &[T], b: &[T]) -> (T, T, T) {
    a.iter().zip(b).fold((T::zero(), T::zero(), T::zero()), |(aa, bb, ab), (&x, &y)| {
        (aa + x * x, bb + y * y, ab + x * y)
    })
}

fn rotate<T: Scalar>(cols: &mut [Vec<T>], p: usize, q: usize, c: T, s: T) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the missing columns with unit vectors orthogonal to every present
/// column (modified Gram-Schmidt over the standard basis, two passes).
fn complete_basis<T: Scalar>(cols: Vec<Option<Vec<T>>>, dim: usize) -> Vec<Vec<T>> {
    let mut basis: Vec<Vec<T>> = cols.iter().flatten().cloned().collect();
    let mut candidate = 0usize;
    let mut out = Vec::with_capacity(cols.len());
    for col in cols {
        match col {
            Some(c) => out.push(c),
            None => loop {
                assert!(candidate < dim, "basis completion exhausted the standard basis");
                let mut e = vec![T::zero(); dim];
                e[candidate] = T::one();
                candidate += 1;
                for _ in 0..2 {
                    for b in &basis {
                        let proj = b.iter().zip(&e).fold(T::zero(), |s, (&x, &y)| s + x * y);
                        for (ei, &bi) in e.iter_mut().zip(b) {
                            *ei = *ei - proj * bi;
                        }
                    }
                }
                let norm = e.iter().map(|&x| x * x).sum::<T>().sqrt();
                if norm > T::of(1e-3) {
                    e.iter_mut().for_each(|x| *x = *x / norm);
                    basis.push(e.clone());
                    out.push(e);
                    break;
                }
            },
        }
    }
    out
}

fn canonical_signs<T: Scalar>(mut svd: SvdTriple<T>) -> SvdTriple<T> {
    let (m, q) = (svd.u.rows(), svd.v.rows());
    for k in 0..svd.s.len() {
        let mut best = 0;
        for i in 1..m {
            if svd.u.get(i, k).abs() > svd.u.get(best, k).abs() {
                best = i;
            }
        }
        if svd.u.get(best, k) < T::zero() {
            for i in 0..m {
                svd.u.set(i, k, -svd.u.get(i, k));
            }
            for j in 0..q {
                svd.v.set(j, k, -svd.v.get(j, k));
            }
        }
    }
    svd
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn orthonormality_error(m: &Matrix<f64>) -> f64 {
        let gram = m.transpose().matmul(m).unwrap();
        gram.sub(&Matrix::identity(gram.rows())).unwrap().max_abs()
    }

    fn check_invariants(a: &Matrix<f64>, d: &SvdTriple<f64>) {
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
        assert!(d.s.iter().all(|&x| x >= 0.0));
        assert!(orthonormality_error(&d.u) <= 1e-5);
        assert!(orthonormality_error(&d.v) <= 1e-5);
        let err = d.reconstruct().sub(a).unwrap().frobenius_norm();
        assert!(err <= 1e-4 * a.frobenius_norm().max(1e-300));
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Matrix::<f64>::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
        check_invariants(&Matrix::identity(3), &d);
    }

    #[test]
    fn diagonal_is_recovered_with_signed_permutations() {
        let a = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let d = svd(&a).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(d.u, Matrix::identity(3));
        assert_eq!(d.v, Matrix::identity(3));

        let b = Matrix::from_diag(&[1.0, -3.0, 2.0]);
        let d = svd(&b).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        for k in 0..3 {
            assert_eq!(d.u.column(k).iter().filter(|x: &&f64| x.abs() == 1.0).count(), 1);
            assert_eq!(d.v.column(k).iter().filter(|x: &&f64| x.abs() == 1.0).count(), 1);
        }
        check_invariants(&b, &d);
    }

    #[test]
    fn wide_and_tall_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (r, c) in [(8, 20), (20, 8), (1, 5), (5, 1), (16, 144)] {
            let a = Matrix::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0));
            let d = svd(&a).unwrap();
            assert_eq!((d.u.rows(), d.u.cols()), (r, r.min(c)));
            assert_eq!((d.v.rows(), d.v.cols()), (c, r.min(c)));
            check_invariants(&a, &d);
        }
    }

    #[test]
    fn rank_deficient_completes_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = Matrix::from_fn(5, 9, |i, j| x[i] * y[j]);
        let d = svd(&a).unwrap();
        assert!(d.s[0] > 0.1);
        assert!(d.s[1..].iter().all(|&s| s == 0.0));
        check_invariants(&a, &d);

        let zero = Matrix::<f64>::zeros(3, 4);
        let d = svd(&zero).unwrap();
        assert_eq!(d.s, vec![0.0; 3]);
        check_invariants(&zero, &d);
    }

    #[test]
    fn deterministic_and_sign_canonical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = Matrix::from_fn(6, 11, |_, _| rng.gen_range(-1.0..1.0));
        let d1 = svd(&a).unwrap();
        let d2 = svd(&a).unwrap();
        assert_eq!(d1, d2);
        for k in 0..d1.s.len() {
            let col = d1.u.column(k);
            let big = col.iter().cloned().fold(0.0f64, |m: f64, x: f64| if x.abs() > m.abs() { x } else { m });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let a = Matrix::from_parts(1, 2, vec![1.0, f64::INFINITY]);
        assert!(matches!(svd(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn works_in_single_precision() {
        let a = Matrix::<f32>::from_fn(4, 6, |i, j| ((i * 7 + j * 3) % 5) as f32 - 2.0);
        let d = svd(&a).unwrap();
        let err = d.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(err <= 1e-4 * a.frobenius_norm());
    }
}
