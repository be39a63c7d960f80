//! The Jacobi SVD against an independent oracle: nalgebra's symmetric
//! eigen-solver on the Gram matrix.

use cora::tensor::{svd, Matrix};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

#[test]
fn singular_values_match_gram_eigenvalues() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for &(rows, cols) in &[(8, 8), (16, 144), (32, 72), (50, 7), (3, 27), (128, 288)] {
        let m = random(&mut rng, rows, cols);
        let ours = svd(&m).unwrap();
        let a = DMatrix::from_row_slice(rows, cols, m.data());
        let gram = if rows <= cols { &a * a.transpose() } else { a.transpose() * &a };
        let mut eig: Vec<f64> = gram.symmetric_eigen().eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
        eig.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert_eq!(ours.s.len(), eig.len());
        for (s, e) in ours.s.iter().zip(&eig) {
            assert!((s - e).abs() <= 1e-6 * eig[0], "{rows}×{cols}: {s} vs {e}");
        }
        // Also against nalgebra's own SVD, directly.
        let mut direct: Vec<f64> = a.singular_values().iter().copied().collect();
        direct.sort_by(|x, y| y.partial_cmp(x).unwrap());
        for (s, d) in ours.s.iter().zip(&direct) {
            assert!((s - d).abs() <= 1e-10 * direct[0]);
        }
    }
}

#[test]
fn reconstruction_and_orthogonality() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for &(rows, cols) in &[(6, 20), (20, 6), (9, 9)] {
        let m = random(&mut rng, rows, cols);
        let t = svd(&m).unwrap();
        let us = Matrix::from_fn(t.u.rows(), t.u.cols(), |i, j| t.u.get(i, j) * t.s[j]);
        let back = us.matmul(&t.v.transpose()).unwrap();
        assert!(back.sub(&m).unwrap().max_abs() < 1e-12);
        for q in [&t.u, &t.v] {
            let gram = q.transpose().matmul(q).unwrap();
            assert!(gram.sub(&Matrix::identity(gram.rows())).unwrap().max_abs() < 1e-12);
        }
    }
}
