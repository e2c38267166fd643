//! Small dense linear-algebra helpers.

use nalgebra::{DMatrix, SymmetricEigen};

/// Spectral norm `sqrt(lambda_max(B^T B))`.
pub fn spectral_norm(b: &DMatrix<f64>) -> f64 {
    if b.is_empty() {
        return 0.0;
    }
    let gram = b.transpose() * b;
    let sym = (&gram + gram.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.max().max(0.0).sqrt()
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}
