//! Small dense linear-algebra routines used by certification and audits.

use crate::tensor::Tensor;

pub const POWER_ITER_TOL: f64 = 1e-9;
pub const POWER_ITER_MAX: usize = 500;

/// Largest singular value by power iteration on `A^T A`.
///
/// Stops when the estimate changes by less than `POWER_ITER_TOL` relative,
/// or after `POWER_ITER_MAX` iterations. The start vector is fixed so the
/// result is deterministic.
pub fn spectral_norm(a: &Tensor) -> f64 {
    spectral_pair(a).sigma
}

/// Top singular value with unit vectors `u`, `v` such that `u^T A v = |A v|`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralPair {
    pub sigma: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn spectral_pair(a: &Tensor) -> SpectralPair {
    let (m, n) = (a.rows(), a.cols());
    if m == 0 || n == 0 || a.max_abs() == 0.0 {
        return SpectralPair { sigma: 0.0, u: vec![0.0; m], v: vec![0.0; n] };
    }
    let peak = a.max_abs();
    if peak != 1.0 {
        let mut p = spectral_pair(&a.map(|x| x / peak));
        p.sigma *= peak;
        return p;
    }
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * ((i * 7919) % 17) as f64 / 17.0).collect();
    normalize(&mut v);
    let mut sigma = 0.0;
    for _ in 0..POWER_ITER_MAX {
        let av = mat_vec(a, &v);
        let mut w = mat_t_vec(a, &av);
        let wn = normalize(&mut w);
        if wn == 0.0 {
            break;
        }
        // w = A^T A v with |v| = 1, so |A^T A v| -> sigma^2
        let next = wn.sqrt();
        v = w;
        let converged = (next - sigma).abs() <= POWER_ITER_TOL * next;
        sigma = next;
        if converged {
            break;
        }
    }
    // |A v| with the final unit v is a lower bound; take the larger.
    let mut u = mat_vec(a, &v);
    let av = normalize(&mut u);
    SpectralPair { sigma: sigma.max(av), u, v }
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = crate::tensor::norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

pub fn mat_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..a.rows()).map(|i| crate::tensor::dot(a.row_slice(i), v)).collect()
}

pub fn mat_t_vec(a: &Tensor, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &aij) in out.iter_mut().zip(a.row_slice(i)) {
            *o += aij * vi;
        }
    }
    out
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues(a: &Tensor) -> Vec<f64> {
    let n = a.rows();
    assert_eq!(n, a.cols(), "symmetric_eigenvalues needs a square matrix");
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row_slice(i).to_vec()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| m[i][i] * m[i][i]).sum::<f64>() + off;
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[k][p], m[k][q]);
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[p][k], m[q][k]);
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    eig
}

/// Singular values of a general matrix, ascending (via eigenvalues of `A^T A`).
pub fn singular_values(a: &Tensor) -> Vec<f64> {
    let ata = a.transpose().matmul(a).expect("A^T A is always conformable");
    symmetric_eigenvalues(&ata).into_iter().map(|l| l.max(0.0).sqrt()).collect()
}
