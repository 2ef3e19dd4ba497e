use super::Matrix;
use crate::error::{Error, Result};

pub const DEFAULT_EIGH_TOL: f64 = 1e-12;
pub const MAX_JACOBI_SWEEPS: usize = 100;

/// Eigenpairs of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EighResult {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Row `i` is the unit eigenvector for `eigenvalues[i]`.
    pub eigenvectors: Matrix,
}

impl EighResult {
    /// `Vᵀ · diag(λ) · V`, which should give back the decomposed matrix.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for (i, &lambda) in self.eigenvalues.iter().enumerate() {
            for v in scaled.row_mut(i) {
                *v *= lambda;
            }
        }
        let out = self
            .eigenvectors
            .matmul_transa(&scaled)
            .expect("square by construction");
        debug_assert_eq!(out.shape(), (n, n));
        out
    }
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
///
/// The input is symmetrized as `(c + cᵀ) / 2` first. Sweeps continue until
/// every off-diagonal magnitude is below `tol`.
pub fn eigh_symmetric(c: &Matrix, tol: f64) -> Result<EighResult> {
    if !c.is_square() {
        return Err(Error::shape(
            "eigh_symmetric",
            format!("non-square input {:?}", c.shape()),
        ));
    }
    let n = c.rows();
    if n == 0 {
        return Err(Error::shape("eigh_symmetric", "empty matrix"));
    }
    let scale = c.max_abs().max(1.0);
    let asym = c.asymmetry();
    if asym >= 1e-9 * scale {
        return Err(Error::Config(format!(
            "eigh_symmetric: input is not symmetric (max |c_ij - c_ji| = {asym:e})"
        )));
    }

    let mut a = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            a[(i, j)] = 0.5 * (c[(i, j)] + c[(j, i)]);
        }
    }
    // columns accumulate the eigenvectors
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for sweep in 0..MAX_JACOBI_SWEEPS {
        if max_off_diagonal(&a) < tol {
            converged = true;
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Once a_pq is below the precision of both diagonal entries the
                // rotation would be a no-op; clear it so the sweep can terminate.
                let g = 100.0 * apq.abs();
                if sweep > 3 && app.abs() + g == app.abs() && aqq.abs() + g == aqq.abs() {
                    a[(p, q)] = 0.0;
                    a[(q, p)] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.abs() > 1e150 {
                    0.5 / theta
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                rotate(&mut a, &mut v, p, q, t, cos, sin);
            }
        }
    }
    if !converged && n > 1 {
        let last_off = max_off_diagonal(&a);
        if last_off >= tol {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {MAX_JACOBI_SWEEPS} sweeps \
                 ({n}x{n}, max off-diagonal {last_off:e}, tol {tol:e})"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep their Jacobi column order
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));

    let eigenvalues = order.iter().map(|&i| a[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (row, &col) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors[(row, k)] = v[(k, col)];
        }
    }
    Ok(EighResult {
        eigenvalues,
        eigenvectors,
    })
}

fn max_off_diagonal(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max(a[(i, j)].abs());
        }
    }
    worst
}

#[allow(clippy::too_many_arguments)]
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, t: f64, cos: f64, sin: f64) {
    let n = a.rows();
    let apq = a[(p, q)];
    a[(p, p)] -= t * apq;
    a[(q, q)] += t * apq;
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        let new_kp = cos * akp - sin * akq;
        let new_kq = sin * akp + cos * akq;
        a[(k, p)] = new_kp;
        a[(p, k)] = new_kp;
        a[(k, q)] = new_kq;
        a[(q, k)] = new_kq;
    }
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = cos * vkp - sin * vkq;
        v[(k, q)] = sin * vkp + cos * vkq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Rng;

    fn random_psd(rng: &mut Rng, n: usize) -> Matrix {
        let g = Matrix::from_vec(
            n + 3,
            n,
            (0..(n + 3) * n).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        )
        .unwrap();
        g.matmul_transa(&g).unwrap()
    }

    fn orthonormality_error(v: &Matrix) -> f64 {
        v.matmul_transb(v).unwrap().max_abs_diff(&Matrix::identity(v.rows()))
    }

    #[test]
    fn diagonal_input() {
        let r = eigh_symmetric(&Matrix::diag(&[2.0, 1.0]), DEFAULT_EIGH_TOL).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0, 2.0]);
        assert_eq!(r.eigenvectors.row(0), &[0.0, 1.0]);
        assert_eq!(r.eigenvectors.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn identity_reconstructs() {
        let i4 = Matrix::identity(4);
        let r = eigh_symmetric(&i4, DEFAULT_EIGH_TOL).unwrap();
        assert_eq!(r.eigenvalues, vec![1.0; 4]);
        assert!(r.reconstruct().max_abs_diff(&i4) < 1e-12);
        assert!(orthonormality_error(&r.eigenvectors) < 1e-12);
    }

    #[test]
    fn random_psd_reconstructs() {
        let mut rng = Rng::new(20);
        let c = random_psd(&mut rng, 20);
        let r = eigh_symmetric(&c, DEFAULT_EIGH_TOL).unwrap();
        assert!(r.reconstruct().max_abs_diff(&c) < 1e-9);
        assert!(orthonormality_error(&r.eigenvectors) < 1e-8);
        assert!(r.eigenvalues.iter().all(|&l| l >= -1e-10));
        assert!(r.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        for row in r.eigenvectors.row_iter() {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_deficient_and_indefinite_inputs() {
        let mut rng = Rng::new(99);
        // rank 2 in 6 dimensions
        let g = Matrix::from_vec(2, 6, (0..12).map(|_| rng.uniform()).collect()).unwrap();
        let c = g.matmul_transa(&g).unwrap();
        let r = eigh_symmetric(&c, DEFAULT_EIGH_TOL).unwrap();
        assert!(r.reconstruct().max_abs_diff(&c) < 1e-9);
        assert!(r.eigenvalues[..4].iter().all(|l| l.abs() < 1e-10));

        let s = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let r = eigh_symmetric(&s, DEFAULT_EIGH_TOL).unwrap();
        assert!((r.eigenvalues[0] + 1.0).abs() < 1e-14);
        assert!((r.eigenvalues[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_square_and_asymmetric() {
        assert!(matches!(
            eigh_symmetric(&Matrix::zeros(2, 3), 1e-12),
            Err(Error::Shape { .. })
        ));
        let m = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(eigh_symmetric(&m, 1e-12).is_err());
    }

    #[test]
    fn impossible_tolerance_reports_non_convergence() {
        let c = random_psd(&mut Rng::new(1), 8);
        match eigh_symmetric(&c, -1.0) {
            Err(Error::Numerical(msg)) => assert!(msg.contains("did not converge")),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn one_by_one() {
        let r = eigh_symmetric(&Matrix::diag(&[3.5]), DEFAULT_EIGH_TOL).unwrap();
        assert_eq!(r.eigenvalues, vec![3.5]);
        assert_eq!(r.eigenvectors.as_slice(), &[1.0]);
    }
}
