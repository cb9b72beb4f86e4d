//! Closed-form ridge update for one (position, layer) batch of edits.
//!
//! Solves dW (lambda*C0 + K1 K1^T + jitter*I) = (Z'1 - W0 K1) K1^T as a
//! linear system through a symmetric positive-definite factorization —
//! never an explicit inverse. All solver math is f64 regardless of the
//! model's scalar type.

use crate::error::{CoreError, Result};
use crate::linalg::Matrix;

use super::KeyMatrixStats;

/// Inputs for one closed-form solve.
#[derive(Clone, Debug)]
pub struct EditSolveInput {
    /// d_ff x m stacked keys.
    pub k1: Matrix<f64>,
    /// d_model x m stacked edited values z' = z + delta.
    pub zprime1: Matrix<f64>,
    /// d_model x d_ff frozen output weights.
    pub w0: Matrix<f64>,
    /// Preservation weight; must be non-negative.
    pub lambda: f64,
}

#[derive(Clone, Debug)]
pub struct SolveOutput {
    pub delta_w: Matrix<f64>,
    /// ||dW*A - R K1^T||_F / max(1, ||R K1^T||_F), computed post-solve.
    pub residual: f64,
    pub jitter: f64,
}

/// Default diagonal jitter: 1e-6 * tr(lambda*C0 + K1 K1^T) / d_ff.
/// Keeps the system SPD when lambda = 0 and m < d_ff.
pub fn default_jitter(input: &EditSolveInput, c0: &KeyMatrixStats) -> f64 {
    let d_ff = input.k1.rows();
    let mut trace = 0.0;
    for i in 0..d_ff {
        let mut k_sq = 0.0;
        for j in 0..input.k1.cols() {
            let v = input.k1.get(i, j);
            k_sq += v * v;
        }
        trace += input.lambda * c0.c0.get(i, i) + k_sq;
    }
    1e-6 * trace / d_ff as f64
}

/// Lower-triangular Cholesky factor, or None when the matrix is not
/// (numerically) positive definite.
fn cholesky(a: &Matrix<f64>) -> Option<Matrix<f64>> {
    let n = a.rows();
    let mut l = Matrix::<f64>::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Solve A x = b given the Cholesky factor L of A.
fn cholesky_solve(l: &Matrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l.get(i, k) * y[k];
        }
        y[i] = sum / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l.get(k, i) * x[k];
        }
        x[i] = sum / l.get(i, i);
    }
    x
}

/// Eigenvalues of a symmetric matrix via cyclic Jacobi rotations. Used only
/// for failure diagnostics and small test matrices.
pub fn symmetric_eigenvalues(m: &Matrix<f64>, max_sweeps: usize) -> Vec<f64> {
    let n = m.rows();
    let mut a = m.clone();
    for _ in 0..max_sweeps {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += a.get(i, j).abs();
            }
        }
        if off < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq.abs() < 1e-18 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    (0..n).map(|i| a.get(i, i)).collect()
}

/// Closed-form update dW = R K1^T (lambda*C0 + K1 K1^T + jitter*I)^{-1}
/// with R = Z'1 - W0 K1, solved column-wise through Cholesky.
pub fn solve_update(
    input: &EditSolveInput,
    c0: &KeyMatrixStats,
    jitter: f64,
) -> Result<SolveOutput> {
    let d_ff = input.k1.rows();
    let m = input.k1.cols();
    let d_model = input.w0.rows();
    if input.zprime1.cols() != m || input.zprime1.rows() != d_model || input.w0.cols() != d_ff {
        return Err(CoreError::config(format!(
            "solve shapes inconsistent: K1 {}x{}, Z'1 {}x{}, W0 {}x{}",
            d_ff,
            m,
            input.zprime1.rows(),
            input.zprime1.cols(),
            d_model,
            input.w0.cols()
        )));
    }
    if c0.c0.rows() != d_ff || c0.c0.cols() != d_ff {
        return Err(CoreError::config("C0 dimension does not match d_ff"));
    }
    if input.lambda < 0.0 || !input.lambda.is_finite() {
        return Err(CoreError::config("lambda must be finite and non-negative"));
    }

    // A = lambda*C0 + K1 K1^T + jitter*I.
    let mut a = input.k1.matmul_nt(&input.k1);
    for i in 0..d_ff {
        for j in 0..d_ff {
            let v = a.get(i, j) + input.lambda * c0.c0.get(i, j);
            a.set(i, j, v);
        }
        a.set(i, i, a.get(i, i) + jitter);
    }

    // R = Z'1 - W0 K1; B = R K1^T.
    let mut r = input.zprime1.clone();
    let w0k1 = input.w0.matmul_nn(&input.k1);
    for (ri, wi) in r.data_mut().iter_mut().zip(w0k1.data()) {
        *ri -= *wi;
    }
    let b = r.matmul_nt(&input.k1);

    let l = match cholesky(&a) {
        Some(l) => l,
        None => {
            let evs = symmetric_eigenvalues(&a, 64);
            let min = evs.iter().cloned().fold(f64::INFINITY, f64::min);
            return Err(CoreError::numerical(format!(
                "normal-equation system singular even with jitter {jitter:.3e}; smallest eigenvalue {min:.3e}"
            )));
        }
    };
    // dW A = B  <=>  A (dW^T) = B^T; solve per row of B.
    let mut delta_w = Matrix::<f64>::zeros(d_model, d_ff);
    for i in 0..d_model {
        let x = cholesky_solve(&l, b.row(i));
        delta_w.row_mut(i).copy_from_slice(&x);
    }

    // Verify against the normal equations.
    let lhs = delta_w.matmul_nn(&a);
    let mut diff = 0.0;
    for (x, y) in lhs.data().iter().zip(b.data()) {
        let d = x - y;
        diff += d * d;
    }
    let residual = diff.sqrt() / b.frobenius_norm().max(1.0);
    if !delta_w.is_finite() {
        return Err(CoreError::numerical("solved update contains non-finite entries"));
    }
    Ok(SolveOutput { delta_w, residual, jitter })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stats_from(c0: Matrix<f64>) -> KeyMatrixStats {
        let n = c0.rows();
        KeyMatrixStats { c0, sample_count: n, layer: 0, position: 0 }
    }

    #[test]
    fn zero_residual_target_gives_zero_update() {
        // Z'1 = W0 K1 means R = 0, so dW must be 0.
        let k1 = Matrix::from_rows(vec![vec![1.0, 0.5], vec![0.0, 2.0]]);
        let w0 = Matrix::from_rows(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let zprime = w0.matmul_nn(&k1);
        let input = EditSolveInput { k1, zprime1: zprime, w0, lambda: 1.0 };
        let c0 = stats_from(Matrix::identity(2));
        let out = solve_update(&input, &c0, 1e-9).unwrap();
        assert!(out.delta_w.frobenius_norm() < 1e-12);
    }

    #[test]
    fn two_dim_hand_oracle() {
        // W0 = I, K1 = [1,0]^T, z' = [2,0]^T, lambda*C0 = eps*I:
        // normal equations give dW approx [[1,0],[0,0]] and (W0+dW)K1 = [2,0].
        let input = EditSolveInput {
            k1: Matrix::from_rows(vec![vec![1.0], vec![0.0]]),
            zprime1: Matrix::from_rows(vec![vec![2.0], vec![0.0]]),
            w0: Matrix::identity(2),
            lambda: 1e-9,
        };
        let c0 = stats_from(Matrix::identity(2));
        let out = solve_update(&input, &c0, 1e-9).unwrap();
        assert!((out.delta_w.get(0, 0) - 1.0).abs() < 1e-6);
        for &(i, j) in &[(0usize, 1usize), (1, 0), (1, 1)] {
            assert!(out.delta_w.get(i, j).abs() < 1e-6);
        }
        // (W0 + dW) K1 = [2, 0] within 1e-6.
        let mut w1 = input.w0.clone();
        w1.add_assign(&out.delta_w);
        let fitted = w1.matmul_nn(&input.k1);
        assert!((fitted.get(0, 0) - 2.0).abs() < 1e-6);
        assert!(fitted.get(1, 0).abs() < 1e-6);
        assert!(out.residual <= 1e-8);
    }

    #[test]
    fn large_lambda_shrinks_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d_ff = 6;
        let m = 3;
        // Dense PSD C0 from random keys.
        let mut c0 = Matrix::<f64>::zeros(d_ff, d_ff);
        for _ in 0..50 {
            let k: Vec<f64> = (0..d_ff).map(|_| rng.gen_range(-1.0..1.0)).collect();
            c0.acc_outer(&k, &k);
        }
        let k1 = Matrix::from_fn(d_ff, m, |_, _| rng.gen_range(-1.0..1.0));
        let zprime1 = Matrix::from_fn(4, m, |_, _| rng.gen_range(-1.0..1.0));
        let w0 = Matrix::from_fn(4, d_ff, |_, _| rng.gen_range(-0.2..0.2));
        let base = EditSolveInput { k1, zprime1, w0, lambda: 1e9 };
        let c0 = stats_from(c0);
        let jitter = default_jitter(&base, &c0);
        let out = solve_update(&base, &c0, jitter).unwrap();
        assert!(
            out.delta_w.frobenius_norm() <= 1e-3,
            "lambda=1e9 should crush the update, got {}",
            out.delta_w.frobenius_norm()
        );
    }

    #[test]
    fn update_norm_non_increasing_over_lambda_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d_ff = 8;
        let mut c0m = Matrix::<f64>::zeros(d_ff, d_ff);
        for _ in 0..200 {
            let k: Vec<f64> = (0..d_ff).map(|_| rng.gen_range(0.0..1.5)).collect();
            c0m.acc_outer(&k, &k);
        }
        let c0 = stats_from(c0m);
        let k1 = Matrix::from_fn(d_ff, 4, |_, _| rng.gen_range(0.0..1.5));
        let zprime1 = Matrix::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
        let w0 = Matrix::from_fn(5, d_ff, |_, _| rng.gen_range(-0.3..0.3));
        let mut last = f64::INFINITY;
        for lambda in [10.0, 100.0, 1000.0, 10000.0] {
            let input =
                EditSolveInput { k1: k1.clone(), zprime1: zprime1.clone(), w0: w0.clone(), lambda };
            let jitter = default_jitter(&input, &c0);
            let out = solve_update(&input, &c0, jitter).unwrap();
            let norm = out.delta_w.frobenius_norm();
            assert!(norm <= last + 1e-12, "||dW|| grew from {last} to {norm} at lambda={lambda}");
            last = norm;
        }
    }

    #[test]
    fn injection_fidelity_at_small_lambda() {
        // With full-column-rank K1 and tiny lambda, (W0+dW)K1 must nearly
        // reproduce Z'1.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let d_ff = 10;
        let m = 6;
        let mut c0m = Matrix::<f64>::zeros(d_ff, d_ff);
        for _ in 0..100 {
            let k: Vec<f64> = (0..d_ff).map(|_| rng.gen_range(-1.0..1.0)).collect();
            c0m.acc_outer(&k, &k);
        }
        let c0 = stats_from(c0m);
        let k1 = Matrix::from_fn(d_ff, m, |_, _| rng.gen_range(-1.0..1.0));
        let zprime1 = Matrix::from_fn(4, m, |_, _| rng.gen_range(-1.0..1.0));
        let w0 = Matrix::from_fn(4, d_ff, |_, _| rng.gen_range(-0.3..0.3));
        // lambda * tr(C0) / m <= 1e-3.
        let trace: f64 = (0..d_ff).map(|i| c0.c0.get(i, i)).sum();
        let lambda = 1e-3 * m as f64 / trace / 10.0;
        let input = EditSolveInput { k1, zprime1, w0, lambda };
        let jitter = default_jitter(&input, &c0);
        let out = solve_update(&input, &c0, jitter).unwrap();
        let mut w1 = input.w0.clone();
        w1.add_assign(&out.delta_w);
        let fit = w1.matmul_nn(&input.k1);
        let mut err = 0.0;
        let mut base = 0.0;
        let w0k1 = input.w0.matmul_nn(&input.k1);
        for i in 0..fit.rows() {
            for j in 0..fit.cols() {
                let d = fit.get(i, j) - input.zprime1.get(i, j);
                err += d * d;
                let r = input.zprime1.get(i, j) - w0k1.get(i, j);
                base += r * r;
            }
        }
        let rel = (err / base).sqrt();
        assert!(rel <= 0.1, "relative fit error {rel} should be <= 0.1");
    }

    #[test]
    fn singular_system_reports_smallest_eigenvalue() {
        let input = EditSolveInput {
            k1: Matrix::<f64>::zeros(3, 1),
            zprime1: Matrix::from_rows(vec![vec![1.0], vec![0.0]]),
            w0: Matrix::<f64>::zeros(2, 3),
            lambda: 0.0,
        };
        let c0 = stats_from(Matrix::<f64>::zeros(3, 3));
        let err = solve_update(&input, &c0, 0.0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("smallest eigenvalue"), "{msg}");
    }

    #[test]
    fn jacobi_matches_known_eigenvalues() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let m = Matrix::from_rows(vec![vec![2.0, 1.0], vec![1.0, 2.0]]);
        let mut evs = symmetric_eigenvalues(&m, 64);
        evs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((evs[0] - 1.0).abs() < 1e-10);
        assert!((evs[1] - 3.0).abs() < 1e-10);
    }
}
