//! Conjugate gradient for symmetric positive-definite operators given as closures.

use crate::linalg::dot;

#[derive(Clone, Debug)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Final `‖b − Ax‖ / ‖b‖`.
    pub relative_residual: f64,
    pub converged: bool,
}

/// Solves `A x = b` starting from `x0` (zero when `None`).
pub fn conjugate_gradient(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> CgOutcome {
    preconditioned_cg(apply, |r: &[f64]| r.to_vec(), b, x0, tol, max_iters)
}

/// CG with an SPD preconditioner `M⁻¹`; the stopping rule uses the unpreconditioned residual.
pub fn preconditioned_cg(
    apply: impl Fn(&[f64]) -> Vec<f64>,
    precond: impl Fn(&[f64]) -> Vec<f64>,
    b: &[f64],
    x0: Option<&[f64]>,
    tol: f64,
    max_iters: usize,
) -> CgOutcome {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        return CgOutcome {
            solution: vec![0.0; n],
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut x = match x0 {
        Some(v) if v.len() == n && v.iter().all(|t| t.is_finite()) => v.to_vec(),
        _ => vec![0.0; n],
    };
    let ax = apply(&x);
    let mut r: Vec<f64> = b.iter().zip(&ax).map(|(bi, ai)| bi - ai).collect();
    let mut rr = dot(&r, &r);
    let mut z = precond(&r);
    let mut rz = dot(&r, &z);
    let mut p = z.clone();
    let mut iterations = 0;
    while rr.sqrt() > tol * bnorm && iterations < max_iters {
        let ap = apply(&p);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let a = rz / pap;
        for i in 0..n {
            x[i] += a * p[i];
            r[i] -= a * ap[i];
        }
        rr = dot(&r, &r);
        z = precond(&r);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    let rel = rr.sqrt() / bnorm;
    CgOutcome {
        solution: x,
        iterations,
        relative_residual: rel,
        converged: rel <= tol,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_spd_system() {
        let a = [[4.0, 1.0], [1.0, 3.0]];
        let out = conjugate_gradient(
            |x| vec![a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]],
            &[1.0, 2.0],
            None,
            1e-12,
            10,
        );
        assert!(out.converged);
        assert!(out.iterations <= 2);
        assert!((out.solution[0] - 1.0 / 11.0).abs() < 1e-12);
        assert!((out.solution[1] - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn exact_preconditioner_converges_in_one_step() {
        let a = [4.0, 9.0, 0.5];
        let out = preconditioned_cg(
            |x| x.iter().zip(&a).map(|(v, d)| v * d).collect(),
            |r| r.iter().zip(&a).map(|(v, d)| v / d).collect(),
            &[1.0, 1.0, 1.0],
            None,
            1e-12,
            10,
        );
        assert_eq!(out.iterations, 1);
        assert!((out.solution[2] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn warm_start_at_solution_needs_no_iterations() {
        let out = conjugate_gradient(|x| x.iter().map(|v| 2.0 * v).collect(), &[2.0, 4.0], Some(&[1.0, 2.0]), 1e-10, 10);
        assert_eq!(out.iterations, 0);
    }
}
