mod common;

use common::lasso_coordinate_descent;
use csp_core::sensing::{cs_objective, solve_sensing, SensingProblem};
use csp_core::{ActivationCapture, Matrix, SeededRng, SolverConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn problem(rows: usize, cols: usize, samples: usize, lambda: f64, rng: &mut SeededRng) -> SensingProblem {
    let x = Matrix::uniform(cols, samples, 1.0, rng);
    let w = Matrix::uniform(rows, cols, 1.0, rng);
    SensingProblem {
        name: "k".into(),
        capture: ActivationCapture { z: w.matmul(&x).unwrap(), x },
        w0: w,
        lambda,
    }
}

fn tight() -> SolverConfig {
    SolverConfig {
        max_iters: 100_000,
        rel_tol: 1e-15,
        ..SolverConfig::default()
    }
}

fn zeros(m: &Matrix) -> usize {
    m.as_slice().iter().filter(|v| **v == 0.0).count()
}

#[test]
fn matches_coordinate_descent_on_small_problem() {
    let mut rng = SeededRng::new(43);
    let p = problem(4, 3, 8, 0.1, &mut rng);
    let ours = solve_sensing(&p, &tight()).unwrap().weights;
    let oracle = lasso_coordinate_descent(&p.capture.x, &p.capture.z, 0.1, 1e-12);
    let gap = cs_objective(&p, &ours).unwrap() - cs_objective(&p, &oracle).unwrap();
    assert!(gap.abs() < 1e-4, "gap {gap}");
}

#[test]
fn zero_lambda_reaches_least_squares_residual() {
    let mut rng = SeededRng::new(5);
    let mut p = problem(3, 4, 12, 0.0, &mut rng);
    // Noisy targets so the least-squares residual is nonzero.
    for v in p.capture.z.as_mut_slice() {
        *v += rng.uniform_range(-0.3, 0.3);
    }
    let x = DMatrix::from_row_slice(4, 12, p.capture.x.as_slice());
    let z = DMatrix::from_row_slice(3, 12, p.capture.z.as_slice());
    // w = Z Xᵀ (X Xᵀ)⁻¹
    let gram = &x * x.transpose();
    let w_ls = &z * x.transpose() * gram.try_inverse().unwrap();
    let ls_resid = (&z - &w_ls * &x).norm();
    let w = solve_sensing(&p, &tight()).unwrap().weights;
    let resid = p.capture.z.sub(&w.matmul(&p.capture.x).unwrap()).unwrap().frobenius_sq().sqrt();
    assert!(resid <= ls_resid + 1e-6, "{resid} vs {ls_resid}");
}

#[test]
fn row_by_row_solve_equals_joint_solve() {
    let mut rng = SeededRng::new(9);
    let p = problem(5, 4, 16, 0.05, &mut rng);
    // A short fixed budget: every iteration still makes progress, so neither
    // solve stops early and the step sizes agree.
    let cfg = SolverConfig {
        max_iters: 15,
        rel_tol: 0.0,
        ..SolverConfig::default()
    };
    let joint = solve_sensing(&p, &cfg).unwrap().weights;
    for r in 0..5 {
        let row = SensingProblem {
            name: format!("row{r}"),
            capture: ActivationCapture {
                x: p.capture.x.clone(),
                z: Matrix::from_rows(&[p.capture.z.row(r)]),
            },
            w0: Matrix::from_rows(&[p.w0.row(r)]),
            lambda: p.lambda,
        };
        let single = solve_sensing(&row, &cfg).unwrap().weights;
        for (a, b) in single.row(0).iter().zip(joint.row(r)) {
            assert!((a - b).abs() < 1e-10, "row {r}: {a} vs {b}");
        }
    }
}

#[test]
fn sparsity_grows_with_lambda() {
    for seed in 0..20 {
        let mut rng = SeededRng::new(seed);
        let p = problem(6, 4, 16, 0.0, &mut rng);
        let mut last = 0;
        for lambda in [0.001, 0.01, 0.1, 1.0] {
            let q = SensingProblem { lambda, ..p.clone() };
            let n = zeros(&solve_sensing(&q, &tight()).unwrap().weights);
            assert!(n >= last, "seed {seed} lambda {lambda}: {n} < {last}");
            last = n;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn solve_never_increases_objective(
        seed in 0u64..10_000,
        rows in 1usize..7,
        cols in 1usize..5,
        samples in 1usize..17,
        lambda in prop::sample::select(vec![0.0, 0.01, 0.1, 1.0]),
        iters in 1usize..40,
    ) {
        let mut rng = SeededRng::new(seed);
        let mut p = problem(rows, cols, samples, lambda, &mut rng);
        p.w0 = Matrix::uniform(rows, cols, 2.0, &mut rng);
        let cfg = SolverConfig { max_iters: iters, ..SolverConfig::default() };
        let out = solve_sensing(&p, &cfg).unwrap();
        prop_assert!(out.objective_after <= out.objective_before);
        prop_assert_eq!(out.objective_after, cs_objective(&p, &out.weights).unwrap());
    }
}
