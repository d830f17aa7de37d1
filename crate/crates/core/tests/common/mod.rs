//! Oracles shared by the integration and acceptance suites.
#![allow(dead_code)]

use csp_core::nn::{fc_backward, fc_forward, lstm_backward, lstm_sequence, FcParams, LstmKernels, LstmState};
use csp_core::tasks::{gen_adding_problem, gen_copy_task};
use csp_core::{Matrix, Objective, SeededRng, SeqModel};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely; FD rounding noise is
/// ~1e-11 and would otherwise dominate the ratio.
pub const FD_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

fn central(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::uniform(rows, cols, 1.0, rng)
}

/// `Σ_t Σ r_t ∘ h_t` for fixed random projections `r_t`.
fn lstm_loss(k: &LstmKernels, xs: &[Matrix], init: &LstmState, r: &[Matrix]) -> f64 {
    let (hs, _) = lstm_sequence(k, xs, init).unwrap();
    hs.iter()
        .zip(r)
        .map(|(h, r)| h.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// Largest relative error between BPTT and central differences over every
/// kernel, bias, input and initial-state entry of a random LSTM.
pub fn lstm_fd_error(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (input, hidden, time, batch) = (3, 1 + rng.below(6), 1 + rng.below(4), 2);
    let mut k = LstmKernels::init(input, hidden, &mut rng);
    for b in k.bias.iter_mut() {
        for v in b.iter_mut() {
            *v += rng.uniform_range(-0.5, 0.5);
        }
    }
    let xs: Vec<Matrix> = (0..time).map(|_| random_matrix(input, batch, &mut rng)).collect();
    let init = LstmState {
        c: random_matrix(hidden, batch, &mut rng),
        h: random_matrix(hidden, batch, &mut rng).map(|v| 0.9 * v),
    };
    let r: Vec<Matrix> = (0..time).map(|_| random_matrix(hidden, batch, &mut rng)).collect();
    let (_, tape) = lstm_sequence(&k, &xs, &init).unwrap();
    let g = lstm_backward(&k, &tape, &r).unwrap();

    let mut worst: f64 = 0.0;
    for gi in 0..4 {
        for i in 0..k.input[gi].len() {
            let num = central(
                |v| {
                    let mut kk = k.clone();
                    kk.input[gi].modify(|w, _| w.as_mut_slice()[i] = v);
                    lstm_loss(&kk, &xs, &init, &r)
                },
                k.input[gi].weights().as_slice()[i],
            );
            worst = worst.max(rel_err(g.input[gi].as_slice()[i], num));
        }
        for i in 0..k.recurrent[gi].len() {
            let num = central(
                |v| {
                    let mut kk = k.clone();
                    kk.recurrent[gi].modify(|w, _| w.as_mut_slice()[i] = v);
                    lstm_loss(&kk, &xs, &init, &r)
                },
                k.recurrent[gi].weights().as_slice()[i],
            );
            worst = worst.max(rel_err(g.recurrent[gi].as_slice()[i], num));
        }
        for i in 0..hidden {
            let num = central(
                |v| {
                    let mut kk = k.clone();
                    kk.bias[gi][i] = v;
                    lstm_loss(&kk, &xs, &init, &r)
                },
                k.bias[gi][i],
            );
            worst = worst.max(rel_err(g.bias[gi][i], num));
        }
    }
    for t in 0..time {
        for i in 0..xs[t].len() {
            let num = central(
                |v| {
                    let mut xx = xs.clone();
                    xx[t].as_mut_slice()[i] = v;
                    lstm_loss(&k, &xx, &init, &r)
                },
                xs[t].as_slice()[i],
            );
            worst = worst.max(rel_err(g.x[t].as_slice()[i], num));
        }
    }
    for i in 0..hidden * batch {
        let num_h = central(
            |v| {
                let mut s = init.clone();
                s.h.as_mut_slice()[i] = v;
                lstm_loss(&k, &xs, &s, &r)
            },
            init.h.as_slice()[i],
        );
        let num_c = central(
            |v| {
                let mut s = init.clone();
                s.c.as_mut_slice()[i] = v;
                lstm_loss(&k, &xs, &s, &r)
            },
            init.c.as_slice()[i],
        );
        worst = worst.max(rel_err(g.h0.as_slice()[i], num_h));
        worst = worst.max(rel_err(g.c0.as_slice()[i], num_c));
    }
    worst
}

/// Same check for the affine layer.
pub fn fc_fd_error(seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (inp, out, batch) = (1 + rng.below(6), 1 + rng.below(4), 3);
    let mut p = FcParams::init(inp, out, &mut rng);
    p.bias.iter_mut().for_each(|b| *b = rng.uniform_range(-1.0, 1.0));
    let x = random_matrix(inp, batch, &mut rng);
    let r = random_matrix(out, batch, &mut rng);
    let loss = |p: &FcParams, x: &Matrix| -> f64 {
        let y = fc_forward(p, x).unwrap();
        y.as_slice().iter().zip(r.as_slice()).map(|(a, b)| a * b).sum()
    };
    let g = fc_backward(&p, &x, &r).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..p.kernel.len() {
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.kernel.modify(|w, _| w.as_mut_slice()[i] = v);
                loss(&pp, &x)
            },
            p.kernel.weights().as_slice()[i],
        );
        worst = worst.max(rel_err(g.w.as_slice()[i], num));
    }
    for i in 0..out {
        let num = central(
            |v| {
                let mut pp = p.clone();
                pp.bias[i] = v;
                loss(&pp, &x)
            },
            p.bias[i],
        );
        worst = worst.max(rel_err(g.b[i], num));
    }
    for i in 0..x.len() {
        let num = central(
            |v| {
                let mut xx = x.clone();
                xx.as_mut_slice()[i] = v;
                loss(&p, &xx)
            },
            x.as_slice()[i],
        );
        worst = worst.max(rel_err(g.x.as_slice()[i], num));
    }
    worst
}

/// End-to-end check of `SeqModel::loss_and_grads` over every parameter of
/// a small two-layer model.
pub fn model_fd_error(seed: u64, objective: Objective) -> f64 {
    let mut rng = SeededRng::new(seed);
    let (batch, model) = match objective {
        Objective::FinalMse => (
            gen_adding_problem(3, 4, &mut rng).unwrap(),
            SeqModel::new(2, 4, 2, 1, objective, &mut rng),
        ),
        Objective::StepCrossEntropy => (
            gen_copy_task(3, 4, 3, &mut rng).unwrap(),
            SeqModel::new(5, 4, 2, 3, objective, &mut rng),
        ),
    };
    let (_, grads) = model.loss_and_grads(&batch, 0.0, &mut rng).unwrap();
    let flat: Vec<Vec<f64>> = grads.flat().iter().map(|s| s.to_vec()).collect();
    let mut probe = model.clone();
    let sizes: Vec<usize> = probe.params_mut().iter().map(|p| p.values.len()).collect();
    let mut worst: f64 = 0.0;
    for (slot, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let base = probe.params_mut()[slot].values[i];
            let num = central(
                |v| {
                    let mut m = model.clone();
                    m.params_mut()[slot].values[i] = v;
                    m.loss(&batch).unwrap()
                },
                base,
            );
            worst = worst.max(rel_err(flat[slot][i], num));
        }
    }
    worst
}

/// Row-wise cyclic coordinate descent for `λ‖w‖₁ + ½‖Z − wX‖²_F`, run until
/// no coordinate moves by more than `tol`.
pub fn lasso_coordinate_descent(x: &Matrix, z: &Matrix, lambda: f64, tol: f64) -> Matrix {
    let (d, n) = (x.rows(), x.cols());
    let mut w = Matrix::zeros(z.rows(), d);
    let gram: Vec<Vec<f64>> = (0..d)
        .map(|j| (0..d).map(|k| (0..n).map(|s| x.get(j, s) * x.get(k, s)).sum()).collect())
        .collect();
    for r in 0..z.rows() {
        let c: Vec<f64> = (0..d).map(|j| (0..n).map(|s| z.get(r, s) * x.get(j, s)).sum()).collect();
        let mut row = vec![0.0; d];
        for _sweep in 0..1_000_000 {
            let mut moved: f64 = 0.0;
            for j in 0..d {
                if gram[j][j] == 0.0 {
                    row[j] = 0.0;
                    continue;
                }
                let partial: f64 = c[j] - (0..d).filter(|&k| k != j).map(|k| gram[j][k] * row[k]).sum::<f64>();
                let new = partial.signum() * (partial.abs() - lambda).max(0.0) / gram[j][j];
                moved = moved.max((new - row[j]).abs());
                row[j] = new;
            }
            if moved < tol {
                break;
            }
        }
        for j in 0..d {
            w.set(r, j, row[j]);
        }
    }
    w
}
