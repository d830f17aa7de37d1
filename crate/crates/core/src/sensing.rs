//! Per-kernel sparse recovery: capture what a kernel sees during a forward
//! pass, then find a sparser kernel that reproduces the same pre-activations.
//!
//! For captured inputs `X` (`in × n`) and outputs `Z = W·X` (`out × n`) the
//! local objective is
//!
//! ```text
//! λ·Σ|w_ij| + ½‖Z − W·X‖²_F
//! ```
//!
//! minimised by ISTA from a warm start. Rows of `W` are independent LASSO
//! problems sharing the same design `X`.

use crate::error::{Error, Result};
use crate::numerics::{spectral_norm_sq, Matrix, SeededRng};

/// Uniform fixed-size sample over a stream of unknown length
/// (Vitter's Algorithm R). While fewer than `capacity` items have been
/// offered the sample is the whole stream in arrival order.
#[derive(Clone, Debug)]
pub struct Reservoir<T> {
    capacity: usize,
    seen: usize,
    items: Vec<T>,
}

impl<T> Reservoir<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            seen: 0,
            items: Vec::with_capacity(capacity),
        }
    }

    pub fn offer(&mut self, item: T, rng: &mut SeededRng) {
        if self.items.len() < self.capacity {
            self.items.push(item);
        } else {
            let j = rng.below(self.seen + 1);
            if j < self.capacity {
                self.items[j] = item;
            }
        }
        self.seen += 1;
    }

    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn into_items(self) -> Vec<T> {
        self.items
    }
}

/// Inputs a kernel consumed (columns of `x`) and the outputs it produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationCapture {
    pub x: Matrix,
    pub z: Matrix,
}

impl ActivationCapture {
    /// Builds a capture from sampled input columns and the live kernel.
    pub fn from_columns(kernel: &Matrix, columns: &[&[f64]]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::Empty("activation capture has no samples".into()));
        }
        let mut x = Matrix::zeros(kernel.cols(), columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != kernel.cols() {
                return Err(Error::shape("capture column", kernel.shape(), (col.len(), 1)));
            }
            x.set_col(j, col);
        }
        let z = kernel.matmul(&x)?;
        Ok(Self { x, z })
    }

    pub fn samples(&self) -> usize {
        self.x.cols()
    }
}

/// Midway inference: reservoir-samples `n_samples` input vectors from the
/// stream and records `Z = kernel · X` under the current kernel.
pub fn capture<I, S>(
    kernel: &Matrix,
    inputs: I,
    n_samples: usize,
    rng: &mut SeededRng,
) -> Result<ActivationCapture>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[f64]>,
{
    if n_samples == 0 {
        return Err(Error::InvalidArgument("capture needs n_samples >= 1".into()));
    }
    let mut reservoir = Reservoir::new(n_samples);
    for v in inputs {
        reservoir.offer(v, rng);
    }
    let items = reservoir.into_items();
    let cols: Vec<&[f64]> = items.iter().map(|s| s.as_ref()).collect();
    ActivationCapture::from_columns(kernel, &cols)
}

/// Default capture size: four columns per kernel input, capped at 512.
pub fn default_capture_size(input_dim: usize) -> usize {
    (4 * input_dim).clamp(1, 512)
}

/// One kernel's local sparse-recovery instance.
#[derive(Clone, Debug)]
pub struct SensingProblem {
    /// Used in error messages.
    pub name: String,
    pub capture: ActivationCapture,
    /// Warm start, normally the live kernel.
    pub w0: Matrix,
    pub lambda: f64,
}

impl SensingProblem {
    fn check(&self) -> Result<()> {
        let (x, z, w) = (&self.capture.x, &self.capture.z, &self.w0);
        if w.shape() != (z.rows(), x.rows()) || x.cols() != z.cols() {
            return Err(Error::shape("sensing problem", w.shape(), (z.rows(), x.rows())));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "{}: lambda must be >= 0, got {}",
                self.name, self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Step is `step_safety / ‖X‖²`.
    pub step_safety: f64,
    /// Stop once the relative objective decrease drops below this.
    pub rel_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 20,
            step_safety: 0.9,
            rel_tol: 1e-6,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument("solver max_iters must be >= 1".into()));
        }
        if !(self.step_safety > 0.0 && self.step_safety <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "solver step_safety must be in (0, 1], got {}",
                self.step_safety
            )));
        }
        if !(self.rel_tol >= 0.0) {
            return Err(Error::InvalidArgument("solver rel_tol must be >= 0".into()));
        }
        Ok(())
    }
}

/// `λ·‖w‖₁ + ½‖Z − w·X‖²_F`.
pub fn cs_objective(p: &SensingProblem, w: &Matrix) -> Result<f64> {
    let resid = p.capture.z.sub(&w.matmul(&p.capture.x)?)?;
    Ok(p.lambda * w.l1_norm() + 0.5 * resid.frobenius_sq())
}

/// Proximal operator of `t·‖·‖₁`: `sign(w)·max(|w| − t, 0)`.
pub fn soft_threshold(w: &Matrix, t: f64) -> Matrix {
    debug_assert!(t >= 0.0);
    w.map(|v| {
        let m = v.abs() - t;
        if m > 0.0 {
            m.copysign(v)
        } else {
            0.0
        }
    })
}

#[derive(Clone, Debug)]
pub struct SensingOutcome {
    pub weights: Matrix,
    pub objective_before: f64,
    pub objective_after: f64,
    pub iterations: usize,
}

/// Gram-form evaluation of the objective, `G = X·Xᵀ`, `C = Z·Xᵀ`.
struct GramForm {
    gram: Matrix,
    cross: Matrix,
    z_energy: f64,
}

impl GramForm {
    fn smooth(&self, w: &Matrix, wg: &Matrix) -> f64 {
        let mut quad = 0.0;
        let mut lin = 0.0;
        for ((a, b), c) in w.as_slice().iter().zip(wg.as_slice()).zip(self.cross.as_slice()) {
            quad += a * b;
            lin += a * c;
        }
        0.5 * self.z_energy - lin + 0.5 * quad
    }
}

/// ISTA from the warm start:
/// `w ← soft_threshold(w − η(w·X − Z)·Xᵀ, η·λ)` with `η = step_safety/‖X‖²`.
///
/// The step is halved whenever an iteration would raise the objective, and
/// the warm start is returned if the result is not at least as good.
pub fn solve_sensing(p: &SensingProblem, cfg: &SolverConfig) -> Result<SensingOutcome> {
    p.check()?;
    cfg.validate()?;
    let non_finite = || Error::NonFinite {
        context: format!("sensing solve for kernel {}", p.name),
    };
    if !p.w0.is_finite() || !p.capture.x.is_finite() || !p.capture.z.is_finite() {
        return Err(non_finite());
    }
    let x = &p.capture.x;
    let form = GramForm {
        gram: x.matmul_tr(x)?,
        cross: p.capture.z.matmul_tr(x)?,
        z_energy: p.capture.z.frobenius_sq(),
    };
    let objective_before = cs_objective(p, &p.w0)?;

    // Fixed seed keeps the solve a pure function of the problem.
    let mut rng = SeededRng::new(0x5E45);
    let lipschitz = spectral_norm_sq(x, 100, &mut rng)?;
    if lipschitz == 0.0 {
        // X = 0: the smooth term is constant, the minimiser is w = 0.
        let w = Matrix::zeros(p.w0.rows(), p.w0.cols());
        let after = cs_objective(p, &w)?;
        return Ok(SensingOutcome {
            weights: if after <= objective_before { w } else { p.w0.clone() },
            objective_before,
            objective_after: after.min(objective_before),
            iterations: 0,
        });
    }
    let mut eta = cfg.step_safety / lipschitz;

    let mut w = p.w0.clone();
    let mut wg = w.matmul(&form.gram)?;
    let mut f = form.smooth(&w, &wg) + p.lambda * w.l1_norm();
    let mut iterations = 0;
    while iterations < cfg.max_iters {
        iterations += 1;
        let (next, next_wg, next_f) = loop {
            let grad = wg.sub(&form.cross)?;
            let mut stepped = w.clone();
            stepped.axpy(-eta, &grad)?;
            let cand = soft_threshold(&stepped, eta * p.lambda);
            let cand_wg = cand.matmul(&form.gram)?;
            let cand_f = form.smooth(&cand, &cand_wg) + p.lambda * cand.l1_norm();
            if !cand_f.is_finite() {
                return Err(non_finite());
            }
            // Allow for round-off in the Gram-form objective.
            if cand_f <= f + 1e-12 * f.abs().max(1.0) || eta < 1e-300 {
                break (cand, cand_wg, cand_f);
            }
            eta *= 0.5;
        };
        let decrease = f - next_f;
        w = next;
        wg = next_wg;
        let prev = f;
        f = next_f;
        if decrease / prev.abs().max(f64::MIN_POSITIVE) < cfg.rel_tol {
            break;
        }
    }
    if !w.is_finite() {
        return Err(non_finite());
    }
    let objective_after = cs_objective(p, &w)?;
    if objective_after > objective_before {
        return Ok(SensingOutcome {
            weights: p.w0.clone(),
            objective_before,
            objective_after: objective_before,
            iterations,
        });
    }
    Ok(SensingOutcome {
        weights: w,
        objective_before,
        objective_after,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn problem(x: Matrix, w_true: &Matrix, w0: Matrix, lambda: f64) -> SensingProblem {
        let z = w_true.matmul(&x).unwrap();
        SensingProblem {
            name: "test".into(),
            capture: ActivationCapture { x, z },
            w0,
            lambda,
        }
    }

    #[test]
    fn capture_single_vector() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[0.0, -1.0]]);
        let v = vec![3.0, 4.0];
        let c = capture(&w, [v.clone()], 1, &mut SeededRng::new(0)).unwrap();
        assert_eq!(c.x.col(0), v);
        assert_eq!(c.z.as_slice(), &[11.0, -4.0]);
    }

    #[test]
    fn capture_saturates_in_arrival_order() {
        let w = Matrix::identity(1);
        let stream: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64]).collect();
        let c = capture(&w, stream.iter(), 10, &mut SeededRng::new(0)).unwrap();
        assert_eq!(c.x.as_slice(), &[0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn capture_rejects_empty_stream() {
        let w = Matrix::identity(2);
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(capture(&w, empty, 3, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn reservoir_inclusion_is_uniform() {
        let (items, n, trials) = (10_000usize, 100usize, 1_000usize);
        let mut hits = vec![0u32; items];
        for seed in 0..trials as u64 {
            let mut rng = SeededRng::new(seed);
            let mut r = Reservoir::new(n);
            for i in 0..items {
                r.offer(i, &mut rng);
            }
            for i in r.into_items() {
                hits[i] += 1;
            }
        }
        let p = n as f64 / items as f64;
        let mean = trials as f64 * p;
        let sd = (trials as f64 * p * (1.0 - p)).sqrt();
        // Each count is Binomial(1000, 0.01); among 10⁴ of them a few dozen
        // 3σ excursions are expected, anything far beyond that is bias.
        let beyond3 = hits.iter().filter(|&&h| (h as f64 - mean).abs() > 3.0 * sd).count();
        assert!(beyond3 < items / 100, "{beyond3} items outside 3σ");
        assert!(hits.iter().all(|&h| (h as f64 - mean).abs() < 6.0 * sd));
        let total: u32 = hits.iter().sum();
        assert_eq!(total as usize, n * trials);
    }

    #[test]
    fn objective_examples() {
        let mut rng = SeededRng::new(1);
        let x = Matrix::uniform(3, 5, 1.0, &mut rng);
        let w = Matrix::uniform(2, 3, 1.0, &mut rng);
        let p = problem(x, &w, w.clone(), 0.3);
        assert!((cs_objective(&p, &w).unwrap() - 0.3 * w.l1_norm()).abs() < 1e-12);

        let p0 = SensingProblem { lambda: 0.0, ..p.clone() };
        let zero = Matrix::zeros(2, 3);
        let want = 0.5 * p0.capture.z.frobenius_sq();
        assert!((cs_objective(&p0, &zero).unwrap() - want).abs() < 1e-12);

        let tiny = SensingProblem {
            name: "1x1".into(),
            capture: ActivationCapture {
                x: Matrix::column(&[2.0]),
                z: Matrix::column(&[4.0]),
            },
            w0: Matrix::column(&[1.0]),
            lambda: 1.0,
        };
        assert_eq!(cs_objective(&tiny, &Matrix::column(&[1.0])).unwrap(), 3.0);
    }

    #[test]
    fn soft_threshold_examples() {
        let w = Matrix::from_rows(&[&[0.3, -0.1]]);
        assert_eq!(soft_threshold(&w, 0.0), w);
        let s = soft_threshold(&w, 0.2);
        assert!((s.get(0, 0) - 0.1).abs() < 1e-15);
        assert_eq!(s.get(0, 1), 0.0);
    }

    #[test]
    fn pure_least_squares_converges() {
        let mut rng = SeededRng::new(2);
        let x = Matrix::uniform(3, 3, 1.0, &mut rng).add(&Matrix::identity(3)).unwrap();
        let w_true = Matrix::uniform(2, 3, 1.0, &mut rng);
        let p = problem(x, &w_true, Matrix::zeros(2, 3), 0.0);
        let mut last = f64::INFINITY;
        for iters in [1, 5, 20, 100, 2000, 20000] {
            let cfg = SolverConfig { max_iters: iters, rel_tol: 0.0, ..Default::default() };
            let w = solve_sensing(&p, &cfg).unwrap().weights;
            let r = p.capture.z.sub(&w.matmul(&p.capture.x).unwrap()).unwrap().frobenius_sq().sqrt();
            assert!(r <= last + 1e-12, "residual grew: {r} > {last}");
            last = r;
        }
        assert!(last < 1e-6, "{last}");
    }

    #[test]
    fn large_lambda_from_zero_stays_zero() {
        let mut rng = SeededRng::new(3);
        let x = Matrix::uniform(3, 8, 1.0, &mut rng);
        let w_true = Matrix::uniform(4, 3, 1.0, &mut rng);
        let z = w_true.matmul(&x).unwrap();
        let lambda = z.matmul_tr(&x).unwrap().max_abs();
        let p = SensingProblem {
            name: "zero".into(),
            capture: ActivationCapture { x, z },
            w0: Matrix::zeros(4, 3),
            lambda,
        };
        let w = solve_sensing(&p, &SolverConfig::default()).unwrap().weights;
        assert!(w.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_design_returns_zero_kernel() {
        let p = SensingProblem {
            name: "blank".into(),
            capture: ActivationCapture {
                x: Matrix::zeros(2, 4),
                z: Matrix::zeros(3, 4),
            },
            w0: Matrix::filled(3, 2, 0.5),
            lambda: 0.1,
        };
        let out = solve_sensing(&p, &SolverConfig::default()).unwrap();
        assert_eq!(out.weights, Matrix::zeros(3, 2));
        assert!(out.objective_after <= out.objective_before);
    }

    #[test]
    fn non_finite_input_names_kernel() {
        let mut x = Matrix::filled(2, 2, 1.0);
        x.set(0, 1, f64::NAN);
        let p = SensingProblem {
            name: "l3.U".into(),
            capture: ActivationCapture {
                x,
                z: Matrix::zeros(1, 2),
            },
            w0: Matrix::zeros(1, 2),
            lambda: 0.1,
        };
        let err = solve_sensing(&p, &SolverConfig::default()).unwrap_err().to_string();
        assert!(err.contains("l3.U"), "{err}");
    }

    #[test]
    fn rejects_bad_config_and_shapes() {
        let p = SensingProblem {
            name: "s".into(),
            capture: ActivationCapture {
                x: Matrix::zeros(2, 2),
                z: Matrix::zeros(1, 2),
            },
            w0: Matrix::zeros(2, 2),
            lambda: 0.1,
        };
        assert!(solve_sensing(&p, &SolverConfig::default()).is_err());
        let bad = SolverConfig { max_iters: 0, ..Default::default() };
        let ok = SensingProblem { w0: Matrix::zeros(1, 2), ..p };
        assert!(solve_sensing(&ok, &bad).is_err());
    }
}
