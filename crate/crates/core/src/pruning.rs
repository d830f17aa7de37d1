//! Sparsity schedule, the adaptive sensing controller and the three pruning
//! strategies: one-shot magnitude pruning after training, gradual magnitude
//! pruning and compressed-sensing pruning.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SeqModel;
use crate::nn::MaskedKernel;
use crate::numerics::{quantile_abs, Matrix};
use crate::sensing::{solve_sensing, ActivationCapture, SensingProblem, SolverConfig};

/// Cubic ramp from 0 at `start` to `final_sparsity` at `end`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySchedule {
    pub final_sparsity: f64,
    pub start: u64,
    pub end: u64,
}

impl SparsitySchedule {
    pub fn new(final_sparsity: f64, start: u64, end: u64) -> Result<Self> {
        let s = Self {
            final_sparsity,
            start,
            end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.final_sparsity) {
            return Err(Error::InvalidArgument(format!(
                "target sparsity {} outside [0, 1)",
                self.final_sparsity
            )));
        }
        if self.start >= self.end {
            return Err(Error::InvalidArgument(format!(
                "pruning start {} must precede pruning end {}",
                self.start, self.end
            )));
        }
        Ok(())
    }

    /// `s_t = s_f·(1 − (1 − (t − t0)/(tn − t0))³)`, clamped outside the window.
    pub fn target(&self, t: u64) -> f64 {
        if t <= self.start {
            return 0.0;
        }
        if t >= self.end {
            return self.final_sparsity;
        }
        let progress = (t - self.start) as f64 / (self.end - self.start) as f64;
        self.final_sparsity * (1.0 - (1.0 - progress).powi(3))
    }

    pub fn in_window(&self, t: u64) -> bool {
        t > self.start && t <= self.end
    }
}

/// Fraction of entries with `|w| < rho`.
pub fn measure_sparsity(kernel: &Matrix, rho: f64) -> f64 {
    if kernel.is_empty() {
        return 0.0;
    }
    let below = kernel.as_slice().iter().filter(|v| v.abs() < rho).count();
    below as f64 / kernel.len() as f64
}

/// Zeroes entries with `|w| < rho` and returns the pruned kernel with its
/// 0/1 mask. Survivors are untouched.
pub fn hard_threshold_prune(kernel: &Matrix, rho: f64) -> (Matrix, Matrix) {
    let mut pruned = kernel.clone();
    let mut mask = Matrix::filled(kernel.rows(), kernel.cols(), 1.0);
    for (w, m) in pruned.as_mut_slice().iter_mut().zip(mask.as_mut_slice()) {
        if w.abs() < rho {
            *w = 0.0;
            *m = 0.0;
        }
    }
    (pruned, mask)
}

/// Per-kernel-group state for sensing-based pruning: the sensing coefficient
/// λ and the pruning threshold ρ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensingController {
    pub lambda: f64,
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub epsilon: f64,
    pub rho: f64,
    /// Largest multiplicative growth of ρ in one event.
    pub rho_growth_cap: f64,
}

impl Default for SensingController {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_lower: 0.001,
            lambda_upper: 1.0,
            epsilon: 0.005,
            rho: 0.002,
            rho_growth_cap: 1.05,
        }
    }
}

impl SensingController {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_lower >= 0.0
            && self.lambda_lower <= self.lambda_upper
            && (self.lambda_lower..=self.lambda_upper).contains(&self.lambda)
            && self.epsilon >= 0.0
            && self.rho >= 0.0
            && self.rho_growth_cap >= 1.0;
        if !ok {
            return Err(Error::InvalidArgument(format!("inconsistent sensing controller {self:?}")));
        }
        Ok(())
    }

    /// Overshoot lowers λ by ε, anything else raises it; clamped to the
    /// bounds. A tie counts as "not overshooting".
    pub fn update_lambda(&mut self, measured: f64, target: f64) {
        self.lambda = if measured > target {
            (self.lambda - self.epsilon).max(self.lambda_lower)
        } else {
            (self.lambda + self.epsilon).min(self.lambda_upper)
        };
    }

    /// Raises ρ toward the kernel's `target` magnitude quantile while the
    /// kernel is still short of its target, by at most `rho_growth_cap`
    /// per call. ρ never decreases.
    pub fn update_threshold(&mut self, measured: f64, target: f64, kernel: &Matrix) -> Result<()> {
        if measured < target {
            let q = quantile_abs(kernel, target)?;
            self.rho = self.rho.max((self.rho * self.rho_growth_cap).min(q));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// No pruning at all.
    Dense,
    /// One-shot magnitude pruning after training, no retraining.
    Naive,
    /// Magnitude quantile pruning along the cubic schedule.
    Gradual,
    /// Sensing-based pruning during training.
    Csp,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Dense => "dense",
            Strategy::Naive => "naive",
            Strategy::Gradual => "gradual",
            Strategy::Csp => "csp",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" | "none" => Ok(Strategy::Dense),
            "naive" | "a" | "method-a" => Ok(Strategy::Naive),
            "gradual" | "b" | "method-b" => Ok(Strategy::Gradual),
            "csp" => Ok(Strategy::Csp),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy '{other}' (expected dense, naive, gradual or csp)"
            ))),
        }
    }
}

/// What one prune event did to one kernel (or kernel group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneEventReport {
    pub step: u64,
    pub kernel: String,
    pub strategy: Strategy,
    /// The event's guard found the kernel already at target.
    pub skipped: bool,
    pub target: f64,
    pub sparsity_before: f64,
    pub sparsity_after: f64,
    /// Pruning threshold in force after the event.
    pub threshold: f64,
    /// Sensing coefficient used by the event; sensing events only.
    pub lambda: Option<f64>,
    /// Sensing objective around the solve; absent when no solve ran.
    pub objective_before: Option<f64>,
    pub objective_after: Option<f64>,
    /// Previously active weights switched off by this event.
    pub newly_pruned: usize,
    /// Of those, how many were not among the `newly_pruned` smallest-magnitude
    /// active weights before the event.
    pub outside_smallest: usize,
}

/// Counts newly pruned positions and how many of them fall outside the
/// equally sized set of smallest-magnitude previously active weights.
pub fn selection_stats(before: &Matrix, mask_before: &Matrix, mask_after: &Matrix) -> (usize, usize) {
    let newly: Vec<usize> = (0..before.len())
        .filter(|&i| mask_before.as_slice()[i] != 0.0 && mask_after.as_slice()[i] == 0.0)
        .collect();
    if newly.is_empty() {
        return (0, 0);
    }
    let mut active: Vec<usize> = (0..before.len())
        .filter(|&i| mask_before.as_slice()[i] != 0.0)
        .collect();
    let w = before.as_slice();
    active.sort_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()).then(a.cmp(&b)));
    let mut smallest = vec![false; before.len()];
    for &i in active.iter().take(newly.len()) {
        smallest[i] = true;
    }
    let outside = newly.iter().filter(|&&i| !smallest[i]).count();
    (newly.len(), outside)
}

/// Result of one sensing-based prune event on a kernel group.
#[derive(Clone, Debug)]
pub struct CspEvent {
    pub weights: Matrix,
    pub mask: Matrix,
    pub report: PruneEventReport,
}

/// One sensing-based prune event: sense, hard-threshold at ρ, then adapt λ
/// and ρ. Skipped (weights returned unchanged) when the kernel already meets
/// the target at the current ρ; `capture` is only called otherwise.
///
/// The mask is rebuilt from the sensed kernel, so a pruned weight the solver
/// pushes back above ρ is revived.
#[allow(clippy::too_many_arguments)]
pub fn csp_prune_event(
    name: &str,
    weights: &Matrix,
    mask: &Matrix,
    controller: &mut SensingController,
    target: f64,
    step: u64,
    capture: impl FnOnce() -> Result<ActivationCapture>,
    solver: &SolverConfig,
) -> Result<CspEvent> {
    let sparsity_before = measure_sparsity(weights, controller.rho);
    let mut report = PruneEventReport {
        step,
        kernel: name.to_string(),
        strategy: Strategy::Csp,
        skipped: true,
        target,
        sparsity_before,
        sparsity_after: sparsity_before,
        threshold: controller.rho,
        lambda: Some(controller.lambda),
        objective_before: None,
        objective_after: None,
        newly_pruned: 0,
        outside_smallest: 0,
    };
    if sparsity_before >= target {
        return Ok(CspEvent {
            weights: weights.clone(),
            mask: mask.clone(),
            report,
        });
    }

    let problem = SensingProblem {
        name: name.to_string(),
        capture: capture()?,
        w0: weights.clone(),
        lambda: controller.lambda,
    };
    let sensed = solve_sensing(&problem, solver)?;
    let (pruned, new_mask) = hard_threshold_prune(&sensed.weights, controller.rho);
    let sparsity_after = measure_sparsity(&pruned, controller.rho);
    let (newly_pruned, outside_smallest) = selection_stats(weights, mask, &new_mask);

    controller.update_lambda(sparsity_after, target);
    controller.update_threshold(sparsity_after, target, &pruned)?;

    report.skipped = false;
    report.sparsity_after = sparsity_after;
    report.threshold = controller.rho;
    report.objective_before = Some(sensed.objective_before);
    report.objective_after = Some(sensed.objective_after);
    report.newly_pruned = newly_pruned;
    report.outside_smallest = outside_smallest;
    Ok(CspEvent {
        weights: pruned,
        mask: new_mask,
        report,
    })
}

/// Gradual magnitude pruning of one kernel: prune below the `target`
/// magnitude quantile, rebuilding the mask from scratch. Returns the
/// threshold used.
pub fn gradual_prune_event(
    name: &str,
    kernel: &mut MaskedKernel,
    target: f64,
    step: u64,
) -> Result<PruneEventReport> {
    let before = kernel.weights().clone();
    let mask_before = kernel.mask().clone();
    let threshold = quantile_abs(&before, target)?;
    let sparsity_before = kernel.mask_sparsity();
    let (pruned, mask) = hard_threshold_prune(&before, threshold);
    let (newly_pruned, outside_smallest) = selection_stats(&before, &mask_before, &mask);
    *kernel = MaskedKernel::with_mask(pruned, mask)?;
    Ok(PruneEventReport {
        step,
        kernel: name.to_string(),
        strategy: Strategy::Gradual,
        skipped: false,
        target,
        sparsity_before,
        sparsity_after: kernel.mask_sparsity(),
        threshold,
        lambda: None,
        objective_before: None,
        objective_after: None,
        newly_pruned,
        outside_smallest,
    })
}

/// One-shot post-training magnitude pruning of every kernel to
/// `final_sparsity`. Returns one report per kernel.
pub fn naive_prune(model: &mut SeqModel, final_sparsity: f64, step: u64) -> Result<Vec<PruneEventReport>> {
    if !(0.0..1.0).contains(&final_sparsity) {
        return Err(Error::InvalidArgument(format!(
            "target sparsity {final_sparsity} outside [0, 1)"
        )));
    }
    let mut reports = Vec::new();
    for id in model.kernel_ids() {
        let mut r = gradual_prune_event(&id.to_string(), model.kernel_mut(id), final_sparsity, step)?;
        r.strategy = Strategy::Naive;
        reports.push(r);
    }
    Ok(reports)
}
