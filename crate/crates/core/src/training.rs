//! Sparse-aware training loop: learning-rate schedule, configuration,
//! in-training prune events and metrics emission.

use crate::checkpoint::{config_hash, Checkpoint};
use crate::error::{Error, Result};
use crate::model::{GroupId, SeqModel};
use crate::numerics::{Matrix, SeededRng};
use crate::optim::{Optimizer, OptimizerKind};
use crate::pruning::{
    csp_prune_event, gradual_prune_event, naive_prune, PruneEventReport, SensingController,
    SparsitySchedule, Strategy,
};
use crate::sensing::{capture, default_capture_size, SolverConfig};
use crate::tasks::{Task, TaskSpec};

/// Warm-hold-decay learning rate: linear ramp, plateau, log-linear decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warm_end: u64,
    pub hold_end: u64,
    pub decay_end: u64,
}

impl LrSchedule {
    /// 1e-7 → 5e-4 by step 3K, held to 75K, decayed to 1e-5 at 200K.
    pub fn long_run() -> Self {
        Self {
            lr_init: 1e-7,
            lr_peak: 5e-4,
            lr_final: 1e-5,
            warm_end: 3_000,
            hold_end: 75_000,
            decay_end: 200_000,
        }
    }

    /// The long-run plan scaled to 2000 steps.
    pub fn desk() -> Self {
        Self {
            warm_end: 30,
            hold_end: 750,
            decay_end: 2_000,
            ..Self::long_run()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates_ok = self.lr_init >= 0.0
            && self.lr_init <= self.lr_peak
            && self.lr_final > 0.0
            && self.lr_peak.is_finite();
        let steps_ok = self.warm_end <= self.hold_end && self.hold_end <= self.decay_end;
        if !rates_ok || !steps_ok {
            return Err(Error::InvalidArgument(format!("inconsistent learning-rate schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        if t < self.warm_end {
            let frac = t as f64 / self.warm_end as f64;
            return self.lr_init + (self.lr_peak - self.lr_init) * frac;
        }
        if t <= self.hold_end {
            return self.lr_peak;
        }
        if t >= self.decay_end {
            return self.lr_final;
        }
        let frac = (t - self.hold_end) as f64 / (self.decay_end - self.hold_end) as f64;
        self.lr_peak * (self.lr_final / self.lr_peak).powf(frac)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub schedule: SparsitySchedule,
    pub lr: LrSchedule,
    pub optimizer: OptimizerKind,
    pub task: TaskSpec,
    pub hidden: usize,
    pub layers: usize,
    pub batch_size: usize,
    pub total_steps: u64,
    pub dropout: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
    /// Steps between sensing events inside the pruning window.
    pub capture_interval: u64,
    /// Fixed capture size; `None` uses the per-group default.
    pub capture_size: Option<usize>,
    /// Smallest capture size used by the per-group default.
    pub capture_floor: usize,
    /// Sequences in each midway-inference pass.
    pub capture_batch: usize,
    /// Steps between gradual-pruning events inside the pruning window.
    pub gradual_interval: u64,
    pub solver: SolverConfig,
    pub controller: SensingController,
    pub eval_size: usize,
    /// Steps between metrics rows.
    pub log_interval: u64,
    /// Steps between checkpoints handed to the sink; 0 disables them.
    pub checkpoint_interval: u64,
    /// Test hook: forces a non-finite training loss at this step.
    pub inject_nan_at: Option<u64>,
}

impl TrainConfig {
    /// Two-thousand-step adding-problem run with a 1000→1500 pruning window.
    pub fn desk(strategy: Strategy, final_sparsity: f64, seed: u64) -> Self {
        Self {
            strategy,
            schedule: SparsitySchedule {
                final_sparsity,
                start: 1_000,
                end: 1_500,
            },
            lr: LrSchedule::desk(),
            optimizer: OptimizerKind::Adam,
            task: TaskSpec::Adding { seq_len: 20 },
            hidden: 64,
            layers: 1,
            batch_size: 32,
            total_steps: 2_000,
            dropout: 0.0,
            grad_clip: 1.0,
            seed,
            capture_interval: 2,
            capture_size: Some(8192),
            capture_floor: 64,
            capture_batch: 512,
            gradual_interval: 10,
            solver: SolverConfig::default(),
            controller: SensingController::default(),
            eval_size: 256,
            log_interval: 50,
            checkpoint_interval: 0,
            inject_nan_at: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        self.schedule.validate()?;
        self.lr.validate()?;
        self.solver.validate()?;
        self.controller.validate()?;
        if !(self.schedule.start > self.lr.warm_end && self.schedule.end < self.lr.decay_end) {
            return bad(format!(
                "pruning window [{}, {}] must lie strictly inside the learning-rate window ({}, {})",
                self.schedule.start, self.schedule.end, self.lr.warm_end, self.lr.decay_end
            ));
        }
        if self.hidden == 0 || self.layers == 0 {
            return bad("hidden and layers must be positive".into());
        }
        if self.batch_size == 0 || self.total_steps == 0 || self.eval_size == 0 {
            return bad("batch_size, total_steps and eval_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.grad_clip >= 0.0) {
            return bad(format!("grad_clip {} must be >= 0", self.grad_clip));
        }
        if self.capture_interval == 0 || self.gradual_interval == 0 || self.log_interval == 0 {
            return bad("capture_interval, gradual_interval and log_interval must be positive".into());
        }
        if self.capture_size == Some(0) || self.capture_floor == 0 || self.capture_batch == 0 {
            return bad("capture sizes must be positive".into());
        }
        Ok(())
    }

    /// Stable digest of every field.
    pub fn hash(&self) -> [u8; 32] {
        config_hash(&format!("{self:?}"))
    }

    fn capture_size_for(&self, input_dim: usize) -> usize {
        self.capture_size
            .unwrap_or_else(|| default_capture_size(input_dim).max(self.capture_floor))
    }
}

/// One metrics-stream record.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    /// `"train"` for in-loop rows, `"final"` for the row after finalisation.
    pub phase: &'static str,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub lr: f64,
    pub sparsity: f64,
    /// In [`SeqModel::kernel_ids`] order.
    pub kernel_sparsity: Vec<f64>,
    /// In [`SeqModel::groups`] order.
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    /// Non-skipped prune events since the previous row.
    pub events: usize,
    pub newly_pruned: usize,
    pub outside_smallest: usize,
}

impl MetricsRow {
    pub fn header(model: &SeqModel) -> Vec<String> {
        let mut h: Vec<String> = ["step", "phase", "train_loss", "eval_loss", "lr", "sparsity"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(model.kernel_ids().iter().map(|k| format!("sparsity:{k}")));
        h.extend(model.groups().iter().map(|g| format!("lambda:{g}")));
        h.extend(model.groups().iter().map(|g| format!("rho:{g}")));
        h.extend(["events", "newly_pruned", "outside_smallest"].iter().map(|s| s.to_string()));
        h
    }

    /// Values in [`MetricsRow::header`] order, floats in shortest
    /// round-trip form.
    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.step.to_string(),
            self.phase.to_string(),
            self.train_loss.to_string(),
            self.eval_loss.to_string(),
            self.lr.to_string(),
            self.sparsity.to_string(),
        ];
        f.extend(self.kernel_sparsity.iter().map(f64::to_string));
        f.extend(self.lambda.iter().map(f64::to_string));
        f.extend(self.rho.iter().map(f64::to_string));
        f.extend([self.events, self.newly_pruned, self.outside_smallest].map(|v| v.to_string()));
        f
    }
}

/// Receives the training loop's output as it is produced.
pub trait MetricsSink {
    fn row(&mut self, model: &SeqModel, row: &MetricsRow) -> Result<()>;
    fn event(&mut self, report: &PruneEventReport) -> Result<()>;
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()>;
}

/// Keeps everything in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub rows: Vec<MetricsRow>,
    pub events: Vec<PruneEventReport>,
    pub last_checkpoint: Option<Checkpoint>,
}

impl MetricsSink for MemorySink {
    fn row(&mut self, _: &SeqModel, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
    fn event(&mut self, report: &PruneEventReport) -> Result<()> {
        self.events.push(report.clone());
        Ok(())
    }
    fn checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.last_checkpoint = Some(ckpt.clone());
        Ok(())
    }
}

/// Independent random streams so that, for example, capture sampling never
/// perturbs the data order.
const STREAM_INIT: u64 = 1;
const STREAM_DATA: u64 = 2;
const STREAM_DROPOUT: u64 = 3;
const STREAM_CAPTURE: u64 = 4;

pub struct TrainOutcome {
    pub model: SeqModel,
    pub controllers: Vec<(GroupId, SensingController)>,
    pub optimizer: Optimizer,
    pub final_eval_loss: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            step: cfg.total_steps,
            config_hash: cfg.hash(),
            model: self.model.clone(),
            controllers: self.controllers.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    model: SeqModel,
    optimizer: Optimizer,
    controllers: Vec<(GroupId, SensingController)>,
    capture_rng: SeededRng,
    pending: (usize, usize, usize),
}

fn is_event_step(t: u64, sch: &SparsitySchedule, interval: u64) -> bool {
    sch.in_window(t) && ((t - sch.start) % interval == 0 || t == sch.end)
}

/// Columns of a features×batch sequence, in time-major order.
fn columns(steps: &[Matrix]) -> impl Iterator<Item = Vec<f64>> + '_ {
    steps.iter().flat_map(|m| (0..m.cols()).map(move |c| m.col(c)))
}

impl Trainer<'_> {
    fn controller_mut(&mut self, g: GroupId) -> &mut SensingController {
        &mut self
            .controllers
            .iter_mut()
            .find(|(id, _)| *id == g)
            .expect("one controller per group")
            .1
    }

    fn record(&mut self, report: PruneEventReport, sink: &mut dyn MetricsSink) -> Result<()> {
        if !report.skipped {
            self.pending.0 += 1;
            self.pending.1 += report.newly_pruned;
            self.pending.2 += report.outside_smallest;
        }
        sink.event(&report)
    }

    fn csp_group(
        &mut self,
        g: GroupId,
        inputs: Vec<Vec<f64>>,
        t: u64,
        sink: &mut dyn MetricsSink,
    ) -> Result<()> {
        let target = self.cfg.schedule.target(t);
        let weights = self.model.group_weights(g);
        let mask = self.model.group_mask(g);
        let n = self.cfg.capture_size_for(weights.cols());
        let mut ctrl = *self.controller_mut(g);
        let rng = &mut self.capture_rng;
        let ev = csp_prune_event(
            &g.to_string(),
            &weights,
            &mask,
            &mut ctrl,
            target,
            t,
            || capture(&weights, inputs, n, rng),
            &self.cfg.solver,
        )?;
        *self.controller_mut(g) = ctrl;
        if !ev.report.skipped {
            self.model.install_group(g, &ev.weights, &ev.mask)?;
        }
        self.record(ev.report, sink)
    }

    /// Sensing events layer by layer on a fresh midway-inference batch; each
    /// capture comes from a forward pass through the already-updated layers
    /// below.
    fn csp_events(&mut self, task: &Task, t: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        let batch = task.batch(self.cfg.capture_batch, &mut self.capture_rng);
        let batch = &batch;
        let mut xs = batch.steps();
        for l in 0..self.model.layers.len() {
            self.csp_group(GroupId::Input(l), columns(&xs).collect(), t, sink)?;
            let (hs, _) = self.model.layer_forward(l, &xs)?;
            // The recurrent kernel sees h_{t-1}, starting from the zero state.
            let mut prev = vec![Matrix::zeros(self.model.hidden(), batch.batch)];
            prev.extend(hs[..hs.len() - 1].iter().cloned());
            self.csp_group(GroupId::Recurrent(l), columns(&prev).collect(), t, sink)?;
            xs = self.model.layer_forward(l, &xs)?.0;
        }
        let head_in: Vec<Matrix> = self.model.head_steps(batch).into_iter().map(|s| xs[s].clone()).collect();
        self.csp_group(GroupId::Head, columns(&head_in).collect(), t, sink)
    }

    fn gradual_events(&mut self, t: u64, sink: &mut dyn MetricsSink) -> Result<()> {
        let target = self.cfg.schedule.target(t);
        for id in self.model.kernel_ids() {
            let report = gradual_prune_event(&id.to_string(), self.model.kernel_mut(id), target, t)?;
            self.record(report, sink)?;
        }
        Ok(())
    }

    fn row(&mut self, t: u64, phase: &'static str, train_loss: f64, eval_loss: f64) -> MetricsRow {
        let (events, newly_pruned, outside_smallest) = std::mem::take(&mut self.pending);
        MetricsRow {
            step: t,
            phase,
            train_loss,
            eval_loss,
            lr: self.cfg.lr.lr_at(t),
            sparsity: self.model.sparsity(),
            kernel_sparsity: self
                .model
                .kernel_ids()
                .iter()
                .map(|id| self.model.kernel(*id).mask_sparsity())
                .collect(),
            lambda: self.controllers.iter().map(|(_, c)| c.lambda).collect(),
            rho: self.controllers.iter().map(|(_, c)| c.rho).collect(),
            events,
            newly_pruned,
            outside_smallest,
        }
    }

    fn checkpoint(&self, t: u64) -> Checkpoint {
        Checkpoint {
            step: t,
            config_hash: self.cfg.hash(),
            model: self.model.clone(),
            controllers: self.controllers.clone(),
            optimizer: self.optimizer.clone(),
        }
    }
}

/// Runs one experiment. A non-finite training loss aborts with
/// [`Error::NonFinite`]; checkpoints already handed to the sink are kept.
pub fn train(cfg: &TrainConfig, sink: &mut dyn MetricsSink) -> Result<TrainOutcome> {
    cfg.validate()?;
    let task = Task::new(cfg.task.clone())?;
    let mut init_rng = SeededRng::stream(cfg.seed, STREAM_INIT);
    let mut data_rng = SeededRng::stream(cfg.seed, STREAM_DATA);
    let mut dropout_rng = SeededRng::stream(cfg.seed, STREAM_DROPOUT);
    let model = SeqModel::new(
        task.input_dim(),
        cfg.hidden,
        cfg.layers,
        task.output_dim(),
        task.objective(),
        &mut init_rng,
    );
    let eval_set = task.eval_set(cfg.eval_size, cfg.seed);
    let controllers = model.groups().into_iter().map(|g| (g, cfg.controller)).collect();
    let mut tr = Trainer {
        cfg,
        model,
        optimizer: Optimizer::new(cfg.optimizer),
        controllers,
        capture_rng: SeededRng::stream(cfg.seed, STREAM_CAPTURE),
        pending: (0, 0, 0),
    };

    let mut last_train_loss = f64::NAN;
    for t in 1..=cfg.total_steps {
        let batch = task.batch(cfg.batch_size, &mut data_rng);
        match cfg.strategy {
            Strategy::Csp if is_event_step(t, &cfg.schedule, cfg.capture_interval) => {
                tr.csp_events(&task, t, sink)?
            }
            Strategy::Gradual if is_event_step(t, &cfg.schedule, cfg.gradual_interval) => {
                tr.gradual_events(t, sink)?
            }
            _ => {}
        }
        let (mut loss, mut grads) = tr.model.loss_and_grads(&batch, cfg.dropout, &mut dropout_rng)?;
        if cfg.inject_nan_at == Some(t) {
            loss = f64::NAN;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("training loss at step {t}"),
            });
        }
        if cfg.grad_clip > 0.0 {
            let norm = grads.global_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        tr.optimizer.step(&mut tr.model, &grads, cfg.lr.lr_at(t))?;
        last_train_loss = loss;

        if t % cfg.log_interval == 0 || t == cfg.total_steps {
            let eval = tr.model.loss(&eval_set)?;
            let row = tr.row(t, "train", loss, eval);
            sink.row(&tr.model, &row)?;
        }
        if cfg.checkpoint_interval > 0 && t % cfg.checkpoint_interval == 0 {
            sink.checkpoint(&tr.checkpoint(t))?;
        }
    }

    if cfg.strategy == Strategy::Naive {
        for r in naive_prune(&mut tr.model, cfg.schedule.final_sparsity, cfg.total_steps)? {
            tr.record(r, sink)?;
        }
    }
    let final_eval_loss = tr.model.loss(&eval_set)?;
    let row = tr.row(cfg.total_steps, "final", last_train_loss, final_eval_loss);
    sink.row(&tr.model, &row)?;
    sink.checkpoint(&tr.checkpoint(cfg.total_steps))?;

    Ok(TrainOutcome {
        model: tr.model,
        controllers: tr.controllers,
        optimizer: tr.optimizer,
        final_eval_loss,
    })
}
