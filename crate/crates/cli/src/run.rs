//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use csp_core::checkpoint::{export_sparse, Checkpoint};
use csp_core::{MetricsRow, MetricsSink, PruneEventReport, SeqModel, Task};
use log::{info, warn};

use crate::analysis;
use crate::config::{Resolved, RunConfig};

/// Version tag written in the first column of every metrics row.
pub const METRICS_VERSION: &str = "1";

pub const EVENTS_HEADER: [&str; 13] = [
    "step",
    "kernel",
    "strategy",
    "skipped",
    "target",
    "sparsity_before",
    "sparsity_after",
    "threshold",
    "lambda",
    "objective_before",
    "objective_after",
    "newly_pruned",
    "outside_smallest",
];

fn load_config(path: &Path) -> Result<Resolved> {
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(RunConfig::load(path)?.resolve(base)?)
}

/// Exclusive ownership of a run directory; released on drop.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join("train.lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .with_context(|| format!("{} is locked by another run (remove {} if stale)", dir.display(), path.display()))?;
        writeln!(f, "{}", std::process::id())?;
        Ok(Self(path))
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct FileSink {
    dir: PathBuf,
    metrics: csv::Writer<File>,
    events: csv::Writer<File>,
    wrote_header: bool,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl FileSink {
    fn create(dir: &Path) -> Result<Self> {
        let open = |name: &str| {
            let p = dir.join(name);
            csv::Writer::from_path(&p).with_context(|| format!("creating {}", p.display()))
        };
        let mut events = open("events.csv")?;
        events.write_record(EVENTS_HEADER)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open("metrics.csv")?,
            events,
            wrote_header: false,
        })
    }
}

impl MetricsSink for FileSink {
    fn row(&mut self, model: &SeqModel, row: &MetricsRow) -> csp_core::Result<()> {
        let io = |e: csv::Error| csp_core::Error::Io {
            path: self.dir.join("metrics.csv"),
            source: e.into(),
        };
        if !self.wrote_header {
            let mut h = vec!["version".to_string()];
            h.extend(MetricsRow::header(model));
            self.metrics.write_record(&h).map_err(io)?;
            self.wrote_header = true;
        }
        let mut f = vec![METRICS_VERSION.to_string()];
        f.extend(row.fields());
        self.metrics.write_record(&f).map_err(io)?;
        self.metrics.flush().map_err(|e| csp_core::Error::Io {
            path: self.dir.join("metrics.csv"),
            source: e,
        })?;
        if row.phase == "train" {
            info!("step {} loss {:.5} eval {:.5} sparsity {:.4}", row.step, row.train_loss, row.eval_loss, row.sparsity);
        }
        Ok(())
    }

    fn event(&mut self, e: &PruneEventReport) -> csp_core::Result<()> {
        let rec = [
            e.step.to_string(),
            e.kernel.clone(),
            e.strategy.to_string(),
            e.skipped.to_string(),
            e.target.to_string(),
            e.sparsity_before.to_string(),
            e.sparsity_after.to_string(),
            e.threshold.to_string(),
            opt(e.lambda),
            opt(e.objective_before),
            opt(e.objective_after),
            e.newly_pruned.to_string(),
            e.outside_smallest.to_string(),
        ];
        self.events.write_record(&rec).map_err(|err| csp_core::Error::Io {
            path: self.dir.join("events.csv"),
            source: err.into(),
        })
    }

    fn checkpoint(&mut self, ckpt: &Checkpoint) -> csp_core::Result<()> {
        ckpt.save(&self.dir.join("checkpoint.bin"))
    }
}

fn unix_time() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn train(config_path: &Path) -> Result<()> {
    let resolved = load_config(config_path)?;
    let cfg = &resolved.train;
    let dir = &resolved.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let _lock = Lock::acquire(dir)?;
    fs::copy(config_path, dir.join("config.toml")).context("copying config")?;

    // Timestamps live only in this sidecar so the CSVs are reproducible.
    let mut log = File::create(dir.join("run.log")).context("creating run.log")?;
    writeln!(log, "started {}", unix_time())?;
    info!("training {} (seed {}) into {}", cfg.strategy, cfg.seed, dir.display());

    let started = Instant::now();
    let mut sink = FileSink::create(dir)?;
    let outcome = csp_core::train(cfg, &mut sink);
    sink.events.flush().context("flushing events.csv")?;
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            writeln!(log, "aborted {} after {:.1}s: {e}", unix_time(), started.elapsed().as_secs_f64())?;
            return Err(e.into());
        }
    };

    let export = export_sparse(&outcome.model);
    fs::write(dir.join("model.sparse"), &export).context("writing model.sparse")?;
    writeln!(
        log,
        "finished {} after {:.1}s; final eval loss {}; sparsity {}; export {} bytes",
        unix_time(),
        started.elapsed().as_secs_f64(),
        outcome.final_eval_loss,
        outcome.model.sparsity(),
        export.len()
    )?;
    println!(
        "final eval loss {:.6}, sparsity {:.4}, outputs in {}",
        outcome.final_eval_loss,
        outcome.model.sparsity(),
        dir.display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, config_path: &Path) -> Result<()> {
    let resolved = load_config(config_path)?;
    let cfg = &resolved.train;
    let ckpt = Checkpoint::load(checkpoint)?;
    if ckpt.config_hash != cfg.hash() {
        warn!("checkpoint was trained with a different configuration");
    }
    let task = Task::new(cfg.task.clone())?;
    let loss = ckpt.model.loss(&task.eval_set(cfg.eval_size, cfg.seed))?;
    println!("{loss}");
    Ok(())
}

pub fn histogram(checkpoint: &Path, bins: usize, out: &Path) -> Result<()> {
    if bins == 0 {
        return Err(crate::config::ConfigError("--bins must be positive".into()).into());
    }
    let ckpt = Checkpoint::load(checkpoint)?;
    let hists = analysis::model_histograms(&ckpt.model, bins);
    analysis::write_histograms(out, &hists)?;
    for h in &hists {
        info!("{}: {} of {} weights zero, max |w| {:.5}", h.kernel, h.zeros, h.total(), h.max_abs);
    }
    Ok(())
}

pub fn compare(runs: &[PathBuf], baseline: &Path, out: &Path) -> Result<()> {
    let base = analysis::read_summary(baseline).context("reading baseline run")?;
    let summaries = runs.iter().map(|r| analysis::read_summary(r)).collect::<Result<Vec<_>>>()?;
    let rows = analysis::compare(&summaries, &base)?;
    println!("{:<40} {:>12} {:>12} {:>10}", "run", "eval_loss", "rel_dgrd_%", "sparsity");
    for c in &rows {
        println!(
            "{:<40} {:>12.6} {:>12.2} {:>10.4}",
            c.run.name,
            c.run.eval_loss,
            100.0 * c.rel_degradation,
            c.run.sparsity
        );
    }
    analysis::write_comparison(out, &rows)?;
    Ok(())
}
