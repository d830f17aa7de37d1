use std::time::Instant;

use csp_core::training::MemorySink;
use csp_core::{train, Strategy, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let strategy: Strategy = args.get(1).map_or("csp", |s| s.as_str()).parse().unwrap();
    let seed: u64 = args.get(2).map_or(0, |s| s.parse().unwrap());
    let mut cfg = TrainConfig::desk(strategy, 0.5, seed);
    for kv in &args[3.min(args.len())..] {
        let (k, v) = kv.split_once('=').unwrap();
        match k {
            "capture_size" => cfg.capture_size = Some(v.parse().unwrap()),
            "capture_batch" => cfg.capture_batch = v.parse().unwrap(),
            "capture_floor" => cfg.capture_floor = v.parse().unwrap(),
            "capture_interval" => cfg.capture_interval = v.parse().unwrap(),
            "max_iters" => cfg.solver.max_iters = v.parse().unwrap(),
            "rho_cap" => cfg.controller.rho_growth_cap = v.parse().unwrap(),
            "epsilon" => cfg.controller.epsilon = v.parse().unwrap(),
            "lambda" => cfg.controller.lambda = v.parse().unwrap(),
            "steps" => cfg.total_steps = v.parse().unwrap(),
            _ => panic!("unknown override {k}"),
        }
    }
    let start = Instant::now();
    let mut sink = MemorySink::default();
    let out = train(&cfg, &mut sink).unwrap();
    let every = if std::env::var("ROWS").is_ok() { 1 } else { 250 };
    for r in sink.rows.iter().filter(|r| r.step % every == 0 || r.phase == "final") {
        println!(
            "{:>5} {:<5} train {:.5} eval {:.5} sp {:.4} target {:.4} lambda {:?} rho {:?}",
            r.step,
            r.phase,
            r.train_loss,
            r.eval_loss,
            r.sparsity,
            cfg.schedule.target(r.step),
            r.lambda,
            r.rho
        );
    }
    if std::env::var("TRACE").is_ok() {
        for e in sink.events.iter().filter(|e| !e.skipped) {
            println!(
                "  {} {} tgt {:.3} {:.3}->{:.3} rho {:.5} lam {:?} obj {:?}->{:?} new {} out {}",
                e.step, e.kernel, e.target, e.sparsity_before, e.sparsity_after, e.threshold,
                e.lambda, e.objective_before, e.objective_after, e.newly_pruned, e.outside_smallest
            );
        }
    }
    let ev: Vec<_> = sink.events.iter().filter(|e| !e.skipped).collect();
    let outside: usize = ev.iter().map(|e| e.outside_smallest).sum();
    println!("events {} outside {} elapsed {:.1}s", ev.len(), outside, start.elapsed().as_secs_f64());
    for id in out.model.kernel_ids() {
        print!("{}:{:.3} ", id, out.model.kernel(id).mask_sparsity());
    }
    println!();
    if std::env::var("DIAG").is_ok() {
        for id in out.model.kernel_ids() {
            let m = out.model.kernel(id).mask();
            let zeros: Vec<usize> = (0..m.cols()).map(|c| m.col(c).iter().filter(|v| **v == 0.0).count()).collect();
            println!("{id} column zeros {zeros:?}");
        }
    }
}
