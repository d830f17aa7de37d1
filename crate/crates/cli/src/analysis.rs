//! Weight histograms and cross-run comparisons.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use csp_core::SeqModel;

/// Magnitude histogram of one kernel's nonzero weights, plus a zero count.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub kernel: String,
    pub zeros: usize,
    pub max_abs: f64,
    /// Bin `i` covers `[i·w, (i+1)·w)` with `w = max_abs / bins`; the last
    /// bin also includes `max_abs`.
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(kernel: &str, weights: &[f64], bins: usize) -> Self {
        let zeros = weights.iter().filter(|w| **w == 0.0).count();
        let max_abs = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let mut counts = vec![0; if max_abs > 0.0 { bins } else { 0 }];
        if max_abs > 0.0 {
            for w in weights.iter().filter(|w| **w != 0.0) {
                let i = ((w.abs() / max_abs) * bins as f64) as usize;
                counts[i.min(bins - 1)] += 1;
            }
        }
        Self {
            kernel: kernel.to_string(),
            zeros,
            max_abs,
            counts,
        }
    }

    pub fn edges(&self, i: usize) -> (f64, f64) {
        let n = self.counts.len() as f64;
        (self.max_abs * i as f64 / n, self.max_abs * (i + 1) as f64 / n)
    }

    pub fn total(&self) -> usize {
        self.zeros + self.counts.iter().sum::<usize>()
    }
}

pub fn model_histograms(model: &SeqModel, bins: usize) -> Vec<Histogram> {
    model
        .kernel_ids()
        .into_iter()
        .map(|id| Histogram::new(&id.to_string(), model.kernel(id).weights().as_slice(), bins))
        .collect()
}

pub const HISTOGRAM_HEADER: [&str; 5] = ["kernel", "kind", "bin_lo", "bin_hi", "count"];

pub fn write_histograms(path: &Path, hists: &[Histogram]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(HISTOGRAM_HEADER)?;
    for h in hists {
        w.write_record([h.kernel.as_str(), "zero", "0", "0", &h.zeros.to_string()])?;
        for (i, c) in h.counts.iter().enumerate() {
            let (lo, hi) = h.edges(i);
            w.write_record([h.kernel.as_str(), "bin", &lo.to_string(), &hi.to_string(), &c.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// The last row of a run's metrics file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub eval_loss: f64,
    pub sparsity: f64,
    /// Controller columns (`lambda:*`, `rho:*`) in file order.
    pub controllers: Vec<(String, f64)>,
}

pub fn read_summary(dir: &Path) -> Result<RunSummary> {
    let path = dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
    let header = r.headers()?.clone();
    let last = r
        .records()
        .last()
        .with_context(|| format!("{} has no rows", path.display()))?
        .with_context(|| format!("reading {}", path.display()))?;
    let fields: BTreeMap<&str, &str> = header.iter().zip(last.iter()).collect();
    let num = |k: &str| -> Result<f64> {
        let v = fields.get(k).with_context(|| format!("{} lacks column {k}", path.display()))?;
        v.parse().with_context(|| format!("{}: bad {k} value {v:?}", path.display()))
    };
    let controllers = header
        .iter()
        .zip(last.iter())
        .filter(|(h, _)| h.starts_with("lambda:") || h.starts_with("rho:"))
        .map(|(h, v)| Ok((h.to_string(), v.parse::<f64>()?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunSummary {
        name: dir.display().to_string(),
        eval_loss: num("eval_loss")?,
        sparsity: num("sparsity")?,
        controllers,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub run: RunSummary,
    pub abs_degradation: f64,
    /// `(loss − baseline) / baseline`.
    pub rel_degradation: f64,
}

pub fn compare(runs: &[RunSummary], baseline: &RunSummary) -> Result<Vec<Comparison>> {
    if !(baseline.eval_loss > 0.0) {
        bail!("baseline {} has non-positive eval loss {}", baseline.name, baseline.eval_loss);
    }
    Ok(runs
        .iter()
        .map(|r| Comparison {
            run: r.clone(),
            abs_degradation: r.eval_loss - baseline.eval_loss,
            rel_degradation: (r.eval_loss - baseline.eval_loss) / baseline.eval_loss,
        })
        .collect())
}

pub fn write_comparison(path: &Path, rows: &[Comparison]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let ctrl_names: Vec<String> = rows
        .first()
        .map(|r| r.run.controllers.iter().map(|(n, _)| n.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["run", "eval_loss", "abs_degradation", "rel_degradation", "sparsity"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    header.extend(ctrl_names.iter().cloned());
    w.write_record(&header)?;
    for c in rows {
        let mut rec = vec![
            c.run.name.clone(),
            c.run.eval_loss.to_string(),
            c.abs_degradation.to_string(),
            c.rel_degradation.to_string(),
            c.run.sparsity.to_string(),
        ];
        for name in &ctrl_names {
            let v = c.run.controllers.iter().find(|(n, _)| n == name).map(|(_, v)| v.to_string());
            rec.push(v.unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use csp_core::SeededRng;

    #[test]
    fn all_zero_kernel_is_a_single_zero_count() {
        let h = Histogram::new("k", &[0.0; 12], 200);
        assert_eq!(h.zeros, 12);
        assert!(h.counts.is_empty());
        assert_eq!(h.total(), 12);
    }

    #[test]
    fn counts_sum_to_kernel_size() {
        let w = [0.0, -0.5, 0.25, 1.0, -1.0, 0.0, 0.75];
        let h = Histogram::new("k", &w, 4);
        assert_eq!(h.total(), w.len());
        assert_eq!(h.counts, vec![0, 1, 1, 3]);
        assert_eq!(h.edges(1), (0.25, 0.5));
    }

    #[test]
    fn uniform_weights_give_a_flat_histogram() {
        let mut rng = SeededRng::new(3);
        let n = 100_000;
        let bins = 50;
        let w: Vec<f64> = (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let h = Histogram::new("k", &w, bins);
        let p = 1.0 / bins as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        let outside = h.counts.iter().filter(|c| (**c as f64 - mean).abs() > 3.0 * sigma).count();
        // Each bin leaves 3σ with probability ~0.27%.
        assert!(outside <= 2, "{outside} bins outside 3 sigma: {:?}", h.counts);
        assert!(h.counts.iter().all(|c| (*c as f64 - mean).abs() < 5.0 * sigma));
    }

    fn summary(name: &str, loss: f64) -> RunSummary {
        RunSummary {
            name: name.into(),
            eval_loss: loss,
            sparsity: 0.5,
            controllers: vec![("lambda:l0.W".into(), 0.1)],
        }
    }

    #[test]
    fn self_comparison_is_zero_degradation() {
        let a = summary("a", 0.2);
        let c = compare(std::slice::from_ref(&a), &a).unwrap();
        assert_eq!(c[0].rel_degradation, 0.0);
        assert_eq!(c[0].abs_degradation, 0.0);
    }

    #[test]
    fn relative_degradation_by_hand() {
        let c = compare(&[summary("p", 0.3)], &summary("d", 0.2)).unwrap();
        assert!((c[0].rel_degradation - 0.5).abs() < 1e-12);
        assert!((c[0].abs_degradation - 0.1).abs() < 1e-12);
    }
}
