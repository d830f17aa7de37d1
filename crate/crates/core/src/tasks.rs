//! Desk-scale sequence tasks: the adding problem, a delayed copy task and
//! byte-level language modelling over a user-supplied file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// Per-task supervision.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One scalar per sequence, read off the final timestep.
    Regression(Vec<f64>),
    /// Class index per (sequence, timestep), `None` where unsupervised.
    /// Stored batch-major like the inputs.
    Classes {
        n_classes: usize,
        labels: Vec<Option<usize>>,
    },
}

/// A batch of equally long sequences, stored `batch × time × features`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub batch: usize,
    pub time: usize,
    pub features: usize,
    pub inputs: Vec<f64>,
    pub targets: Targets,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn input_at(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.time + t) * self.features;
        &self.inputs[start..start + self.features]
    }

    /// Inputs for timestep `t` as a `features × batch` matrix.
    pub fn step(&self, t: usize) -> Matrix {
        let mut m = Matrix::zeros(self.features, self.batch);
        for b in 0..self.batch {
            m.set_col(b, self.input_at(b, t));
        }
        m
    }

    pub fn steps(&self) -> Vec<Matrix> {
        (0..self.time).map(|t| self.step(t)).collect()
    }

    pub fn label(&self, b: usize, t: usize) -> Option<usize> {
        match &self.targets {
            Targets::Classes { labels, .. } => labels[b * self.time + t],
            Targets::Regression(_) => None,
        }
    }
}

/// Adding problem: each step carries `(value, marker)`; exactly two markers
/// per sequence and the target is the sum of the two marked values.
pub fn gen_adding_problem(n: usize, t: usize, rng: &mut SeededRng) -> Result<SequenceBatch> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!(
            "adding problem needs at least 2 timesteps, got {t}"
        )));
    }
    let mut inputs = vec![0.0; n * t * 2];
    let mut targets = Vec::with_capacity(n);
    for b in 0..n {
        for step in 0..t {
            inputs[(b * t + step) * 2] = rng.uniform();
        }
        let first = rng.below(t);
        let mut second = rng.below(t - 1);
        if second >= first {
            second += 1;
        }
        let mut sum = 0.0;
        for pos in [first, second] {
            inputs[(b * t + pos) * 2 + 1] = 1.0;
            sum += inputs[(b * t + pos) * 2];
        }
        targets.push(sum);
    }
    Ok(SequenceBatch {
        batch: n,
        time: t,
        features: 2,
        inputs,
        targets: Targets::Regression(targets),
        lengths: vec![t; n],
    })
}

/// Prefix length of the copy task for a sequence of length `t`.
pub fn copy_prefix_len(t: usize) -> usize {
    (t / 3).max(1)
}

/// Delayed copy task.
///
/// Features are one-hot over `n_symbols + 2` channels (the symbols, blank,
/// delimiter). The first `p = t/3` steps show random symbols; the delimiter
/// sits at `t - p - 1`; the final `p` steps must reproduce the prefix. Only
/// those last steps carry labels.
pub fn gen_copy_task(n: usize, t: usize, n_symbols: usize, rng: &mut SeededRng) -> Result<SequenceBatch> {
    if t < 3 {
        return Err(Error::InvalidArgument(format!("copy task needs at least 3 timesteps, got {t}")));
    }
    if n_symbols == 0 {
        return Err(Error::InvalidArgument("copy task needs at least one symbol".into()));
    }
    let features = n_symbols + 2;
    let blank = n_symbols;
    let delim = n_symbols + 1;
    let p = copy_prefix_len(t);
    let mut inputs = vec![0.0; n * t * features];
    let mut labels = vec![None; n * t];
    for b in 0..n {
        let prefix: Vec<usize> = (0..p).map(|_| rng.below(n_symbols)).collect();
        for step in 0..t {
            let channel = if step < p {
                prefix[step]
            } else if step == t - p - 1 {
                delim
            } else {
                blank
            };
            inputs[(b * t + step) * features + channel] = 1.0;
            if step >= t - p {
                labels[b * t + step] = Some(prefix[step - (t - p)]);
            }
        }
    }
    Ok(SequenceBatch {
        batch: n,
        time: t,
        features,
        inputs,
        targets: Targets::Classes {
            n_classes: n_symbols,
            labels,
        },
        lengths: vec![t; n],
    })
}

/// Byte vocabulary, indices assigned in increasing byte order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    to_index: [Option<u16>; 256],
    to_byte: Vec<u8>,
}

impl CharVocab {
    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut seen = [false; 256];
        for &b in bytes {
            seen[b as usize] = true;
        }
        let to_byte: Vec<u8> = (0..=255u8).filter(|b| seen[*b as usize]).collect();
        let mut to_index = [None; 256];
        for (i, &b) in to_byte.iter().enumerate() {
            to_index[b as usize] = Some(i as u16);
        }
        Self { to_index, to_byte }
    }

    pub fn size(&self) -> usize {
        self.to_byte.len()
    }

    pub fn index(&self, byte: u8) -> Option<usize> {
        self.to_index[byte as usize].map(usize::from)
    }

    pub fn byte(&self, index: usize) -> Option<u8> {
        self.to_byte.get(index).copied()
    }
}

/// A byte file cut into non-overlapping next-byte prediction windows.
#[derive(Clone, Debug)]
pub struct CharCorpus {
    pub vocab: CharVocab,
    bytes: Vec<u8>,
    seq_len: usize,
    train_windows: Vec<usize>,
    eval_windows: Vec<usize>,
}

/// Reads `path` and windows it. Window `k` covers bytes
/// `[k·L, k·L + L]`: inputs are the first `L`, targets the last `L`.
pub fn load_char_lm(path: &Path, seq_len: usize) -> Result<CharCorpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CharCorpus::from_bytes(bytes, seq_len).map_err(|e| match e {
        Error::Empty(msg) => Error::Empty(format!("{}: {msg}", path.display())),
        other => other,
    })
}

impl CharCorpus {
    pub fn from_bytes(bytes: Vec<u8>, seq_len: usize) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::Empty("character corpus is empty".into()));
        }
        if seq_len == 0 {
            return Err(Error::InvalidArgument("seq_len must be positive".into()));
        }
        let vocab = CharVocab::from_bytes(&bytes);
        let total = (bytes.len() - 1) / seq_len;
        if total == 0 {
            return Err(Error::Empty(format!(
                "corpus of {} bytes holds no window of length {seq_len}",
                bytes.len()
            )));
        }
        // Hold out the last tenth of the windows for evaluation.
        let n_eval = if total >= 2 { (total / 10).max(1) } else { 0 };
        let starts: Vec<usize> = (0..total).map(|k| k * seq_len).collect();
        let (train, eval) = starts.split_at(total - n_eval);
        let eval_windows = if eval.is_empty() { train.to_vec() } else { eval.to_vec() };
        Ok(Self {
            vocab,
            bytes,
            seq_len,
            train_windows: train.to_vec(),
            eval_windows,
        })
    }

    pub fn total_windows(&self) -> usize {
        (self.bytes.len() - 1) / self.seq_len
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    fn window_batch(&self, starts: &[usize]) -> SequenceBatch {
        let v = self.vocab.size();
        let t = self.seq_len;
        let mut inputs = vec![0.0; starts.len() * t * v];
        let mut labels = vec![None; starts.len() * t];
        for (b, &s) in starts.iter().enumerate() {
            for step in 0..t {
                let x = self.vocab.index(self.bytes[s + step]).expect("byte in vocab");
                let y = self.vocab.index(self.bytes[s + step + 1]).expect("byte in vocab");
                inputs[(b * t + step) * v + x] = 1.0;
                labels[b * t + step] = Some(y);
            }
        }
        SequenceBatch {
            batch: starts.len(),
            time: t,
            features: v,
            inputs,
            targets: Targets::Classes { n_classes: v, labels },
            lengths: vec![t; starts.len()],
        }
    }

    pub fn sample_batch(&self, n: usize, rng: &mut SeededRng) -> SequenceBatch {
        let starts: Vec<usize> = (0..n)
            .map(|_| self.train_windows[rng.below(self.train_windows.len())])
            .collect();
        self.window_batch(&starts)
    }

    /// Endless stream of training batches.
    pub fn batches(&self, n: usize, mut rng: SeededRng) -> impl Iterator<Item = SequenceBatch> + '_ {
        std::iter::repeat_with(move || self.sample_batch(n, &mut rng))
    }

    pub fn eval_batch(&self, max: usize) -> SequenceBatch {
        let take = self.eval_windows.len().min(max.max(1));
        self.window_batch(&self.eval_windows[..take])
    }

    /// Target bytes of window `k`, i.e. its inputs shifted by one.
    pub fn window_bytes(&self, k: usize) -> (&[u8], &[u8]) {
        let s = k * self.seq_len;
        (
            &self.bytes[s..s + self.seq_len],
            &self.bytes[s + 1..s + self.seq_len + 1],
        )
    }
}

/// How a model's outputs are scored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Mean squared error of the final-step scalar output.
    FinalMse,
    /// Mean cross-entropy over labelled timesteps.
    StepCrossEntropy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Adding { seq_len: usize },
    Copy { seq_len: usize, n_symbols: usize },
    CharLm { path: PathBuf, seq_len: usize },
}

/// A task ready to hand out batches.
#[derive(Clone, Debug)]
pub struct Task {
    spec: TaskSpec,
    corpus: Option<CharCorpus>,
}

impl Task {
    pub fn new(spec: TaskSpec) -> Result<Self> {
        let corpus = match &spec {
            TaskSpec::Adding { seq_len } if *seq_len < 2 => {
                return Err(Error::InvalidArgument("adding problem needs seq_len >= 2".into()))
            }
            TaskSpec::Copy { seq_len, n_symbols } if *seq_len < 3 || *n_symbols == 0 => {
                return Err(Error::InvalidArgument(
                    "copy task needs seq_len >= 3 and n_symbols >= 1".into(),
                ))
            }
            TaskSpec::CharLm { path, seq_len } => Some(load_char_lm(path, *seq_len)?),
            _ => None,
        };
        Ok(Self { spec, corpus })
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        match &self.spec {
            TaskSpec::Adding { .. } => 2,
            TaskSpec::Copy { n_symbols, .. } => n_symbols + 2,
            TaskSpec::CharLm { .. } => self.corpus.as_ref().map_or(0, |c| c.vocab.size()),
        }
    }

    pub fn output_dim(&self) -> usize {
        match &self.spec {
            TaskSpec::Adding { .. } => 1,
            TaskSpec::Copy { n_symbols, .. } => *n_symbols,
            TaskSpec::CharLm { .. } => self.input_dim(),
        }
    }

    pub fn objective(&self) -> Objective {
        match self.spec {
            TaskSpec::Adding { .. } => Objective::FinalMse,
            _ => Objective::StepCrossEntropy,
        }
    }

    pub fn batch(&self, n: usize, rng: &mut SeededRng) -> SequenceBatch {
        match &self.spec {
            TaskSpec::Adding { seq_len } => gen_adding_problem(n, *seq_len, rng).expect("validated"),
            TaskSpec::Copy { seq_len, n_symbols } => {
                gen_copy_task(n, *seq_len, *n_symbols, rng).expect("validated")
            }
            TaskSpec::CharLm { .. } => self.corpus.as_ref().expect("corpus").sample_batch(n, rng),
        }
    }

    /// Held-out evaluation set, a pure function of `(seed, n)`.
    pub fn eval_set(&self, n: usize, seed: u64) -> SequenceBatch {
        match &self.corpus {
            Some(c) => c.eval_batch(n),
            None => self.batch(n, &mut SeededRng::stream(seed, EVAL_STREAM)),
        }
    }

    /// Loss of the best input-blind predictor: target variance for the
    /// adding problem, uniform-guess entropy for classification.
    pub fn baseline_loss(&self) -> f64 {
        match &self.spec {
            TaskSpec::Adding { .. } => 1.0 / 6.0,
            TaskSpec::Copy { n_symbols, .. } => (*n_symbols as f64).ln(),
            TaskSpec::CharLm { .. } => (self.output_dim() as f64).ln(),
        }
    }
}

/// RNG stream reserved for evaluation data; training draws use others.
pub const EVAL_STREAM: u64 = 0xE7A1;
