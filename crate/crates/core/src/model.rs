//! Stacked LSTM with a fully-connected head, plus the bookkeeping that
//! names every prunable kernel.

use std::fmt;

use crate::error::{Error, Result};
use crate::nn::{
    dropout, fc_backward, fc_forward, lstm_backward, lstm_sequence, FcParams, Gate, LstmKernels,
    LstmState, MaskedKernel, TapeEntry,
};
use crate::numerics::{Matrix, SeededRng};
use crate::tasks::{Objective, SequenceBatch, Targets};

/// A kernel group solved as one sensing problem: the four input kernels of
/// a layer, its four recurrent kernels, or the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupId {
    Input(usize),
    Recurrent(usize),
    Head,
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GroupId::Input(l) => write!(f, "l{l}.W"),
            GroupId::Recurrent(l) => write!(f, "l{l}.U"),
            GroupId::Head => write!(f, "head.W"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct KernelId {
    pub group: GroupId,
    pub gate: Option<Gate>,
}

impl fmt::Display for KernelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.gate {
            Some(g) => write!(f, "{}_{}", self.group, g.symbol()),
            None => write!(f, "{}", self.group),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    pub layers: Vec<LstmKernels>,
    pub head: FcParams,
    pub objective: Objective,
}

/// Parameter gradients in the same layout as the model.
#[derive(Clone, Debug)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub input: [Matrix; 4],
    pub recurrent: [Matrix; 4],
    pub bias: [Vec<f64>; 4],
}

impl ModelGrads {
    /// Flat views in [`SeqModel::params_mut`] order.
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.input.iter().map(|m| m.as_slice()));
            out.extend(l.recurrent.iter().map(|m| m.as_slice()));
            out.extend(l.bias.iter().map(|b| b.as_slice()));
        }
        out.push(self.head_w.as_slice());
        out.push(&self.head_b);
        out
    }

    pub fn flat_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.extend(l.input.iter_mut().map(|m| m.as_mut_slice()));
            out.extend(l.recurrent.iter_mut().map(|m| m.as_mut_slice()));
            out.extend(l.bias.iter_mut().map(|b| b.as_mut_slice()));
        }
        out.push(self.head_w.as_mut_slice());
        out.push(&mut self.head_b);
        out
    }

    pub fn global_norm(&self) -> f64 {
        self.flat()
            .iter()
            .flat_map(|s| s.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for slot in self.flat_mut() {
            slot.iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// One trainable tensor and, for kernels, its mask.
pub struct ParamMut<'a> {
    pub values: &'a mut [f64],
    pub mask: Option<&'a [f64]>,
}

struct ForwardCache {
    tapes: Vec<Vec<TapeEntry>>,
    /// (timestep, head input after dropout, dropout mask, dlogits)
    head_steps: Vec<(usize, Matrix, Matrix, Matrix)>,
}

impl SeqModel {
    pub fn new(
        input_dim: usize,
        hidden: usize,
        n_layers: usize,
        output_dim: usize,
        objective: Objective,
        rng: &mut SeededRng,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|l| LstmKernels::init(if l == 0 { input_dim } else { hidden }, hidden, rng))
            .collect();
        let head = FcParams::init(hidden, output_dim, rng);
        Self {
            layers,
            head,
            objective,
        }
    }

    pub fn hidden(&self) -> usize {
        self.head.input_dim()
    }

    pub fn groups(&self) -> Vec<GroupId> {
        let mut g = Vec::new();
        for l in 0..self.layers.len() {
            g.push(GroupId::Input(l));
            g.push(GroupId::Recurrent(l));
        }
        g.push(GroupId::Head);
        g
    }

    pub fn group_kernel_ids(&self, group: GroupId) -> Vec<KernelId> {
        match group {
            GroupId::Head => vec![KernelId { group, gate: None }],
            _ => Gate::ALL
                .iter()
                .map(|&g| KernelId {
                    group,
                    gate: Some(g),
                })
                .collect(),
        }
    }

    pub fn kernel_ids(&self) -> Vec<KernelId> {
        self.groups()
            .into_iter()
            .flat_map(|g| self.group_kernel_ids(g))
            .collect()
    }

    pub fn kernel(&self, id: KernelId) -> &MaskedKernel {
        let g = id.gate.map_or(0, Gate::index);
        match id.group {
            GroupId::Input(l) => &self.layers[l].input[g],
            GroupId::Recurrent(l) => &self.layers[l].recurrent[g],
            GroupId::Head => &self.head.kernel,
        }
    }

    pub fn kernel_mut(&mut self, id: KernelId) -> &mut MaskedKernel {
        let g = id.gate.map_or(0, Gate::index);
        match id.group {
            GroupId::Input(l) => &mut self.layers[l].input[g],
            GroupId::Recurrent(l) => &mut self.layers[l].recurrent[g],
            GroupId::Head => &mut self.head.kernel,
        }
    }

    /// The group's kernels stacked vertically, gate order `f, c, i, o`.
    pub fn group_weights(&self, group: GroupId) -> Matrix {
        let ids = self.group_kernel_ids(group);
        let parts: Vec<&Matrix> = ids.iter().map(|id| self.kernel(*id).weights()).collect();
        Matrix::vstack(&parts).expect("gate kernels share a width")
    }

    pub fn group_mask(&self, group: GroupId) -> Matrix {
        let ids = self.group_kernel_ids(group);
        let parts: Vec<&Matrix> = ids.iter().map(|id| self.kernel(*id).mask()).collect();
        Matrix::vstack(&parts).expect("gate kernels share a width")
    }

    /// Replaces a group's stacked weights and mask.
    pub fn install_group(&mut self, group: GroupId, weights: &Matrix, mask: &Matrix) -> Result<()> {
        let ids = self.group_kernel_ids(group);
        let heights: Vec<usize> = ids.iter().map(|id| self.kernel(*id).shape().0).collect();
        let ws = weights.split_rows(&heights)?;
        let ms = mask.split_rows(&heights)?;
        for ((id, w), m) in ids.into_iter().zip(ws).zip(ms) {
            if w.shape() != self.kernel(id).shape() {
                return Err(Error::shape("install_group", self.kernel(id).shape(), w.shape()));
            }
            *self.kernel_mut(id) = MaskedKernel::with_mask(w, m)?;
        }
        Ok(())
    }

    pub fn prunable_len(&self) -> usize {
        self.kernel_ids().iter().map(|id| self.kernel(*id).len()).sum()
    }

    /// Fraction of prunable weights switched off by masks.
    pub fn sparsity(&self) -> f64 {
        let zeros: usize = self
            .kernel_ids()
            .iter()
            .map(|id| self.kernel(*id).mask().count_zeros())
            .sum();
        zeros as f64 / self.prunable_len() as f64
    }

    /// Every trainable tensor, in a fixed order shared with
    /// [`ModelGrads::flat`].
    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            for k in layer.input.iter_mut().chain(layer.recurrent.iter_mut()) {
                let (values, mask) = k.parts_mut();
                out.push(ParamMut {
                    values,
                    mask: Some(mask),
                });
            }
            for b in &mut layer.bias {
                out.push(ParamMut {
                    values: b.as_mut_slice(),
                    mask: None,
                });
            }
        }
        let (values, mask) = self.head.kernel.parts_mut();
        out.push(ParamMut {
            values,
            mask: Some(mask),
        });
        out.push(ParamMut {
            values: self.head.bias.as_mut_slice(),
            mask: None,
        });
        out
    }

    /// Runs layer `l` over a sequence from the zero state.
    pub fn layer_forward(&self, l: usize, xs: &[Matrix]) -> Result<(Vec<Matrix>, Vec<TapeEntry>)> {
        let batch = xs.first().map_or(0, |x| x.cols());
        lstm_sequence(&self.layers[l], xs, &LstmState::zeros(self.hidden(), batch))
    }

    /// Timesteps whose top hidden state feeds the head.
    pub fn head_steps(&self, batch: &SequenceBatch) -> Vec<usize> {
        match self.objective {
            Objective::FinalMse => vec![batch.time - 1],
            Objective::StepCrossEntropy => (0..batch.time)
                .filter(|&t| (0..batch.batch).any(|b| batch.label(b, t).is_some()))
                .collect(),
        }
    }

    fn check_batch(&self, batch: &SequenceBatch) -> Result<()> {
        let input_dim = self.layers.first().map_or(self.hidden(), |l| l.input_dim());
        if batch.features != input_dim {
            return Err(Error::shape(
                "model input",
                (input_dim, 1),
                (batch.features, batch.batch),
            ));
        }
        match (&batch.targets, self.objective) {
            (Targets::Regression(_), Objective::FinalMse) => Ok(()),
            (Targets::Classes { n_classes, .. }, Objective::StepCrossEntropy)
                if *n_classes == self.head.output_dim() =>
            {
                Ok(())
            }
            _ => Err(Error::InvalidArgument(
                "batch targets do not match the model objective".into(),
            )),
        }
    }

    fn run(
        &self,
        batch: &SequenceBatch,
        dropout_rate: f64,
        mut rng: Option<&mut SeededRng>,
    ) -> Result<(f64, ForwardCache)> {
        self.check_batch(batch)?;
        let mut xs = batch.steps();
        let mut tapes = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            let (hs, tape) = self.layer_forward(l, &xs)?;
            tapes.push(tape);
            xs = hs;
        }
        let mut head_steps = Vec::new();
        let mut loss = 0.0;
        let steps = self.head_steps(batch);
        let n_labels: usize = match &batch.targets {
            Targets::Regression(_) => batch.batch,
            Targets::Classes { labels, .. } => labels.iter().flatten().count(),
        };
        let denom = n_labels.max(1) as f64;
        for t in steps {
            let (inp, mask) = match rng.as_deref_mut() {
                Some(r) => dropout(&xs[t], dropout_rate, r, true),
                None => (xs[t].clone(), Matrix::filled(xs[t].rows(), xs[t].cols(), 1.0)),
            };
            let out = fc_forward(&self.head, &inp)?;
            let mut dout = Matrix::zeros(out.rows(), out.cols());
            match &batch.targets {
                Targets::Regression(ys) => {
                    for b in 0..batch.batch {
                        let diff = out.get(0, b) - ys[b];
                        loss += diff * diff;
                        dout.set(0, b, 2.0 * diff / denom);
                    }
                }
                Targets::Classes { .. } => {
                    for b in 0..batch.batch {
                        let Some(label) = batch.label(b, t) else { continue };
                        let col = out.col(b);
                        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = col.iter().map(|v| (v - max).exp()).sum();
                        let log_z = max + z.ln();
                        loss += log_z - col[label];
                        for (k, v) in col.iter().enumerate() {
                            let p = (v - log_z).exp();
                            let g = if k == label { p - 1.0 } else { p };
                            dout.set(k, b, g / denom);
                        }
                    }
                }
            }
            head_steps.push((t, inp, mask, dout));
        }
        let loss = loss / denom;
        Ok((loss, ForwardCache { tapes, head_steps }))
    }

    /// Evaluation loss, dropout disabled.
    pub fn loss(&self, batch: &SequenceBatch) -> Result<f64> {
        Ok(self.run(batch, 0.0, None)?.0)
    }

    /// Training loss and exact gradients. Gradients at masked kernel
    /// positions are zero.
    pub fn loss_and_grads(
        &self,
        batch: &SequenceBatch,
        dropout_rate: f64,
        rng: &mut SeededRng,
    ) -> Result<(f64, ModelGrads)> {
        let (loss, cache) = self.run(batch, dropout_rate, Some(rng))?;
        let hidden = self.hidden();
        let mut head_w = Matrix::zeros(self.head.output_dim(), hidden);
        let mut head_b = vec![0.0; self.head.output_dim()];
        let mut grad_h = vec![Matrix::zeros(hidden, batch.batch); batch.time];
        for (t, inp, mask, dout) in &cache.head_steps {
            let g = fc_backward(&self.head, inp, dout)?;
            head_w.axpy(1.0, &g.w)?;
            for (a, b) in head_b.iter_mut().zip(&g.b) {
                *a += b;
            }
            grad_h[*t].axpy(1.0, &g.x.hadamard(mask)?)?;
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let g = lstm_backward(&self.layers[l], &cache.tapes[l], &grad_h)?;
            grad_h = g.x;
            layers.push(LayerGrads {
                input: g.input,
                recurrent: g.recurrent,
                bias: g.bias,
            });
        }
        layers.reverse();
        Ok((
            loss,
            ModelGrads {
                layers,
                head_w,
                head_b,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_adding_problem, gen_copy_task};

    #[test]
    fn ids_render_and_cover_every_kernel() {
        let mut rng = SeededRng::new(0);
        let m = SeqModel::new(2, 4, 2, 1, Objective::FinalMse, &mut rng);
        let names: Vec<String> = m.kernel_ids().iter().map(|k| k.to_string()).collect();
        assert_eq!(names.len(), 17);
        assert_eq!(names[0], "l0.W_f");
        assert_eq!(names[7], "l0.U_o");
        assert_eq!(names[16], "head.W");
        assert_eq!(m.prunable_len(), 4 * 4 * 2 + 4 * 16 + 4 * 16 + 4 * 16 + 4);
    }

    #[test]
    fn install_group_round_trips() {
        let mut rng = SeededRng::new(1);
        let mut m = SeqModel::new(3, 5, 1, 1, Objective::FinalMse, &mut rng);
        let g = GroupId::Recurrent(0);
        let w = m.group_weights(g);
        let mut mask = Matrix::filled(w.rows(), w.cols(), 1.0);
        mask.set(7, 2, 0.0);
        m.install_group(g, &w, &mask).unwrap();
        let after = m.group_weights(g);
        assert_eq!(after.get(7, 2), 0.0);
        assert_eq!(after.get(6, 2), w.get(6, 2));
        assert_eq!(m.group_mask(g), mask);
    }

    #[test]
    fn gradient_norm_and_flat_layout_agree() {
        let mut rng = SeededRng::new(2);
        let mut m = SeqModel::new(6, 3, 1, 4, Objective::StepCrossEntropy, &mut rng);
        let batch = gen_copy_task(3, 6, 4, &mut rng).unwrap();
        let (_, g) = m.loss_and_grads(&batch, 0.0, &mut rng).unwrap();
        let flat = g.flat();
        let params = m.params_mut();
        assert_eq!(flat.len(), params.len());
        for (a, b) in flat.iter().zip(&params) {
            assert_eq!(a.len(), b.values.len());
        }
    }

    #[test]
    fn rejects_mismatched_batch() {
        let mut rng = SeededRng::new(3);
        let m = SeqModel::new(3, 4, 1, 1, Objective::FinalMse, &mut rng);
        let batch = gen_adding_problem(2, 4, &mut rng).unwrap();
        assert!(m.loss(&batch).is_err());
    }
}
