//! LSTM and fully-connected layers with hand-written backward passes.
//!
//! Activations are laid out column-wise: a batch of `B` input vectors of
//! width `d` is a `d × B` matrix, so a single vector is a one-column batch.

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};

/// The four LSTM gates in kernel order `[f, c, i, o]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Gate {
    Forget,
    Cell,
    Input,
    Output,
}

impl Gate {
    pub const ALL: [Gate; 4] = [Gate::Forget, Gate::Cell, Gate::Input, Gate::Output];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn symbol(self) -> &'static str {
        match self {
            Gate::Forget => "f",
            Gate::Cell => "c",
            Gate::Input => "i",
            Gate::Output => "o",
        }
    }
}

/// A weight matrix paired with its binary prune mask.
///
/// Every masked-off entry of the weights is exactly zero; all mutation goes
/// through methods that re-apply the mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedKernel {
    weights: Matrix,
    mask: Matrix,
}

impl MaskedKernel {
    pub fn dense(weights: Matrix) -> Self {
        let mask = Matrix::filled(weights.rows(), weights.cols(), 1.0);
        Self { weights, mask }
    }

    /// Installs new weights and mask together.
    pub fn with_mask(weights: Matrix, mask: Matrix) -> Result<Self> {
        if weights.shape() != mask.shape() {
            return Err(Error::shape("MaskedKernel::with_mask", weights.shape(), mask.shape()));
        }
        if mask.as_slice().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::InvalidArgument("mask entries must be 0 or 1".into()));
        }
        let mut k = Self { weights, mask };
        k.apply_mask();
        Ok(k)
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn mask(&self) -> &Matrix {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.weights.shape()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn apply_mask(&mut self) {
        for (w, &m) in self.weights.as_mut_slice().iter_mut().zip(self.mask.as_slice()) {
            if m == 0.0 {
                *w = 0.0;
            }
        }
    }

    /// Replaces the mask; newly masked weights are zeroed.
    pub fn set_mask(&mut self, mask: Matrix) -> Result<()> {
        *self = Self::with_mask(std::mem::replace(&mut self.weights, Matrix::zeros(0, 0)), mask)?;
        Ok(())
    }

    /// Mutates the raw weights, then re-applies the mask.
    pub fn modify(&mut self, f: impl FnOnce(&mut Matrix, &Matrix)) {
        f(&mut self.weights, &self.mask);
        self.apply_mask();
    }

    /// Split borrow for optimizers: weights mutably, mask read-only.
    pub fn parts_mut(&mut self) -> (&mut [f64], &[f64]) {
        (self.weights.as_mut_slice(), self.mask.as_slice())
    }

    /// Fraction of entries switched off by the mask.
    pub fn mask_sparsity(&self) -> f64 {
        self.mask.count_zeros() as f64 / self.mask.len() as f64
    }

    pub fn zero_masked(&self, grad: &mut Matrix) {
        for (g, &m) in grad.as_mut_slice().iter_mut().zip(self.mask.as_slice()) {
            if m == 0.0 {
                *g = 0.0;
            }
        }
    }
}

/// Parameters of one LSTM cell: input kernels `W_g` (hidden × input),
/// recurrent kernels `U_g` (hidden × hidden) and unmasked biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmKernels {
    pub input: [MaskedKernel; 4],
    pub recurrent: [MaskedKernel; 4],
    pub bias: [Vec<f64>; 4],
}

impl LstmKernels {
    /// Uniform `±1/√hidden` initialisation with forget-gate bias 1.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let input = std::array::from_fn(|_| {
            MaskedKernel::dense(Matrix::uniform(hidden, input_dim, bound, rng))
        });
        let recurrent = std::array::from_fn(|_| {
            MaskedKernel::dense(Matrix::uniform(hidden, hidden, bound, rng))
        });
        let mut bias: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
        bias[Gate::Forget.index()] = vec![1.0; hidden];
        Self {
            input,
            recurrent,
            bias,
        }
    }

    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input: std::array::from_fn(|_| MaskedKernel::dense(Matrix::zeros(hidden, input_dim))),
            recurrent: std::array::from_fn(|_| MaskedKernel::dense(Matrix::zeros(hidden, hidden))),
            bias: std::array::from_fn(|_| vec![0.0; hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.input[0].shape().0
    }

    pub fn input_dim(&self) -> usize {
        self.input[0].shape().1
    }
}

/// Cell and hidden state, one column per sequence in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub c: Matrix,
    pub h: Matrix,
}

impl LstmState {
    pub fn zeros(hidden: usize, batch: usize) -> Self {
        Self {
            c: Matrix::zeros(hidden, batch),
            h: Matrix::zeros(hidden, batch),
        }
    }
}

/// Everything one forward timestep leaves behind for BPTT.
#[derive(Clone, Debug)]
pub struct TapeEntry {
    pub x: Matrix,
    pub h_prev: Matrix,
    pub c_prev: Matrix,
    /// `W_g · x` per gate, before biases.
    pub z_x: [Matrix; 4],
    /// `U_g · h_prev` per gate.
    pub z_h: [Matrix; 4],
    /// Gate activations: sigmoid for f, i, o and tanh for the candidate.
    pub act: [Matrix; 4],
    pub c: Matrix,
    pub tanh_c: Matrix,
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// One LSTM timestep.
///
/// `z = W·x + U·h_prev + b` per gate, `f,i,o = σ(z)`, `c̃ = tanh(z_c)`,
/// `C = f∘C_prev + i∘c̃`, `h = o∘tanh(C)`.
pub fn lstm_step(k: &LstmKernels, x: &Matrix, prev: &LstmState) -> Result<(LstmState, TapeEntry)> {
    let hidden = k.hidden();
    if x.rows() != k.input_dim() {
        return Err(Error::shape("lstm_step input", k.input[0].shape(), x.shape()));
    }
    if prev.h.rows() != hidden || prev.c.shape() != prev.h.shape() || prev.h.cols() != x.cols() {
        return Err(Error::shape("lstm_step state", prev.h.shape(), x.shape()));
    }
    let mut z_x: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(0, 0));
    let mut z_h: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(0, 0));
    let mut act: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(0, 0));
    for g in Gate::ALL {
        let gi = g.index();
        z_x[gi] = k.input[gi].weights().matmul(x)?;
        z_h[gi] = k.recurrent[gi].weights().matmul(&prev.h)?;
        let mut pre = z_x[gi].add(&z_h[gi])?;
        pre.add_row_bias(&k.bias[gi]);
        act[gi] = match g {
            Gate::Cell => pre.map(f64::tanh),
            _ => pre.map(sigmoid),
        };
    }
    let [f, g, i, o] = [
        &act[Gate::Forget.index()],
        &act[Gate::Cell.index()],
        &act[Gate::Input.index()],
        &act[Gate::Output.index()],
    ];
    let c = f.hadamard(&prev.c)?.add(&i.hadamard(g)?)?;
    let tanh_c = c.map(f64::tanh);
    let h = o.hadamard(&tanh_c)?;
    let tape = TapeEntry {
        x: x.clone(),
        h_prev: prev.h.clone(),
        c_prev: prev.c.clone(),
        z_x,
        z_h,
        act,
        c: c.clone(),
        tanh_c,
    };
    Ok((LstmState { c, h }, tape))
}

/// Runs a whole sequence from `init`, returning every hidden state and the tape.
pub fn lstm_sequence(
    k: &LstmKernels,
    inputs: &[Matrix],
    init: &LstmState,
) -> Result<(Vec<Matrix>, Vec<TapeEntry>)> {
    let mut state = init.clone();
    let mut hs = Vec::with_capacity(inputs.len());
    let mut tape = Vec::with_capacity(inputs.len());
    for x in inputs {
        let (next, entry) = lstm_step(k, x, &state)?;
        hs.push(next.h.clone());
        tape.push(entry);
        state = next;
    }
    Ok((hs, tape))
}

/// Gradients of a scalar loss with respect to one LSTM cell.
#[derive(Clone, Debug)]
pub struct LstmGrads {
    pub input: [Matrix; 4],
    pub recurrent: [Matrix; 4],
    pub bias: [Vec<f64>; 4],
    /// Gradient with respect to each input `x⁽ᵗ⁾`.
    pub x: Vec<Matrix>,
    pub h0: Matrix,
    pub c0: Matrix,
}

/// Backpropagation through time.
///
/// `grad_h[t]` is the upstream gradient on `h⁽ᵗ⁾`. Gradients at masked
/// kernel positions are zeroed before returning.
pub fn lstm_backward(k: &LstmKernels, tape: &[TapeEntry], grad_h: &[Matrix]) -> Result<LstmGrads> {
    if tape.len() != grad_h.len() {
        return Err(Error::InvalidArgument(format!(
            "tape has {} timesteps but {} upstream gradients were given",
            tape.len(),
            grad_h.len()
        )));
    }
    let hidden = k.hidden();
    let input_dim = k.input_dim();
    let batch = tape.first().map_or(0, |e| e.x.cols());

    let mut d_input: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden, input_dim));
    let mut d_rec: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden, hidden));
    let mut d_bias: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; hidden]);
    let mut d_x = vec![Matrix::zeros(input_dim, batch); tape.len()];
    let mut dh_next = Matrix::zeros(hidden, batch);
    let mut dc_next = Matrix::zeros(hidden, batch);

    for t in (0..tape.len()).rev() {
        let e = &tape[t];
        if grad_h[t].shape() != (hidden, batch) {
            return Err(Error::shape("lstm_backward grad_h", (hidden, batch), grad_h[t].shape()));
        }
        let f = &e.act[Gate::Forget.index()];
        let g = &e.act[Gate::Cell.index()];
        let i = &e.act[Gate::Input.index()];
        let o = &e.act[Gate::Output.index()];

        let dh = grad_h[t].add(&dh_next)?;
        let mut dz: [Matrix; 4] = std::array::from_fn(|_| Matrix::zeros(hidden, batch));
        let mut dc = Matrix::zeros(hidden, batch);
        let mut dc_prev = Matrix::zeros(hidden, batch);
        {
            let n = hidden * batch;
            let (dh, dcn) = (dh.as_slice(), dc_next.as_slice());
            let (f, g, i, o) = (f.as_slice(), g.as_slice(), i.as_slice(), o.as_slice());
            let (tc, cp) = (e.tanh_c.as_slice(), e.c_prev.as_slice());
            let dcs = dc.as_mut_slice();
            for idx in 0..n {
                dcs[idx] = dh[idx] * o[idx] * (1.0 - tc[idx] * tc[idx]) + dcn[idx];
            }
            let dcp = dc_prev.as_mut_slice();
            for idx in 0..n {
                dcp[idx] = dcs[idx] * f[idx];
            }
            let [dzf, dzg, dzi, dzo] = &mut dz;
            let (dzf, dzg, dzi, dzo) = (
                dzf.as_mut_slice(),
                dzg.as_mut_slice(),
                dzi.as_mut_slice(),
                dzo.as_mut_slice(),
            );
            for idx in 0..n {
                dzf[idx] = dcs[idx] * cp[idx] * f[idx] * (1.0 - f[idx]);
                dzg[idx] = dcs[idx] * i[idx] * (1.0 - g[idx] * g[idx]);
                dzi[idx] = dcs[idx] * g[idx] * i[idx] * (1.0 - i[idx]);
                dzo[idx] = dh[idx] * tc[idx] * o[idx] * (1.0 - o[idx]);
            }
        }

        let mut dh_prev = Matrix::zeros(hidden, batch);
        for gate in Gate::ALL {
            let gi = gate.index();
            d_input[gi].axpy(1.0, &dz[gi].matmul_tr(&e.x)?)?;
            d_rec[gi].axpy(1.0, &dz[gi].matmul_tr(&e.h_prev)?)?;
            for (b, s) in d_bias[gi].iter_mut().zip(dz[gi].row_sums()) {
                *b += s;
            }
            d_x[t].axpy(1.0, &k.input[gi].weights().tr_matmul(&dz[gi])?)?;
            dh_prev.axpy(1.0, &k.recurrent[gi].weights().tr_matmul(&dz[gi])?)?;
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }

    for gi in 0..4 {
        k.input[gi].zero_masked(&mut d_input[gi]);
        k.recurrent[gi].zero_masked(&mut d_rec[gi]);
    }
    Ok(LstmGrads {
        input: d_input,
        recurrent: d_rec,
        bias: d_bias,
        x: d_x,
        h0: dh_next,
        c0: dc_next,
    })
}

/// Affine layer `y = W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct FcParams {
    pub kernel: MaskedKernel,
    pub bias: Vec<f64>,
}

impl FcParams {
    pub fn init(input_dim: usize, output_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (input_dim as f64).sqrt();
        Self {
            kernel: MaskedKernel::dense(Matrix::uniform(output_dim, input_dim, bound, rng)),
            bias: vec![0.0; output_dim],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.kernel.shape().1
    }

    pub fn output_dim(&self) -> usize {
        self.kernel.shape().0
    }
}

#[derive(Clone, Debug)]
pub struct FcGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub x: Matrix,
}

pub fn fc_forward(p: &FcParams, x: &Matrix) -> Result<Matrix> {
    if p.bias.len() != p.output_dim() {
        return Err(Error::shape("fc_forward bias", p.kernel.shape(), (p.bias.len(), 1)));
    }
    let mut y = p.kernel.weights().matmul(x)?;
    y.add_row_bias(&p.bias);
    Ok(y)
}

pub fn fc_backward(p: &FcParams, x: &Matrix, dy: &Matrix) -> Result<FcGrads> {
    if dy.shape() != (p.output_dim(), x.cols()) {
        return Err(Error::shape("fc_backward dy", (p.output_dim(), x.cols()), dy.shape()));
    }
    let mut w = dy.matmul_tr(x)?;
    p.kernel.zero_masked(&mut w);
    Ok(FcGrads {
        w,
        b: dy.row_sums(),
        x: p.kernel.weights().tr_matmul(dy)?,
    })
}

/// Inverted dropout. Returns the output and the multiplicative mask used,
/// which is all ones outside training.
pub fn dropout(x: &Matrix, rate: f64, rng: &mut SeededRng, training: bool) -> (Matrix, Matrix) {
    debug_assert!((0.0..1.0).contains(&rate));
    if !training || rate == 0.0 {
        return (x.clone(), Matrix::filled(x.rows(), x.cols(), 1.0));
    }
    let keep = 1.0 / (1.0 - rate);
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.as_mut_slice() {
        *m = if rng.bernoulli(rate) { 0.0 } else { keep };
    }
    let out = x.hadamard(&mask).expect("same shape by construction");
    (out, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Straight-line, scalar-by-scalar LSTM step used as an oracle.
    fn reference_step(k: &LstmKernels, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = k.hidden();
        let mut c_out = vec![0.0; n];
        let mut h_out = vec![0.0; n];
        for r in 0..n {
            let mut z = [0.0; 4];
            for gi in 0..4 {
                let mut s = k.bias[gi][r];
                for (j, xv) in x.iter().enumerate() {
                    s += k.input[gi].weights().get(r, j) * xv;
                }
                for (j, hv) in h.iter().enumerate() {
                    s += k.recurrent[gi].weights().get(r, j) * hv;
                }
                z[gi] = s;
            }
            let f = 1.0 / (1.0 + (-z[0]).exp());
            let cand = z[1].tanh();
            let i = 1.0 / (1.0 + (-z[2]).exp());
            let o = 1.0 / (1.0 + (-z[3]).exp());
            c_out[r] = f * c[r] + i * cand;
            h_out[r] = o * c_out[r].tanh();
        }
        (c_out, h_out)
    }

    #[test]
    fn zero_weights_zero_state() {
        let k = LstmKernels::zeros(3, 2);
        let (s, _) = lstm_step(&k, &Matrix::column(&[1.0, 2.0, 3.0]), &LstmState::zeros(2, 1)).unwrap();
        assert_eq!(s.c.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.h.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_weights_unit_cell() {
        let k = LstmKernels::zeros(1, 1);
        let prev = LstmState {
            c: Matrix::column(&[1.0]),
            h: Matrix::column(&[0.0]),
        };
        let (s, _) = lstm_step(&k, &Matrix::column(&[0.7]), &prev).unwrap();
        assert!((s.c.get(0, 0) - 0.5).abs() < 1e-15);
        assert!((s.h.get(0, 0) - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((s.h.get(0, 0) - 0.23105).abs() < 1e-5);
    }

    #[test]
    fn step_matches_scalar_reference() {
        let mut rng = SeededRng::new(3);
        let mut k = LstmKernels::init(3, 2, &mut rng);
        for b in &mut k.bias {
            for v in b.iter_mut() {
                *v = rng.uniform_range(-0.5, 0.5);
            }
        }
        let x = [0.3, -0.8, 0.5];
        let prev = LstmState {
            c: Matrix::column(&[0.2, -0.4]),
            h: Matrix::column(&[-0.1, 0.6]),
        };
        let (s, _) = lstm_step(&k, &Matrix::column(&x), &prev).unwrap();
        let (c, h) = reference_step(&k, &x, prev.h.as_slice(), prev.c.as_slice());
        for r in 0..2 {
            assert!((s.c.get(r, 0) - c[r]).abs() < 1e-12);
            assert!((s.h.get(r, 0) - h[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn step_rejects_bad_input_width() {
        let k = LstmKernels::zeros(3, 2);
        assert!(lstm_step(&k, &Matrix::column(&[1.0]), &LstmState::zeros(2, 1)).is_err());
    }

    #[test]
    fn backward_rejects_length_mismatch() {
        let k = LstmKernels::zeros(1, 1);
        let (_, tape) = lstm_sequence(&k, &[Matrix::column(&[1.0])], &LstmState::zeros(1, 1)).unwrap();
        assert!(lstm_backward(&k, &tape, &[]).is_err());
    }

    #[test]
    fn masked_weight_has_zero_gradient() {
        let mut rng = SeededRng::new(11);
        let mut k = LstmKernels::init(2, 3, &mut rng);
        let mut mask = Matrix::filled(3, 3, 1.0);
        mask.set(1, 2, 0.0);
        k.recurrent[Gate::Input.index()].set_mask(mask).unwrap();
        let xs = vec![Matrix::column(&[0.5, -0.2]), Matrix::column(&[0.1, 0.9])];
        let (hs, tape) = lstm_sequence(&k, &xs, &LstmState::zeros(3, 1)).unwrap();
        let grad_h: Vec<Matrix> = hs.iter().map(|h| Matrix::filled(h.rows(), 1, 1.0)).collect();
        let g = lstm_backward(&k, &tape, &grad_h).unwrap();
        assert_eq!(g.recurrent[Gate::Input.index()].get(1, 2), 0.0);
        assert_ne!(g.recurrent[Gate::Input.index()].get(0, 2), 0.0);
    }

    #[test]
    fn fc_identity_and_full_mask() {
        let p = FcParams {
            kernel: MaskedKernel::dense(Matrix::identity(3)),
            bias: vec![0.0; 3],
        };
        let x = Matrix::column(&[1.0, -2.0, 3.0]);
        assert_eq!(fc_forward(&p, &x).unwrap(), x);

        let masked = FcParams {
            kernel: MaskedKernel::with_mask(Matrix::filled(2, 3, 0.7), Matrix::zeros(2, 3)).unwrap(),
            bias: vec![0.25, -1.0],
        };
        assert_eq!(fc_forward(&masked, &x).unwrap().as_slice(), &[0.25, -1.0]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = SeededRng::new(0);
        let x = Matrix::filled(4, 4, 2.0);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).0, x);
        assert_eq!(dropout(&x, 0.5, &mut rng, false).0, x);
    }

    #[test]
    fn dropout_preserves_mean() {
        let mut rng = SeededRng::new(42);
        let x = Matrix::filled(1, 100_000, 1.0);
        let (y, _) = dropout(&x, 0.1, &mut rng, true);
        let mean = y.sum() / y.len() as f64;
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
    }

    #[test]
    fn mask_application_is_idempotent() {
        let mut rng = SeededRng::new(5);
        let w = Matrix::uniform(3, 3, 1.0, &mut rng);
        let mut mask = Matrix::filled(3, 3, 1.0);
        mask.set(0, 0, 0.0);
        mask.set(2, 1, 0.0);
        let once = MaskedKernel::with_mask(w.clone(), mask.clone()).unwrap();
        let mut twice = once.clone();
        twice.apply_mask();
        assert_eq!(once, twice);

        // The stored value at a masked position does not leak into outputs.
        let mut other = w.clone();
        other.set(0, 0, 123.0);
        let again = MaskedKernel::with_mask(other, mask).unwrap();
        assert_eq!(again, once);
    }
}
