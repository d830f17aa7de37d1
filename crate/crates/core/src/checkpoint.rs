//! Binary checkpoints and compressed sparse exports.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! "CSP1"  u32 version  [u8; 32] config hash  u64 step
//! model:       u8 objective  u32 layers  then per layer
//!              4 × (input weights, input mask), 4 × (recurrent weights,
//!              recurrent mask), 4 × bias; then head weights, head mask,
//!              head bias
//! controllers: u32 count, then per controller a group tag (u8 kind,
//!              u32 layer) and six f64 (λ, λ_lo, λ_hi, ε, ρ, ρ growth cap)
//! optimizer:   u8 kind, f64 β1, β2, eps, u64 t, u32 tensors, then per
//!              tensor the m and v vectors
//! ```
//!
//! Every tensor is `u32 rows, u32 cols` followed by `rows·cols` f64 in
//! row-major order. Vectors are stored as `1 × n` tensors.
//!
//! Sparse export layout:
//!
//! ```text
//! "CSPX"  u32 version  u8 objective  u32 layers
//! every kernel (same order as above) as CSR:
//!     u32 rows, u32 cols, u8 index width (2 or 4), u32 nnz,
//!     (rows + 1) × u32 row offsets, nnz column indices, nnz × f64 values
//! every bias as a dense tensor
//! ```
//!
//! CSR stores exactly the mask-active entries, so masks survive the trip.
//! Column indices use two bytes whenever the kernel has at most 65536
//! columns.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{GroupId, SeqModel};
use crate::nn::{FcParams, LstmKernels, MaskedKernel};
use crate::numerics::Matrix;
use crate::optim::{Moments, Optimizer, OptimizerKind};
use crate::pruning::SensingController;
use crate::tasks::Objective;

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSP1";
const EXPORT_MAGIC: &[u8; 4] = b"CSPX";
const VERSION: u32 = 1;

/// SHA-256 of a configuration's canonical text.
pub fn config_hash(canonical: &str) -> [u8; 32] {
    Sha256::digest(canonical.as_bytes()).into()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config_hash: [u8; 32],
    pub model: SeqModel,
    pub controllers: Vec<(GroupId, SensingController)>,
    pub optimizer: Optimizer,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("tensor dimension exceeds u32"));
    }
    fn tensor(&mut self, m: &Matrix) {
        self.len_u32(m.rows());
        self.len_u32(m.cols());
        for v in m.as_slice() {
            self.f64(*v);
        }
    }
    fn vector(&mut self, v: &[f64]) {
        self.u32(1);
        self.len_u32(v.len());
        for x in v {
            self.f64(*x);
        }
    }
}

struct Reader<'a> {
    what: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(what: &'static str, buf: &'a [u8]) -> Self {
        Self { what, buf, pos: 0 }
    }

    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Format {
            what: self.what,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err(format!("truncated at byte {}", self.pos))),
        }
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }

    fn tensor(&mut self) -> Result<Matrix> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| self.err("tensor too large"))?;
        let data = self.f64s(n)?;
        Matrix::from_vec(rows, cols, data)
    }

    fn vector(&mut self) -> Result<Vec<f64>> {
        let t = self.tensor()?;
        if t.rows() != 1 {
            return Err(self.err(format!("expected a vector, found {}x{}", t.rows(), t.cols())));
        }
        Ok(t.into_vec())
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.array::<4>()?;
        if &got != want {
            return Err(self.err(format!("bad magic {:?}", String::from_utf8_lossy(&got))));
        }
        let version = self.u32()?;
        if version != VERSION {
            return Err(self.err(format!("unsupported version {version}")));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn objective_code(o: Objective) -> u8 {
    match o {
        Objective::FinalMse => 0,
        Objective::StepCrossEntropy => 1,
    }
}

fn objective_from(r: &Reader<'_>, code: u8) -> Result<Objective> {
    match code {
        0 => Ok(Objective::FinalMse),
        1 => Ok(Objective::StepCrossEntropy),
        c => Err(r.err(format!("unknown objective code {c}"))),
    }
}

/// Visits every kernel of `model` in storage order.
fn kernels(model: &SeqModel) -> Vec<&MaskedKernel> {
    let mut out = Vec::new();
    for l in &model.layers {
        out.extend(l.input.iter());
        out.extend(l.recurrent.iter());
    }
    out.push(&model.head.kernel);
    out
}

fn biases(model: &SeqModel) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> = Vec::new();
    for l in &model.layers {
        out.extend(l.bias.iter().map(|b| b.as_slice()));
    }
    out.push(&model.head.bias);
    out
}

/// Rebuilds a model from kernels and biases in storage order.
fn assemble(
    r: &Reader<'_>,
    objective: Objective,
    n_layers: usize,
    mut kernels: Vec<MaskedKernel>,
    mut biases: Vec<Vec<f64>>,
) -> Result<SeqModel> {
    if kernels.len() != 8 * n_layers + 1 || biases.len() != 4 * n_layers + 1 {
        return Err(r.err("tensor count does not match layer count"));
    }
    let head_bias = biases.pop().expect("counted");
    let head_kernel = kernels.pop().expect("counted");
    let mut k_iter = kernels.into_iter();
    let mut b_iter = biases.into_iter();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let input: [MaskedKernel; 4] = std::array::from_fn(|_| k_iter.next().expect("counted"));
        let recurrent: [MaskedKernel; 4] = std::array::from_fn(|_| k_iter.next().expect("counted"));
        let bias: [Vec<f64>; 4] = std::array::from_fn(|_| b_iter.next().expect("counted"));
        let hidden = recurrent[0].shape().0;
        let in_dim = input[0].shape().1;
        let ok = input.iter().all(|k| k.shape() == (hidden, in_dim))
            && recurrent.iter().all(|k| k.shape() == (hidden, hidden))
            && bias.iter().all(|b| b.len() == hidden)
            && (l == 0 || Some(in_dim) == layers.last().map(|p: &LstmKernels| p.hidden()));
        if !ok {
            return Err(r.err(format!("inconsistent shapes in layer {l}")));
        }
        layers.push(LstmKernels {
            input,
            recurrent,
            bias,
        });
    }
    let (out_dim, head_in) = head_kernel.shape();
    if head_bias.len() != out_dim || layers.last().is_some_and(|l| l.hidden() != head_in) {
        return Err(r.err("head shape does not match the network"));
    }
    Ok(SeqModel {
        layers,
        head: FcParams {
            kernel: head_kernel,
            bias: head_bias,
        },
        objective,
    })
}

fn group_tag(g: GroupId) -> (u8, u32) {
    match g {
        GroupId::Input(l) => (0, l as u32),
        GroupId::Recurrent(l) => (1, l as u32),
        GroupId::Head => (2, 0),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(VERSION);
        w.buf.extend_from_slice(&self.config_hash);
        w.u64(self.step);

        w.u8(objective_code(self.model.objective));
        w.len_u32(self.model.layers.len());
        for l in &self.model.layers {
            for k in l.input.iter().chain(&l.recurrent) {
                w.tensor(k.weights());
                w.tensor(k.mask());
            }
            for b in &l.bias {
                w.vector(b);
            }
        }
        w.tensor(self.model.head.kernel.weights());
        w.tensor(self.model.head.kernel.mask());
        w.vector(&self.model.head.bias);

        w.len_u32(self.controllers.len());
        for (g, c) in &self.controllers {
            let (kind, layer) = group_tag(*g);
            w.u8(kind);
            w.u32(layer);
            for v in [c.lambda, c.lambda_lower, c.lambda_upper, c.epsilon, c.rho, c.rho_growth_cap] {
                w.f64(v);
            }
        }

        let o = &self.optimizer;
        w.u8(match o.kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam => 1,
        });
        w.f64(o.beta1);
        w.f64(o.beta2);
        w.f64(o.eps);
        w.u64(o.t);
        w.len_u32(o.moments.len());
        for m in &o.moments {
            w.vector(&m.m);
            w.vector(&m.v);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("checkpoint", bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let config_hash = r.array::<32>()?;
        let step = r.u64()?;

        let code = r.u8()?;
        let objective = objective_from(&r, code)?;
        let n_layers = r.u32()? as usize;
        let mut kernels = Vec::new();
        let mut biases = Vec::new();
        for _ in 0..n_layers {
            for _ in 0..8 {
                let w = r.tensor()?;
                let m = r.tensor()?;
                kernels.push(MaskedKernel::with_mask(w, m)?);
            }
            for _ in 0..4 {
                biases.push(r.vector()?);
            }
        }
        let w = r.tensor()?;
        let m = r.tensor()?;
        kernels.push(MaskedKernel::with_mask(w, m)?);
        biases.push(r.vector()?);
        let model = assemble(&r, objective, n_layers, kernels, biases)?;

        let n_ctrl = r.u32()? as usize;
        let mut controllers = Vec::with_capacity(n_ctrl.min(1024));
        for _ in 0..n_ctrl {
            let kind = r.u8()?;
            let layer = r.u32()? as usize;
            let g = match kind {
                0 => GroupId::Input(layer),
                1 => GroupId::Recurrent(layer),
                2 => GroupId::Head,
                k => return Err(r.err(format!("unknown controller group tag {k}"))),
            };
            let c = SensingController {
                lambda: r.f64()?,
                lambda_lower: r.f64()?,
                lambda_upper: r.f64()?,
                epsilon: r.f64()?,
                rho: r.f64()?,
                rho_growth_cap: r.f64()?,
            };
            controllers.push((g, c));
        }

        let kind = match r.u8()? {
            0 => OptimizerKind::Sgd,
            1 => OptimizerKind::Adam,
            k => return Err(r.err(format!("unknown optimizer tag {k}"))),
        };
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        let t = r.u64()?;
        let n_mom = r.u32()? as usize;
        let mut moments = Vec::with_capacity(n_mom.min(1024));
        for _ in 0..n_mom {
            let m = r.vector()?;
            let v = r.vector()?;
            moments.push(Moments { m, v });
        }
        r.finish()?;
        Ok(Self {
            step,
            config_hash,
            model,
            controllers,
            optimizer: Optimizer {
                kind,
                beta1,
                beta2,
                eps,
                t,
                moments,
            },
        })
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn write_csr(w: &mut Writer, k: &MaskedKernel) {
    let (rows, cols) = k.shape();
    let narrow = cols <= 1 << 16;
    let weights = k.weights().as_slice();
    let mask = k.mask().as_slice();
    let nnz = mask.iter().filter(|m| **m != 0.0).count();
    w.len_u32(rows);
    w.len_u32(cols);
    w.u8(if narrow { 2 } else { 4 });
    w.len_u32(nnz);
    let mut offset = 0usize;
    w.u32(0);
    for r in 0..rows {
        offset += mask[r * cols..(r + 1) * cols].iter().filter(|m| **m != 0.0).count();
        w.len_u32(offset);
    }
    for (i, m) in mask.iter().enumerate() {
        if *m != 0.0 {
            let c = i % cols;
            if narrow {
                w.u16((c) as u16);
            } else {
                w.len_u32(c);
            }
        }
    }
    for (v, m) in weights.iter().zip(mask) {
        if *m != 0.0 {
            w.f64(*v);
        }
    }
}

fn read_csr(r: &mut Reader<'_>) -> Result<MaskedKernel> {
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let width = r.u8()?;
    let nnz = r.u32()? as usize;
    if width != 2 && width != 4 {
        return Err(r.err(format!("bad column index width {width}")));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| r.err("kernel too large"))?;
    if nnz > n {
        return Err(r.err(format!("{nnz} stored entries in a {rows}x{cols} kernel")));
    }
    let offsets = (0..=rows).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    if offsets[0] != 0 || offsets[rows] != nnz || offsets.windows(2).any(|p| p[0] > p[1]) {
        return Err(r.err("row offsets are not a nondecreasing 0..nnz sequence"));
    }
    let mut indices = Vec::with_capacity(nnz);
    for _ in 0..nnz {
        let c = if width == 2 { r.u16()? as usize } else { r.u32()? as usize };
        if c >= cols {
            return Err(r.err(format!("column index {c} out of range for {cols} columns")));
        }
        indices.push(c);
    }
    let values = r.f64s(nnz)?;
    let mut weights = Matrix::zeros(rows, cols);
    let mut mask = Matrix::zeros(rows, cols);
    for row in 0..rows {
        for k in offsets[row]..offsets[row + 1] {
            weights.set(row, indices[k], values[k]);
            mask.set(row, indices[k], 1.0);
        }
    }
    MaskedKernel::with_mask(weights, mask)
}

/// Serializes one kernel as CSR (the per-kernel record of [`export_sparse`]).
pub fn kernel_to_csr(k: &MaskedKernel) -> Vec<u8> {
    let mut w = Writer::default();
    write_csr(&mut w, k);
    w.buf
}

pub fn kernel_from_csr(bytes: &[u8]) -> Result<MaskedKernel> {
    let mut r = Reader::new("sparse kernel", bytes);
    let k = read_csr(&mut r)?;
    r.finish()?;
    Ok(k)
}

/// Dense serialization of one kernel's weights: shape header and values.
pub fn kernel_to_dense(k: &MaskedKernel) -> Vec<u8> {
    let mut w = Writer::default();
    w.tensor(k.weights());
    w.buf
}

/// Compressed inference artifact: CSR kernels, dense biases.
pub fn export_sparse(model: &SeqModel) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(EXPORT_MAGIC);
    w.u32(VERSION);
    w.u8(objective_code(model.objective));
    w.len_u32(model.layers.len());
    for k in kernels(model) {
        write_csr(&mut w, k);
    }
    for b in biases(model) {
        w.vector(b);
    }
    w.buf
}

pub fn load_sparse(bytes: &[u8]) -> Result<SeqModel> {
    let mut r = Reader::new("sparse export", bytes);
    r.magic(EXPORT_MAGIC)?;
    let code = r.u8()?;
    let objective = objective_from(&r, code)?;
    let n_layers = r.u32()? as usize;
    let kernels = (0..8 * n_layers + 1).map(|_| read_csr(&mut r)).collect::<Result<Vec<_>>>()?;
    let biases = (0..4 * n_layers + 1).map(|_| r.vector()).collect::<Result<Vec<_>>>()?;
    let model = assemble(&r, objective, n_layers, kernels, biases)?;
    r.finish()?;
    Ok(model)
}

pub fn save_sparse(model: &SeqModel, path: &Path) -> Result<()> {
    write_atomic(path, &export_sparse(model))
}

pub fn read_sparse(path: &Path) -> Result<SeqModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_sparse(&bytes)
}
