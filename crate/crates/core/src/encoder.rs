//! Trainable encoder head: one hidden ReLU layer mapping d-dimensional
//! features to D code logits, with an exact analytic backward pass and Adam.
//!
//! Checkpoint layout (`CIBM`, little-endian):
//! ```text
//! magic "CIBM", u32 version=1, u32 input_dim, u32 hidden, u32 code_bits,
//! w1 (input_dim*hidden f32), b1 (hidden f32),
//! w2 (hidden*code_bits f32), b2 (code_bits f32),
//! u8 adam_flag; if 1: u64 step,
//!   first-moment blocks (w1,b1,w2,b2), second-moment blocks (w1,b1,w2,b2)
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::dataio::Reader;
use crate::error::{Error, Result};
use crate::matrix::{add_row_broadcast, matmul, matmul_a_bt, matmul_at_b, Matrix};
use crate::stream::{rng_for, tag};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CIBM";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Weights and biases of the two layers.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Per-parameter gradients, same shapes as [`EncoderParams`].
#[derive(Debug, Clone)]
pub struct EncoderGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Matrix,
    pub pre_hidden: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl EncoderParams {
    pub fn input_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn code_bits(&self) -> usize {
        self.w2.cols()
    }

    pub fn zeros(input_dim: usize, hidden: usize, code_bits: usize) -> Self {
        Self {
            w1: Matrix::zeros(input_dim, hidden),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(hidden, code_bits),
            b2: vec![0.0; code_bits],
        }
    }

    pub fn param_count(&self) -> usize {
        self.w1.data().len() + self.b1.len() + self.w2.data().len() + self.b2.len()
    }

    fn block_slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn block_slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    /// Flat coordinate access in (w1, b1, w2, b2) order, for gradient checks.
    pub fn flat_get(&self, index: usize) -> f64 {
        let (block, off) = self.locate(index);
        self.block_slices()[block][off]
    }

    pub fn flat_set(&mut self, index: usize, value: f64) {
        let (block, off) = self.locate(index);
        self.block_slices_mut()[block][off] = value;
    }

    /// Human-readable name of a flat coordinate, e.g. `w1[3,2]`.
    pub fn coord_name(&self, index: usize) -> String {
        let (block, off) = self.locate(index);
        match block {
            0 => format!("w1[{},{}]", off / self.w1.cols(), off % self.w1.cols()),
            1 => format!("b1[{}]", off),
            2 => format!("w2[{},{}]", off / self.w2.cols(), off % self.w2.cols()),
            _ => format!("b2[{}]", off),
        }
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        let sizes = [
            self.w1.data().len(),
            self.b1.len(),
            self.w2.data().len(),
            self.b2.len(),
        ];
        for (block, &size) in sizes.iter().enumerate() {
            if index < size {
                return (block, index);
            }
            index -= size;
        }
        panic!("flat index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.block_slices()
            .iter()
            .all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl EncoderGrads {
    pub fn zeros_like(params: &EncoderParams) -> Self {
        Self {
            w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: vec![0.0; params.b1.len()],
            w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: vec![0.0; params.b2.len()],
        }
    }

    pub fn add(&mut self, other: &EncoderGrads) {
        for (a, b) in self.w1.data_mut().iter_mut().zip(other.w1.data()) {
            *a += b;
        }
        for (a, b) in self.b1.iter_mut().zip(&other.b1) {
            *a += b;
        }
        for (a, b) in self.w2.data_mut().iter_mut().zip(other.w2.data()) {
            *a += b;
        }
        for (a, b) in self.b2.iter_mut().zip(&other.b2) {
            *a += b;
        }
    }

    fn block_slices(&self) -> [&[f64]; 4] {
        [self.w1.data(), &self.b1, self.w2.data(), &self.b2]
    }

    fn block_slices_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.data_mut(),
            &mut self.b1,
            self.w2.data_mut(),
            &mut self.b2,
        ]
    }

    pub fn flat_get(&self, mut index: usize) -> f64 {
        for block in self.block_slices() {
            if index < block.len() {
                return block[index];
            }
            index -= block.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_add(&mut self, mut index: usize, delta: f64) {
        for block in self.block_slices_mut() {
            if index < block.len() {
                block[index] += delta;
                return;
            }
            index -= block.len();
        }
        panic!("flat index out of range");
    }
}

/// Glorot-uniform weights in ±sqrt(6/(fan_in+fan_out)), zero biases.
pub fn init_params(input_dim: usize, hidden: usize, code_bits: usize, seed: u64) -> EncoderParams {
    assert!(input_dim >= 1 && hidden >= 1 && code_bits >= 1);
    let mut rng = rng_for(seed, &[tag::INIT]);
    let mut glorot = |rows: usize, cols: usize| {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen::<f64>() * 2.0 * limit - limit)
            .collect();
        Matrix::from_vec(rows, cols, data)
    };
    let w1 = glorot(input_dim, hidden);
    let w2 = glorot(hidden, code_bits);
    EncoderParams {
        w1,
        b1: vec![0.0; hidden],
        w2,
        b2: vec![0.0; code_bits],
    }
}

/// `logits = relu(batch·w1 + b1)·w2 + b2`, keeping intermediates for the
/// backward pass. A non-finite logit reports numerical blow-up.
pub fn forward(params: &EncoderParams, batch: &Matrix) -> Result<ForwardTrace> {
    assert_eq!(batch.cols(), params.input_dim(), "input width mismatch");
    let pre_hidden = add_row_broadcast(&matmul(batch, &params.w1), &params.b1);
    let hidden = pre_hidden.map(|v| if v > 0.0 { v } else { 0.0 });
    let logits = add_row_broadcast(&matmul(&hidden, &params.w2), &params.b2);
    if let Some((row, col)) = logits.first_non_finite() {
        return Err(Error::NonFinite { row, col });
    }
    Ok(ForwardTrace {
        input: batch.clone(),
        pre_hidden,
        hidden,
        logits,
    })
}

/// Exact gradients of the forward map composed with `grad_logits`. The ReLU
/// subgradient at exactly zero is zero.
pub fn backward(
    params: &EncoderParams,
    trace: &ForwardTrace,
    grad_logits: &Matrix,
) -> (EncoderGrads, Matrix) {
    assert_eq!(grad_logits.rows(), trace.logits.rows());
    assert_eq!(grad_logits.cols(), trace.logits.cols());

    let gw2 = matmul_at_b(&trace.hidden, grad_logits);
    let gb2 = grad_logits.col_sums();
    let grad_hidden = matmul_a_bt(grad_logits, &params.w2);
    let grad_pre = grad_hidden.zip_with(&trace.pre_hidden, |g, pre| if pre > 0.0 { g } else { 0.0 });
    let gw1 = matmul_at_b(&trace.input, &grad_pre);
    let gb1 = grad_pre.col_sums();
    let grad_input = matmul_a_bt(&grad_pre, &params.w1);

    (
        EncoderGrads {
            w1: gw1,
            b1: gb1,
            w2: gw2,
            b2: gb2,
        },
        grad_input,
    )
}

/// Adam hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self::with_lr(0.001)
    }
}

/// First/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: EncoderGrads,
    pub v: EncoderGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: EncoderGrads::zeros_like(params),
            v: EncoderGrads::zeros_like(params),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update over a parameter block.
pub(crate) fn adam_update_block(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

/// Standard Adam step over all four blocks; increments the step counter.
pub fn adam_step(
    params: &mut EncoderParams,
    grads: &EncoderGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) {
    state.step += 1;
    let step = state.step;
    let p = params.block_slices_mut();
    let g = grads.block_slices();
    let m = state.m.block_slices_mut();
    let v = state.v.block_slices_mut();
    for (((p, g), m), v) in p.into_iter().zip(g).zip(m).zip(v) {
        adam_update_block(p, g, m, v, step, cfg);
    }
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

fn write_block(out: &mut Vec<u8>, block: &[f64]) {
    for &v in block {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn read_block(r: &mut Reader, len: usize, what: &str) -> Result<Vec<f64>> {
    r.need(
        len.checked_mul(4)
            .ok_or_else(|| Error::DimensionOverflow(format!("{}: {} values", what, len)))?,
        what,
    )?;
    let mut out = Vec::with_capacity(len);
    for i in 0..len {
        let v = r.f32(what)?;
        if !v.is_finite() {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        out.push(v as f64);
    }
    Ok(out)
}

/// Save params (and optionally Adam state) as a `CIBM` checkpoint.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &EncoderParams,
    adam: Option<&AdamState>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.input_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(params.hidden() as u32).to_le_bytes());
    out.extend_from_slice(&(params.code_bits() as u32).to_le_bytes());
    for block in params.block_slices() {
        write_block(&mut out, block);
    }
    match adam {
        None => out.push(0),
        Some(state) => {
            out.push(1);
            out.extend_from_slice(&state.step.to_le_bytes());
            for block in state.m.block_slices() {
                write_block(&mut out, block);
            }
            for block in state.v.block_slices() {
                write_block(&mut out, block);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Load a `CIBM` checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EncoderParams, Option<AdamState>)> {
    let buf = fs::read(path)?;
    let mut r = Reader::new(&buf);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version("checkpoint")?;
    let d = r.u32("input_dim")? as usize;
    let h = r.u32("hidden")? as usize;
    let k = r.u32("code_bits")? as usize;
    if d == 0 || h == 0 || k == 0 {
        return Err(Error::Malformed("checkpoint declares zero dims".into()));
    }
    let read_blocks = |r: &mut Reader| -> Result<(Matrix, Vec<f64>, Matrix, Vec<f64>)> {
        Ok((
            Matrix::from_vec(d, h, read_block(r, d * h, "w1 block")?),
            read_block(r, h, "b1 block")?,
            Matrix::from_vec(h, k, read_block(r, h * k, "w2 block")?),
            read_block(r, k, "b2 block")?,
        ))
    };
    let (w1, b1, w2, b2) = read_blocks(&mut r)?;
    let params = EncoderParams { w1, b1, w2, b2 };
    let adam = match r.u8("adam flag")? {
        0 => None,
        1 => {
            let step = r.u64("adam step")?;
            let (w1, b1, w2, b2) = read_blocks(&mut r)?;
            let m = EncoderGrads { w1, b1, w2, b2 };
            let (w1, b1, w2, b2) = read_blocks(&mut r)?;
            let v = EncoderGrads { w1, b1, w2, b2 };
            Some(AdamState { m, v, step })
        }
        other => {
            return Err(Error::Malformed(format!(
                "adam presence flag must be 0 or 1, got {}",
                other
            )))
        }
    };
    r.finish_exact("checkpoint file")?;
    Ok((params, adam))
}
