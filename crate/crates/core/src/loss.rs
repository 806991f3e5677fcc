//! Contrastive code loss, closed-form Bernoulli KL, and their β-weighted
//! combination, all with exact analytic gradients.
//!
//! Conventions baked in here:
//! - For each anchor, the denominator holds its positive plus both views of
//!   the other N-1 items (2(N-1) negatives); self-similarity is excluded.
//! - The loss is the mean over all 2N anchor terms.
//! - The KL penalty is the symmetric average of the two directed KLs, with
//!   the target side detached: each view's probabilities chase the other
//!   view's frozen distribution. Gradients therefore flow only through the
//!   first argument of each directed KL.

use serde::{Deserialize, Serialize};

use crate::binarizer::CodeProbabilities;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Loss hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Softmax temperature.
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    /// Weight of the KL penalty.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Norm guard for cosine similarity.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

fn default_temperature() -> f64 {
    0.3
}
fn default_beta() -> f64 {
    0.001
}
fn default_epsilon() -> f64 {
    1e-12
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: default_temperature(),
            beta: default_beta(),
            epsilon: default_epsilon(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Cosine similarity with a zero-norm guard: `a·b / (max(‖a‖,eps)·max(‖b‖,eps))`.
pub fn cosine_sim(a: &[f64], b: &[f64], eps: f64) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(eps) * nb.sqrt().max(eps))
}

/// Contrastive loss value plus gradients w.r.t. both code batches.
#[derive(Debug, Clone)]
pub struct NtXentOutput {
    pub loss: f64,
    pub grad_b1: Matrix,
    pub grad_b2: Matrix,
}

/// Which similarity matrix an anchor entry refers to.
#[derive(Clone, Copy)]
enum Entry {
    /// sim(b1[k], b2[n])
    Cross(usize, usize),
    /// sim(b1[k], b1[n])
    Within1(usize, usize),
    /// sim(b2[k], b2[n])
    Within2(usize, usize),
}

/// Temperature-scaled contrastive loss over two code batches, with exact
/// analytic gradients. Codes may be binary (training) or real-valued in
/// [0,1] (soft mode).
pub fn ntxent(b1: &Matrix, b2: &Matrix, tau: f64, eps: f64) -> Result<NtXentOutput> {
    let n = b1.rows();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    assert_eq!(b1.rows(), b2.rows(), "batch size mismatch");
    assert_eq!(b1.cols(), b2.cols(), "code width mismatch");
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be > 0, got {}",
            tau
        )));
    }

    let norm1: Vec<f64> = (0..n)
        .map(|k| b1.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let norm2: Vec<f64> = (0..n)
        .map(|k| b2.row(k).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let g1: Vec<f64> = norm1.iter().map(|&v| v.max(eps)).collect();
    let g2: Vec<f64> = norm2.iter().map(|&v| v.max(eps)).collect();

    let sim = |x: &Matrix, nx: &[f64], i: usize, y: &Matrix, ny: &[f64], j: usize| -> f64 {
        let mut dot = 0.0;
        for (&a, &b) in x.row(i).iter().zip(y.row(j)) {
            dot += a * b;
        }
        dot / (nx[i] * ny[j])
    };

    // Similarity matrices: cross view1->view2, and within each view.
    let mut s12 = Matrix::zeros(n, n);
    let mut s11 = Matrix::zeros(n, n);
    let mut s22 = Matrix::zeros(n, n);
    for k in 0..n {
        for j in 0..n {
            s12.set(k, j, sim(b1, &g1, k, b2, &g2, j));
        }
        for j in 0..n {
            if j != k {
                s11.set(k, j, sim(b1, &g1, k, b1, &g1, j));
                s22.set(k, j, sim(b2, &g2, k, b2, &g2, j));
            }
        }
    }

    // Per-anchor softmax over 2N-1 entries; coefficients on each similarity
    // accumulate into c12/c11/c22.
    let mut c12 = Matrix::zeros(n, n);
    let mut c11 = Matrix::zeros(n, n);
    let mut c22 = Matrix::zeros(n, n);
    let scale = 1.0 / (2.0 * n as f64);
    let mut total = 0.0;

    let mut entries: Vec<Entry> = Vec::with_capacity(2 * n - 1);
    for anchor_view in 0..2 {
        for k in 0..n {
            entries.clear();
            // Entry 0 is always the positive pair.
            entries.push(Entry::Cross(k, k));
            for j in 0..n {
                if j == k {
                    continue;
                }
                if anchor_view == 0 {
                    entries.push(Entry::Within1(k, j));
                    entries.push(Entry::Cross(k, j));
                } else {
                    entries.push(Entry::Within2(k, j));
                    entries.push(Entry::Cross(j, k));
                }
            }

            let logit = |e: Entry| -> f64 {
                let s = match e {
                    Entry::Cross(i, j) => s12.get(i, j),
                    Entry::Within1(i, j) => s11.get(i, j),
                    Entry::Within2(i, j) => s22.get(i, j),
                };
                s / tau
            };

            let max = entries
                .iter()
                .map(|&e| logit(e))
                .fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = entries.iter().map(|&e| (logit(e) - max).exp()).sum();
            // -log softmax of the positive entry.
            total += -(logit(entries[0]) - max - z.ln());

            for (idx, &e) in entries.iter().enumerate() {
                let w = (logit(e) - max).exp() / z;
                let coeff = scale * (w - if idx == 0 { 1.0 } else { 0.0 }) / tau;
                match e {
                    Entry::Cross(i, j) => c12.set(i, j, c12.get(i, j) + coeff),
                    Entry::Within1(i, j) => c11.set(i, j, c11.get(i, j) + coeff),
                    Entry::Within2(i, j) => c22.set(i, j, c22.get(i, j) + coeff),
                }
            }
        }
    }

    let loss = total * scale;

    // Propagate similarity coefficients through the cosine.
    let mut grad_b1 = Matrix::zeros(n, b1.cols());
    let mut grad_b2 = Matrix::zeros(n, b2.cols());
    let add_cos_grad = |gx: &mut Matrix,
                        gy: &mut Matrix,
                        x: &Matrix,
                        nx: &[f64],
                        raw_nx: &[f64],
                        i: usize,
                        y: &Matrix,
                        ny: &[f64],
                        raw_ny: &[f64],
                        j: usize,
                        s: f64,
                        coeff: f64| {
        let inv = 1.0 / (nx[i] * ny[j]);
        let xrow = x.row(i);
        let yrow = y.row(j);
        {
            let gxr = gx.row_mut(i);
            for d in 0..xrow.len() {
                let mut g = yrow[d] * inv;
                if raw_nx[i] > 0.0 && raw_nx[i] >= nx[i] {
                    g -= s * xrow[d] / (nx[i] * nx[i]);
                }
                gxr[d] += coeff * g;
            }
        }
        {
            let gyr = gy.row_mut(j);
            for d in 0..yrow.len() {
                let mut g = xrow[d] * inv;
                if raw_ny[j] > 0.0 && raw_ny[j] >= ny[j] {
                    g -= s * yrow[d] / (ny[j] * ny[j]);
                }
                gyr[d] += coeff * g;
            }
        }
    };

    for k in 0..n {
        for j in 0..n {
            let c = c12.get(k, j);
            if c != 0.0 {
                add_cos_grad(
                    &mut grad_b1,
                    &mut grad_b2,
                    b1,
                    &g1,
                    &norm1,
                    k,
                    b2,
                    &g2,
                    &norm2,
                    j,
                    s12.get(k, j),
                    c,
                );
            }
            if j != k {
                let c = c11.get(k, j);
                if c != 0.0 {
                    add_within_grad(&mut grad_b1, b1, &g1, &norm1, k, j, s11.get(k, j), c);
                }
                let c = c22.get(k, j);
                if c != 0.0 {
                    add_within_grad(&mut grad_b2, b2, &g2, &norm2, k, j, s22.get(k, j), c);
                }
            }
        }
    }

    if !loss.is_finite() {
        return Err(Error::Malformed(format!("non-finite contrastive loss {}", loss)));
    }
    Ok(NtXentOutput {
        loss,
        grad_b1,
        grad_b2,
    })
}

/// Gradient of `coeff * cos(x_i, x_j)` added into `gx` for both endpoints
/// within the same batch.
fn add_within_grad(
    gx: &mut Matrix,
    x: &Matrix,
    nx: &[f64],
    raw: &[f64],
    i: usize,
    j: usize,
    s: f64,
    coeff: f64,
) {
    let inv = 1.0 / (nx[i] * nx[j]);
    let d = x.cols();
    for t in 0..d {
        let xi = x.get(i, t);
        let xj = x.get(j, t);
        let mut gi = xj * inv;
        if raw[i] >= nx[i] && raw[i] > 0.0 {
            gi -= s * xi / (nx[i] * nx[i]);
        }
        let mut gj = xi * inv;
        if raw[j] >= nx[j] && raw[j] > 0.0 {
            gj -= s * xj / (nx[j] * nx[j]);
        }
        gx.set(i, t, gx.get(i, t) + coeff * gi);
        gx.set(j, t, gx.get(j, t) + coeff * gj);
    }
}

/// Closed-form KL between per-bit Bernoulli distributions, per item, plus the
/// gradient w.r.t. `p` (the target `gamma` is treated as a constant).
pub fn bernoulli_kl(p: &CodeProbabilities, gamma: &CodeProbabilities) -> (Vec<f64>, Matrix) {
    let pm = p.p();
    let gm = gamma.p();
    assert_eq!(pm.rows(), gm.rows(), "batch size mismatch");
    assert_eq!(pm.cols(), gm.cols(), "code width mismatch");

    let n = pm.rows();
    let mut per_item = Vec::with_capacity(n);
    let mut grad = Matrix::zeros(n, pm.cols());
    for k in 0..n {
        let prow = pm.row(k);
        let grow = gm.row(k);
        let out = grad.row_mut(k);
        let mut acc = 0.0;
        for d in 0..prow.len() {
            let (pv, gv) = (prow[d], grow[d]);
            acc += pv * (pv / gv).ln() + (1.0 - pv) * ((1.0 - pv) / (1.0 - gv)).ln();
            out[d] = (pv / gv).ln() - ((1.0 - pv) / (1.0 - gv)).ln();
        }
        per_item.push(acc);
    }
    (per_item, grad)
}

/// Combined objective output. `grad_b*` is the gradient of the total loss
/// w.r.t. the code values (the contrastive path); `grad_p*` is the gradient
/// w.r.t. the probabilities through the KL path, with the opposite view's
/// distribution detached. Both already include all scaling (β, batch mean).
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub contrastive: f64,
    pub kl: f64,
    pub total: f64,
    pub grad_b1: Matrix,
    pub grad_b2: Matrix,
    pub grad_p1: Matrix,
    pub grad_p2: Matrix,
}

/// `total = ntxent(b1, b2) + β * mean_k mean_dir KL(view ‖ other view)`.
pub fn cib_loss(
    b1: &Matrix,
    b2: &Matrix,
    p1: &CodeProbabilities,
    p2: &CodeProbabilities,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    cfg.validate()?;
    let contrastive = ntxent(b1, b2, cfg.temperature, cfg.epsilon)?;
    let n = b1.rows() as f64;

    let (kl12, grad12) = bernoulli_kl(p1, p2);
    let (kl21, grad21) = bernoulli_kl(p2, p1);
    let kl = (kl12.iter().sum::<f64>() + kl21.iter().sum::<f64>()) / (2.0 * n);

    let kl_scale = cfg.beta / (2.0 * n);
    let grad_p1 = grad12.map(|g| g * kl_scale);
    let grad_p2 = grad21.map(|g| g * kl_scale);

    let total = contrastive.loss + cfg.beta * kl;
    Ok(LossOutput {
        contrastive: contrastive.loss,
        kl,
        total,
        grad_b1: contrastive.grad_b1,
        grad_b2: contrastive.grad_b2,
        grad_p1,
        grad_p2,
    })
}
