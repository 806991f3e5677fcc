//! Stochastic feature-space views. Two independent draws of the same
//! transform (elementwise masking, multiplicative scaling, additive Gaussian
//! noise) form the positive pair for the contrastive loss.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Transform intensities. `noise_sigma` is a multiple of the per-dimension
/// dataset std, so the noise scale tracks the data scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewConfig {
    #[serde(default = "default_mask_prob")]
    pub mask_prob: f64,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_scale_range")]
    pub scale_range: (f64, f64),
    #[serde(default, rename = "view_seed")]
    pub seed: u64,
}

fn default_mask_prob() -> f64 {
    0.2
}
fn default_noise_sigma() -> f64 {
    0.1
}
fn default_scale_range() -> (f64, f64) {
    (0.9, 1.1)
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            mask_prob: default_mask_prob(),
            noise_sigma: default_noise_sigma(),
            scale_range: default_scale_range(),
            seed: 0,
        }
    }
}

impl ViewConfig {
    /// The no-op transform, useful for tests and gradient checks.
    pub fn identity() -> Self {
        Self {
            mask_prob: 0.0,
            noise_sigma: 0.0,
            scale_range: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidConfig(format!(
                "mask_prob must be in [0,1), got {}",
                self.mask_prob
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::InvalidConfig(format!(
                "scale_range must satisfy 0 < lo <= 1 <= hi, got ({}, {})",
                lo, hi
            )));
        }
        Ok(())
    }
}

/// Two stochastic views of one batch, plus the dataset rows they came from.
#[derive(Debug, Clone)]
pub struct ViewPairBatch {
    pub v1: Matrix,
    pub v2: Matrix,
    pub source_indices: Vec<usize>,
}

/// Apply the transform twice, independently, to every row of `batch`.
///
/// `dim_std` is the frozen per-dimension std of the training set. Draw order
/// is fixed (view 1 fully, then view 2; row-major; mask, scale, noise per
/// element) so the output is a pure function of the stream state.
pub fn make_views(
    batch: &Matrix,
    cfg: &ViewConfig,
    dim_std: &[f64],
    rng: &mut ChaCha8Rng,
    source_indices: Vec<usize>,
) -> ViewPairBatch {
    assert!(batch.rows() >= 1, "empty batch");
    assert_eq!(batch.cols(), dim_std.len(), "dim_std width mismatch");
    let v1 = one_view(batch, cfg, dim_std, rng);
    let v2 = one_view(batch, cfg, dim_std, rng);
    ViewPairBatch {
        v1,
        v2,
        source_indices,
    }
}

fn one_view(batch: &Matrix, cfg: &ViewConfig, dim_std: &[f64], rng: &mut ChaCha8Rng) -> Matrix {
    let (lo, hi) = cfg.scale_range;
    let mut out = Matrix::zeros(batch.rows(), batch.cols());
    for r in 0..batch.rows() {
        let src = batch.row(r);
        let dst = out.row_mut(r);
        for c in 0..src.len() {
            let keep = rng.gen::<f64>() >= cfg.mask_prob;
            let scale = lo + (hi - lo) * rng.gen::<f64>();
            let gauss: f64 = rng.sample(StandardNormal);
            let masked = if keep { src[c] } else { 0.0 };
            dst[c] = masked * scale + gauss * cfg.noise_sigma * dim_std[c];
        }
    }
    out
}
