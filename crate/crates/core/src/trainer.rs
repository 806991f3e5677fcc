//! End-to-end training loop (views → encoder → Bernoulli codes → loss →
//! straight-through backward → Adam), dataset encoding, and a
//! finite-difference gradient-check harness.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::binarizer::{
    binarize_inference, sample_st, sigmoid, sigmoid_backward, st_backward,
    DeterministicCode,
};
use crate::dataio::FeatureDataset;
use crate::encoder::{
    adam_step, backward, forward, init_params, AdamConfig, AdamState, EncoderGrads, EncoderParams,
};
use crate::error::{Error, Result};
use crate::loss::{bernoulli_kl, cib_loss, ntxent, LossConfig};
use crate::matrix::Matrix;
use crate::stream::{rng_for, tag};
use crate::views::{make_views, ViewConfig};

/// Training objective variant. `ClHash` is the pure contrastive ablation:
/// it forces the KL weight to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    CibHash,
    ClHash,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::CibHash => write!(f, "cibhash"),
            Mode::ClHash => write!(f, "clhash"),
        }
    }
}

/// All training hyperparameters. Serializes as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_code_bits")]
    pub code_bits: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossConfig,
    #[serde(flatten)]
    pub views: ViewConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
}

fn default_code_bits() -> usize {
    16
}
fn default_hidden() -> usize {
    1024
}
fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    30
}
fn default_lr() -> f64 {
    0.001
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            code_bits: default_code_bits(),
            hidden: default_hidden(),
            batch: default_batch(),
            epochs: default_epochs(),
            lr: default_lr(),
            loss: LossConfig::default(),
            views: ViewConfig::default(),
            seed: 0,
            mode: Mode::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(8..=256).contains(&self.code_bits) {
            return Err(Error::InvalidConfig(format!(
                "code_bits must be in 8..=256, got {}",
                self.code_bits
            )));
        }
        if self.batch < 2 {
            return Err(Error::InvalidConfig(format!(
                "batch must be >= 2, got {}",
                self.batch
            )));
        }
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.hidden < 1 {
            return Err(Error::InvalidConfig("hidden must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lr must be > 0, got {}",
                self.lr
            )));
        }
        self.loss.validate()?;
        self.views.validate()
    }

    /// The KL weight actually used: `ClHash` pins it to zero.
    pub fn effective_beta(&self) -> f64 {
        match self.mode {
            Mode::CibHash => self.loss.beta,
            Mode::ClHash => 0.0,
        }
    }

    /// Loss config with the mode-effective beta substituted in.
    pub fn effective_loss(&self) -> LossConfig {
        LossConfig {
            beta: self.effective_beta(),
            ..self.loss.clone()
        }
    }
}

/// Mean loss components over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub contrastive: f64,
    pub kl: f64,
    pub total: f64,
}

/// Per-epoch loss trace plus run metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<EpochLoss>,
    pub wall_time_ms: u64,
    /// Path of the saved checkpoint, when the caller wrote one.
    pub checkpoint: Option<String>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub report: TrainReport,
}

/// Train the encoder on `dataset`. Deterministic given (dataset, cfg): every
/// random draw comes from a stream keyed by the config seed and the
/// (epoch, step, view) coordinates.
pub fn train(dataset: &FeatureDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = dataset.n();
    if n < cfg.batch {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} items, batch size {} needs at least that many",
            n, cfg.batch
        )));
    }
    let start = Instant::now();
    let dim_std = dataset.dim_std();
    let loss_cfg = cfg.effective_loss();

    let mut params = init_params(dataset.dim(), cfg.hidden, cfg.code_bits, cfg.seed);
    let mut adam = AdamState::new(&params);
    let adam_cfg = AdamConfig::with_lr(cfg.lr);

    let steps_per_epoch = n / cfg.batch; // last partial batch dropped
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, cfg.seed, epoch);
        let mut sums = EpochLoss {
            contrastive: 0.0,
            kl: 0.0,
            total: 0.0,
        };
        for step in 0..steps_per_epoch {
            let indices = &order[step * cfg.batch..(step + 1) * cfg.batch];
            let batch = dataset.features().gather_rows(indices);

            let mut view_rng = rng_for(
                cfg.seed,
                &[tag::VIEWS, cfg.views.seed, epoch as u64, step as u64],
            );
            let pair = make_views(&batch, &cfg.views, &dim_std, &mut view_rng, indices.to_vec());

            let trace1 = forward(&params, &pair.v1)?;
            let trace2 = forward(&params, &pair.v2)?;
            let p1 = sigmoid(&trace1.logits);
            let p2 = sigmoid(&trace2.logits);

            let mut rng1 = rng_for(cfg.seed, &[tag::SAMPLE, epoch as u64, step as u64, 0]);
            let mut rng2 = rng_for(cfg.seed, &[tag::SAMPLE, epoch as u64, step as u64, 1]);
            let code1 = sample_st(&p1, &mut rng1);
            let code2 = sample_st(&p2, &mut rng2);

            let out = cib_loss(&code1.bits, &code2.bits, &p1, &p2, &loss_cfg)?;
            if !out.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    contrastive: out.contrastive,
                    kl: out.kl,
                });
            }
            sums.contrastive += out.contrastive;
            sums.kl += out.kl;
            sums.total += out.total;

            // Straight-through path for the codes, sigmoid path for the KL.
            let grad_z1 = st_backward(&code1, &out.grad_b1)
                .zip_with(&sigmoid_backward(&p1, &out.grad_p1), |a, b| a + b);
            let grad_z2 = st_backward(&code2, &out.grad_b2)
                .zip_with(&sigmoid_backward(&p2, &out.grad_p2), |a, b| a + b);

            let (mut grads, _) = backward(&params, &trace1, &grad_z1);
            let (grads2, _) = backward(&params, &trace2, &grad_z2);
            grads.add(&grads2);

            adam_step(&mut params, &grads, &mut adam, &adam_cfg);
        }
        let steps = steps_per_epoch as f64;
        epoch_losses.push(EpochLoss {
            contrastive: sums.contrastive / steps,
            kl: sums.kl / steps,
            total: sums.total / steps,
        });
    }

    Ok(TrainOutcome {
        params,
        adam,
        report: TrainReport {
            epoch_losses,
            wall_time_ms: start.elapsed().as_millis() as u64,
            checkpoint: None,
        },
    })
}

/// Fisher-Yates shuffle from a per-epoch stream.
fn shuffle(order: &mut [usize], seed: u64, epoch: usize) {
    use rand::Rng;
    let mut rng = rng_for(seed, &[tag::SHUFFLE, epoch as u64]);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Deterministic inference codes for a whole feature matrix: no views, no
/// sampling, bit = 1 iff sigmoid(logit) > 0.5. Processes rows in chunks;
/// per-row arithmetic is identical regardless of chunking.
pub fn encode_dataset(params: &EncoderParams, features: &Matrix) -> Result<DeterministicCode> {
    const CHUNK: usize = 4096;
    let n = features.rows();
    let width = params.code_bits();
    let mut bits = Vec::with_capacity(n * width);
    let mut row0 = 0;
    while row0 < n {
        let rows: Vec<usize> = (row0..(row0 + CHUNK).min(n)).collect();
        let chunk = features.gather_rows(&rows);
        let trace = forward(params, &chunk)?;
        let probs = sigmoid(&trace.logits);
        let code = binarize_inference(&probs);
        for i in 0..code.len() {
            bits.extend_from_slice(code.row(i));
        }
        row0 += CHUNK;
    }
    Ok(DeterministicCode::from_bits(n, width, bits))
}

// ---------------------------------------------------------------------------
// Gradient checks
// ---------------------------------------------------------------------------

/// Dimensions and knobs for the gradient-check harness. Small on purpose:
/// finite differences evaluate the full pipeline twice per coordinate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub code_bits: usize,
    pub batch: usize,
    pub seed: u64,
    pub temperature: f64,
    pub beta: f64,
    /// Corrupt one analytic gradient coordinate; the check must then fail.
    pub inject_fault: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            hidden: 8,
            code_bits: 6,
            batch: 4,
            seed: 0,
            temperature: 0.3,
            beta: 0.001,
            inject_fault: false,
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.code_bits == 0 {
            return Err(Error::InvalidConfig("dims must be >= 1".into()));
        }
        if self.input_dim > 16 || self.hidden > 16 || self.code_bits > 16 {
            return Err(Error::InvalidConfig(
                "gradcheck dims are capped at 16".into(),
            ));
        }
        if !(2..=8).contains(&self.batch) {
            return Err(Error::InvalidConfig(
                "gradcheck batch must be in 2..=8".into(),
            ));
        }
        if !(self.temperature > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidConfig(
                "need temperature > 0 and beta >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Worst observed relative errors for both estimator modes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub soft_max_rel_err: f64,
    pub soft_worst_coord: String,
    pub st_max_rel_err: f64,
    pub st_worst_coord: String,
    pub coords_checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const FD_STEP: f64 = 1e-4;

/// Check the full-pipeline analytic gradient against central finite
/// differences of the matching surrogate objective, in both modes:
///
/// - soft mode: codes are the probabilities themselves;
/// - ST mode: codes are `σ(z) + offset` with the sampled binary offset fixed.
///
/// In both modes each directed KL holds its target distribution at the base
/// point, matching the detached-target gradient.
pub fn gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    cfg.validate()?;
    let loss_cfg = LossConfig {
        temperature: cfg.temperature,
        beta: cfg.beta,
        epsilon: 1e-12,
    };

    // Fixed random inputs and views.
    let mut rng = rng_for(cfg.seed, &[tag::GRADCHECK, 0]);
    let batch = {
        use rand_distr::StandardNormal;
        let data: Vec<f64> = (0..cfg.batch * cfg.input_dim)
            .map(|_| rand::Rng::sample(&mut rng, StandardNormal))
            .collect();
        Matrix::from_vec(cfg.batch, cfg.input_dim, data)
    };
    let view_cfg = ViewConfig {
        mask_prob: 0.1,
        noise_sigma: 0.05,
        scale_range: (0.95, 1.05),
        seed: 0,
    };
    let dim_std = vec![1.0; cfg.input_dim];
    let mut view_rng = rng_for(cfg.seed, &[tag::GRADCHECK, 1]);
    let pair = make_views(
        &batch,
        &view_cfg,
        &dim_std,
        &mut view_rng,
        (0..cfg.batch).collect(),
    );

    let params = init_params(cfg.input_dim, cfg.hidden, cfg.code_bits, cfg.seed);

    // Base-point probabilities, sampled offsets, and frozen KL targets.
    let t1 = forward(&params, &pair.v1)?;
    let t2 = forward(&params, &pair.v2)?;
    let p1 = sigmoid(&t1.logits);
    let p2 = sigmoid(&t2.logits);
    let mut sample_rng = rng_for(cfg.seed, &[tag::GRADCHECK, 2]);
    let code1 = sample_st(&p1, &mut sample_rng);
    let code2 = sample_st(&p2, &mut sample_rng);
    let zero_offset = Matrix::zeros(cfg.batch, cfg.code_bits);
    let offset1 = code1.bits.zip_with(&code1.probs, |b, p| b - p);
    let offset2 = code2.bits.zip_with(&code2.probs, |b, p| b - p);

    // Analytic gradients.
    let soft_grads = {
        let out = cib_loss(p1.p(), p2.p(), &p1, &p2, &loss_cfg)?;
        // Soft mode: the code IS the probability, so both channels flow
        // through the sigmoid.
        let gp1 = out.grad_b1.zip_with(&out.grad_p1, |a, b| a + b);
        let gp2 = out.grad_b2.zip_with(&out.grad_p2, |a, b| a + b);
        let gz1 = sigmoid_backward(&p1, &gp1);
        let gz2 = sigmoid_backward(&p2, &gp2);
        let (mut g, _) = backward(&params, &t1, &gz1);
        let (g2, _) = backward(&params, &t2, &gz2);
        g.add(&g2);
        g
    };
    let st_grads = {
        let out = cib_loss(&code1.bits, &code2.bits, &p1, &p2, &loss_cfg)?;
        let gz1 = st_backward(&code1, &out.grad_b1)
            .zip_with(&sigmoid_backward(&p1, &out.grad_p1), |a, b| a + b);
        let gz2 = st_backward(&code2, &out.grad_b2)
            .zip_with(&sigmoid_backward(&p2, &out.grad_p2), |a, b| a + b);
        let (mut g, _) = backward(&params, &t1, &gz1);
        let (g2, _) = backward(&params, &t2, &gz2);
        g.add(&g2);
        g
    };

    // Surrogate evaluated at perturbed parameters.
    let surrogate = |theta: &EncoderParams, off1: &Matrix, off2: &Matrix| -> Result<f64> {
        let t1 = forward(theta, &pair.v1)?;
        let t2 = forward(theta, &pair.v2)?;
        let q1 = sigmoid(&t1.logits);
        let q2 = sigmoid(&t2.logits);
        let b1 = q1.p().zip_with(off1, |p, o| p + o);
        let b2 = q2.p().zip_with(off2, |p, o| p + o);
        let contrastive = ntxent(&b1, &b2, loss_cfg.temperature, loss_cfg.epsilon)?.loss;
        let (kl1, _) = bernoulli_kl(&q1, &p2); // target frozen at base point
        let (kl2, _) = bernoulli_kl(&q2, &p1);
        let kl_mean =
            (kl1.iter().sum::<f64>() + kl2.iter().sum::<f64>()) / (2.0 * cfg.batch as f64);
        Ok(contrastive + loss_cfg.beta * kl_mean)
    };

    let count = params.param_count();
    let check_mode = |grads: &EncoderGrads,
                          off1: &Matrix,
                          off2: &Matrix,
                          fault: bool|
     -> Result<(f64, String)> {
        let mut worst = 0.0;
        let mut worst_coord = String::from("none");
        for idx in 0..count {
            let base = params.flat_get(idx);
            let mut plus = params.clone();
            plus.flat_set(idx, base + FD_STEP);
            let mut minus = params.clone();
            minus.flat_set(idx, base - FD_STEP);
            let fd = (surrogate(&plus, off1, off2)? - surrogate(&minus, off1, off2)?)
                / (2.0 * FD_STEP);
            let mut an = grads.flat_get(idx);
            if fault && idx == 0 {
                an += 0.5 * (1.0 + an.abs());
            }
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                worst_coord = params.coord_name(idx);
            }
        }
        Ok((worst, worst_coord))
    };

    let (soft_max_rel_err, soft_worst_coord) =
        check_mode(&soft_grads, &zero_offset, &zero_offset, cfg.inject_fault)?;
    let (st_max_rel_err, st_worst_coord) =
        check_mode(&st_grads, &offset1, &offset2, cfg.inject_fault)?;

    Ok(GradCheckReport {
        passed: soft_max_rel_err <= GRADCHECK_TOLERANCE && st_max_rel_err <= GRADCHECK_TOLERANCE,
        soft_max_rel_err,
        soft_worst_coord,
        st_max_rel_err,
        st_worst_coord,
        coords_checked: count,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, LabelSet, SyntheticSpec};

    fn tiny_dataset() -> FeatureDataset {
        generate_synthetic(&SyntheticSpec {
            clusters: 3,
            dim: 8,
            per_cluster: 12,
            separation: 4.0,
            seed: 5,
        })
        .unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            code_bits: 8,
            hidden: 12,
            batch: 6,
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds = tiny_dataset();
        let cfg = tiny_config();
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
        assert_eq!(a.adam.step, b.adam.step);

        let c = train(
            &ds,
            &TrainConfig {
                seed: 4,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn clhash_mode_equals_beta_zero() {
        let ds = tiny_dataset();
        let clhash = TrainConfig {
            mode: Mode::ClHash,
            ..tiny_config()
        };
        let beta_zero = TrainConfig {
            mode: Mode::CibHash,
            loss: LossConfig {
                beta: 0.0,
                ..LossConfig::default()
            },
            ..tiny_config()
        };
        let a = train(&ds, &clhash).unwrap();
        let b = train(&ds, &beta_zero).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
    }

    #[test]
    fn zero_variance_dataset_trains_without_blowup() {
        // All rows identical: nothing distinguishes items, so the loss should
        // hover near the all-equal-similarity value ln(2N-1).
        let rows = vec![vec![0.5, -1.0, 2.0, 0.0]; 24];
        let ds = FeatureDataset::new(Matrix::from_rows(&rows), LabelSet::unlabeled(24)).unwrap();
        let cfg = TrainConfig {
            code_bits: 8,
            hidden: 8,
            batch: 4,
            epochs: 5,
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&ds, &cfg).unwrap();
        let want = (2.0 * 4.0 - 1.0_f64).ln(); // ln 7
        let last = out.report.epoch_losses.last().unwrap();
        assert!(last.total.is_finite());
        assert!(
            (last.total - want).abs() < 0.35,
            "loss {} should sit near ln(2N-1) = {}",
            last.total,
            want
        );
    }

    #[test]
    fn encode_is_batch_size_independent_and_deterministic() {
        let ds = tiny_dataset();
        let out = train(&ds, &tiny_config()).unwrap();
        let batched = encode_dataset(&out.params, ds.features()).unwrap();
        let again = encode_dataset(&out.params, ds.features()).unwrap();
        assert_eq!(batched, again);

        // Row-at-a-time must agree exactly.
        for i in 0..ds.n() {
            let row = ds.features().gather_rows(&[i]);
            let single = encode_dataset(&out.params, &row).unwrap();
            assert_eq!(single.row(0), batched.row(i));
        }
    }

    #[test]
    fn encode_with_zero_params_follows_output_bias() {
        let mut params = EncoderParams::zeros(4, 3, 8);
        params.b2 = vec![1.0, -1.0, 0.0, 2.0, -2.0, 0.5, -0.5, 0.0];
        let features = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let code = encode_dataset(&params, &features).unwrap();
        // bit = 1 iff sigmoid(b2) > 0.5 iff b2 > 0.
        assert_eq!(code.row(0), &[1, 0, 0, 1, 0, 1, 0, 0]);
    }

    #[test]
    fn gradcheck_passes_with_and_without_kl() {
        for beta in [0.0, 0.001, 0.1] {
            let report = gradcheck(&GradCheckConfig {
                beta,
                ..GradCheckConfig::default()
            })
            .unwrap();
            assert!(
                report.passed,
                "beta={}: soft {} ({}), st {} ({})",
                beta,
                report.soft_max_rel_err,
                report.soft_worst_coord,
                report.st_max_rel_err,
                report.st_worst_coord
            );
            assert!(report.coords_checked >= 100);
            // Healthy instances sit far below the tolerance.
            assert!(report.soft_max_rel_err <= 1e-5);
        }
    }

    #[test]
    fn gradcheck_detects_injected_fault() {
        let report = gradcheck(&GradCheckConfig {
            inject_fault: true,
            ..GradCheckConfig::default()
        })
        .unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn config_validation_and_flat_json() {
        let cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        assert!(TrainConfig {
            code_bits: 4,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            loss: LossConfig {
                temperature: 0.0,
                ..LossConfig::default()
            },
            ..cfg.clone()
        }
        .validate()
        .is_err());

        // Flat JSON: nested configs are flattened and partial files work.
        let json = serde_json::to_value(&cfg).unwrap();
        assert!(json.get("temperature").is_some());
        assert!(json.get("mask_prob").is_some());
        assert!(json.get("loss").is_none());
        let parsed: TrainConfig =
            serde_json::from_str(r#"{"code_bits": 32, "beta": 0.01}"#).unwrap();
        assert_eq!(parsed.code_bits, 32);
        assert_eq!(parsed.loss.beta, 0.01);
        assert_eq!(parsed.batch, 64);
    }

    #[test]
    fn train_rejects_small_dataset() {
        let ds = tiny_dataset();
        let cfg = TrainConfig {
            batch: 1000,
            ..tiny_config()
        };
        assert!(matches!(train(&ds, &cfg), Err(Error::InvalidConfig(_))));
    }
}
