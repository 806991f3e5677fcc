//! Non-learned and ablation baselines: threshold binarization of continuous
//! representations, the contrastive-then-threshold pipeline, and
//! random-hyperplane hashing.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::binarizer::DeterministicCode;
use crate::dataio::FeatureDataset;
use crate::encoder::{
    adam_step, backward, forward, init_params, AdamConfig, AdamState, EncoderParams,
};
use crate::error::{Error, Result};
use crate::loss::ntxent;
use crate::matrix::{add_row_broadcast, matmul, matmul_a_bt, matmul_at_b, Matrix};
use crate::stream::{rng_for, tag};
use crate::trainer::{EpochLoss, TrainConfig, TrainReport};
use crate::views::make_views;

/// Per-dimension binarization thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdSpec {
    thresholds: Vec<f64>,
}

impl ThresholdSpec {
    /// Threshold every dimension at zero.
    pub fn zero(width: usize) -> Self {
        Self {
            thresholds: vec![0.0; width],
        }
    }

    /// Fit per-dimension thresholds as the lower median of each column of
    /// `reprs` (the designated training split).
    pub fn median(reprs: &Matrix) -> Self {
        let n = reprs.rows();
        let mut thresholds = Vec::with_capacity(reprs.cols());
        for c in 0..reprs.cols() {
            let mut column: Vec<f64> = (0..n).map(|r| reprs.get(r, c)).collect();
            column.sort_unstable_by(f64::total_cmp);
            thresholds.push(column[(n - 1) / 2]);
        }
        Self { thresholds }
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }
}

/// Bit = 1 iff the representation value is >= the dimension threshold.
pub fn threshold_binarize(reprs: &Matrix, spec: &ThresholdSpec) -> DeterministicCode {
    assert_eq!(reprs.cols(), spec.thresholds.len(), "threshold width mismatch");
    let mut bits = Vec::with_capacity(reprs.rows() * reprs.cols());
    for r in 0..reprs.rows() {
        for (v, t) in reprs.row(r).iter().zip(&spec.thresholds) {
            bits.push(u8::from(v >= t));
        }
    }
    DeterministicCode::from_bits(reprs.rows(), reprs.cols(), bits)
}

/// Linear projection head used only by the contrastive baseline's loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ProjectionHead {
    fn init(width: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[tag::HEAD_INIT]);
        let limit = (6.0 / (width + width) as f64).sqrt();
        let data = (0..width * width)
            .map(|_| rng.gen::<f64>() * 2.0 * limit - limit)
            .collect();
        Self {
            w: Matrix::from_vec(width, width, data),
            b: vec![0.0; width],
        }
    }

    fn forward(&self, z: &Matrix) -> Matrix {
        add_row_broadcast(&matmul(z, &self.w), &self.b)
    }

    /// Returns (grad_w, grad_b, grad_input).
    fn backward(&self, z: &Matrix, grad_h: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let gw = matmul_at_b(z, grad_h);
        let gb = grad_h.col_sums();
        let gz = matmul_a_bt(grad_h, &self.w);
        (gw, gb, gz)
    }
}

/// Everything the contrastive-then-threshold baseline produces.
#[derive(Debug, Clone)]
pub struct NaiveClOutcome {
    pub codes: DeterministicCode,
    pub params: EncoderParams,
    pub head: ProjectionHead,
    pub thresholds: ThresholdSpec,
    pub report: TrainReport,
}

/// The classic two-stage recipe: train encoder + linear projection head with
/// the contrastive loss on continuous representations, then binarize the
/// encoder outputs at their per-dimension medians.
pub fn naive_cl(dataset: &FeatureDataset, cfg: &TrainConfig) -> Result<NaiveClOutcome> {
    cfg.validate()?;
    let n = dataset.n();
    if n < cfg.batch {
        return Err(Error::InvalidConfig(format!(
            "dataset has {} items, batch size {} needs at least that many",
            n, cfg.batch
        )));
    }
    let start = std::time::Instant::now();
    let dim_std = dataset.dim_std();

    let mut params = init_params(dataset.dim(), cfg.hidden, cfg.code_bits, cfg.seed);
    let mut head = ProjectionHead::init(cfg.code_bits, cfg.seed);
    let mut adam = AdamState::new(&params);
    let mut head_m = (Matrix::zeros(cfg.code_bits, cfg.code_bits), vec![0.0; cfg.code_bits]);
    let mut head_v = head_m.clone();
    let adam_cfg = AdamConfig::with_lr(cfg.lr);

    let steps_per_epoch = n / cfg.batch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        {
            let mut rng = rng_for(cfg.seed, &[tag::SHUFFLE, tag::HEAD_INIT, epoch as u64]);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
        }
        let mut total = 0.0;
        for step in 0..steps_per_epoch {
            let indices = &order[step * cfg.batch..(step + 1) * cfg.batch];
            let batch = dataset.features().gather_rows(indices);
            let mut view_rng = rng_for(
                cfg.seed,
                &[tag::VIEWS, tag::HEAD_INIT, cfg.views.seed, epoch as u64, step as u64],
            );
            let pair = make_views(&batch, &cfg.views, &dim_std, &mut view_rng, indices.to_vec());

            let trace1 = forward(&params, &pair.v1)?;
            let trace2 = forward(&params, &pair.v2)?;
            let h1 = head.forward(&trace1.logits);
            let h2 = head.forward(&trace2.logits);

            let out = ntxent(&h1, &h2, cfg.loss.temperature, cfg.loss.epsilon)?;
            if !out.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    contrastive: out.loss,
                    kl: 0.0,
                });
            }
            total += out.loss;

            let (gw1, gb1, gz1) = head.backward(&trace1.logits, &out.grad_b1);
            let (gw2, gb2, gz2) = head.backward(&trace2.logits, &out.grad_b2);
            let (mut grads, _) = backward(&params, &trace1, &gz1);
            let (grads2, _) = backward(&params, &trace2, &gz2);
            grads.add(&grads2);
            adam_step(&mut params, &grads, &mut adam, &adam_cfg);

            // Head update shares the encoder's step counter.
            let gw = gw1.zip_with(&gw2, |a, b| a + b);
            let gb: Vec<f64> = gb1.iter().zip(&gb2).map(|(a, b)| a + b).collect();
            crate::encoder::adam_update_block(
                head.w.data_mut(),
                gw.data(),
                head_m.0.data_mut(),
                head_v.0.data_mut(),
                adam.step,
                &adam_cfg,
            );
            crate::encoder::adam_update_block(
                &mut head.b,
                &gb,
                &mut head_m.1,
                &mut head_v.1,
                adam.step,
                &adam_cfg,
            );
        }
        let mean = total / steps_per_epoch as f64;
        epoch_losses.push(EpochLoss {
            contrastive: mean,
            kl: 0.0,
            total: mean,
        });
    }

    // Representations of the original items (no views), median thresholds on
    // the training split, then binarize.
    let reprs = forward(&params, dataset.features())?.logits;
    let thresholds = ThresholdSpec::median(&reprs);
    let codes = threshold_binarize(&reprs, &thresholds);

    Ok(NaiveClOutcome {
        codes,
        params,
        head,
        thresholds,
        report: TrainReport {
            epoch_losses,
            wall_time_ms: start.elapsed().as_millis() as u64,
            checkpoint: None,
        },
    })
}

/// Random-hyperplane hashing: center the features at their mean, then
/// bit_j = 1 iff `(x - mean)·w_j >= 0` for `bits` Gaussian hyperplanes.
pub fn lsh(features: &Matrix, bits: usize, seed: u64) -> DeterministicCode {
    assert!(features.cols() >= 1);
    assert!(bits >= 1);
    let (n, d) = (features.rows(), features.cols());

    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(features.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }

    let mut rng = rng_for(seed, &[tag::LSH]);
    let planes: Vec<Vec<f64>> = (0..bits)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut out = Vec::with_capacity(n * bits);
    for r in 0..n {
        let row = features.row(r);
        for plane in &planes {
            let mut proj = 0.0;
            for ((&x, &m), &w) in row.iter().zip(&mean).zip(plane) {
                proj += (x - m) * w;
            }
            out.push(u8::from(proj >= 0.0));
        }
    }
    DeterministicCode::from_bits(n, bits, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_synthetic, SyntheticSpec};
    use crate::retrieval::{map_at_n, PackedCodes, Relevance};
    use crate::trainer::TrainConfig;

    #[test]
    fn zero_threshold_example() {
        let reprs = Matrix::from_rows(&[vec![-1.0, 2.0]]);
        let code = threshold_binarize(&reprs, &ThresholdSpec::zero(2));
        assert_eq!(code.row(0), &[0, 1]);
    }

    #[test]
    fn median_is_lower_median_for_even_counts() {
        let reprs = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let spec = ThresholdSpec::median(&reprs);
        assert_eq!(spec.thresholds(), &[2.0]);
        let code = threshold_binarize(&reprs, &spec);
        let bits: Vec<u8> = (0..4).map(|i| code.row(i)[0]).collect();
        assert_eq!(bits, vec![0, 1, 1, 1]);
    }

    #[test]
    fn constant_column_binarizes_to_ones() {
        let reprs = Matrix::from_rows(&[vec![0.7], vec![0.7], vec![0.7]]);
        let spec = ThresholdSpec::median(&reprs);
        let code = threshold_binarize(&reprs, &spec);
        for i in 0..3 {
            assert_eq!(code.row(i), &[1]);
        }
    }

    #[test]
    fn median_balance_within_one_item() {
        // On the fitting split, each dimension splits at most one item away
        // from balance (ties at the median all go to 1).
        let mut rng = rng_for(3, &[50]);
        let reprs = Matrix::from_vec(
            101,
            7,
            (0..101 * 7).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect(),
        );
        let spec = ThresholdSpec::median(&reprs);
        let code = threshold_binarize(&reprs, &spec);
        for c in 0..7 {
            let ones: usize = (0..101).filter(|&r| code.get(r, c)).count();
            // Lower median of 101 distinct values leaves 51 at-or-above.
            assert_eq!(ones, 51);
        }
    }

    #[test]
    fn lsh_is_deterministic_and_scale_invariant() {
        let ds = generate_synthetic(&SyntheticSpec {
            clusters: 3,
            dim: 16,
            per_cluster: 10,
            separation: 4.0,
            seed: 9,
        })
        .unwrap();
        let a = lsh(ds.features(), 12, 1);
        let b = lsh(ds.features(), 12, 1);
        assert_eq!(a, b);
        assert_ne!(a, lsh(ds.features(), 12, 2));
        assert_eq!(a.width(), 12);

        // Positive scaling about the mean keeps every code.
        let mut mean = vec![0.0; ds.dim()];
        for r in 0..ds.n() {
            for (m, &v) in mean.iter_mut().zip(ds.features().row(r)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= ds.n() as f64;
        }
        let mut scaled = ds.features().clone();
        for r in 0..scaled.rows() {
            for (v, &m) in scaled.row_mut(r).iter_mut().zip(&mean) {
                *v = m + 3.0 * (*v - m);
            }
        }
        // Scaling preserves the mean, so hyperplane signs are unchanged.
        let c = lsh(&scaled, 12, 1);
        assert_eq!(a, c);
    }

    #[test]
    fn lsh_beats_random_floor_on_separated_clusters() {
        let ds = generate_synthetic(&SyntheticSpec {
            clusters: 5,
            dim: 32,
            per_cluster: 60,
            separation: 6.0,
            seed: 21,
        })
        .unwrap();
        let codes = PackedCodes::pack(&lsh(ds.features(), 16, 3));
        let map = map_at_n(&codes, &codes, ds.labels(), ds.labels(), 30, Relevance::Single)
            .unwrap();
        // Random codes would sit near 1/clusters = 0.2.
        assert!(map > 0.25, "LSH MAP {} not above the random floor", map);
    }

    #[test]
    fn naive_cl_shape_and_determinism() {
        let ds = generate_synthetic(&SyntheticSpec {
            clusters: 3,
            dim: 8,
            per_cluster: 12,
            separation: 4.0,
            seed: 5,
        })
        .unwrap();
        let cfg = TrainConfig {
            code_bits: 8,
            hidden: 12,
            batch: 6,
            epochs: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let a = naive_cl(&ds, &cfg).unwrap();
        let b = naive_cl(&ds, &cfg).unwrap();
        assert_eq!(a.codes, b.codes);
        assert_eq!(a.params, b.params);
        assert_eq!(a.codes.width(), 8);
        assert_eq!(a.codes.len(), ds.n());
        assert_eq!(a.report.epoch_losses.len(), 2);
        // Median binarization: roughly half the bits set per dimension.
        for c in 0..8 {
            let ones = (0..ds.n()).filter(|&r| a.codes.get(r, c)).count();
            assert_eq!(ones, ds.n() / 2 + 1, "dimension {} off balance", c);
        }
    }
}
