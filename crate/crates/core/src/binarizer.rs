//! Probabilistic binary code layer: sigmoid head, Bernoulli sampling with
//! straight-through gradients, and the deterministic inference rule.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::matrix::Matrix;

/// Probabilities are clamped into this range so the Bernoulli KL stays
/// finite.
pub const PROB_CLAMP_MIN: f64 = 1e-7;
pub const PROB_CLAMP_MAX: f64 = 1.0 - 1e-7;

/// Per-bit Bernoulli parameters, strictly inside (0, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct CodeProbabilities {
    p: Matrix,
}

impl CodeProbabilities {
    /// Clamp an arbitrary probability matrix into the valid range (test and
    /// oracle convenience).
    pub fn from_matrix_clamped(p: Matrix) -> Self {
        Self {
            p: p.map(|v| v.clamp(PROB_CLAMP_MIN, PROB_CLAMP_MAX)),
        }
    }

    pub fn p(&self) -> &Matrix {
        &self.p
    }

    pub fn rows(&self) -> usize {
        self.p.rows()
    }

    pub fn bits(&self) -> usize {
        self.p.cols()
    }
}

/// Elementwise `1/(1+e^{-z})`, clamped into `[1e-7, 1-1e-7]`.
pub fn sigmoid(logits: &Matrix) -> CodeProbabilities {
    debug_assert!(logits.is_finite(), "non-finite logits");
    CodeProbabilities {
        p: logits.map(|z| (1.0 / (1.0 + (-z).exp())).clamp(PROB_CLAMP_MIN, PROB_CLAMP_MAX)),
    }
}

/// A sampled code batch with the noise and probabilities that produced it,
/// retained for the straight-through backward pass.
#[derive(Debug, Clone)]
pub struct StochasticCode {
    /// Sampled code values in {0, 1}.
    pub bits: Matrix,
    /// The uniform draws, one per bit.
    pub noise: Matrix,
    /// The probabilities the bits were sampled from.
    pub probs: Matrix,
}

/// Sample `bit = 1 iff p >= u` with `u ~ Uniform[0,1)`, the sign-based
/// reparameterization of a Bernoulli draw.
pub fn sample_st(probs: &CodeProbabilities, rng: &mut ChaCha8Rng) -> StochasticCode {
    let p = probs.p();
    let mut noise = Matrix::zeros(p.rows(), p.cols());
    for v in noise.data_mut() {
        *v = rng.gen::<f64>();
    }
    let bits = p.zip_with(&noise, |pv, u| if pv >= u { 1.0 } else { 0.0 });
    StochasticCode {
        bits,
        noise,
        probs: p.clone(),
    }
}

/// Straight-through backward: the binarization passes gradients through as
/// identity, then the sigmoid contributes its own derivative, so
/// `grad_z = grad_bits ⊙ p ⊙ (1-p)`. This is the exact gradient of the
/// surrogate in which the code is written as `σ(z) + stop_gradient(b - σ(z))`.
pub fn st_backward(code: &StochasticCode, grad_bits: &Matrix) -> Matrix {
    grad_bits.zip_with(&code.probs, |g, p| g * p * (1.0 - p))
}

/// Gradient through the sigmoid alone, for loss terms that consume the
/// probabilities directly: `grad_z = grad_p ⊙ p ⊙ (1-p)`.
pub fn sigmoid_backward(probs: &CodeProbabilities, grad_p: &Matrix) -> Matrix {
    grad_p.zip_with(probs.p(), |g, p| g * p * (1.0 - p))
}

/// Deterministic hash codes: one bit per (item, dimension).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeterministicCode {
    n: usize,
    width: usize,
    bits: Vec<u8>,
}

impl DeterministicCode {
    /// Build from explicit 0/1 bits, row-major.
    pub fn from_bits(n: usize, width: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), n * width);
        debug_assert!(bits.iter().all(|&b| b <= 1));
        Self { n, width, bits }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Code length in bits.
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, item: usize, bit: usize) -> bool {
        self.bits[item * self.width + bit] == 1
    }

    pub fn row(&self, item: usize) -> &[u8] {
        &self.bits[item * self.width..(item + 1) * self.width]
    }
}

/// Inference rule: bit = 1 iff p > 0.5. A probability of exactly 0.5 maps
/// to 0.
pub fn binarize_inference(probs: &CodeProbabilities) -> DeterministicCode {
    let p = probs.p();
    let bits = p.data().iter().map(|&v| u8::from(v > 0.5)).collect();
    DeterministicCode::from_bits(p.rows(), p.cols(), bits)
}

/// Soft mode: the code IS the probability. Lets the whole pipeline be
/// finite-difference checked without sampling.
pub fn soft_forward(probs: &CodeProbabilities) -> Matrix {
    probs.p().clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stream::{rng_for, tag};

    #[test]
    fn sigmoid_values() {
        let z = Matrix::from_rows(&[vec![0.0, 2.0, 100.0, -100.0]]);
        let p = sigmoid(&z);
        assert_eq!(p.p().get(0, 0), 0.5);
        assert!((p.p().get(0, 1) - 0.880797).abs() < 1e-6);
        assert_eq!(p.p().get(0, 2), PROB_CLAMP_MAX);
        assert_eq!(p.p().get(0, 3), PROB_CLAMP_MIN);
    }

    #[test]
    fn sampling_respects_probabilities() {
        let rows = 1000;
        let cols = 1000; // 10^6 draws
        let p03 = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(
            rows,
            cols,
            vec![0.3; rows * cols],
        ));
        let mut rng = rng_for(5, &[tag::SAMPLE]);
        let code = sample_st(&p03, &mut rng);
        let mean = code.bits.data().iter().sum::<f64>() / (rows * cols) as f64;
        assert!(
            (0.2985..=0.3015).contains(&mean),
            "empirical mean {} outside binomial interval",
            mean
        );

        // Near-certain probability fires essentially always.
        let p_hi = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(
            rows,
            cols,
            vec![1.0; rows * cols],
        ));
        let code_hi = sample_st(&p_hi, &mut rng);
        let ones = code_hi.bits.data().iter().filter(|&&b| b == 1.0).count();
        assert!(ones as f64 / (rows * cols) as f64 >= 1.0 - 1e-6);
    }

    #[test]
    fn sampling_is_deterministic_given_stream() {
        let p = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(
            4,
            8,
            (0..32).map(|i| i as f64 / 32.0).collect(),
        ));
        let a = sample_st(&p, &mut rng_for(3, &[tag::SAMPLE, 1]));
        let b = sample_st(&p, &mut rng_for(3, &[tag::SAMPLE, 1]));
        assert_eq!(a.bits, b.bits);
        assert_eq!(a.noise, b.noise);
    }

    #[test]
    fn st_backward_is_sigmoid_derivative() {
        let p = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(1, 2, vec![0.5, 0.5]));
        let code = sample_st(&p, &mut rng_for(1, &[tag::SAMPLE]));
        let grad = st_backward(&code, &Matrix::from_vec(1, 2, vec![1.0, -2.0]));
        assert_eq!(grad.get(0, 0), 0.25);
        assert_eq!(grad.get(0, 1), -0.5);

        let zero = st_backward(&code, &Matrix::zeros(1, 2));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn st_backward_matches_surrogate_finite_differences() {
        // Surrogate: f(z) = sum(G ⊙ (σ(z) + offset)) with offset = b - σ(z)
        // held fixed; the ST gradient must equal df/dz exactly.
        let mut rng = rng_for(17, &[tag::GRADCHECK]);
        let z = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect());
        let g = Matrix::from_vec(3, 4, (0..12).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect());
        let p = sigmoid(&z);
        let code = sample_st(&p, &mut rng_for(18, &[tag::SAMPLE]));
        let offset = code.bits.zip_with(&code.probs, |b, pv| b - pv);

        let analytic = st_backward(&code, &g);
        let f = |z: &Matrix| -> f64 {
            let p = sigmoid(z);
            p.p()
                .data()
                .iter()
                .zip(offset.data())
                .zip(g.data())
                .map(|((&pv, &o), &gv)| (pv + o) * gv)
                .sum()
        };
        let h = 1e-4;
        for r in 0..3 {
            for c in 0..4 {
                let mut plus = z.clone();
                plus.set(r, c, plus.get(r, c) + h);
                let mut minus = z.clone();
                minus.set(r, c, minus.get(r, c) - h);
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let an = analytic.get(r, c);
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "[{},{}]: analytic {} fd {}", r, c, an, fd);
            }
        }
    }

    #[test]
    fn inference_binarization_rules() {
        let p = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(
            1,
            3,
            vec![0.2, 0.5, 0.9],
        ));
        let code = binarize_inference(&p);
        assert_eq!(code.row(0), &[0, 0, 1]);
        assert!(!code.get(0, 1), "exact 0.5 maps to 0");
    }

    #[test]
    fn inference_bits_only_depend_on_logit_sign() {
        // p > 0.5 iff z > 0, so any strictly increasing sign-preserving
        // reparameterization of the logits leaves the codes unchanged.
        let z = Matrix::from_rows(&[vec![-2.0, -0.1, 0.0, 0.1, 3.0]]);
        let base = binarize_inference(&sigmoid(&z));
        for f in [|v: f64| 3.0 * v, |v: f64| v.powi(3), |v: f64| 0.01 * v] {
            let reparam = binarize_inference(&sigmoid(&z.map(f)));
            assert_eq!(reparam, base);
        }
        assert_eq!(base.row(0), &[0, 0, 0, 1, 1]);
    }

    #[test]
    fn soft_forward_is_identity_and_consistent() {
        let p = CodeProbabilities::from_matrix_clamped(Matrix::from_vec(
            2,
            2,
            vec![0.1, 0.6, 0.5, 0.7],
        ));
        let soft = soft_forward(&p);
        assert_eq!(&soft, p.p());
        let via_soft = binarize_inference(&CodeProbabilities::from_matrix_clamped(soft));
        assert_eq!(via_soft, binarize_inference(&p));
    }
}
