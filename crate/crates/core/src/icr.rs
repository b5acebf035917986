//! Intent consistency regularization: two independently masked copies of the
//! projected intents drive two reasoner passes whose user representations are
//! pulled together by an in-batch InfoNCE loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Reduction, Tensor, Var};

/// Two 0/1 keep-masks with i.i.d. Bernoulli(1 − p) entries.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentMaskPair {
    pub first: Tensor,
    pub second: Tensor,
    pub p_mask: f64,
    pub seed: u64,
}

impl IntentMaskPair {
    pub fn sample(shape: &[usize], p_mask: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p_mask) {
            return Err(Error::Config(format!("mask probability {p_mask} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || {
            let mut t = Tensor::zeros(shape.to_vec());
            for v in t.data_mut() {
                *v = if rng.random::<f64>() < p_mask { 0.0 } else { 1.0 };
            }
            t
        };
        let first = draw();
        let second = draw();
        Ok(Self {
            first,
            second,
            p_mask,
            seed,
        })
    }
}

/// `(T_D ⊙ M1, T_D ⊙ M2)`, without rescaling.
pub fn sample_views(g: &mut Graph, intents: Var, p_mask: f64, seed: u64) -> Result<(Var, Var)> {
    let masks = IntentMaskPair::sample(g.shape(intents), p_mask, seed)?;
    apply_views(g, intents, &masks)
}

pub fn apply_views(g: &mut Graph, intents: Var, masks: &IntentMaskPair) -> Result<(Var, Var)> {
    let a = g.apply_mask(intents, &masks.first, 1.0)?;
    let b = g.apply_mask(intents, &masks.second, 1.0)?;
    Ok((a, b))
}

/// `−Σ_u log softmax_v(cos(h1_u, h2_v)/τ)[u]`, one-sided with view 1 as
/// anchors and in-batch negatives.
pub fn infonce(g: &mut Graph, h1: Var, h2: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature {temperature} must be positive")));
    }
    let (b, _) = g.value(h1).dims2()?;
    let sim = g.cosine_similarity(h1, h2)?;
    let logits = g.scale(sim, 1.0 / temperature)?;
    let targets: Vec<usize> = (0..b).collect();
    g.cross_entropy(logits, &targets, &[], Reduction::Sum)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn loop_infonce(h1: &Tensor, h2: &Tensor, tau: f64) -> f64 {
        let b = h1.shape()[0];
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let mut loss = 0.0;
        for u in 0..b {
            let num = (cos(h1.row(u), h2.row(u)) / tau).exp();
            let den: f64 = (0..b).map(|v| (cos(h1.row(u), h2.row(v)) / tau).exp()).sum();
            loss -= (num / den).ln();
        }
        loss
    }

    fn eval(h1: &Tensor, h2: &Tensor, tau: f64) -> Result<f64> {
        let mut g = Graph::new();
        let (a, b) = (g.constant(h1.clone()), g.constant(h2.clone()));
        let l = infonce(&mut g, a, b, tau)?;
        Ok(g.value(l).item())
    }

    #[test]
    fn single_row_loss_is_zero() {
        let h = Tensor::from_rows(&[&[0.3, -1.0, 2.0]]).unwrap();
        assert_eq!(eval(&h, &h, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_b_log_b() {
        let row = [0.5, 1.5, -0.25, 2.0];
        let h = Tensor::from_rows(&[&row, &row, &row, &row, &row]).unwrap();
        let loss = eval(&h, &h, 0.07).unwrap();
        assert!((loss - 5.0 * 5f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn matches_loop_oracle_and_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let h1 = Tensor::randn(vec![4, 6], 1.0, &mut rng);
            let h2 = Tensor::randn(vec![4, 6], 1.0, &mut rng);
            let loss = eval(&h1, &h2, 0.2).unwrap();
            assert!((loss - loop_infonce(&h1, &h2, 0.2)).abs() < 1e-10);
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn large_temperature_tends_to_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let h1 = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let h2 = Tensor::randn(vec![3, 5], 1.0, &mut rng);
        let loss = eval(&h1, &h2, 1e6).unwrap();
        assert!((loss - 3.0 * 3f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn zero_norm_is_a_numeric_error() {
        let h1 = Tensor::from_rows(&[&[0.0, 0.0], &[1.0, 0.0]]).unwrap();
        let h2 = Tensor::from_rows(&[&[1.0, 1.0], &[1.0, 0.0]]).unwrap();
        assert!(matches!(eval(&h1, &h2, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradient_passes_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let inputs = [Tensor::randn(vec![3, 4], 1.0, &mut rng), Tensor::randn(vec![3, 4], 1.0, &mut rng)];
        let err = grad_check(|g, v| infonce(g, v[0], v[1], 0.5), &inputs, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_mask_probability_keeps_everything() {
        let mut g = Graph::new();
        let t = g.constant(Tensor::randn(vec![6, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(1)));
        let (a, b) = sample_views(&mut g, t, 0.0, 3).unwrap();
        assert!(g.value(a).bit_eq(g.value(t)));
        assert!(g.value(b).bit_eq(g.value(t)));
    }

    #[test]
    fn drop_rate_matches_p() {
        let masks = IntentMaskPair::sample(&[1000, 100], 0.3, 77).unwrap();
        for m in [&masks.first, &masks.second] {
            let zeros = m.data().iter().filter(|&&v| v == 0.0).count() as f64 / 1e5;
            assert!((zeros - 0.3).abs() < 0.02, "zero fraction {zeros}");
        }
        assert_ne!(masks.first, masks.second);
    }

    #[test]
    fn seeds_control_the_pair() {
        let a = IntentMaskPair::sample(&[4, 8], 0.5, 1).unwrap();
        assert_eq!(a, IntentMaskPair::sample(&[4, 8], 0.5, 1).unwrap());
        assert_ne!(a, IntentMaskPair::sample(&[4, 8], 0.5, 2).unwrap());
    }

    #[test]
    fn full_masking_is_rejected() {
        assert!(IntentMaskPair::sample(&[2, 2], 1.0, 0).is_err());
    }
}
