//! FGSM sample generation and perturbation-level sampling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor};
use crate::losses::{cce_loss, one_hot};
use crate::nn::Model;

/// Perturbation-level set and input clipping range for FGSM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialConfig {
    /// Candidate epsilon values, sorted ascending.
    pub epsilon_set: Vec<f64>,
    pub clip_min: f64,
    pub clip_max: f64,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            epsilon_set: (0..10).map(|i| i as f64 * 0.05).collect(),
            clip_min: 0.0,
            clip_max: 1.0,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon_set.is_empty() {
            return Err(Error::Config("epsilon set must be non-empty".into()));
        }
        if self.epsilon_set.iter().any(|&e| !(e.is_finite() && e >= 0.0)) {
            return Err(Error::Config("epsilon values must be finite and >= 0".into()));
        }
        if self.epsilon_set.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("epsilon set must be sorted ascending".into()));
        }
        if !(self.clip_min < self.clip_max) {
            return Err(Error::Config(format!(
                "clip_min {} must be < clip_max {}",
                self.clip_min, self.clip_max
            )));
        }
        Ok(())
    }
}

/// Draw one epsilon uniformly from the configured set.
pub fn sample_epsilon(cfg: &AdversarialConfig, rng: &mut ChaCha8Rng) -> f64 {
    let idx = rng.random_range(0..cfg.epsilon_set.len());
    cfg.epsilon_set[idx]
}

/// `sign` with sign(0) = 0, so flat loss directions stay unperturbed.
fn sign_zero(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One-step adversarial examples:
/// `clip(x + eps * sign(d L_CCE / d x), clip_min, clip_max)`.
///
/// The gradient is taken in eval mode (no dropout) against the plain
/// cross-entropy; model parameters are read-only here and no gradient
/// state is left behind.
pub fn fgsm_generate(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    epsilon: f64,
    cfg: &AdversarialConfig,
) -> Result<Tensor> {
    cfg.validate()?;
    if epsilon < 0.0 {
        return Err(Error::Contract(format!("epsilon must be >= 0, got {epsilon}")));
    }
    if inputs.shape()[0] != labels.len() {
        return Err(Error::Contract(format!(
            "{} input rows but {} labels",
            inputs.shape()[0],
            labels.len()
        )));
    }
    if epsilon == 0.0 {
        return Ok(inputs.clone());
    }

    let mut tape = Tape::new();
    let param_nodes = model.lease_params(&mut tape, false);
    let mut x = inputs.clone();
    x.requires_grad = true;
    let input_node = tape.leaf(&x);
    let logits = model.forward_from(&mut tape, input_node, &param_nodes, false, None)?;
    let probs = tape.softmax_rows(logits)?;
    let onehot = one_hot(labels, model.num_classes())?;
    let loss = cce_loss(&mut tape, probs, &onehot)?;
    tape.backward(loss)?;
    let g = tape.grad(input_node).expect("input requires grad");

    let data: Vec<f64> = inputs
        .data()
        .iter()
        .zip(g)
        .map(|(&v, &gv)| (v + epsilon * sign_zero(gv)).clamp(cfg.clip_min, cfg.clip_max))
        .collect();
    Tensor::new(inputs.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{LayerSpec, Model};
    use crate::rng::{stream_rng, STREAM_EPSILON, STREAM_INIT};

    fn linear_model(seed: u64) -> Model {
        let mut rng = stream_rng(seed, STREAM_INIT);
        Model::new(vec![2], vec![LayerSpec::Dense { units: 2 }], 2, &mut rng).unwrap()
    }

    #[test]
    fn singleton_epsilon_set_always_returns_it() {
        let cfg = AdversarialConfig {
            epsilon_set: vec![0.1],
            ..Default::default()
        };
        let mut rng = stream_rng(1, STREAM_EPSILON);
        for _ in 0..20 {
            assert_eq!(sample_epsilon(&cfg, &mut rng), 0.1);
        }
    }

    #[test]
    fn epsilon_draws_are_roughly_uniform() {
        let cfg = AdversarialConfig::default();
        let mut rng = stream_rng(2, STREAM_EPSILON);
        let mut counts = vec![0usize; cfg.epsilon_set.len()];
        let draws = 100_000;
        for _ in 0..draws {
            let e = sample_epsilon(&cfg, &mut rng);
            let idx = cfg.epsilon_set.iter().position(|&x| x == e).unwrap();
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn epsilon_sequence_is_deterministic_per_seed() {
        let cfg = AdversarialConfig::default();
        let seq = |seed: u64| {
            let mut rng = stream_rng(seed, STREAM_EPSILON);
            (0..32).map(|_| sample_epsilon(&cfg, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(seq(7), seq(7));
        assert_ne!(seq(7), seq(8));
    }

    #[test]
    fn config_validation_catches_bad_sets() {
        let mut cfg = AdversarialConfig::default();
        cfg.epsilon_set = vec![];
        assert!(cfg.validate().is_err());
        cfg.epsilon_set = vec![0.2, 0.1];
        assert!(cfg.validate().is_err());
        cfg.epsilon_set = vec![-0.1];
        assert!(cfg.validate().is_err());
        cfg = AdversarialConfig { clip_min: 1.0, clip_max: 0.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn epsilon_zero_returns_inputs_unchanged() {
        let model = linear_model(3);
        let x = Tensor::new(vec![2, 2], vec![0.2, 0.8, 0.5, 0.5]).unwrap();
        let adv = fgsm_generate(&model, &x, &[0, 1], 0.0, &AdversarialConfig::default()).unwrap();
        assert_eq!(adv.data(), x.data());
    }

    #[test]
    fn perturbation_bounded_by_epsilon_and_clipped() {
        let model = linear_model(4);
        let x = Tensor::new(vec![3, 2], vec![0.0, 0.98, 0.5, 0.5, 1.0, 0.02]).unwrap();
        let eps = 0.25;
        let cfg = AdversarialConfig::default();
        let adv = fgsm_generate(&model, &x, &[0, 1, 0], eps, &cfg).unwrap();
        for (a, b) in adv.data().iter().zip(x.data()) {
            assert!((a - b).abs() <= eps + 1e-15);
            assert!(*a >= cfg.clip_min && *a <= cfg.clip_max);
        }
    }

    #[test]
    fn repeated_generation_is_bitwise_identical() {
        let model = linear_model(5);
        let x = Tensor::new(vec![2, 2], vec![0.3, 0.7, 0.6, 0.1]).unwrap();
        let cfg = AdversarialConfig::default();
        let a = fgsm_generate(&model, &x, &[1, 0], 0.2, &cfg).unwrap();
        let b = fgsm_generate(&model, &x, &[1, 0], 0.2, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn fgsm_leaves_model_parameters_untouched() {
        let model = linear_model(6);
        let before = model.flat_params();
        let x = Tensor::new(vec![1, 2], vec![0.4, 0.6]).unwrap();
        let _ = fgsm_generate(&model, &x, &[0], 0.3, &AdversarialConfig::default()).unwrap();
        assert_eq!(model.flat_params(), before);
        assert!(model.params().iter().all(|p| p.grad.is_none()));
    }

    #[test]
    fn ascent_property_on_linear_softmax_model() {
        // For a linear model the first-order FGSM step is exact: the CCE of
        // the adversarial batch can only be >= the clean CCE when no clip
        // binds.
        let model = linear_model(7);
        let cfg = AdversarialConfig {
            clip_min: -100.0,
            clip_max: 100.0,
            ..Default::default()
        };
        let x = Tensor::new(vec![4, 2], vec![0.3, 0.7, 0.2, 0.9, 0.8, 0.4, 0.5, 0.5]).unwrap();
        let labels = [0, 1, 1, 0];

        let cce_of = |inputs: &Tensor| {
            let mut tape = Tape::new();
            let (logits, _) = model.forward(&mut tape, inputs, None).unwrap();
            let probs = tape.softmax_rows(logits).unwrap();
            let onehot = one_hot(&labels, 2).unwrap();
            let l = cce_loss(&mut tape, probs, &onehot).unwrap();
            tape.value(l)[0]
        };

        for eps in [0.05, 0.1, 0.3] {
            let adv = fgsm_generate(&model, &x, &labels, eps, &cfg).unwrap();
            assert!(
                cce_of(&adv) >= cce_of(&x) - 1e-12,
                "eps {eps}: adversarial CCE should not decrease"
            );
        }
    }
}
