//! Step-exact SGD, AdaDelta and Adam updates on flat parameter vectors.
//!
//! All operations are element-wise over `f64` slices; state vectors live in
//! the stepper structs and must match the parameter length.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("length mismatch: parameters have {params} elements, gradient has {gradient}")]
    LengthMismatch { params: usize, gradient: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
}

fn check_lengths(params: usize, gradient: usize) -> Result<(), OptimError> {
    if params != gradient {
        return Err(OptimError::LengthMismatch { params, gradient });
    }
    Ok(())
}

fn check_positive(name: &str, value: f64) -> Result<(), OptimError> {
    if !(value.is_finite() && value > 0.0) {
        return Err(OptimError::InvalidHyperparameter(format!(
            "{name} must be positive and finite, got {value}"
        )));
    }
    Ok(())
}

fn check_decay(name: &str, value: f64) -> Result<(), OptimError> {
    if !(value.is_finite() && 0.0 < value && value < 1.0) {
        return Err(OptimError::InvalidHyperparameter(format!(
            "{name} must lie in (0, 1), got {value}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

/// Plain stochastic gradient descent with a fixed learning rate.
#[derive(Debug, Clone)]
pub struct SgdState {
    eta: f64,
}

impl SgdState {
    pub fn new(eta: f64) -> Result<Self, OptimError> {
        check_positive("eta", eta)?;
        Ok(SgdState { eta })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// `x <- x - eta * g`.
    pub fn step(&self, x: &mut [f64], g: &[f64]) -> Result<(), OptimError> {
        check_lengths(x.len(), g.len())?;
        for (xi, gi) in x.iter_mut().zip(g) {
            *xi -= self.eta * gi;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// AdaDelta
// ---------------------------------------------------------------------------

/// AdaDelta state: decayed accumulators of squared gradients (`v`) and of
/// squared parameter changes (`s`).
#[derive(Debug, Clone)]
pub struct AdaDeltaState {
    rho: f64,
    epsilon: f64,
    v: Vec<f64>,
    s: Vec<f64>,
}

impl AdaDeltaState {
    pub const DEFAULT_RHO: f64 = 0.95;
    pub const DEFAULT_EPSILON: f64 = 1e-6;

    pub fn new(n: usize, rho: f64, epsilon: f64) -> Result<Self, OptimError> {
        check_decay("rho", rho)?;
        check_positive("epsilon", epsilon)?;
        Ok(AdaDeltaState {
            rho,
            epsilon,
            v: vec![0.0; n],
            s: vec![0.0; n],
        })
    }

    pub fn with_defaults(n: usize) -> Self {
        Self::new(n, Self::DEFAULT_RHO, Self::DEFAULT_EPSILON).expect("defaults are valid")
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    /// One update, element-wise and in this order: the squared-gradient
    /// accumulator is refreshed first, the step is scaled by the
    /// previous-step `s`, and only then is `s` refreshed with the new step.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> Result<(), OptimError> {
        check_lengths(x.len(), g.len())?;
        check_lengths(self.v.len(), g.len())?;
        let rho = self.rho;
        let eps = self.epsilon;
        for i in 0..x.len() {
            self.v[i] = rho * self.v[i] + (1.0 - rho) * g[i] * g[i];
            let dx = -((self.s[i] + eps).sqrt() / (self.v[i] + eps).sqrt()) * g[i];
            self.s[i] = rho * self.s[i] + (1.0 - rho) * dx * dx;
            x[i] += dx;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam state: first and second moment vectors plus the step counter used
/// for bias correction.
///
/// `beta1^t` and `beta2^t` are maintained by repeated multiplication rather
/// than `powi` each step; the difference is below 1e-15 and the running
/// products keep steps cheap and deterministic.
#[derive(Debug, Clone)]
pub struct AdamState {
    alpha: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    beta1_t: f64,
    beta2_t: f64,
}

impl AdamState {
    pub const DEFAULT_ALPHA: f64 = 0.001;
    pub const DEFAULT_BETA1: f64 = 0.9;
    pub const DEFAULT_BETA2: f64 = 0.999;
    pub const DEFAULT_EPSILON: f64 = 1e-8;

    pub fn new(
        n: usize,
        alpha: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    ) -> Result<Self, OptimError> {
        check_positive("alpha", alpha)?;
        check_decay("beta1", beta1)?;
        check_decay("beta2", beta2)?;
        check_positive("epsilon", epsilon)?;
        Ok(AdamState {
            alpha,
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1_t: 1.0,
            beta2_t: 1.0,
        })
    }

    pub fn with_defaults(n: usize) -> Self {
        Self::new(
            n,
            Self::DEFAULT_ALPHA,
            Self::DEFAULT_BETA1,
            Self::DEFAULT_BETA2,
            Self::DEFAULT_EPSILON,
        )
        .expect("defaults are valid")
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn m(&self) -> &[f64] {
        &self.m
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected update:
    /// `x <- x - alpha * m_hat / (sqrt(v_hat) + epsilon)`.
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> Result<(), OptimError> {
        check_lengths(x.len(), g.len())?;
        check_lengths(self.m.len(), g.len())?;
        self.t += 1;
        self.beta1_t *= self.beta1;
        self.beta2_t *= self.beta2;
        let m_corr = 1.0 - self.beta1_t;
        let v_corr = 1.0 - self.beta2_t;
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = self.m[i] / m_corr;
            let v_hat = self.v[i] / v_corr;
            x[i] -= self.alpha * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

/// Hyperparameter bundle from which a stepper is built once the parameter
/// count is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerConfig {
    Sgd {
        eta: f64,
    },
    AdaDelta {
        rho: f64,
        epsilon: f64,
    },
    Adam {
        alpha: f64,
        beta1: f64,
        beta2: f64,
        epsilon: f64,
    },
}

impl OptimizerConfig {
    pub fn adadelta_defaults() -> Self {
        OptimizerConfig::AdaDelta {
            rho: AdaDeltaState::DEFAULT_RHO,
            epsilon: AdaDeltaState::DEFAULT_EPSILON,
        }
    }

    pub fn adam_defaults() -> Self {
        OptimizerConfig::Adam {
            alpha: AdamState::DEFAULT_ALPHA,
            beta1: AdamState::DEFAULT_BETA1,
            beta2: AdamState::DEFAULT_BETA2,
            epsilon: AdamState::DEFAULT_EPSILON,
        }
    }

    pub fn build(&self, n: usize) -> Result<Optimizer, OptimError> {
        Ok(match *self {
            OptimizerConfig::Sgd { eta } => Optimizer::Sgd(SgdState::new(eta)?),
            OptimizerConfig::AdaDelta { rho, epsilon } => {
                Optimizer::AdaDelta(AdaDeltaState::new(n, rho, epsilon)?)
            }
            OptimizerConfig::Adam {
                alpha,
                beta1,
                beta2,
                epsilon,
            } => Optimizer::Adam(AdamState::new(n, alpha, beta1, beta2, epsilon)?),
        })
    }
}

pub enum Optimizer {
    Sgd(SgdState),
    AdaDelta(AdaDeltaState),
    Adam(AdamState),
}

impl Optimizer {
    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> Result<(), OptimError> {
        match self {
            Optimizer::Sgd(s) => s.step(x, g),
            Optimizer::AdaDelta(s) => s.step(x, g),
            Optimizer::Adam(s) => s.step(x, g),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sgd_applies_the_update_rule() {
        let sgd = SgdState::new(0.1).unwrap();
        let mut x = vec![1.0];
        sgd.step(&mut x, &[2.0]).unwrap();
        assert_relative_eq!(x[0], 0.8, max_relative = 1e-15);

        let mut y = vec![3.0, -1.0];
        sgd.step(&mut y, &[0.0, 0.0]).unwrap();
        assert_eq!(y, vec![3.0, -1.0]);
    }

    #[test]
    fn sgd_two_steps_equal_one_double_step() {
        let sgd = SgdState::new(0.05).unwrap();
        let g = [1.5, -2.0];
        let mut a = vec![1.0, 1.0];
        sgd.step(&mut a, &g).unwrap();
        sgd.step(&mut a, &g).unwrap();
        let mut b = vec![1.0, 1.0];
        sgd.step(&mut b, &[3.0, -4.0]).unwrap();
        for (ai, bi) in a.iter().zip(&b) {
            assert_relative_eq!(ai, bi, max_relative = 1e-15);
        }
    }

    #[test]
    fn adadelta_first_step_matches_hand_evaluation() {
        let mut st = AdaDeltaState::with_defaults(1);
        let mut x = vec![0.0];
        st.step(&mut x, &[2.0]).unwrap();

        // Scalar evaluation with rho = 0.95, eps = 1e-6 and g = 2.
        let v: f64 = 0.05 * 4.0;
        let dx = -((0.0f64 + 1e-6).sqrt() / (v + 1e-6).sqrt()) * 2.0;
        let s = 0.05 * dx * dx;
        assert_relative_eq!(st.v()[0], v, max_relative = 1e-12);
        assert_relative_eq!(st.s()[0], s, max_relative = 1e-12);
        assert_relative_eq!(x[0], dx, max_relative = 1e-12);
        // Magnitudes as printed: dx ~ -4.47213e-3, s ~ 1.0e-6.
        assert_relative_eq!(x[0], -4.47213e-3, max_relative = 1e-4);
        assert_relative_eq!(st.s()[0], 1.0e-6, max_relative = 1e-4);
    }

    #[test]
    fn adadelta_zero_gradient_is_a_no_op() {
        let mut st = AdaDeltaState::with_defaults(3);
        let mut x = vec![1.0, -2.0, 0.5];
        st.step(&mut x, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(x, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn adadelta_descends_a_quadratic_monotonically() {
        let mut st = AdaDeltaState::with_defaults(1);
        let mut x = vec![1.0];
        let mut prev = x[0] * x[0];
        for _ in 0..100 {
            let g = [2.0 * x[0]];
            st.step(&mut x, &g).unwrap();
            let f = x[0] * x[0];
            assert!(f < prev, "f did not decrease: {f} >= {prev}");
            prev = f;
        }
    }

    #[test]
    fn adam_first_step_matches_hand_evaluation() {
        let mut st = AdamState::with_defaults(1);
        let mut x = vec![0.0];
        st.step(&mut x, &[2.0]).unwrap();
        // m_hat = 2, v_hat = 4, so x = -0.001 * 2 / (2 + 1e-8).
        let expected = -0.001 * 2.0 / (2.0 + 1e-8);
        assert_relative_eq!(x[0], expected, max_relative = 1e-12);
        assert_relative_eq!(x[0], -9.99999995e-4, max_relative = 1e-9);
        assert_eq!(st.t(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut st = AdamState::with_defaults(2);
        let mut x = vec![0.25, -0.5];
        st.step(&mut x, &[0.0, 0.0]).unwrap();
        assert_eq!(x, vec![0.25, -0.5]);
        assert_eq!(st.t(), 1);
    }

    #[test]
    fn adam_steps_stay_bounded() {
        let mut st = AdamState::with_defaults(4);
        let mut x = vec![0.0; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..1000 {
            let g: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let before = x.clone();
            st.step(&mut x, &g).unwrap();
            for (b, a) in before.iter().zip(&x) {
                assert!((a - b).abs() < 0.01, "step {} too large", (a - b).abs());
            }
        }
    }

    #[test]
    fn steps_reject_length_mismatches() {
        let sgd = SgdState::new(0.1).unwrap();
        let mut x = vec![0.0; 3];
        assert!(matches!(
            sgd.step(&mut x, &[1.0]),
            Err(OptimError::LengthMismatch { .. })
        ));
        let mut ad = AdaDeltaState::with_defaults(3);
        assert!(ad.step(&mut x, &[1.0, 2.0]).is_err());
        let mut am = AdamState::with_defaults(3);
        assert!(am.step(&mut x, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn hyperparameters_are_validated() {
        assert!(SgdState::new(0.0).is_err());
        assert!(SgdState::new(-1.0).is_err());
        assert!(AdaDeltaState::new(2, 1.0, 1e-6).is_err());
        assert!(AdaDeltaState::new(2, 0.95, 0.0).is_err());
        assert!(AdamState::new(2, 0.001, 0.9, 1.0, 1e-8).is_err());
        assert!(AdamState::new(2, -0.001, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn fresh_step_is_scale_invariant_up_to_epsilon() {
        for factor in [0.5, 2.0, 10.0, 1e3] {
            for g0 in [1.0, -2.5, 7.0] {
                let mut a = AdaDeltaState::with_defaults(1);
                let mut xa = vec![0.0];
                a.step(&mut xa, &[g0]).unwrap();
                let mut b = AdaDeltaState::with_defaults(1);
                let mut xb = vec![0.0];
                b.step(&mut xb, &[g0 * factor]).unwrap();
                assert_eq!(xa[0].signum(), xb[0].signum());
                assert_relative_eq!(xb[0] / xa[0], 1.0, max_relative = 1e-3);

                let mut a = AdamState::with_defaults(1);
                let mut xa = vec![0.0];
                a.step(&mut xa, &[g0]).unwrap();
                let mut b = AdamState::with_defaults(1);
                let mut xb = vec![0.0];
                b.step(&mut xb, &[g0 * factor]).unwrap();
                assert_eq!(xa[0].signum(), xb[0].signum());
                assert_relative_eq!(xb[0] / xa[0], 1.0, max_relative = 1e-3);
            }
        }
    }

    #[test]
    fn all_optimizers_reach_the_quadratic_minimum() {
        let n = 5;
        let run = |opt: &mut Optimizer| {
            let mut x = vec![1.0; n];
            for _ in 0..10_000 {
                let g: Vec<f64> = x.iter().map(|xi| 2.0 * xi).collect();
                opt.step(&mut x, &g).unwrap();
                let f: f64 = x.iter().map(|xi| xi * xi).sum();
                if f < 1e-3 {
                    return true;
                }
            }
            false
        };
        assert!(run(
            &mut OptimizerConfig::Sgd { eta: 0.1 }.build(n).unwrap()
        ));
        assert!(run(&mut OptimizerConfig::adadelta_defaults().build(n).unwrap()));
        assert!(run(&mut OptimizerConfig::adam_defaults().build(n).unwrap()));
    }

    #[test]
    fn identical_inputs_give_bit_identical_outputs() {
        let grads: Vec<Vec<f64>> = (0..5)
            .map(|k| (0..3).map(|i| ((k * 3 + i) as f64).sin()).collect())
            .collect();
        let run = |mut opt: Optimizer| {
            let mut x = vec![0.3, -0.7, 1.1];
            for g in &grads {
                opt.step(&mut x, g).unwrap();
            }
            x
        };
        let cfg = OptimizerConfig::adam_defaults();
        assert_eq!(run(cfg.build(3).unwrap()), run(cfg.build(3).unwrap()));
        let cfg = OptimizerConfig::adadelta_defaults();
        assert_eq!(run(cfg.build(3).unwrap()), run(cfg.build(3).unwrap()));
    }

    proptest! {
        // Permuting coordinates commutes with stepping.
        #[test]
        fn steps_are_element_wise(
            xs in proptest::collection::vec(-3.0f64..3.0, 4),
            gs in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let perm = [2usize, 0, 3, 1];
            let apply = |v: &[f64]| -> Vec<f64> { perm.iter().map(|&i| v[i]).collect() };

            for cfg in [
                OptimizerConfig::Sgd { eta: 0.05 },
                OptimizerConfig::adadelta_defaults(),
                OptimizerConfig::adam_defaults(),
            ] {
                let mut direct = xs.clone();
                cfg.build(4).unwrap().step(&mut direct, &gs).unwrap();

                let mut permuted = apply(&xs);
                cfg.build(4).unwrap().step(&mut permuted, &apply(&gs)).unwrap();
                prop_assert_eq!(apply(&direct), permuted);
            }
        }
    }
}
