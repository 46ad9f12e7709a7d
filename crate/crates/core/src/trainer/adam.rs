use thiserror::Error;

use crate::real::Real;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdamError {
    #[error("non-finite gradient at index {index}")]
    NonFinite { index: usize },
    #[error("shape mismatch: {params} parameters, {grads} gradients, {state} moments")]
    ShapeMismatch {
        params: usize,
        grads: usize,
        state: usize,
    },
}

/// First/second moment accumulators for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub m: Vec<R>,
    pub v: Vec<R>,
    pub step: u64,
}

impl<R: Real> AdamState<R> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![R::zero(); len],
            v: vec![R::zero(); len],
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Parameters are left untouched when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [R], grads: &[R], lr: f64) -> Result<(), AdamError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(AdamError::ShapeMismatch {
                params: params.len(),
                grads: grads.len(),
                state: self.m.len(),
            });
        }
        if let Some(index) = grads.iter().position(|g| !g.is_finite()) {
            return Err(AdamError::NonFinite { index });
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = R::of(BETA1);
        let b2 = R::of(BETA2);
        let one = R::one();
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        // lr·√bc2/bc1 folded into one step size, epsilon scaled to match the
        // textbook form m̂/(√v̂ + ε).
        let step_size = R::of(lr * bc2.sqrt() / bc1);
        let eps = R::of(EPSILON * bc2.sqrt());
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            *p -= step_size * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}

/// Learning rate after `batch` updates: `lr₀·2^(−⌊batch/every⌋)`.
pub fn step_decay(lr0: f64, batch: u64, every: u64, factor: f64) -> f64 {
    if every == 0 {
        return lr0;
    }
    lr0 * factor.powi(-((batch / every) as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [1e-3f64, 0.5, -7.0] {
            let mut p = vec![1.0f64];
            let mut s = AdamState::new(1);
            s.step(&mut p, &[g], 0.01).unwrap();
            let d = (p[0] - 1.0).abs();
            assert!((0.99 * 0.01..=0.01).contains(&d), "{d}");
            assert_eq!((p[0] - 1.0).signum(), -g.signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = vec![0.25f32, -3.0];
        let mut s = AdamState::new(2);
        s.step(&mut p, &[0.0, 0.0], 0.1).unwrap();
        assert_eq!(p, vec![0.25, -3.0]);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut w = vec![1.0f64];
        let mut s = AdamState::new(1);
        for _ in 0..100 {
            let g = 2.0 * w[0];
            s.step(&mut w, &[g], 0.1).unwrap();
        }
        assert!(w[0].abs() < 0.05, "{}", w[0]);
    }

    #[test]
    fn nan_gradient_is_rejected() {
        let mut p = vec![1.0f32];
        let mut s = AdamState::new(1);
        assert_eq!(
            s.step(&mut p, &[f32::NAN], 0.1),
            Err(AdamError::NonFinite { index: 0 })
        );
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn schedule_halves_every_interval() {
        assert_eq!(step_decay(1e-4, 0, 40_000, 2.0), 1e-4);
        assert_eq!(step_decay(1e-4, 39_999, 40_000, 2.0), 1e-4);
        assert_eq!(step_decay(1e-4, 40_000, 40_000, 2.0), 5e-5);
        assert_eq!(step_decay(1e-4, 120_000, 40_000, 2.0), 1.25e-5);
    }
}
