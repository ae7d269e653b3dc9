use super::Real;
use crate::error::{Error, Result};

/// Adam with Nesterov momentum.
#[derive(Clone, Debug, PartialEq)]
pub struct NadamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl NadamState {
    pub fn new(n_params: usize) -> Self {
        Self::with_lr(n_params, 1e-4)
    }

    pub fn with_lr(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One update. Parameters are left untouched if any gradient is not finite.
    pub fn step<T: Real>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient at parameter {i} (step {})",
                self.step + 1
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1_next = 1.0 - b1.powi(t + 1);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let g = g.to_f64().expect("finite");
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = b1 * *m / c1_next + (1.0 - b1) * g / c1;
            let v_hat = *v / c2;
            let update = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            *p = T::from_f64(p.to_f64().expect("finite") - update);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = vec![0.3f32, -1.5, 2.0];
        let before = p.clone();
        let mut s = NadamState::new(3);
        s.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn quadratic_decreases() {
        let mut w = [1.0f64];
        let mut s = NadamState::with_lr(1, 1e-2);
        let mut last = w[0] * w[0];
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            s.step(&mut w, &g).unwrap();
            let f = w[0] * w[0];
            assert!(f < last);
            last = f;
        }
    }

    #[test]
    fn default_lr_quadratic_decreases() {
        let mut w = [1.0f64];
        let mut s = NadamState::new(1);
        let mut last = 1.0;
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            s.step(&mut w, &g).unwrap();
            assert!(w[0] * w[0] < last);
            last = w[0] * w[0];
        }
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![1.0f32];
        let mut s = NadamState::new(1);
        assert!(matches!(s.step(&mut p, &[f32::NAN]), Err(Error::Divergence(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic() {
        let run = || {
            let mut p = vec![0.5f32, -0.25];
            let mut s = NadamState::new(2);
            for k in 0..50 {
                let g = [p[0] * 2.0 + k as f32 * 1e-3, p[1].sin()];
                s.step(&mut p, &g).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
