//! Stochastic gradient descent with heavy-ball momentum and L2 weight decay,
//! using the update `v ← m·v + (g + λθ)`, `θ ← θ − η·v`.

use serde::{Deserialize, Serialize};

use crate::error::{AirError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(len: usize, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: vec![0.0; len],
        }
    }

    pub fn velocity(&self) -> &[f64] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<f64>) -> Result<()> {
        if velocity.len() != self.velocity.len() {
            return Err(AirError::Shape {
                expected: vec![self.velocity.len()],
                actual: vec![velocity.len()],
            });
        }
        self.velocity = velocity;
        Ok(())
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return Err(AirError::Shape {
                expected: vec![self.velocity.len()],
                actual: vec![params.len(), grads.len()],
            });
        }
        for ((p, &g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            *v = self.momentum * *v + g + self.weight_decay * *p;
            *p -= lr * *v;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_steps_by_hand() {
        let mut opt = Sgd::new(1, 0.9, 0.1);
        let mut p = [1.0];
        opt.step(&mut p, &[0.5], 0.1).unwrap();
        // v = 0.5 + 0.1 = 0.6, p = 1 - 0.06
        assert!((p[0] - 0.94).abs() < 1e-15);
        opt.step(&mut p, &[0.5], 0.1).unwrap();
        // v = 0.54 + 0.5 + 0.094 = 1.134, p = 0.94 - 0.1134
        assert!((p[0] - 0.8266).abs() < 1e-12);
        assert!(opt.step(&mut p, &[0.5, 1.0], 0.1).is_err());
    }
}
