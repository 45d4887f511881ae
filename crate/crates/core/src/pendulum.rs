//! Damped point-mass double pendulum, state `[th1, th2, w1, w2]` with angles
//! measured from the downward vertical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PendulumParams {
    pub m1: f64,
    pub m2: f64,
    pub l1: f64,
    pub l2: f64,
    pub g_acc: f64,
    pub b1: f64,
    pub b2: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self { m1: 1.0, m2: 1.0, l1: 1.0, l2: 1.0, g_acc: 9.81, b1: 0.5, b2: 0.5 }
    }
}

impl PendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.m1, self.m2, self.l1, self.l2, self.g_acc, self.b1, self.b2];
        if all.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::config(format!("pendulum parameters must be positive: {self:?}")))
        }
    }

    /// `[w1, w2, a1, a2]`.
    pub fn field(&self, x: &[f64]) -> [f64; 4] {
        let [th1, th2, w1, w2] = [x[0], x[1], x[2], x[3]];
        let Self { m1, m2, l1, l2, g_acc: g, b1, b2 } = *self;
        let (s, c) = (th1 - th2).sin_cos();
        let m11 = (m1 + m2) * l1 * l1;
        let m12 = m2 * l1 * l2 * c;
        let m22 = m2 * l2 * l2;
        let r1 = -m2 * l1 * l2 * s * w2 * w2 - (m1 + m2) * g * l1 * th1.sin() - b1 * w1;
        let r2 = m2 * l1 * l2 * s * w1 * w1 - m2 * g * l2 * th2.sin() - b2 * w2;
        let det = m11 * m22 - m12 * m12;
        assert!(det > 0.0, "singular pendulum mass matrix");
        let a1 = (m22 * r1 - m12 * r2) / det;
        let a2 = (m11 * r2 - m12 * r1) / det;
        [w1, w2, a1, a2]
    }

    /// Kinetic plus potential energy, zero at the origin.
    pub fn energy(&self, x: &[f64]) -> f64 {
        let [th1, th2, w1, w2] = [x[0], x[1], x[2], x[3]];
        let Self { m1, m2, l1, l2, g_acc: g, .. } = *self;
        0.5 * (m1 + m2) * l1 * l1 * w1 * w1
            + 0.5 * m2 * l2 * l2 * w2 * w2
            + m2 * l1 * l2 * (th1 - th2).cos() * w1 * w2
            + (m1 + m2) * g * l1 * (1.0 - th1.cos())
            + m2 * g * l2 * (1.0 - th2.cos())
    }

    pub fn field_batch(&self, x: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(x.rows(), 4);
        crate::par::for_each_row(out.data_mut(), 4, 64 * x.rows(), |i, row| {
            row.copy_from_slice(&self.field(x.row_slice(i)));
        });
        out
    }
}

pub fn pendulum_field(params: &PendulumParams, x: &[f64]) -> [f64; 4] {
    params.field(x)
}

pub fn pendulum_energy(params: &PendulumParams, x: &[f64]) -> f64 {
    params.energy(x)
}
