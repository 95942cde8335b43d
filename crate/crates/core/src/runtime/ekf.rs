use nalgebra::{Matrix3, RowVector3, Vector3};
use serde::{Deserialize, Serialize};

use crate::model::{DiscreteModel, NdcParams, NdcState};

/// Extended Kalman filter on `[Vb, Vs, I]` measuring the terminal voltage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    pub x_hat: Vector3<f64>,
    pub p: Matrix3<f64>,
    pub q_proc: Matrix3<f64>,
    pub r_meas: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Innovation {
    pub value: f64,
    /// Predicted innovation variance `H P H' + R`.
    pub variance: f64,
}

impl EkfState {
    pub fn new(x0: &NdcState, p0: Matrix3<f64>, q_proc: Matrix3<f64>, r_meas: f64) -> Self {
        Self {
            x_hat: x0.to_vector(),
            p: p0,
            q_proc,
            r_meas,
        }
    }

    pub fn estimate(&self) -> NdcState {
        NdcState::from_vector(&self.x_hat)
    }

    /// Measurement Jacobian at `x`.
    pub fn jacobian(params: &NdcParams, x: &Vector3<f64>) -> RowVector3<f64> {
        let (vs, i) = (x[1], x[2]);
        RowVector3::new(0.0, params.ocv_slope(vs) + params.r0_slope(vs) * i, params.r0(vs))
    }

    /// Predicts with the applied increment `du` and corrects with the
    /// measured voltage.
    pub fn step(&mut self, params: &NdcParams, model: &DiscreteModel, du: f64, v_measured: f64) -> Innovation {
        let x_pred = model.a_aug * self.x_hat + model.b_aug * du;
        let p_pred = model.a_aug * self.p * model.a_aug.transpose() + self.q_proc;
        let h = Self::jacobian(params, &x_pred);
        let v_pred = params.terminal_voltage(&NdcState::from_vector(&x_pred));
        let s = (h * p_pred * h.transpose())[0] + self.r_meas;
        let k = p_pred * h.transpose() / s;
        let innovation = v_measured - v_pred;
        self.x_hat = x_pred + k * innovation;
        // Joseph form keeps P positive semidefinite.
        let ikh = Matrix3::identity() - k * h;
        let p = ikh * p_pred * ikh.transpose() + k * k.transpose() * self.r_meas;
        self.p = (p + p.transpose()) * 0.5;
        Innovation {
            value: innovation,
            variance: s,
        }
    }
}
