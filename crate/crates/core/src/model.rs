//! Nonlinear double-capacitor (NDC) cell model.
//!
//! Two RC branches (bulk `Cb`/`Rb`, surface `Cs`/`Rs`) share the applied
//! current; the terminal voltage is a polynomial open-circuit map of the
//! surface voltage plus a surface-voltage dependent series resistance.

use nalgebra::{Matrix2, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("sampling interval must be positive, got {0}")]
    NonPositiveDt(f64),
}

/// Physical cell parameters. Serialized with the symbol names of the
/// parameter table (`Cb`, `alpha0`, `beta1`, ...).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsFile", into = "ParamsFile")]
pub struct NdcParams {
    pub cb: f64,
    pub cs: f64,
    pub rb: f64,
    pub rs: f64,
    /// OCV polynomial coefficients, lowest order first.
    pub alpha: [f64; 6],
    pub beta: [f64; 3],
    pub vs_max: f64,
    pub vs_min: f64,
}

impl Default for NdcParams {
    fn default() -> Self {
        Self {
            cb: 9913.0,
            cs: 887.0,
            rb: 0.025,
            rs: 0.0,
            alpha: [3.2, 3.041, -11.475, 24.457, -23.536, 8.513],
            beta: [0.09, 0.35, 10.0],
            vs_max: 1.0,
            vs_min: 0.0,
        }
    }
}

impl NdcParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |name, reason: &str| {
            Err(ModelError::InvalidParameter {
                name,
                reason: reason.to_string(),
            })
        };
        let all = [self.cb, self.cs, self.rb, self.rs, self.vs_max, self.vs_min]
            .into_iter()
            .chain(self.alpha)
            .chain(self.beta);
        if all.into_iter().any(|v| !v.is_finite()) {
            return bad("*", "all parameters must be finite");
        }
        if self.cb <= 0.0 {
            return bad("Cb", "must be positive");
        }
        if self.cs <= 0.0 {
            return bad("Cs", "must be positive");
        }
        if self.cb <= self.cs {
            return bad("Cb", "bulk capacitance must exceed surface capacitance");
        }
        if self.rb < 0.0 || self.rs < 0.0 || self.rb + self.rs <= 0.0 {
            return bad("Rb", "resistances must be nonnegative with a positive sum");
        }
        for (i, name) in ["beta1", "beta2", "beta3"].into_iter().enumerate() {
            if self.beta[i] <= 0.0 {
                return bad(name, "must be positive");
            }
        }
        if self.vs_max <= self.vs_min {
            return bad("Vs_max", "must exceed Vs_min");
        }
        Ok(())
    }

    /// Open-circuit voltage h(Vs).
    pub fn ocv(&self, vs: f64) -> f64 {
        self.alpha.iter().rev().fold(0.0, |acc, a| acc * vs + a)
    }

    /// dh/dVs.
    pub fn ocv_slope(&self, vs: f64) -> f64 {
        self.alpha
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (i, a)| acc * vs + i as f64 * a)
    }

    /// Series resistance R0(Vs) = beta1 + beta2 * exp(-beta3 (1 - Vs)).
    pub fn r0(&self, vs: f64) -> f64 {
        let [b1, b2, b3] = self.beta;
        b1 + b2 * (-b3 * (1.0 - vs)).exp()
    }

    pub fn r0_slope(&self, vs: f64) -> f64 {
        let [_, b2, b3] = self.beta;
        b2 * b3 * (-b3 * (1.0 - vs)).exp()
    }

    /// Total charge capacity in coulombs, (Cb + Cs) * Vs_max.
    pub fn capacity(&self) -> f64 {
        (self.cb + self.cs) * self.vs_max
    }

    /// State of charge as a fraction.
    pub fn soc(&self, vb: f64, vs: f64) -> f64 {
        (self.cb * vb + self.cs * vs) / self.capacity()
    }

    /// Coefficients `(on Vb, on Vs)` of the constraint variable eta.
    pub fn eta_coefficients(&self, gamma1: f64) -> (f64, f64) {
        let total = self.cb + self.cs;
        (
            -(self.cb + gamma1 * self.cb + self.cs) / total,
            (total - gamma1 * self.cs) / total,
        )
    }

    /// Constraint variable eta; `eta <= gamma2` is equivalent to
    /// `Vs - Vb <= gamma1 * SoC + gamma2` when `Vs_max = 1`.
    pub fn eta(&self, gamma1: f64, vb: f64, vs: f64) -> f64 {
        let (cvb, cvs) = self.eta_coefficients(gamma1);
        cvb * vb + cvs * vs
    }

    pub fn terminal_voltage(&self, state: &NdcState) -> f64 {
        self.ocv(state.vs) + self.r0(state.vs) * state.current
    }

    /// Continuous-time `(A, B)` of the two-capacitor dynamics.
    pub fn continuous(&self) -> (Matrix2<f64>, Vector2<f64>) {
        let rsum = self.rb + self.rs;
        let a = 1.0 / (self.cb * rsum);
        let c = 1.0 / (self.cs * rsum);
        (
            Matrix2::new(-a, a, c, -c),
            Vector2::new(self.rs / (self.cb * rsum), self.rb / (self.cs * rsum)),
        )
    }

    /// Nonzero eigenvalue of the continuous state matrix.
    pub fn pole(&self) -> f64 {
        -(self.cb + self.cs) / (self.cb * self.cs * (self.rb + self.rs))
    }

    /// Exact zero-order-hold discretization with the current-rate input.
    pub fn discretize(&self, dt: f64) -> Result<DiscreteModel, ModelError> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(ModelError::NonPositiveDt(dt));
        }
        let (a, b) = self.continuous();
        let mu = self.pole();
        // A^2 = mu A, so exp(A t) = I + A (e^{mu t} - 1) / mu.
        let phi = (mu * dt).exp_m1() / mu;
        let a_d = Matrix2::identity() + a * phi;
        let integral = Matrix2::identity() * dt + a * ((phi - dt) / mu);
        let b_d = integral * b;

        let mut a_aug = Matrix3::zeros();
        a_aug.fixed_view_mut::<2, 2>(0, 0).copy_from(&a_d);
        a_aug.fixed_view_mut::<2, 1>(0, 2).copy_from(&b_d);
        a_aug[(2, 2)] = 1.0;

        Ok(DiscreteModel {
            a_d,
            b_d,
            a_aug,
            b_aug: Vector3::new(0.0, 0.0, 1.0),
            dt,
        })
    }

    /// Nonlinear output map g(x).
    pub fn outputs(&self, gamma1: f64, state: &NdcState) -> OutputVector {
        OutputVector {
            soc: self.soc(state.vb, state.vs),
            vs: state.vs,
            current: state.current,
            voltage: self.terminal_voltage(state),
            eta: self.eta(gamma1, state.vb, state.vs),
        }
    }

    /// Equilibrium state (Vb = Vs, no current) at the given SoC.
    pub fn equilibrium(&self, soc: f64) -> NdcState {
        let v = soc * self.vs_max;
        NdcState {
            vb: v,
            vs: v,
            current: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NdcState {
    pub vb: f64,
    pub vs: f64,
    /// Applied current in amps, positive when charging.
    pub current: f64,
}

impl NdcState {
    pub fn new(vb: f64, vs: f64, current: f64) -> Self {
        Self { vb, vs, current }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.vb, self.vs, self.current)
    }

    pub fn from_vector(x: &Vector3<f64>) -> Self {
        Self::new(x[0], x[1], x[2])
    }
}

/// y = [SoC, Vs, I, V, eta].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutputVector {
    pub soc: f64,
    pub vs: f64,
    pub current: f64,
    pub voltage: f64,
    pub eta: f64,
}

impl OutputVector {
    pub fn as_array(&self) -> [f64; 5] {
        [self.soc, self.vs, self.current, self.voltage, self.eta]
    }
}

/// Discrete model `x+ = A_aug x + B_aug du` on `x = [Vb, Vs, I]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteModel {
    pub a_d: Matrix2<f64>,
    pub b_d: Vector2<f64>,
    pub a_aug: Matrix3<f64>,
    pub b_aug: Vector3<f64>,
    pub dt: f64,
}

impl DiscreteModel {
    pub fn propagate(&self, state: &NdcState, du: f64) -> NdcState {
        NdcState::from_vector(&(self.a_aug * state.to_vector() + self.b_aug * du))
    }

    /// Advances the state one interval and evaluates the nonlinear outputs
    /// at the new state. No clamping is applied.
    pub fn step_nonlinear(
        &self,
        params: &NdcParams,
        state: &NdcState,
        du: f64,
        gamma1: f64,
    ) -> (NdcState, OutputVector) {
        let next = self.propagate(state, du);
        (next, params.outputs(gamma1, &next))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
struct ParamsFile {
    Cb: f64,
    Cs: f64,
    Rb: f64,
    Rs: f64,
    alpha0: f64,
    alpha1: f64,
    alpha2: f64,
    alpha3: f64,
    alpha4: f64,
    alpha5: f64,
    beta1: f64,
    beta2: f64,
    beta3: f64,
    #[serde(default = "one")]
    Vs_max: f64,
    #[serde(default)]
    Vs_min: f64,
}

fn one() -> f64 {
    1.0
}

impl TryFrom<ParamsFile> for NdcParams {
    type Error = ModelError;

    fn try_from(f: ParamsFile) -> Result<Self, Self::Error> {
        let p = NdcParams {
            cb: f.Cb,
            cs: f.Cs,
            rb: f.Rb,
            rs: f.Rs,
            alpha: [f.alpha0, f.alpha1, f.alpha2, f.alpha3, f.alpha4, f.alpha5],
            beta: [f.beta1, f.beta2, f.beta3],
            vs_max: f.Vs_max,
            vs_min: f.Vs_min,
        };
        p.validate()?;
        Ok(p)
    }
}

impl From<NdcParams> for ParamsFile {
    fn from(p: NdcParams) -> Self {
        let [alpha0, alpha1, alpha2, alpha3, alpha4, alpha5] = p.alpha;
        let [beta1, beta2, beta3] = p.beta;
        ParamsFile {
            Cb: p.cb,
            Cs: p.cs,
            Rb: p.rb,
            Rs: p.rs,
            alpha0,
            alpha1,
            alpha2,
            alpha3,
            alpha4,
            alpha5,
            beta1,
            beta2,
            beta3,
            Vs_max: p.vs_max,
            Vs_min: p.vs_min,
        }
    }
}
