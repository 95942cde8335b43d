//! Explicit model predictive charging control for lithium-ion cells
//! described by a nonlinear double-capacitor model.

pub mod model;
pub mod mpqp;
pub mod qp;
pub mod segments;
pub mod explicit;
pub mod fsutil;
pub mod par;
pub mod pipeline;
pub mod runtime;
pub mod scenario;
pub mod app;
