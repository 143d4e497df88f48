//! Constraint-enforcing neural control policies.
//!
//! The toolkit composes a neural network with a differentiable Euclidean
//! projection onto a time-varying polytope, so every emitted action is
//! feasible with respect to the operational constraints of the plant.
//! Gradients flow through the projection by implicit differentiation of
//! its KKT conditions, which lets standard policy-gradient training see
//! the constraint geometry.
//!
//! Two desk-scale case studies are included: supply-water temperature
//! control of a thermal zone, and joint active/reactive setpoint control
//! of inverters on a radial distribution feeder.

pub mod autodiff;
pub mod baselines;
pub mod constraints;
pub mod envs;
pub mod error;
pub mod projection;
pub mod qp;
pub mod rng;
pub mod sysid;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use projection::{LinearConstraintSet, ProjectionSolution};
pub use sysid::{LinearDynamics, SensitivityModel};
pub use tensor::Tensor;
