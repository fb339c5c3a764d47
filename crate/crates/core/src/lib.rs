//! Numerical certification of flat parameterizations of control systems.
//!
//! The numerical core is generic over the scalar type ([`scalar::Real`],
//! implemented for `f32` and `f64`); the aliases below fix it to `f64`,
//! which is what the reports and the command-line tool use.

pub mod catalog;
pub mod control;
pub mod expr;
pub mod jet;
pub mod numlin;
pub mod planner;
pub mod report;
pub mod sampling;
pub mod scalar;
pub mod spec_file;
pub mod system;

pub use expr::{SmoothMap, VarContext};
pub use jet::ParameterFunction;
pub use spec_file::{load_spec, SpecFile};
pub use system::ImplicitSystem;

pub type Dual64 = scalar::Dual<f64>;
pub type JetPoint = jet::JetPoint<f64>;
pub type EquilibriumPoint = system::EquilibriumPoint<f64>;
pub type VarietySample = system::VarietySample<f64>;
pub type Linearization = control::Linearization<f64>;
pub type RankResult = numlin::RankResult<f64>;
pub type PolyPath = planner::PolyPath<f64>;
pub type Trajectory = planner::Trajectory<f64>;
