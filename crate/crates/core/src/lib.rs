//! Energy-aware design of closed-chain link lengths for manipulators driven by
//! electromechanical linear actuators (EMLAs).
//!
//! The crate is organised bottom-up:
//!
//! * [`emla`]: PMSM/gearbox/screw drivetrain, steady-state operating points and
//!   efficiency maps.
//! * [`closed_chain`]: triangle kinematics of an actuator-driven four-link loop.
//! * [`spline`]: clamped B-spline joint trajectories on a collocation grid.
//! * [`dynamics`]: planar forward kinematics, Jacobians and inverse dynamics.
//! * [`nlp`]: transcription of the link-length design problem and an SQP solver.
//! * [`scenario`] and [`io`]: reference generation, scenario files and exports.
//!
//! The model modules are generic over [`Real`]; the aliases below fix them to
//! `f64`, which is what the optimizer and the command line use.

pub mod closed_chain;
pub mod dynamics;
pub mod emla;
pub mod error;
pub mod io;
pub mod nlp;
pub mod planar;
pub mod scalar;
pub mod scenario;
pub mod spline;

pub use error::{Error, Result};
pub use scalar::Real;

pub type PmsmParams = emla::PmsmParams<f64>;
pub type DrivetrainParams = emla::DrivetrainParams<f64>;
pub type EmlaUnit = emla::EmlaUnit<f64>;
pub type OperatingPoint = emla::OperatingPoint<f64>;
pub type EfficiencyMap = emla::EfficiencyMap<f64>;
pub type ClosedChainParams = closed_chain::ClosedChainParams<f64>;
pub type ChainState = closed_chain::ChainState<f64>;
pub type PlanarPose = planar::PlanarPose<f64>;
pub type SplineBasis = spline::SplineBasis<f64>;
pub type CollocationGrid = spline::CollocationGrid<f64>;
pub type RobotModel = dynamics::RobotModel<f64>;
pub type LinkBody = dynamics::LinkBody<f64>;

/// Single-precision instantiations.
pub mod f32 {
    pub type ClosedChainParams = crate::closed_chain::ClosedChainParams<f32>;
    pub type EfficiencyMap = crate::emla::EfficiencyMap<f32>;
    pub type RobotModel = crate::dynamics::RobotModel<f32>;
    pub type SplineBasis = crate::spline::SplineBasis<f32>;
}
