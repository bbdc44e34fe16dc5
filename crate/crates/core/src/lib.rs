//! Linear-quadratic control under volatility ambiguity.

pub mod config;
pub mod corpus;
pub mod error;
pub mod gheat;
pub mod linalg;
pub mod problem;
pub mod riccati;
pub mod rng;
pub mod robust;
pub mod sim;
pub mod verify;

pub use error::{Error, Result};
pub use problem::{AmbiguityBounds, FeedbackControl, FeedbackLaw, LQProblem, VolatilityScenario};
