//! Constraint-consistent torque control for manipulators holding a tool
//! through a remote center of motion, with two baseline controllers, a
//! fixed-step simulator and a benchmarking harness.

pub mod constrained_dynamics;
pub mod controllers;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod rcm;
pub mod robot;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
