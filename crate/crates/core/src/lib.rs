//! Vectorable-thrust control stack for a quadruped robot with one
//! two-axis vectoring rotor per link.
//!
//! * [`model`]: skeleton kinematics, Jacobians, CoG and composite inertia.
//! * [`qp`]: dense operator-splitting QP solver with active-set polishing.
//! * [`interference`]: downwash-free vectoring ranges and their linear force constraints.
//! * [`allocation`]: thrust/joint-torque allocation for flight and crawling.
//! * [`control`]: centroidal PID, attitude control, joint PD.
//! * [`gait`]: crawl gait planner with analytic leg inverse kinematics.
//! * [`sim`]: quasi-static closed-loop simulation and logging.
//! * [`config`]: scenario configuration files.

pub mod allocation;
pub mod config;
pub mod control;
pub mod error;
pub mod gait;
pub mod interference;
pub mod model;
pub mod qp;
pub mod sim;

pub use error::{Error, Result};
