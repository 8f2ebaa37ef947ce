//! Torque-level model predictive control of a serial manipulator, evaluated
//! in closed loop against a rigid-body digital twin.

pub mod dynamics;
pub mod controller;
pub mod ddp;
pub mod ocp;
pub mod sim;
pub mod trajectory;
