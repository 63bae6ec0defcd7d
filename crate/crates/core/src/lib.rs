//! Learning pick-and-place motion policies from demonstrations and
//! interactive corrections.

pub mod experiment;
pub mod gp;
pub mod persist;
pub mod policy;
pub mod scenario;
pub mod sim;
pub mod teaching;
