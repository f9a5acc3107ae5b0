//! Learned vertex-by-vertex refinement of quadrilateral text boxes.
//!
//! An agent nudges one box vertex per step and is rewarded by the change in
//! a recognizer's confidence on the boxed region.

pub mod env;
pub mod qnet;
pub mod rl;
pub(crate) mod hash;
pub mod oracle;
pub mod pipeline;
pub mod spatial;
