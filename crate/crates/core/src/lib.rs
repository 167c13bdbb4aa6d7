//! Vision-based soft actor-critic with simultaneous state representation
//! learning and a second, curiosity-driven agent rewarded by the
//! representation error.

pub mod cure;
pub mod envs;
pub mod harness;
pub mod error;
pub mod replay;
pub mod rng;
pub mod sac;
pub mod srl;

pub use error::{Error, Result};
