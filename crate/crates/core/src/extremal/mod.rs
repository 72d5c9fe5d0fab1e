//! Test channels, the interpolation path toward the Gaussian auxiliaries, and
//! the bound chain evaluated along it.

mod chain;
mod channel;
mod path;

pub use chain::*;
pub use channel::*;
pub use path::*;
