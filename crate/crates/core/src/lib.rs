//! Flow matching with an optimal-acceleration-transport refinement phase.
//!
//! A velocity field is first trained with an ordinary conditional flow-matching
//! objective ([`flows`]). It is then refined ([`oatfm`]) by pairing noise and data
//! through a velocity-aware mini-batch coupling ([`otcore`]) and penalizing the
//! acceleration of each matched pair ([`geometry`]). [`ode`] integrates trained
//! fields and [`bench`] runs the 2-D transport benchmark.

pub mod bench;
pub mod diffcore;
pub mod error;
pub mod flows;
pub mod geometry;
pub mod model;
pub mod oatfm;
pub mod ode;
pub mod otcore;
pub mod rng;

pub use error::{Error, Result};
