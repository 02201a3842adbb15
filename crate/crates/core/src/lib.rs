//! Multi-agent, instance-level distributed implicit mapping at desk scale.

pub mod align;
pub mod distopt;
pub mod error;
pub mod evalkit;
pub mod features;
pub mod field;
pub mod geometry;
pub mod io;
pub mod netsim;
pub mod percept;
pub mod pipeline;
pub mod scenarios;
pub mod scene;
pub mod spatial;

pub use error::{Error, ProtocolError, Result};
