//! Transient register-read leakage toolkit.
//!
//! A Flush+Reload cache channel ([`channel`]), transient execution harness
//! ([`harness`]), a register probe catalog with a leakage classifier
//! ([`probes`]), a performance-counter leak primitive ([`counterleak`]) and
//! four attack drivers built on it ([`studies`]). Everything runs against a
//! [`backend::Backend`]: real x86-64 hardware or a seeded simulator.

pub mod backend;
pub mod channel;
pub mod counterleak;
pub mod env;
pub mod error;
pub mod harness;
pub mod probes;
pub mod stats;
pub mod studies;

pub use error::{Error, Result};
