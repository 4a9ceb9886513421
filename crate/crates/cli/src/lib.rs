//! Command-line runner and HTTP control plane for the e2l emulator.

pub mod api;
pub mod runtime;
