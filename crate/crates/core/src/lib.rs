//! Emulator and controller for a 32-channel uLED current-source chip.
//!
//! The crate covers the command link ([`protocol`]), the electrical model of
//! the probe ([`probe`]) and the chip ([`asic`]), per-channel power
//! calibration ([`calibration`]), real-time stimulus scheduling
//! ([`sequencer`]) and a synthetic neural read-out with rank statistics
//! ([`experiment`], [`stats`]).

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod asic;
pub mod calibration;
pub mod experiment;
mod linalg;
pub mod probe;
pub mod protocol;
pub mod seed;
pub mod sequencer;
pub mod stats;
