//! Monte-Carlo simulator and unsupervised Neyman-Pearson detector for covert
//! transmission shielded by a disco reconfigurable intelligent surface.
//!
//! Layering, bottom up: [`statkit`] (seeded sampling and statistics),
//! [`channel`] (geometry, fading and signal generation), [`theory`]
//! (closed forms), [`flow`] (masked autoregressive flow), [`detector`]
//! (prefilter, fit, calibrate, evaluate) and [`harness`] (config, sweeps,
//! CSV, validation).

pub mod channel;
pub mod config;
pub mod detector;
pub mod error;
pub mod flow;
pub mod harness;
pub mod statkit;
pub mod theory;

pub use error::{Error, Result};
