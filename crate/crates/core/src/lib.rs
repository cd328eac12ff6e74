//! Semi-blind uplink channel estimation for THz multi-user massive MIMO with
//! hybrid combining.
//!
//! The modules follow the processing chain: [`channel`] synthesizes the
//! multipath THz channel, [`signal`] builds pilot and data frames through the
//! analog combiner and ADC, [`estimators`] recovers the channel, [`bounds`]
//! gives the analytic references, [`combiner`] designs receive combiners from
//! the estimates, and [`harness`] runs seeded Monte Carlo experiments.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounds;
pub mod channel;
pub mod combiner;
pub mod estimators;
pub mod harness;
pub mod numerics;
pub mod signal;
