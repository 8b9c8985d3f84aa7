//! Risk-aware stochastic control-barrier safety filtering.
//!
//! The crate is organised bottom-up:
//!
//! * [`statespace`] plant models, covariance fusion and Euler–Maruyama stepping,
//! * [`barriers`] atomic barriers, the log-sum-exp composite and Itô statistics,
//! * [`safety_qp`] the slack-relaxed safety QP and its dual active-set solver,
//! * [`diffgrad`] implicit KKT sensitivities and finite-difference checks,
//! * [`riskadapt`] meta-gradient calibration of `(α, κ)`,
//! * [`semantic`] context descriptors turned into region barriers and risk gains,
//! * [`team`] pairwise team barriers and per-agent decentralized filters,
//! * [`simlab`] scenarios, episodes, metrics and sweeps,
//! * [`bench`] solver timing harness.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod barriers;
pub mod bench;
pub mod diffgrad;
pub mod riskadapt;
pub mod safety_qp;
pub mod semantic;
pub mod simlab;
pub mod statespace;
pub mod team;
