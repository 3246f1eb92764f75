//! Analysis and simulation of random-access MAC protocols for sensors that
//! harvest their energy and share one fading channel with capture.
//!
//! Three schemes are modelled: TDMA, single-frame framed ALOHA (FA) and
//! dynamic framed ALOHA (DFA). The analysis builds a Markov chain over a
//! sensor's energy, reads delivery probability and time efficiency off its
//! stationary law, and the simulator checks both by brute force.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capture;
pub mod estimator;
pub mod markov;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod sim;

pub use capture::{build_capture_table, CaptureError, CaptureTable};
pub use estimator::{BacklogEstimator, FrameObservation};
pub use markov::{build_transition_matrix, EnergyDistribution, TransitionMatrix};
pub use metrics::{analyze, tradeoff_curve, Analysis, AnalysisError, MetricsReport, TradeoffPoint};
pub use model::{
    BacklogMode, CheckedConfig, ConfigError, FadingModel, HarvestSpec, Protocol, SirThreshold,
    SystemConfig,
};
pub use sim::{run_replicas, run_simulation, SimError, SimOptions, SimReport};
