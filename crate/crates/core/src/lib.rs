//! Linear PMU-only power-system state estimation.
//!
//! The crate covers the whole pipeline: loading grid cases, generating
//! ground-truth operating points with Newton–Raphson power flow, synthesizing
//! noisy phasor measurements, solving the linear WLS estimator (exact and
//! diagonal-covariance variants), building augmented factor graphs, and
//! training a heterogeneous graph neural network that learns to emulate the
//! exact estimator.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataset;
pub mod error;
pub mod factor_graph;
pub mod gnn_model;
pub mod grid_model;
pub mod measurements;
pub mod neural;
pub mod powerflow;
pub mod trainer;
pub mod wls_se;

pub use error::{Error, Result};
pub use factor_graph::{AugmentedFactorGraph, GraphStats};
pub use gnn_model::{GnnConfig, GnnModel};
pub use grid_model::{Branch, BranchAdmittance, Bus, BusKind, PmuPlacement, PowerSystem};
pub use measurements::{MeasurementSet, PhasorKind, PolarPhasor, RectMeasurement};
pub use powerflow::{Injections, OperatingPoint};
pub use trainer::{TrainConfig, TrainLog};
pub use wls_se::{MeasurementModel, StateVector};

/// Version string recorded in manifests and checkpoints.
pub const TOOLKIT_VERSION: &str = concat!("fgse/", env!("CARGO_PKG_VERSION"));
