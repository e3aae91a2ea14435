//! Synthetic PMU phasors and their rectangular form.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grid_model::{PmuPlacement, PowerSystem};
use crate::powerflow::OperatingPoint;

pub use crate::grid_model::PhasorKind;

/// Default magnitude error variance (p.u.²).
pub const DEFAULT_VAR_MAG: f64 = 1e-2;
/// Default angle error variance (rad²); models phasors misaligned by
/// communication delays.
pub const DEFAULT_VAR_ANG: f64 = 0.5;

/// A phasor as delivered by a PMU, with the variances of its magnitude and
/// angle errors. Noise-free phasors carry zero variances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarPhasor {
    pub kind: PhasorKind,
    pub location: usize,
    pub magnitude: f64,
    pub angle: f64,
    pub var_mag: f64,
    pub var_ang: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RectMeasurement {
    pub z_re: f64,
    pub z_im: f64,
    pub var_re: f64,
    pub var_im: f64,
    pub cov: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasuredPhasor {
    pub polar: PolarPhasor,
    pub rect: RectMeasurement,
}

/// Measured phasors in canonical placement order (bus voltages by bus id,
/// then branch currents by branch id, from side first).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MeasurementSet {
    pub entries: Vec<MeasuredPhasor>,
}

impl MeasurementSet {
    pub fn from_polar(phasors: &[PolarPhasor]) -> Self {
        MeasurementSet {
            entries: phasors
                .iter()
                .map(|&polar| MeasuredPhasor {
                    polar,
                    rect: to_rectangular(&polar),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn polar(&self) -> impl Iterator<Item = &PolarPhasor> {
        self.entries.iter().map(|e| &e.polar)
    }
}

/// Noise-free phasors of an operating point for the given placement.
pub fn true_phasors(sys: &PowerSystem, op: &OperatingPoint, placement: &PmuPlacement) -> Vec<PolarPhasor> {
    let v = op.voltages();
    placement
        .slots(sys)
        .into_iter()
        .map(|slot| {
            let value = match slot.kind {
                PhasorKind::BusVoltage => v[slot.location],
                PhasorKind::BranchCurrentFrom | PhasorKind::BranchCurrentTo => {
                    let br = &sys.branches[slot.location];
                    let y = br.admittance();
                    let (vf, vt) = (v[br.from], v[br.to]);
                    if slot.kind == PhasorKind::BranchCurrentFrom {
                        y.y_ff * vf + y.y_ft * vt
                    } else {
                        y.y_tf * vf + y.y_tt * vt
                    }
                }
            };
            PolarPhasor {
                kind: slot.kind,
                location: slot.location,
                magnitude: value.norm(),
                angle: value.arg(),
                var_mag: 0.0,
                var_ang: 0.0,
            }
        })
        .collect()
}

/// Add independent zero-mean Gaussian errors to every magnitude and angle.
///
/// A magnitude driven below zero is reflected (|M| with the angle turned by
/// π), which keeps the complex value of the noisy phasor unchanged.
pub fn add_noise(phasors: &[PolarPhasor], var_mag: f64, var_ang: f64, rng_seed: u64) -> Vec<PolarPhasor> {
    assert!(var_mag > 0.0 && var_ang > 0.0, "noise variances must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mag_noise = Normal::new(0.0, var_mag.sqrt()).expect("finite std");
    let ang_noise = Normal::new(0.0, var_ang.sqrt()).expect("finite std");
    let mut reflected = 0usize;
    let out = phasors
        .iter()
        .map(|p| {
            let mut magnitude = p.magnitude + mag_noise.sample(&mut rng);
            let mut angle = p.angle + ang_noise.sample(&mut rng);
            if magnitude < 0.0 {
                magnitude = -magnitude;
                angle += std::f64::consts::PI;
                reflected += 1;
            }
            PolarPhasor {
                magnitude,
                angle,
                var_mag,
                var_ang,
                ..*p
            }
        })
        .collect();
    if reflected > 0 {
        log::trace!("add_noise: reflected {reflected} negative magnitudes");
    }
    out
}

/// Tangential (angle-driven) variance is floored at this fraction of the
/// radial variance; the first-order block degenerates as M → 0.
const MIN_TANGENTIAL_RATIO: f64 = 1e-6;

/// First-order propagation of polar error variances to rectangular
/// coordinates.
pub fn to_rectangular(p: &PolarPhasor) -> RectMeasurement {
    let (sin, cos) = p.angle.sin_cos();
    let radial = p.var_mag;
    let tangential = (p.magnitude * p.magnitude * p.var_ang).max(MIN_TANGENTIAL_RATIO * radial);
    RectMeasurement {
        z_re: p.magnitude * cos,
        z_im: p.magnitude * sin,
        var_re: cos * cos * radial + sin * sin * tangential,
        var_im: sin * sin * radial + cos * cos * tangential,
        cov: sin * cos * (radial - tangential),
    }
}

impl PolarPhasor {
    pub fn complex(&self) -> Complex64 {
        Complex64::from_polar(self.magnitude, self.angle)
    }
}
