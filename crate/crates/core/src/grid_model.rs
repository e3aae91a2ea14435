//! Power-system case data, branch admittances and PMU placement.
//!
//! Cases use a small native JSON format:
//!
//! ```json
//! {"base_mva": 100.0,
//!  "buses": [{"id": 0, "kind": "Slack", "p_load": 0.0, "q_load": 0.0,
//!             "g_shunt": 0.0, "b_shunt": 0.0, "v_setpoint": 1.0, "p_gen": 0.0}],
//!  "branches": [{"from": 0, "to": 1, "r": 0.01, "x": 0.1, "b": 0.0, "tap": 1.0, "shift": 0.0}]}
//! ```
//!
//! All electrical quantities are per-unit on `base_mva`, angles in radians.
//! Bus ids must be dense and 0-based; an optional `external_id` keeps the
//! numbering of the source data.

use std::collections::BTreeSet;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BusKind {
    Slack,
    PV,
    PQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_id: Option<i64>,
    pub kind: BusKind,
    pub p_load: f64,
    pub q_load: f64,
    #[serde(default)]
    pub g_shunt: f64,
    #[serde(default)]
    pub b_shunt: f64,
    #[serde(default = "one")]
    pub v_setpoint: f64,
    #[serde(default)]
    pub p_gen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    #[serde(rename = "b", default)]
    pub b_charging: f64,
    #[serde(default = "one")]
    pub tap: f64,
    #[serde(default)]
    pub shift: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSystem {
    #[serde(default, skip_serializing)]
    pub name: String,
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
}

/// π-model admittances of one branch, tap and phase shift on the from side.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchAdmittance {
    pub y_ff: Complex64,
    pub y_ft: Complex64,
    pub y_tf: Complex64,
    pub y_tt: Complex64,
}

/// Which phasors the PMUs deliver.
///
/// Every measured bus contributes its voltage phasor and, when
/// `with_currents` is set, one current phasor per incident branch end.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PmuPlacement {
    pub measured_buses: BTreeSet<usize>,
    pub with_currents: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhasorKind {
    BusVoltage,
    BranchCurrentFrom,
    BranchCurrentTo,
}

/// Position of one phasor in the canonical measurement order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhasorSlot {
    pub kind: PhasorKind,
    /// Bus id for voltages, branch id for currents.
    pub location: usize,
}

const BUNDLED: &[(&str, &str)] = &[
    ("two_bus", include_str!("../cases/two_bus.json")),
    ("ieee14", include_str!("../cases/ieee14.json")),
    ("ieee30", include_str!("../cases/ieee30.json")),
    ("ieee118", include_str!("../cases/ieee118.json")),
    ("ieee300", include_str!("../cases/ieee300.json")),
];

/// Names of the cases compiled into the library.
pub fn bundled_case_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(name, _)| *name)
}

/// Load a case from a JSON file. The system name is the file stem.
pub fn load_case(path: impl AsRef<Path>) -> Result<PowerSystem> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    PowerSystem::from_json_str(&text, name)
}

/// Resolve `name_or_path` as a bundled case name first, then as a file path.
pub fn resolve_case(name_or_path: &str) -> Result<PowerSystem> {
    match PowerSystem::bundled(name_or_path) {
        Some(sys) => sys,
        None => load_case(name_or_path),
    }
}

impl PowerSystem {
    pub fn from_json_str(text: &str, name: impl Into<String>) -> Result<Self> {
        let mut sys: PowerSystem =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        sys.name = name.into();
        sys.validate()?;
        Ok(sys)
    }

    pub fn bundled(name: &str) -> Option<Result<Self>> {
        BUNDLED
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::from_json_str(text, *n))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("power system serializes")
    }

    /// SHA-256 over the canonical JSON form; ties datasets and checkpoints
    /// to the system they were produced for.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("power system serializes");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.kind == BusKind::Slack)
            .expect("validated system has a slack bus")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_mva > 0.0) {
            return Err(Error::validation("base_mva", "must be positive"));
        }
        if self.buses.is_empty() {
            return Err(Error::validation("buses", "empty bus list"));
        }
        let n = self.buses.len();
        let mut slack_count = 0;
        for (i, bus) in self.buses.iter().enumerate() {
            if bus.id != i {
                return Err(Error::validation(
                    format!("buses[{i}].id"),
                    format!("expected dense 0-based id {i}, found {}", bus.id),
                ));
            }
            let finite = [
                bus.p_load,
                bus.q_load,
                bus.g_shunt,
                bus.b_shunt,
                bus.v_setpoint,
                bus.p_gen,
            ]
            .iter()
            .all(|v| v.is_finite());
            if !finite {
                return Err(Error::validation(format!("buses[{i}]"), "non-finite value"));
            }
            if bus.kind == BusKind::Slack {
                slack_count += 1;
            }
            if bus.kind != BusKind::PQ && !(bus.v_setpoint > 0.0) {
                return Err(Error::validation(
                    format!("buses[{i}].v_setpoint"),
                    "must be positive",
                ));
            }
        }
        if slack_count != 1 {
            return Err(Error::validation(
                "buses.kind",
                format!("exactly one Slack bus required, found {slack_count}"),
            ));
        }
        for (k, br) in self.branches.iter().enumerate() {
            if br.from >= n || br.to >= n {
                return Err(Error::validation(
                    format!("branches[{k}]"),
                    format!("endpoint out of range ({} -> {}, n = {n})", br.from, br.to),
                ));
            }
            if br.from == br.to {
                return Err(Error::validation(
                    format!("branches[{k}].to"),
                    "branch must connect two distinct buses",
                ));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(Error::validation(
                    format!("branches[{k}].x"),
                    "zero series impedance",
                ));
            }
            if !(br.tap > 0.0) {
                return Err(Error::validation(format!("branches[{k}].tap"), "must be positive"));
            }
            if ![br.r, br.x, br.b_charging, br.shift].iter().all(|v| v.is_finite()) {
                return Err(Error::validation(format!("branches[{k}]"), "non-finite value"));
            }
        }
        let components = self.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        Ok(())
    }

    fn component_count(&self) -> usize {
        let n = self.buses.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let mut components = n;
        for br in &self.branches {
            let (a, b) = (find(&mut parent, br.from), find(&mut parent, br.to));
            if a != b {
                parent[a] = b;
                components -= 1;
            }
        }
        components
    }

    /// Branch indices incident to each bus.
    pub fn incident_branches(&self) -> Vec<Vec<usize>> {
        let mut inc = vec![Vec::new(); self.n_buses()];
        for (k, br) in self.branches.iter().enumerate() {
            inc[br.from].push(k);
            inc[br.to].push(k);
        }
        inc
    }
}

impl Branch {
    pub fn admittance(&self) -> BranchAdmittance {
        let y_s = Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x);
        let half_b = Complex64::new(0.0, self.b_charging / 2.0);
        let t = Complex64::from_polar(self.tap, self.shift);
        BranchAdmittance {
            y_ff: (y_s + half_b) / (self.tap * self.tap),
            y_ft: -y_s / t.conj(),
            y_tf: -y_s / t,
            y_tt: y_s + half_b,
        }
    }
}

pub fn branch_admittances(sys: &PowerSystem) -> Vec<BranchAdmittance> {
    sys.branches.iter().map(Branch::admittance).collect()
}

impl PmuPlacement {
    /// PMU at every bus: the redundancy-maximizing placement.
    pub fn maximal(sys: &PowerSystem) -> Self {
        PmuPlacement {
            measured_buses: (0..sys.n_buses()).collect(),
            with_currents: true,
        }
    }

    /// Voltage phasors only at every bus; yields a square (m = 2n) model.
    pub fn voltage_only(sys: &PowerSystem) -> Self {
        PmuPlacement {
            measured_buses: (0..sys.n_buses()).collect(),
            with_currents: false,
        }
    }

    /// Phasors in canonical order: bus voltages by bus id, then branch
    /// currents by branch id with the from side first.
    pub fn slots(&self, sys: &PowerSystem) -> Vec<PhasorSlot> {
        let mut slots: Vec<PhasorSlot> = self
            .measured_buses
            .iter()
            .map(|&bus| PhasorSlot {
                kind: PhasorKind::BusVoltage,
                location: bus,
            })
            .collect();
        if self.with_currents {
            for (k, br) in sys.branches.iter().enumerate() {
                if self.measured_buses.contains(&br.from) {
                    slots.push(PhasorSlot {
                        kind: PhasorKind::BranchCurrentFrom,
                        location: k,
                    });
                }
                if self.measured_buses.contains(&br.to) {
                    slots.push(PhasorSlot {
                        kind: PhasorKind::BranchCurrentTo,
                        location: k,
                    });
                }
            }
        }
        slots
    }

    pub fn phasor_count(&self, sys: &PowerSystem) -> usize {
        self.slots(sys).len()
    }

    /// Number of real measurement equations m (two per phasor).
    pub fn equation_count(&self, sys: &PowerSystem) -> usize {
        2 * self.phasor_count(sys)
    }

    /// Measurement redundancy m / 2n.
    pub fn redundancy(&self, sys: &PowerSystem) -> f64 {
        self.equation_count(sys) as f64 / (2 * sys.n_buses()) as f64
    }
}

pub fn maximal_placement(sys: &PowerSystem) -> PmuPlacement {
    PmuPlacement::maximal(sys)
}
