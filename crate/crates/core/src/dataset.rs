//! Synthetic PMU datasets: power-flow truth, noisy phasors and exact-WLS
//! labels, stored as JSON lines with a manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::factor_graph::{build_graph, AugmentedFactorGraph, DEFAULT_ENCODING_WIDTH};
use crate::grid_model::{PhasorKind, PmuPlacement, PowerSystem};
use crate::measurements::{add_noise, true_phasors, MeasuredPhasor, MeasurementSet, PolarPhasor, RectMeasurement};
use crate::powerflow::{sample_injections, solve_power_flow, DEFAULT_MAX_ITER, DEFAULT_TOLERANCE};
use crate::wls_se::{build_model, solve_approximative, solve_exact, MeasurementModel, StateVector};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LABEL_SOURCE: &str = "exact_wls";
pub const DEFAULT_SPREAD: f64 = 0.5;
/// Generation aborts when more than this fraction of candidate seeds fail.
pub const MAX_DISCARD_FRACTION: f64 = 0.1;

/// Seed bases of the three splits are this far apart, so per-sample seeds
/// never collide for datasets below 2^32 samples.
pub const SPLIT_STRIDE: u64 = 1 << 32;

/// Decorrelates the noise stream from the injection stream of one sample.
const NOISE_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn seed_base(self, seed: u64) -> u64 {
        let k = match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        };
        seed.wrapping_add(k * SPLIT_STRIDE)
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub count: usize,
    pub seed_base: u64,
    pub var_mag: f64,
    pub var_ang: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasorRecord {
    pub kind: PhasorKind,
    pub location: usize,
    pub mag: f64,
    pub ang: f64,
    pub var_mag: f64,
    pub var_ang: f64,
    pub z_re: f64,
    pub z_im: f64,
    pub var_re: f64,
    pub var_im: f64,
    pub cov: f64,
}

/// One JSON line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub seed: u64,
    pub injections_spread: f64,
    pub phasors: Vec<PhasorRecord>,
    pub label: Vec<f64>,
    pub label_source: String,
}

impl SampleRecord {
    pub fn measurements(&self) -> MeasurementSet {
        MeasurementSet {
            entries: self
                .phasors
                .iter()
                .map(|p| MeasuredPhasor {
                    polar: PolarPhasor {
                        kind: p.kind,
                        location: p.location,
                        magnitude: p.mag,
                        angle: p.ang,
                        var_mag: p.var_mag,
                        var_ang: p.var_ang,
                    },
                    rect: RectMeasurement {
                        z_re: p.z_re,
                        z_im: p.z_im,
                        var_re: p.var_re,
                        var_im: p.var_im,
                        cov: p.cov,
                    },
                })
                .collect(),
        }
    }

    fn from_parts(seed: u64, spread: f64, meas: &MeasurementSet, label: StateVector) -> Self {
        SampleRecord {
            seed,
            injections_spread: spread,
            phasors: meas
                .entries
                .iter()
                .map(|e| PhasorRecord {
                    kind: e.polar.kind,
                    location: e.polar.location,
                    mag: e.polar.magnitude,
                    ang: e.polar.angle,
                    var_mag: e.polar.var_mag,
                    var_ang: e.polar.var_ang,
                    z_re: e.rect.z_re,
                    z_im: e.rect.z_im,
                    var_re: e.rect.var_re,
                    var_im: e.rect.var_im,
                    cov: e.rect.cov,
                })
                .collect(),
            label: label.0,
            label_source: LABEL_SOURCE.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub toolkit: String,
    pub system: String,
    pub system_digest: String,
    pub split: Option<Split>,
    pub count: usize,
    pub seed_base: u64,
    pub var_mag: f64,
    pub var_ang: f64,
    pub spread: f64,
    pub discards: usize,
    /// Seeds that did not produce a sample (power flow or labeling failed).
    pub discarded_seeds: Vec<u64>,
    pub samples_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub samples: Vec<SampleRecord>,
}

/// Build one sample from its seed, or `None` if the power flow or the
/// labeling solve fails.
pub fn generate_sample(sys: &PowerSystem, placement: &PmuPlacement, cfg: &GenerationConfig, seed: u64) -> Option<SampleRecord> {
    let inj = sample_injections(sys, seed, cfg.spread);
    let op = solve_power_flow(sys, &inj, DEFAULT_TOLERANCE, DEFAULT_MAX_ITER).ok()?;
    let phasors = add_noise(&true_phasors(sys, &op, placement), cfg.var_mag, cfg.var_ang, seed ^ NOISE_SEED_MIX);
    let meas = MeasurementSet::from_polar(&phasors);
    let label = build_model(sys, placement, &meas).and_then(|m| solve_exact(&m)).ok()?;
    Some(SampleRecord::from_parts(seed, cfg.spread, &meas, label))
}

fn jsonl_bytes(samples: &[SampleRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Parse(e.to_string()))?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Generate `cfg.count` samples from seeds `seed_base, seed_base + 1, ...`,
/// skipping seeds whose power flow does not converge.
pub fn generate(sys: &PowerSystem, cfg: &GenerationConfig, split: Option<Split>) -> Result<Dataset> {
    if !(0.0..1.0).contains(&cfg.spread) {
        return Err(Error::Invalid(format!("dataset: spread {} outside [0, 1)", cfg.spread)));
    }
    if !(cfg.var_mag > 0.0 && cfg.var_ang > 0.0 && cfg.var_mag.is_finite() && cfg.var_ang.is_finite()) {
        return Err(Error::Invalid("dataset: variances must be positive and finite".into()));
    }
    let placement = PmuPlacement::maximal(sys);
    let budget = (cfg.count as f64 * MAX_DISCARD_FRACTION).floor() as usize;
    let mut samples = Vec::with_capacity(cfg.count);
    let mut discarded = Vec::new();
    let mut next = 0u64;
    while samples.len() < cfg.count {
        // evaluate a block of candidate seeds in parallel, then accept in order
        let need = cfg.count - samples.len();
        let block: Vec<u64> = (0..need as u64).map(|k| cfg.seed_base.wrapping_add(next + k)).collect();
        next += need as u64;
        let results: Vec<Option<SampleRecord>> = block
            .par_iter()
            .map(|&seed| generate_sample(sys, &placement, cfg, seed))
            .collect();
        for (seed, r) in block.into_iter().zip(results) {
            match r {
                Some(s) if samples.len() < cfg.count => samples.push(s),
                Some(_) => {}
                None => {
                    log::warn!("seed {seed}: sample discarded (power flow or labeling failed)");
                    discarded.push(seed);
                }
            }
        }
        if discarded.len() > budget {
            return Err(Error::DiscardBudget {
                discards: discarded.len(),
                candidates: next,
            });
        }
    }
    let bytes = jsonl_bytes(&samples)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            toolkit: crate::TOOLKIT_VERSION.to_string(),
            system: sys.name.clone(),
            system_digest: sys.digest(),
            split,
            count: cfg.count,
            seed_base: cfg.seed_base,
            var_mag: cfg.var_mag,
            var_ang: cfg.var_ang,
            spread: cfg.spread,
            discards: discarded.len(),
            discarded_seeds: discarded,
            samples_sha256: hex::encode(Sha256::digest(&bytes)),
        },
        samples,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<StateVector> {
        self.samples.iter().map(|s| StateVector(s.label.clone())).collect()
    }

    pub fn check_system(&self, sys: &PowerSystem) -> Result<()> {
        let found = sys.digest();
        if found != self.manifest.system_digest {
            return Err(Error::DigestMismatch {
                expected: self.manifest.system_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn models(&self, sys: &PowerSystem) -> Result<Vec<MeasurementModel>> {
        let placement = PmuPlacement::maximal(sys);
        self.samples
            .par_iter()
            .map(|s| build_model(sys, &placement, &s.measurements()))
            .collect()
    }

    pub fn graphs(&self, sys: &PowerSystem) -> Result<Vec<AugmentedFactorGraph>> {
        self.check_system(sys)?;
        let placement = PmuPlacement::maximal(sys);
        self.samples
            .par_iter()
            .map(|s| {
                let meas = s.measurements();
                let model = build_model(sys, &placement, &meas)?;
                build_graph(&model, &meas, sys.n_buses(), DEFAULT_ENCODING_WIDTH)
            })
            .collect()
    }

    /// Mean per-sample MSE of approximative WLS against the labels.
    pub fn baseline_mse(&self, sys: &PowerSystem) -> Result<f64> {
        self.check_system(sys)?;
        let errors: Vec<f64> = self
            .models(sys)?
            .par_iter()
            .zip(self.samples.par_iter())
            .map(|(m, s)| solve_approximative(m)?.mse(&StateVector(s.label.clone())))
            .collect::<Result<_>>()?;
        Ok(errors.iter().sum::<f64>() / errors.len().max(1) as f64)
    }

    /// Write `samples.jsonl` and `manifest.json` into a new directory. The
    /// files are staged in a sibling directory and renamed into place; an
    /// existing directory is never overwritten.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if dir.exists() {
            return Err(Error::Invalid(format!(
                "dataset: output directory {} already exists",
                dir.display()
            )));
        }
        let staging = staging_path(dir);
        fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
        let write = |name: &str, bytes: &[u8]| -> Result<()> {
            let path = staging.join(name);
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(bytes).map_err(|e| Error::io(&path, e))
        };
        write(SAMPLES_FILE, &jsonl_bytes(&self.samples)?)?;
        let mut manifest = serde_json::to_vec_pretty(&self.manifest).map_err(|e| Error::Parse(e.to_string()))?;
        manifest.push(b'\n');
        write(MANIFEST_FILE, &manifest)?;
        if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
        let samples_path = dir.join(SAMPLES_FILE);
        let bytes = fs::read(&samples_path).map_err(|e| Error::io(&samples_path, e))?;
        let digest = hex::encode(Sha256::digest(&bytes));
        if digest != manifest.samples_sha256 {
            return Err(Error::DigestMismatch {
                expected: manifest.samples_sha256.clone(),
                found: digest,
            });
        }
        let mut samples = Vec::with_capacity(manifest.count);
        for (i, line) in BufReader::new(&bytes[..]).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&samples_path, e))?;
            let record: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("{} line {}: {e}", samples_path.display(), i + 1)))?;
            samples.push(record);
        }
        if samples.len() != manifest.count {
            return Err(Error::Parse(format!(
                "{}: {} samples, manifest says {}",
                samples_path.display(),
                samples.len(),
                manifest.count
            )));
        }
        Ok(Dataset { manifest, samples })
    }

    /// First `n` samples as a smaller dataset.
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let samples: Vec<SampleRecord> = self.samples.iter().take(n).cloned().collect();
        let mut manifest = self.manifest.clone();
        manifest.count = samples.len();
        manifest.samples_sha256 = hex::encode(Sha256::digest(jsonl_bytes(&samples)?));
        Ok(Dataset { manifest, samples })
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.seed)
    }
}

fn staging_path(dir: &Path) -> PathBuf {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    dir.with_file_name(format!(".{name}.partial-{}", std::process::id()))
}
