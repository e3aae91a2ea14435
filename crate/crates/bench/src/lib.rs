//! Fixtures shared by the criterion benchmarks.

use fgse_core::dataset::{generate, GenerationConfig, Split};
use fgse_core::{AugmentedFactorGraph, GnnConfig, GnnModel, MeasurementModel, PowerSystem, Result};

/// A test set for one system, ready for both estimators.
pub struct Fixture {
    pub system: PowerSystem,
    pub models: Vec<MeasurementModel>,
    pub graphs: Vec<AugmentedFactorGraph>,
    pub gnn: GnnModel,
}

pub fn fixture(case: &str, count: usize, seed: u64) -> Result<Fixture> {
    let system = fgse_core::grid_model::resolve_case(case)?;
    let cfg = GenerationConfig {
        count,
        seed_base: Split::Test.seed_base(seed),
        var_mag: 1e-2,
        var_ang: 0.5,
        spread: 0.5,
    };
    let data = generate(&system, &cfg, Some(Split::Test))?;
    Ok(Fixture {
        models: data.models(&system)?,
        graphs: data.graphs(&system)?,
        gnn: GnnModel::new(GnnConfig::default(), seed)?,
        system,
    })
}
