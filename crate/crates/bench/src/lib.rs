//! Shared fixtures for the benchmarks. Core types are re-exported so bench
//! code only names this crate.

use std::path::Path;

pub use mobexp_core::clock::{StudyClock, Window};
pub use mobexp_core::covariates::DesignMatrix;
pub use mobexp_core::exposure::{assess, ExposureOptions, ExposureOutputs, FieldIndex};
pub use mobexp_core::geo::{haversine_m, GeoPoint, PlanePoint, SpatialGrid};
pub use mobexp_core::gp::{gibbs_fit, FixedVariances, GpSpec, McmcSettings, Priors};
pub use mobexp_core::ingest::{load_towers, HandoffTable, TowerTable};
pub use mobexp_core::kriging::{read_field, HourlyField, Provenance};
pub use mobexp_core::mobility::{build_trajectories, night_profiles, TrajectorySet};
pub use mobexp_core::synth::{write_dataset, DatasetPaths, SynthScenario};
pub use mobexp_core::{Error, Result};

/// A small synthetic study loaded into memory.
pub struct Fixture {
    pub clock: StudyClock,
    pub towers: TowerTable,
    pub handoffs: HandoffTable,
    pub field: HourlyField,
}

impl Fixture {
    pub fn generate(dir: &Path, towers: usize, devices: usize) -> Result<Self> {
        let mut scn = SynthScenario::desk();
        scn.towers.count = towers;
        scn.towers.clusters = (towers / 25).max(1);
        scn.population.devices = devices;
        scn.population.write_occupancy = false;
        let clock = StudyClock::connecticut_2016();
        write_dataset(&scn, &clock, dir)?;
        let paths = DatasetPaths::new(dir);
        let towers = load_towers(&paths.towers())?;
        let handoffs = HandoffTable::load(&paths.handoffs(), &towers)?;
        let field = read_field(&paths.truth_field(), Provenance::SyntheticTruth)?;
        Ok(Fixture { clock, towers, handoffs, field })
    }
}

/// `n` sites on a line `spacing_km` apart with a random-looking but fixed
/// design over `hours`, and a matching response.
pub fn toy_problem(n: usize, hours: usize, spacing_km: f64) -> Result<(GpSpec, Vec<f64>, DesignMatrix)> {
    let sites: Vec<PlanePoint> = (0..n).map(|i| PlanePoint { x: i as f64 * spacing_km, y: 0.0 }).collect();
    let mut data = Vec::with_capacity(n * hours * 5);
    let mut z = Vec::with_capacity(n * hours);
    for h in 0..hours {
        for s in 0..n {
            let temp = 22.0 + 8.0 * (h as f64 * 0.26).sin() + s as f64 * 0.1;
            let wind = 3.0 + (h as f64 * 0.11 + s as f64).cos();
            let row = [1.0, temp, wind, 500.0 + 40.0 * (s * s) as f64, 2000.0 / (1.0 + s as f64)];
            z.push(10.7 + 1.02 * temp - 0.41 * wind + 0.1 * (((h * 7 + s * 13) % 17) as f64 - 8.0));
            data.extend_from_slice(&row);
        }
    }
    let spec = GpSpec {
        sites,
        hours,
        phi: 3.0 / (spacing_km * (n.max(2) - 1) as f64),
        priors: Priors::default(),
        mcmc: McmcSettings::default(),
        fixed: FixedVariances::default(),
    };
    Ok((spec, z, DesignMatrix::from_rows(n, 0, hours, data)?))
}
