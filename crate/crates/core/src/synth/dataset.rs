use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{gen_field, gen_meteo, gen_roads, gen_towers, monitor_sites, Archetype, DeviceTruth, PopulationModel, SynthScenario};
use crate::clock::StudyClock;
use crate::error::{Error, Result};
use crate::ingest::{write_meteo, write_monitors, write_roads, write_towers};
use crate::kriging::write_field;

pub const TRUTH_DEVICES_HEADER: &[&str] = &["device_id", "archetype", "planted", "home_tower", "work_tower", "handoffs", "segments"];

/// File names inside a synthetic dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub dir: PathBuf,
}

impl DatasetPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetPaths { dir: dir.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn monitors(&self) -> PathBuf {
        self.file("monitors.csv")
    }
    pub fn meteo(&self) -> PathBuf {
        self.file("meteo.csv")
    }
    pub fn towers(&self) -> PathBuf {
        self.file("towers.csv")
    }
    pub fn roads(&self) -> PathBuf {
        self.file("roads.csv")
    }
    pub fn handoffs(&self) -> PathBuf {
        self.file("handoffs.csv")
    }
    /// True occupancy in the hand-off schema: one row per segment start.
    pub fn truth_occupancy(&self) -> PathBuf {
        self.file("truth_occupancy.csv")
    }
    pub fn truth_devices(&self) -> PathBuf {
        self.file("truth_devices.csv")
    }
    /// Latent field at the towers over the exposure window.
    pub fn truth_field(&self) -> PathBuf {
        self.file("truth_field.csv")
    }
    pub fn manifest(&self) -> PathBuf {
        self.file("manifest.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: SynthScenario,
    pub clock: StudyClock,
    pub phi: f64,
    pub training_sites: Vec<String>,
    pub validation_sites: Vec<String>,
    pub clamped_negative: usize,
    pub towers: usize,
    pub roads: usize,
    pub devices: usize,
    pub handoffs: u64,
    pub archetypes: BTreeMap<Archetype, usize>,
    pub planted: usize,
    pub truth_occupancy: bool,
    pub truth_field: bool,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn write_truth_devices(path: &Path, devices: &[DeviceTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRUTH_DEVICES_HEADER)?;
    for d in devices {
        w.write_record([
            d.device_id.as_str(),
            d.archetype.as_str(),
            if d.planted { "1" } else { "0" },
            d.home_tower.as_str(),
            d.work_tower.as_deref().unwrap_or(""),
            &d.handoffs.to_string(),
            &d.segments.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Generates every input file for one scenario into `dir`.
pub fn write_dataset(scn: &SynthScenario, clock: &StudyClock, dir: &Path) -> Result<Manifest> {
    scn.validate()?;
    clock.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = DatasetPaths::new(dir);

    let monitors = monitor_sites(scn);
    let meteo = gen_meteo(scn, clock)?;
    let roads = gen_roads(scn)?;
    let towers = gen_towers(scn)?;
    let field = gen_field(scn, clock, &monitors, &meteo, &roads, &towers)?;
    log::info!(
        "synth field: {} monitors, {} towers, phi {:.5}, {} negative values clamped",
        monitors.len(),
        towers.len(),
        field.phi,
        field.clamped_negative
    );

    write_monitors(&paths.monitors(), &field.observed)?;
    write_meteo(&paths.meteo(), &meteo)?;
    write_towers(&paths.towers(), &towers)?;
    write_roads(&paths.roads(), &roads)?;
    if let Some(truth) = &field.towers {
        write_field(&paths.truth_field(), truth)?;
    }

    let model = PopulationModel::new(scn, clock, &towers)?;
    let occupancy = scn.population.write_occupancy.then(|| paths.truth_occupancy());
    let summary = model.write(&paths.handoffs(), occupancy.as_deref())?;
    write_truth_devices(&paths.truth_devices(), &summary.devices)?;
    log::info!("synth population: {} devices, {} hand-offs", summary.devices.len(), summary.handoffs);

    let manifest = Manifest {
        scenario: scn.clone(),
        clock: *clock,
        phi: field.phi,
        training_sites: monitors.iter().filter(|s| !s.holdout).map(|s| s.site_id.clone()).collect(),
        validation_sites: monitors.iter().filter(|s| s.holdout).map(|s| s.site_id.clone()).collect(),
        clamped_negative: field.clamped_negative,
        towers: towers.len(),
        roads: roads.len(),
        devices: summary.devices.len(),
        handoffs: summary.handoffs,
        archetypes: summary.archetypes,
        planted: summary.planted,
        truth_occupancy: occupancy.is_some(),
        truth_field: field.towers.is_some(),
    };
    let path = paths.manifest();
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    writeln!(f).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
