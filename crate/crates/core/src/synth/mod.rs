//! Ground-truth synthetic inputs: clustered tower layouts, road networks,
//! weather and monitor data drawn from the hierarchical model, and device
//! populations with known schedules.
//!
//! Every random draw comes from a ChaCha8 stream derived from the scenario
//! seed plus a fixed per-purpose salt and an index (hour, device), so output
//! does not depend on thread scheduling.

mod dataset;
mod field;
mod layout;
mod population;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GeoPoint, PlanePoint};

pub use dataset::{write_dataset, write_truth_devices, DatasetPaths, Manifest, TRUTH_DEVICES_HEADER};
pub use field::{gen_field, gen_meteo, simulate_eta, SynthField};
pub use layout::{gen_roads, gen_towers, monitor_sites, station_sites, MonitorSite};
pub use population::{
    Archetype, DeviceSim, DeviceTruth, Population, PopulationModel, PopulationSummary,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn stream(seed: u64, salt: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(index);
    rng
}

/// Latitude/longitude box that bounds every generated point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionBox {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl RegionBox {
    /// Roughly the extent of Connecticut.
    pub fn connecticut() -> Self {
        RegionBox {
            lat_min: 41.0,
            lat_max: 42.03,
            lon_min: -73.72,
            lon_max: -71.80,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: 0.5 * (self.lat_min + self.lat_max),
            lon: 0.5 * (self.lon_min + self.lon_max),
        }
    }
}

impl Default for RegionBox {
    fn default() -> Self {
        RegionBox::connecticut()
    }
}

/// Parent-child clustered tower layout. Towns are parents; masts scatter
/// around towns; each mast carries one or more towers at small offsets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TowerLayout {
    pub count: usize,
    pub clusters: usize,
    pub cluster_sd_km: f64,
    pub mean_per_mast: f64,
    pub offset_median_m: f64,
    pub offset_log_sd: f64,
}

impl Default for TowerLayout {
    fn default() -> Self {
        TowerLayout {
            count: 2000,
            clusters: 80,
            cluster_sd_km: 2.0,
            mean_per_mast: 1.6,
            offset_median_m: 2.5,
            offset_log_sd: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum MonitorLayout {
    /// The twelve Connecticut ozone sites, Stafford and Stratford held out.
    Connecticut,
    /// Uniform sites in the region; the last `holdout` are held out.
    Random { count: usize, holdout: usize },
}

impl Default for MonitorLayout {
    fn default() -> Self {
        MonitorLayout::Connecticut
    }
}

/// Parameters of the generating model. `phi: None` uses the default decay
/// for the training monitors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrueParameters {
    pub beta: [f64; 5],
    pub sigma2_eps: f64,
    pub sigma2_eta: f64,
    pub phi: Option<f64>,
}

impl Default for TrueParameters {
    fn default() -> Self {
        TrueParameters {
            beta: [10.7, 1.02, -0.41, 0.0002, 0.0005],
            sigma2_eps: 13.2,
            sigma2_eta: 174.9,
            phi: None,
        }
    }
}

/// Hourly weather at the stations.
///
/// Temperature is a diurnal cosine peaking at `peak_hour`, an AR(1) daily
/// anomaly, hourly noise, a fixed offset per station, and a daytime term
/// `gradient_c_per_km * a(s)` where `a(s)` is the station's distance along
/// the southwest direction. Wind speed peaks with temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeteoSettings {
    /// Station count. The Connecticut layout keeps its twelve stations and
    /// pads with random ones up to this count.
    pub stations: usize,
    pub temp_mean_c: f64,
    pub diurnal_amplitude_c: f64,
    pub peak_hour: f64,
    pub daily_sd_c: f64,
    pub daily_rho: f64,
    pub hourly_sd_c: f64,
    pub station_sd_c: f64,
    pub gradient_c_per_km: f64,
    pub wind_mean_ms: f64,
    pub wind_diurnal_ms: f64,
    pub wind_sd_ms: f64,
    /// Probability that a station-hour is missing (never hour 0).
    pub gap_rate: f64,
}

impl Default for MeteoSettings {
    fn default() -> Self {
        MeteoSettings {
            stations: 12,
            temp_mean_c: 22.0,
            diurnal_amplitude_c: 16.0,
            peak_hour: 15.0,
            daily_sd_c: 3.0,
            daily_rho: 0.6,
            hourly_sd_c: 1.0,
            station_sd_c: 0.5,
            gradient_c_per_km: 0.05,
            wind_mean_ms: 3.0,
            wind_diurnal_ms: 1.2,
            wind_sd_ms: 0.8,
            gap_rate: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoadLayout {
    pub primary: usize,
    pub primary_vertices: usize,
    pub secondary: usize,
    pub secondary_vertices: usize,
    pub secondary_step_km: f64,
}

impl Default for RoadLayout {
    fn default() -> Self {
        RoadLayout {
            primary: 6,
            primary_vertices: 24,
            secondary: 40,
            secondary_vertices: 8,
            secondary_step_km: 2.5,
        }
    }
}

/// Population shares; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Mix {
    #[serde(rename = "static")]
    pub static_: f64,
    pub commuter_up: f64,
    pub commuter_down: f64,
    pub wanderer: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Mix {
            static_: 0.5,
            commuter_up: 0.2,
            commuter_down: 0.2,
            wanderer: 0.1,
        }
    }
}

/// Local clock times are `HH:MM`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommuteSchedule {
    pub leave: String,
    pub back: String,
    pub jitter_minutes: f64,
    pub min_km: f64,
    pub max_km: f64,
    /// Planted commuters live in the most down-gradient fifth of towers and
    /// travel at least this far up the gradient.
    pub planted_min_km: f64,
    pub planted_max_km: f64,
}

impl Default for CommuteSchedule {
    fn default() -> Self {
        CommuteSchedule {
            leave: "08:00".into(),
            back: "17:00".into(),
            jitter_minutes: 30.0,
            min_km: 8.0,
            max_km: 40.0,
            planted_min_km: 60.0,
            planted_max_km: 110.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WanderSchedule {
    pub start: String,
    pub end: String,
    pub radius_km: f64,
    pub mean_dwell_minutes: f64,
}

impl Default for WanderSchedule {
    fn default() -> Self {
        WanderSchedule {
            start: "09:00".into(),
            end: "19:00".into(),
            radius_km: 6.0,
            mean_dwell_minutes: 90.0,
        }
    }
}

/// Hand-offs that do not come from a change of location: re-registrations
/// with the current tower, and brief excursions to the nearest other tower.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IncidentalNoise {
    pub enabled: bool,
    pub rate_per_hour: f64,
    /// Gamma shape of the per-device rate multiplier.
    pub rate_shape: f64,
    /// Share of devices with no incidental hand-offs at all.
    pub quiet_fraction: f64,
    pub excursion_prob: f64,
    pub excursion_max_s: i64,
}

impl Default for IncidentalNoise {
    fn default() -> Self {
        IncidentalNoise {
            enabled: true,
            rate_per_hour: 0.4,
            rate_shape: 0.8,
            quiet_fraction: 0.06,
            excursion_prob: 0.05,
            excursion_max_s: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSettings {
    pub devices: usize,
    pub mix: Mix,
    /// Share of all devices drawn from the up-gradient commuters as long
    /// range planted commuters.
    pub planted: f64,
    pub commute: CommuteSchedule,
    pub wander: WanderSchedule,
    pub noise: IncidentalNoise,
    /// Also write the true occupancy as a hand-off style table.
    pub write_occupancy: bool,
}

impl Default for PopulationSettings {
    fn default() -> Self {
        PopulationSettings {
            devices: 50_000,
            mix: Mix::default(),
            planted: 0.0,
            commute: CommuteSchedule::default(),
            wander: WanderSchedule::default(),
            noise: IncidentalNoise::default(),
            write_occupancy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthScenario {
    pub seed: u64,
    pub region: RegionBox,
    pub towers: TowerLayout,
    pub monitors: MonitorLayout,
    pub truth: TrueParameters,
    pub meteo: MeteoSettings,
    pub roads: RoadLayout,
    pub population: PopulationSettings,
    /// Simulate the latent field jointly at monitors and towers over the
    /// exposure window. Limited to [`MAX_TRUTH_SITES`] sites.
    pub tower_truth: bool,
}

/// Largest site count for the exact joint field simulation.
pub const MAX_TRUTH_SITES: usize = 2500;

impl Default for SynthScenario {
    fn default() -> Self {
        SynthScenario::desk()
    }
}

impl SynthScenario {
    /// 2,000 towers, the Connecticut monitors and 50,000 devices.
    pub fn desk() -> Self {
        SynthScenario {
            seed: 42,
            region: RegionBox::connecticut(),
            towers: TowerLayout::default(),
            monitors: MonitorLayout::Connecticut,
            truth: TrueParameters::default(),
            meteo: MeteoSettings::default(),
            roads: RoadLayout::default(),
            population: PopulationSettings::default(),
            tower_truth: true,
        }
    }

    /// 10,000 towers and 400,000 devices with about 50 million hand-offs.
    /// The tower field comes from fitting and predicting.
    pub fn stress() -> Self {
        let mut s = SynthScenario::desk();
        s.towers.count = 10_000;
        s.towers.clusters = 160;
        s.population.devices = 400_000;
        s.population.noise.rate_per_hour = 0.73;
        s.population.noise.quiet_fraction = 0.1;
        s.population.write_occupancy = false;
        s.tower_truth = false;
        s
    }

    /// Strong southwest-to-northeast daytime gradient with a planted cohort
    /// of long up-gradient commuters.
    pub fn gradient() -> Self {
        let mut s = SynthScenario::desk();
        s.meteo.gradient_c_per_km = 0.3;
        s.truth.beta[3] = 0.0;
        s.truth.beta[4] = 0.0;
        s.truth.sigma2_eta = 4.0;
        s.meteo.stations = 150;
        s.population.planted = 0.004;
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(SynthScenario::desk()),
            "stress" => Ok(SynthScenario::stress()),
            "gradient" => Ok(SynthScenario::gradient()),
            _ => Err(Error::invalid(format!(
                "unknown synth preset `{name}` (expected desk, stress or gradient)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.region;
        if !(r.lat_min < r.lat_max && r.lon_min < r.lon_max) {
            return Err(Error::invalid("synth region box is empty"));
        }
        GeoPoint::new(r.lat_min, r.lon_min)?;
        GeoPoint::new(r.lat_max, r.lon_max)?;
        let t = &self.towers;
        if t.count < 2 || t.clusters == 0 {
            return Err(Error::invalid("synth needs at least two towers and one cluster"));
        }
        if !(t.cluster_sd_km > 0.0 && t.mean_per_mast >= 1.0 && t.offset_median_m > 0.0 && t.offset_log_sd >= 0.0) {
            return Err(Error::invalid("tower layout parameters out of range"));
        }
        if let MonitorLayout::Random { count, holdout } = self.monitors {
            if count < holdout + 2 {
                return Err(Error::invalid("random monitor layout needs at least two training sites"));
            }
        }
        let p = &self.truth;
        if p.beta.iter().any(|b| !b.is_finite()) || !(p.sigma2_eps >= 0.0) || !(p.sigma2_eta >= 0.0) {
            return Err(Error::invalid("true parameters must be finite with non-negative variances"));
        }
        if let Some(phi) = p.phi {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(Error::invalid("true phi must be positive"));
            }
        }
        let m = &self.meteo;
        if m.stations == 0 || !(0.0..1.0).contains(&m.gap_rate) || !(-1.0..1.0).contains(&m.daily_rho) {
            return Err(Error::invalid("meteorology settings out of range"));
        }
        if [m.daily_sd_c, m.hourly_sd_c, m.station_sd_c, m.wind_sd_ms].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::invalid("meteorology standard deviations must be non-negative"));
        }
        let rd = &self.roads;
        if rd.primary == 0 || rd.secondary == 0 || rd.primary_vertices < 2 || rd.secondary_vertices < 2 {
            return Err(Error::invalid("synth needs primary and secondary roads with two or more vertices"));
        }
        let pop = &self.population;
        if pop.devices == 0 {
            return Err(Error::invalid("synth population is empty"));
        }
        let mix = pop.mix;
        let shares = [mix.static_, mix.commuter_up, mix.commuter_down, mix.wanderer];
        if shares.iter().any(|s| !(*s >= 0.0)) || (shares.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("population mix must be non-negative and sum to 1"));
        }
        if !(pop.planted >= 0.0 && pop.planted <= mix.commuter_up) {
            return Err(Error::invalid("planted share must lie within the up-gradient commuter share"));
        }
        let c = &pop.commute;
        if !(c.min_km > 0.0 && c.min_km <= c.max_km && c.planted_min_km <= c.planted_max_km) || !(c.jitter_minutes >= 0.0) {
            return Err(Error::invalid("commute distances out of range"));
        }
        let leave = population::parse_hhmm(&c.leave)?;
        let back = population::parse_hhmm(&c.back)?;
        let jitter = (c.jitter_minutes * 60.0) as i64;
        if leave - jitter < 6 * 3600 + 1800 || back + jitter > 20 * 3600 || leave + jitter >= back - jitter {
            return Err(Error::invalid(
                "commute must leave after 06:30 and return before 20:00, jitter included",
            ));
        }
        let w = &pop.wander;
        let (ws, we) = (population::parse_hhmm(&w.start)?, population::parse_hhmm(&w.end)?);
        if ws < 6 * 3600 + 1800 + jitter || we + jitter > 20 * 3600 || ws >= we {
            return Err(Error::invalid("wandering must happen between 06:30 and 20:00"));
        }
        if !(w.radius_km > 0.0 && w.mean_dwell_minutes > 0.0) {
            return Err(Error::invalid("wander radius and dwell must be positive"));
        }
        let n = &pop.noise;
        if !(n.rate_per_hour >= 0.0 && n.rate_shape > 0.0)
            || !(0.0..=1.0).contains(&n.quiet_fraction)
            || !(0.0..=1.0).contains(&n.excursion_prob)
            || n.excursion_max_s < 30
        {
            return Err(Error::invalid("incidental noise settings out of range"));
        }
        Ok(())
    }
}

/// Distance along the southwest direction, the axis of higher daytime
/// concentration.
pub fn gradient_coordinate(p: PlanePoint) -> f64 {
    -(p.x + p.y) * std::f64::consts::FRAC_1_SQRT_2
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "stress", "gradient"] {
            SynthScenario::preset(name).unwrap().validate().unwrap();
        }
        assert!(SynthScenario::preset("huge").is_err());
    }

    #[test]
    fn bad_mix_rejected() {
        let mut s = SynthScenario::desk();
        s.population.mix.wanderer = 0.2;
        assert!(s.validate().is_err());
        let mut s = SynthScenario::desk();
        s.population.planted = 0.5;
        assert!(s.validate().is_err());
        let mut s = SynthScenario::desk();
        s.population.commute.leave = "06:00".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn scenario_toml_round_trip() {
        let s = SynthScenario::gradient();
        let text = toml::to_string(&s).unwrap();
        let back: SynthScenario = toml::from_str(&text).unwrap();
        assert_eq!(back, s);
        let partial: SynthScenario = toml::from_str("seed = 7\n[population]\ndevices = 10\n").unwrap();
        assert_eq!(partial.population.devices, 10);
        assert_eq!(partial.towers, TowerLayout::default());
    }
}
