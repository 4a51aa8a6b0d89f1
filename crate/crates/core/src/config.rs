//! Declarative run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clock::{days_from_civil, parse_rfc3339, parse_utc_offset, NightWindow, StudyClock, Window, SECS_PER_DAY, SECS_PER_HOUR};
use crate::error::{Error, Result};
use crate::exposure::{ExposureOptions, Max8Rule};
use crate::gp::{McmcSettings, Priors};
use crate::kriging::PredictMode;
use crate::synth::{DatasetPaths, SynthScenario};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core, 1 is the deterministic reference mode.
    pub threads: usize,
    pub out: PathBuf,
    pub paths: InputPaths,
    pub study: StudySettings,
    pub model: ModelSettings,
    pub predict: PredictSettings,
    pub mobility: MobilitySettings,
    pub exposure: ExposureSettings,
    pub synth: SynthSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            threads: 0,
            out: PathBuf::from("out"),
            paths: InputPaths::default(),
            study: StudySettings::default(),
            model: ModelSettings::default(),
            predict: PredictSettings::default(),
            mobility: MobilitySettings::default(),
            exposure: ExposureSettings::default(),
            synth: SynthSettings::default(),
        }
    }
}

/// Input files. Anything left unset points at the `synth` stage output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InputPaths {
    pub monitors: Option<PathBuf>,
    pub meteo: Option<PathBuf>,
    pub towers: Option<PathBuf>,
    pub roads: Option<PathBuf>,
    pub handoffs: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySettings {
    /// UTC instant of hour index 0.
    pub clock_start: String,
    pub hours: usize,
    /// Local date on which the exposure window opens.
    pub window_start: String,
    pub window_days: usize,
    pub utc_offset: String,
    pub night_start: String,
    pub night_end: String,
}

impl Default for StudySettings {
    fn default() -> Self {
        StudySettings {
            clock_start: "2016-07-06T04:00:00Z".into(),
            hours: 744,
            window_start: "2016-07-18".into(),
            window_days: 7,
            utc_offset: "-04:00".into(),
            night_start: "20:00".into(),
            night_end: "06:30".into(),
        }
    }
}

fn parse_date(s: &str) -> Result<i64> {
    let bad = || Error::invalid(format!("expected a date like 2016-07-18, found `{s}`"));
    let mut it = s.split('-');
    let (y, m, d) = (it.next(), it.next(), it.next());
    if it.next().is_some() {
        return Err(bad());
    }
    let y: i64 = y.and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let m: u32 = m.and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let d: u32 = d.and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    if !(1..=12).contains(&m) || !(1..=31).contains(&d) {
        return Err(bad());
    }
    Ok(days_from_civil(y, m, d))
}

impl StudySettings {
    pub fn clock(&self) -> Result<StudyClock> {
        let clock_start = parse_rfc3339(&self.clock_start)
            .ok_or_else(|| Error::invalid(format!("bad study.clock_start `{}`", self.clock_start)))?;
        let utc_offset = parse_utc_offset(&self.utc_offset)?;
        if utc_offset % SECS_PER_HOUR != 0 {
            return Err(Error::invalid("study.utc_offset must be a whole number of hours"));
        }
        let start = parse_date(&self.window_start)? * SECS_PER_DAY - utc_offset;
        let clock = StudyClock {
            clock_start,
            hours: self.hours,
            window: Window::new(start, start + self.window_days as i64 * SECS_PER_DAY)?,
            utc_offset,
            night: NightWindow::parse(&self.night_start, &self.night_end)?,
        };
        clock.validate()?;
        Ok(clock)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSettings {
    /// Monitors held out of the fit and used by `validate`.
    pub validation_sites: Vec<String>,
    /// Spatial decay per km; unset means 3 / max training-site distance.
    pub phi: Option<f64>,
    pub burn_in: usize,
    pub keep: usize,
    pub latent_thin: usize,
    pub beta_var: f64,
    pub ig_shape: f64,
    pub ig_scale: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let (m, p) = (McmcSettings::default(), Priors::default());
        ModelSettings {
            validation_sites: vec!["Stafford".into(), "Stratford".into()],
            phi: None,
            burn_in: m.burn_in,
            keep: m.keep,
            latent_thin: m.latent_thin,
            beta_var: p.beta_var,
            ig_shape: p.ig_shape,
            ig_scale: p.ig_scale,
        }
    }
}

impl ModelSettings {
    pub fn priors(&self) -> Priors {
        Priors {
            beta_var: self.beta_var,
            ig_shape: self.ig_shape,
            ig_scale: self.ig_scale,
        }
    }

    pub fn mcmc(&self, seed: u64) -> McmcSettings {
        McmcSettings {
            burn_in: self.burn_in,
            keep: self.keep,
            latent_thin: self.latent_thin,
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictSettings {
    pub mode: PredictMode,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MobilitySettings {
    /// Keep only devices whose every hand-off lands on a tower in this box.
    pub region: Option<crate::synth::RegionBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExposureSettings {
    pub max8_window_hours: usize,
    pub max8_min_valid: usize,
    pub write_hourly: bool,
    pub exact_limit: usize,
    /// Tail fraction for the extreme-bias cohorts.
    pub cohort_q: f64,
    pub field: FieldSource,
}

/// Which tower field the exposure stage reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldSource {
    /// Posterior-predictive means from the `predict` stage.
    #[default]
    Predicted,
    /// The generator's latent field at the towers.
    Truth,
}

impl Default for ExposureSettings {
    fn default() -> Self {
        let o = ExposureOptions::default();
        ExposureSettings {
            max8_window_hours: o.max8.window_hours,
            max8_min_valid: o.max8.min_valid,
            write_hourly: o.write_hourly,
            exact_limit: o.exact_limit,
            cohort_q: 0.01,
            field: FieldSource::Predicted,
        }
    }
}

impl ExposureSettings {
    pub fn options(&self) -> ExposureOptions {
        ExposureOptions {
            max8: Max8Rule {
                window_hours: self.max8_window_hours,
                min_valid: self.max8_min_valid,
            },
            write_hourly: self.write_hourly,
            exact_limit: self.exact_limit,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSettings {
    pub preset: String,
    /// Merged key by key over the preset, e.g. `population.devices = 1000`.
    pub overrides: toml::Table,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings {
            preset: "desk".into(),
            overrides: toml::Table::new(),
        }
    }
}

fn merge(base: &mut toml::Table, over: &toml::Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

impl SynthSettings {
    /// The preset with overrides applied; the run seed always wins.
    pub fn scenario(&self, seed: u64) -> Result<SynthScenario> {
        let base = SynthScenario::preset(&self.preset)?;
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::invalid(e.to_string()))?;
        merge(&mut table, &self.overrides);
        let mut scn: SynthScenario = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::invalid(format!("synth.overrides: {}", e.message())))?;
        scn.seed = seed;
        scn.validate()?;
        Ok(scn)
    }
}

impl RunConfig {
    /// Parses a config file; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve(base);
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid(format!("config: {}", e.message())))
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out);
        let p = &mut self.paths;
        for slot in [&mut p.monitors, &mut p.meteo, &mut p.towers, &mut p.roads, &mut p.handoffs] {
            if let Some(v) = slot.as_mut() {
                fix(v);
            }
        }
    }

    /// Checks every section, so a bad setting fails before any stage runs.
    pub fn validate(&self) -> Result<()> {
        self.study.clock()?;
        let m = &self.model;
        if let Some(phi) = m.phi {
            if !(phi > 0.0 && phi.is_finite()) {
                return Err(Error::invalid(format!("model.phi must be positive, got {phi}")));
            }
        }
        if m.burn_in < 1 || m.keep < 1 || m.latent_thin < 1 {
            return Err(Error::invalid("model.burn_in, keep and latent_thin must be at least 1"));
        }
        if !(m.beta_var > 0.0 && m.ig_shape > 0.0 && m.ig_scale > 0.0) {
            return Err(Error::invalid("model prior hyperparameters must be positive"));
        }
        let mut ids = m.validation_sites.clone();
        ids.sort();
        ids.dedup();
        if ids.len() != m.validation_sites.len() {
            return Err(Error::invalid("model.validation_sites lists a site twice"));
        }
        let e = &self.exposure;
        if e.max8_window_hours == 0 || e.max8_window_hours > 24 || e.max8_min_valid == 0 || e.max8_min_valid > e.max8_window_hours {
            return Err(Error::invalid("exposure.max8 needs 1 <= min_valid <= window_hours <= 24"));
        }
        if !(e.cohort_q > 0.0 && e.cohort_q < 0.5) {
            return Err(Error::invalid("exposure.cohort_q must lie in (0, 0.5)"));
        }
        if let Some(r) = &self.mobility.region {
            if !(r.lat_min < r.lat_max && r.lon_min < r.lon_max) {
                return Err(Error::invalid("mobility.region is empty"));
            }
        }
        self.synth.scenario(self.seed)?;
        Ok(())
    }

    pub fn clock(&self) -> Result<StudyClock> {
        self.study.clock()
    }

    pub fn synth_dir(&self) -> PathBuf {
        self.out.join("synth")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out.join(stage)
    }

    fn input(&self, slot: &Option<PathBuf>, default: impl Fn(&DatasetPaths) -> PathBuf) -> PathBuf {
        slot.clone().unwrap_or_else(|| default(&DatasetPaths::new(self.synth_dir())))
    }

    pub fn monitors(&self) -> PathBuf {
        self.input(&self.paths.monitors, DatasetPaths::monitors)
    }
    pub fn meteo(&self) -> PathBuf {
        self.input(&self.paths.meteo, DatasetPaths::meteo)
    }
    pub fn towers(&self) -> PathBuf {
        self.input(&self.paths.towers, DatasetPaths::towers)
    }
    pub fn roads(&self) -> PathBuf {
        self.input(&self.paths.roads, DatasetPaths::roads)
    }
    pub fn handoffs(&self) -> PathBuf {
        self.input(&self.paths.handoffs, DatasetPaths::handoffs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_the_connecticut_clock() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.clock().unwrap(), StudyClock::connecticut_2016());
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(RunConfig::parse("sed = 3").is_err());
        let cfg = RunConfig::parse("[exposure]\ncohort_q = 0.7").unwrap();
        assert!(cfg.validate().unwrap_err().is_validation());
        let cfg = RunConfig::parse("[study]\nwindow_start = \"2016-07-18\"\nwindow_days = 40").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = RunConfig::parse("[synth]\npreset = \"huge\"").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn overrides_merge_into_the_preset() {
        let cfg = RunConfig::parse(
            "seed = 7\n[synth]\npreset = \"desk\"\n[synth.overrides.population]\ndevices = 123\n[synth.overrides.population.mix]\nstatic = 1.0\ncommuter_up = 0.0\ncommuter_down = 0.0\nwanderer = 0.0\n",
        )
        .unwrap();
        let scn = cfg.synth.scenario(cfg.seed).unwrap();
        assert_eq!(scn.seed, 7);
        assert_eq!(scn.population.devices, 123);
        assert_eq!(scn.population.mix.static_, 1.0);
        assert_eq!(scn.towers, SynthScenario::desk().towers);
        let bad = RunConfig::parse("[synth.overrides.population]\ndevicez = 1\n").unwrap();
        assert!(bad.synth.scenario(1).is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "out = \"res\"\n[paths]\ntowers = \"data/t.csv\"\n").unwrap();
        let (cfg, text) = RunConfig::load(&p).unwrap();
        assert!(text.contains("res"));
        assert_eq!(cfg.out, dir.path().join("res"));
        assert_eq!(cfg.towers(), dir.path().join("data/t.csv"));
        assert_eq!(cfg.monitors(), dir.path().join("res/synth/monitors.csv"));
    }
}
