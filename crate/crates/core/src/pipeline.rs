//! Stage runners behind the `mobexp` subcommands.
//!
//! Every stage reads its inputs from disk, writes into `<out>/<stage>/` and
//! finishes with a `meta.json` holding the config, the seed and SHA-256
//! digests of everything it read and wrote.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::StudyClock;
use crate::config::{FieldSource, RunConfig};
use crate::covariates::{build_design, fill_meteo, road_distances, DesignMatrix};
use crate::error::{Error, Result};
use crate::exposure::{assess, extreme_cohorts, write_cohort, write_excluded, BiasReport, ExposureOutputs, FieldIndex};
use crate::geo::{GeoPoint, PlanePoint, Projection};
use crate::gp::{
    default_phi, diagnostics, gibbs_fit, read_posterior, residual_summary, write_posterior, GpPosterior, GpSpec, PosteriorMeta,
    PARAM_NAMES,
};
use crate::ingest::{load_meteo, load_monitors, load_roads, load_towers, HandoffTable, MeteoSeries, MonitorSeries, Road, TowerTable};
use crate::kriging::{predict, read_field, validate, write_field, write_validation_sites, PredictOptions, Provenance};
use crate::mobility::{
    build_trajectories, network_stats, night_profiles, read_night_profiles, read_trajectories, region_flags, write_distances,
    write_handoff_hist, write_night_profiles, write_trajectories,
};
use crate::stats::{quantile_sorted, sort_values, Histogram, Summary, SUMMARY_PROBS};
use crate::synth::{write_dataset, DatasetPaths};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Synth,
    Fit,
    Validate,
    Predict,
    Mobility,
    Expose,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::Fit,
        Stage::Validate,
        Stage::Predict,
        Stage::Mobility,
        Stage::Expose,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Fit => "fit",
            Stage::Validate => "validate",
            Stage::Predict => "predict",
            Stage::Mobility => "mobility",
            Stage::Expose => "expose",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub stage: Stage,
    pub seed: u64,
    /// The config file exactly as read.
    pub config_text: String,
    /// The config after command-line overrides and path resolution.
    pub config: RunConfig,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Position-independent name for a digest entry.
fn display(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// A validated configuration ready to run stages.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub cfg: RunConfig,
    pub config_text: String,
    clock: StudyClock,
}

struct StageRun<'a> {
    p: &'a Pipeline,
    stage: Stage,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl StageRun<'_> {
    /// Registers an upstream file, failing if it has not been produced.
    fn input(&mut self, path: PathBuf, producer: Stage) -> Result<PathBuf> {
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                path,
                stage: producer.as_str(),
            });
        }
        self.inputs.push(path.clone());
        Ok(path)
    }

    /// A user-supplied input, or the synth output when none was configured.
    fn source(&mut self, configured: &Option<PathBuf>, resolved: PathBuf) -> Result<PathBuf> {
        if configured.is_some() && !resolved.is_file() {
            return Err(Error::invalid(format!("input file {} does not exist", resolved.display())));
        }
        self.input(resolved, Stage::Synth)
    }

    fn output(&mut self, name: &str) -> PathBuf {
        let p = self.dir.join(name);
        self.outputs.push(p.clone());
        p
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.output(name);
        write_json(&path, value)
    }

    fn finish(self) -> Result<StageMeta> {
        let root = &self.p.cfg.out;
        let digest = |paths: &[PathBuf]| -> Result<Vec<FileDigest>> {
            paths
                .iter()
                .map(|p| {
                    Ok(FileDigest {
                        path: display(p, root),
                        sha256: sha256_file(p)?,
                    })
                })
                .collect()
        };
        let meta = StageMeta {
            stage: self.stage,
            seed: self.p.cfg.seed,
            config_text: self.p.config_text.clone(),
            config: self.p.cfg.clone(),
            inputs: digest(&self.inputs)?,
            outputs: digest(&self.outputs)?,
        };
        write_json(&self.dir.join("meta.json"), &meta)?;
        Ok(meta)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Geometry and settings of a fitted model, written by `fit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitModel {
    /// Projection origin: centroid of every monitor in the input file.
    pub origin: GeoPoint,
    pub phi: f64,
    pub hours: usize,
    pub training_sites: Vec<String>,
    pub training_locations: Vec<GeoPoint>,
    pub validation_sites: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MobilitySummary {
    pub records: usize,
    pub devices: usize,
    pub kept: usize,
    pub dropped: usize,
    pub segments: usize,
    pub no_night_tower: usize,
    pub nearest_quartiles_m: [f64; 3],
    pub handoff_quartiles: [f64; 3],
    pub single_handoff_devices: usize,
    pub towers_sha256: String,
}

struct Inputs {
    monitors: Vec<MonitorSeries>,
    meteo: Vec<MeteoSeries>,
    roads: Vec<Road>,
}

struct Fitted {
    model: FitModel,
    proj: Projection,
    spec: GpSpec,
    post: GpPosterior,
    fit_x: DesignMatrix,
    inputs: Inputs,
}

fn split_sites<'a>(all: &'a [MonitorSeries], holdout: &[String]) -> Result<(Vec<&'a MonitorSeries>, Vec<&'a MonitorSeries>)> {
    for id in holdout {
        if !all.iter().any(|s| &s.site_id == id) {
            return Err(Error::invalid(format!("validation site {id} is not in the monitor file")));
        }
    }
    Ok(all.iter().partition(|s| !holdout.contains(&s.site_id)))
}

fn locations(series: &[&MonitorSeries]) -> Vec<GeoPoint> {
    series.iter().map(|s| s.location).collect()
}

fn project_all(proj: &Projection, pts: &[GeoPoint]) -> Result<Vec<PlanePoint>> {
    pts.iter().map(|&p| proj.project(p)).collect()
}

impl Pipeline {
    pub fn new(cfg: RunConfig, config_text: String) -> Result<Self> {
        cfg.validate()?;
        let clock = cfg.clock()?;
        Ok(Pipeline { cfg, config_text, clock })
    }

    pub fn clock(&self) -> &StudyClock {
        &self.clock
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.cfg.stage_dir(stage.as_str())
    }

    /// Runs one stage inside a pool of `cfg.threads` workers.
    pub fn run(&self, stage: Stage) -> Result<StageMeta> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.threads)
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| self.run_here(stage))
    }

    fn run_here(&self, stage: Stage) -> Result<StageMeta> {
        let dir = self.stage_dir(stage);
        let mut run = StageRun {
            p: self,
            stage,
            dir: dir.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        // Upstream checks happen before the output directory is touched.
        match stage {
            Stage::Synth => {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                self.synth(&mut run)?
            }
            Stage::Fit => self.fit(&mut run)?,
            Stage::Validate => self.validate(&mut run)?,
            Stage::Predict => self.predict(&mut run)?,
            Stage::Mobility => self.mobility(&mut run)?,
            Stage::Expose => self.expose(&mut run)?,
            Stage::Report => self.report(&mut run)?,
        }
        log::info!("{} stage wrote {} files to {}", stage.as_str(), run.outputs.len(), dir.display());
        run.finish()
    }

    fn make_dir(&self, run: &StageRun) -> Result<()> {
        std::fs::create_dir_all(&run.dir).map_err(|e| Error::io(&run.dir, e))
    }

    fn synth(&self, run: &mut StageRun) -> Result<()> {
        let scn = self.cfg.synth.scenario(self.cfg.seed)?;
        let manifest = write_dataset(&scn, &self.clock, &run.dir)?;
        let paths = DatasetPaths::new(&run.dir);
        let mut files = vec![paths.monitors(), paths.meteo(), paths.towers(), paths.roads(), paths.handoffs(), paths.truth_devices()];
        if manifest.truth_occupancy {
            files.push(paths.truth_occupancy());
        }
        if manifest.truth_field {
            files.push(paths.truth_field());
        }
        files.push(paths.manifest());
        run.outputs.extend(files);
        Ok(())
    }

    fn load_inputs(&self, run: &mut StageRun) -> Result<Inputs> {
        let c = &self.cfg;
        let mp = run.source(&c.paths.monitors, c.monitors())?;
        let wp = run.source(&c.paths.meteo, c.meteo())?;
        let rp = run.source(&c.paths.roads, c.roads())?;
        let set = load_monitors(&mp)?;
        if set.clamped_negative > 0 {
            log::warn!("{} negative ozone values clamped to zero", set.clamped_negative);
        }
        let raw = load_meteo(&wp)?;
        Ok(Inputs {
            monitors: set.series,
            meteo: fill_meteo(&raw)?,
            roads: load_roads(&rp)?,
        })
    }

    fn design(&self, sites: &[GeoPoint], inputs: &Inputs, hours: std::ops::Range<usize>) -> Result<DesignMatrix> {
        let rd = road_distances(sites, &inputs.roads)?;
        build_design(sites, &inputs.meteo, &rd, hours)
    }

    fn fit(&self, run: &mut StageRun) -> Result<()> {
        let inputs = self.load_inputs(run)?;
        let hours = self.clock.hours;
        let (train, _) = split_sites(&inputs.monitors, &self.cfg.model.validation_sites)?;
        if train.is_empty() {
            return Err(Error::invalid("every monitor is held out; nothing left to fit"));
        }
        let all: Vec<GeoPoint> = inputs.monitors.iter().map(|s| s.location).collect();
        let proj = Projection::centroid(&all)?;
        let geo = locations(&train);
        let plane = project_all(&proj, &geo)?;
        let n = train.len();
        let mut z = vec![0.0; n * hours];
        for (s, series) in train.iter().enumerate() {
            if series.values.len() < hours {
                return Err(Error::invalid(format!(
                    "monitor {} covers {} hours; the study clock has {hours}",
                    series.site_id,
                    series.values.len()
                )));
            }
            let gaps = series.values[..hours].iter().filter(|v| v.is_none()).count();
            if gaps > 0 {
                return Err(Error::invalid(format!(
                    "training monitor {} has {gaps} missing hours; the model needs complete training series",
                    series.site_id
                )));
            }
            for t in 0..hours {
                z[t * n + s] = series.values[t].unwrap();
            }
        }
        let x = self.design(&geo, &inputs, 0..hours)?;
        let phi = match self.cfg.model.phi {
            Some(phi) => phi,
            None => default_phi(&plane)?,
        };
        let spec = GpSpec {
            sites: plane,
            hours,
            phi,
            priors: self.cfg.model.priors(),
            mcmc: self.cfg.model.mcmc(self.cfg.seed),
            fixed: Default::default(),
        };
        self.make_dir(run)?;
        log::info!("fitting {n} sites x {hours} hours, phi {phi:.5}");
        let post = gibbs_fit(&spec, &z, &x)?;
        let meta = PosteriorMeta {
            seed: spec.mcmc.seed,
            phi,
            priors: spec.priors,
            burn_in: spec.mcmc.burn_in,
            keep: spec.mcmc.keep,
            latent_thin: spec.mcmc.latent_thin,
        };
        let (params, latent) = (run.output("posterior.csv"), run.output("latent.bin"));
        write_posterior(&params, &latent, &post, &meta)?;

        let summary = run.output("summary.csv");
        let mut w = csv::Writer::from_path(&summary)?;
        w.write_record(["parameter", "mean", "median", "sd", "q025", "q975"])?;
        for (i, name) in PARAM_NAMES.iter().enumerate() {
            let mut c = post.chain(i);
            sort_values(&mut c);
            let s = Summary::of_sorted(&c);
            w.write_record([
                name.to_string(),
                s.mean.to_string(),
                s.median().to_string(),
                s.sd.to_string(),
                quantile_sorted(&c, 0.025).to_string(),
                quantile_sorted(&c, 0.975).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&summary, e))?;
        run.json("diagnostics.json", &diagnostics(&post)?)?;
        run.json("residuals.json", &residual_summary(&post, &z, &x)?)?;
        run.json(
            "model.json",
            &FitModel {
                origin: proj.origin,
                phi,
                hours,
                training_sites: train.iter().map(|s| s.site_id.clone()).collect(),
                training_locations: geo,
                validation_sites: self.cfg.model.validation_sites.clone(),
            },
        )
    }

    fn load_fit(&self, run: &mut StageRun) -> Result<Fitted> {
        let dir = self.stage_dir(Stage::Fit);
        let model_path = run.input(dir.join("model.json"), Stage::Fit)?;
        let params = run.input(dir.join("posterior.csv"), Stage::Fit)?;
        let latent = run.input(dir.join("latent.bin"), Stage::Fit)?;
        let inputs = self.load_inputs(run)?;
        let model: FitModel = read_json(&model_path)?;
        let (post, meta) = read_posterior(&params, &latent)?;
        if model.hours != self.clock.hours {
            return Err(Error::invalid(format!(
                "the fit covers {} hours but the study clock has {}; rerun `fit`",
                model.hours, self.clock.hours
            )));
        }
        let mut ids = model.validation_sites.clone();
        let mut want = self.cfg.model.validation_sites.clone();
        ids.sort();
        want.sort();
        if ids != want {
            return Err(Error::invalid("model.validation_sites changed since the fit; rerun `fit`"));
        }
        let proj = Projection::new(model.origin);
        let spec = GpSpec {
            sites: project_all(&proj, &model.training_locations)?,
            hours: model.hours,
            phi: meta.phi,
            priors: meta.priors,
            mcmc: self.cfg.model.mcmc(meta.seed),
            fixed: Default::default(),
        };
        let fit_x = self.design(&model.training_locations, &inputs, 0..model.hours)?;
        Ok(Fitted {
            model,
            proj,
            spec,
            post,
            fit_x,
            inputs,
        })
    }

    fn predict_opts(&self) -> PredictOptions {
        PredictOptions {
            mode: self.cfg.predict.mode,
            seed: self.cfg.seed,
        }
    }

    fn validate(&self, run: &mut StageRun) -> Result<()> {
        let f = self.load_fit(run)?;
        let (_, held) = split_sites(&f.inputs.monitors, &f.model.validation_sites)?;
        if held.is_empty() {
            return Err(Error::invalid("no validation sites are configured"));
        }
        let geo = locations(&held);
        let x = self.design(&geo, &f.inputs, 0..f.model.hours)?;
        let ids: Vec<String> = held.iter().map(|s| s.site_id.clone()).collect();
        let field = predict(&f.post, &f.spec, &f.fit_x, ids, &project_all(&f.proj, &geo)?, &x, self.predict_opts())?;
        let held: Vec<MonitorSeries> = held.into_iter().cloned().collect();
        let report = validate(&field, &held, &f.model.training_sites)?;
        log::info!("validation rmse {:.3}, rbias {:.4}, rmsep {:.4}", report.rmse, report.rbias, report.rmsep);
        self.make_dir(run)?;
        let sites = run.output("validation_series.csv");
        write_validation_sites(&sites, &report)?;
        #[derive(Serialize)]
        struct Headline<'a> {
            n: usize,
            rmse: f64,
            rbias: f64,
            rmsep: f64,
            mean_pred_var: f64,
            sites: Vec<(&'a str, usize, f64, f64, f64)>,
        }
        run.json(
            "validation.json",
            &Headline {
                n: report.n,
                rmse: report.rmse,
                rbias: report.rbias,
                rmsep: report.rmsep,
                mean_pred_var: report.mean_pred_var,
                sites: report.sites.iter().map(|s| (s.site_id.as_str(), s.n, s.rmse, s.rbias, s.rmsep)).collect(),
            },
        )
    }

    fn towers(&self, run: &mut StageRun) -> Result<(TowerTable, PathBuf)> {
        let c = &self.cfg;
        let tp = run.source(&c.paths.towers, c.towers())?;
        Ok((load_towers(&tp)?, tp))
    }

    fn predict(&self, run: &mut StageRun) -> Result<()> {
        let f = self.load_fit(run)?;
        let (towers, _) = self.towers(run)?;
        let geo = towers.locations();
        let first = self.clock.window_first_hour()?;
        let x = self.design(&geo, &f.inputs, first..first + self.clock.window_hours())?;
        let ids: Vec<String> = (0..towers.len() as u32).map(|i| towers.id(i).to_string()).collect();
        log::info!("predicting {} towers x {} hours", ids.len(), x.hours);
        let field = predict(&f.post, &f.spec, &f.fit_x, ids, &project_all(&f.proj, &geo)?, &x, self.predict_opts())?;
        self.make_dir(run)?;
        let out = run.output("field.csv");
        write_field(&out, &field)
    }

    fn mobility(&self, run: &mut StageRun) -> Result<()> {
        let c = &self.cfg;
        let (towers, tp) = self.towers(run)?;
        let hp = run.source(&c.paths.handoffs, c.handoffs())?;
        let table = HandoffTable::load(&hp, &towers)?;
        let flags = c
            .mobility
            .region
            .as_ref()
            .map(|r| region_flags(&towers, (r.lat_min, r.lat_max), (r.lon_min, r.lon_max)));
        let set = build_trajectories(&table, self.clock.window, flags.as_deref())?;
        let profiles = night_profiles(&set, self.clock.night, self.clock.utc_offset, &towers);
        let stats = network_stats(&towers, &table.counts_per_device())?;
        log::info!(
            "{} hand-offs, {} devices kept, {} dropped",
            table.len(),
            set.len(),
            set.dropped.len()
        );
        self.make_dir(run)?;
        write_trajectories(&run.output("trajectories.bin"), &set)?;
        write_night_profiles(&run.output("night_profiles.csv"), &set, &profiles, &towers)?;
        write_distances(&run.output("tower_distances.csv"), &towers, &stats)?;
        write_handoff_hist(&run.output("handoff_hist.csv"), &stats)?;
        let summary = MobilitySummary {
            records: table.len(),
            devices: table.device_ids.len(),
            kept: set.len(),
            dropped: set.dropped.len(),
            segments: set.segment_count(),
            no_night_tower: profiles.iter().filter(|p| p.night_tower.is_none()).count(),
            nearest_quartiles_m: stats.nearest_quartiles,
            handoff_quartiles: stats.handoff_quartiles,
            single_handoff_devices: stats.single_handoff_devices,
            towers_sha256: sha256_file(&tp)?,
        };
        run.json("mobility.json", &summary)
    }

    fn expose(&self, run: &mut StageRun) -> Result<()> {
        let (towers, tp) = self.towers(run)?;
        let mdir = self.stage_dir(Stage::Mobility);
        let summary_path = run.input(mdir.join("mobility.json"), Stage::Mobility)?;
        let traj = run.input(mdir.join("trajectories.bin"), Stage::Mobility)?;
        let night_path = run.input(mdir.join("night_profiles.csv"), Stage::Mobility)?;
        let field_path = match self.cfg.exposure.field {
            FieldSource::Predicted => run.input(self.stage_dir(Stage::Predict).join("field.csv"), Stage::Predict)?,
            FieldSource::Truth => run.input(DatasetPaths::new(self.cfg.synth_dir()).truth_field(), Stage::Synth)?,
        };
        let summary: MobilitySummary = read_json(&summary_path)?;
        if summary.towers_sha256 != sha256_file(&tp)? {
            return Err(Error::invalid(format!(
                "{} changed since the mobility stage; rerun `mobility`",
                tp.display()
            )));
        }
        let set = read_trajectories(&traj)?;
        let profiles = read_night_profiles(&night_path, &towers)?;
        if profiles.len() != set.len() || profiles.iter().zip(&set.devices).any(|(p, &d)| p.0 != set.device_ids[d as usize]) {
            return Err(Error::invalid("night profiles do not match the trajectories; rerun `mobility`"));
        }
        let night: Vec<Option<u32>> = profiles.iter().map(|p| p.1).collect();
        let provenance = match self.cfg.exposure.field {
            FieldSource::Predicted => Provenance::PosteriorPredictive,
            FieldSource::Truth => Provenance::SyntheticTruth,
        };
        let field = read_field(&field_path, provenance)?;
        let index = FieldIndex::new(&field, &towers, &self.clock)?;
        let opts = self.cfg.exposure.options();

        self.make_dir(run)?;
        let hourly = opts.write_hourly.then(|| run.output("exposure.csv"));
        let daily = run.output("daily.csv");
        let bias = run.output("bias.csv");
        let outputs = ExposureOutputs {
            hourly: hourly.as_deref(),
            daily: Some(&daily),
            bias: Some(&bias),
        };
        let res = assess(&set, &night, &index, &towers, &self.clock, &opts, &outputs)?;
        run.json("bias_report.json", &res.report)?;
        write_excluded(&run.output("excluded.csv"), &set, &res.devices)?;

        let dev_path = run.output("devices.csv");
        let mut w = csv::Writer::from_path(&dev_path)?;
        w.write_record(["device_id", "night_tower_id", "weekly_bias8", "mean_pred_sd"])?;
        for d in &res.devices {
            w.write_record([
                set.device_id(d.index as usize),
                d.night_tower.map_or("", |t| towers.id(t)),
                &d.weekly_bias8.map_or(String::new(), |v| v.to_string()),
                &d.mean_pred_sd.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&dev_path, e))?;

        let q = self.cfg.exposure.cohort_q;
        let ranked = res.devices.iter().filter(|d| d.weekly_bias8.is_some()).count();
        let (top_p, bottom_p, members_p) =
            (run.output("cohort_top_towers.csv"), run.output("cohort_bottom_towers.csv"), run.output("cohort_devices.csv"));
        let mut w = csv::Writer::from_path(&members_p)?;
        w.write_record(["cohort", "rank", "device_id", "weekly_bias8"])?;
        if (q * ranked as f64).floor() as usize == 0 {
            log::warn!("{ranked} ranked devices are too few for cohort fraction {q}; cohort tables left empty");
            write_cohort(&top_p, &[])?;
            write_cohort(&bottom_p, &[])?;
        } else {
            let c = extreme_cohorts(&set, &res.devices, &towers, q)?;
            write_cohort(&top_p, &c.top_towers)?;
            write_cohort(&bottom_p, &c.bottom_towers)?;
            let by_index: BTreeMap<u32, f64> =
                res.devices.iter().filter_map(|d| Some((d.index, d.weekly_bias8?))).collect();
            for (name, members) in [("top", &c.top), ("bottom", &c.bottom)] {
                for (rank, &i) in members.iter().enumerate() {
                    w.write_record([name, &(rank + 1).to_string(), set.device_id(i as usize), &by_index[&i].to_string()])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&members_p, e))
    }

    fn report(&self, run: &mut StageRun) -> Result<()> {
        let mdir = self.stage_dir(Stage::Mobility);
        let edir = self.stage_dir(Stage::Expose);
        let distances = run.input(mdir.join("tower_distances.csv"), Stage::Mobility)?;
        let handoff_hist = run.input(mdir.join("handoff_hist.csv"), Stage::Mobility)?;
        let bias_path = run.input(edir.join("bias_report.json"), Stage::Expose)?;
        let daily = run.input(edir.join("daily.csv"), Stage::Expose)?;
        let cohort_top = run.input(edir.join("cohort_top_towers.csv"), Stage::Expose)?;
        let cohort_bottom = run.input(edir.join("cohort_bottom_towers.csv"), Stage::Expose)?;
        let optional = |stage: Stage, name: &str| {
            let p = self.stage_dir(stage).join(name);
            p.is_file().then_some(p)
        };
        let fit_summary = optional(Stage::Fit, "summary.csv");
        let validation = optional(Stage::Validate, "validation_series.csv");
        let field = optional(Stage::Predict, "field.csv");
        for p in [&fit_summary, &validation, &field].into_iter().flatten() {
            run.inputs.push(p.clone());
        }
        let bias: BiasReport = read_json(&bias_path)?;
        self.make_dir(run)?;
        let mut index: Vec<(String, &'static str)> = Vec::new();
        let mut skipped: Vec<(&'static str, &'static str)> = Vec::new();
        let mut table = |run: &mut StageRun, name: &str, what: &'static str| {
            index.push((name.to_string(), what));
            run.output(name)
        };

        let p = table(run, "nearest_tower_distance_hist.csv", "nearest-tower distance histogram, 50 m bins");
        nearest_hist(&distances, &p)?;
        let p = table(run, "handoff_count_hist.csv", "devices by log hand-off count");
        std::fs::copy(&handoff_hist, &p).map_err(|e| Error::io(&p, e))?;

        let p = table(run, "bias_quantiles.csv", "dynamic minus static bias8 quantiles, weekly and per day, plus hourly differences");
        write_summaries(&p, &["scope"], |emit| {
            emit(&["weekly".to_string()], &bias.weekly_bias8)?;
            for d in &bias.days {
                emit(&[d.date.clone()], &d.bias8)?;
            }
            emit(&["hourly_difference".to_string()], &bias.hourly_difference.summary)
        })?;
        let p = table(run, "bias8_by_day.csv", "bias8 distribution per day");
        write_summaries(&p, &["date", "weekend"], |emit| {
            for d in &bias.days {
                emit(&[d.date.clone(), d.weekend.to_string()], &d.bias8)?;
            }
            Ok(())
        })?;
        let p = table(run, "bias8_hist_by_day.csv", "bias8 histogram per day, 1 ppb bins");
        {
            let mut w = csv::Writer::from_path(&p)?;
            w.write_record(["date", "weekend", "bin_lo", "bin_hi", "devices"])?;
            for d in &bias.days {
                let h = &d.bias8_hist;
                let edges = h.edges();
                let mut row = |lo: String, hi: String, n: u64| w.write_record([d.date.clone(), d.weekend.to_string(), lo, hi, n.to_string()]);
                row("-inf".into(), h.lo.to_string(), h.underflow)?;
                for (i, &n) in h.counts.iter().enumerate() {
                    row(edges[i].to_string(), edges[i + 1].to_string(), n)?;
                }
                row(h.hi.to_string(), "inf".into(), h.overflow)?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        let p = table(run, "max8_by_day.csv", "daily 8-hour maximum, dynamic and static");
        write_summaries(&p, &["date", "weekend", "scenario"], |emit| {
            for d in &bias.days {
                emit(&[d.date.clone(), d.weekend.to_string(), "dynamic".into()], &d.max8_dynamic)?;
                emit(&[d.date.clone(), d.weekend.to_string(), "static".into()], &d.max8_static)?;
            }
            Ok(())
        })?;
        let p = table(run, "cum24_difference_by_day.csv", "(dynamic cum24 - static cum24) / 24 per day");
        write_summaries(&p, &["date", "weekend"], |emit| {
            for d in &bias.days {
                emit(&[d.date.clone(), d.weekend.to_string()], &d.cum24_hourly_difference)?;
            }
            Ok(())
        })?;
        let p = table(run, "exposure_by_hour_of_day.csv", "hourly exposure by local hour, scenario and day type");
        write_summaries(&p, &["scenario", "weekend", "hour"], |emit| {
            for g in &bias.hour_of_day {
                for (h, s) in g.hours.iter().enumerate() {
                    emit(&[g.scenario.as_str().into(), g.weekend.to_string(), h.to_string()], s)?;
                }
            }
            Ok(())
        })?;
        let p = table(run, "cumulative_by_hour_of_day.csv", "exposure accumulated since local midnight, by local hour");
        write_summaries(&p, &["scenario", "weekend", "hour"], |emit| {
            for g in &bias.cumulative_hour_of_day {
                for (h, s) in g.hours.iter().enumerate() {
                    emit(&[g.scenario.as_str().into(), g.weekend.to_string(), h.to_string()], s)?;
                }
            }
            Ok(())
        })?;
        let p = table(run, "cum24_density_by_day.csv", "density of daily cumulative exposure, 50 ppb-h bins");
        cum24_density(&daily, &p)?;
        let p = table(run, "cohort_top_towers.csv", "night towers of the highest-bias cohort");
        std::fs::copy(&cohort_top, &p).map_err(|e| Error::io(&p, e))?;
        let p = table(run, "cohort_bottom_towers.csv", "night towers of the lowest-bias cohort");
        std::fs::copy(&cohort_bottom, &p).map_err(|e| Error::io(&p, e))?;

        match fit_summary {
            Some(src) => {
                let p = table(run, "fit_summary.csv", "posterior mean, median, sd and 95% interval per parameter");
                std::fs::copy(&src, &p).map_err(|e| Error::io(&p, e))?;
            }
            None => skipped.push(("fit_summary.csv", "fit")),
        }
        match validation {
            Some(src) => {
                let p = table(run, "validation_series.csv", "observed and predicted ozone at the hold-out sites");
                std::fs::copy(&src, &p).map_err(|e| Error::io(&p, e))?;
            }
            None => skipped.push(("validation_series.csv", "validate")),
        }
        match field {
            Some(src) => {
                let (towers, _) = self.towers(run)?;
                let p = table(run, "prediction_snapshots.csv", "tower predictions at local 00, 06, 12 and 18 h each day");
                self.snapshots(&towers, &src, &p)?;
            }
            None => skipped.push(("prediction_snapshots.csv", "predict")),
        }
        #[derive(Serialize)]
        struct Index<'a> {
            tables: &'a [(String, &'static str)],
            skipped: Vec<String>,
        }
        let skipped = skipped.iter().map(|(f, s)| format!("{f}: run `{s}` first")).collect();
        run.json("report.json", &Index { tables: &index, skipped })
    }

    /// Writes the design rows for monitors (every clock hour) or towers (the
    /// exposure window) to `<out>/covariates/`.
    pub fn export_design(&self, towers: bool) -> Result<PathBuf> {
        let dir = self.cfg.stage_dir("covariates");
        let mut run = StageRun {
            p: self,
            stage: Stage::Fit,
            dir: dir.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let inputs = self.load_inputs(&mut run)?;
        let (ids, geo, hours) = if towers {
            let (t, _) = self.towers(&mut run)?;
            let first = self.clock.window_first_hour()?;
            let ids = (0..t.len() as u32).map(|i| t.id(i).to_string()).collect::<Vec<_>>();
            (ids, t.locations(), first..first + self.clock.window_hours())
        } else {
            let m = &inputs.monitors;
            (m.iter().map(|s| s.site_id.clone()).collect(), m.iter().map(|s| s.location).collect(), 0..self.clock.hours)
        };
        let x = self.design(&geo, &inputs, hours)?;
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let out = dir.join(if towers { "design_towers.csv" } else { "design_monitors.csv" });
        crate::covariates::write_design(&out, &ids, &x)?;
        Ok(out)
    }

    fn snapshots(&self, towers: &TowerTable, field_path: &Path, out: &Path) -> Result<()> {
        let field = read_field(field_path, Provenance::PosteriorPredictive)?;
        let first = self.clock.window_first_hour()?;
        let loc = towers.locations();
        let mut w = csv::Writer::from_path(out)?;
        w.write_record(["tower_id", "lat", "lon", "date", "local_hour", "pred_mean_ppb", "pred_sd_ppb"])?;
        for day in 0..self.clock.window_days() {
            let date = self.clock.window_date(day);
            for lh in [0usize, 6, 12, 18] {
                let hour = first + day * 24 + lh;
                for (s, id) in field.site_ids.iter().enumerate() {
                    let Some(v) = field.at(s, hour) else { continue };
                    let g = towers.get(id).map(|t| loc[t as usize]);
                    w.write_record([
                        id.clone(),
                        g.map_or(String::new(), |g| g.lat.to_string()),
                        g.map_or(String::new(), |g| g.lon.to_string()),
                        date.clone(),
                        lh.to_string(),
                        v.to_string(),
                        field.sd[s * field.hours + hour - field.first_hour].to_string(),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(out, e))
    }
}

type Emit<'a> = dyn FnMut(&[String], &Summary) -> Result<()> + 'a;

fn write_summaries(path: &Path, keys: &[&str], body: impl FnOnce(&mut Emit) -> Result<()>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
    header.extend(["count", "mean", "sd", "min"].map(String::from));
    header.extend(SUMMARY_PROBS.iter().map(|p| format!("p{:02}", (p * 100.0).round() as u32)));
    header.push("max".into());
    w.write_record(&header)?;
    body(&mut |k: &[String], s: &Summary| {
        let mut row = k.to_vec();
        row.extend([s.count.to_string(), s.mean.to_string(), s.sd.to_string(), s.min.to_string()]);
        row.extend(s.quantiles.iter().map(|q| q.to_string()));
        row.push(s.max.to_string());
        w.write_record(&row).map_err(Error::from)
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn nearest_hist(distances: &Path, out: &Path) -> Result<()> {
    let mut h = Histogram::new(0.0, 3000.0, 60)?;
    let mut rdr = csv::Reader::from_path(distances)?;
    for rec in rdr.records() {
        let rec = rec?;
        let d: f64 = rec[2].parse().map_err(|_| Error::invalid(format!("bad distance `{}` in {}", &rec[2], distances.display())))?;
        h.add(d);
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["bin_lo_m", "bin_hi_m", "towers"])?;
    let e = h.edges();
    for (i, n) in h.counts.iter().enumerate() {
        w.write_record([e[i].to_string(), e[i + 1].to_string(), n.to_string()])?;
    }
    w.write_record([h.hi.to_string(), "inf".into(), h.overflow.to_string()])?;
    w.flush().map_err(|e| Error::io(out, e))
}

fn cum24_density(daily: &Path, out: &Path) -> Result<()> {
    let mut hists: BTreeMap<(String, String), Histogram> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(daily)?;
    for rec in rdr.records() {
        let rec = rec?;
        let v: f64 = rec[4].parse().map_err(|_| Error::invalid(format!("bad cum24 `{}` in {}", &rec[4], daily.display())))?;
        let key = (rec[1].to_string(), rec[2].to_string());
        if !hists.contains_key(&key) {
            hists.insert(key.clone(), Histogram::new(0.0, 4000.0, 80)?);
        }
        hists.get_mut(&key).unwrap().add(v);
    }
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["date", "scenario", "bin_lo", "bin_hi", "density"])?;
    for ((date, scenario), h) in &hists {
        let total = h.total() as f64;
        let e = h.edges();
        for (i, &n) in h.counts.iter().enumerate() {
            let dens = n as f64 / (total * h.width());
            w.write_record([date.clone(), scenario.clone(), e[i].to_string(), e[i + 1].to_string(), dens.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(out, e))
}
