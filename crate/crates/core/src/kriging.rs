//! Posterior-predictive ozone at new sites and hold-out validation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariates::{DesignMatrix, N_COVARIATES as P};
use crate::error::{Error, Result};
use crate::geo::PlanePoint;
use crate::gp::linalg::chol_solve;
use crate::gp::{cross_correlation, CorrelationMatrix, GpPosterior, GpSpec};
use crate::ingest::MonitorSeries;

pub const FIELD_HEADER: [&str; 4] = ["tower_id", "hour_index", "pred_mean_ppb", "pred_sd_ppb"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PosteriorPredictive,
    Observed,
    SyntheticTruth,
}

/// Dense site x hour concentration field.
#[derive(Debug, Clone, PartialEq)]
pub struct HourlyField {
    pub site_ids: Vec<String>,
    /// Study-clock index of the first hour.
    pub first_hour: usize,
    pub hours: usize,
    /// Site-major: `mean[s * hours + h]`.
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub provenance: Provenance,
}

impl HourlyField {
    pub fn new(
        site_ids: Vec<String>,
        first_hour: usize,
        hours: usize,
        mean: Vec<f64>,
        sd: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self> {
        let n = site_ids.len() * hours;
        if mean.len() != n || sd.len() != n {
            return Err(Error::invalid("field values do not match sites x hours"));
        }
        if let Some(i) = mean.iter().zip(&sd).position(|(m, s)| !m.is_finite() || !(*s >= 0.0)) {
            return Err(Error::Numerical(format!(
                "field value for site {} hour {} is not finite or has negative SD",
                site_ids[i / hours],
                first_hour + i % hours
            )));
        }
        Ok(HourlyField {
            site_ids,
            first_hour,
            hours,
            mean,
            sd,
            provenance,
        })
    }

    pub fn site_series(&self, s: usize) -> &[f64] {
        &self.mean[s * self.hours..(s + 1) * self.hours]
    }

    pub fn site_sd(&self, s: usize) -> &[f64] {
        &self.sd[s * self.hours..(s + 1) * self.hours]
    }

    pub fn site_index(&self, id: &str) -> Option<usize> {
        self.site_ids.iter().position(|s| s == id)
    }

    /// Value at a study-clock hour, if covered.
    pub fn at(&self, s: usize, clock_hour: usize) -> Option<f64> {
        let h = clock_hour.checked_sub(self.first_hour)?;
        (h < self.hours).then(|| self.mean[s * self.hours + h])
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictMode {
    /// Exact mean and variance of the predictive mixture over stored draws.
    #[default]
    Moments,
    /// One conditional draw of `Z(s0, t)` per stored draw; reports the sample
    /// mean and SD.
    Draws,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    pub mode: PredictMode,
    pub seed: u64,
}

/// Predicts `Z(s0, t)` at `new_sites` for the clock hours covered by `new_x`.
///
/// `fit_x` is the design the posterior was fitted on; its first hour anchors
/// the latent draws on the study clock.
/// Each stored latent draw `Y_t` is paired with the parameter draw of the same
/// iteration; `eta_t = Y_t - X_t beta` is conditioned on through
/// `w = S^-1 c`, which only needs the cross-correlations to the fitted sites.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    post: &GpPosterior,
    spec: &GpSpec,
    fit_x: &DesignMatrix,
    site_ids: Vec<String>,
    new_sites: &[PlanePoint],
    new_x: &DesignMatrix,
    opts: PredictOptions,
) -> Result<HourlyField> {
    let n = spec.sites.len();
    let m = new_sites.len();
    if site_ids.len() != m || new_x.n_sites != m {
        return Err(Error::invalid("new site ids, locations and design rows disagree in count"));
    }
    if post.n_sites != n || fit_x.n_sites != n || fit_x.hours != post.hours {
        return Err(Error::invalid("posterior does not match the fitted sites and hours"));
    }
    if post.latent.is_empty() {
        return Err(Error::invalid("posterior holds no latent draws"));
    }
    let offset = new_x
        .first_hour
        .checked_sub(fit_x.first_hour)
        .filter(|o| o + new_x.hours <= post.hours)
        .ok_or_else(|| {
            Error::invalid(format!(
                "prediction hours {}..{} fall outside the fitted hours {}..{}",
                new_x.first_hour,
                new_x.first_hour + new_x.hours,
                fit_x.first_hour,
                fit_x.first_hour + fit_x.hours
            ))
        })?;
    let t_len = new_x.hours;
    let corr = CorrelationMatrix::exponential(&spec.sites, spec.phi)?;

    // eta draws over the prediction hours: [draw][t * n + s].
    let draws: Vec<(f64, f64, [f64; P], Vec<f64>)> = post
        .latent
        .iter()
        .map(|l| {
            let p = post
                .samples
                .get(l.iter)
                .filter(|p| p.iter == l.iter)
                .ok_or_else(|| Error::invalid(format!("no parameter draw for latent draw {}", l.iter)))?;
            let mut eta = Vec::with_capacity(t_len * n);
            for h in 0..t_len {
                let t = offset + h;
                for s in 0..n {
                    let fit: f64 = fit_x.row(t, s).iter().zip(&p.beta).map(|(a, b)| a * b).sum();
                    eta.push(l.y[t * n + s] - fit);
                }
            }
            Ok((p.sigma2_eps, p.sigma2_eta, p.beta, eta))
        })
        .collect::<Result<_>>()?;
    let k = draws.len() as f64;

    let per_site: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let c = cross_correlation(new_sites[i], &spec.sites, spec.phi);
            let mut w = c.clone();
            chol_solve(&corr.chol, n, &mut w);
            let kvar = (1.0 - c.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()).max(0.0);
            let mut mean = vec![0.0; t_len];
            let mut m2 = vec![0.0; t_len];
            let mut vbar = vec![0.0; t_len];
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(i as u64);
            for (j, (s2e, s2n, beta, eta)) in draws.iter().enumerate() {
                let cond_var = s2n * kvar;
                for h in 0..t_len {
                    let xb: f64 = new_x.row(h, i).iter().zip(beta).map(|(a, b)| a * b).sum();
                    let e = &eta[h * n..(h + 1) * n];
                    let mu = xb + w.iter().zip(e).map(|(a, b)| a * b).sum::<f64>();
                    let val = match opts.mode {
                        PredictMode::Moments => {
                            vbar[h] += (cond_var + s2e - vbar[h]) / (j + 1) as f64;
                            mu
                        }
                        PredictMode::Draws => {
                            let z1: f64 = rng.sample(StandardNormal);
                            let z2: f64 = rng.sample(StandardNormal);
                            mu + cond_var.sqrt() * z1 + s2e.sqrt() * z2
                        }
                    };
                    let d = val - mean[h];
                    mean[h] += d / (j + 1) as f64;
                    m2[h] += d * (val - mean[h]);
                }
            }
            let sd = (0..t_len)
                .map(|h| match opts.mode {
                    PredictMode::Moments => (vbar[h] + m2[h] / k).sqrt(),
                    PredictMode::Draws => {
                        if k > 1.0 {
                            (m2[h] / (k - 1.0)).sqrt()
                        } else {
                            0.0
                        }
                    }
                })
                .collect();
            (mean, sd)
        })
        .collect();

    let mut mean = Vec::with_capacity(m * t_len);
    let mut sd = Vec::with_capacity(m * t_len);
    for (a, b) in per_site {
        mean.extend(a);
        sd.extend(b);
    }
    HourlyField::new(site_ids, new_x.first_hour, t_len, mean, sd, Provenance::PosteriorPredictive)
}

pub fn write_field(path: &Path, field: &HourlyField) -> Result<()> {
    use std::io::Write;
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::with_capacity(1 << 20, f);
    let mut line = String::with_capacity(64);
    writeln!(w, "{}", FIELD_HEADER.join(",")).map_err(|e| Error::io(path, e))?;
    for (s, id) in field.site_ids.iter().enumerate() {
        for h in 0..field.hours {
            use std::fmt::Write as _;
            line.clear();
            let i = s * field.hours + h;
            let _ = writeln!(line, "{},{},{},{}", id, field.first_hour + h, field.mean[i], field.sd[i]);
            w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a field written by [`write_field`]. Every site must cover the same
/// contiguous run of hours.
pub fn read_field(path: &Path, provenance: Provenance) -> Result<HourlyField> {
    let mut rdr = csv::ReaderBuilder::new()
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::invalid(format!("{}: {other:?}", path.display())),
        })?;
    let header = rdr.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != FIELD_HEADER {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: FIELD_HEADER.join(","),
            found: header.iter().collect::<Vec<_>>().join(","),
        });
    }
    let perr = |line: u64, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<(usize, usize, f64, f64)> = Vec::new();
    let mut index = std::collections::HashMap::new();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(perr(line, format!("expected 4 fields, found {}", rec.len())));
        }
        let s = *index.entry(rec[0].to_string()).or_insert_with(|| {
            ids.push(rec[0].to_string());
            ids.len() - 1
        });
        let h: usize = rec[1].parse().map_err(|_| perr(line, format!("bad hour_index `{}`", &rec[1])))?;
        let mu: f64 = rec[2].parse().map_err(|_| perr(line, format!("bad pred_mean_ppb `{}`", &rec[2])))?;
        let sd: f64 = rec[3].parse().map_err(|_| perr(line, format!("bad pred_sd_ppb `{}`", &rec[3])))?;
        rows.push((s, h, mu, sd));
    }
    if rows.is_empty() {
        return Err(Error::invalid(format!("{} holds no field rows", path.display())));
    }
    let first = rows.iter().map(|r| r.1).min().unwrap();
    let last = rows.iter().map(|r| r.1).max().unwrap();
    let hours = last - first + 1;
    if rows.len() != ids.len() * hours {
        return Err(Error::invalid(format!(
            "{}: field is not a complete site x hour grid",
            path.display()
        )));
    }
    let mut mean = vec![f64::NAN; rows.len()];
    let mut sd = vec![f64::NAN; rows.len()];
    for (s, h, mu, v) in rows {
        let i = s * hours + h - first;
        if !mean[i].is_nan() {
            return Err(Error::invalid(format!("{}: duplicate row for {} hour {h}", path.display(), ids[s])));
        }
        mean[i] = mu;
        sd[i] = v;
    }
    HourlyField::new(ids, first, hours, mean, sd, provenance)
}

/// Observed against predicted at one hold-out site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteValidation {
    pub site_id: String,
    pub n: usize,
    pub rmse: f64,
    pub rbias: f64,
    pub rmsep: f64,
    pub hour_index: Vec<usize>,
    pub observed: Vec<f64>,
    pub predicted: Vec<f64>,
    pub pred_sd: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub n: usize,
    pub rmse: f64,
    pub rbias: f64,
    pub rmsep: f64,
    /// Mean predictive variance over the compared cells.
    pub mean_pred_var: f64,
    pub sites: Vec<SiteValidation>,
}

/// `(rmse, rbias, rmsep)` with `z_bar` the mean observation.
pub fn metrics(pred: &[f64], obs: &[f64]) -> Result<(f64, f64, f64)> {
    let n = obs.len();
    if n == 0 || pred.len() != n {
        return Err(Error::invalid("validation needs at least one observed/predicted pair"));
    }
    let nf = n as f64;
    let zbar = obs.iter().sum::<f64>() / nf;
    let mut se = 0.0;
    let mut err = 0.0;
    let mut spread = 0.0;
    for (p, z) in pred.iter().zip(obs) {
        err += p - z;
        se += (p - z) * (p - z);
        spread += (zbar - z) * (zbar - z);
    }
    let rmsep = if spread > 0.0 { se / spread } else { f64::NAN };
    Ok(((se / nf).sqrt(), err / (nf * zbar), rmsep))
}

/// Compares field predictions with held-out monitor series over the field's
/// hours. Missing observations are skipped.
pub fn validate(field: &HourlyField, held_out: &[MonitorSeries], training_ids: &[String]) -> Result<ValidationReport> {
    let mut sites = Vec::new();
    let (mut all_p, mut all_z) = (Vec::new(), Vec::new());
    let mut var_sum = 0.0;
    for series in held_out {
        if training_ids.contains(&series.site_id) {
            return Err(Error::invalid(format!(
                "hold-out site {} was used for training",
                series.site_id
            )));
        }
        let s = field
            .site_index(&series.site_id)
            .ok_or_else(|| Error::invalid(format!("field has no predictions for {}", series.site_id)))?;
        let mut v = SiteValidation {
            site_id: series.site_id.clone(),
            n: 0,
            rmse: f64::NAN,
            rbias: f64::NAN,
            rmsep: f64::NAN,
            hour_index: Vec::new(),
            observed: Vec::new(),
            predicted: Vec::new(),
            pred_sd: Vec::new(),
        };
        for h in 0..field.hours {
            let clock = field.first_hour + h;
            if let Some(Some(z)) = series.values.get(clock) {
                let i = s * field.hours + h;
                v.hour_index.push(clock);
                v.observed.push(*z);
                v.predicted.push(field.mean[i]);
                v.pred_sd.push(field.sd[i]);
                var_sum += field.sd[i] * field.sd[i];
            }
        }
        v.n = v.observed.len();
        if v.n > 0 {
            (v.rmse, v.rbias, v.rmsep) = metrics(&v.predicted, &v.observed)?;
        }
        all_p.extend_from_slice(&v.predicted);
        all_z.extend_from_slice(&v.observed);
        sites.push(v);
    }
    let (rmse, rbias, rmsep) = metrics(&all_p, &all_z)?;
    Ok(ValidationReport {
        n: all_z.len(),
        rmse,
        rbias,
        rmsep,
        mean_pred_var: var_sum / all_z.len() as f64,
        sites,
    })
}

pub fn write_validation_sites(path: &Path, report: &ValidationReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["site_id", "hour_index", "observed_ppb", "pred_mean_ppb", "pred_sd_ppb"])?;
    for s in &report.sites {
        for i in 0..s.n {
            w.write_record([
                s.site_id.clone(),
                s.hour_index[i].to_string(),
                s.observed[i].to_string(),
                s.predicted[i].to_string(),
                s.pred_sd[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
