use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use super::layout::{station_sites, MonitorSite};
use super::{gradient_coordinate, stream, SynthScenario, MAX_TRUTH_SITES};
use crate::clock::{StudyClock, SECS_PER_DAY, SECS_PER_HOUR};
use crate::covariates::{build_design, fill_meteo, road_distances, DesignMatrix};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, PlanePoint, Projection};
use crate::gp::{default_phi, linalg};
use crate::ingest::{MeteoSeries, MonitorSeries, Road, TowerSite};
use crate::kriging::{HourlyField, Provenance};

const METEO_SALT: u64 = 0x3d91_6e0f_a4c8_7b55;
const FIELD_SALT: u64 = 0x9b2e_47a1_0cd3_f866;
const NUGGET_SALT: u64 = 0x42f0_d8b3_61ae_0c97;

fn gauss(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn round1(v: f64) -> f64 {
    (v * 10.0).round() / 10.0
}

/// Local hour of day in `[0, 24)` and local day number of clock hour `h`.
fn local_time(clock: &StudyClock, h: usize) -> (f64, i64) {
    let t = clock.clock_start + h as i64 * SECS_PER_HOUR + clock.utc_offset;
    (t.rem_euclid(SECS_PER_DAY) as f64 / 3600.0, t.div_euclid(SECS_PER_DAY))
}

fn daytime_weight(hour: f64) -> f64 {
    if (6.0..=20.0).contains(&hour) {
        (std::f64::consts::PI * (hour - 6.0) / 14.0).sin()
    } else {
        0.0
    }
}

/// Hourly station records over the whole clock, with sparse gaps.
pub fn gen_meteo(scn: &SynthScenario, clock: &StudyClock) -> Result<Vec<MeteoSeries>> {
    let m = &scn.meteo;
    let proj = Projection::new(scn.region.center());
    let (_, day0) = local_time(clock, 0);
    let (_, day_last) = local_time(clock, clock.hours - 1);
    let mut rng = stream(scn.seed, METEO_SALT, 0);
    let innov = m.daily_sd_c * (1.0 - m.daily_rho * m.daily_rho).sqrt();
    let mut anomaly = Vec::new();
    let mut a = m.daily_sd_c * gauss(&mut rng);
    for _ in day0..=day_last {
        anomaly.push(a);
        a = m.daily_rho * a + innov * gauss(&mut rng);
    }
    station_sites(scn)
        .into_iter()
        .enumerate()
        .map(|(k, (station_id, location))| {
            let along = gradient_coordinate(proj.project(location)?);
            let mut rng = stream(scn.seed, METEO_SALT, 1 + k as u64);
            let offset = m.station_sd_c * gauss(&mut rng);
            let mut temperature = Vec::with_capacity(clock.hours);
            let mut wind_speed = Vec::with_capacity(clock.hours);
            for h in 0..clock.hours {
                let (hour, day) = local_time(clock, h);
                let cycle = (std::f64::consts::TAU * (hour - m.peak_hour) / 24.0).cos();
                let e_t: f64 = StandardNormal.sample(&mut rng);
                let e_w: f64 = StandardNormal.sample(&mut rng);
                let gap = rng.random::<f64>() < m.gap_rate && h > 0;
                let temp = m.temp_mean_c
                    + m.diurnal_amplitude_c * cycle
                    + anomaly[(day - day0) as usize]
                    + offset
                    + m.gradient_c_per_km * along * daytime_weight(hour)
                    + m.hourly_sd_c * e_t;
                let wind = (m.wind_mean_ms + m.wind_diurnal_ms * cycle + m.wind_sd_ms * e_w).max(0.2);
                temperature.push((!gap).then(|| round1(temp)));
                wind_speed.push((!gap).then(|| round1(wind)));
            }
            Ok(MeteoSeries {
                station_id,
                location,
                temperature,
                wind_speed,
            })
        })
        .collect()
}

/// Simulated monitor data and, optionally, the latent truth at towers.
#[derive(Debug, Clone)]
pub struct SynthField {
    pub phi: f64,
    pub sites: Vec<MonitorSite>,
    /// Observations with negative values clamped to zero.
    pub observed: Vec<MonitorSeries>,
    pub clamped_negative: usize,
    /// Unclamped observations, `z[site][clock hour]`.
    pub z: Vec<Vec<f64>>,
    /// Latent truth at the monitors, same layout as `z`.
    pub y: Vec<Vec<f64>>,
    /// Latent truth at towers over the exposure window.
    pub towers: Option<HourlyField>,
}

fn correlation_cholesky(sites: &[PlanePoint], phi: f64) -> Result<Vec<f64>> {
    let n = sites.len();
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let r = (-phi * sites[i].distance(&sites[j])).exp();
            s[i * n + j] = r;
            s[j * n + i] = r;
        }
    }
    linalg::cholesky(&s, n).ok_or_else(|| {
        Error::Numerical("simulation correlation matrix is not positive definite".into())
    })
}

/// `sigma * L[..k, ..k] z` for the leading `k` sites, `z` standard normal.
fn draw_correlated(l: &[f64], n: usize, k: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let z: Vec<f64> = (0..k).map(|_| StandardNormal.sample(rng)).collect();
    (0..k)
        .map(|i| sigma * l[i * n..i * n + i + 1].iter().zip(&z).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

/// Independent hourly draws of a zero-mean field with covariance
/// `sigma2 * exp(-phi * d)`, as `eta[t][site]`.
pub fn simulate_eta(sites: &[PlanePoint], phi: f64, sigma2: f64, hours: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let l = correlation_cholesky(sites, phi)?;
    let n = sites.len();
    Ok((0..hours)
        .into_par_iter()
        .map(|h| draw_correlated(&l, n, n, sigma2.sqrt(), &mut stream(seed, FIELD_SALT, h as u64)))
        .collect())
}

fn linear_predictor(x: &DesignMatrix, beta: &[f64; 5], h: usize, s: usize) -> f64 {
    x.row(h, s).iter().zip(beta).map(|(a, b)| a * b).sum()
}

/// Draws the latent field and monitor observations from the model.
///
/// `meteo` is the raw station data; covariates are built from its gap-filled
/// version exactly as the fitting stage does. Monitors are simulated over the
/// whole clock. With `scn.tower_truth` the towers are simulated jointly with
/// the monitors over the exposure window.
pub fn gen_field(
    scn: &SynthScenario,
    clock: &StudyClock,
    monitors: &[MonitorSite],
    meteo: &[MeteoSeries],
    roads: &[Road],
    towers: &[TowerSite],
) -> Result<SynthField> {
    let p = &scn.truth;
    let m = monitors.len();
    let mon_geo: Vec<GeoPoint> = monitors.iter().map(|s| s.location).collect();
    let proj = Projection::centroid(&mon_geo)?;
    let mut plane: Vec<PlanePoint> = mon_geo.iter().map(|&g| proj.project(g)).collect::<Result<_>>()?;
    let phi = match p.phi {
        Some(phi) => phi,
        None => {
            let train: Vec<PlanePoint> =
                monitors.iter().zip(&plane).filter(|(s, _)| !s.holdout).map(|(_, q)| *q).collect();
            default_phi(&train)?
        }
    };
    let filled = fill_meteo(meteo)?;
    let mon_x = build_design(&mon_geo, &filled, &road_distances(&mon_geo, roads)?, 0..clock.hours)?;
    let first = clock.window_first_hour()?;
    let window = first..first + clock.window_hours();
    let tower_x = if scn.tower_truth {
        if m + towers.len() > MAX_TRUTH_SITES {
            return Err(Error::invalid(format!(
                "tower truth simulation supports at most {MAX_TRUTH_SITES} sites; {} requested",
                m + towers.len()
            )));
        }
        let geo: Vec<GeoPoint> = towers.iter().map(|t| t.location).collect();
        for &g in &geo {
            plane.push(proj.project(g)?);
        }
        Some(build_design(&geo, &filled, &road_distances(&geo, roads)?, window.clone())?)
    } else {
        None
    };
    let n = plane.len();
    let l = correlation_cholesky(&plane, phi)?;
    let sigma_eta = p.sigma2_eta.sqrt();
    let sigma_eps = p.sigma2_eps.sqrt();
    let per_hour: Vec<(Vec<f64>, Vec<f64>)> = (0..clock.hours)
        .into_par_iter()
        .map(|h| {
            let k = if tower_x.is_some() && window.contains(&h) { n } else { m };
            let eta = draw_correlated(&l, n, k, sigma_eta, &mut stream(scn.seed, FIELD_SALT, h as u64));
            let mut rng = stream(scn.seed, NUGGET_SALT, h as u64);
            let eps = (0..m).map(|_| sigma_eps * gauss(&mut rng)).collect();
            (eta, eps)
        })
        .collect();
    let mut y = vec![Vec::with_capacity(clock.hours); m];
    let mut z = vec![Vec::with_capacity(clock.hours); m];
    for (h, (eta, eps)) in per_hour.iter().enumerate() {
        for s in 0..m {
            let ys = linear_predictor(&mon_x, &p.beta, h, s) + eta[s];
            y[s].push(ys);
            z[s].push(ys + eps[s]);
        }
    }
    let mut clamped_negative = 0;
    let observed = monitors
        .iter()
        .zip(&z)
        .map(|(site, zs)| MonitorSeries {
            site_id: site.site_id.clone(),
            location: site.location,
            values: zs
                .iter()
                .map(|&v| {
                    if v < 0.0 {
                        clamped_negative += 1;
                    }
                    Some(v.max(0.0))
                })
                .collect(),
        })
        .collect();
    let towers_field = match &tower_x {
        None => None,
        Some(x) => {
            let hours = window.len();
            let mut mean = vec![0.0; towers.len() * hours];
            for h in 0..hours {
                let eta = &per_hour[first + h].0;
                for t in 0..towers.len() {
                    mean[t * hours + h] = linear_predictor(x, &p.beta, h, t) + eta[m + t];
                }
            }
            Some(HourlyField::new(
                towers.iter().map(|t| t.tower_id.clone()).collect(),
                first,
                hours,
                mean,
                vec![0.0; towers.len() * hours],
                Provenance::SyntheticTruth,
            )?)
        }
    };
    Ok(SynthField {
        phi,
        sites: monitors.to_vec(),
        observed,
        clamped_negative,
        z,
        y,
        towers: towers_field,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::{empirical_semivariogram, VariogramBins};
    use crate::synth::{gen_roads, gen_towers, monitor_sites, MonitorLayout};

    fn small() -> SynthScenario {
        let mut s = SynthScenario::desk();
        s.towers.count = 300;
        s
    }

    #[test]
    fn variogram_of_simulated_eta_matches_model() {
        let mut rng = stream(5, 0, 0);
        let sites: Vec<PlanePoint> = (0..200)
            .map(|_| PlanePoint { x: rng.random_range(0.0..150.0), y: rng.random_range(0.0..100.0) })
            .collect();
        let (phi, sigma2) = (0.0186, 174.9);
        let eta = simulate_eta(&sites, phi, sigma2, 400, 11).unwrap();
        let est = empirical_semivariogram(&sites, &eta, Some(VariogramBins::equal_width(120.0, 8).unwrap())).unwrap();
        for (d, g) in est.centers_km.iter().zip(&est.semivariance) {
            let expect = sigma2 * (1.0 - (-phi * d).exp());
            let g = g.unwrap();
            assert!((g - expect).abs() < 0.08 * sigma2, "d={d} got {g} expected {expect}");
        }
    }

    #[test]
    fn nugget_variance_matches() {
        let mut scn = small();
        scn.tower_truth = false;
        let clock = StudyClock::connecticut_2016();
        let sites = monitor_sites(&scn);
        let meteo = gen_meteo(&scn, &clock).unwrap();
        let roads = gen_roads(&scn).unwrap();
        let mut diffs = Vec::new();
        for seed in 0..4 {
            scn.seed = seed;
            let f = gen_field(&scn, &clock, &sites, &meteo, &roads, &[]).unwrap();
            for (zs, ys) in f.z.iter().zip(&f.y) {
                diffs.extend(zs.iter().zip(ys).map(|(a, b)| a - b));
            }
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var / 13.2 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn zero_sill_gives_linear_predictor() {
        let mut scn = small();
        scn.truth.sigma2_eta = 0.0;
        let clock = StudyClock::connecticut_2016();
        let sites = monitor_sites(&scn);
        let meteo = gen_meteo(&scn, &clock).unwrap();
        let roads = gen_roads(&scn).unwrap();
        let towers = gen_towers(&scn).unwrap();
        let f = gen_field(&scn, &clock, &sites, &meteo, &roads, &towers).unwrap();
        let filled = fill_meteo(&meteo).unwrap();
        let geo: Vec<GeoPoint> = towers.iter().map(|t| t.location).collect();
        let first = clock.window_first_hour().unwrap();
        let x = build_design(&geo, &filled, &road_distances(&geo, &roads).unwrap(), first..first + 168).unwrap();
        let field = f.towers.unwrap();
        for t in [0, 17, 299] {
            for h in [0, 50, 167] {
                assert_eq!(field.site_series(t)[h], linear_predictor(&x, &scn.truth.beta, h, t));
            }
        }
        let mx = build_design(
            &sites.iter().map(|s| s.location).collect::<Vec<_>>(),
            &filled,
            &road_distances(&sites.iter().map(|s| s.location).collect::<Vec<_>>(), &roads).unwrap(),
            0..clock.hours,
        )
        .unwrap();
        assert_eq!(f.y[3][400], linear_predictor(&mx, &scn.truth.beta, 400, 3));
    }

    #[test]
    fn calibrated_to_observed_ozone_moments() {
        let mut scn = small();
        scn.tower_truth = false;
        let clock = StudyClock::connecticut_2016();
        let sites = monitor_sites(&scn);
        let meteo = gen_meteo(&scn, &clock).unwrap();
        let f = gen_field(&scn, &clock, &sites, &meteo, &gen_roads(&scn).unwrap(), &[]).unwrap();
        let vals: Vec<f64> = f.z.iter().zip(&sites).filter(|(_, s)| !s.holdout).flat_map(|(z, _)| z.clone()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((mean - 35.9).abs() < 3.0, "mean {mean} sd {sd}");
        assert!((sd / 19.4 - 1.0).abs() < 0.15, "sd {sd}");
    }

    #[test]
    fn meteo_gaps_never_lead() {
        let mut scn = small();
        scn.meteo.gap_rate = 0.2;
        let clock = StudyClock::connecticut_2016();
        let m = gen_meteo(&scn, &clock).unwrap();
        assert_eq!(m.len(), 12);
        assert!(m.iter().all(|s| s.temperature[0].is_some() && s.temperature.len() == 744));
        assert!(m.iter().any(|s| s.temperature.iter().any(Option::is_none)));
        assert!(fill_meteo(&m).is_ok());
        assert_eq!(m, gen_meteo(&scn, &clock).unwrap());
    }

    #[test]
    fn too_many_truth_sites_rejected() {
        let mut scn = small();
        scn.monitors = MonitorLayout::Random { count: 5, holdout: 1 };
        scn.towers.count = MAX_TRUTH_SITES;
        let clock = StudyClock::connecticut_2016();
        let towers = gen_towers(&scn).unwrap();
        let r = gen_field(
            &scn,
            &clock,
            &monitor_sites(&scn),
            &gen_meteo(&scn, &clock).unwrap(),
            &gen_roads(&scn).unwrap(),
            &towers,
        );
        assert!(matches!(r, Err(Error::Invalid(_))));
    }
}
