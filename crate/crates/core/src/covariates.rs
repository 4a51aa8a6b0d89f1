//! Regression design matrices and empirical semivariograms.
//!
//! Each design row is `[1, temp_c, wind_ms, dist_primary_m, dist_secondary_m]`.
//! Meteorology comes from the nearest station; road distances are meters to
//! the nearest road of each class and do not vary with time.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, GeoPoint, PlanePoint};
use crate::ingest::{locf_fill, MeteoSeries, Road, RoadClass};

pub const N_COVARIATES: usize = 5;
pub const COVARIATE_NAMES: [&str; N_COVARIATES] =
    ["intercept", "temp_c", "wind_ms", "dist_primary_m", "dist_secondary_m"];

/// Design rows for `n_sites` sites over `hours` consecutive clock hours.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    pub n_sites: usize,
    /// Clock hour index of the first hour.
    pub first_hour: usize,
    pub hours: usize,
    /// Hour-major: `data[(h * n_sites + s) * 5 + k]`.
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_rows(n_sites: usize, first_hour: usize, hours: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n_sites * hours * N_COVARIATES {
            return Err(Error::invalid("design data length does not match its dimensions"));
        }
        Ok(DesignMatrix {
            n_sites,
            first_hour,
            hours,
            data,
        })
    }

    /// Row for site `s` at relative hour `h`.
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let i = (h * self.n_sites + s) * N_COVARIATES;
        &self.data[i..i + N_COVARIATES]
    }

    /// The `n_sites x 5` block for relative hour `h`, row-major.
    pub fn hour(&self, h: usize) -> &[f64] {
        let w = self.n_sites * N_COVARIATES;
        &self.data[h * w..(h + 1) * w]
    }

    /// Restricts to a subset of sites, in the given order.
    pub fn select_sites(&self, sites: &[usize]) -> DesignMatrix {
        let mut data = Vec::with_capacity(sites.len() * self.hours * N_COVARIATES);
        for h in 0..self.hours {
            for &s in sites {
                data.extend_from_slice(self.row(h, s));
            }
        }
        DesignMatrix {
            n_sites: sites.len(),
            first_hour: self.first_hour,
            hours: self.hours,
            data,
        }
    }

    /// Restricts to relative hours `range`.
    pub fn select_hours(&self, range: Range<usize>) -> DesignMatrix {
        let w = self.n_sites * N_COVARIATES;
        DesignMatrix {
            n_sites: self.n_sites,
            first_hour: self.first_hour + range.start,
            hours: range.len(),
            data: self.data[range.start * w..range.end * w].to_vec(),
        }
    }
}

/// Distances in meters from each site to the nearest road of each class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadDistances {
    pub primary_m: Vec<f64>,
    pub secondary_m: Vec<f64>,
}

pub fn road_distances(sites: &[GeoPoint], roads: &[Road]) -> Result<RoadDistances> {
    let per_class = |class: RoadClass| -> Result<Vec<f64>> {
        let polylines: Vec<&[GeoPoint]> = roads
            .iter()
            .filter(|r| r.class == class)
            .map(|r| r.vertices.as_slice())
            .collect();
        if polylines.is_empty() {
            return Err(Error::invalid(format!(
                "no {} roads in the dataset; distance covariate undefined",
                class.as_str()
            )));
        }
        sites
            .par_iter()
            .map(|&p| {
                polylines.iter().try_fold(f64::INFINITY, |best, line| {
                    Ok(best.min(geo::point_to_polyline_m(p, line)?))
                })
            })
            .collect()
    };
    Ok(RoadDistances {
        primary_m: per_class(RoadClass::Primary)?,
        secondary_m: per_class(RoadClass::Secondary)?,
    })
}

/// Fills meteorological gaps by carrying the last observation forward.
pub fn fill_meteo(meteo: &[MeteoSeries]) -> Result<Vec<MeteoSeries>> {
    meteo
        .iter()
        .map(|m| {
            let ctx = |e: Error| Error::invalid(format!("station {}: {e}", m.station_id));
            Ok(MeteoSeries {
                station_id: m.station_id.clone(),
                location: m.location,
                temperature: locf_fill(&m.temperature).map_err(ctx)?.into_iter().map(Some).collect(),
                wind_speed: locf_fill(&m.wind_speed).map_err(ctx)?.into_iter().map(Some).collect(),
            })
        })
        .collect()
}

/// Index of the nearest station for each site.
pub fn nearest_stations(sites: &[GeoPoint], meteo: &[MeteoSeries]) -> Result<Vec<usize>> {
    let stations: Vec<GeoPoint> = meteo.iter().map(|m| m.location).collect();
    sites.iter().map(|&s| geo::nearest(s, &stations)).collect()
}

/// Builds design rows for `sites` over clock hours `hours`. Meteorology must
/// already be gap-free (see [`fill_meteo`]).
pub fn build_design(
    sites: &[GeoPoint],
    meteo: &[MeteoSeries],
    roads: &RoadDistances,
    hours: Range<usize>,
) -> Result<DesignMatrix> {
    if roads.primary_m.len() != sites.len() || roads.secondary_m.len() != sites.len() {
        return Err(Error::invalid("road distances do not match the site list"));
    }
    let station = nearest_stations(sites, meteo)?;
    for m in meteo {
        if m.temperature.len() < hours.end || m.wind_speed.len() < hours.end {
            return Err(Error::invalid(format!(
                "station {} covers {} hours; {} required",
                m.station_id,
                m.temperature.len(),
                hours.end
            )));
        }
    }
    let n = sites.len();
    let mut data = Vec::with_capacity(n * hours.len() * N_COVARIATES);
    for h in hours.clone() {
        for s in 0..n {
            let m = &meteo[station[s]];
            let (Some(temp), Some(wind)) = (m.temperature[h], m.wind_speed[h]) else {
                return Err(Error::invalid(format!(
                    "station {} has a gap at hour {h}; fill meteorology first",
                    m.station_id
                )));
            };
            data.extend_from_slice(&[1.0, temp, wind, roads.primary_m[s], roads.secondary_m[s]]);
        }
    }
    DesignMatrix::from_rows(n, hours.start, hours.len(), data)
}

/// Writes design rows as CSV for auditing.
pub fn write_design(path: &Path, site_ids: &[String], design: &DesignMatrix) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "site_id,hour_index,{}", COVARIATE_NAMES.join(",")).map_err(io)?;
    for h in 0..design.hours {
        for (s, id) in site_ids.iter().enumerate() {
            let r = design.row(h, s);
            writeln!(w, "{id},{},{},{},{},{},{}", design.first_hour + h, r[0], r[1], r[2], r[3], r[4])
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Equal-width distance bins over `[0, max_km]`; the last bin includes its
/// upper edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariogramBins {
    pub edges: Vec<f64>,
}

impl VariogramBins {
    pub fn equal_width(max_km: f64, count: usize) -> Result<Self> {
        if !(max_km > 0.0) || count == 0 {
            return Err(Error::invalid("variogram bins need a positive range and count"));
        }
        Ok(VariogramBins {
            edges: (0..=count).map(|i| max_km * i as f64 / count as f64).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn locate(&self, d: f64) -> Option<usize> {
        let k = self.len();
        let (lo, hi) = (self.edges[0], self.edges[k]);
        if d < lo || d > hi {
            return None;
        }
        Some(self.edges[1..].partition_point(|&e| e <= d).min(k - 1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemivariogramEstimate {
    pub centers_km: Vec<f64>,
    /// `None` marks an empty bin.
    pub semivariance: Vec<Option<f64>>,
    /// Site pairs per bin within one time slice.
    pub pair_counts: Vec<usize>,
    pub hours: usize,
}

/// Matheron estimator per distance bin, averaged over hours.
///
/// `values[t][s]` is the value at site `s` in slice `t`. `bins` defaults to
/// ten equal-width bins spanning the largest pairwise distance.
pub fn empirical_semivariogram(
    sites: &[PlanePoint],
    values: &[Vec<f64>],
    bins: Option<VariogramBins>,
) -> Result<SemivariogramEstimate> {
    let n = sites.len();
    if n < 2 {
        return Err(Error::invalid("semivariogram needs at least two sites"));
    }
    if values.iter().any(|v| v.len() != n) {
        return Err(Error::invalid("every time slice must have one value per site"));
    }
    let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
    let mut d_max: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sites[i].distance(&sites[j]);
            d_max = d_max.max(d);
            pairs.push((i, j, d));
        }
    }
    let bins = match bins {
        Some(b) => b,
        None => VariogramBins::equal_width(if d_max > 0.0 { d_max } else { 1.0 }, 10)?,
    };
    let k = bins.len();
    let mut counts = vec![0usize; k];
    let mut sums = vec![0.0f64; k];
    let located: Vec<(usize, usize, Option<usize>)> =
        pairs.iter().map(|&(i, j, d)| (i, j, bins.locate(d))).collect();
    for &(_, _, b) in &located {
        if let Some(b) = b {
            counts[b] += 1;
        }
    }
    for v in values {
        for &(i, j, b) in &located {
            if let Some(b) = b {
                sums[b] += (v[i] - v[j]).powi(2);
            }
        }
    }
    let t = values.len();
    let semivariance = (0..k)
        .map(|b| (counts[b] > 0 && t > 0).then(|| sums[b] / (2.0 * counts[b] as f64 * t as f64)))
        .collect();
    Ok(SemivariogramEstimate {
        centers_km: (0..k).map(|b| 0.5 * (bins.edges[b] + bins.edges[b + 1])).collect(),
        semivariance,
        pair_counts: counts,
        hours: t,
    })
}

/// Diagnostic exponential fit `nugget + psill * (1 - exp(-phi * d))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub nugget: f64,
    pub partial_sill: f64,
    pub phi: f64,
}

/// Pair-count weighted least squares over a log grid of decay rates, with the
/// nugget and partial sill solved linearly at each rate.
pub fn fit_exponential(est: &SemivariogramEstimate) -> Option<ExponentialFit> {
    let pts: Vec<(f64, f64, f64)> = est
        .centers_km
        .iter()
        .zip(&est.semivariance)
        .zip(&est.pair_counts)
        .filter_map(|((&d, g), &c)| g.map(|g| (d, g, c as f64)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let d_max = pts.iter().map(|p| p.0).fold(0.0, f64::max).max(1e-9);
    let mut best: Option<(f64, ExponentialFit)> = None;
    for i in 0..=400 {
        let phi = (0.1 / d_max) * 10f64.powf(i as f64 * 3.0 / 400.0);
        // Weighted normal equations for g = a + b * f(d).
        let (mut sw, mut sf, mut sff, mut sg, mut sfg) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for &(d, g, w) in &pts {
            let f = 1.0 - (-phi * d).exp();
            sw += w;
            sf += w * f;
            sff += w * f * f;
            sg += w * g;
            sfg += w * f * g;
        }
        let det = sw * sff - sf * sf;
        if det.abs() < 1e-12 {
            continue;
        }
        let b = ((sw * sfg - sf * sg) / det).max(0.0);
        let a = ((sg - b * sf) / sw).max(0.0);
        let sse: f64 = pts
            .iter()
            .map(|&(d, g, w)| w * (g - a - b * (1.0 - (-phi * d).exp())).powi(2))
            .sum();
        if best.as_ref().is_none_or(|(s, _)| sse < *s) {
            best = Some((
                sse,
                ExponentialFit {
                    nugget: a,
                    partial_sill: b,
                    phi,
                },
            ));
        }
    }
    best.map(|(_, f)| f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn station(id: &str, lat: f64, lon: f64, temps: Vec<f64>) -> MeteoSeries {
        MeteoSeries {
            station_id: id.into(),
            location: GeoPoint { lat, lon },
            wind_speed: temps.iter().map(|t| Some(t / 10.0)).collect(),
            temperature: temps.into_iter().map(Some).collect(),
        }
    }

    fn roads() -> Vec<Road> {
        vec![
            Road {
                road_id: "P".into(),
                class: RoadClass::Primary,
                vertices: vec![GeoPoint { lat: 41.0, lon: -73.0 }, GeoPoint { lat: 41.0, lon: -72.0 }],
            },
            Road {
                road_id: "S".into(),
                class: RoadClass::Secondary,
                vertices: vec![GeoPoint { lat: 41.5, lon: -73.0 }, GeoPoint { lat: 41.6, lon: -72.0 }],
            },
        ]
    }

    #[test]
    fn colocated_site_copies_station_values() {
        let meteo = vec![
            station("W1", 41.2, -72.5, vec![20.0, 21.0, 22.0]),
            station("W2", 41.8, -72.5, vec![10.0, 11.0, 12.0]),
        ];
        let sites = vec![GeoPoint { lat: 41.8, lon: -72.5 }, GeoPoint { lat: 41.25, lon: -72.4 }];
        let rd = road_distances(&sites, &roads()).unwrap();
        let x = build_design(&sites, &meteo, &rd, 0..3).unwrap();
        assert_eq!(x.hours, 3);
        assert_eq!(x.row(1, 0), &[1.0, 11.0, 1.1, rd.primary_m[0], rd.secondary_m[0]]);
        assert_eq!(x.row(2, 1)[1], 22.0);
        assert!((rd.primary_m[0] - geo::haversine_m(sites[0], GeoPoint { lat: 41.0, lon: -72.5 })).abs() < 500.0);
        let sub = x.select_hours(1..3);
        assert_eq!(sub.first_hour, 1);
        assert_eq!(sub.row(0, 0), x.row(1, 0));
    }

    #[test]
    fn missing_road_class_is_an_error() {
        let mut r = roads();
        r.retain(|r| r.class == RoadClass::Primary);
        assert!(road_distances(&[GeoPoint { lat: 41.0, lon: -72.0 }], &r).is_err());
    }

    #[test]
    fn gaps_must_be_filled_first() {
        let mut m = station("W1", 41.2, -72.5, vec![20.0, 21.0]);
        m.temperature[1] = None;
        let sites = vec![GeoPoint { lat: 41.2, lon: -72.5 }];
        let rd = road_distances(&sites, &roads()).unwrap();
        assert!(build_design(&sites, std::slice::from_ref(&m), &rd, 0..2).is_err());
        let filled = fill_meteo(&[m]).unwrap();
        let x = build_design(&sites, &filled, &rd, 0..2).unwrap();
        assert_eq!(x.row(1, 0)[1], 20.0);
    }

    #[test]
    fn nearest_station_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let meteo: Vec<_> = (0..12)
            .map(|i| station(&format!("W{i}"), rng.random_range(41.0..42.0), rng.random_range(-73.7..-71.8), vec![i as f64]))
            .collect();
        let sites: Vec<GeoPoint> = (0..40)
            .map(|_| GeoPoint { lat: rng.random_range(41.0..42.0), lon: rng.random_range(-73.7..-71.8) })
            .collect();
        let got = nearest_stations(&sites, &meteo).unwrap();
        for (s, &k) in sites.iter().zip(&got) {
            let scan = (0..meteo.len())
                .min_by(|&a, &b| {
                    geo::haversine_m(*s, meteo[a].location)
                        .partial_cmp(&geo::haversine_m(*s, meteo[b].location))
                        .unwrap()
                })
                .unwrap();
            assert_eq!(k, scan);
        }
    }

    #[test]
    fn semivariogram_simple_cases() {
        let sites = vec![PlanePoint { x: 0.0, y: 0.0 }, PlanePoint { x: 3.0, y: 4.0 }];
        let v = vec![vec![1.0, 3.0], vec![2.0, 2.0]];
        let est = empirical_semivariogram(&sites, &v, None).unwrap();
        assert_eq!(est.pair_counts.iter().sum::<usize>(), 1);
        let g: Vec<f64> = est.semivariance.iter().flatten().copied().collect();
        assert_eq!(g, vec![(4.0 / 2.0 + 0.0) / 2.0]);
        assert!(est.semivariance.iter().filter(|g| g.is_none()).count() == 9);

        let flat = vec![vec![5.0, 5.0]];
        let est = empirical_semivariogram(&sites, &flat, None).unwrap();
        assert!(est.semivariance.iter().flatten().all(|&g| g == 0.0));
        assert!(empirical_semivariogram(&sites[..1], &[vec![1.0]], None).is_err());
    }

    #[test]
    fn semivariogram_matches_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let sites: Vec<PlanePoint> = (0..5)
            .map(|_| PlanePoint { x: rng.random_range(0.0..100.0), y: rng.random_range(0.0..100.0) })
            .collect();
        let values: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(0.0..50.0)).collect()).collect();
        let bins = VariogramBins::equal_width(150.0, 6).unwrap();
        let est = empirical_semivariogram(&sites, &values, Some(bins.clone())).unwrap();
        assert_eq!(est.pair_counts.iter().sum::<usize>(), 10);
        for b in 0..6 {
            let (lo, hi) = (bins.edges[b], bins.edges[b + 1]);
            let mut acc = Vec::new();
            for t in 0..7 {
                let mut per_t = Vec::new();
                for i in 0..5 {
                    for j in 0..5 {
                        if i < j {
                            let d = sites[i].distance(&sites[j]);
                            let inside = d >= lo && (d < hi || (b == 5 && d <= hi));
                            if inside {
                                per_t.push((values[t][i] - values[t][j]).powi(2) / 2.0);
                            }
                        }
                    }
                }
                if !per_t.is_empty() {
                    acc.push(per_t.iter().sum::<f64>() / per_t.len() as f64);
                }
            }
            match est.semivariance[b] {
                None => assert!(acc.is_empty()),
                Some(g) => {
                    let oracle = acc.iter().sum::<f64>() / acc.len() as f64;
                    assert!((g - oracle).abs() < 1e-9 * oracle.max(1.0));
                }
            }
        }
        let shifted: Vec<Vec<f64>> = values.iter().map(|v| v.iter().map(|x| x + 17.0).collect()).collect();
        let est2 = empirical_semivariogram(&sites, &shifted, Some(bins)).unwrap();
        for (a, b) in est.semivariance.iter().zip(&est2.semivariance) {
            match (a, b) {
                (Some(a), Some(b)) => assert!((a - b).abs() < 1e-9 * a.max(1.0)),
                (None, None) => {}
                _ => panic!("bin occupancy changed"),
            }
        }
    }

    #[test]
    fn exponential_fit_recovers_clean_curve() {
        let centers: Vec<f64> = (0..10).map(|i| 8.0 + 16.0 * i as f64).collect();
        let est = SemivariogramEstimate {
            semivariance: centers.iter().map(|d| Some(2.0 + 10.0 * (1.0 - (-0.02 * d).exp()))).collect(),
            pair_counts: vec![5; 10],
            centers_km: centers,
            hours: 1,
        };
        let fit = fit_exponential(&est).unwrap();
        assert!((fit.nugget - 2.0).abs() < 0.1 && (fit.partial_sill - 10.0).abs() < 0.3);
        assert!((fit.phi - 0.02).abs() < 0.001);
    }
}
