use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{stream, MonitorLayout, RegionBox, RoadLayout, SynthScenario};
use crate::error::{Error, Result};
use crate::geo::{GeoPoint, PlanePoint, Projection};
use crate::ingest::{Road, RoadClass, TowerSite};

const TOWER_SALT: u64 = 0x7a3c_11d0_55e2_9b01;
const ROAD_SALT: u64 = 0x1f4b_c0de_2a77_e310;
const MONITOR_SALT: u64 = 0x5e77_0b1c_d3a9_4c22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorSite {
    pub site_id: String,
    pub location: GeoPoint,
    pub holdout: bool,
}

const CT_MONITORS: [(&str, f64, f64); 12] = [
    ("Abington", 41.8403, -72.0101),
    ("Cornwall", 41.8214, -73.2973),
    ("Danbury", 41.3992, -73.4431),
    ("EastHartford", 41.7842, -72.6317),
    ("Greenwich", 41.0036, -73.5850),
    ("Groton", 41.3536, -72.0789),
    ("Madison", 41.2598, -72.5503),
    ("Middletown", 41.5500, -72.6300),
    ("NewHaven", 41.3014, -72.9029),
    ("Westport", 41.1183, -73.3367),
    ("Stafford", 41.9762, -72.3881),
    ("Stratford", 41.1522, -73.1031),
];

const CT_STATIONS: [(&str, f64, f64); 12] = [
    ("BDR", 41.158, -73.129),
    ("BDL", 41.938, -72.682),
    ("HFD", 41.736, -72.651),
    ("HVN", 41.264, -72.887),
    ("GON", 41.328, -72.049),
    ("DXR", 41.371, -73.482),
    ("OXC", 41.479, -73.135),
    ("MMK", 41.510, -72.828),
    ("IJD", 41.742, -72.184),
    ("SNC", 41.384, -72.506),
    ("LZD", 41.820, -71.900),
    ("TOR", 41.830, -73.130),
];

fn uniform_point(region: &RegionBox, rng: &mut impl Rng) -> GeoPoint {
    GeoPoint {
        lat: rng.random_range(region.lat_min..region.lat_max),
        lon: rng.random_range(region.lon_min..region.lon_max),
    }
}

/// Monitor sites, training sites first and held-out sites last.
pub fn monitor_sites(scn: &SynthScenario) -> Vec<MonitorSite> {
    match scn.monitors {
        MonitorLayout::Connecticut => CT_MONITORS
            .iter()
            .enumerate()
            .map(|(i, &(id, lat, lon))| MonitorSite {
                site_id: id.to_string(),
                location: GeoPoint { lat, lon },
                holdout: i >= 10,
            })
            .collect(),
        MonitorLayout::Random { count, holdout } => {
            let mut rng = stream(scn.seed, MONITOR_SALT, 0);
            (0..count)
                .map(|i| MonitorSite {
                    site_id: format!("M{:03}", i + 1),
                    location: uniform_point(&scn.region, &mut rng),
                    holdout: i >= count - holdout,
                })
                .collect()
        }
    }
}

/// Weather station ids and locations.
pub fn station_sites(scn: &SynthScenario) -> Vec<(String, GeoPoint)> {
    match scn.monitors {
        MonitorLayout::Connecticut => {
            let mut out: Vec<_> = CT_STATIONS
                .iter()
                .map(|&(id, lat, lon)| (id.to_string(), GeoPoint { lat, lon }))
                .collect();
            let mut rng = stream(scn.seed, MONITOR_SALT, 1);
            for i in out.len()..scn.meteo.stations {
                out.push((format!("W{:03}", i + 1), uniform_point(&scn.region, &mut rng)));
            }
            out
        }
        MonitorLayout::Random { .. } => {
            let mut rng = stream(scn.seed, MONITOR_SALT, 1);
            (0..scn.meteo.stations)
                .map(|i| (format!("W{:03}", i + 1), uniform_point(&scn.region, &mut rng)))
                .collect()
        }
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Town centers shared by the tower and road generators.
fn towns(scn: &SynthScenario) -> Vec<GeoPoint> {
    let mut rng = stream(scn.seed, TOWER_SALT, 0);
    (0..scn.towers.clusters).map(|_| uniform_point(&scn.region, &mut rng)).collect()
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}

/// Clustered tower sites with ids `T0001`, `T0002`, ...
pub fn gen_towers(scn: &SynthScenario) -> Result<Vec<TowerSite>> {
    let spec = &scn.towers;
    let region = &scn.region;
    let proj = Projection::new(region.center());
    let centers: Vec<PlanePoint> = towns(scn).into_iter().map(|p| proj.project(p)).collect::<Result<_>>()?;
    let mut rng = stream(scn.seed, TOWER_SALT, 1);
    let weights: Vec<f64> = (0..centers.len()).map(|_| Exp1.sample(&mut rng)).collect::<Vec<f64>>();
    let pick = WeightedIndex::new(&weights).map_err(|e| Error::invalid(format!("town weights: {e}")))?;
    let per_mast = Geometric::new(1.0 / spec.mean_per_mast).map_err(|e| Error::invalid(e.to_string()))?;
    let width = digits(spec.count);
    let mut out = Vec::with_capacity(spec.count);
    while out.len() < spec.count {
        let c = centers[pick.sample(&mut rng)];
        let mast = PlanePoint {
            x: c.x + spec.cluster_sd_km * normal(&mut rng),
            y: c.y + spec.cluster_sd_km * normal(&mut rng),
        };
        if !region.contains(proj.unproject(mast)) {
            continue;
        }
        let k = 1 + per_mast.sample(&mut rng) as usize;
        for _ in 0..k {
            if out.len() == spec.count {
                break;
            }
            let r_km = (spec.offset_median_m.ln() + spec.offset_log_sd * normal(&mut rng)).exp() / 1000.0;
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let p = proj.unproject(PlanePoint {
                x: mast.x + r_km * theta.cos(),
                y: mast.y + r_km * theta.sin(),
            });
            if region.contains(p) {
                out.push(TowerSite {
                    tower_id: format!("T{:0width$}", out.len() + 1),
                    location: p,
                });
            }
        }
    }
    Ok(out)
}

fn walk(
    proj: &Projection,
    region: &RegionBox,
    start: PlanePoint,
    heading: f64,
    step_km: f64,
    vertices: usize,
    turn_sd: f64,
    rng: &mut impl Rng,
) -> Vec<GeoPoint> {
    let mut pts = Vec::with_capacity(vertices);
    let first = proj.unproject(start);
    if region.contains(first) {
        pts.push(first);
    }
    let (mut p, mut h) = (start, heading);
    while pts.len() < vertices {
        h += turn_sd * normal(rng);
        p = PlanePoint {
            x: p.x + step_km * h.cos(),
            y: p.y + step_km * h.sin(),
        };
        let g = proj.unproject(p);
        if region.contains(g) {
            pts.push(g);
        } else if !pts.is_empty() {
            break;
        } else if p.x.abs() > 1e3 || p.y.abs() > 1e3 {
            break;
        }
    }
    pts
}

/// Primary roads cross the region; secondary roads wander out of towns.
pub fn gen_roads(scn: &SynthScenario) -> Result<Vec<Road>> {
    let spec: &RoadLayout = &scn.roads;
    let region = &scn.region;
    let proj = Projection::new(region.center());
    let mut rng = stream(scn.seed, ROAD_SALT, 0);
    let corner = |lat: f64, lon: f64| proj.project(GeoPoint { lat, lon });
    let sw = corner(region.lat_min, region.lon_min)?;
    let ne = corner(region.lat_max, region.lon_max)?;
    let span = (ne.x - sw.x).max(ne.y - sw.y);
    let mut roads = Vec::new();
    for i in 0..spec.primary {
        // Alternate west-east and south-north crossings.
        let (start, heading) = if i % 2 == 0 {
            (PlanePoint { x: sw.x + 0.5, y: rng.random_range(sw.y..ne.y) }, 0.0)
        } else {
            (PlanePoint { x: rng.random_range(sw.x..ne.x), y: sw.y + 0.5 }, std::f64::consts::FRAC_PI_2)
        };
        let step = span / (spec.primary_vertices - 1) as f64;
        let vertices = walk(&proj, region, start, heading, step, spec.primary_vertices, 0.15, &mut rng);
        if vertices.len() >= 2 {
            roads.push(Road {
                road_id: format!("P{:02}", i + 1),
                class: RoadClass::Primary,
                vertices,
            });
        }
    }
    let centers = towns(scn);
    for i in 0..spec.secondary {
        let c = proj.project(centers[i % centers.len()])?;
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        let vertices = walk(&proj, region, c, heading, spec.secondary_step_km, spec.secondary_vertices, 0.4, &mut rng);
        if vertices.len() >= 2 {
            roads.push(Road {
                road_id: format!("S{:03}", i + 1),
                class: RoadClass::Secondary,
                vertices,
            });
        }
    }
    for class in [RoadClass::Primary, RoadClass::Secondary] {
        if !roads.iter().any(|r| r.class == class) {
            return Err(Error::invalid(format!("no {} road fits inside the region", class.as_str())));
        }
    }
    Ok(roads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::default_phi;
    use crate::ingest::TowerTable;
    use crate::mobility::network_stats;

    #[test]
    fn connecticut_monitors_give_default_phi() {
        let scn = SynthScenario::desk();
        let sites = monitor_sites(&scn);
        let train: Vec<GeoPoint> = sites.iter().filter(|s| !s.holdout).map(|s| s.location).collect();
        assert_eq!(train.len(), 10);
        let proj = Projection::centroid(&sites.iter().map(|s| s.location).collect::<Vec<_>>()).unwrap();
        let pts: Vec<_> = train.iter().map(|&p| proj.project(p).unwrap()).collect();
        let phi = default_phi(&pts).unwrap();
        assert!((phi - 0.0186).abs() < 5e-4, "{phi}");
        let held: Vec<&str> = sites.iter().filter(|s| s.holdout).map(|s| s.site_id.as_str()).collect();
        assert_eq!(held, ["Stafford", "Stratford"]);
    }

    #[test]
    fn towers_inside_region_and_deterministic() {
        let mut scn = SynthScenario::desk();
        scn.towers.count = 500;
        let a = gen_towers(&scn).unwrap();
        assert_eq!(a.len(), 500);
        assert!(a.iter().all(|t| scn.region.contains(t.location)));
        assert_eq!(a, gen_towers(&scn).unwrap());
        assert_eq!(a[0].tower_id, "T001");
        scn.seed += 1;
        assert_ne!(a, gen_towers(&scn).unwrap());
    }

    #[test]
    fn stress_layout_nearest_distance_quartiles() {
        let scn = SynthScenario::stress();
        let table = TowerTable::new(gen_towers(&scn).unwrap()).unwrap();
        let stats = network_stats(&table, &[]).unwrap();
        let target = [2.7, 68.2, 306.0];
        for (q, t) in stats.nearest_quartiles.iter().zip(target) {
            assert!(*q > t / 2.0 && *q < t * 2.0, "quartiles {:?}", stats.nearest_quartiles);
        }
    }

    #[test]
    fn roads_cover_both_classes() {
        let scn = SynthScenario::desk();
        let roads = gen_roads(&scn).unwrap();
        assert!(roads.iter().any(|r| r.class == RoadClass::Primary));
        assert!(roads.iter().any(|r| r.class == RoadClass::Secondary));
        assert!(roads.iter().flat_map(|r| &r.vertices).all(|p| scn.region.contains(*p)));
    }
}
