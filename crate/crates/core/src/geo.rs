//! Coordinates, great-circle distances, a local planar projection and
//! nearest-neighbor lookups.
//!
//! Covariance distances throughout the crate are kilometers in the plane
//! produced by [`Projection`]. The projection is azimuthal equidistant around
//! a fixed origin (by convention the centroid of the monitor network), which
//! keeps pairwise distance distortion below 1e-4 over a 200 km box.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius used by every distance computation.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;
const EARTH_RADIUS_KM: f64 = EARTH_RADIUS_M / 1000.0;

/// Points farther than this from the projection origin are rejected.
pub const MAX_PROJECTION_RANGE_KM: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lat.is_finite() || !self.lon.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite coordinate ({}, {})",
                self.lat, self.lon
            )));
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return Err(Error::invalid(format!(
                "coordinate out of range ({}, {})",
                self.lat, self.lon
            )));
        }
        Ok(())
    }
}

/// Kilometers east (`x`) and north (`y`) of a projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanePoint {
    pub x: f64,
    pub y: f64,
}

impl PlanePoint {
    pub fn distance(&self, other: &PlanePoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    central_angle(a, b) * EARTH_RADIUS_M
}

fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * h.sqrt().min(1.0).asin()
}

/// Azimuthal equidistant projection around a fixed origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub origin: GeoPoint,
}

impl Projection {
    pub fn new(origin: GeoPoint) -> Self {
        Projection { origin }
    }

    /// Projection centered on the arithmetic mean of the given coordinates.
    pub fn centroid(points: &[GeoPoint]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("centroid of an empty point set"));
        }
        let n = points.len() as f64;
        let lat = points.iter().map(|p| p.lat).sum::<f64>() / n;
        let lon = points.iter().map(|p| p.lon).sum::<f64>() / n;
        Ok(Projection::new(GeoPoint::new(lat, lon)?))
    }

    pub fn project(&self, p: GeoPoint) -> Result<PlanePoint> {
        let c = central_angle(self.origin, p);
        let rho = c * EARTH_RADIUS_KM;
        if rho > MAX_PROJECTION_RANGE_KM {
            return Err(Error::invalid(format!(
                "point ({}, {}) is {:.0} km from the projection origin (limit {} km)",
                p.lat, p.lon, rho, MAX_PROJECTION_RANGE_KM
            )));
        }
        if rho == 0.0 {
            return Ok(PlanePoint { x: 0.0, y: 0.0 });
        }
        let (lat0, lat) = (self.origin.lat.to_radians(), p.lat.to_radians());
        let dlon = (p.lon - self.origin.lon).to_radians();
        let azimuth = (dlon.sin() * lat.cos())
            .atan2(lat0.cos() * lat.sin() - lat0.sin() * lat.cos() * dlon.cos());
        Ok(PlanePoint {
            x: rho * azimuth.sin(),
            y: rho * azimuth.cos(),
        })
    }

    pub fn unproject(&self, q: PlanePoint) -> GeoPoint {
        let rho = q.x.hypot(q.y);
        if rho == 0.0 {
            return self.origin;
        }
        let c = rho / EARTH_RADIUS_KM;
        let azimuth = q.x.atan2(q.y);
        let lat0 = self.origin.lat.to_radians();
        let lat = (lat0.sin() * c.cos() + lat0.cos() * c.sin() * azimuth.cos()).asin();
        let dlon = (azimuth.sin() * c.sin() * lat0.cos()).atan2(c.cos() - lat0.sin() * lat.sin());
        GeoPoint {
            lat: lat.to_degrees(),
            lon: self.origin.lon + dlon.to_degrees(),
        }
    }
}

/// Projects `p` into the plane centered at `origin`.
pub fn project(origin: GeoPoint, p: GeoPoint) -> Result<PlanePoint> {
    Projection::new(origin).project(p)
}

/// Index of the candidate closest to `site`; ties go to the lowest index.
pub fn nearest(site: GeoPoint, candidates: &[GeoPoint]) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = haversine_m(site, *c);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
        .ok_or_else(|| Error::invalid("nearest() called with no candidates"))
}

/// Minimum distance in meters from `p` to a polyline, measured in the plane
/// centered at `p`. A single-vertex polyline degrades to point distance.
pub fn point_to_polyline_m(p: GeoPoint, road: &[GeoPoint]) -> Result<f64> {
    let proj = Projection::new(p);
    match road {
        [] => Err(Error::invalid("polyline without vertices")),
        [v] => Ok(haversine_m(p, *v)),
        _ => {
            let mut best = f64::INFINITY;
            let mut prev = proj.project(road[0])?;
            for v in &road[1..] {
                let cur = proj.project(*v)?;
                best = best.min(origin_to_segment_km(prev, cur));
                prev = cur;
            }
            Ok(best * 1000.0)
        }
    }
}

fn origin_to_segment_km(a: PlanePoint, b: PlanePoint) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (-(a.x * dx + a.y * dy) / len2).clamp(0.0, 1.0)
    };
    (a.x + t * dx).hypot(a.y + t * dy)
}

/// Uniform latitude/longitude bucket grid for repeated nearest-point queries
/// under the haversine metric.
#[derive(Debug, Clone)]
pub struct SpatialGrid {
    points: Vec<GeoPoint>,
    lat0: f64,
    lon0: f64,
    cell_deg: f64,
    rows: usize,
    cols: usize,
    cells: Vec<Vec<u32>>,
    /// Lower bound on the ground size of one cell, in meters.
    min_cell_m: f64,
}

impl SpatialGrid {
    pub fn new(points: Vec<GeoPoint>, cell_deg: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("spatial grid over an empty point set"));
        }
        if !(cell_deg > 0.0) {
            return Err(Error::invalid("grid cell size must be positive"));
        }
        let lat0 = points.iter().map(|p| p.lat).fold(f64::INFINITY, f64::min);
        let lat1 = points.iter().map(|p| p.lat).fold(f64::NEG_INFINITY, f64::max);
        let lon0 = points.iter().map(|p| p.lon).fold(f64::INFINITY, f64::min);
        let lon1 = points.iter().map(|p| p.lon).fold(f64::NEG_INFINITY, f64::max);
        let rows = ((lat1 - lat0) / cell_deg).floor() as usize + 1;
        let cols = ((lon1 - lon0) / cell_deg).floor() as usize + 1;
        let mut cells = vec![Vec::new(); rows * cols];
        for (i, p) in points.iter().enumerate() {
            let r = (((p.lat - lat0) / cell_deg) as usize).min(rows - 1);
            let c = (((p.lon - lon0) / cell_deg) as usize).min(cols - 1);
            cells[r * cols + c].push(i as u32);
        }
        // Longitude cells shrink toward the poles; bound with the worst latitude
        // reachable from any query inside the grid's extent plus one cell.
        let max_abs_lat = (lat0.abs().max(lat1.abs()) + cell_deg).min(89.999);
        let cell_m = cell_deg.to_radians() * EARTH_RADIUS_M;
        let min_cell_m = cell_m * max_abs_lat.to_radians().cos();
        Ok(SpatialGrid {
            points,
            lat0,
            lon0,
            cell_deg,
            rows,
            cols,
            cells,
            min_cell_m,
        })
    }

    pub fn points(&self) -> &[GeoPoint] {
        &self.points
    }

    /// Nearest point to `q` as `(index, meters)`, optionally skipping one index.
    /// Ties resolve to the lowest index, matching [`nearest`].
    pub fn nearest(&self, q: GeoPoint, skip: Option<usize>) -> Option<(usize, f64)> {
        let qr = ((q.lat - self.lat0) / self.cell_deg).floor() as i64;
        let qc = ((q.lon - self.lon0) / self.cell_deg).floor() as i64;
        let max_ring = (self.rows.max(self.cols) as i64)
            + qr.unsigned_abs().max(qc.unsigned_abs()) as i64
            + 1;
        let mut best: Option<(f64, usize)> = None;
        let consider = |best: &mut Option<(f64, usize)>, r: i64, c: i64| {
            if r < 0 || c < 0 || r >= self.rows as i64 || c >= self.cols as i64 {
                return;
            }
            for &i in &self.cells[r as usize * self.cols + c as usize] {
                let i = i as usize;
                if Some(i) == skip {
                    continue;
                }
                let d = haversine_m(q, self.points[i]);
                let better = match *best {
                    None => true,
                    Some((bd, bi)) => d < bd || (d == bd && i < bi),
                };
                if better {
                    *best = Some((d, i));
                }
            }
        };
        for ring in 0..=max_ring {
            if ring == 0 {
                consider(&mut best, qr, qc);
            } else {
                for c in (qc - ring)..=(qc + ring) {
                    consider(&mut best, qr - ring, c);
                    consider(&mut best, qr + ring, c);
                }
                for r in (qr - ring + 1)..=(qr + ring - 1) {
                    consider(&mut best, r, qc - ring);
                    consider(&mut best, r, qc + ring);
                }
            }
            // Everything outside rings 0..=ring is at least `ring` whole cells away.
            if let Some((bd, _)) = best {
                if bd < ring as f64 * self.min_cell_m {
                    break;
                }
            }
        }
        best.map(|(d, i)| (i, d))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gp(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    // Spherical law of cosines, an independent route to the same distance.
    fn cosine_law_m(a: GeoPoint, b: GeoPoint) -> f64 {
        let (p1, p2) = (a.lat.to_radians(), b.lat.to_radians());
        let dl = (b.lon - a.lon).to_radians();
        (p1.sin() * p2.sin() + p1.cos() * p2.cos() * dl.cos())
            .clamp(-1.0, 1.0)
            .acos()
            * EARTH_RADIUS_M
    }

    #[test]
    fn haversine_identity_and_known_values() {
        let p = gp(41.3, -72.9);
        assert_eq!(haversine_m(p, p), 0.0);
        let a = gp(41.0, -73.0);
        let b = gp(41.0, -72.0);
        let d = haversine_m(a, b);
        assert!(((d - cosine_law_m(a, b)) / d).abs() < 1e-4, "{d}");
        let anti = haversine_m(gp(0.0, 0.0), gp(0.0, 180.0));
        assert!((anti - std::f64::consts::PI * EARTH_RADIUS_M).abs() < 1.0);
    }

    #[test]
    fn rejects_bad_coordinates() {
        assert!(GeoPoint::new(91.0, 0.0).is_err());
        assert!(GeoPoint::new(0.0, -180.5).is_err());
        assert!(GeoPoint::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn projection_basics() {
        let o = gp(41.5, -72.7);
        assert_eq!(project(o, o).unwrap(), PlanePoint { x: 0.0, y: 0.0 });
        let north = project(o, gp(42.5, -72.7)).unwrap();
        let oracle_km = haversine_m(o, gp(42.5, -72.7)) / 1000.0;
        assert!((north.y - oracle_km).abs() < 0.1 && (north.y - 111.19).abs() < 0.1);
        assert!(north.x.abs() < 1e-9);
        assert!(project(o, gp(47.0, -72.7)).is_err());
    }

    #[test]
    fn projection_matches_haversine_for_ct_monitor_pair() {
        let o = gp(41.463, -72.830);
        let greenwich = gp(41.0036, -73.5850);
        let abington = gp(41.8403, -72.0101);
        let proj = Projection::new(o);
        let plane = proj
            .project(greenwich)
            .unwrap()
            .distance(&proj.project(abington).unwrap());
        let hav = haversine_m(greenwich, abington) / 1000.0;
        assert!(((plane - hav) / hav).abs() < 0.005);
    }

    #[test]
    fn nearest_tie_and_empty() {
        let c = vec![gp(41.0, -72.0), gp(41.1, -72.0), gp(40.9, -72.0), gp(41.2, -72.0)];
        assert_eq!(nearest(c[3], &c).unwrap(), 3);
        // 41.0 is equidistant from 40.9 and 41.1 (indices 1 and 2): lowest index wins.
        assert_eq!(nearest(gp(41.0, -72.0), &c[1..]).unwrap(), 0);
        assert!(nearest(c[0], &[]).is_err());
    }

    #[test]
    fn nearest_matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let cands: Vec<_> = (0..50)
                .map(|_| gp(rng.random_range(41.0..42.0), rng.random_range(-73.7..-71.8)))
                .collect();
            let q = gp(rng.random_range(41.0..42.0), rng.random_range(-73.7..-71.8));
            let scan = (0..cands.len())
                .min_by(|&i, &j| {
                    haversine_m(q, cands[i])
                        .partial_cmp(&haversine_m(q, cands[j]))
                        .unwrap()
                        .then(i.cmp(&j))
                })
                .unwrap();
            assert_eq!(nearest(q, &cands).unwrap(), scan);
            let grid = SpatialGrid::new(cands.clone(), 0.05).unwrap();
            assert_eq!(grid.nearest(q, None).unwrap().0, scan);
        }
    }

    #[test]
    fn grid_nearest_excluding_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<_> = (0..300)
            .map(|_| gp(rng.random_range(41.0..42.0), rng.random_range(-73.7..-71.8)))
            .collect();
        let grid = SpatialGrid::new(pts.clone(), 0.02).unwrap();
        for i in 0..pts.len() {
            let brute = (0..pts.len())
                .filter(|&j| j != i)
                .map(|j| haversine_m(pts[i], pts[j]))
                .fold(f64::INFINITY, f64::min);
            let (_, d) = grid.nearest(pts[i], Some(i)).unwrap();
            assert_eq!(d, brute);
        }
    }

    #[test]
    fn polyline_distance_cases() {
        let road = vec![gp(41.0, -72.5), gp(41.5, -72.5), gp(41.5, -72.0)];
        assert_eq!(point_to_polyline_m(road[1], &road).unwrap(), 0.0);
        // Perpendicular offset east of a meridian segment.
        let p = gp(41.25, -72.5 + 0.01);
        let d_expected = haversine_m(p, gp(41.25, -72.5));
        let d = point_to_polyline_m(p, &road[..2]).unwrap();
        assert!(((d - d_expected) / d_expected).abs() < 0.005, "{d} vs {d_expected}");
        let single = point_to_polyline_m(p, &road[..1]).unwrap();
        assert_eq!(single, haversine_m(p, road[0]));
    }

    #[test]
    fn polyline_matches_dense_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut road = vec![gp(41.5, -72.5)];
            for _ in 0..5 {
                let last = *road.last().unwrap();
                road.push(gp(
                    last.lat + rng.random_range(-0.03..0.03),
                    last.lon + rng.random_range(-0.03..0.03),
                ));
            }
            let p = gp(41.5 + rng.random_range(-0.1..0.1), -72.5 + rng.random_range(-0.1..0.1));
            let mut oracle = f64::INFINITY;
            for w in road.windows(2) {
                for k in 0..=4000 {
                    let t = k as f64 / 4000.0;
                    let q = gp(
                        w[0].lat + t * (w[1].lat - w[0].lat),
                        w[0].lon + t * (w[1].lon - w[0].lon),
                    );
                    oracle = oracle.min(haversine_m(p, q));
                }
            }
            let d = point_to_polyline_m(p, &road).unwrap();
            assert!((d - oracle).abs() < 1.0, "{d} vs {oracle}");
        }
    }

    fn ct_point() -> impl Strategy<Value = GeoPoint> {
        (40.6f64..42.4, -73.9f64..-71.5).prop_map(|(lat, lon)| GeoPoint { lat, lon })
    }

    proptest! {
        #[test]
        fn haversine_is_a_metric(a in ct_point(), b in ct_point(), c in ct_point()) {
            prop_assert_eq!(haversine_m(a, b), haversine_m(b, a));
            prop_assert!(haversine_m(a, c) <= haversine_m(a, b) + haversine_m(b, c) + 1e-6);
        }

        #[test]
        fn projection_is_near_isometric(a in ct_point(), b in ct_point()) {
            let o = GeoPoint { lat: 41.5, lon: -72.7 };
            let proj = Projection::new(o);
            let (pa, pb) = (proj.project(a).unwrap(), proj.project(b).unwrap());
            let hav = haversine_m(a, b) / 1000.0;
            prop_assume!(hav > 0.01);
            prop_assert!((pa.distance(&pb) / hav - 1.0).abs() < 0.005);
            let back = proj.unproject(pa);
            prop_assert!(haversine_m(a, back) < 0.001 * haversine_m(o, a).max(1.0));
        }
    }
}
