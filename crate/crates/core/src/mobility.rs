//! Device trajectories from tower hand-offs, night-time local areas and
//! network statistics.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{NightWindow, Window};
use crate::error::{Error, Result};
use crate::geo::SpatialGrid;
use crate::ingest::{HandoffTable, TowerTable};
use crate::stats::quantile_sorted;

/// Time at one tower, `[start, end)` in UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DwellSegment {
    pub tower: u32,
    pub start: i64,
    pub end: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub device: u32,
    pub segments: Vec<DwellSegment>,
}

impl Trajectory {
    pub fn dwell_seconds(&self) -> i64 {
        self.segments.iter().map(|s| s.end - s.start).sum()
    }
}

/// Trajectories for every retained device, stored column-wise. Segments of a
/// device are contiguous, so only start times are kept; each segment ends
/// where the next begins and the last ends at the window end.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectorySet {
    pub window: Option<Window>,
    /// All device ids seen in the input, sorted; `devices` index into it.
    pub device_ids: Vec<String>,
    pub devices: Vec<u32>,
    /// Hand-off records per retained device.
    pub handoffs: Vec<u32>,
    /// Devices dropped for a record outside the window or region.
    pub dropped: Vec<u32>,
    offsets: Vec<usize>,
    tower: Vec<u32>,
    start: Vec<i64>,
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.tower.len()
    }

    pub fn device_id(&self, i: usize) -> &str {
        &self.device_ids[self.devices[i] as usize]
    }

    pub fn segments(&self, i: usize) -> impl Iterator<Item = DwellSegment> + '_ {
        let (a, b) = (self.offsets[i], self.offsets[i + 1]);
        let end = self.window.map_or(i64::MAX, |w| w.end);
        (a..b).map(move |k| DwellSegment {
            tower: self.tower[k],
            start: self.start[k],
            end: if k + 1 < b { self.start[k + 1] } else { end },
        })
    }

    pub fn trajectory(&self, i: usize) -> Trajectory {
        Trajectory {
            device: self.devices[i],
            segments: self.segments(i).collect(),
        }
    }

    /// Position of a device id among the retained devices.
    pub fn position(&self, device_id: &str) -> Option<usize> {
        let d = self.device_ids.binary_search_by(|s| s.as_str().cmp(device_id)).ok()? as u32;
        self.devices.binary_search(&d).ok()
    }
}

/// Builds one trajectory per device whose records all fall inside `window`
/// and, when given, on towers flagged in `in_region`.
///
/// Records are ordered by timestamp with file order breaking ties; of several
/// records sharing a timestamp the last one in the file wins. Each hand-off
/// opens a segment lasting until the next, adjacent segments at the same tower
/// are merged, and the final segment closes at the window end.
pub fn build_trajectories(table: &HandoffTable, window: Window, in_region: Option<&[bool]>) -> Result<TrajectorySet> {
    let n_dev = table.device_ids.len();
    let mut counts = vec![0u32; n_dev];
    let mut bad = vec![false; n_dev];
    for i in 0..table.len() {
        let d = table.device[i] as usize;
        counts[d] += 1;
        let outside_region = in_region.is_some_and(|r| !r[table.tower[i] as usize]);
        if !window.contains(table.timestamp[i]) || outside_region {
            bad[d] = true;
        }
    }

    // Stable counting sort of record indices by device keeps file order.
    let mut first = vec![0usize; n_dev + 1];
    for d in 0..n_dev {
        first[d + 1] = first[d] + counts[d] as usize;
    }
    let mut order = vec![0u32; table.len()];
    let mut fill = first.clone();
    for i in 0..table.len() {
        let d = table.device[i] as usize;
        order[fill[d]] = i as u32;
        fill[d] += 1;
    }

    let kept: Vec<u32> = (0..n_dev as u32).filter(|&d| !bad[d as usize] && counts[d as usize] > 0).collect();
    let dropped: Vec<u32> = (0..n_dev as u32).filter(|&d| bad[d as usize]).collect();
    let per_device: Vec<(Vec<u32>, Vec<i64>)> = kept
        .par_iter()
        .map(|&d| {
            let mut recs: Vec<u32> = order[first[d as usize]..first[d as usize + 1]].to_vec();
            recs.sort_by_key(|&i| table.timestamp[i as usize]);
            let mut towers = Vec::new();
            let mut starts = Vec::new();
            for (k, &i) in recs.iter().enumerate() {
                let ts = table.timestamp[i as usize];
                if recs.get(k + 1).is_some_and(|&j| table.timestamp[j as usize] == ts) {
                    continue;
                }
                let tw = table.tower[i as usize];
                if towers.last() != Some(&tw) {
                    towers.push(tw);
                    starts.push(ts);
                }
            }
            (towers, starts)
        })
        .collect();
    drop(order);

    let total: usize = per_device.iter().map(|p| p.0.len()).sum();
    let mut set = TrajectorySet {
        window: Some(window),
        device_ids: table.device_ids.clone(),
        handoffs: kept.iter().map(|&d| counts[d as usize]).collect(),
        devices: kept,
        dropped,
        offsets: Vec::with_capacity(per_device.len() + 1),
        tower: Vec::with_capacity(total),
        start: Vec::with_capacity(total),
    };
    set.offsets.push(0);
    for (t, s) in per_device {
        set.tower.extend(t);
        set.start.extend(s);
        set.offsets.push(set.tower.len());
    }
    Ok(set)
}

const TRAJ_MAGIC: &[u8; 8] = b"MXTRJ001";

fn put_u32s(buf: &mut Vec<u8>, v: &[u32]) {
    buf.extend_from_slice(&(v.len() as u64).to_le_bytes());
    v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
}

/// Writes a trajectory set as little-endian binary.
pub fn write_trajectories(path: &Path, set: &TrajectorySet) -> Result<()> {
    let w = set.window.ok_or_else(|| Error::invalid("trajectory set has no window"))?;
    let mut buf = Vec::with_capacity(64 + set.tower.len() * 12 + set.device_ids.len() * 16);
    buf.extend_from_slice(TRAJ_MAGIC);
    buf.extend_from_slice(&w.start.to_le_bytes());
    buf.extend_from_slice(&w.end.to_le_bytes());
    buf.extend_from_slice(&(set.device_ids.len() as u64).to_le_bytes());
    for id in &set.device_ids {
        buf.extend_from_slice(&(id.len() as u32).to_le_bytes());
        buf.extend_from_slice(id.as_bytes());
    }
    put_u32s(&mut buf, &set.devices);
    put_u32s(&mut buf, &set.handoffs);
    put_u32s(&mut buf, &set.dropped);
    buf.extend_from_slice(&(set.offsets.len() as u64).to_le_bytes());
    set.offsets.iter().for_each(|x| buf.extend_from_slice(&(*x as u64).to_le_bytes()));
    put_u32s(&mut buf, &set.tower);
    set.start.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes()));
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::invalid(format!("{} is truncated", self.path.display())));
        }
        self.pos += n;
        Ok(&self.buf[self.pos - n..self.pos])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::invalid(format!("{} has a corrupt length", self.path.display())));
        }
        Ok(n)
    }

    fn u32s(&mut self) -> Result<Vec<u32>> {
        let n = self.len()?;
        (0..n).map(|_| self.u32()).collect()
    }
}

/// Reads a set written by [`write_trajectories`].
pub fn read_trajectories(path: &Path) -> Result<TrajectorySet> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut c = Cursor { buf: &buf, pos: 0, path };
    if c.take(8)? != TRAJ_MAGIC {
        return Err(Error::invalid(format!("{} is not a trajectory file", path.display())));
    }
    let window = Window::new(c.i64()?, c.i64()?)?;
    let n_ids = c.len()?;
    let mut device_ids = Vec::with_capacity(n_ids);
    for _ in 0..n_ids {
        let n = c.u32()? as usize;
        let bytes = c.take(n)?;
        device_ids.push(
            String::from_utf8(bytes.to_vec())
                .map_err(|_| Error::invalid(format!("{} holds a non-UTF-8 device id", path.display())))?,
        );
    }
    let devices = c.u32s()?;
    let handoffs = c.u32s()?;
    let dropped = c.u32s()?;
    let n_off = c.len()?;
    let offsets = (0..n_off).map(|_| c.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let tower = c.u32s()?;
    let start = (0..tower.len()).map(|_| c.i64()).collect::<Result<Vec<_>>>()?;
    let consistent = offsets.len() == devices.len() + 1
        && handoffs.len() == devices.len()
        && offsets.first() == Some(&0)
        && offsets.last() == Some(&tower.len())
        && offsets.windows(2).all(|w| w[0] <= w[1])
        && devices.iter().chain(&dropped).all(|&d| (d as usize) < device_ids.len())
        && c.pos == buf.len();
    if !consistent {
        return Err(Error::invalid(format!("{} is internally inconsistent", path.display())));
    }
    Ok(TrajectorySet {
        window: Some(window),
        device_ids,
        devices,
        handoffs,
        dropped,
        offsets,
        tower,
        start,
    })
}

/// Flags towers inside a latitude/longitude box.
pub fn region_flags(towers: &TowerTable, lat: (f64, f64), lon: (f64, f64)) -> Vec<bool> {
    towers
        .locations()
        .iter()
        .map(|p| p.lat >= lat.0 && p.lat <= lat.1 && p.lon >= lon.0 && p.lon <= lon.1)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightProfile {
    pub device: u32,
    /// Tower with the longest night dwell; `None` when the device was never
    /// seen during the night window.
    pub night_tower: Option<u32>,
    pub night_seconds: i64,
    /// Leading towers by night dwell, longest first.
    pub top: Vec<(u32, i64)>,
}

pub const NIGHT_TOP_K: usize = 3;

/// Night dwell per tower over every study day; the argmax breaks ties by the
/// lexicographically smallest tower id.
pub fn night_profile(
    device: u32,
    segments: impl Iterator<Item = DwellSegment>,
    night: NightWindow,
    utc_offset: i64,
    towers: &TowerTable,
) -> NightProfile {
    let mut per_tower: Vec<(u32, i64)> = Vec::new();
    for s in segments {
        let secs = night.overlap(s.start, s.end, utc_offset);
        if secs == 0 {
            continue;
        }
        match per_tower.iter_mut().find(|(t, _)| *t == s.tower) {
            Some(e) => e.1 += secs,
            None => per_tower.push((s.tower, secs)),
        }
    }
    per_tower.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| towers.id(a.0).cmp(towers.id(b.0))));
    per_tower.truncate(NIGHT_TOP_K);
    NightProfile {
        device,
        night_tower: per_tower.first().map(|e| e.0),
        night_seconds: per_tower.first().map_or(0, |e| e.1),
        top: per_tower,
    }
}

pub fn night_profiles(set: &TrajectorySet, night: NightWindow, utc_offset: i64, towers: &TowerTable) -> Vec<NightProfile> {
    (0..set.len())
        .into_par_iter()
        .map(|i| night_profile(set.devices[i], set.segments(i), night, utc_offset, towers))
        .collect()
}

pub fn write_night_profiles(path: &Path, set: &TrajectorySet, profiles: &[NightProfile], towers: &TowerTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["device_id", "night_tower_id", "night_seconds"])?;
    for p in profiles {
        let tower = p.night_tower.map_or("", |t| towers.id(t));
        w.write_record([set.device_ids[p.device as usize].as_str(), tower, &p.night_seconds.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads `night_profiles.csv` as `(device_id, night tower, night seconds)`.
pub fn read_night_profiles(path: &Path, towers: &TowerTable) -> Result<Vec<(String, Option<u32>, i64)>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::invalid(format!("{}: {other:?}", path.display())),
    })?;
    let expected = "device_id,night_tower_id,night_seconds";
    let found = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: expected.into(),
            found,
        });
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let perr = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let tower = if rec[1].is_empty() {
            None
        } else {
            Some(towers.get(&rec[1]).ok_or_else(|| Error::UnknownTowers(rec[1].to_string()))?)
        };
        let secs = rec[2].parse().map_err(|_| perr(format!("bad night_seconds `{}`", &rec[2])))?;
        out.push((rec[0].to_string(), tower, secs));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogCountBin {
    /// Natural-log bounds of the bin, `[lo, hi)`.
    pub lo: f64,
    pub hi: f64,
    pub devices: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkStats {
    /// `(tower, nearest other tower, meters)` for every tower.
    pub nearest: Vec<(u32, u32, f64)>,
    /// First, second and third quartile of the nearest distances, meters.
    pub nearest_quartiles: [f64; 3],
    pub devices: usize,
    pub single_handoff_devices: usize,
    pub handoff_quartiles: [f64; 3],
    pub handoff_hist: Vec<LogCountBin>,
}

pub const LOG_BIN_WIDTH: f64 = 0.5;

pub fn network_stats(towers: &TowerTable, handoff_counts: &[u32]) -> Result<NetworkStats> {
    if towers.len() < 2 {
        return Err(Error::invalid("nearest-tower distance needs at least two towers"));
    }
    let pts = towers.locations();
    let grid = SpatialGrid::new(pts.clone(), 0.02)?;
    let nearest: Vec<(u32, u32, f64)> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let (j, d) = grid.nearest(pts[i], Some(i)).expect("at least two towers");
            (i as u32, j as u32, d)
        })
        .collect();
    let mut d: Vec<f64> = nearest.iter().map(|e| e.2).collect();
    d.sort_unstable_by(f64::total_cmp);
    let q = |v: &[f64]| [0.25, 0.5, 0.75].map(|p| quantile_sorted(v, p));

    let mut counts: Vec<f64> = handoff_counts.iter().filter(|&&c| c > 0).map(|&c| c as f64).collect();
    counts.sort_unstable_by(f64::total_cmp);
    let max_bin = counts.last().map_or(0, |&c| (c.ln() / LOG_BIN_WIDTH).floor() as usize);
    let mut hist: Vec<LogCountBin> = (0..=max_bin)
        .map(|b| LogCountBin {
            lo: b as f64 * LOG_BIN_WIDTH,
            hi: (b + 1) as f64 * LOG_BIN_WIDTH,
            devices: 0,
        })
        .collect();
    for &c in &counts {
        hist[(c.ln() / LOG_BIN_WIDTH).floor() as usize].devices += 1;
    }
    Ok(NetworkStats {
        nearest,
        nearest_quartiles: q(&d),
        devices: counts.len(),
        single_handoff_devices: counts.iter().filter(|&&c| c == 1.0).count(),
        handoff_quartiles: if counts.is_empty() { [f64::NAN; 3] } else { q(&counts) },
        handoff_hist: hist,
    })
}

pub fn write_distances(path: &Path, towers: &TowerTable, stats: &NetworkStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tower_id", "nearest_tower_id", "distance_m"])?;
    for &(a, b, d) in &stats.nearest {
        w.write_record([towers.id(a), towers.id(b), &d.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_handoff_hist(path: &Path, stats: &NetworkStats) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["log_count_lo", "log_count_hi", "devices"])?;
    for b in &stats.handoff_hist {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.devices.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{haversine_m, GeoPoint};
    use crate::ingest::{HandoffRecord, TowerSite};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const T0: i64 = 1_468_814_400; // 2016-07-18 00:00 at -04:00
    const OFF: i64 = -4 * 3600;

    fn towers(n: usize) -> TowerTable {
        TowerTable::new(
            (0..n)
                .map(|i| TowerSite {
                    tower_id: format!("T{i:03}"),
                    location: GeoPoint { lat: 41.5 + 0.01 * i as f64, lon: -72.7 },
                })
                .collect(),
        )
        .unwrap()
    }

    fn rec(dev: &str, t: i64, tower: usize) -> HandoffRecord {
        HandoffRecord {
            device_id: dev.into(),
            timestamp: t,
            tower_id: format!("T{tower:03}"),
        }
    }

    fn window() -> Window {
        Window::new(T0, T0 + 7 * 86_400).unwrap()
    }

    fn build(records: &[HandoffRecord], tw: &TowerTable) -> TrajectorySet {
        build_trajectories(&HandoffTable::from_records(records, tw).unwrap(), window(), None).unwrap()
    }

    #[test]
    fn segment_rules() {
        let tw = towers(4);
        let set = build(
            &[rec("b", T0 + 36_000, 0), rec("a", T0 + 100, 2), rec("b", T0 + 41_400, 1)],
            &tw,
        );
        assert_eq!(set.len(), 2);
        assert_eq!(
            set.trajectory(0).segments,
            vec![DwellSegment { tower: 2, start: T0 + 100, end: window().end }]
        );
        assert_eq!(
            set.trajectory(1).segments,
            vec![
                DwellSegment { tower: 0, start: T0 + 36_000, end: T0 + 41_400 },
                DwellSegment { tower: 1, start: T0 + 41_400, end: window().end },
            ]
        );
        assert_eq!(set.handoffs, vec![1, 2]);
        assert_eq!(set.position("b"), Some(1));
    }

    #[test]
    fn ties_keep_last_and_repeats_merge() {
        let tw = towers(4);
        let set = build(
            &[rec("a", T0 + 50, 1), rec("a", T0 + 10, 0), rec("a", T0 + 50, 3), rec("a", T0 + 90, 3)],
            &tw,
        );
        let segs = set.trajectory(0).segments;
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1], DwellSegment { tower: 3, start: T0 + 50, end: window().end });
    }

    #[test]
    fn drops_devices_outside_window_or_region() {
        let tw = towers(3);
        let records = [rec("a", T0 - 1, 0), rec("a", T0 + 5, 1), rec("b", T0 + 5, 2), rec("c", T0 + 9, 0)];
        let table = HandoffTable::from_records(&records, &tw).unwrap();
        let set = build_trajectories(&table, window(), None).unwrap();
        assert_eq!(set.dropped, vec![0]);
        assert_eq!(set.len(), 2);
        let region = [true, true, false];
        let set = build_trajectories(&table, window(), Some(&region)).unwrap();
        assert_eq!(set.dropped, vec![0, 1]);
        assert_eq!(set.device_id(0), "c");
    }

    fn random_records(seed: u64, n: usize, devices: usize, n_towers: usize) -> Vec<HandoffRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                rec(
                    &format!("d{}", rng.random_range(0..devices)),
                    T0 + rng.random_range(0..7 * 86_400),
                    rng.random_range(0..n_towers),
                )
            })
            .collect()
    }

    #[test]
    fn dwell_is_conserved() {
        let tw = towers(30);
        let records = random_records(5, 10_000, 300, 30);
        let set = build(&records, &tw);
        for i in 0..set.len() {
            let id = set.device_id(i);
            let first = records.iter().filter(|r| r.device_id == id).map(|r| r.timestamp).min().unwrap();
            let t = set.trajectory(i);
            assert_eq!(t.dwell_seconds(), window().end - first);
            for w in t.segments.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert_ne!(w[0].tower, w[1].tower);
            }
            assert!(t.segments.iter().all(|s| s.start < s.end));
        }
    }

    proptest! {
        #[test]
        fn order_of_distinct_records_does_not_matter(seed in any::<u64>()) {
            let tw = towers(8);
            let mut records = random_records(seed, 200, 10, 8);
            let mut seen = std::collections::HashSet::new();
            records.retain(|r| seen.insert((r.device_id.clone(), r.timestamp)));
            let a = build(&records, &tw);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
            for i in (1..records.len()).rev() {
                let j = rng.random_range(0..=i);
                records.swap(i, j);
            }
            prop_assert_eq!(a, build(&records, &tw));
        }
    }

    #[test]
    fn night_tower_examples() {
        let tw = towers(3);
        let night = NightWindow::default();
        let stat = build(&[rec("s", T0, 2)], &tw);
        assert_eq!(night_profiles(&stat, night, OFF, &tw)[0].night_tower, Some(2));

        // Nightly X 21:00-23:00 and Y 23:00-06:30, elsewhere by day.
        let mut r = Vec::new();
        for d in 0..7 {
            let base = T0 + d * 86_400;
            r.push(rec("d", base + 6 * 3600 + 1800, 0));
            r.push(rec("d", base + 21 * 3600, 1));
            r.push(rec("d", base + 23 * 3600, 2));
        }
        let set = build(&r, &tw);
        let p = &night_profiles(&set, night, OFF, &tw)[0];
        assert_eq!(p.night_tower, Some(2));
        assert_eq!(p.top[0].0, 2);
        assert_eq!(p.top[1], (1, 7 * 7200));

        // Never present at night.
        let day = build(&[rec("x", T0 + 12 * 3600, 0), rec("x", T0 + 13 * 3600, 1), rec("x", T0 + 14 * 3600, 0)], &tw);
        let w = Window::new(T0, T0 + 15 * 3600).unwrap();
        let table = HandoffTable::from_records(&[rec("x", T0 + 12 * 3600, 0)], &tw).unwrap();
        let short = build_trajectories(&table, w, None).unwrap();
        assert_eq!(night_profiles(&short, night, OFF, &tw)[0].night_tower, None);
        assert!(night_profiles(&day, night, OFF, &tw)[0].night_tower.is_some());
    }

    #[test]
    fn night_tie_breaks_on_tower_id() {
        let tw = towers(3);
        // Two equal night stays: T002 first in time, T001 second.
        let r = [rec("d", T0 + 20 * 3600, 2), rec("d", T0 + 86_400 + 20 * 3600, 1), rec("d", T0 + 2 * 86_400 + 20 * 3600, 0)];
        let table = HandoffTable::from_records(&r, &tw).unwrap();
        let w = Window::new(T0, T0 + 2 * 86_400 + 20 * 3600 + 1).unwrap();
        let set = build_trajectories(&table, w, None).unwrap();
        let p = night_profile(0, set.segments(0), NightWindow::default(), OFF, &tw);
        assert_eq!(p.top[0].1, p.top[1].1);
        assert_eq!(p.night_tower, Some(1));
    }

    #[test]
    fn night_profile_matches_per_second_oracle() {
        let tw = towers(6);
        let records = random_records(9, 400, 8, 6);
        let set = build(&records, &tw);
        let night = NightWindow::default();
        for (i, p) in night_profiles(&set, night, OFF, &tw).iter().enumerate() {
            let mut acc = [0i64; 6];
            for s in set.segments(i) {
                for t in s.start..s.end {
                    let local = (t + OFF).rem_euclid(86_400);
                    if local >= night.start || local < night.end {
                        acc[s.tower as usize] += 1;
                    }
                }
            }
            let best = (0..6).max_by(|&a, &b| acc[a].cmp(&acc[b]).then(b.cmp(&a))).unwrap();
            if acc[best] == 0 {
                assert_eq!(p.night_tower, None);
            } else {
                assert_eq!(p.night_tower, Some(best as u32));
                assert_eq!(p.night_seconds, acc[best]);
            }
        }
    }

    #[test]
    fn splitting_segments_keeps_profile() {
        let tw = towers(3);
        let night = NightWindow::default();
        let segs = vec![
            DwellSegment { tower: 0, start: T0, end: T0 + 30_000 },
            DwellSegment { tower: 1, start: T0 + 30_000, end: T0 + 200_000 },
        ];
        let mut split = segs.clone();
        split.insert(1, DwellSegment { tower: 0, start: T0 + 10_000, end: T0 + 30_000 });
        split[0].end = T0 + 10_000;
        assert_eq!(
            night_profile(0, segs.into_iter(), night, OFF, &tw),
            night_profile(0, split.into_iter(), night, OFF, &tw)
        );
    }

    #[test]
    fn nearest_distances_on_a_line() {
        // 0, 1 and 3 km east along a parallel.
        let lon_per_km = 1.0 / (111.194_926_6 * 41.5f64.to_radians().cos());
        let tw = TowerTable::new(
            [0.0, 1.0, 3.0]
                .iter()
                .enumerate()
                .map(|(i, km)| TowerSite {
                    tower_id: format!("L{i}"),
                    location: GeoPoint { lat: 41.5, lon: -72.7 + km * lon_per_km },
                })
                .collect(),
        )
        .unwrap();
        let s = network_stats(&tw, &[1, 1, 2, 30]).unwrap();
        let d: Vec<f64> = s.nearest.iter().map(|e| e.2 / 1000.0).collect();
        for (a, b) in d.iter().zip([1.0, 1.0, 2.0]) {
            assert!((a - b).abs() < 1e-3, "{a}");
        }
        assert_eq!(s.single_handoff_devices, 2);
        assert_eq!(s.devices, 4);
        assert_eq!(s.handoff_hist.iter().map(|b| b.devices).sum::<usize>(), 4);
        assert_eq!(s.handoff_hist[0].devices, 2);
        assert_eq!(s.handoff_hist[1].devices, 1);
        assert!(network_stats(&towers(1), &[1]).is_err());
    }

    #[test]
    fn nearest_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let tw = TowerTable::new(
            (0..400)
                .map(|i| TowerSite {
                    tower_id: format!("R{i}"),
                    location: GeoPoint { lat: rng.random_range(41.0..42.0), lon: rng.random_range(-73.7..-71.8) },
                })
                .collect(),
        )
        .unwrap();
        let s = network_stats(&tw, &[]).unwrap();
        let pts = tw.locations();
        for &(i, _, d) in &s.nearest {
            let oracle = (0..pts.len())
                .filter(|&j| j != i as usize)
                .map(|j| haversine_m(pts[i as usize], pts[j]))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(d, oracle);
        }
    }

    #[test]
    fn night_profile_csv_round_trip() {
        let tw = towers(3);
        let set = build(&[rec("a", T0, 1), rec("b", T0 + 3600, 2)], &tw);
        let profiles = night_profiles(&set, NightWindow::default(), OFF, &tw);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("night.csv");
        write_night_profiles(&p, &set, &profiles, &tw).unwrap();
        let back = read_night_profiles(&p, &tw).unwrap();
        assert_eq!(back[1], ("b".to_string(), Some(2), profiles[1].night_seconds));
    }

    #[test]
    fn trajectory_file_round_trip() {
        let towers = TowerTable::new(
            (0..3)
                .map(|i| crate::ingest::TowerSite {
                    tower_id: format!("T{i}"),
                    location: crate::geo::GeoPoint { lat: 41.0 + 0.01 * i as f64, lon: -72.0 },
                })
                .collect(),
        )
        .unwrap();
        let rec = |d: &str, t: i64, tw: &str| crate::ingest::HandoffRecord {
            device_id: d.into(),
            timestamp: t,
            tower_id: tw.into(),
        };
        let table = HandoffTable::from_records(
            &[rec("b", 10, "T1"), rec("a", 5, "T0"), rec("a", 50, "T2"), rec("c", 500, "T1"), rec("b", 20, "T0")],
            &towers,
        )
        .unwrap();
        let set = build_trajectories(&table, Window::new(0, 100).unwrap(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        write_trajectories(&p, &set).unwrap();
        assert_eq!(read_trajectories(&p).unwrap(), set);
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_trajectories(&p).is_err());
    }
}
