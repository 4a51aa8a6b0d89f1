//! Typed loaders and writers for the pipeline's CSV inputs, plus
//! last-observation-carried-forward gap filling.
//!
//! Schemas (header row required, exact column names):
//!
//! | file          | columns                                               |
//! |---------------|-------------------------------------------------------|
//! | monitors.csv  | `site_id,lat,lon,hour_index,ozone_ppb`                |
//! | meteo.csv     | `station_id,lat,lon,hour_index,temp_c,wind_ms`        |
//! | towers.csv    | `tower_id,lat,lon`                                    |
//! | handoffs.csv  | `device_id,timestamp_utc,tower_id` (RFC 3339)         |
//! | roads.csv     | `road_id,class,vertex_index,lat,lon`                  |
//!
//! An empty value in a measurement column marks the hour as missing.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{self, Window};
use crate::error::{list_ids, Error, Result};
use crate::geo::GeoPoint;

pub const MONITORS_HEADER: &[&str] = &["site_id", "lat", "lon", "hour_index", "ozone_ppb"];
pub const METEO_HEADER: &[&str] = &["station_id", "lat", "lon", "hour_index", "temp_c", "wind_ms"];
pub const TOWERS_HEADER: &[&str] = &["tower_id", "lat", "lon"];
pub const HANDOFFS_HEADER: &[&str] = &["device_id", "timestamp_utc", "tower_id"];
pub const ROADS_HEADER: &[&str] = &["road_id", "class", "vertex_index", "lat", "lon"];

#[derive(Debug, Clone, PartialEq)]
pub struct MonitorSeries {
    pub site_id: String,
    pub location: GeoPoint,
    /// Hourly ppb on the shared clock; `None` marks a missing hour.
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MonitorSet {
    pub series: Vec<MonitorSeries>,
    /// Observed values below zero that were clamped to zero.
    pub clamped_negative: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeteoSeries {
    pub station_id: String,
    pub location: GeoPoint,
    pub temperature: Vec<Option<f64>>,
    pub wind_speed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TowerSite {
    pub tower_id: String,
    pub location: GeoPoint,
}

/// Towers in file order with an id index.
#[derive(Debug, Clone, Default)]
pub struct TowerTable {
    pub towers: Vec<TowerSite>,
    index: HashMap<String, u32>,
}

impl TowerTable {
    pub fn new(towers: Vec<TowerSite>) -> Result<Self> {
        let mut index = HashMap::with_capacity(towers.len());
        for (i, t) in towers.iter().enumerate() {
            t.location.validate()?;
            if index.insert(t.tower_id.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate tower_id `{}`", t.tower_id)));
            }
        }
        Ok(TowerTable { towers, index })
    }

    pub fn get(&self, tower_id: &str) -> Option<u32> {
        self.index.get(tower_id).copied()
    }

    pub fn len(&self) -> usize {
        self.towers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.towers.is_empty()
    }

    pub fn id(&self, idx: u32) -> &str {
        &self.towers[idx as usize].tower_id
    }

    pub fn locations(&self) -> Vec<GeoPoint> {
        self.towers.iter().map(|t| t.location).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffRecord {
    pub device_id: String,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
    pub tower_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Primary,
    Secondary,
}

impl RoadClass {
    pub fn as_str(self) -> &'static str {
        match self {
            RoadClass::Primary => "primary",
            RoadClass::Secondary => "secondary",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Road {
    pub road_id: String,
    pub class: RoadClass,
    pub vertices: Vec<GeoPoint>,
}

/// Fills each gap with the most recent prior value. A leading gap has no
/// prior value and is an error.
pub fn locf_fill(values: &[Option<f64>]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(values.len());
    let mut last = None;
    for (i, v) in values.iter().enumerate() {
        match (v, last) {
            (Some(x), _) => {
                last = Some(*x);
                out.push(*x);
            }
            (None, Some(x)) => out.push(x),
            (None, None) => {
                return Err(Error::invalid(format!(
                    "leading gap at hour {i}: no earlier value to carry forward"
                )))
            }
        }
    }
    Ok(out)
}

/// [`locf_fill`] with an explicit value for a leading gap.
pub fn locf_fill_seeded(values: &[Option<f64>], seed: f64) -> Vec<f64> {
    let mut last = seed;
    values
        .iter()
        .map(|v| {
            if let Some(x) = v {
                last = *x;
            }
            last
        })
        .collect()
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(BufWriter::with_capacity(
        1 << 20,
        File::create(path).map_err(|e| Error::io(path, e))?,
    ))
}

/// Opens a CSV file and checks its header. `None` for a zero-byte file.
fn csv_reader(path: &Path, header: &[&str]) -> Result<Option<csv::Reader<File>>> {
    let file = open(path)?;
    let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    if empty {
        return Ok(None);
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    check_header(path, rdr.headers()?.iter(), header)?;
    Ok(Some(rdr))
}

fn check_header<'a>(path: &Path, found: impl Iterator<Item = &'a str>, expected: &[&str]) -> Result<()> {
    let found: Vec<&str> = found.map(str::trim).collect();
    if found != expected {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            expected: expected.join(","),
            found: found.join(","),
        });
    }
    Ok(())
}

struct RowCtx<'a> {
    path: &'a Path,
    line: u64,
}

impl RowCtx<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn f64(&self, s: &str, col: &str) -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| self.err(format!("{col}: not a number: `{s}`")))?;
        if !v.is_finite() {
            return Err(self.err(format!("{col}: non-finite value")));
        }
        Ok(v)
    }

    fn opt_f64(&self, s: &str, col: &str) -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            self.f64(s, col).map(Some)
        }
    }

    fn usize(&self, s: &str, col: &str) -> Result<usize> {
        s.parse()
            .map_err(|_| self.err(format!("{col}: not a non-negative integer: `{s}`")))
    }

    fn point(&self, lat: &str, lon: &str) -> Result<GeoPoint> {
        GeoPoint::new(self.f64(lat, "lat")?, self.f64(lon, "lon")?)
            .map_err(|e| self.err(e.to_string()))
    }

    fn fields<'r>(&self, rec: &'r csv::StringRecord, n: usize) -> Result<Vec<&'r str>> {
        if rec.len() != n {
            return Err(self.err(format!("expected {n} fields, found {}", rec.len())));
        }
        Ok(rec.iter().collect())
    }
}

/// Rows of one site/station before assembly into a dense series.
struct SiteRows<V> {
    id: String,
    location: GeoPoint,
    rows: HashMap<usize, V>,
}

fn assemble_sites<V>(
    path: &Path,
    rows: impl Iterator<Item = Result<(u64, String, GeoPoint, usize, V)>>,
) -> Result<(Vec<SiteRows<V>>, usize)> {
    let mut sites: Vec<SiteRows<V>> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    let mut hours = 0usize;
    for row in rows {
        let (line, id, loc, hour, v) = row?;
        let ctx = RowCtx { path, line };
        let k = *by_id.entry(id.clone()).or_insert_with(|| {
            sites.push(SiteRows {
                id: id.clone(),
                location: loc,
                rows: HashMap::new(),
            });
            sites.len() - 1
        });
        let site = &mut sites[k];
        if site.location != loc {
            return Err(ctx.err(format!("site `{id}` changes coordinates")));
        }
        if site.rows.insert(hour, v).is_some() {
            return Err(ctx.err(format!("duplicate row for site `{id}` hour {hour}")));
        }
        hours = hours.max(hour + 1);
    }
    Ok((sites, hours))
}

pub fn load_monitors(path: &Path) -> Result<MonitorSet> {
    let Some(mut rdr) = csv_reader(path, MONITORS_HEADER)? else {
        return Ok(MonitorSet::default());
    };
    let mut clamped = 0usize;
    let rows = rdr.records().map(|rec| {
        let rec = rec?;
        let ctx = RowCtx {
            path,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let f = ctx.fields(&rec, 5)?;
        let loc = ctx.point(f[1], f[2])?;
        let hour = ctx.usize(f[3], "hour_index")?;
        let mut v = ctx.opt_f64(f[4], "ozone_ppb")?;
        if let Some(x) = v.as_mut() {
            if *x < 0.0 {
                *x = 0.0;
                clamped += 1;
            }
        }
        Ok((ctx.line, f[0].to_string(), loc, hour, v))
    });
    let (sites, hours) = assemble_sites(path, rows)?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} negative ozone values to 0", path.display());
    }
    let series = sites
        .into_iter()
        .map(|s| MonitorSeries {
            values: (0..hours).map(|h| s.rows.get(&h).copied().flatten()).collect(),
            site_id: s.id,
            location: s.location,
        })
        .collect();
    Ok(MonitorSet {
        series,
        clamped_negative: clamped,
    })
}

/// [`load_monitors`], rejecting any site id not in `known`.
pub fn load_monitors_checked(path: &Path, known: &[&str]) -> Result<MonitorSet> {
    let set = load_monitors(path)?;
    let unknown: Vec<&str> = set
        .series
        .iter()
        .map(|s| s.site_id.as_str())
        .filter(|id| !known.contains(id))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::invalid(format!(
            "{}: unknown monitor sites: {}",
            path.display(),
            list_ids(&unknown)
        )));
    }
    Ok(set)
}

pub fn write_monitors(path: &Path, series: &[MonitorSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(MONITORS_HEADER)?;
    for s in series {
        for (h, v) in s.values.iter().enumerate() {
            w.write_record([
                s.site_id.as_str(),
                &s.location.lat.to_string(),
                &s.location.lon.to_string(),
                &h.to_string(),
                &v.map(|x| x.to_string()).unwrap_or_default(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_meteo(path: &Path) -> Result<Vec<MeteoSeries>> {
    let Some(mut rdr) = csv_reader(path, METEO_HEADER)? else {
        return Ok(Vec::new());
    };
    let rows = rdr.records().map(|rec| {
        let rec = rec?;
        let ctx = RowCtx {
            path,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let f = ctx.fields(&rec, 6)?;
        let loc = ctx.point(f[1], f[2])?;
        let hour = ctx.usize(f[3], "hour_index")?;
        let temp = ctx.opt_f64(f[4], "temp_c")?;
        let wind = ctx.opt_f64(f[5], "wind_ms")?;
        if wind.is_some_and(|w| w < 0.0) {
            return Err(ctx.err("wind_ms: negative wind speed"));
        }
        Ok((ctx.line, f[0].to_string(), loc, hour, (temp, wind)))
    });
    let (sites, hours) = assemble_sites(path, rows)?;
    Ok(sites
        .into_iter()
        .map(|s| {
            let (temperature, wind_speed) = (0..hours)
                .map(|h| s.rows.get(&h).copied().unwrap_or((None, None)))
                .unzip();
            MeteoSeries {
                station_id: s.id,
                location: s.location,
                temperature,
                wind_speed,
            }
        })
        .collect())
}

pub fn write_meteo(path: &Path, series: &[MeteoSeries]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(METEO_HEADER)?;
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in series {
        for h in 0..s.temperature.len() {
            w.write_record([
                s.station_id.as_str(),
                &s.location.lat.to_string(),
                &s.location.lon.to_string(),
                &h.to_string(),
                &fmt(s.temperature[h]),
                &fmt(s.wind_speed[h]),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_towers(path: &Path) -> Result<TowerTable> {
    let Some(mut rdr) = csv_reader(path, TOWERS_HEADER)? else {
        return TowerTable::new(Vec::new());
    };
    let mut towers = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ctx = RowCtx {
            path,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let f = ctx.fields(&rec, 3)?;
        if seen.insert(f[0].to_string(), ctx.line).is_some() {
            return Err(ctx.err(format!("duplicate tower_id `{}`", f[0])));
        }
        towers.push(TowerSite {
            tower_id: f[0].to_string(),
            location: ctx.point(f[1], f[2])?,
        });
    }
    TowerTable::new(towers)
}

pub fn write_towers(path: &Path, towers: &[TowerSite]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(TOWERS_HEADER)?;
    for t in towers {
        w.write_record([
            t.tower_id.as_str(),
            &t.location.lat.to_string(),
            &t.location.lon.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_roads(path: &Path) -> Result<Vec<Road>> {
    let Some(mut rdr) = csv_reader(path, ROADS_HEADER)? else {
        return Ok(Vec::new());
    };
    let mut roads: Vec<(String, RoadClass, Vec<(usize, GeoPoint)>)> = Vec::new();
    let mut by_id: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ctx = RowCtx {
            path,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let f = ctx.fields(&rec, 5)?;
        let class = match f[1] {
            "primary" => RoadClass::Primary,
            "secondary" => RoadClass::Secondary,
            other => return Err(ctx.err(format!("class: expected primary|secondary, found `{other}`"))),
        };
        let vi = ctx.usize(f[2], "vertex_index")?;
        let p = ctx.point(f[3], f[4])?;
        let k = *by_id.entry(f[0].to_string()).or_insert_with(|| {
            roads.push((f[0].to_string(), class, Vec::new()));
            roads.len() - 1
        });
        if roads[k].1 != class {
            return Err(ctx.err(format!("road `{}` changes class", f[0])));
        }
        if roads[k].2.iter().any(|(i, _)| *i == vi) {
            return Err(ctx.err(format!("duplicate vertex {vi} for road `{}`", f[0])));
        }
        roads[k].2.push((vi, p));
    }
    Ok(roads
        .into_iter()
        .map(|(road_id, class, mut vs)| {
            vs.sort_by_key(|(i, _)| *i);
            Road {
                road_id,
                class,
                vertices: vs.into_iter().map(|(_, p)| p).collect(),
            }
        })
        .collect())
}

pub fn write_roads(path: &Path, roads: &[Road]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(ROADS_HEADER)?;
    for r in roads {
        for (i, v) in r.vertices.iter().enumerate() {
            w.write_record([
                r.road_id.as_str(),
                r.class.as_str(),
                &i.to_string(),
                &v.lat.to_string(),
                &v.lon.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads hand-off records as strings, in file order.
pub fn read_handoffs(path: &Path) -> Result<Vec<HandoffRecord>> {
    let Some(mut rdr) = csv_reader(path, HANDOFFS_HEADER)? else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let ctx = RowCtx {
            path,
            line: rec.position().map_or(0, |p| p.line()),
        };
        let f = ctx.fields(&rec, 3)?;
        let timestamp = clock::parse_rfc3339(f[1])
            .ok_or_else(|| ctx.err(format!("timestamp_utc: not RFC 3339: `{}`", f[1])))?;
        out.push(HandoffRecord {
            device_id: f[0].to_string(),
            timestamp,
            tower_id: f[2].to_string(),
        });
    }
    Ok(out)
}

/// Streams hand-off records to CSV.
pub struct HandoffWriter {
    out: BufWriter<File>,
    line: String,
    path: std::path::PathBuf,
}

impl HandoffWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = create(path)?;
        writeln!(out, "{}", HANDOFFS_HEADER.join(",")).map_err(|e| Error::io(path, e))?;
        Ok(HandoffWriter {
            out,
            line: String::with_capacity(64),
            path: path.to_path_buf(),
        })
    }

    /// Ids are written verbatim and must not contain commas, quotes or newlines.
    pub fn write(&mut self, device_id: &str, timestamp: i64, tower_id: &str) -> Result<()> {
        self.line.clear();
        self.line.push_str(device_id);
        self.line.push(',');
        clock::write_rfc3339(&mut self.line, timestamp);
        self.line.push(',');
        self.line.push_str(tower_id);
        self.line.push('\n');
        self.out
            .write_all(self.line.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub fn write_handoffs(path: &Path, records: &[HandoffRecord]) -> Result<()> {
    let mut w = HandoffWriter::create(path)?;
    for r in records {
        w.write(&r.device_id, r.timestamp, &r.tower_id)?;
    }
    w.finish()
}

/// Columnar hand-off table with interned ids, in file order.
///
/// `device_ids` is sorted, so device indices order devices by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct HandoffTable {
    pub device_ids: Vec<String>,
    pub device: Vec<u32>,
    pub timestamp: Vec<i64>,
    pub tower: Vec<u32>,
}

const CHUNK_BYTES: usize = 16 << 20;

struct ParsedChunk {
    names: Vec<String>,
    device: Vec<u32>,
    timestamp: Vec<i64>,
    tower: Vec<u32>,
    unknown: BTreeSet<String>,
}

impl HandoffTable {
    pub fn len(&self) -> usize {
        self.device.len()
    }

    pub fn is_empty(&self) -> bool {
        self.device.is_empty()
    }

    pub fn from_records(records: &[HandoffRecord], towers: &TowerTable) -> Result<Self> {
        let mut unknown = BTreeSet::new();
        let mut names: Vec<String> = records.iter().map(|r| r.device_id.clone()).collect();
        names.sort();
        names.dedup();
        let rank: HashMap<&str, u32> = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i as u32))
            .collect();
        let mut t = HandoffTable::default();
        for r in records {
            let Some(tw) = towers.get(&r.tower_id) else {
                unknown.insert(r.tower_id.clone());
                continue;
            };
            t.device.push(rank[r.device_id.as_str()]);
            t.timestamp.push(r.timestamp);
            t.tower.push(tw);
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownTowers(list_ids(&unknown.into_iter().collect::<Vec<_>>())));
        }
        t.device_ids = names;
        Ok(t)
    }

    /// Loads `handoffs.csv`, parsing fixed-size chunks in parallel and merging
    /// them in file order, so the result does not depend on the thread count.
    pub fn load(path: &Path, towers: &TowerTable) -> Result<Self> {
        let file = open(path)?;
        let mut reader = BufReader::with_capacity(1 << 20, file);
        let mut carry: Vec<u8> = Vec::new();
        let mut header_done = false;
        let mut line_no: u64 = 1;
        let mut eof = false;

        let mut global: HashMap<String, u32> = HashMap::new();
        let mut names: Vec<String> = Vec::new();
        let mut table = HandoffTable::default();
        let mut unknown = BTreeSet::new();

        let batch = rayon::current_num_threads().max(1);
        while !eof {
            // Read up to `batch` newline-terminated chunks.
            let mut chunks: Vec<(u64, Vec<u8>)> = Vec::with_capacity(batch);
            while chunks.len() < batch && !eof {
                let mut buf = std::mem::take(&mut carry);
                let start = buf.len();
                buf.resize(start + CHUNK_BYTES, 0);
                let mut filled = start;
                while filled < buf.len() {
                    let n = reader.read(&mut buf[filled..]).map_err(|e| Error::io(path, e))?;
                    if n == 0 {
                        eof = true;
                        break;
                    }
                    filled += n;
                }
                buf.truncate(filled);
                if !eof {
                    match buf.iter().rposition(|&b| b == b'\n') {
                        Some(pos) => {
                            carry = buf.split_off(pos + 1);
                        }
                        None => {
                            carry = buf;
                            continue;
                        }
                    }
                }
                if !header_done {
                    let end = buf.iter().position(|&b| b == b'\n').unwrap_or(buf.len());
                    let header = std::str::from_utf8(&buf[..end]).unwrap_or("");
                    if !header.trim().is_empty() || !buf.is_empty() {
                        check_header(path, header.trim_end_matches('\r').split(','), HANDOFFS_HEADER)?;
                    }
                    buf.drain(..(end + 1).min(buf.len()));
                    header_done = true;
                    line_no = 2;
                }
                let lines = buf.iter().filter(|&&b| b == b'\n').count() as u64;
                let first = line_no;
                line_no += lines;
                chunks.push((first, buf));
            }

            let parsed: Vec<Result<ParsedChunk>> = chunks
                .par_iter()
                .map(|(first, buf)| parse_chunk(path, *first, buf, towers))
                .collect();
            for chunk in parsed {
                let chunk = chunk?;
                unknown.extend(chunk.unknown);
                let remap: Vec<u32> = chunk
                    .names
                    .into_iter()
                    .map(|n| {
                        let next = names.len() as u32;
                        *global.entry(n).or_insert_with_key(|k| {
                            names.push(k.clone());
                            next
                        })
                    })
                    .collect();
                table.device.extend(chunk.device.iter().map(|&d| remap[d as usize]));
                table.timestamp.extend_from_slice(&chunk.timestamp);
                table.tower.extend_from_slice(&chunk.tower);
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownTowers(list_ids(&unknown.into_iter().collect::<Vec<_>>())));
        }
        drop(global);

        // Renumber devices by sorted id.
        let mut order: Vec<u32> = (0..names.len() as u32).collect();
        order.sort_unstable_by(|&a, &b| names[a as usize].cmp(&names[b as usize]));
        let mut rank = vec![0u32; names.len()];
        for (r, &old) in order.iter().enumerate() {
            rank[old as usize] = r as u32;
        }
        table.device.par_iter_mut().for_each(|d| *d = rank[*d as usize]);
        let mut names: Vec<Option<String>> = names.into_iter().map(Some).collect();
        table.device_ids = order
            .iter()
            .map(|&old| names[old as usize].take().unwrap_or_default())
            .collect();
        Ok(table)
    }

    /// True for records whose timestamp lies outside `window`.
    pub fn window_flags(&self, window: Window) -> Vec<bool> {
        self.timestamp.iter().map(|&t| !window.contains(t)).collect()
    }

    /// Per-device record counts, indexed by device.
    pub fn counts_per_device(&self) -> Vec<u32> {
        let mut c = vec![0u32; self.device_ids.len()];
        for &d in &self.device {
            c[d as usize] += 1;
        }
        c
    }

    pub fn to_records(&self, towers: &TowerTable) -> Vec<HandoffRecord> {
        (0..self.len())
            .map(|i| HandoffRecord {
                device_id: self.device_ids[self.device[i] as usize].clone(),
                timestamp: self.timestamp[i],
                tower_id: towers.id(self.tower[i]).to_string(),
            })
            .collect()
    }
}

fn parse_chunk(path: &Path, first_line: u64, buf: &[u8], towers: &TowerTable) -> Result<ParsedChunk> {
    let mut out = ParsedChunk {
        names: Vec::new(),
        device: Vec::new(),
        timestamp: Vec::new(),
        tower: Vec::new(),
        unknown: BTreeSet::new(),
    };
    let mut local: HashMap<Box<[u8]>, u32> = HashMap::new();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(buf);
    let mut rec = csv::ByteRecord::new();
    loop {
        let more = rdr.read_byte_record(&mut rec).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: first_line + e.position().map_or(0, |p| p.line().saturating_sub(1)),
            msg: e.to_string(),
        })?;
        if !more {
            break;
        }
        let line = first_line + rec.position().map_or(0, |p| p.line().saturating_sub(1));
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, found {}", rec.len())));
        }
        let ts_str = std::str::from_utf8(&rec[1]).map_err(|_| err("timestamp_utc: invalid utf-8".into()))?;
        let ts = clock::parse_rfc3339(ts_str)
            .ok_or_else(|| err(format!("timestamp_utc: not RFC 3339: `{ts_str}`")))?;
        let tower_id = std::str::from_utf8(&rec[2]).map_err(|_| err("tower_id: invalid utf-8".into()))?;
        let Some(tw) = towers.get(tower_id) else {
            out.unknown.insert(tower_id.to_string());
            continue;
        };
        let dev = &rec[0];
        let id = match local.get(dev) {
            Some(&id) => id,
            None => {
                let name = std::str::from_utf8(dev).map_err(|_| err("device_id: invalid utf-8".into()))?;
                let id = out.names.len() as u32;
                out.names.push(name.to_string());
                local.insert(dev.into(), id);
                id
            }
        };
        out.device.push(id);
        out.timestamp.push(ts);
        out.tower.push(tw);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn locf_rule() {
        let v = [Some(5.0), None, None, Some(7.0)];
        assert_eq!(locf_fill(&v).unwrap(), vec![5.0, 5.0, 5.0, 7.0]);
        let full = [Some(1.0), Some(2.0)];
        assert_eq!(locf_fill(&full).unwrap(), vec![1.0, 2.0]);
        assert!(locf_fill(&[None, Some(1.0)]).is_err());
        assert_eq!(locf_fill_seeded(&[None, Some(1.0), None], 9.0), vec![9.0, 1.0, 1.0]);
    }

    #[test]
    fn locf_matches_backward_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut v: Vec<Option<f64>> = (0..1000)
            .map(|_| rng.random_bool(0.6).then(|| rng.random_range(0.0..80.0)))
            .collect();
        v[0] = Some(1.0);
        let filled = locf_fill(&v).unwrap();
        for i in 0..v.len() {
            let oracle = (0..=i).rev().find_map(|j| v[j]).unwrap();
            assert_eq!(filled[i], oracle);
        }
    }

    proptest! {
        #[test]
        fn locf_is_idempotent(v in proptest::collection::vec(proptest::option::of(0.0f64..100.0), 1..200)) {
            let mut v = v;
            v[0] = Some(v[0].unwrap_or(1.0));
            let once = locf_fill(&v).unwrap();
            let twice = locf_fill(&once.iter().copied().map(Some).collect::<Vec<_>>()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn monitors_parse_gaps_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "m.csv",
            "site_id,lat,lon,hour_index,ozone_ppb\nA,41.1,-72.1,0,30\nA,41.1,-72.1,1,\nA,41.1,-72.1,2,-1.5\nB,41.2,-72.2,0,10\n",
        );
        let set = load_monitors(&p).unwrap();
        assert_eq!(set.series.len(), 2);
        assert_eq!(set.series[0].values, vec![Some(30.0), None, Some(0.0)]);
        assert_eq!(set.series[1].values, vec![Some(10.0), None, None]);
        assert_eq!(set.clamped_negative, 1);

        let dup = write(
            dir.path(),
            "d.csv",
            "site_id,lat,lon,hour_index,ozone_ppb\nA,41.1,-72.1,0,30\nA,41.1,-72.1,0,31\n",
        );
        let err = load_monitors(&dup).unwrap_err().to_string();
        assert!(err.contains(":3:") && err.contains("duplicate"), "{err}");

        let bad = write(dir.path(), "b.csv", "site_id,lat,lon,hour_index,ozone_ppb\nA,41.1,-72.1,x,30\n");
        assert!(matches!(load_monitors(&bad), Err(Error::Parse { line: 2, .. })));

        let empty = write(dir.path(), "e.csv", "");
        assert!(load_monitors(&empty).unwrap().series.is_empty());

        let schema = write(dir.path(), "s.csv", "site,lat,lon,hour,o3\n");
        assert!(matches!(load_monitors(&schema), Err(Error::Schema { .. })));

        assert!(load_monitors_checked(&p, &["A"]).is_err());
        assert!(load_monitors_checked(&p, &["A", "B"]).is_ok());
    }

    #[test]
    fn handoffs_resolve_towers() {
        let dir = tempfile::tempdir().unwrap();
        let towers = write(dir.path(), "t.csv", "tower_id,lat,lon\nT1,41.0,-72.0\nT2,41.1,-72.0\nT3,41.2,-72.0\n");
        let towers = load_towers(&towers).unwrap();
        let h = write(
            dir.path(),
            "h.csv",
            "device_id,timestamp_utc,tower_id\nd2,2016-07-18T05:00:00Z,T1\nd1,2016-07-18T04:00:00Z,T2\nd2,2016-07-18T06:00:00Z,T3\nd1,2016-07-18T07:00:00Z,T1\nd1,2016-07-26T00:00:00Z,T1\n",
        );
        let table = HandoffTable::load(&h, &towers).unwrap();
        assert_eq!(table.len(), 5);
        assert_eq!(table.device_ids, vec!["d1", "d2"]);
        assert_eq!(table.device, vec![1, 0, 1, 0, 0]);
        assert_eq!(table.tower, vec![0, 1, 2, 0, 0]);
        let records = read_handoffs(&h).unwrap();
        assert_eq!(HandoffTable::from_records(&records, &towers).unwrap(), table);
        let w = Window::new(
            clock::parse_rfc3339("2016-07-18T04:00:00Z").unwrap(),
            clock::parse_rfc3339("2016-07-25T04:00:00Z").unwrap(),
        )
        .unwrap();
        assert_eq!(table.window_flags(w), vec![false, false, false, false, true]);

        let bad = write(
            dir.path(),
            "hb.csv",
            "device_id,timestamp_utc,tower_id\nd1,2016-07-18T04:00:00Z,T9\nd1,2016-07-18T05:00:00Z,T8\n",
        );
        let err = HandoffTable::load(&bad, &towers).unwrap_err().to_string();
        assert!(err.contains("T8") && err.contains("T9"), "{err}");

        let badts = write(dir.path(), "ht.csv", "device_id,timestamp_utc,tower_id\nd1,yesterday,T1\n");
        assert!(matches!(HandoffTable::load(&badts, &towers), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn duplicate_tower_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "tower_id,lat,lon\nT1,41.0,-72.0\nT1,41.1,-72.0\n");
        assert!(load_towers(&p).is_err());
    }

    #[test]
    fn roads_sorted_by_vertex() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "r.csv",
            "road_id,class,vertex_index,lat,lon\nI95,primary,1,41.1,-72.9\nI95,primary,0,41.0,-73.0\nR1,secondary,0,41.5,-72.5\n",
        );
        let roads = load_roads(&p).unwrap();
        assert_eq!(roads.len(), 2);
        assert_eq!(roads[0].vertices[0].lat, 41.0);
        assert_eq!(roads[1].class, RoadClass::Secondary);
        let q = dir.path().join("r2.csv");
        write_roads(&q, &roads).unwrap();
        assert_eq!(load_roads(&q).unwrap(), roads);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn monitor_and_meteo_round_trip(vals in proptest::collection::vec(proptest::option::of(0.0f64..120.0), 1..40),
                                        lat in 40.0f64..42.0, lon in -74.0f64..-71.0) {
            let dir = tempfile::tempdir().unwrap();
            let series = vec![MonitorSeries {
                site_id: "S1".into(),
                location: GeoPoint { lat, lon },
                values: vals.clone(),
            }];
            let p = dir.path().join("m.csv");
            write_monitors(&p, &series).unwrap();
            prop_assert_eq!(load_monitors(&p).unwrap().series, series);
            let meteo = vec![MeteoSeries {
                station_id: "W".into(),
                location: GeoPoint { lat, lon },
                temperature: vals.clone(),
                wind_speed: vals.iter().map(|v| v.map(|x| x / 10.0)).collect(),
            }];
            let q = dir.path().join("w.csv");
            write_meteo(&q, &meteo).unwrap();
            prop_assert_eq!(load_meteo(&q).unwrap(), meteo);
        }
    }
}
