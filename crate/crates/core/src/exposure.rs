//! Hourly, 8-hour-maximum and cumulative ozone exposure under dynamic and
//! static assignment, the assignment bias and extreme cohorts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clock::{StudyClock, SECS_PER_HOUR};
use crate::error::{list_ids, Error, Result};
use crate::ingest::TowerTable;
use crate::kriging::HourlyField;
use crate::mobility::{DwellSegment, TrajectorySet};
use crate::stats::{sort_values, BinnedSketch, Histogram, Summary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Dynamic,
    Static,
}

impl Scenario {
    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Dynamic => "dynamic",
            Scenario::Static => "static",
        }
    }
}

/// Hourly exposure over the window; `ppb[h]` is `None` where no time was
/// covered.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureSeries {
    pub scenario: Scenario,
    pub ppb: Vec<Option<f64>>,
    pub coverage: Vec<f64>,
}

/// Completeness rule for 8-hour running means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Max8Rule {
    pub window_hours: usize,
    pub min_valid: usize,
}

impl Default for Max8Rule {
    fn default() -> Self {
        Max8Rule {
            window_hours: 8,
            min_valid: 6,
        }
    }
}

/// Maps tower indices to rows of a field, checking the field covers the window.
#[derive(Debug, Clone)]
pub struct FieldIndex<'a> {
    pub field: &'a HourlyField,
    rows: Vec<Option<u32>>,
    /// Field hour of the first window hour.
    offset: usize,
    hours: usize,
}

impl<'a> FieldIndex<'a> {
    pub fn new(field: &'a HourlyField, towers: &TowerTable, clock: &StudyClock) -> Result<Self> {
        let first = clock.window_first_hour()?;
        let hours = clock.window_hours();
        if field.first_hour > first || field.first_hour + field.hours < first + hours {
            return Err(Error::invalid(format!(
                "field covers hours {}..{} but the exposure window needs {}..{}",
                field.first_hour,
                field.first_hour + field.hours,
                first,
                first + hours
            )));
        }
        let mut rows = vec![None; towers.len()];
        for (r, id) in field.site_ids.iter().enumerate() {
            if let Some(t) = towers.get(id) {
                rows[t as usize] = Some(r as u32);
            }
        }
        Ok(FieldIndex {
            field,
            rows,
            offset: first - field.first_hour,
            hours,
        })
    }

    /// Fails listing every tower in `used` that the field lacks.
    pub fn check(&self, used: impl Iterator<Item = u32>, towers: &TowerTable) -> Result<()> {
        let mut missing: Vec<&str> = used.filter(|&t| self.rows[t as usize].is_none()).map(|t| towers.id(t)).collect();
        missing.sort_unstable();
        missing.dedup();
        if !missing.is_empty() {
            return Err(Error::invalid(format!("field has no predictions for towers: {}", list_ids(&missing))));
        }
        Ok(())
    }

    fn base(&self, tower: u32) -> usize {
        let r = self.rows[tower as usize].expect("tower checked against field") as usize;
        r * self.field.hours + self.offset
    }

    pub fn mean(&self, tower: u32, h: usize) -> f64 {
        self.field.mean[self.base(tower) + h]
    }

    pub fn sd(&self, tower: u32, h: usize) -> f64 {
        self.field.sd[self.base(tower) + h]
    }
}

/// Duration-weighted hourly exposure along a trajectory. Also returns the
/// duration-weighted mean predictive SD over the covered time.
pub fn hourly_exposure(
    segments: impl Iterator<Item = DwellSegment>,
    fields: &FieldIndex,
    window_start: i64,
) -> (ExposureSeries, f64) {
    let hours = fields.hours;
    let mut ppb = vec![None; hours];
    let mut coverage = vec![0.0; hours];
    let mut acc: Vec<(u32, i64)> = Vec::with_capacity(4);
    let mut cur: Option<usize> = None;
    let (mut sd_sum, mut sd_secs) = (0.0, 0i64);

    let mut flush = |h: usize, acc: &mut Vec<(u32, i64)>, ppb: &mut Vec<Option<f64>>, cov: &mut Vec<f64>| {
        let covered: i64 = acc.iter().map(|e| e.1).sum();
        if covered > 0 {
            let v = if acc.len() == 1 {
                fields.mean(acc[0].0, h)
            } else {
                acc.iter().map(|&(t, s)| s as f64 * fields.mean(t, h)).sum::<f64>() / covered as f64
            };
            for &(t, s) in acc.iter() {
                sd_sum += s as f64 * fields.sd(t, h);
            }
            sd_secs += covered;
            ppb[h] = Some(v);
            cov[h] = covered as f64 / SECS_PER_HOUR as f64;
        }
        acc.clear();
    };

    let end = window_start + hours as i64 * SECS_PER_HOUR;
    for seg in segments {
        let (s, e) = (seg.start.max(window_start), seg.end.min(end));
        if s >= e {
            continue;
        }
        let h0 = ((s - window_start) / SECS_PER_HOUR) as usize;
        let h1 = ((e - 1 - window_start) / SECS_PER_HOUR) as usize;
        for h in h0..=h1 {
            if cur != Some(h) {
                if let Some(c) = cur {
                    flush(c, &mut acc, &mut ppb, &mut coverage);
                }
                cur = Some(h);
            }
            let hs = window_start + h as i64 * SECS_PER_HOUR;
            let secs = e.min(hs + SECS_PER_HOUR) - s.max(hs);
            match acc.iter_mut().find(|x| x.0 == seg.tower) {
                Some(x) => x.1 += secs,
                None => acc.push((seg.tower, secs)),
            }
        }
    }
    if let Some(c) = cur {
        flush(c, &mut acc, &mut ppb, &mut coverage);
    }
    let mean_sd = if sd_secs > 0 { sd_sum / sd_secs as f64 } else { f64::NAN };
    (
        ExposureSeries {
            scenario: Scenario::Dynamic,
            ppb,
            coverage,
        },
        mean_sd,
    )
}

/// The night tower's column for every hour, with full coverage.
pub fn static_exposure(night_tower: u32, fields: &FieldIndex) -> ExposureSeries {
    ExposureSeries {
        scenario: Scenario::Static,
        ppb: (0..fields.hours).map(|h| Some(fields.mean(night_tower, h))).collect(),
        coverage: vec![1.0; fields.hours],
    }
}

/// Maximum over the 24 running means starting at hours `day_start..day_start+24`.
/// A window may run into the following day; it counts if at least
/// `rule.min_valid` of its hours are present, and its value is the mean of
/// those hours.
pub fn daily_max8(values: &[Option<f64>], day_start: usize, rule: Max8Rule) -> Option<f64> {
    let mut best: Option<f64> = None;
    for k in 0..24 {
        let a = day_start + k;
        let (mut n, mut sum) = (0usize, 0.0);
        for v in (a..a + rule.window_hours).filter_map(|h| values.get(h).copied().flatten()) {
            n += 1;
            sum += v;
        }
        if n >= rule.min_valid.max(1) {
            let m = sum / n as f64;
            best = Some(best.map_or(m, |b: f64| b.max(m)));
        }
    }
    best
}

/// Sum of hourly ppb weighted by coverage over one day, in ppb-hours.
pub fn cum24(series: &ExposureSeries, day_start: usize) -> f64 {
    (day_start..day_start + 24)
        .filter_map(|h| series.ppb.get(h).copied().flatten().map(|v| v * series.coverage[h]))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub dyn_max8: Option<f64>,
    pub stat_max8: Option<f64>,
    pub dyn_cum24: f64,
    pub stat_cum24: Option<f64>,
    pub bias8: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceExposure {
    /// Position in the trajectory set.
    pub index: u32,
    pub night_tower: Option<u32>,
    pub days: Vec<DayRecord>,
    pub weekly_bias8: Option<f64>,
    pub mean_pred_sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureOptions {
    pub max8: Max8Rule,
    /// Write `exposure.csv` with every device-hour.
    pub write_hourly: bool,
    /// Up to this many device-hours the hourly differences are summarized
    /// exactly; beyond it a binned sketch is used.
    pub exact_limit: usize,
}

impl Default for ExposureOptions {
    fn default() -> Self {
        ExposureOptions {
            max8: Max8Rule::default(),
            write_hourly: true,
            exact_limit: 20_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayReport {
    pub date: String,
    pub weekend: bool,
    pub bias8: Summary,
    pub bias8_hist: Histogram,
    pub max8_dynamic: Summary,
    pub max8_static: Summary,
    pub cum24_dynamic: Summary,
    pub cum24_static: Summary,
    /// `(dynamic cum24 - static cum24) / 24` per device.
    pub cum24_hourly_difference: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourlyDifference {
    pub count: u64,
    pub exact: bool,
    pub summary: Summary,
    pub beyond_80ppb: u64,
}

/// Exposure by hour of day for one scenario and day type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourOfDay {
    pub scenario: Scenario,
    pub weekend: bool,
    pub hours: Vec<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub devices: usize,
    pub excluded_no_night: usize,
    pub days: Vec<DayReport>,
    pub weekly_bias8: Summary,
    pub hourly_difference: HourlyDifference,
    pub hour_of_day: Vec<HourOfDay>,
    /// Exposure accumulated from local midnight through each hour.
    pub cumulative_hour_of_day: Vec<HourOfDay>,
    pub mean_pred_sd: Summary,
}

pub struct ExposureRun {
    pub devices: Vec<DeviceExposure>,
    pub report: BiasReport,
}

/// Where [`assess`] writes its tables; `None` skips a table.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExposureOutputs<'a> {
    pub hourly: Option<&'a Path>,
    pub daily: Option<&'a Path>,
    pub bias: Option<&'a Path>,
}

const CHUNK: usize = 2048;
const HOD_SKETCH: (f64, f64, usize) = (-50.0, 250.0, 3000);
const CUM_SKETCH: (f64, f64, usize) = (-1000.0, 7000.0, 8000);
const DIFF_SKETCH: (f64, f64, usize) = (-400.0, 400.0, 80_000);

struct ChunkOut {
    devices: Vec<DeviceExposure>,
    hourly: String,
    daily: String,
    bias: String,
    diffs: Vec<f64>,
    diff_sketch: BinnedSketch,
    beyond: u64,
    hod: Vec<BinnedSketch>,
    cum_hod: Vec<BinnedSketch>,
}

fn sketches(spec: (f64, f64, usize)) -> Result<Vec<BinnedSketch>> {
    (0..96).map(|_| BinnedSketch::new(spec.0, spec.1, spec.2)).collect()
}

type Table<'p> = (std::io::BufWriter<std::fs::File>, &'p Path);

fn open_table<'p>(p: Option<&'p Path>, header: &str) -> Result<Option<Table<'p>>> {
    p.map(|p| {
        let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
        let mut w = std::io::BufWriter::with_capacity(1 << 20, f);
        writeln!(w, "{header}").map_err(|e| Error::io(p, e))?;
        Ok((w, p))
    })
    .transpose()
}

fn hod_slot(scenario: Scenario, weekend: bool, hour: usize) -> usize {
    (usize::from(scenario == Scenario::Static) * 2 + usize::from(weekend)) * 24 + hour
}

fn fmt_opt(out: &mut String, v: Option<f64>) {
    if let Some(v) = v {
        let _ = write!(out, "{v}");
    }
}

/// Computes dynamic and static exposure for every device in `set`, writes the
/// requested tables and summarizes the assignment bias.
///
/// `night[i]` is the night tower of device `i`; devices without one get a
/// dynamic series only and are counted as excluded from the comparison.
pub fn assess(
    set: &TrajectorySet,
    night: &[Option<u32>],
    fields: &FieldIndex,
    towers: &TowerTable,
    clock: &StudyClock,
    opts: &ExposureOptions,
    out: &ExposureOutputs,
) -> Result<ExposureRun> {
    if night.len() != set.len() {
        return Err(Error::invalid("night towers do not line up with the trajectories"));
    }
    let used = (0..set.len()).flat_map(|i| set.segments(i).map(|s| s.tower)).chain(night.iter().flatten().copied());
    fields.check(used, towers)?;
    let hours = clock.window_hours();
    let days = clock.window_days();
    let first_hour = clock.window_first_hour()?;
    let ws = clock.window.start;
    let exact = set.len().saturating_mul(hours) <= opts.exact_limit;
    let dates: Vec<String> = (0..days).map(|d| clock.window_date(d)).collect();
    let weekend: Vec<bool> = (0..days).map(|d| clock.is_weekend(d)).collect();

    let mut hourly_w = if opts.write_hourly { open_table(out.hourly, "device_id,scenario,hour_index,ppb,coverage")? } else { None };
    let mut daily_w = open_table(out.daily, "device_id,date,scenario,max8_ppb,cum24_ppbh")?;
    let mut bias_w = open_table(out.bias, "device_id,date,bias8_ppb")?;

    let mut devices = Vec::with_capacity(set.len());
    let mut diffs: Vec<f64> = Vec::new();
    let mut diff_sketch = BinnedSketch::new(DIFF_SKETCH.0, DIFF_SKETCH.1, DIFF_SKETCH.2)?;
    let mut beyond = 0u64;
    let mut hod = sketches(HOD_SKETCH)?;
    let mut cum_hod = sketches(CUM_SKETCH)?;
    let chunk_ids: Vec<usize> = (0..set.len().div_ceil(CHUNK)).collect();
    let batch = rayon::current_num_threads().max(1) * 2;

    for ids in chunk_ids.chunks(batch) {
        let outs: Vec<Result<ChunkOut>> = ids
            .par_iter()
            .map(|&c| {
                let mut o = ChunkOut {
                    devices: Vec::new(),
                    hourly: String::new(),
                    daily: String::new(),
                    bias: String::new(),
                    diffs: Vec::new(),
                    diff_sketch: BinnedSketch::new(DIFF_SKETCH.0, DIFF_SKETCH.1, DIFF_SKETCH.2)?,
                    beyond: 0,
                    hod: sketches(HOD_SKETCH)?,
                    cum_hod: sketches(CUM_SKETCH)?,
                };
                for i in c * CHUNK..((c + 1) * CHUNK).min(set.len()) {
                    let id = set.device_id(i);
                    let (dynamic, mean_sd) = hourly_exposure(set.segments(i), fields, ws);
                    let stat = night[i].map(|t| static_exposure(t, fields));
                    for h in 0..hours {
                        let wk = weekend[h / 24];
                        if let Some(v) = dynamic.ppb[h] {
                            o.hod[hod_slot(Scenario::Dynamic, wk, h % 24)].add(v);
                            if let Some(sv) = stat.as_ref().and_then(|s| s.ppb[h]) {
                                let diff = v - sv;
                                if exact {
                                    o.diffs.push(diff);
                                } else {
                                    o.diff_sketch.add(diff);
                                }
                                if diff.abs() > 80.0 {
                                    o.beyond += 1;
                                }
                            }
                        }
                        if let Some(sv) = stat.as_ref().and_then(|s| s.ppb[h]) {
                            o.hod[hod_slot(Scenario::Static, wk, h % 24)].add(sv);
                        }
                    }
                    for s in std::iter::once(&dynamic).chain(stat.as_ref()) {
                        let mut run = 0.0;
                        for h in 0..hours {
                            if h % 24 == 0 {
                                run = 0.0;
                            }
                            run += s.ppb[h].map_or(0.0, |v| v * s.coverage[h]);
                            o.cum_hod[hod_slot(s.scenario, weekend[h / 24], h % 24)].add(run);
                        }
                    }
                    if opts.write_hourly && out.hourly.is_some() {
                        for s in std::iter::once(&dynamic).chain(stat.as_ref()) {
                            for h in 0..hours {
                                let _ = write!(o.hourly, "{id},{},{},", s.scenario.as_str(), first_hour + h);
                                fmt_opt(&mut o.hourly, s.ppb[h]);
                                let _ = writeln!(o.hourly, ",{}", s.coverage[h]);
                            }
                        }
                    }
                    let mut recs = Vec::with_capacity(days);
                    for d in 0..days {
                        let dm = daily_max8(&dynamic.ppb, d * 24, opts.max8);
                        let sm = stat.as_ref().and_then(|s| daily_max8(&s.ppb, d * 24, opts.max8));
                        let dc = cum24(&dynamic, d * 24);
                        let sc = stat.as_ref().map(|s| cum24(s, d * 24));
                        let bias8 = dm.zip(sm).map(|(a, b)| a - b);
                        if out.daily.is_some() {
                            let _ = write!(o.daily, "{id},{},dynamic,", dates[d]);
                            fmt_opt(&mut o.daily, dm);
                            let _ = writeln!(o.daily, ",{dc}");
                            if let Some(sc) = sc {
                                let _ = write!(o.daily, "{id},{},static,", dates[d]);
                                fmt_opt(&mut o.daily, sm);
                                let _ = writeln!(o.daily, ",{sc}");
                            }
                        }
                        if let (Some(b), true) = (bias8, out.bias.is_some()) {
                            let _ = writeln!(o.bias, "{id},{},{b}", dates[d]);
                        }
                        recs.push(DayRecord {
                            dyn_max8: dm,
                            stat_max8: sm,
                            dyn_cum24: dc,
                            stat_cum24: sc,
                            bias8,
                        });
                    }
                    let b: Vec<f64> = recs.iter().filter_map(|r| r.bias8).collect();
                    o.devices.push(DeviceExposure {
                        index: i as u32,
                        night_tower: night[i],
                        weekly_bias8: (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64),
                        days: recs,
                        mean_pred_sd: mean_sd,
                    });
                }
                Ok(o)
            })
            .collect();
        for o in outs {
            let o = o?;
            for (w, text) in [(&mut hourly_w, &o.hourly), (&mut daily_w, &o.daily), (&mut bias_w, &o.bias)] {
                if let Some((w, p)) = w {
                    w.write_all(text.as_bytes()).map_err(|e| Error::io(*p, e))?;
                }
            }
            devices.extend(o.devices);
            diffs.extend(o.diffs);
            diff_sketch.merge(&o.diff_sketch)?;
            beyond += o.beyond;
            for (a, b) in hod.iter_mut().zip(&o.hod).chain(cum_hod.iter_mut().zip(&o.cum_hod)) {
                a.merge(b)?;
            }
        }
    }
    for (w, p) in [hourly_w, daily_w, bias_w].into_iter().flatten() {
        let mut w = w;
        w.flush().map_err(|e| Error::io(p, e))?;
    }

    let report = bias_report(&devices, &dates, &weekend, diffs, (!exact).then_some(&diff_sketch), beyond, &hod, &cum_hod)?;
    Ok(ExposureRun { devices, report })
}

fn bias_report(
    devices: &[DeviceExposure],
    dates: &[String],
    weekend: &[bool],
    mut diffs: Vec<f64>,
    sketch: Option<&BinnedSketch>,
    beyond: u64,
    hod: &[BinnedSketch],
    cum_hod: &[BinnedSketch],
) -> Result<BiasReport> {
    let mut days = Vec::with_capacity(dates.len());
    for (d, date) in dates.iter().enumerate() {
        let col = |f: &dyn Fn(&DayRecord) -> Option<f64>| -> Vec<f64> { devices.iter().filter_map(|x| f(&x.days[d])).collect() };
        let mut bias = col(&|r| r.bias8);
        sort_values(&mut bias);
        let mut hist = Histogram::new(-80.0, 80.0, 160)?;
        bias.iter().for_each(|&v| hist.add(v));
        days.push(DayReport {
            date: date.clone(),
            weekend: weekend[d],
            bias8: Summary::of_sorted(&bias),
            bias8_hist: hist,
            max8_dynamic: Summary::of(&mut col(&|r| r.dyn_max8)),
            max8_static: Summary::of(&mut col(&|r| r.stat_max8)),
            cum24_dynamic: Summary::of(&mut col(&|r| Some(r.dyn_cum24))),
            cum24_static: Summary::of(&mut col(&|r| r.stat_cum24)),
            cum24_hourly_difference: Summary::of(&mut col(&|r| r.stat_cum24.map(|s| (r.dyn_cum24 - s) / 24.0))),
        });
    }
    let hourly_difference = match sketch {
        None => HourlyDifference {
            count: diffs.len() as u64,
            exact: true,
            summary: Summary::of(&mut diffs),
            beyond_80ppb: beyond,
        },
        Some(s) => HourlyDifference {
            count: s.count,
            exact: false,
            summary: s.summary(),
            beyond_80ppb: beyond,
        },
    };
    let by_hour = |sk: &[BinnedSketch]| {
        let mut out = Vec::new();
        for scenario in [Scenario::Dynamic, Scenario::Static] {
            for wk in [false, true] {
                out.push(HourOfDay {
                    scenario,
                    weekend: wk,
                    hours: (0..24).map(|h| sk[hod_slot(scenario, wk, h)].summary()).collect(),
                });
            }
        }
        out
    };
    Ok(BiasReport {
        devices: devices.len(),
        excluded_no_night: devices.iter().filter(|d| d.night_tower.is_none()).count(),
        days,
        weekly_bias8: Summary::of(&mut devices.iter().filter_map(|d| d.weekly_bias8).collect::<Vec<_>>()),
        hourly_difference,
        hour_of_day: by_hour(hod),
        cumulative_hour_of_day: by_hour(cum_hod),
        mean_pred_sd: Summary::of(&mut devices.iter().map(|d| d.mean_pred_sd).filter(|v| v.is_finite()).collect::<Vec<_>>()),
    })
}

pub fn write_excluded(path: &Path, set: &TrajectorySet, devices: &[DeviceExposure]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["device_id", "reason"])?;
    for d in devices.iter().filter(|d| d.night_tower.is_none()) {
        w.write_record([set.device_id(d.index as usize), "no_night_coverage"])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aggregate of one cohort at one night tower.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTower {
    pub tower_id: String,
    pub lat: f64,
    pub lon: f64,
    pub device_count: usize,
    pub mean_bias8: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohorts {
    /// Positions in the trajectory set, highest weekly bias first.
    pub top: Vec<u32>,
    /// Positions in the trajectory set, lowest weekly bias first.
    pub bottom: Vec<u32>,
    pub top_towers: Vec<CohortTower>,
    pub bottom_towers: Vec<CohortTower>,
}

/// Towers reported in a cohort need at least this many devices.
pub const MIN_COHORT_TOWER_DEVICES: usize = 5;

/// Ranks devices by weekly mean bias (device id breaking ties) and extracts
/// the top and bottom `q` fractions.
pub fn extreme_cohorts(set: &TrajectorySet, devices: &[DeviceExposure], towers: &TowerTable, q: f64) -> Result<Cohorts> {
    if !(q > 0.0 && q < 0.5) {
        return Err(Error::invalid(format!("cohort fraction must lie in (0, 0.5), got {q}")));
    }
    let mut ranked: Vec<(f64, &str, &DeviceExposure)> = devices
        .iter()
        .filter_map(|d| Some((d.weekly_bias8?, set.device_id(d.index as usize), d)))
        .collect();
    let k = (q * ranked.len() as f64).floor() as usize;
    if k == 0 {
        return Err(Error::invalid(format!(
            "{} ranked devices are too few for cohort fraction {q}",
            ranked.len()
        )));
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    let bottom: Vec<&DeviceExposure> = ranked[..k].iter().map(|r| r.2).collect();
    let top: Vec<&DeviceExposure> = ranked[ranked.len() - k..].iter().rev().map(|r| r.2).collect();
    let aggregate = |c: &[&DeviceExposure]| -> Vec<CohortTower> {
        let mut by: BTreeMap<&str, (u32, Vec<f64>)> = BTreeMap::new();
        for d in c {
            let t = d.night_tower.expect("ranked devices have a night tower");
            by.entry(towers.id(t)).or_insert((t, Vec::new())).1.push(d.weekly_bias8.unwrap());
        }
        by.into_iter()
            .filter(|(_, (_, v))| v.len() >= MIN_COHORT_TOWER_DEVICES)
            .map(|(id, (t, mut v))| {
                sort_values(&mut v);
                let loc = towers.locations()[t as usize];
                CohortTower {
                    tower_id: id.to_string(),
                    lat: loc.lat,
                    lon: loc.lon,
                    device_count: v.len(),
                    mean_bias8: v.iter().sum::<f64>() / v.len() as f64,
                }
            })
            .collect()
    };
    Ok(Cohorts {
        top_towers: aggregate(&top),
        bottom_towers: aggregate(&bottom),
        top: top.iter().map(|d| d.index).collect(),
        bottom: bottom.iter().map(|d| d.index).collect(),
    })
}

pub fn write_cohort(path: &Path, rows: &[CohortTower]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["tower_id", "lat", "lon", "device_count", "mean_bias8"])?;
    for r in rows {
        w.write_record([r.tower_id.clone(), r.lat.to_string(), r.lon.to_string(), r.device_count.to_string(), r.mean_bias8.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
