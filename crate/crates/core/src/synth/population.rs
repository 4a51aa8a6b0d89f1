use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{gradient_coordinate, stream, SynthScenario};
use crate::clock::{self, StudyClock, SECS_PER_DAY};
use crate::error::{Error, Result};
use crate::geo::{PlanePoint, Projection, SpatialGrid};
use crate::ingest::{TowerSite, HANDOFFS_HEADER};

const ASSIGN_SALT: u64 = 0x61c8_8646_80b5_83eb;
const DEVICE_SALT: u64 = 0xd1b5_4a32_d192_ed03;
const CHUNK: usize = 4096;

pub(crate) fn parse_hhmm(s: &str) -> Result<i64> {
    let bad = || Error::invalid(format!("`{s}` is not an HH:MM time"));
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    let (h, m): (i64, i64) = (h.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
    if !(0..24).contains(&h) || !(0..60).contains(&m) {
        return Err(bad());
    }
    Ok(h * 3600 + m * 60)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    Static,
    CommuterUp,
    CommuterDown,
    Wanderer,
}

impl Archetype {
    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Static => "static",
            Archetype::CommuterUp => "commuter_up",
            Archetype::CommuterDown => "commuter_down",
            Archetype::Wanderer => "wanderer",
        }
    }
}

/// One simulated device. Tower values index the tower list.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceSim {
    pub archetype: Archetype,
    pub planted: bool,
    pub home: u32,
    pub work: Option<u32>,
    /// True occupancy as `(start, tower)`, starting at the window start with
    /// consecutive towers distinct. Each entry lasts until the next start or
    /// the window end.
    pub occupancy: Vec<(i64, u32)>,
    /// Emitted hand-offs in time order.
    pub handoffs: Vec<(i64, u32)>,
}

/// Per-device line of the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceTruth {
    pub device_id: String,
    pub archetype: Archetype,
    pub planted: bool,
    pub home_tower: String,
    pub work_tower: Option<String>,
    pub handoffs: u32,
    pub segments: u32,
}

/// Device schedules over a fixed tower layout.
pub struct PopulationModel<'a> {
    scn: &'a SynthScenario,
    clock: StudyClock,
    towers: &'a [TowerSite],
    proj: Projection,
    plane: Vec<PlanePoint>,
    along: Vec<f64>,
    grid: SpatialGrid,
    neighbor: Vec<u32>,
    assignment: Vec<(Archetype, bool)>,
    planted_homes: Vec<u32>,
    extreme: (u32, u32),
    times: [i64; 4],
    id_width: usize,
}

impl<'a> PopulationModel<'a> {
    pub fn new(scn: &'a SynthScenario, clock: &StudyClock, towers: &'a [TowerSite]) -> Result<Self> {
        scn.validate()?;
        clock.validate()?;
        if towers.len() < 2 {
            return Err(Error::invalid("population generation needs at least two towers"));
        }
        let proj = Projection::new(scn.region.center());
        let plane: Vec<PlanePoint> = towers.iter().map(|t| proj.project(t.location)).collect::<Result<_>>()?;
        let along: Vec<f64> = plane.iter().map(|&p| gradient_coordinate(p)).collect();
        let grid = SpatialGrid::new(towers.iter().map(|t| t.location).collect(), 0.02)?;
        let neighbor = (0..towers.len())
            .map(|i| grid.nearest(towers[i].location, Some(i)).map(|(j, _)| j as u32).unwrap_or(i as u32))
            .collect();

        let pop = &scn.population;
        let n = pop.devices;
        let shares = [pop.mix.static_, pop.mix.commuter_up, pop.mix.commuter_down, pop.mix.wanderer];
        let counts = largest_remainder(&shares, n);
        let planted = ((pop.planted * n as f64).round() as usize).min(counts[1]);
        let mut assignment = Vec::with_capacity(n);
        assignment.extend(std::iter::repeat_n((Archetype::Static, false), counts[0]));
        assignment.extend(std::iter::repeat_n((Archetype::CommuterUp, true), planted));
        assignment.extend(std::iter::repeat_n((Archetype::CommuterUp, false), counts[1] - planted));
        assignment.extend(std::iter::repeat_n((Archetype::CommuterDown, false), counts[2]));
        assignment.extend(std::iter::repeat_n((Archetype::Wanderer, false), counts[3]));
        assignment.shuffle(&mut stream(scn.seed, ASSIGN_SALT, 0));

        let mut order: Vec<u32> = (0..towers.len() as u32).collect();
        order.sort_by(|&a, &b| along[a as usize].total_cmp(&along[b as usize]).then(a.cmp(&b)));
        let planted_homes = order[..(towers.len() / 5).max(1)].to_vec();
        let extreme = (order[order.len() - 1], order[0]);
        let c = &pop.commute;
        let w = &pop.wander;
        let times = [parse_hhmm(&c.leave)?, parse_hhmm(&c.back)?, parse_hhmm(&w.start)?, parse_hhmm(&w.end)?];
        Ok(PopulationModel {
            scn,
            clock: *clock,
            towers,
            proj,
            plane,
            along,
            grid,
            neighbor,
            assignment,
            planted_homes,
            extreme,
            times,
            id_width: (n.max(1)).to_string().len(),
        })
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Ids sort in device order.
    pub fn device_id(&self, i: usize) -> String {
        format!("d{:0w$}", i + 1, w = self.id_width)
    }

    fn jitter(&self, rng: &mut impl Rng) -> i64 {
        let j = self.scn.population.commute.jitter_minutes * 60.0;
        if j > 0.0 {
            rng.random_range(-j..=j).round() as i64
        } else {
            0
        }
    }

    /// A tower between `dmin` and `dmax` km from `home` within `cone` radians
    /// of the southwest (`sign > 0`) or northeast direction, that lies at
    /// least `dmin / 2` further along that direction.
    fn pick_along(&self, home: u32, sign: f64, cone: f64, dmin: f64, dmax: f64, rng: &mut impl Rng) -> Option<u32> {
        use std::f64::consts::FRAC_PI_4;
        let base = if sign > 0.0 { -3.0 * FRAC_PI_4 } else { FRAC_PI_4 };
        let h = self.plane[home as usize];
        for _ in 0..64 {
            let d = rng.random_range(dmin..=dmax);
            let theta = base + rng.random_range(-cone..=cone);
            let g = self.proj.unproject(PlanePoint { x: h.x + d * theta.cos(), y: h.y + d * theta.sin() });
            if !self.scn.region.contains(g) {
                continue;
            }
            let (t, _) = self.grid.nearest(g, None)?;
            let gain = sign * (self.along[t] - self.along[home as usize]);
            if t != home as usize && gain >= 0.5 * dmin {
                return Some(t as u32);
            }
        }
        None
    }

    fn pick_near(&self, home: u32, current: u32, rng: &mut impl Rng) -> u32 {
        let r = self.scn.population.wander.radius_km;
        let h = self.plane[home as usize];
        for _ in 0..16 {
            let d = r * rng.random::<f64>().sqrt();
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let g = self.proj.unproject(PlanePoint { x: h.x + d * theta.cos(), y: h.y + d * theta.sin() });
            if let Some((t, _)) = self.grid.nearest(g, None) {
                if t as u32 != current {
                    return t as u32;
                }
            }
        }
        self.neighbor[current as usize]
    }

    fn home_and_work(&self, archetype: Archetype, planted: bool, rng: &mut impl Rng) -> (u32, Option<u32>) {
        let c = &self.scn.population.commute;
        let n = self.towers.len() as u32;
        let wide = std::f64::consts::FRAC_PI_3;
        let (sign, cone, dmin, dmax) = match (archetype, planted) {
            (Archetype::CommuterUp, true) => (1.0, wide / 2.0, c.planted_min_km, c.planted_max_km),
            (Archetype::CommuterUp, false) => (1.0, wide, c.min_km, c.max_km),
            (Archetype::CommuterDown, _) => (-1.0, wide, c.min_km, c.max_km),
            _ => return (rng.random_range(0..n), None),
        };
        let mut home = 0;
        for _ in 0..200 {
            home = if planted {
                self.planted_homes[rng.random_range(0..self.planted_homes.len())]
            } else {
                rng.random_range(0..n)
            };
            if let Some(w) = self.pick_along(home, sign, cone, dmin, dmax, rng) {
                return (home, Some(w));
            }
        }
        let fallback = if sign > 0.0 { self.extreme.0 } else { self.extreme.1 };
        (home, Some(if fallback == home { self.neighbor[home as usize] } else { fallback }))
    }

    /// Simulates device `i` from its own random stream.
    pub fn device(&self, i: usize) -> DeviceSim {
        let (archetype, planted) = self.assignment[i];
        let mut rng = stream(self.scn.seed, DEVICE_SALT, i as u64);
        let (home, work) = self.home_and_work(archetype, planted, &mut rng);
        let w = self.clock.window;
        let mut occ: Vec<(i64, u32)> = vec![(w.start, home)];
        let [leave, back, wander_start, wander_end] = self.times;
        for d in 0..self.clock.window_days() {
            let day0 = w.start + d as i64 * SECS_PER_DAY;
            match (archetype, work) {
                (Archetype::CommuterUp | Archetype::CommuterDown, Some(work)) if !self.clock.is_weekend(d) => {
                    let t_out = day0 + leave + self.jitter(&mut rng);
                    let t_back = day0 + back + self.jitter(&mut rng);
                    occ.push((t_out, work));
                    occ.push((t_back, home));
                }
                (Archetype::Wanderer, _) => {
                    let mut t = day0 + wander_start + self.jitter(&mut rng);
                    let end = day0 + wander_end + self.jitter(&mut rng);
                    let mean = self.scn.population.wander.mean_dwell_minutes * 60.0;
                    let mut cur = home;
                    while t < end {
                        let next = self.pick_near(home, cur, &mut rng);
                        occ.push((t, next));
                        cur = next;
                        let dwell: f64 = Exp1.sample(&mut rng);
                        t += ((dwell * mean) as i64).max(300);
                    }
                    if cur != home {
                        occ.push((end, home));
                    }
                }
                _ => {}
            }
        }
        let handoffs = self.incidental(&occ, &mut rng);
        DeviceSim {
            archetype,
            planted,
            home,
            work,
            occupancy: occ,
            handoffs,
        }
    }

    /// Transition hand-offs merged with incidental ones.
    fn incidental(&self, occ: &[(i64, u32)], rng: &mut impl Rng) -> Vec<(i64, u32)> {
        let noise = &self.scn.population.noise;
        let mut out = occ.to_vec();
        if !noise.enabled || noise.rate_per_hour == 0.0 || rng.random::<f64>() < noise.quiet_fraction {
            return out;
        }
        let gamma = Gamma::new(noise.rate_shape, 1.0 / noise.rate_shape).expect("validated shape");
        let rate = noise.rate_per_hour * gamma.sample(rng) / 3600.0;
        if !(rate > 0.0) {
            return out;
        }
        let end = self.clock.window.end;
        let mut t = occ[0].0 as f64;
        let mut blocked_until = i64::MIN;
        loop {
            let gap: f64 = Exp1.sample(rng);
            t += gap / rate;
            let ts = t as i64;
            if ts >= end {
                break;
            }
            if ts <= blocked_until {
                continue;
            }
            let k = occ.partition_point(|e| e.0 <= ts) - 1;
            if occ[k].0 == ts {
                continue;
            }
            let cur = occ[k].1;
            let next_start = occ.get(k + 1).map_or(end, |e| e.0);
            if rng.random::<f64>() < noise.excursion_prob {
                let back = ts + rng.random_range(30..=noise.excursion_max_s);
                if back < next_start {
                    out.push((ts, self.neighbor[cur as usize]));
                    out.push((back, cur));
                    blocked_until = back;
                    continue;
                }
            }
            out.push((ts, cur));
            blocked_until = ts;
        }
        out.sort_by_key(|e| e.0);
        out
    }

    pub fn truth(&self, i: usize, sim: &DeviceSim) -> DeviceTruth {
        DeviceTruth {
            device_id: self.device_id(i),
            archetype: sim.archetype,
            planted: sim.planted,
            home_tower: self.towers[sim.home as usize].tower_id.clone(),
            work_tower: sim.work.map(|w| self.towers[w as usize].tower_id.clone()),
            handoffs: sim.handoffs.len() as u32,
            segments: sim.occupancy.len() as u32,
        }
    }

    /// Every device, in memory.
    pub fn generate(&self) -> Population {
        let sims: Vec<DeviceSim> = (0..self.len()).into_par_iter().map(|i| self.device(i)).collect();
        let devices = sims.iter().enumerate().map(|(i, s)| self.truth(i, s)).collect();
        Population { devices, sims }
    }

    fn format_rows(&self, line: &mut String, id: &str, rows: &[(i64, u32)]) {
        for &(t, tower) in rows {
            line.push_str(id);
            line.push(',');
            clock::write_rfc3339(line, t);
            let _ = writeln!(line, ",{}", self.towers[tower as usize].tower_id);
        }
    }

    /// Streams hand-offs (and optionally the true occupancy in the same
    /// schema) to disk in device order.
    pub fn write(&self, handoffs: &Path, occupancy: Option<&Path>) -> Result<PopulationSummary> {
        let open = |p: &Path| -> Result<BufWriter<File>> {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            let mut w = BufWriter::with_capacity(1 << 20, f);
            writeln!(w, "{}", HANDOFFS_HEADER.join(",")).map_err(|e| Error::io(p, e))?;
            Ok(w)
        };
        let mut hw = open(handoffs)?;
        let mut ow = occupancy.map(open).transpose()?;
        let mut devices = Vec::with_capacity(self.len());
        let mut total = 0u64;
        let chunks = self.len().div_ceil(CHUNK);
        let batch = rayon::current_num_threads() * 2;
        for first in (0..chunks).step_by(batch) {
            let outs: Vec<(Vec<DeviceTruth>, String, String)> = (first..(first + batch).min(chunks))
                .into_par_iter()
                .map(|c| {
                    let mut truths = Vec::with_capacity(CHUNK);
                    let (mut h, mut o) = (String::new(), String::new());
                    for i in c * CHUNK..((c + 1) * CHUNK).min(self.len()) {
                        let sim = self.device(i);
                        let id = self.device_id(i);
                        self.format_rows(&mut h, &id, &sim.handoffs);
                        if occupancy.is_some() {
                            self.format_rows(&mut o, &id, &sim.occupancy);
                        }
                        truths.push(self.truth(i, &sim));
                    }
                    (truths, h, o)
                })
                .collect();
            for (truths, h, o) in outs {
                total += truths.iter().map(|t| t.handoffs as u64).sum::<u64>();
                hw.write_all(h.as_bytes()).map_err(|e| Error::io(handoffs, e))?;
                if let (Some(w), Some(p)) = (ow.as_mut(), occupancy) {
                    w.write_all(o.as_bytes()).map_err(|e| Error::io(p, e))?;
                }
                devices.extend(truths);
            }
        }
        hw.flush().map_err(|e| Error::io(handoffs, e))?;
        if let (Some(mut w), Some(p)) = (ow, occupancy) {
            w.flush().map_err(|e| Error::io(p, e))?;
        }
        Ok(PopulationSummary::new(devices, total))
    }
}

fn largest_remainder(shares: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = shares.iter().map(|s| s * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..shares.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n - counts.iter().sum::<usize>();
    for &k in order.iter().take(short) {
        counts[k] += 1;
    }
    counts
}

pub struct Population {
    pub devices: Vec<DeviceTruth>,
    pub sims: Vec<DeviceSim>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationSummary {
    pub handoffs: u64,
    pub archetypes: BTreeMap<Archetype, usize>,
    pub planted: usize,
    pub devices: Vec<DeviceTruth>,
}

impl PopulationSummary {
    pub fn new(devices: Vec<DeviceTruth>, handoffs: u64) -> Self {
        let mut archetypes = BTreeMap::new();
        for d in &devices {
            *archetypes.entry(d.archetype).or_insert(0) += 1;
        }
        PopulationSummary {
            handoffs,
            archetypes,
            planted: devices.iter().filter(|d| d.planted).count(),
            devices,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{HandoffRecord, HandoffTable, TowerTable};
    use crate::mobility::{build_trajectories, night_profiles};
    use crate::synth::{gen_towers, Mix};

    fn scenario(devices: usize) -> SynthScenario {
        let mut s = SynthScenario::desk();
        s.towers.count = 600;
        s.population.devices = devices;
        s
    }

    fn table(model: &PopulationModel, pop: &Population, towers: &TowerTable, occupancy: bool) -> HandoffTable {
        let mut recs = Vec::new();
        for (i, s) in pop.sims.iter().enumerate() {
            let rows = if occupancy { &s.occupancy } else { &s.handoffs };
            for &(t, tw) in rows {
                recs.push(HandoffRecord {
                    device_id: model.device_id(i),
                    timestamp: t,
                    tower_id: towers.id(tw).to_string(),
                });
            }
        }
        HandoffTable::from_records(&recs, towers).unwrap()
    }

    #[test]
    fn hhmm_parsing() {
        assert_eq!(parse_hhmm("06:30").unwrap(), 23_400);
        assert!(parse_hhmm("24:00").is_err());
        assert!(parse_hhmm("8").is_err());
    }

    #[test]
    fn mix_counts_are_exact() {
        assert_eq!(largest_remainder(&[0.5, 0.2, 0.2, 0.1], 7), vec![4, 1, 1, 1]);
        assert_eq!(largest_remainder(&[0.25; 4], 10).iter().sum::<usize>(), 10);
    }

    #[test]
    fn static_population_stays_home() {
        let mut scn = scenario(300);
        scn.population.mix = Mix { static_: 1.0, commuter_up: 0.0, commuter_down: 0.0, wanderer: 0.0 };
        let clock = StudyClock::connecticut_2016();
        let towers = gen_towers(&scn).unwrap();
        let model = PopulationModel::new(&scn, &clock, &towers).unwrap();
        let pop = model.generate();
        for s in &pop.sims {
            assert_eq!(s.occupancy, vec![(clock.window.start, s.home)]);
            assert!(s.handoffs.iter().all(|h| h.1 == s.home || h.1 == model.neighbor[s.home as usize]));
        }
        scn.population.noise.enabled = false;
        let model = PopulationModel::new(&scn, &clock, &towers).unwrap();
        assert!(model.generate().sims.iter().all(|s| s.handoffs.len() == 1));
    }

    #[test]
    fn noiseless_commuters_use_two_towers_on_weekdays() {
        let mut scn = scenario(400);
        scn.population.noise.enabled = false;
        scn.population.mix = Mix { static_: 0.0, commuter_up: 0.5, commuter_down: 0.5, wanderer: 0.0 };
        let clock = StudyClock::connecticut_2016();
        let towers = gen_towers(&scn).unwrap();
        let model = PopulationModel::new(&scn, &clock, &towers).unwrap();
        for s in model.generate().sims {
            let work = s.work.unwrap();
            assert_ne!(work, s.home);
            assert_eq!(s.handoffs, s.occupancy);
            for d in 0..7 {
                let day0 = clock.window.start + d as i64 * SECS_PER_DAY;
                let towers_today: std::collections::BTreeSet<u32> = s
                    .occupancy
                    .iter()
                    .filter(|e| e.0 >= day0 && e.0 < day0 + SECS_PER_DAY)
                    .map(|e| e.1)
                    .collect();
                if clock.is_weekend(d) {
                    assert!(towers_today.is_empty());
                } else {
                    assert_eq!(towers_today, [s.home, work].into_iter().collect());
                }
            }
            let gain = model.along[work as usize] - model.along[s.home as usize];
            match s.archetype {
                Archetype::CommuterUp => assert!(gain > 0.0),
                _ => assert!(gain < 0.0),
            }
        }
    }

    #[test]
    fn night_profile_recovers_home() {
        let scn = scenario(3000);
        let clock = StudyClock::connecticut_2016();
        let sites = gen_towers(&scn).unwrap();
        let towers = TowerTable::new(sites.clone()).unwrap();
        let model = PopulationModel::new(&scn, &clock, &sites).unwrap();
        let pop = model.generate();
        let set = build_trajectories(&table(&model, &pop, &towers, false), clock.window, None).unwrap();
        let prof = night_profiles(&set, clock.night, clock.utc_offset, &towers);
        let hits = prof
            .iter()
            .zip(&pop.sims)
            .filter(|(p, s)| p.night_tower == Some(s.home))
            .count();
        assert_eq!(set.len(), 3000);
        assert!(hits as f64 >= 0.99 * 3000.0, "{hits}");
    }

    #[test]
    fn handoffs_are_ordered_and_start_at_window() {
        let scn = scenario(500);
        let clock = StudyClock::connecticut_2016();
        let towers = gen_towers(&scn).unwrap();
        let model = PopulationModel::new(&scn, &clock, &towers).unwrap();
        for s in model.generate().sims {
            assert_eq!(s.handoffs[0], (clock.window.start, s.home));
            assert!(s.handoffs.windows(2).all(|w| w[0].0 < w[1].0));
            assert!(s.handoffs.iter().all(|h| clock.window.contains(h.0)));
            assert!(s.occupancy.windows(2).all(|w| w[0].0 < w[1].0 && w[0].1 != w[1].1));
        }
    }

    #[test]
    fn written_files_are_reproducible() {
        let scn = scenario(5000);
        let clock = StudyClock::connecticut_2016();
        let towers = gen_towers(&scn).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let model = PopulationModel::new(&scn, &clock, &towers).unwrap();
        let (h1, o1) = (dir.path().join("h1.csv"), dir.path().join("o1.csv"));
        let a = model.write(&h1, Some(&o1)).unwrap();
        let h2 = dir.path().join("h2.csv");
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| model.write(&h2, None)).unwrap();
        assert_eq!(a, b);
        assert_eq!(std::fs::read(&h1).unwrap(), std::fs::read(&h2).unwrap());
        let pop = model.generate();
        assert_eq!(a.devices, pop.devices);
        let lines = std::fs::read_to_string(&h1).unwrap().lines().count() as u64;
        assert_eq!(lines - 1, a.handoffs);
        assert_eq!(a.archetypes.values().sum::<usize>(), 5000);
    }
}
