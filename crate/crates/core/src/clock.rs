//! Study clock: the shared hour index, the exposure window, the local-time
//! offset and the nightly interval used to define night-time local areas.
//!
//! All timestamps are seconds since the Unix epoch in UTC. Local time enters
//! only through a fixed UTC offset, applied when computing calendar days and
//! the night window.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SECS_PER_HOUR: i64 = 3600;
pub const SECS_PER_DAY: i64 = 86_400;

/// Half-open interval `[start, end)` of UTC seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: i64,
    pub end: i64,
}

impl Window {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!("empty window [{start}, {end})")));
        }
        Ok(Window { start, end })
    }

    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }

    pub fn len_secs(&self) -> i64 {
        self.end - self.start
    }
}

/// Recurring local-clock interval, in seconds after local midnight. When
/// `start > end` the interval wraps past midnight (e.g. 20:00-06:30).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightWindow {
    pub start: i64,
    pub end: i64,
}

impl Default for NightWindow {
    fn default() -> Self {
        NightWindow {
            start: 20 * SECS_PER_HOUR,
            end: 6 * SECS_PER_HOUR + 30 * 60,
        }
    }
}

impl NightWindow {
    pub fn parse(start: &str, end: &str) -> Result<Self> {
        let w = NightWindow {
            start: parse_hhmm(start)?,
            end: parse_hhmm(end)?,
        };
        if w.start == w.end {
            return Err(Error::invalid("night window has zero length"));
        }
        Ok(w)
    }

    /// Seconds of `[a, b)` falling inside the nightly interval, given the
    /// local offset from UTC in seconds.
    pub fn overlap(&self, a: i64, b: i64, utc_offset: i64) -> i64 {
        if a >= b {
            return 0;
        }
        let (la, lb) = (a + utc_offset, b + utc_offset);
        let first_day = la.div_euclid(SECS_PER_DAY) - 1;
        let last_day = lb.div_euclid(SECS_PER_DAY);
        let mut total = 0;
        for day in first_day..=last_day {
            let base = day * SECS_PER_DAY;
            let (s, e) = if self.start < self.end {
                (base + self.start, base + self.end)
            } else {
                (base + self.start, base + SECS_PER_DAY + self.end)
            };
            total += (lb.min(e) - la.max(s)).max(0);
        }
        total
    }
}

fn parse_hhmm(s: &str) -> Result<i64> {
    let bad = || Error::invalid(format!("expected HH:MM, found `{s}`"));
    let (h, m) = s.split_once(':').ok_or_else(bad)?;
    let h: i64 = h.trim().parse().map_err(|_| bad())?;
    let m: i64 = m.trim().parse().map_err(|_| bad())?;
    if !(0..24).contains(&h) || !(0..60).contains(&m) {
        return Err(bad());
    }
    Ok(h * SECS_PER_HOUR + m * 60)
}

/// Everything time-related that stages need to agree on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyClock {
    /// UTC second at which hour index 0 begins.
    pub clock_start: i64,
    /// Number of hours in the modeling period.
    pub hours: usize,
    /// Exposure window; must start on a local midnight and an hour boundary
    /// of the clock.
    pub window: Window,
    /// Local time minus UTC, in seconds.
    pub utc_offset: i64,
    pub night: NightWindow,
}

impl StudyClock {
    pub fn validate(&self) -> Result<()> {
        if self.hours == 0 {
            return Err(Error::invalid("study clock has zero hours"));
        }
        let w = self.window;
        if w.start >= w.end {
            return Err(Error::invalid("exposure window is empty"));
        }
        if (w.start - self.clock_start).rem_euclid(SECS_PER_HOUR) != 0
            || w.len_secs() % SECS_PER_DAY != 0
        {
            return Err(Error::invalid(
                "exposure window must align to clock hours and span whole days",
            ));
        }
        if (w.start + self.utc_offset).rem_euclid(SECS_PER_DAY) != 0 {
            return Err(Error::invalid("exposure window must start at local midnight"));
        }
        let first = self.window_first_hour()?;
        if first + self.window_hours() > self.hours {
            return Err(Error::invalid("exposure window extends past the study clock"));
        }
        Ok(())
    }

    /// Clock hour index of the first window hour.
    pub fn window_first_hour(&self) -> Result<usize> {
        let offset = self.window.start - self.clock_start;
        if offset < 0 || offset % SECS_PER_HOUR != 0 {
            return Err(Error::invalid("exposure window does not start on a clock hour"));
        }
        Ok((offset / SECS_PER_HOUR) as usize)
    }

    pub fn window_hours(&self) -> usize {
        (self.window.len_secs() / SECS_PER_HOUR) as usize
    }

    pub fn window_days(&self) -> usize {
        (self.window.len_secs() / SECS_PER_DAY) as usize
    }

    /// Local calendar date of window day `d` as `YYYY-MM-DD`.
    pub fn window_date(&self, day: usize) -> String {
        let local = self.window.start + self.utc_offset + day as i64 * SECS_PER_DAY;
        let (y, m, d) = civil_from_days(local.div_euclid(SECS_PER_DAY));
        format!("{y:04}-{m:02}-{d:02}")
    }

    /// True when window day `d` falls on a Saturday or Sunday.
    pub fn is_weekend(&self, day: usize) -> bool {
        let local = self.window.start + self.utc_offset + day as i64 * SECS_PER_DAY;
        // 1970-01-01 was a Thursday; 0 = Monday.
        let weekday = (local.div_euclid(SECS_PER_DAY) + 3).rem_euclid(7);
        weekday >= 5
    }

    /// The July 2016 Connecticut study: hour 0 at 2016-07-06 00:00 EDT, 744
    /// hours, exposure week 2016-07-18 through 2016-07-24.
    pub fn connecticut_2016() -> Self {
        let offset = -4 * SECS_PER_HOUR;
        let clock_start = days_from_civil(2016, 7, 6) * SECS_PER_DAY - offset;
        let wstart = days_from_civil(2016, 7, 18) * SECS_PER_DAY - offset;
        StudyClock {
            clock_start,
            hours: 744,
            window: Window {
                start: wstart,
                end: wstart + 7 * SECS_PER_DAY,
            },
            utc_offset: offset,
            night: NightWindow::default(),
        }
    }
}

/// Days since 1970-01-01 for a proleptic Gregorian date.
pub fn days_from_civil(y: i64, m: u32, d: u32) -> i64 {
    let y = if m <= 2 { y - 1 } else { y };
    let era = y.div_euclid(400);
    let yoe = y - era * 400;
    let m = m as i64;
    let doy = (153 * (if m > 2 { m - 3 } else { m + 9 }) + 2) / 5 + d as i64 - 1;
    let doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
    era * 146_097 + doe - 719_468
}

pub fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z - era * 146_097;
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    let y = yoe + era * 400 + i64::from(m <= 2);
    (y, m, d)
}

/// Parses an RFC 3339 timestamp to UTC seconds. The common
/// `YYYY-MM-DDTHH:MM:SSZ` form takes a fast path.
pub fn parse_rfc3339(s: &str) -> Option<i64> {
    let b = s.as_bytes();
    if b.len() == 20
        && b[4] == b'-'
        && b[7] == b'-'
        && (b[10] == b'T' || b[10] == b't' || b[10] == b' ')
        && b[13] == b':'
        && b[16] == b':'
        && (b[19] == b'Z' || b[19] == b'z')
    {
        let num = |r: std::ops::Range<usize>| -> Option<i64> {
            let mut v = 0i64;
            for &c in &b[r] {
                if !c.is_ascii_digit() {
                    return None;
                }
                v = v * 10 + (c - b'0') as i64;
            }
            Some(v)
        };
        let (y, mo, d) = (num(0..4)?, num(5..7)?, num(8..10)?);
        let (h, mi, se) = (num(11..13)?, num(14..16)?, num(17..19)?);
        if !(1..=12).contains(&mo) || !(1..=31).contains(&d) || h > 23 || mi > 59 || se > 60 {
            return None;
        }
        return Some(days_from_civil(y, mo as u32, d as u32) * SECS_PER_DAY + h * 3600 + mi * 60 + se);
    }
    chrono::DateTime::parse_from_rfc3339(s)
        .ok()
        .map(|t| t.timestamp())
}

/// Formats UTC seconds as `YYYY-MM-DDTHH:MM:SSZ`.
pub fn format_rfc3339(t: i64) -> String {
    let mut out = String::with_capacity(20);
    write_rfc3339(&mut out, t);
    out
}

pub fn write_rfc3339(out: &mut String, t: i64) {
    use std::fmt::Write;
    let (y, m, d) = civil_from_days(t.div_euclid(SECS_PER_DAY));
    let s = t.rem_euclid(SECS_PER_DAY);
    let _ = write!(
        out,
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        s / 3600,
        (s / 60) % 60,
        s % 60
    );
}

/// Parses a `+HH:MM` / `-HH:MM` offset to seconds.
pub fn parse_utc_offset(s: &str) -> Result<i64> {
    let bad = || Error::invalid(format!("expected a UTC offset like -04:00, found `{s}`"));
    let (sign, rest) = match s.as_bytes().first() {
        Some(b'+') => (1, &s[1..]),
        Some(b'-') => (-1, &s[1..]),
        _ => return Err(bad()),
    };
    let secs = parse_hhmm(rest).map_err(|_| bad())?;
    Ok(sign * secs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn civil_round_trip() {
        for z in [-1000i64, 0, 17_000, 16_999, 20_000, 60_000] {
            let (y, m, d) = civil_from_days(z);
            assert_eq!(days_from_civil(y, m, d), z);
        }
        assert_eq!(days_from_civil(1970, 1, 1), 0);
        assert_eq!(civil_from_days(days_from_civil(2016, 2, 29)), (2016, 2, 29));
    }

    #[test]
    fn rfc3339_fast_path_agrees_with_chrono() {
        for s in ["2016-07-18T04:00:00Z", "2016-12-31T23:59:59Z", "1999-01-01T00:00:00Z"] {
            let fast = parse_rfc3339(s).unwrap();
            let slow = chrono::DateTime::parse_from_rfc3339(s).unwrap().timestamp();
            assert_eq!(fast, slow);
            assert_eq!(format_rfc3339(fast), s);
        }
        assert_eq!(
            parse_rfc3339("2016-07-18T00:00:00-04:00"),
            parse_rfc3339("2016-07-18T04:00:00Z")
        );
        assert!(parse_rfc3339("2016-07-18 garbage").is_none());
    }

    #[test]
    fn ct_clock_is_consistent() {
        let c = StudyClock::connecticut_2016();
        c.validate().unwrap();
        assert_eq!(c.window_first_hour().unwrap(), 288);
        assert_eq!(c.window_hours(), 168);
        assert_eq!(c.window_date(0), "2016-07-18");
        assert!(!c.is_weekend(0));
        assert!(c.is_weekend(5) && c.is_weekend(6));
        assert_eq!(format_rfc3339(c.window.start), "2016-07-18T04:00:00Z");
    }

    #[test]
    fn night_overlap() {
        let n = NightWindow::default();
        let off = -4 * SECS_PER_HOUR;
        let midnight = days_from_civil(2016, 7, 18) * SECS_PER_DAY - off;
        // Whole local day: 00:00-06:30 plus 20:00-24:00.
        assert_eq!(n.overlap(midnight, midnight + SECS_PER_DAY, off), 6 * 3600 + 1800 + 4 * 3600);
        // 21:00-23:00 local.
        assert_eq!(n.overlap(midnight + 21 * 3600, midnight + 23 * 3600, off), 2 * 3600);
        // Daytime only.
        assert_eq!(n.overlap(midnight + 9 * 3600, midnight + 17 * 3600, off), 0);
        assert_eq!(parse_utc_offset("-04:00").unwrap(), off);
        let day = NightWindow::parse("09:00", "17:00").unwrap();
        assert_eq!(day.overlap(midnight, midnight + SECS_PER_DAY, off), 8 * 3600);
    }
}
