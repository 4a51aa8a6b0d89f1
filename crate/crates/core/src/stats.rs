//! Order statistics, histograms and a mergeable binned sketch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Type-7 (linear interpolation) quantile of already sorted values.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn sort_values(values: &mut [f64]) {
    values.sort_unstable_by(f64::total_cmp);
}

/// Sum in sorted order, so the result does not depend on input order.
pub fn sorted_mean(sorted: &[f64]) -> f64 {
    sorted.iter().sum::<f64>() / sorted.len() as f64
}

pub const SUMMARY_PROBS: [f64; 7] = [0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99];

/// JSON has no NaN; it is written as `null` and read back here.
mod nan_as_null {
    use serde::{Deserialize, Deserializer};

    pub fn one<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }

    pub fn many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(Vec::<Option<f64>>::deserialize(d)?.into_iter().map(|v| v.unwrap_or(f64::NAN)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    #[serde(deserialize_with = "nan_as_null::one")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_as_null::one")]
    pub sd: f64,
    #[serde(deserialize_with = "nan_as_null::one")]
    pub min: f64,
    #[serde(deserialize_with = "nan_as_null::one")]
    pub max: f64,
    /// Quantiles at [`SUMMARY_PROBS`].
    #[serde(deserialize_with = "nan_as_null::many")]
    pub quantiles: Vec<f64>,
}

impl Summary {
    /// Summary of `values`, which are sorted in place.
    pub fn of(values: &mut [f64]) -> Summary {
        sort_values(values);
        Summary::of_sorted(values)
    }

    pub fn of_sorted(sorted: &[f64]) -> Summary {
        let count = sorted.len();
        if count == 0 {
            return Summary {
                count,
                mean: f64::NAN,
                sd: f64::NAN,
                min: f64::NAN,
                max: f64::NAN,
                quantiles: vec![f64::NAN; SUMMARY_PROBS.len()],
            };
        }
        let mean = sorted_mean(sorted);
        let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        Summary {
            count,
            mean,
            sd: var.sqrt(),
            min: sorted[0],
            max: sorted[count - 1],
            quantiles: SUMMARY_PROBS.iter().map(|&p| quantile_sorted(sorted, p)).collect(),
        }
    }

    pub fn median(&self) -> f64 {
        self.quantiles[3]
    }
}

/// Fixed equal-width bins over `[lo, hi)` with under/overflow counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if !(hi > lo) || bins == 0 {
            return Err(Error::invalid("histogram needs hi > lo and at least one bin"));
        }
        Ok(Histogram {
            lo,
            hi,
            counts: vec![0; bins],
            underflow: 0,
            overflow: 0,
        })
    }

    pub fn width(&self) -> f64 {
        (self.hi - self.lo) / self.counts.len() as f64
    }

    pub fn add(&mut self, v: f64) {
        if v < self.lo {
            self.underflow += 1;
        } else if v >= self.hi {
            self.overflow += 1;
        } else {
            let i = (((v - self.lo) / self.width()) as usize).min(self.counts.len() - 1);
            self.counts[i] += 1;
        }
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.lo != other.lo || self.hi != other.hi || self.counts.len() != other.counts.len() {
            return Err(Error::invalid("cannot merge histograms with different bins"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.underflow += other.underflow;
        self.overflow += other.overflow;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.counts.len()).map(|i| self.lo + i as f64 * self.width()).collect()
    }
}

/// Mergeable distribution sketch: fine fixed bins plus exact count, sum,
/// minimum and maximum. Quantiles are accurate to one bin width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedSketch {
    pub hist: Histogram,
    pub count: u64,
    pub sum: f64,
    pub sum_sq: f64,
    pub min: f64,
    pub max: f64,
}

impl BinnedSketch {
    pub fn new(lo: f64, hi: f64, bins: usize) -> Result<Self> {
        Ok(BinnedSketch {
            hist: Histogram::new(lo, hi, bins)?,
            count: 0,
            sum: 0.0,
            sum_sq: 0.0,
            min: f64::INFINITY,
            max: f64::NEG_INFINITY,
        })
    }

    pub fn add(&mut self, v: f64) {
        self.hist.add(v);
        self.count += 1;
        self.sum += v;
        self.sum_sq += v * v;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    pub fn merge(&mut self, other: &BinnedSketch) -> Result<()> {
        self.hist.merge(&other.hist)?;
        self.count += other.count;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
        self.min = self.min.min(other.min);
        self.max = self.max.max(other.max);
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }

    /// Quantile by interpolating within the bin holding the target rank.
    pub fn quantile(&self, p: f64) -> f64 {
        if self.count == 0 {
            return f64::NAN;
        }
        let target = p.clamp(0.0, 1.0) * (self.count - 1) as f64;
        let mut seen = self.hist.underflow as f64;
        if target < seen {
            return self.min;
        }
        let w = self.hist.width();
        for (i, &c) in self.hist.counts.iter().enumerate() {
            if c > 0 && target < seen + c as f64 {
                let frac = (target - seen + 0.5) / c as f64;
                let v = self.hist.lo + (i as f64 + frac.min(1.0)) * w;
                return v.clamp(self.min, self.max);
            }
            seen += c as f64;
        }
        self.max
    }

    pub fn summary(&self) -> Summary {
        let empty = self.count == 0;
        let mean = self.mean();
        Summary {
            count: self.count as usize,
            mean,
            sd: (self.sum_sq / self.count as f64 - mean * mean).max(0.0).sqrt(),
            min: if empty { f64::NAN } else { self.min },
            max: if empty { f64::NAN } else { self.max },
            quantiles: SUMMARY_PROBS.iter().map(|&p| self.quantile(p)).collect(),
        }
    }
}
