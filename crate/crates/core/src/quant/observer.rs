//! Streaming range statistics for activation calibration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bins in the percentile histogram.
pub const HISTOGRAM_BINS: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ObserverKind {
    MinMax,
    Ema { momentum: f64 },
    Percentile { p: f64 },
}

/// Fixed-size histogram over `[-bound, bound]`. When a value falls outside,
/// the bound doubles and adjacent bin pairs merge, so memory stays constant.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    bins: Vec<u64>,
    bound: f64,
    total: u64,
}

impl Histogram {
    fn new(bound: f64) -> Self {
        Histogram {
            bins: vec![0; HISTOGRAM_BINS],
            bound: bound.max(f64::MIN_POSITIVE),
            total: 0,
        }
    }

    pub fn bin_width(&self) -> f64 {
        2.0 * self.bound / HISTOGRAM_BINS as f64
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    fn grow_to(&mut self, max_abs: f64) {
        while max_abs > self.bound {
            let half = HISTOGRAM_BINS / 2;
            let mut merged = vec![0; HISTOGRAM_BINS];
            for (i, &c) in self.bins.iter().enumerate() {
                merged[half / 2 + i / 2] += c;
            }
            self.bins = merged;
            self.bound *= 2.0;
        }
    }

    fn bin_of(&self, v: f64) -> usize {
        let idx = ((v + self.bound) / self.bin_width()).floor();
        (idx.max(0.0) as usize).min(HISTOGRAM_BINS - 1)
    }

    fn insert(&mut self, values: &[f64]) {
        let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        self.grow_to(max_abs);
        for &v in values {
            let b = self.bin_of(v);
            self.bins[b] += 1;
        }
        self.total += values.len() as u64;
    }

    fn lower_edge(&self, bin: usize) -> f64 {
        -self.bound + bin as f64 * self.bin_width()
    }

    /// Bin holding the value of 1-based rank `rank` in sorted order.
    fn bin_of_rank(&self, rank: u64) -> usize {
        let mut cum = 0;
        for (i, &c) in self.bins.iter().enumerate() {
            cum += c;
            if cum >= rank {
                return i;
            }
        }
        HISTOGRAM_BINS - 1
    }
}

/// Nearest-rank index `ceil(q·n)`, at least 1.
fn nearest_rank(q: f64, n: u64) -> u64 {
    ((q * n as f64 - 1e-9).ceil() as u64).clamp(1, n)
}

/// Collects `(r_min, r_max)` over a stream of batches.
#[derive(Clone, Debug, PartialEq)]
pub struct RangeObserver {
    kind: ObserverKind,
    r_min: f64,
    r_max: f64,
    samples: u64,
    batches: u64,
    started: bool,
    histogram: Option<Histogram>,
}

impl RangeObserver {
    pub fn new(kind: ObserverKind) -> Result<Self> {
        match kind {
            ObserverKind::Ema { momentum } if !(0.0..1.0).contains(&momentum) => {
                return Err(Error::contract(format!("EMA momentum {momentum} outside [0, 1)")));
            }
            ObserverKind::Percentile { p } if !(p > 0.5 && p <= 1.0) => {
                return Err(Error::contract(format!("percentile {p} outside (0.5, 1]")));
            }
            _ => {}
        }
        Ok(RangeObserver {
            kind,
            r_min: 0.0,
            r_max: 0.0,
            samples: 0,
            batches: 0,
            started: false,
            histogram: None,
        })
    }

    pub fn minmax() -> Self {
        Self::new(ObserverKind::MinMax).expect("valid kind")
    }

    /// EMA observer seeded by the extremes of the first batch.
    pub fn ema(momentum: f64) -> Result<Self> {
        Self::new(ObserverKind::Ema { momentum })
    }

    /// EMA observer with an explicit starting range.
    pub fn ema_from(momentum: f64, r_min: f64, r_max: f64) -> Result<Self> {
        let mut o = Self::ema(momentum)?;
        o.r_min = r_min;
        o.r_max = r_max;
        o.started = true;
        Ok(o)
    }

    pub fn percentile(p: f64) -> Result<Self> {
        Self::new(ObserverKind::Percentile { p })
    }

    pub fn kind(&self) -> ObserverKind {
        self.kind
    }

    pub fn sample_count(&self) -> u64 {
        self.samples
    }

    pub fn histogram(&self) -> Option<&Histogram> {
        self.histogram.as_ref()
    }

    pub fn observe(&mut self, batch: &[f64]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::contract("observe called with an empty batch"));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in batch {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("observer saw non-finite value {v}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        match self.kind {
            ObserverKind::MinMax => self.absorb(lo, hi),
            ObserverKind::Ema { momentum } => {
                if self.started {
                    self.r_min = momentum * self.r_min + (1.0 - momentum) * lo;
                    self.r_max = momentum * self.r_max + (1.0 - momentum) * hi;
                } else {
                    self.r_min = lo;
                    self.r_max = hi;
                }
            }
            ObserverKind::Percentile { .. } => {
                self.absorb(lo, hi);
                let hist = self
                    .histogram
                    .get_or_insert_with(|| Histogram::new(lo.abs().max(hi.abs())));
                hist.insert(batch);
            }
        }
        self.started = true;
        self.samples += batch.len() as u64;
        self.batches += 1;
        Ok(())
    }

    fn absorb(&mut self, lo: f64, hi: f64) {
        if self.started {
            self.r_min = self.r_min.min(lo);
            self.r_max = self.r_max.max(hi);
        } else {
            self.r_min = lo;
            self.r_max = hi;
        }
    }

    /// Current range. For the percentile observer this reads the p-th
    /// (nearest-rank) value for `r_max` and the (1−p)-th for `r_min` from
    /// the histogram, taking the outer edge of the selected bin and never
    /// exceeding the exact observed extremes. The result is within one bin
    /// width of the exact sorted-sample percentile.
    pub fn range(&self) -> Result<(f64, f64)> {
        if !self.started {
            return Err(Error::contract("range requested before any observation"));
        }
        match (&self.kind, &self.histogram) {
            (ObserverKind::Percentile { p }, Some(h)) => {
                let n = h.total();
                let hi_bin = h.bin_of_rank(nearest_rank(*p, n));
                let lo_bin = h.bin_of_rank(nearest_rank(1.0 - *p, n));
                let r_max = (h.lower_edge(hi_bin) + h.bin_width()).min(self.r_max);
                let r_min = h.lower_edge(lo_bin).max(self.r_min);
                Ok((r_min.min(r_max), r_max))
            }
            _ => Ok((self.r_min.min(self.r_max), self.r_max.max(self.r_min))),
        }
    }

    /// Alias for [`RangeObserver::range`], used once calibration ends.
    pub fn finalize(&self) -> Result<(f64, f64)> {
        self.range()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_unrolled_recurrence() {
        let mut o = RangeObserver::ema_from(0.9, 0.0, 0.0).unwrap();
        let want = [1.0, 1.9, 2.71];
        for w in want {
            o.observe(&[0.0, 10.0]).unwrap();
            assert!((o.range().unwrap().1 - w).abs() < 1e-12);
        }
    }

    #[test]
    fn ema_first_batch_seeds_range() {
        let mut o = RangeObserver::ema(0.9).unwrap();
        o.observe(&[-2.0, 4.0]).unwrap();
        assert_eq!(o.range().unwrap(), (-2.0, 4.0));
    }

    #[test]
    fn ema_converges_geometrically() {
        let mut o = RangeObserver::ema_from(0.9, 0.0, 0.0).unwrap();
        let max = 3.0;
        for i in 1..=100 {
            o.observe(&[max]).unwrap();
            let gap = max - o.range().unwrap().1;
            let want = max * 0.9f64.powi(i);
            assert!((gap - want).abs() < 1e-12 * max, "step {i}: {gap} vs {want}");
        }
    }

    #[test]
    fn minmax_envelope() {
        let mut o = RangeObserver::minmax();
        o.observe(&[-1.0, 5.0]).unwrap();
        o.observe(&[0.0, 2.0]).unwrap();
        assert_eq!(o.range().unwrap(), (-1.0, 5.0));
        assert_eq!(o.sample_count(), 4);
    }

    #[test]
    fn empty_batch_rejected() {
        let mut o = RangeObserver::minmax();
        assert!(matches!(o.observe(&[]), Err(Error::Contract(_))));
        assert!(o.range().is_err());
    }

    #[test]
    fn percentile_of_one_to_hundred() {
        let values: Vec<f64> = (1..=100).map(f64::from).collect();
        let mut o = RangeObserver::percentile(0.99).unwrap();
        o.observe(&values).unwrap();
        let (lo, hi) = o.range().unwrap();
        let w = o.histogram().unwrap().bin_width();
        assert!((hi - 99.0).abs() <= w, "{hi}");
        assert!((lo - 1.0).abs() <= w, "{lo}");
    }

    #[test]
    fn histogram_doubling_preserves_counts() {
        let mut o = RangeObserver::percentile(0.9).unwrap();
        o.observe(&[0.5, -0.25, 0.1]).unwrap();
        o.observe(&[40.0]).unwrap();
        let h = o.histogram().unwrap();
        assert_eq!(h.total(), 4);
        assert_eq!(h.bins.iter().sum::<u64>(), 4);
        assert!(h.bound() >= 40.0 && h.bound() < 80.0 + 1e-9);
    }

    #[test]
    fn invalid_parameters() {
        assert!(RangeObserver::ema(1.0).is_err());
        assert!(RangeObserver::percentile(0.3).is_err());
    }
}
