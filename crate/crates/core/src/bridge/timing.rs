//! Cycle clock and latency statistics.

use std::io::Write;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CycleClock {
    pub period_ms: f64,
    pub budget_ms: f64,
}

impl Default for CycleClock {
    fn default() -> Self {
        Self {
            period_ms: 80.0,
            budget_ms: 22.0,
        }
    }
}

impl CycleClock {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.budget_ms > 0.0 && self.budget_ms < self.period_ms && self.period_ms.is_finite()) {
            return Err(format!(
                "clock budget {} ms must be positive and below the period {} ms",
                self.budget_ms, self.period_ms
            ));
        }
        Ok(())
    }

    pub fn period(&self) -> Duration {
        Duration::from_secs_f64(self.period_ms / 1e3)
    }

    pub fn budget(&self) -> Duration {
        Duration::from_secs_f64(self.budget_ms / 1e3)
    }
}

/// Summary of a latency sample in milliseconds. Percentiles use the
/// nearest-rank definition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub max: f64,
}

impl Distribution {
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p / 100.0 * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Self {
            count: s.len(),
            mean: s.iter().sum::<f64>() / s.len() as f64,
            min: s[0],
            p50: rank(50.0),
            p95: rank(95.0),
            p99: rank(99.0),
            max: s[s.len() - 1],
        })
    }
}

/// One cycle's timing as seen by whichever side logged it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingSample {
    pub solve_ms: Option<f64>,
    pub round_trip_ms: Option<f64>,
    pub missed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingStats {
    pub budget_ms: f64,
    pub solve: Option<Distribution>,
    pub round_trip: Option<Distribution>,
    /// Cycles flagged as missed plus solves over budget that were not flagged.
    pub deadline_misses: usize,
    pub cycles: usize,
}

impl TimingStats {
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["series", "count", "mean_ms", "min_ms", "p50_ms", "p95_ms", "p99_ms", "max_ms"])?;
        for (name, d) in [("solve", &self.solve), ("round_trip", &self.round_trip)] {
            if let Some(d) = d {
                out.write_record([
                    name.to_string(),
                    d.count.to_string(),
                    d.mean.to_string(),
                    d.min.to_string(),
                    d.p50.to_string(),
                    d.p95.to_string(),
                    d.p99.to_string(),
                    d.max.to_string(),
                ])?;
            }
        }
        out.write_record(["deadline_misses", &self.deadline_misses.to_string(), "", "", "", "", "", ""])?;
        out.write_record(["budget_ms", "", &self.budget_ms.to_string(), "", "", "", "", ""])?;
        out.flush()?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let fmt = |d: &Option<Distribution>| match d {
            Some(d) => format!(
                "mean {:.3} ms, p50 {:.3}, p95 {:.3}, p99 {:.3}, max {:.3} (n = {})",
                d.mean, d.p50, d.p95, d.p99, d.max, d.count
            ),
            None => "n/a".into(),
        };
        format!(
            "solve: {}\nround trip: {}\ndeadline misses: {} of {} cycles (budget {} ms)",
            fmt(&self.solve),
            fmt(&self.round_trip),
            self.deadline_misses,
            self.cycles,
            self.budget_ms
        )
    }
}

pub fn collect_timing(log: &[TimingSample], budget_ms: f64) -> TimingStats {
    let solve: Vec<f64> = log.iter().filter_map(|s| s.solve_ms).collect();
    let rtt: Vec<f64> = log.iter().filter_map(|s| s.round_trip_ms).collect();
    let misses = log
        .iter()
        .filter(|s| s.missed || s.solve_ms.is_some_and(|t| t > budget_ms))
        .count();
    TimingStats {
        budget_ms,
        solve: Distribution::from_samples(&solve),
        round_trip: Distribution::from_samples(&rtt),
        deadline_misses: misses,
        cycles: log.len(),
    }
}

/// Wall-clock stopwatch that reads `None` where no monotonic clock exists.
#[derive(Debug, Clone, Copy)]
pub struct Stopwatch {
    #[cfg(not(target_arch = "wasm32"))]
    start: std::time::Instant,
}

impl Stopwatch {
    pub fn start() -> Self {
        Self {
            #[cfg(not(target_arch = "wasm32"))]
            start: std::time::Instant::now(),
        }
    }

    pub fn elapsed(&self) -> Option<Duration> {
        #[cfg(not(target_arch = "wasm32"))]
        {
            Some(self.start.elapsed())
        }
        #[cfg(target_arch = "wasm32")]
        {
            None
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn samples(ms: &[f64]) -> Vec<TimingSample> {
        ms.iter()
            .map(|&t| TimingSample {
                solve_ms: Some(t),
                ..Default::default()
            })
            .collect()
    }

    #[test]
    fn single_entry_is_degenerate() {
        let s = collect_timing(&samples(&[3.5]), 22.0).solve.unwrap();
        assert_eq!((s.mean, s.max, s.p50, s.p99), (3.5, 3.5, 3.5, 3.5));
    }

    #[test]
    fn four_entry_mean() {
        let s = collect_timing(&samples(&[1.0, 2.0, 3.0, 4.0]), 22.0);
        let d = s.solve.unwrap();
        assert_eq!(d.mean, 2.5);
        assert_eq!(d.p50, 2.0);
        assert_eq!(d.max, 4.0);
        assert_eq!(s.deadline_misses, 0);
        assert!(s.round_trip.is_none());
    }

    #[test]
    fn misses_count_flags_and_overruns() {
        let mut log = samples(&[1.0, 30.0, 2.0]);
        log.push(TimingSample {
            missed: true,
            ..Default::default()
        });
        assert_eq!(collect_timing(&log, 22.0).deadline_misses, 2);
    }

    #[test]
    fn clock_validation() {
        assert!(CycleClock::default().validate().is_ok());
        assert!(CycleClock {
            period_ms: 20.0,
            budget_ms: 22.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn csv_has_rows() {
        let mut buf = Vec::new();
        collect_timing(&samples(&[1.0, 2.0]), 22.0).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("series,count,mean_ms"));
        assert!(text.contains("solve,2,1.5,"));
    }

    proptest! {
        #[test]
        fn percentiles_are_ordered(v in prop::collection::vec(0.0f64..100.0, 1..300)) {
            let d = Distribution::from_samples(&v).unwrap();
            prop_assert!(d.max >= d.p99 && d.p99 >= d.p95 && d.p95 >= d.p50 && d.p50 >= d.min);
            prop_assert!(d.mean <= d.max + 1e-9 && d.mean >= d.min - 1e-9);
        }
    }
}
