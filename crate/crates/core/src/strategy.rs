//! Stream-attachment policies.
//!
//! Every policy except [`StrategyId::Car`] is a pure function of the
//! candidate scores. Ties always resolve to the smaller circuit id and
//! unmeasured metrics order after every measured value.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::CircuitId;
use crate::sim::RngStream;

/// Congestion above this (strictly) removes a circuit from CAR's candidates.
pub const CAR_ABANDON_MS: f64 = 500.0;
/// CAR compares this many randomly drawn candidates.
pub const CAR_SAMPLE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyId {
    Vanilla,
    Car,
    CongestionOnly,
    LengthOnly,
    RttOnly,
    CongestionThenLength,
    RttThenLength,
    LengthThenCongestion,
    LengthThenRtt,
    RttThenCongestion,
    CongestionThenRtt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Rtt,
    Congestion,
    Length,
}

impl StrategyId {
    pub const ALL: [StrategyId; 11] = [
        StrategyId::Vanilla,
        StrategyId::Car,
        StrategyId::CongestionOnly,
        StrategyId::LengthOnly,
        StrategyId::RttOnly,
        StrategyId::CongestionThenLength,
        StrategyId::RttThenLength,
        StrategyId::LengthThenCongestion,
        StrategyId::LengthThenRtt,
        StrategyId::RttThenCongestion,
        StrategyId::CongestionThenRtt,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::Vanilla => "vanilla",
            StrategyId::Car => "car",
            StrategyId::CongestionOnly => "congestion_only",
            StrategyId::LengthOnly => "length_only",
            StrategyId::RttOnly => "rtt_only",
            StrategyId::CongestionThenLength => "congestion_then_length",
            StrategyId::RttThenLength => "rtt_then_length",
            StrategyId::LengthThenCongestion => "length_then_congestion",
            StrategyId::LengthThenRtt => "length_then_rtt",
            StrategyId::RttThenCongestion => "rtt_then_congestion",
            StrategyId::CongestionThenRtt => "congestion_then_rtt",
        }
    }

    /// Baselines keep the stock pool size and never reap unused circuits.
    pub fn is_baseline(self) -> bool {
        matches!(self, StrategyId::Vanilla | StrategyId::Car)
    }

    /// `(primary, secondary)` metrics for the metric-based policies.
    pub fn metrics(self) -> Option<(Metric, Option<Metric>)> {
        use Metric::*;
        Some(match self {
            StrategyId::Vanilla | StrategyId::Car => return None,
            StrategyId::CongestionOnly => (Congestion, None),
            StrategyId::LengthOnly => (Length, None),
            StrategyId::RttOnly => (Rtt, None),
            StrategyId::CongestionThenLength => (Congestion, Some(Length)),
            StrategyId::RttThenLength => (Rtt, Some(Length)),
            StrategyId::LengthThenCongestion => (Length, Some(Congestion)),
            StrategyId::LengthThenRtt => (Length, Some(Rtt)),
            StrategyId::RttThenCongestion => (Rtt, Some(Congestion)),
            StrategyId::CongestionThenRtt => (Congestion, Some(Rtt)),
        })
    }
}

impl fmt::Display for StrategyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        StrategyId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = StrategyId::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown strategy {s:?}; expected one of {}", names.join(", "))
            })
    }
}

/// Metrics of one candidate at selection time. RTT and congestion are in
/// milliseconds and `None` while the circuit has no samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircuitScore {
    pub circuit_id: CircuitId,
    pub mean_rtt: Option<f64>,
    pub mean_congestion: Option<f64>,
    pub length_km: f64,
}

impl CircuitScore {
    fn metric(&self, m: Metric) -> Option<f64> {
        match m {
            Metric::Rtt => self.mean_rtt,
            Metric::Congestion => self.mean_congestion,
            Metric::Length => Some(self.length_km),
        }
    }
}

/// Measured values ascending, then unmeasured.
fn cmp_metric(a: Option<f64>, b: Option<f64>) -> Ordering {
    match (a, b) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => Ordering::Less,
        (None, Some(_)) => Ordering::Greater,
        (None, None) => Ordering::Equal,
    }
}

fn by_metric(m: Metric) -> impl Fn(&&CircuitScore, &&CircuitScore) -> Ordering {
    move |a, b| cmp_metric(a.metric(m), b.metric(m)).then(a.circuit_id.cmp(&b.circuit_id))
}

/// Pick the circuit to attach a stream to. Returns `None` only when
/// `candidates` is empty; the caller must then defer the stream.
pub fn select(strategy: StrategyId, candidates: &[CircuitScore], rng: &mut RngStream) -> Option<CircuitId> {
    if candidates.is_empty() {
        return None;
    }
    let mut sorted: Vec<&CircuitScore> = candidates.iter().collect();
    sorted.sort_by_key(|c| c.circuit_id);
    match strategy {
        StrategyId::Vanilla => Some(sorted[0].circuit_id),
        StrategyId::Car => {
            // Partial Fisher-Yates over id-ordered candidates so the draw is
            // independent of input order.
            let k = CAR_SAMPLE.min(sorted.len());
            for i in 0..k {
                let j = rng.random_range(i..sorted.len());
                sorted.swap(i, j);
            }
            sorted[..k]
                .iter()
                .copied()
                .min_by(by_metric(Metric::Congestion))
                .map(|c| c.circuit_id)
        }
        other => {
            let (primary, secondary) = other.metrics().expect("metric strategy");
            sorted.sort_by(by_metric(primary));
            match secondary {
                None => Some(sorted[0].circuit_id),
                Some(second) => sorted
                    .iter()
                    .take(2)
                    .copied()
                    .min_by(by_metric(second))
                    .map(|c| c.circuit_id),
            }
        }
    }
}

/// True when CAR should stop using the circuit for new streams.
pub fn car_abandon_check(score: &CircuitScore) -> bool {
    score.mean_congestion.is_some_and(|c| c > CAR_ABANDON_MS)
}
