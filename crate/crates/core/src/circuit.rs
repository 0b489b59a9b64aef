//! Circuit lifecycle and per-circuit measurement windows.
//!
//! Each circuit keeps its last [`WINDOW`] RTT samples together with the
//! congestion time of each sample, computed against the minimum RTT known
//! when the sample arrived. Later minima never rewrite earlier congestion
//! values.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::CircuitError;
use crate::network::{great_circle_km, Position, RelayId};
use crate::sim::SimTime;

pub const WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeMode {
    /// Probe clean circuits that have been idle for a full interval.
    Idle,
    /// Only build handshakes and stream attaches produce samples.
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CircuitConfig {
    pub build_timeout_s: f64,
    pub probe_mode: ProbeMode,
    pub probe_interval_s: f64,
    pub probe_timeout_s: f64,
}

impl Default for CircuitConfig {
    fn default() -> Self {
        CircuitConfig {
            build_timeout_s: 60.0,
            probe_mode: ProbeMode::Idle,
            probe_interval_s: 30.0,
            probe_timeout_s: 60.0,
        }
    }
}

impl CircuitConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("build_timeout_s", self.build_timeout_s),
            ("probe_interval_s", self.probe_interval_s),
            ("probe_timeout_s", self.probe_timeout_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("circuit.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

pub type CircuitId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitState {
    Building,
    Open,
    Dirty,
    Closed,
}

impl CircuitState {
    pub fn can_transition_to(self, to: CircuitState) -> bool {
        use CircuitState::*;
        matches!(
            (self, to),
            (Building, Open) | (Open, Dirty) | (Dirty, Closed) | (Building, Closed) | (Open, Closed)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CircuitState::Building => "building",
            CircuitState::Open => "open",
            CircuitState::Dirty => "dirty",
            CircuitState::Closed => "closed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleSource {
    BuildHandshake,
    StreamAttach,
    IdleProbe,
}

impl SampleSource {
    pub fn as_str(self) -> &'static str {
        match self {
            SampleSource::BuildHandshake => "build-handshake",
            SampleSource::StreamAttach => "stream-attach",
            SampleSource::IdleProbe => "idle-probe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RttSample {
    pub value: SimTime,
    pub measured_at: SimTime,
    pub source: SampleSource,
}

/// One windowed measurement: the RTT and its congestion time at arrival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowEntry {
    pub rtt: SimTime,
    pub congestion: SimTime,
    pub measured_at: SimTime,
    pub source: SampleSource,
}

#[derive(Debug, Clone)]
pub struct Circuit {
    pub circuit_id: CircuitId,
    /// `[guard, middle, exit]`.
    pub path: [RelayId; 3],
    state: CircuitState,
    pub launched_at: SimTime,
    pub built_at: Option<SimTime>,
    pub first_used_at: Option<SimTime>,
    pub last_used_at: Option<SimTime>,
    window: VecDeque<WindowEntry>,
    rtt_min: Option<SimTime>,
    pub supported_ports: BTreeSet<u16>,
    /// Streams ever attached.
    pub streams_attached: u32,
    /// Streams currently carried.
    pub active_streams: Vec<u64>,
    /// Removed from candidate sets by the congestion-abandon rule.
    pub abandoned: bool,
    pub last_activity: SimTime,
    pub pending_probe: Option<u64>,
}

impl Circuit {
    pub fn new(circuit_id: CircuitId, path: [RelayId; 3], supported_ports: BTreeSet<u16>, now: SimTime) -> Self {
        Circuit {
            circuit_id,
            path,
            state: CircuitState::Building,
            launched_at: now,
            built_at: None,
            first_used_at: None,
            last_used_at: None,
            window: VecDeque::with_capacity(WINDOW),
            rtt_min: None,
            supported_ports,
            streams_attached: 0,
            active_streams: Vec::new(),
            abandoned: false,
            last_activity: now,
            pending_probe: None,
        }
    }

    pub fn guard(&self) -> RelayId {
        self.path[0]
    }

    pub fn middle(&self) -> RelayId {
        self.path[1]
    }

    pub fn exit(&self) -> RelayId {
        self.path[2]
    }

    pub fn state(&self) -> CircuitState {
        self.state
    }

    pub fn supports(&self, port: u16) -> bool {
        self.supported_ports.contains(&port)
    }

    /// Open, not dirty, not abandoned.
    pub fn is_clean_open(&self) -> bool {
        self.state == CircuitState::Open && !self.abandoned
    }

    pub fn transition(&mut self, to: CircuitState) -> Result<(), CircuitError> {
        if !self.state.can_transition_to(to) {
            return Err(CircuitError::IllegalTransition {
                from: self.state,
                to,
            });
        }
        self.state = to;
        Ok(())
    }

    /// Mark the circuit open at `now`, seeding the window with the final
    /// handshake's round trip.
    pub fn complete_build(&mut self, now: SimTime, last_handshake_rtt: SimTime) -> Result<(), CircuitError> {
        self.transition(CircuitState::Open)?;
        self.built_at = Some(now);
        self.last_activity = now;
        self.record_rtt(RttSample {
            value: last_handshake_rtt,
            measured_at: now,
            source: SampleSource::BuildHandshake,
        })
    }

    pub fn record_rtt(&mut self, sample: RttSample) -> Result<(), CircuitError> {
        if !matches!(self.state, CircuitState::Open | CircuitState::Dirty) {
            return Err(CircuitError::NotMeasurable);
        }
        if sample.value == SimTime::ZERO {
            return Err(CircuitError::NonPositiveSample);
        }
        let min = self.rtt_min.map_or(sample.value, |m| m.min(sample.value));
        self.rtt_min = Some(min);
        if self.window.len() == WINDOW {
            self.window.pop_front();
        }
        self.window.push_back(WindowEntry {
            rtt: sample.value,
            congestion: sample.value - min,
            measured_at: sample.measured_at,
            source: sample.source,
        });
        Ok(())
    }

    pub fn window(&self) -> impl ExactSizeIterator<Item = &WindowEntry> {
        self.window.iter()
    }

    pub fn rtt_min(&self) -> Option<SimTime> {
        self.rtt_min
    }

    /// Mean of the windowed RTTs, in milliseconds.
    pub fn mean_rtt(&self) -> Result<f64, CircuitError> {
        mean_ms(self.window.iter().map(|e| e.rtt))
    }

    /// Mean of the windowed congestion times, in milliseconds.
    pub fn congestion_time(&self) -> Result<f64, CircuitError> {
        mean_ms(self.window.iter().map(|e| e.congestion))
    }
}

fn mean_ms(values: impl ExactSizeIterator<Item = SimTime>) -> Result<f64, CircuitError> {
    let n = values.len();
    if n == 0 {
        return Err(CircuitError::Unmeasured);
    }
    let sum: u64 = values.map(SimTime::as_micros).sum();
    Ok(sum as f64 / n as f64 / 1000.0)
}

/// Geographic circuit length: client→guard + guard→middle + middle→exit,
/// plus exit→destination when the destination is known.
pub fn geo_length(
    client: Position,
    guard: Position,
    middle: Position,
    exit: Position,
    destination: Option<Position>,
) -> f64 {
    great_circle_km(client, guard)
        + great_circle_km(guard, middle)
        + great_circle_km(middle, exit)
        + destination.map_or(0.0, |d| great_circle_km(exit, d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn open_circuit() -> Circuit {
        let mut c = Circuit::new(1, [0, 1, 2], BTreeSet::from([80]), SimTime::ZERO);
        c.transition(CircuitState::Open).unwrap();
        c
    }

    fn sample(ms: u64) -> RttSample {
        RttSample {
            value: SimTime::from_millis(ms),
            measured_at: SimTime::ZERO,
            source: SampleSource::IdleProbe,
        }
    }

    fn rtts(c: &Circuit) -> Vec<u64> {
        c.window().map(|e| e.rtt.as_micros() / 1000).collect()
    }

    #[test]
    fn window_keeps_five_newest() {
        let mut c = open_circuit();
        for ms in [100, 110, 120, 130, 140, 90] {
            c.record_rtt(sample(ms)).unwrap();
        }
        assert_eq!(rtts(&c), vec![110, 120, 130, 140, 90]);
        assert_eq!(c.rtt_min(), Some(SimTime::from_millis(90)));
    }

    #[test]
    fn first_sample_sets_min() {
        let mut c = open_circuit();
        c.record_rtt(sample(100)).unwrap();
        assert_eq!(c.rtt_min(), Some(SimTime::from_millis(100)));
        assert_eq!(c.congestion_time().unwrap(), 0.0);
    }

    #[test]
    fn congestion_uses_running_min() {
        let mut c = open_circuit();
        for ms in [300, 400, 500] {
            c.record_rtt(sample(ms)).unwrap();
        }
        assert_eq!(c.congestion_time().unwrap(), 100.0);
    }

    #[test]
    fn congestion_zero_at_min() {
        let mut c = open_circuit();
        for _ in 0..5 {
            c.record_rtt(sample(250)).unwrap();
        }
        assert_eq!(c.congestion_time().unwrap(), 0.0);
    }

    #[test]
    fn later_minimum_does_not_rewrite_history() {
        let mut c = open_circuit();
        c.record_rtt(sample(300)).unwrap();
        c.record_rtt(sample(400)).unwrap();
        c.record_rtt(sample(100)).unwrap();
        // 0 + 100 + 0
        assert!((c.congestion_time().unwrap() - 100.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn mean_rtt_examples() {
        let mut c = open_circuit();
        c.record_rtt(sample(100)).unwrap();
        assert_eq!(c.mean_rtt().unwrap(), 100.0);
        for ms in [200, 300, 400, 500] {
            c.record_rtt(sample(ms)).unwrap();
        }
        assert_eq!(c.mean_rtt().unwrap(), 300.0);
    }

    #[test]
    fn unmeasured_signals() {
        let c = open_circuit();
        assert_eq!(c.mean_rtt(), Err(CircuitError::Unmeasured));
        assert_eq!(c.congestion_time(), Err(CircuitError::Unmeasured));
    }

    #[test]
    fn building_circuit_rejects_samples() {
        let mut c = Circuit::new(1, [0, 1, 2], BTreeSet::new(), SimTime::ZERO);
        assert_eq!(c.record_rtt(sample(5)), Err(CircuitError::NotMeasurable));
        assert_eq!(open_circuit().record_rtt(sample(0)), Err(CircuitError::NonPositiveSample));
    }

    #[test]
    fn state_machine() {
        use CircuitState::*;
        let all = [Building, Open, Dirty, Closed];
        let allowed = [(Building, Open), (Open, Dirty), (Dirty, Closed), (Building, Closed), (Open, Closed)];
        for from in all {
            for to in all {
                assert_eq!(from.can_transition_to(to), allowed.contains(&(from, to)), "{from:?}->{to:?}");
            }
        }
        let mut c = open_circuit();
        c.transition(Dirty).unwrap();
        assert!(c.transition(Open).is_err());
    }

    #[test]
    fn geo_length_examples() {
        let p = |lon| Position::new(0.0, lon);
        assert_eq!(geo_length(p(5.0), p(5.0), p(5.0), p(5.0), None), 0.0);
        let arc10 = 2.0 * std::f64::consts::PI * 6371.0 / 36.0;
        let three = geo_length(p(0.0), p(10.0), p(20.0), p(30.0), None);
        assert!((three - 3.0 * arc10).abs() < 0.1, "{three}");
        assert!((arc10 - 1111.95).abs() < 0.01);
        let four = geo_length(p(0.0), p(10.0), p(20.0), p(30.0), Some(p(40.0)));
        assert!((four - three - arc10).abs() < 0.1);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn position() -> impl Strategy<Value = Position> {
        (-90.0f64..=90.0, -180.0f64..=180.0).prop_map(|(lat, lon)| Position::new(lat, lon))
    }

    proptest! {
        #[test]
        fn congestion_non_negative_and_min_non_increasing(samples in prop::collection::vec(1u64..2_000_000, 1..40)) {
            let mut c = Circuit::new(1, [0, 1, 2], BTreeSet::from([80]), SimTime::ZERO);
            c.transition(CircuitState::Open).unwrap();
            let mut prev_min = u64::MAX;
            for (i, &us) in samples.iter().enumerate() {
                c.record_rtt(RttSample {
                    value: SimTime::from_micros(us),
                    measured_at: SimTime::from_secs(i as u64),
                    source: SampleSource::StreamAttach,
                })
                .unwrap();
                let min = c.rtt_min().unwrap().as_micros();
                prop_assert!(min <= prev_min);
                prev_min = min;
                prop_assert!(c.window().len() <= WINDOW);
                for e in c.window() {
                    prop_assert!(e.congestion <= e.rtt);
                }
                prop_assert!(c.congestion_time().unwrap() >= 0.0);
                prop_assert!(c.mean_rtt().unwrap() * 1000.0 >= min as f64 - 1e-6);
            }
        }

        #[test]
        fn destination_never_shortens(a in position(), b in position(), m in position(), e in position(), d in position()) {
            let without = geo_length(a, b, m, e, None);
            let with = geo_length(a, b, m, e, Some(d));
            prop_assert!(without >= 0.0);
            prop_assert!(with >= without);
        }

        #[test]
        fn great_circle_symmetric_and_bounded(a in position(), b in position()) {
            let ab = great_circle_km(a, b);
            prop_assert!((ab - great_circle_km(b, a)).abs() < 1e-9);
            prop_assert!(ab <= std::f64::consts::PI * crate::network::EARTH_RADIUS_KM + 1e-6);
        }
    }
}
