//! Discrete-event scheduling core.
//!
//! Simulated time is an integer count of microseconds (fixed-point
//! milliseconds with three fractional digits), so event ordering never
//! depends on floating-point rounding. Events dispatch in
//! `(fire_time, sequence_number)` order; the sequence number is assigned at
//! scheduling time and is unique for the lifetime of a [`Scheduler`].

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::fmt;
use std::ops::{Add, AddAssign, Sub};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::SimError;

const MICROS_PER_MS: u64 = 1_000;
const MICROS_PER_SEC: u64 = 1_000_000;

/// A point in simulated time (or a span of it), in microseconds.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);
    pub const MAX: SimTime = SimTime(u64::MAX);

    pub const fn from_micros(us: u64) -> Self {
        SimTime(us)
    }

    pub const fn from_millis(ms: u64) -> Self {
        SimTime(ms * MICROS_PER_MS)
    }

    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * MICROS_PER_SEC)
    }

    /// Rounds to the nearest microsecond; negative and NaN inputs clamp to zero.
    pub fn from_secs_f64(s: f64) -> Self {
        if !(s > 0.0) {
            return SimTime::ZERO;
        }
        SimTime((s * MICROS_PER_SEC as f64).round() as u64)
    }

    pub fn from_millis_f64(ms: f64) -> Self {
        if !(ms > 0.0) {
            return SimTime::ZERO;
        }
        SimTime((ms * MICROS_PER_MS as f64).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_MS as f64
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / MICROS_PER_SEC as f64
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }

    pub fn checked_sub(self, other: SimTime) -> Option<SimTime> {
        self.0.checked_sub(other.0).map(SimTime)
    }

    pub fn mul_f64(self, factor: f64) -> SimTime {
        SimTime::from_micros((self.0 as f64 * factor).round().max(0.0) as u64)
    }
}

impl Add for SimTime {
    type Output = SimTime;
    fn add(self, rhs: SimTime) -> SimTime {
        SimTime(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for SimTime {
    fn add_assign(&mut self, rhs: SimTime) {
        self.0 = self.0.saturating_add(rhs.0);
    }
}

impl Sub for SimTime {
    type Output = SimTime;
    fn sub(self, rhs: SimTime) -> SimTime {
        SimTime(
            self.0
                .checked_sub(rhs.0)
                .expect("simulated time subtraction underflow"),
        )
    }
}

/// Seconds with exactly six decimals; the rendering is exact, which keeps
/// CSV output byte-stable.
impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:06}", self.0 / MICROS_PER_SEC, self.0 % MICROS_PER_SEC)
    }
}

impl std::str::FromStr for SimTime {
    type Err = String;

    /// Parses the decimal-seconds rendering produced by `Display`.
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("invalid time {s:?}");
        let (whole, frac) = s.split_once('.').unwrap_or((s, ""));
        if frac.len() > 6 || whole.is_empty() {
            return Err(bad());
        }
        let secs: u64 = whole.parse().map_err(|_| bad())?;
        let mut micros = 0u64;
        if !frac.is_empty() {
            let digits: u64 = frac.parse().map_err(|_| bad())?;
            micros = digits * 10u64.pow(6 - frac.len() as u32);
        }
        Ok(SimTime(secs * MICROS_PER_SEC + micros))
    }
}

/// Anything that can be dispatched by the scheduler. The tag feeds the
/// trace digest used by determinism checks.
pub trait EventKind {
    fn trace_tag(&self) -> u64;
}

/// A scheduled event as handed to the handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent<K> {
    pub fire_time: SimTime,
    pub sequence_number: u64,
    pub kind: K,
}

impl<K> PartialOrd for SimEvent<K>
where
    K: Eq,
{
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K: Eq> Ord for SimEvent<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.fire_time, self.sequence_number).cmp(&(other.fire_time, other.sequence_number))
    }
}

pub trait Handler<K> {
    fn handle(&mut self, event: SimEvent<K>, scheduler: &mut Scheduler<K>);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub events_dispatched: u64,
    pub end_time: SimTime,
    /// FNV-1a digest over every dispatched `(time, seq, tag)` triple.
    pub trace_digest: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_mix(mut hash: u64, value: u64) -> u64 {
    for byte in value.to_le_bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

pub struct Scheduler<K> {
    now: SimTime,
    next_seq: u64,
    queue: BinaryHeap<Reverse<SimEvent<K>>>,
    dispatched: u64,
    digest: u64,
    trace: Option<Vec<(SimTime, u64, u64)>>,
}

impl<K: Eq + EventKind> Default for Scheduler<K> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Eq + EventKind> Scheduler<K> {
    pub fn new() -> Self {
        Scheduler {
            now: SimTime::ZERO,
            next_seq: 0,
            queue: BinaryHeap::new(),
            dispatched: 0,
            digest: FNV_OFFSET,
            trace: None,
        }
    }

    /// Keep the full dispatched-event trace in memory (tests only; large).
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn trace(&self) -> Option<&[(SimTime, u64, u64)]> {
        self.trace.as_deref()
    }

    /// Enqueue `kind` at `fire_time`, returning its sequence number.
    pub fn schedule(&mut self, fire_time: SimTime, kind: K) -> Result<u64, SimError> {
        if fire_time < self.now {
            return Err(SimError::ScheduledInPast {
                fire_time,
                now: self.now,
            });
        }
        let sequence_number = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(SimEvent {
            fire_time,
            sequence_number,
            kind,
        }));
        Ok(sequence_number)
    }

    /// Schedule relative to the current clock; cannot fail.
    pub fn schedule_in(&mut self, delay: SimTime, kind: K) -> u64 {
        let at = self.now + delay;
        self.schedule(at, kind)
            .expect("relative scheduling is never in the past")
    }

    /// Dispatch every event with `fire_time <= end_time`, then park the clock
    /// at `end_time`.
    pub fn run_until<H: Handler<K>>(&mut self, end_time: SimTime, handler: &mut H) -> SimulationSummary {
        while let Some(Reverse(head)) = self.queue.peek() {
            if head.fire_time > end_time {
                break;
            }
            let Reverse(event) = self.queue.pop().expect("peeked");
            self.now = event.fire_time;
            self.dispatched += 1;
            let tag = event.kind.trace_tag();
            self.digest = fnv_mix(
                fnv_mix(fnv_mix(self.digest, event.fire_time.as_micros()), event.sequence_number),
                tag,
            );
            if let Some(trace) = self.trace.as_mut() {
                trace.push((event.fire_time, event.sequence_number, tag));
            }
            handler.handle(event, self);
        }
        if end_time > self.now {
            self.now = end_time;
        }
        SimulationSummary {
            events_dispatched: self.dispatched,
            end_time: self.now,
            trace_digest: self.digest,
        }
    }
}

/// A domain-separated deterministic random stream.
///
/// Two streams built from the same `(seed, label)` produce identical draws;
/// streams with different labels are statistically independent, so one
/// module consuming more randomness never shifts another module's draws.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: String,
    inner: ChaCha12Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"circsel-rng-v1\0");
        hasher.update(seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let key: [u8; 32] = hasher.finalize().into();
        RngStream {
            seed,
            label: label.to_owned(),
            inner: ChaCha12Rng::from_seed(key),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Derive a child stream, e.g. one per client.
    pub fn child(&self, sublabel: &str) -> RngStream {
        RngStream::new(self.seed, &format!("{}/{}", self.label, sublabel))
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[derive(Debug, Clone, PartialEq, Eq)]
    struct Tick(u32);

    impl EventKind for Tick {
        fn trace_tag(&self) -> u64 {
            u64::from(self.0)
        }
    }

    #[derive(Default)]
    struct Recorder {
        seen: Vec<(SimTime, u64, u32)>,
    }

    impl Handler<Tick> for Recorder {
        fn handle(&mut self, event: SimEvent<Tick>, _: &mut Scheduler<Tick>) {
            self.seen.push((event.fire_time, event.sequence_number, event.kind.0));
        }
    }

    #[test]
    fn dispatches_at_fire_time() {
        let mut sched = Scheduler::new();
        let mut rec = Recorder::default();
        sched.run_until(SimTime::from_secs(3), &mut rec);
        sched.schedule(SimTime::from_secs(5), Tick(1)).unwrap();
        sched.run_until(SimTime::from_secs(10), &mut rec);
        assert_eq!(rec.seen, vec![(SimTime::from_secs(5), 0, 1)]);
    }

    #[test]
    fn ties_break_by_sequence() {
        let mut sched = Scheduler::new();
        let mut rec = Recorder::default();
        for _ in 0..10 {
            sched.schedule(SimTime::ZERO, Tick(0)).unwrap();
        }
        let a = sched.schedule(SimTime::from_secs(5), Tick(10)).unwrap();
        let b = sched.schedule(SimTime::from_secs(5), Tick(11)).unwrap();
        assert_eq!((a, b), (10, 11));
        sched.run_until(SimTime::from_secs(6), &mut rec);
        let tail: Vec<u32> = rec.seen.iter().skip(10).map(|e| e.2).collect();
        assert_eq!(tail, vec![10, 11]);
    }

    #[test]
    fn rejects_past_events() {
        let mut sched: Scheduler<Tick> = Scheduler::new();
        sched.run_until(SimTime::from_secs(3), &mut Recorder::default());
        let err = sched.schedule(SimTime::from_secs(2), Tick(0)).unwrap_err();
        assert!(matches!(err, SimError::ScheduledInPast { .. }));
    }

    #[test]
    fn empty_run_advances_clock() {
        let mut sched: Scheduler<Tick> = Scheduler::new();
        let summary = sched.run_until(SimTime::from_secs(10), &mut Recorder::default());
        assert_eq!(summary.events_dispatched, 0);
        assert_eq!(summary.end_time, SimTime::from_secs(10));
        assert_eq!(sched.now(), SimTime::from_secs(10));
    }

    #[test]
    fn run_until_is_inclusive_and_leaves_later_events() {
        let mut sched = Scheduler::new();
        let mut rec = Recorder::default();
        for s in 1..=3 {
            sched.schedule(SimTime::from_secs(s), Tick(s as u32)).unwrap();
        }
        let summary = sched.run_until(SimTime::from_secs(2), &mut rec);
        assert_eq!(summary.events_dispatched, 2);
        assert_eq!(sched.pending(), 1);
        assert_eq!(sched.now(), SimTime::from_secs(2));
    }

    #[test]
    fn rng_streams_are_reproducible_and_separated() {
        let mut a = RngStream::new(7, "network");
        let mut b = RngStream::new(7, "network");
        let mut c = RngStream::new(7, "workload");
        let xs: Vec<u64> = (0..16).map(|_| a.random()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.random()).collect();
        let zs: Vec<u64> = (0..16).map(|_| c.random()).collect();
        assert_eq!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn rng_golden_prefix() {
        // Frozen from the first verified run; guards cross-platform stability.
        let mut rng = RngStream::new(42, "golden");
        let draws: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        assert_eq!(draws, GOLDEN_DRAWS);
    }

    const GOLDEN_DRAWS: [u64; 3] = [483732877688569083, 17066761857903252695, 10003519110114484579];

    #[test]
    fn display_is_exact_seconds() {
        assert_eq!(SimTime::from_micros(12_500_001).to_string(), "12.500001");
        assert_eq!(SimTime::from_millis(599_999).to_string(), "599.999000");
        assert_eq!("12.500001".parse::<SimTime>(), Ok(SimTime::from_micros(12_500_001)));
        assert_eq!("3.5".parse::<SimTime>(), Ok(SimTime::from_millis(3500)));
        assert!("x".parse::<SimTime>().is_err());
    }
}
