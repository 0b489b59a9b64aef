//! The client's set of pre-built circuits.
//!
//! Once per replenish interval the pool tops up every remembered port class
//! to the target count of clean circuits, marks circuits dirty once they
//! have been in use for `dirty_after`, and (in strategy modes) closes
//! circuits nobody attached a stream to within `reap_unused_after`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::circuit::{Circuit, CircuitId, CircuitState};
use crate::error::PathError;
use crate::network::{select_path, RelayDescriptor, RelayId};
use crate::sim::{RngStream, SimTime};

/// Number of clean circuits the client keeps per port class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TargetN {
    /// Keep the stock client behavior of two clean circuits.
    Unchanged,
    Fixed(u32),
}

impl TargetN {
    pub const VANILLA_TARGET: u32 = 2;

    pub fn count(self) -> u32 {
        match self {
            TargetN::Unchanged => Self::VANILLA_TARGET,
            TargetN::Fixed(n) => n,
        }
    }
}

impl fmt::Display for TargetN {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetN::Unchanged => f.write_str("unchanged"),
            TargetN::Fixed(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for TargetN {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "unchanged" => Ok(TargetN::Unchanged),
            other => match other.parse::<u32>() {
                Ok(0) => Err("circuit target must be at least 1".into()),
                Ok(n) => Ok(TargetN::Fixed(n)),
                Err(_) => Err(format!("invalid circuit target {other:?} (integer or \"unchanged\")")),
            },
        }
    }
}

impl Serialize for TargetN {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TargetN::Unchanged => s.serialize_str("unchanged"),
            TargetN::Fixed(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for TargetN {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(n) if n >= 1 && n <= i64::from(u32::MAX) => Ok(TargetN::Fixed(n as u32)),
            Raw::Int(n) => Err(serde::de::Error::custom(format!("circuit target {n} out of range"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    pub target_n: TargetN,
    pub dirty_after_s: f64,
    pub reap_unused_after_s: f64,
    pub replenish_interval_s: f64,
    pub port_memory_s: f64,
    /// Ports remembered from startup so pre-building begins before the
    /// first request.
    pub initial_ports: Vec<u16>,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            target_n: TargetN::Unchanged,
            dirty_after_s: 600.0,
            reap_unused_after_s: 300.0,
            replenish_interval_s: 1.0,
            port_memory_s: 3600.0,
            initial_ports: vec![80, 443],
        }
    }
}

impl PoolConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("dirty_after_s", self.dirty_after_s),
            ("reap_unused_after_s", self.reap_unused_after_s),
            ("replenish_interval_s", self.replenish_interval_s),
            ("port_memory_s", self.port_memory_s),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("pool.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }

    pub fn dirty_after(&self) -> SimTime {
        SimTime::from_secs_f64(self.dirty_after_s)
    }

    pub fn reap_unused_after(&self) -> SimTime {
        SimTime::from_secs_f64(self.reap_unused_after_s)
    }

    pub fn replenish_interval(&self) -> SimTime {
        SimTime::from_secs_f64(self.replenish_interval_s)
    }

    pub fn port_memory(&self) -> SimTime {
        SimTime::from_secs_f64(self.port_memory_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PortClass {
    pub port: u16,
    pub last_used: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildRequest {
    pub circuit_id: CircuitId,
    pub port: u16,
    pub path: [RelayId; 3],
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplenishOutcome {
    pub builds: Vec<BuildRequest>,
    pub failures: Vec<PathError>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PoolCounts {
    pub building: u32,
    pub open: u32,
    pub dirty: u32,
    pub abandoned: u32,
}

/// Allocates globally unique, increasing circuit ids.
#[derive(Debug, Default)]
pub struct CircuitIdAllocator(CircuitId);

impl CircuitIdAllocator {
    pub fn next_id(&mut self) -> CircuitId {
        let id = self.0;
        self.0 += 1;
        id
    }
}

#[derive(Debug)]
pub struct Pool {
    config: PoolConfig,
    reaping: bool,
    circuits: BTreeMap<CircuitId, Circuit>,
    ports: BTreeMap<u16, SimTime>,
}

impl Pool {
    pub fn new(config: PoolConfig, reaping: bool, now: SimTime) -> Self {
        let ports = config.initial_ports.iter().map(|&p| (p, now)).collect();
        Pool {
            config,
            reaping,
            circuits: BTreeMap::new(),
            ports,
        }
    }

    pub fn config(&self) -> &PoolConfig {
        &self.config
    }

    pub fn reaping(&self) -> bool {
        self.reaping
    }

    pub fn target(&self) -> u32 {
        self.config.target_n.count()
    }

    pub fn remember_port(&mut self, port: u16, now: SimTime) {
        self.ports.insert(port, now);
    }

    /// Forget ports not used within `port_memory`.
    pub fn expire_ports(&mut self, now: SimTime) {
        let horizon = self.config.port_memory();
        self.ports.retain(|_, last| now.saturating_sub(*last) < horizon);
    }

    pub fn port_classes(&self) -> Vec<PortClass> {
        self.ports
            .iter()
            .map(|(&port, &last_used)| PortClass { port, last_used })
            .collect()
    }

    pub fn insert(&mut self, circuit: Circuit) {
        self.circuits.insert(circuit.circuit_id, circuit);
    }

    pub fn get(&self, id: CircuitId) -> Option<&Circuit> {
        self.circuits.get(&id)
    }

    pub fn get_mut(&mut self, id: CircuitId) -> Option<&mut Circuit> {
        self.circuits.get_mut(&id)
    }

    pub fn circuits(&self) -> impl Iterator<Item = &Circuit> {
        self.circuits.values()
    }

    /// Transition to closed and drop from the pool.
    pub fn close(&mut self, id: CircuitId) -> Option<Circuit> {
        let mut circuit = self.circuits.remove(&id)?;
        circuit
            .transition(CircuitState::Closed)
            .expect("pool never holds closed circuits");
        Some(circuit)
    }

    /// Circuits that count toward the target for `port`: building or clean
    /// open, with an exit that allows it.
    pub fn clean_count(&self, port: u16, now: SimTime) -> u32 {
        self.circuits
            .values()
            .filter(|c| c.supports(port))
            .filter(|c| c.state() == CircuitState::Building || self.is_candidate(c, now))
            .count() as u32
    }

    fn would_be_dirty(&self, c: &Circuit, now: SimTime) -> bool {
        c.first_used_at
            .is_some_and(|first| now.saturating_sub(first) >= self.config.dirty_after())
    }

    fn is_candidate(&self, c: &Circuit, now: SimTime) -> bool {
        c.is_clean_open() && !self.would_be_dirty(c, now)
    }

    /// Issue builds until every remembered port class has `target` clean
    /// circuits. New circuits enter the pool in the building state.
    pub fn replenish(
        &mut self,
        consensus: &[RelayDescriptor],
        now: SimTime,
        rng: &mut RngStream,
        ids: &mut CircuitIdAllocator,
    ) -> ReplenishOutcome {
        let mut outcome = ReplenishOutcome::default();
        let target = self.target();
        let ports: Vec<u16> = self.ports.keys().copied().collect();
        for port in ports {
            let have = self.clean_count(port, now);
            for _ in have..target {
                match select_path(consensus, port, rng) {
                    Ok(path) => {
                        let exit = &consensus[path[2] as usize];
                        let circuit_id = ids.next_id();
                        self.insert(Circuit::new(circuit_id, path, exit.exit_policy.clone(), now));
                        outcome.builds.push(BuildRequest {
                            circuit_id,
                            port,
                            path,
                        });
                    }
                    Err(err) => {
                        log::debug!("path selection for port {port} failed: {err}");
                        outcome.failures.push(err);
                        break;
                    }
                }
            }
        }
        outcome
    }

    /// Used circuits past `dirty_after` since first use become dirty.
    /// Returns the ids that changed state.
    pub fn mark_dirty(&mut self, now: SimTime) -> Vec<CircuitId> {
        let limit = self.config.dirty_after();
        let mut changed = Vec::new();
        for c in self.circuits.values_mut() {
            let expired = c
                .first_used_at
                .is_some_and(|first| now.saturating_sub(first) >= limit);
            if c.state() == CircuitState::Open && expired {
                c.transition(CircuitState::Dirty).expect("open -> dirty");
                changed.push(c.circuit_id);
            }
        }
        changed
    }

    /// Close built circuits that never carried a stream and are older than
    /// `reap_unused_after`. No-op when reaping is disabled.
    pub fn reap_unused(&mut self, now: SimTime) -> Vec<Circuit> {
        if !self.reaping {
            return Vec::new();
        }
        let limit = self.config.reap_unused_after();
        let doomed: Vec<CircuitId> = self
            .circuits
            .values()
            .filter(|c| c.streams_attached == 0 && c.state() == CircuitState::Open)
            .filter(|c| c.built_at.is_some_and(|b| now.saturating_sub(b) >= limit))
            .map(|c| c.circuit_id)
            .collect();
        doomed.into_iter().filter_map(|id| self.close(id)).collect()
    }

    /// Clean, fully built circuits whose exit allows `port`, ascending by id.
    pub fn candidates(&self, port: u16, now: SimTime) -> Vec<&Circuit> {
        self.circuits
            .values()
            .filter(|c| c.supports(port) && self.is_candidate(c, now))
            .collect()
    }

    pub fn counts(&self) -> PoolCounts {
        let mut counts = PoolCounts::default();
        for c in self.circuits.values() {
            match c.state() {
                CircuitState::Building => counts.building += 1,
                CircuitState::Open if c.abandoned => counts.abandoned += 1,
                CircuitState::Open => counts.open += 1,
                CircuitState::Dirty => counts.dirty += 1,
                CircuitState::Closed => {}
            }
        }
        counts
    }
}
