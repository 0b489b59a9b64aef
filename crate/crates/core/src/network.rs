//! Synthetic network: relays and endpoints with geographic positions, a
//! parametric link model, per-node FIFO transmit queues and
//! bandwidth-weighted path selection.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ConfigError, PathError, TopologyError};
use crate::sim::{RngStream, SimTime};

pub const EARTH_RADIUS_KM: f64 = 6371.0;

pub type RelayId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub lat: f64,
    pub lon: f64,
}

impl Position {
    pub const fn new(lat: f64, lon: f64) -> Self {
        Position { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

/// Haversine distance on a spherical Earth of radius [`EARTH_RADIUS_KM`].
pub fn great_circle_km(a: Position, b: Position) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayDescriptor {
    pub relay_id: RelayId,
    /// KiB/s.
    pub bandwidth: u32,
    #[serde(default)]
    pub is_guard: bool,
    #[serde(default)]
    pub is_exit: bool,
    pub position: Position,
    #[serde(default)]
    pub exit_policy: BTreeSet<u16>,
    #[serde(default)]
    pub is_malicious: bool,
}

impl RelayDescriptor {
    pub fn allows_port(&self, port: u16) -> bool {
        self.is_exit && self.exit_policy.contains(&port)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.bandwidth == 0 {
            return Err(TopologyError::ZeroBandwidth(self.relay_id));
        }
        if self.is_exit && self.exit_policy.is_empty() {
            return Err(TopologyError::EmptyExitPolicy(self.relay_id));
        }
        if !self.position.is_valid() {
            return Err(TopologyError::InvalidPosition {
                what: format!("relay {}", self.relay_id),
                lat: self.position.lat,
                lon: self.position.lon,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndpointKind {
    Client,
    Server,
    Directory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointDescriptor {
    pub endpoint_id: u32,
    pub kind: EndpointKind,
    pub position: Position,
    /// Access bandwidth, KiB/s.
    pub bandwidth: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    /// Fixed per-hop processing floor.
    pub floor_ms: f64,
    /// Signal speed in fibre.
    pub km_per_ms: f64,
    /// Jitter is drawn uniformly from `[0, jitter_ms]` per transmission.
    pub jitter_ms: f64,
    /// Independent per-cell loss probability.
    pub packet_loss: f64,
    /// A lost cell delays delivery by this multiple of the link RTT.
    pub retransmit_factor: f64,
    /// Bytes on the wire per cell.
    pub cell_size: u32,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel {
            floor_ms: 2.0,
            km_per_ms: 200.0,
            jitter_ms: 1.0,
            packet_loss: 0.000025,
            retransmit_factor: 1.5,
            cell_size: 514,
        }
    }
}

impl LinkModel {
    pub fn validate(&self) -> Result<(), TopologyError> {
        let ok = self.floor_ms >= 0.0
            && self.km_per_ms > 0.0
            && self.jitter_ms >= 0.0
            && (0.0..1.0).contains(&self.packet_loss)
            && self.retransmit_factor >= 0.0
            && self.cell_size > 0;
        if ok {
            Ok(())
        } else {
            Err(TopologyError::Invalid(format!("invalid link model {self:?}")))
        }
    }

    pub fn base_propagation(&self, distance_km: f64) -> SimTime {
        SimTime::from_millis_f64(self.floor_ms + distance_km / self.km_per_ms)
    }
}

/// Relays, clients and servers of one simulated network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Topology {
    #[serde(default)]
    pub relays: Vec<RelayDescriptor>,
    #[serde(default)]
    pub clients: Vec<EndpointDescriptor>,
    #[serde(default)]
    pub servers: Vec<EndpointDescriptor>,
}

impl Topology {
    /// Ids must equal their index so lookups are positional.
    pub fn validate(&self) -> Result<(), TopologyError> {
        for (idx, relay) in self.relays.iter().enumerate() {
            relay.validate()?;
            if relay.relay_id as usize != idx {
                return Err(TopologyError::DuplicateId {
                    kind: "relay",
                    id: relay.relay_id,
                });
            }
        }
        for (kind, list, expected) in [
            ("client", &self.clients, EndpointKind::Client),
            ("server", &self.servers, EndpointKind::Server),
        ] {
            for (idx, ep) in list.iter().enumerate() {
                if ep.endpoint_id as usize != idx {
                    return Err(TopologyError::DuplicateId {
                        kind,
                        id: ep.endpoint_id,
                    });
                }
                if ep.kind != expected {
                    return Err(TopologyError::Invalid(format!(
                        "{kind} {} has kind {:?}",
                        ep.endpoint_id, ep.kind
                    )));
                }
                if !ep.position.is_valid() {
                    return Err(TopologyError::InvalidPosition {
                        what: format!("{kind} {}", ep.endpoint_id),
                        lat: ep.position.lat,
                        lon: ep.position.lon,
                    });
                }
                if ep.bandwidth == 0 {
                    return Err(TopologyError::Invalid(format!(
                        "{kind} {} has zero bandwidth",
                        ep.endpoint_id
                    )));
                }
            }
        }
        if self.clients.is_empty() || self.servers.is_empty() || self.relays.is_empty() {
            return Err(TopologyError::Invalid(
                "topology needs at least one relay, client and server".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Topology, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let topo: Topology = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        topo.validate()?;
        Ok(topo)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }
}

/// Picks one relay passing `eligible`, with probability proportional to
/// bandwidth.
fn weighted_pick<F>(relays: &[RelayDescriptor], rng: &mut RngStream, eligible: F) -> Option<RelayId>
where
    F: Fn(&RelayDescriptor) -> bool,
{
    let total: u64 = relays
        .iter()
        .filter(|r| eligible(r))
        .map(|r| u64::from(r.bandwidth))
        .sum();
    if total == 0 {
        return None;
    }
    let mut point = rng.random_range(0..total);
    for relay in relays.iter().filter(|r| eligible(r)) {
        let bw = u64::from(relay.bandwidth);
        if point < bw {
            return Some(relay.relay_id);
        }
        point -= bw;
    }
    unreachable!("point is below the eligible total")
}

/// Choose `(guard, middle, exit)`: exit first among exits allowing `port`,
/// then a guard, then a middle from the remaining relays. Every position is
/// bandwidth-weighted and the three relays are distinct.
pub fn select_path(
    consensus: &[RelayDescriptor],
    port: u16,
    rng: &mut RngStream,
) -> Result<[RelayId; 3], PathError> {
    let exit = weighted_pick(consensus, rng, |r| r.allows_port(port))
        .ok_or(PathError::NoExitForPort(port))?;
    let guard =
        weighted_pick(consensus, rng, |r| r.is_guard && r.relay_id != exit).ok_or(PathError::NoGuard)?;
    let middle = weighted_pick(consensus, rng, |r| r.relay_id != exit && r.relay_id != guard)
        .ok_or(PathError::NoMiddle)?;
    Ok([guard, middle, exit])
}

/// A host in the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeRef {
    Relay(u32),
    Client(u32),
    Server(u32),
}

/// Dense index into [`Network`] node storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeIdx(pub u32);

#[derive(Debug, Clone)]
struct NodeState {
    position: Position,
    bandwidth_kib: u64,
    busy_until: SimTime,
    online: bool,
    bytes_sent: u64,
}

/// Live network state: one FIFO transmit queue per node.
///
/// A transmission of `b` bytes from `a` to `b` starts when `a`'s queue
/// drains, occupies it for `b / bandwidth`, then propagates.
pub struct Network {
    link: LinkModel,
    nodes: Vec<NodeState>,
    client_base: u32,
    server_base: u32,
    rng: RngStream,
}

impl Network {
    pub fn new(topology: &Topology, link: LinkModel, rng: RngStream) -> Self {
        let mut nodes = Vec::with_capacity(
            topology.relays.len() + topology.clients.len() + topology.servers.len(),
        );
        let mk = |position: Position, bw: u32| NodeState {
            position,
            bandwidth_kib: u64::from(bw.max(1)),
            busy_until: SimTime::ZERO,
            online: true,
            bytes_sent: 0,
        };
        nodes.extend(topology.relays.iter().map(|r| mk(r.position, r.bandwidth)));
        let client_base = nodes.len() as u32;
        nodes.extend(topology.clients.iter().map(|c| mk(c.position, c.bandwidth)));
        let server_base = nodes.len() as u32;
        nodes.extend(topology.servers.iter().map(|s| mk(s.position, s.bandwidth)));
        Network {
            link,
            nodes,
            client_base,
            server_base,
            rng,
        }
    }

    pub fn link(&self) -> &LinkModel {
        &self.link
    }

    pub fn idx(&self, node: NodeRef) -> NodeIdx {
        NodeIdx(match node {
            NodeRef::Relay(id) => id,
            NodeRef::Client(id) => self.client_base + id,
            NodeRef::Server(id) => self.server_base + id,
        })
    }

    pub fn position(&self, node: NodeIdx) -> Position {
        self.nodes[node.0 as usize].position
    }

    pub fn set_online(&mut self, node: NodeRef, online: bool) {
        let idx = self.idx(node).0 as usize;
        self.nodes[idx].online = online;
    }

    pub fn is_online(&self, node: NodeIdx) -> bool {
        self.nodes[node.0 as usize].online
    }

    pub fn bytes_sent(&self, node: NodeRef) -> u64 {
        self.nodes[self.idx(node).0 as usize].bytes_sent
    }

    /// Distance-derived propagation plus the per-hop floor.
    pub fn propagation(&self, a: NodeIdx, b: NodeIdx) -> SimTime {
        let d = great_circle_km(self.position(a), self.position(b));
        self.link.base_propagation(d)
    }

    /// Work queued at `node` that a new transmission would wait behind.
    pub fn backlog(&self, node: NodeIdx, now: SimTime) -> SimTime {
        self.nodes[node.0 as usize].busy_until.saturating_sub(now)
    }

    fn jitter(&mut self) -> SimTime {
        if self.link.jitter_ms > 0.0 {
            SimTime::from_millis_f64(self.rng.random_range(0.0..=self.link.jitter_ms))
        } else {
            SimTime::ZERO
        }
    }

    /// Latency a single cell sent now from `a` would see before arriving at
    /// `b`, excluding its own serialization time. Does not occupy the queue.
    pub fn one_way_latency(&mut self, a: NodeIdx, b: NodeIdx, now: SimTime) -> SimTime {
        self.propagation(a, b) + self.jitter() + self.backlog(a, now)
    }

    fn service_time(&self, node: NodeIdx, bytes: u64) -> SimTime {
        let bw = self.nodes[node.0 as usize].bandwidth_kib;
        SimTime::from_micros(bytes * 1_000_000 / (bw * 1024))
    }

    /// Send `cells` cells from `a` to `b`, occupying `a`'s queue. Returns the
    /// arrival time at `b`, or `None` if either end is offline.
    pub fn transmit(&mut self, a: NodeIdx, b: NodeIdx, cells: u32, now: SimTime) -> Option<SimTime> {
        if !self.is_online(a) || !self.is_online(b) {
            return None;
        }
        let bytes = u64::from(cells) * u64::from(self.link.cell_size);
        let service = self.service_time(a, bytes);
        let node = &mut self.nodes[a.0 as usize];
        let start = node.busy_until.max(now);
        let done = start + service;
        node.busy_until = done;
        node.bytes_sent += bytes;
        let prop = self.propagation(a, b);
        let mut arrival = done + prop + self.jitter();
        if self.link.packet_loss > 0.0 {
            // P(at least one of `cells` independent cells is lost).
            let p_any = 1.0 - (1.0 - self.link.packet_loss).powi(cells as i32);
            if self.rng.random_bool(p_any) {
                arrival += prop.mul_f64(2.0 * self.link.retransmit_factor);
            }
        }
        Some(arrival)
    }
}

/// A region that hosts draw their positions from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub name: String,
    pub lat: f64,
    pub lon: f64,
    pub lat_spread: f64,
    pub lon_spread: f64,
    pub client_weight: f64,
    pub relay_weight: f64,
    pub server_weight: f64,
}

impl Region {
    fn sample(&self, rng: &mut RngStream) -> Position {
        let lat = (self.lat + rng.random_range(-self.lat_spread..=self.lat_spread)).clamp(-89.0, 89.0);
        let mut lon = self.lon + rng.random_range(-self.lon_spread..=self.lon_spread);
        if lon > 180.0 {
            lon -= 360.0;
        } else if lon < -180.0 {
            lon += 360.0;
        }
        Position::new(lat, lon)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandwidthDist {
    pub median_kib: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptionalPort {
    pub port: u16,
    pub probability: f64,
}

/// Parameters for synthesizing a [`Topology`] from a seed.
///
/// Relay bandwidths are log-normal per role; this is a stand-in for
/// measured relay capacities, not ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub exit_relays: u32,
    pub exit_guard_relays: u32,
    pub guard_relays: u32,
    pub middle_relays: u32,
    pub servers: u32,
    pub exit_bandwidth: BandwidthDist,
    pub guard_bandwidth: BandwidthDist,
    pub middle_bandwidth: BandwidthDist,
    pub min_relay_bandwidth: u32,
    pub client_bandwidth: u32,
    pub server_bandwidth: u32,
    pub exit_ports: Vec<u16>,
    pub optional_exit_ports: Vec<OptionalPort>,
    pub regions: Vec<Region>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            exit_relays: 8,
            exit_guard_relays: 2,
            guard_relays: 10,
            middle_relays: 24,
            servers: 44,
            exit_bandwidth: BandwidthDist {
                median_kib: 4608.0,
                sigma: 1.1,
            },
            guard_bandwidth: BandwidthDist {
                median_kib: 3072.0,
                sigma: 1.1,
            },
            middle_bandwidth: BandwidthDist {
                median_kib: 1536.0,
                sigma: 1.4,
            },
            min_relay_bandwidth: 64,
            client_bandwidth: 2048,
            server_bandwidth: 10240,
            exit_ports: vec![80, 443],
            optional_exit_ports: vec![
                OptionalPort {
                    port: 22,
                    probability: 0.5,
                },
                OptionalPort {
                    port: 6667,
                    probability: 0.3,
                },
            ],
            regions: default_regions(),
        }
    }
}

pub fn default_regions() -> Vec<Region> {
    let r = |name: &str, lat, lon, lat_spread, lon_spread, c, rl, s| Region {
        name: name.to_owned(),
        lat,
        lon,
        lat_spread,
        lon_spread,
        client_weight: c,
        relay_weight: rl,
        server_weight: s,
    };
    vec![
        r("north_america", 40.0, -95.0, 8.0, 22.0, 0.22, 0.25, 0.45),
        r("europe", 49.0, 8.0, 6.0, 12.0, 0.45, 0.60, 0.30),
        r("eastern_europe", 55.0, 37.0, 5.0, 12.0, 0.12, 0.06, 0.05),
        r("east_asia", 32.0, 118.0, 8.0, 15.0, 0.12, 0.05, 0.15),
        r("south_america", -15.0, -55.0, 10.0, 10.0, 0.05, 0.02, 0.03),
        r("oceania", -30.0, 145.0, 6.0, 10.0, 0.04, 0.02, 0.02),
    ]
}

fn pick_region<'a>(regions: &'a [Region], weight: impl Fn(&Region) -> f64, rng: &mut RngStream) -> &'a Region {
    let total: f64 = regions.iter().map(&weight).sum();
    let mut point = rng.random_range(0.0..total);
    for region in regions {
        let w = weight(region);
        if point < w {
            return region;
        }
        point -= w;
    }
    regions.last().expect("non-empty regions")
}

impl GeneratorConfig {
    pub fn total_relays(&self) -> u32 {
        self.exit_relays + self.exit_guard_relays + self.guard_relays + self.middle_relays
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        if self.exit_relays + self.exit_guard_relays == 0 {
            return Err(TopologyError::Invalid("generator needs at least one exit".into()));
        }
        if self.guard_relays + self.exit_guard_relays == 0 {
            return Err(TopologyError::Invalid("generator needs at least one guard".into()));
        }
        if self.total_relays() < 3 || self.servers == 0 {
            return Err(TopologyError::Invalid(
                "generator needs at least three relays and one server".into(),
            ));
        }
        if self.exit_ports.is_empty() {
            return Err(TopologyError::Invalid("exit_ports must not be empty".into()));
        }
        if self.regions.is_empty() {
            return Err(TopologyError::Invalid("at least one region is required".into()));
        }
        for dist in [&self.exit_bandwidth, &self.guard_bandwidth, &self.middle_bandwidth] {
            if !(dist.median_kib > 0.0 && dist.sigma >= 0.0) {
                return Err(TopologyError::Invalid(format!("bad bandwidth distribution {dist:?}")));
            }
        }
        for (what, w) in [
            ("client", self.regions.iter().map(|r| r.client_weight).sum::<f64>()),
            ("relay", self.regions.iter().map(|r| r.relay_weight).sum()),
            ("server", self.regions.iter().map(|r| r.server_weight).sum()),
        ] {
            if !(w > 0.0) {
                return Err(TopologyError::Invalid(format!("{what} region weights sum to zero")));
            }
        }
        Ok(())
    }

    pub fn generate(&self, clients: u32, rng: &mut RngStream) -> Result<Topology, TopologyError> {
        self.validate()?;
        let mut relays = Vec::with_capacity(self.total_relays() as usize);
        let roles = std::iter::repeat_n((true, false), self.exit_relays as usize)
            .chain(std::iter::repeat_n((true, true), self.exit_guard_relays as usize))
            .chain(std::iter::repeat_n((false, true), self.guard_relays as usize))
            .chain(std::iter::repeat_n((false, false), self.middle_relays as usize));
        for (idx, (is_exit, is_guard)) in roles.enumerate() {
            let dist = if is_exit {
                &self.exit_bandwidth
            } else if is_guard {
                &self.guard_bandwidth
            } else {
                &self.middle_bandwidth
            };
            let lognormal = LogNormal::new(dist.median_kib.ln(), dist.sigma)
                .map_err(|e| TopologyError::Invalid(e.to_string()))?;
            let bandwidth = (lognormal.sample(rng).round() as u32).max(self.min_relay_bandwidth.max(1));
            let position = pick_region(&self.regions, |r| r.relay_weight, rng).sample(rng);
            let mut exit_policy = BTreeSet::new();
            if is_exit {
                exit_policy.extend(self.exit_ports.iter().copied());
                for opt in &self.optional_exit_ports {
                    if rng.random_bool(opt.probability.clamp(0.0, 1.0)) {
                        exit_policy.insert(opt.port);
                    }
                }
            }
            relays.push(RelayDescriptor {
                relay_id: idx as u32,
                bandwidth,
                is_guard,
                is_exit,
                position,
                exit_policy,
                is_malicious: false,
            });
        }
        let endpoints = |n: u32, kind, bw, weight: fn(&Region) -> f64, rng: &mut RngStream| {
            (0..n)
                .map(|id| EndpointDescriptor {
                    endpoint_id: id,
                    kind,
                    position: pick_region(&self.regions, weight, rng).sample(rng),
                    bandwidth: bw,
                })
                .collect::<Vec<_>>()
        };
        let clients = endpoints(
            clients,
            EndpointKind::Client,
            self.client_bandwidth,
            |r| r.client_weight,
            rng,
        );
        let servers = endpoints(
            self.servers,
            EndpointKind::Server,
            self.server_bandwidth,
            |r| r.server_weight,
            rng,
        );
        let topology = Topology {
            relays,
            clients,
            servers,
        };
        topology.validate()?;
        Ok(topology)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn relay(id: u32, bw: u32, guard: bool, exit: bool, ports: &[u16]) -> RelayDescriptor {
        RelayDescriptor {
            relay_id: id,
            bandwidth: bw,
            is_guard: guard,
            is_exit: exit,
            position: Position::new(0.0, 0.0),
            exit_policy: ports.iter().copied().collect(),
            is_malicious: false,
        }
    }

    /// Independent haversine written in the atan2 form.
    fn haversine_oracle(a: Position, b: Position) -> f64 {
        let r = 6371.0_f64;
        let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
        let dla = la2 - la1;
        let dlo = (b.lon - a.lon).to_radians();
        let s = (dla / 2.0).sin() * (dla / 2.0).sin()
            + la1.cos() * la2.cos() * (dlo / 2.0).sin() * (dlo / 2.0).sin();
        2.0 * r * s.sqrt().atan2((1.0 - s).sqrt())
    }

    #[test]
    fn great_circle_identity_and_antipode() {
        let p = Position::new(12.5, -77.0);
        assert_eq!(great_circle_km(p, p), 0.0);
        let half = great_circle_km(Position::new(0.0, 0.0), Position::new(0.0, 180.0));
        // pi * 6371
        assert!((half - 20015.086796).abs() < 1e-3, "{half}");
    }

    #[test]
    fn great_circle_symmetric_and_matches_oracle() {
        let mut rng = RngStream::new(1, "geo-test");
        for _ in 0..1000 {
            let a = Position::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
            let b = Position::new(rng.random_range(-90.0..=90.0), rng.random_range(-180.0..=180.0));
            let d = great_circle_km(a, b);
            assert_eq!(d, great_circle_km(b, a));
            assert!(d >= 0.0);
            assert!((d - haversine_oracle(a, b)).abs() < 1e-6);
        }
    }

    #[test]
    fn bandwidth_proportional_exit_choice() {
        let consensus = vec![
            relay(0, 100, false, true, &[80]),
            relay(1, 300, false, true, &[80]),
            relay(2, 100, true, false, &[]),
            relay(3, 100, false, false, &[]),
        ];
        let mut rng = RngStream::new(3, "path-test");
        let draws = 100_000;
        let hits = (0..draws)
            .filter(|_| select_path(&consensus, 80, &mut rng).unwrap()[2] == 1)
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 0.75).abs() < 0.02, "{freq}");
    }

    #[test]
    fn single_eligible_relay_per_position() {
        let consensus = vec![
            relay(0, 10, false, true, &[80]),
            relay(1, 10, true, false, &[]),
            relay(2, 10, false, false, &[]),
        ];
        let mut rng = RngStream::new(4, "path-test");
        for _ in 0..100 {
            assert_eq!(select_path(&consensus, 80, &mut rng).unwrap(), [1, 2, 0]);
        }
    }

    #[test]
    fn no_exit_for_port_fails() {
        let consensus = vec![
            relay(0, 10, false, true, &[80, 443]),
            relay(1, 10, true, false, &[]),
            relay(2, 10, false, false, &[]),
        ];
        let mut rng = RngStream::new(5, "path-test");
        assert_eq!(
            select_path(&consensus, 9999, &mut rng),
            Err(PathError::NoExitForPort(9999))
        );
    }

    #[test]
    fn generated_paths_are_distinct_and_frequencies_converge() {
        let topo = GeneratorConfig::default()
            .generate(10, &mut RngStream::new(9, "topology"))
            .unwrap();
        let mut rng = RngStream::new(9, "path-test");
        let exits: Vec<&RelayDescriptor> = topo.relays.iter().filter(|r| r.allows_port(80)).collect();
        let total: f64 = exits.iter().map(|r| f64::from(r.bandwidth)).sum();
        let mut counts = vec![0u32; topo.relays.len()];
        let draws = 50_000;
        for _ in 0..draws {
            let [g, m, e] = select_path(&topo.relays, 80, &mut rng).unwrap();
            assert!(g != m && m != e && g != e);
            assert!(topo.relays[g as usize].is_guard);
            counts[e as usize] += 1;
        }
        // Pearson chi-square against bandwidth shares.
        let chi2: f64 = exits
            .iter()
            .map(|r| {
                let expected = draws as f64 * f64::from(r.bandwidth) / total;
                let obs = f64::from(counts[r.relay_id as usize]);
                (obs - expected).powi(2) / expected
            })
            .sum();
        // 9 degrees of freedom; 99.9th percentile is 27.9.
        assert!(chi2 < 27.9, "chi2 = {chi2}");
    }

    fn line_topology() -> Topology {
        let mk = |id, kind, lon| EndpointDescriptor {
            endpoint_id: id,
            kind,
            position: Position::new(0.0, lon),
            bandwidth: 1000,
        };
        Topology {
            relays: vec![relay(0, 1000, false, true, &[80]), relay(1, 1000, true, false, &[])],
            clients: vec![mk(0, EndpointKind::Client, 0.0)],
            servers: vec![mk(0, EndpointKind::Server, 0.0)],
        }
    }

    #[test]
    fn degenerate_link_latency_is_the_floor() {
        let link = LinkModel {
            jitter_ms: 0.0,
            packet_loss: 0.0,
            ..LinkModel::default()
        };
        let topo = line_topology();
        let mut net = Network::new(&topo, link, RngStream::new(1, "network"));
        let (a, b) = (net.idx(NodeRef::Client(0)), net.idx(NodeRef::Server(0)));
        assert_eq!(net.one_way_latency(a, b, SimTime::ZERO), SimTime::from_millis(2));
    }

    #[test]
    fn busy_queue_adds_latency() {
        let mut net = Network::new(&line_topology(), LinkModel::default(), RngStream::new(1, "network"));
        let (a, b) = (net.idx(NodeRef::Relay(0)), net.idx(NodeRef::Relay(1)));
        let idle = net.propagation(a, b);
        net.transmit(a, b, 500, SimTime::ZERO).unwrap();
        let busy = net.one_way_latency(a, b, SimTime::ZERO);
        assert!(busy > idle + SimTime::from_millis(1));
        assert!(net.one_way_latency(a, b, SimTime::ZERO) >= idle);
    }

    #[test]
    fn latency_samples_reproducible() {
        let topo = GeneratorConfig::default()
            .generate(5, &mut RngStream::new(2, "topology"))
            .unwrap();
        let sample = || {
            let mut net = Network::new(&topo, LinkModel::default(), RngStream::new(2, "network"));
            (0..50u32)
                .map(|i| {
                    let a = NodeIdx(i % 44);
                    let b = NodeIdx((i * 7 + 3) % 44);
                    net.transmit(a, b, 1 + i % 5, SimTime::from_millis(u64::from(i)))
                        .unwrap()
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(sample(), sample());
    }

    #[test]
    fn offline_node_drops_traffic() {
        let mut net = Network::new(&line_topology(), LinkModel::default(), RngStream::new(1, "network"));
        net.set_online(NodeRef::Relay(1), false);
        let (a, b) = (net.idx(NodeRef::Relay(0)), net.idx(NodeRef::Relay(1)));
        assert!(net.transmit(a, b, 1, SimTime::ZERO).is_none());
    }

    #[test]
    fn topology_validation() {
        let mut topo = line_topology();
        topo.validate().unwrap();
        topo.relays[0].exit_policy.clear();
        assert!(matches!(topo.validate(), Err(TopologyError::EmptyExitPolicy(0))));
        let mut topo = line_topology();
        topo.relays[1].bandwidth = 0;
        assert!(matches!(topo.validate(), Err(TopologyError::ZeroBandwidth(1))));
    }

    #[test]
    fn topology_toml_roundtrip() {
        let topo = GeneratorConfig::default()
            .generate(20, &mut RngStream::new(11, "topology"))
            .unwrap();
        let back: Topology = toml::from_str(&topo.to_toml()).unwrap();
        assert_eq!(back, topo);
    }
}

#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn consensus() -> impl Strategy<Value = Vec<RelayDescriptor>> {
        prop::collection::vec((1u32..5000, any::<bool>(), any::<bool>()), 3..20).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (bw, guard, exit))| RelayDescriptor {
                    relay_id: i as u32,
                    bandwidth: bw,
                    is_guard: guard,
                    is_exit: exit,
                    position: Position::new(0.0, i as f64),
                    exit_policy: if exit { [80].into() } else { BTreeSet::new() },
                    is_malicious: false,
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn paths_are_distinct_and_eligible(relays in consensus(), seed in 0u64..500) {
            let mut rng = RngStream::new(seed, "prop-path");
            for _ in 0..20 {
                match select_path(&relays, 80, &mut rng) {
                    Ok([g, m, e]) => {
                        prop_assert!(g != m && m != e && g != e);
                        prop_assert!(relays[g as usize].is_guard);
                        prop_assert!(relays[e as usize].allows_port(80));
                    }
                    Err(PathError::NoExitForPort(_)) => {
                        prop_assert!(!relays.iter().any(|r| r.allows_port(80)));
                        break;
                    }
                    Err(_) => break,
                }
            }
        }
    }
}
