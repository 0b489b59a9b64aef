//! Offline compromise analysis over stream records.
//!
//! Two observer models: a relay-level adversary that runs a bandwidth share
//! of guards and exits, and network-level observers on AS paths. Both are
//! positional: a stream counts as compromised when the same adversary sits
//! on both the entry side and the exit side of its circuit.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AnalysisError, ConfigError};
use crate::network::{RelayDescriptor, RelayId, Topology};
use crate::sim::RngStream;
use crate::workload::{DistSummary, FiveNumber, StreamRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdversaryConfig {
    pub guard_bandwidth_fraction: f64,
    pub exit_bandwidth_fraction: f64,
    pub runs: u32,
    pub seed: u64,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        AdversaryConfig {
            guard_bandwidth_fraction: 0.10,
            exit_bandwidth_fraction: 0.10,
            runs: 10,
            seed: 0,
        }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        for (name, f) in [
            ("guard_bandwidth_fraction", self.guard_bandwidth_fraction),
            ("exit_bandwidth_fraction", self.exit_bandwidth_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(AnalysisError::InvalidConfig(format!("{name} = {f} is outside [0, 1]")));
            }
        }
        if self.runs == 0 {
            return Err(AnalysisError::InvalidConfig("runs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Relays controlled by the adversary in one marking run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MarkedRelays {
    pub guards: BTreeSet<RelayId>,
    pub exits: BTreeSet<RelayId>,
    /// Marked share of total guard bandwidth.
    pub guard_share: f64,
    /// Marked share of total exit bandwidth.
    pub exit_share: f64,
}

impl MarkedRelays {
    pub fn is_marked(&self, relay: RelayId) -> bool {
        self.guards.contains(&relay) || self.exits.contains(&relay)
    }

    /// Copy of `relays` with `is_malicious` set on the marked ones.
    pub fn apply(&self, relays: &[RelayDescriptor]) -> Vec<RelayDescriptor> {
        relays
            .iter()
            .map(|r| RelayDescriptor {
                is_malicious: self.is_marked(r.relay_id),
                ..r.clone()
            })
            .collect()
    }
}

/// Draw relays uniformly without replacement from `pool` until the marked
/// bandwidth first reaches `fraction` of the pool total.
fn mark_pool(pool: &[&RelayDescriptor], fraction: f64, rng: &mut RngStream, what: &str) -> (BTreeSet<RelayId>, f64) {
    let total: u64 = pool.iter().map(|r| u64::from(r.bandwidth)).sum();
    let mut marked = BTreeSet::new();
    if fraction <= 0.0 || total == 0 {
        return (marked, 0.0);
    }
    let target = fraction * total as f64;
    // Float slack so that e.g. 0.1 of ten equal shares stops after one.
    let slack = 1e-9 * total as f64;
    let mut remaining: Vec<&RelayDescriptor> = pool.to_vec();
    let mut acc = 0u64;
    while (acc as f64) < target - slack && !remaining.is_empty() {
        let pick = remaining.swap_remove(rng.random_range(0..remaining.len()));
        acc += u64::from(pick.bandwidth);
        marked.insert(pick.relay_id);
        // swap_remove perturbs order; restore id order so draws depend only
        // on the RNG stream.
        remaining.sort_by_key(|r| r.relay_id);
    }
    let share = acc as f64 / total as f64;
    if share > fraction + 1e-9 {
        log::info!("{what} marking overshoot: target {fraction:.4}, marked {share:.4}");
    }
    (marked, share)
}

/// Mark guards first, then exits. An exit-guard relay drawn into the guard
/// set is not eligible for the exit draw and counts only toward the guard
/// share.
pub fn mark_malicious(
    relays: &[RelayDescriptor],
    config: &AdversaryConfig,
    rng: &mut RngStream,
) -> Result<MarkedRelays, AnalysisError> {
    config.validate()?;
    let mut guards: Vec<&RelayDescriptor> = relays.iter().filter(|r| r.is_guard).collect();
    let exits_all: Vec<&RelayDescriptor> = relays.iter().filter(|r| r.is_exit).collect();
    if guards.iter().map(|r| r.bandwidth as u64).sum::<u64>() == 0
        || exits_all.iter().map(|r| r.bandwidth as u64).sum::<u64>() == 0
    {
        return Err(AnalysisError::InvalidConfig(
            "marking needs positive guard and exit bandwidth".into(),
        ));
    }
    guards.sort_by_key(|r| r.relay_id);
    let (g, guard_share) = mark_pool(&guards, config.guard_bandwidth_fraction, rng, "guard");
    let mut exits: Vec<&RelayDescriptor> = exits_all.into_iter().filter(|r| !g.contains(&r.relay_id)).collect();
    exits.sort_by_key(|r| r.relay_id);
    let total_exit: u64 = relays.iter().filter(|r| r.is_exit).map(|r| r.bandwidth as u64).sum();
    let eligible_exit: u64 = exits.iter().map(|r| r.bandwidth as u64).sum();
    // The exit target is a share of all exit bandwidth even when some of it
    // was taken by the guard draw.
    let fraction = if eligible_exit == 0 {
        0.0
    } else {
        (config.exit_bandwidth_fraction * total_exit as f64 / eligible_exit as f64).min(1.0)
    };
    let (e, _) = mark_pool(&exits, fraction, rng, "exit");
    let exit_share = exits
        .iter()
        .filter(|r| e.contains(&r.relay_id))
        .map(|r| r.bandwidth as u64)
        .sum::<u64>() as f64
        / total_exit as f64;
    Ok(MarkedRelays {
        guards: g,
        exits: e,
        guard_share,
        exit_share,
    })
}

/// Compromised-stream counts for one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientRate {
    pub client_id: u32,
    pub streams: u64,
    pub compromised: u64,
}

impl ClientRate {
    pub fn rate(&self) -> f64 {
        if self.streams == 0 {
            0.0
        } else {
            self.compromised as f64 / self.streams as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompromiseResult {
    pub per_client: Vec<ClientRate>,
}

impl CompromiseResult {
    fn from_flags(flags: impl Iterator<Item = (u32, bool)>) -> Self {
        let mut map: BTreeMap<u32, ClientRate> = BTreeMap::new();
        for (client, hit) in flags {
            let e = map.entry(client).or_insert(ClientRate {
                client_id: client,
                streams: 0,
                compromised: 0,
            });
            e.streams += 1;
            e.compromised += u64::from(hit);
        }
        CompromiseResult {
            per_client: map.into_values().collect(),
        }
    }

    pub fn total_streams(&self) -> u64 {
        self.per_client.iter().map(|c| c.streams).sum()
    }

    pub fn compromised_streams(&self) -> u64 {
        self.per_client.iter().map(|c| c.compromised).sum()
    }

    /// Pooled fraction over all streams.
    pub fn overall_rate(&self) -> f64 {
        let n = self.total_streams();
        if n == 0 {
            0.0
        } else {
            self.compromised_streams() as f64 / n as f64
        }
    }

    pub fn client_rates(&self) -> Vec<f64> {
        self.per_client.iter().map(ClientRate::rate).collect()
    }

    pub fn box_stats(&self) -> Option<FiveNumber> {
        FiveNumber::of(&self.client_rates())
    }

    pub fn distribution(&self) -> Option<DistSummary> {
        DistSummary::of(&self.client_rates())
    }

    pub fn median_client_rate(&self) -> f64 {
        self.box_stats().map_or(0.0, |b| b.median)
    }
}

/// Streams that were attached to a circuit.
fn attached(streams: &[StreamRecord]) -> impl Iterator<Item = (&StreamRecord, [RelayId; 3])> {
    streams.iter().filter_map(|s| s.path.map(|p| (s, p)))
}

/// A stream is compromised when both its guard and its exit are marked.
pub fn relay_compromise_rate(streams: &[StreamRecord], marked: &MarkedRelays) -> CompromiseResult {
    CompromiseResult::from_flags(
        attached(streams).map(|(s, [g, _, e])| (s.client_id, marked.is_marked(g) && marked.is_marked(e))),
    )
}

/// One marking run of the relay-level analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct RelayRun {
    pub run: u32,
    pub marked: MarkedRelays,
    pub result: CompromiseResult,
}

/// Repeat marking `config.runs` times with independent RNG streams.
pub fn relay_compromise_runs(
    streams: &[StreamRecord],
    relays: &[RelayDescriptor],
    config: &AdversaryConfig,
) -> Result<Vec<RelayRun>, AnalysisError> {
    config.validate()?;
    (0..config.runs)
        .map(|run| {
            let mut rng = RngStream::new(config.seed, &format!("marking/{run}"));
            let marked = mark_malicious(relays, config, &mut rng)?;
            let result = relay_compromise_rate(streams, &marked);
            Ok(RelayRun { run, marked, result })
        })
        .collect()
}

pub type AsId = u32;

/// A simulated host as named in AS host maps: `client:3`, `relay:10`, `server:0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Host {
    Client(u32),
    Relay(u32),
    Server(u32),
}

impl fmt::Display for Host {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Host::Client(i) => write!(f, "client:{i}"),
            Host::Relay(i) => write!(f, "relay:{i}"),
            Host::Server(i) => write!(f, "server:{i}"),
        }
    }
}

impl FromStr for Host {
    type Err = AnalysisError;

    fn from_str(s: &str) -> Result<Self, AnalysisError> {
        let bad = || AnalysisError::Malformed(format!("host key {s:?}; expected client:N, relay:N or server:N"));
        let (kind, id) = s.split_once(':').ok_or_else(bad)?;
        let id: u32 = id.parse().map_err(|_| bad())?;
        match kind {
            "client" => Ok(Host::Client(id)),
            "relay" => Ok(Host::Relay(id)),
            "server" => Ok(Host::Server(id)),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoutingMode {
    /// Every edge costs `weight` in both directions.
    Symmetric,
    /// `a -> b` costs `weight`, `b -> a` costs `reverse_weight`.
    Asymmetric,
    /// Asymmetric costs, restricted to valley-free paths.
    ValleyFree,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relationship {
    /// `a` is a customer of `b`.
    CustomerToProvider,
    Peer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsEdge {
    pub a: AsId,
    pub b: AsId,
    pub weight: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverse_weight: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relationship: Option<Relationship>,
}

/// AS graph plus the host-to-AS map, as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsTopologyFile {
    pub mode: RoutingMode,
    #[serde(default)]
    pub edges: Vec<AsEdge>,
    #[serde(default)]
    pub hosts: BTreeMap<String, AsId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Step {
    Up,
    Across,
    Down,
}

/// Routing oracle over an AS graph.
///
/// Among minimum-cost paths, ties resolve to the lexicographically smallest
/// AS sequence as read from the endpoint with the smaller AS id. With
/// symmetric costs this makes the `b -> a` path the exact reverse of the
/// `a -> b` path.
#[derive(Debug, Clone)]
pub struct AsTopology {
    mode: RoutingMode,
    ids: Vec<AsId>,
    index: BTreeMap<AsId, usize>,
    /// `out[u]` sorted by target index.
    out: Vec<Vec<(usize, u64, Step)>>,
    hosts: BTreeMap<Host, AsId>,
    file: AsTopologyFile,
}

impl AsTopology {
    pub fn new(file: AsTopologyFile) -> Result<Self, AnalysisError> {
        let mut ids: BTreeSet<AsId> = BTreeSet::new();
        for e in &file.edges {
            ids.insert(e.a);
            ids.insert(e.b);
        }
        ids.extend(file.hosts.values().copied());
        let ids: Vec<AsId> = ids.into_iter().collect();
        let index: BTreeMap<AsId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut out: Vec<Vec<(usize, u64, Step)>> = vec![Vec::new(); ids.len()];
        let mut seen = BTreeSet::new();
        for e in &file.edges {
            if e.a == e.b {
                return Err(AnalysisError::Malformed(format!("self-loop on AS {}", e.a)));
            }
            if !seen.insert((e.a.min(e.b), e.a.max(e.b))) {
                return Err(AnalysisError::Malformed(format!("duplicate edge {}-{}", e.a, e.b)));
            }
            let back = match file.mode {
                RoutingMode::Symmetric => e.weight,
                _ => e.reverse_weight.unwrap_or(e.weight),
            };
            if e.weight == 0 || back == 0 {
                return Err(AnalysisError::Malformed(format!("edge {}-{} has zero weight", e.a, e.b)));
            }
            let (fwd, rev) = match (file.mode, e.relationship) {
                (RoutingMode::ValleyFree, None) => {
                    return Err(AnalysisError::Malformed(format!(
                        "edge {}-{} needs a relationship in valley_free mode",
                        e.a, e.b
                    )))
                }
                (_, Some(Relationship::CustomerToProvider)) => (Step::Up, Step::Down),
                _ => (Step::Across, Step::Across),
            };
            let (ia, ib) = (index[&e.a], index[&e.b]);
            out[ia].push((ib, e.weight, fwd));
            out[ib].push((ia, back, rev));
        }
        for adj in &mut out {
            adj.sort_by_key(|&(v, _, _)| v);
        }
        let mut hosts = BTreeMap::new();
        for (key, &asn) in &file.hosts {
            hosts.insert(key.parse::<Host>()?, asn);
        }
        Ok(AsTopology {
            mode: file.mode,
            ids,
            index,
            out,
            hosts,
            file,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let file: AsTopologyFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        AsTopology::new(file).map_err(|e| ConfigError::Parse {
            path: path.to_owned(),
            message: e.to_string(),
        })
    }

    pub fn file(&self) -> &AsTopologyFile {
        &self.file
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.file).expect("AS topology serializes")
    }

    pub fn mode(&self) -> RoutingMode {
        self.mode
    }

    pub fn as_ids(&self) -> &[AsId] {
        &self.ids
    }

    pub fn host_as(&self, host: Host) -> Result<AsId, AnalysisError> {
        self.hosts
            .get(&host)
            .copied()
            .ok_or_else(|| AnalysisError::UnmappedHost(host.to_string()))
    }

    /// Valley-free paths use two phases: 0 while climbing, 1 once the path
    /// has crossed a peer link or started descending.
    fn phases(&self) -> usize {
        if self.mode == RoutingMode::ValleyFree {
            2
        } else {
            1
        }
    }

    fn next_phase(&self, phase: usize, step: Step) -> Option<usize> {
        if self.mode != RoutingMode::ValleyFree {
            return Some(0);
        }
        match (phase, step) {
            (0, Step::Up) => Some(0),
            (0, _) => Some(1),
            (1, Step::Down) => Some(1),
            _ => None,
        }
    }

    fn state_edges(&self) -> (Vec<Vec<(usize, u64)>>, Vec<Vec<(usize, u64)>>) {
        let p = self.phases();
        let n = self.ids.len() * p;
        let mut fwd = vec![Vec::new(); n];
        let mut rev = vec![Vec::new(); n];
        for u in 0..self.ids.len() {
            for phase in 0..p {
                for &(v, w, step) in &self.out[u] {
                    if let Some(q) = self.next_phase(phase, step) {
                        let (s, t) = (u * p + phase, v * p + q);
                        fwd[s].push((t, w));
                        rev[t].push((s, w));
                    }
                }
            }
        }
        (fwd, rev)
    }

    fn dijkstra(adj: &[Vec<(usize, u64)>], sources: &[usize]) -> Vec<u64> {
        let mut dist = vec![u64::MAX; adj.len()];
        let mut heap = BinaryHeap::new();
        for &s in sources {
            dist[s] = 0;
            heap.push(Reverse((0u64, s)));
        }
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &adj[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        dist
    }

    /// Lexicographically smallest AS sequence over tight edges, starting
    /// from `start` states and following `adj` until `dist` reaches zero.
    fn tight_walk(&self, adj: &[Vec<(usize, u64)>], dist: &[u64], start: Vec<usize>) -> Vec<usize> {
        let p = self.phases();
        let mut frontier = start;
        let mut seq = vec![frontier[0] / p];
        while !frontier.iter().any(|&x| dist[x] == 0) {
            let mut best: Option<usize> = None;
            let mut next: BTreeSet<usize> = BTreeSet::new();
            for &x in &frontier {
                for &(y, w) in &adj[x] {
                    if dist[y] != u64::MAX && dist[y] + w == dist[x] {
                        let a = y / p;
                        match best {
                            Some(b) if a > b => {}
                            Some(b) if a == b => {
                                next.insert(y);
                            }
                            _ => {
                                best = Some(a);
                                next.clear();
                                next.insert(y);
                            }
                        }
                    }
                }
            }
            let a = best.expect("tight edge exists on a finite-distance state");
            seq.push(a);
            frontier = next.into_iter().collect();
        }
        seq
    }

    /// AS path from `from` to `to` (inclusive), by AS id.
    pub fn route(&self, from: AsId, to: AsId) -> Result<Vec<AsId>, AnalysisError> {
        let s = *self.index.get(&from).ok_or(AnalysisError::UnknownAs(from))?;
        let t = *self.index.get(&to).ok_or(AnalysisError::UnknownAs(to))?;
        if s == t {
            return Ok(vec![from]);
        }
        let p = self.phases();
        let (fwd, rev) = self.state_edges();
        let no_route = AnalysisError::NoRoute { from, to };
        let idx_path = if from < to {
            let targets: Vec<usize> = (0..p).map(|q| t * p + q).collect();
            let dist = Self::dijkstra(&rev, &targets);
            if dist[s * p] == u64::MAX {
                return Err(no_route);
            }
            self.tight_walk(&fwd, &dist, vec![s * p])
        } else {
            let dist = Self::dijkstra(&fwd, &[s * p]);
            let best = (0..p).map(|q| dist[t * p + q]).min().unwrap_or(u64::MAX);
            if best == u64::MAX {
                return Err(no_route);
            }
            let ends: Vec<usize> = (0..p).map(|q| t * p + q).filter(|&x| dist[x] == best).collect();
            let mut back = self.tight_walk(&rev, &dist, ends);
            back.reverse();
            back
        };
        Ok(idx_path.into_iter().map(|i| self.ids[i]).collect())
    }

    /// AS path between two hosts; `Reverse` gives the `b -> a` direction.
    pub fn as_path(&self, a: Host, b: Host, direction: Direction) -> Result<Vec<AsId>, AnalysisError> {
        let (x, y) = (self.host_as(a)?, self.host_as(b)?);
        match direction {
            Direction::Forward => self.route(x, y),
            Direction::Reverse => self.route(y, x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Memoized route lookups for one topology.
pub struct RouteCache<'a> {
    topo: &'a AsTopology,
    cache: BTreeMap<(AsId, AsId), BTreeSet<AsId>>,
}

impl<'a> RouteCache<'a> {
    pub fn new(topo: &'a AsTopology) -> Self {
        RouteCache {
            topo,
            cache: BTreeMap::new(),
        }
    }

    /// ASes on either direction of the path between hosts `a` and `b`.
    pub fn observers(&mut self, a: Host, b: Host) -> Result<BTreeSet<AsId>, AnalysisError> {
        let (x, y) = (self.topo.host_as(a)?, self.topo.host_as(b)?);
        let mut set = self.route_set(x, y)?.clone();
        set.extend(self.route_set(y, x)?.iter().copied());
        Ok(set)
    }

    fn route_set(&mut self, x: AsId, y: AsId) -> Result<&BTreeSet<AsId>, AnalysisError> {
        if !self.cache.contains_key(&(x, y)) {
            let path = self.topo.route(x, y)?;
            self.cache.insert((x, y), path.into_iter().collect());
        }
        Ok(&self.cache[&(x, y)])
    }
}

/// A stream is compromised when some AS (endpoint ASes included) lies on
/// both the client-guard and the exit-server paths, in either direction.
pub fn network_compromise_rate(streams: &[StreamRecord], topo: &AsTopology) -> Result<CompromiseResult, AnalysisError> {
    let mut cache = RouteCache::new(topo);
    let mut flags = Vec::new();
    for (s, [g, _, e]) in attached(streams) {
        let entry = cache.observers(Host::Client(s.client_id), Host::Relay(g))?;
        let exit = cache.observers(Host::Relay(e), Host::Server(s.server_id))?;
        flags.push((s.client_id, !entry.is_disjoint(&exit)));
    }
    Ok(CompromiseResult::from_flags(flags.into_iter()))
}

/// Shape of a synthetic three-tier AS graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AsGeneratorConfig {
    pub tier1: u32,
    pub transit: u32,
    pub stubs: u32,
    /// Probability that two transit ASes peer.
    pub transit_peering: f64,
    pub max_weight: u64,
    pub mode: RoutingMode,
}

impl Default for AsGeneratorConfig {
    fn default() -> Self {
        AsGeneratorConfig {
            tier1: 4,
            transit: 12,
            stubs: 40,
            transit_peering: 0.2,
            max_weight: 10,
            mode: RoutingMode::Asymmetric,
        }
    }
}

impl AsGeneratorConfig {
    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.tier1 == 0 || self.transit == 0 || self.stubs == 0 {
            return Err(AnalysisError::InvalidConfig("every AS tier needs at least one AS".into()));
        }
        if self.max_weight == 0 || !(0.0..=1.0).contains(&self.transit_peering) {
            return Err(AnalysisError::InvalidConfig("bad weight or peering probability".into()));
        }
        Ok(())
    }

    /// Tier-1 clique of peers, transits buying from one or two tier-1s,
    /// stubs buying from one or two transits. Hosts land on uniform stubs.
    pub fn generate(&self, hosts: &Topology, rng: &mut RngStream) -> Result<AsTopology, AnalysisError> {
        self.validate()?;
        let t1: Vec<AsId> = (1..=self.tier1).collect();
        let tr: Vec<AsId> = (0..self.transit).map(|i| 100 + i).collect();
        let st: Vec<AsId> = (0..self.stubs).map(|i| 1000 + i).collect();
        let mut edges = Vec::new();
        let weight = |rng: &mut RngStream| rng.random_range(1..=self.max_weight);
        let mut edge = |a, b, rel, rng: &mut RngStream| {
            let w = weight(rng);
            let rw = weight(rng);
            edges.push(AsEdge {
                a,
                b,
                weight: w,
                reverse_weight: (self.mode != RoutingMode::Symmetric).then_some(rw),
                relationship: Some(rel),
            });
        };
        for (i, &a) in t1.iter().enumerate() {
            for &b in &t1[i + 1..] {
                edge(a, b, Relationship::Peer, rng);
            }
        }
        let providers = |pool: &[AsId], rng: &mut RngStream| -> Vec<AsId> {
            let first = pool[rng.random_range(0..pool.len())];
            let mut out = vec![first];
            if pool.len() > 1 && rng.random_bool(0.5) {
                let second = pool[rng.random_range(0..pool.len())];
                if second != first {
                    out.push(second);
                }
            }
            out
        };
        for &a in &tr {
            for p in providers(&t1, rng) {
                edge(a, p, Relationship::CustomerToProvider, rng);
            }
        }
        for (i, &a) in tr.iter().enumerate() {
            for &b in &tr[i + 1..] {
                if rng.random_bool(self.transit_peering) {
                    edge(a, b, Relationship::Peer, rng);
                }
            }
        }
        for &a in &st {
            for p in providers(&tr, rng) {
                edge(a, p, Relationship::CustomerToProvider, rng);
            }
        }
        let mut map = BTreeMap::new();
        let mut place = |host: Host, rng: &mut RngStream| {
            map.insert(host.to_string(), st[rng.random_range(0..st.len())]);
        };
        for r in &hosts.relays {
            place(Host::Relay(r.relay_id), rng);
        }
        for c in &hosts.clients {
            place(Host::Client(c.endpoint_id), rng);
        }
        for s in &hosts.servers {
            place(Host::Server(s.endpoint_id), rng);
        }
        AsTopology::new(AsTopologyFile {
            mode: self.mode,
            edges,
            hosts: map,
        })
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use crate::network::{Position, RelayDescriptor};
    use crate::sim::SimTime;
    use proptest::prelude::*;

    fn relays() -> impl Strategy<Value = Vec<RelayDescriptor>> {
        prop::collection::vec((1u32..1000, 0u8..4), 4..30).prop_map(|v| {
            let mut out: Vec<RelayDescriptor> = v
                .into_iter()
                .enumerate()
                .map(|(i, (bw, kind))| RelayDescriptor {
                    relay_id: i as u32,
                    bandwidth: bw,
                    is_guard: kind == 0 || kind == 3,
                    is_exit: kind == 1 || kind == 3,
                    position: Position::new(0.0, 0.0),
                    exit_policy: if kind == 1 || kind == 3 { [80].into() } else { BTreeSet::new() },
                    is_malicious: false,
                })
                .collect();
            out[0].is_guard = true;
            out[1].is_exit = true;
            out[1].exit_policy = [80].into();
            out
        })
    }

    proptest! {
        #[test]
        fn larger_fraction_marks_superset(r in relays(), lo in 0.0f64..1.0, extra in 0.0f64..0.5, seed in 0u64..100) {
            let hi = (lo + extra).min(1.0);
            let cfg = |f: f64| AdversaryConfig {
                guard_bandwidth_fraction: f,
                exit_bandwidth_fraction: f,
                ..AdversaryConfig::default()
            };
            let a = mark_malicious(&r, &cfg(lo), &mut RngStream::new(seed, "m")).unwrap();
            let b = mark_malicious(&r, &cfg(hi), &mut RngStream::new(seed, "m")).unwrap();
            prop_assert!(a.guards.is_subset(&b.guards));
            prop_assert!(a.guard_share <= b.guard_share + 1e-12);
            prop_assert!(a.guard_share >= lo - 1e-9);
            let max_guard = r.iter().filter(|x| x.is_guard).map(|x| x.bandwidth).max().unwrap();
            let total: u64 = r.iter().filter(|x| x.is_guard).map(|x| u64::from(x.bandwidth)).sum();
            prop_assert!(a.guard_share < lo + f64::from(max_guard) / total as f64 + 1e-9);
        }

        #[test]
        fn compromise_needs_both_ends(r in relays(), seed in 0u64..100) {
            let marked = mark_malicious(&r, &AdversaryConfig::default(), &mut RngStream::new(seed, "m")).unwrap();
            let n = r.len() as u32;
            let streams: Vec<StreamRecord> = (0..n)
                .flat_map(|g| (0..n).map(move |e| (g, e)))
                .enumerate()
                .map(|(i, (g, e))| StreamRecord {
                    stream_id: i as u64,
                    client_id: g,
                    client_kind: crate::workload::ClientKind::Web,
                    server_id: 0,
                    port: 80,
                    requested_at: SimTime::ZERO,
                    circuit_attached_at: Some(SimTime::ZERO),
                    first_byte_at: None,
                    last_byte_at: None,
                    circuit_id: Some(i as u64),
                    path: Some([g, (g + 1) % n, e]),
                    outcome: crate::workload::StreamOutcome::Completed,
                })
                .collect();
            let res = relay_compromise_rate(&streams, &marked);
            let expected = streams
                .iter()
                .filter(|s| {
                    let [g, _, e] = s.path.unwrap();
                    marked.is_marked(g) && marked.is_marked(e)
                })
                .count() as u64;
            prop_assert_eq!(res.compromised_streams(), expected);
        }
    }
}
