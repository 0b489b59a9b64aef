//! Client behavior parameters, stream records and their aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::circuit::CircuitId;
use crate::error::AnalysisError;
use crate::network::RelayId;
use crate::sim::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Web,
    Bulk,
}

impl ClientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientKind::Web => "web",
            ClientKind::Bulk => "bulk",
        }
    }
}

impl fmt::Display for ClientKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClientKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "web" => Ok(ClientKind::Web),
            "bulk" => Ok(ClientKind::Bulk),
            other => Err(format!("unknown client kind {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientProfile {
    pub kind: ClientKind,
    pub download_kib: u32,
    /// Uniform pause between downloads, seconds; `None` means back-to-back.
    pub think_time: Option<(f64, f64)>,
}

impl ClientProfile {
    pub fn validate(&self) -> Result<(), String> {
        if self.download_kib == 0 {
            return Err(format!("{} download size must be positive", self.kind));
        }
        if let Some((lo, hi)) = self.think_time {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(format!("invalid think time range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadConfig {
    pub web_clients: u32,
    pub bulk_clients: u32,
    pub web_download_kib: u32,
    pub bulk_download_kib: u32,
    pub think_min_s: f64,
    pub think_max_s: f64,
    /// A stream waiting this long for a circuit fails.
    pub attach_timeout_s: f64,
    pub port: u16,
    /// Application bytes per cell.
    pub cell_payload: u32,
    /// Response cells are forwarded in batches of this size (the first
    /// response cell always travels alone).
    pub chunk_cells: u32,
    /// Cells a server may have in flight per stream before it waits for
    /// delivery acknowledgements.
    pub window_cells: u32,
    /// Clients start their first request uniformly within this many seconds.
    pub start_spread_s: f64,
    /// Length metrics include the exit→destination leg.
    pub destination_known: bool,
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig {
            web_clients: 198,
            bulk_clients: 22,
            web_download_kib: 320,
            bulk_download_kib: 5120,
            think_min_s: 1.0,
            think_max_s: 20.0,
            attach_timeout_s: 120.0,
            port: 80,
            cell_payload: 498,
            chunk_cells: 32,
            window_cells: 500,
            start_spread_s: 20.0,
            destination_known: true,
        }
    }
}

impl WorkloadConfig {
    pub fn total_clients(&self) -> u32 {
        self.web_clients + self.bulk_clients
    }

    /// Clients `0..web_clients` browse; the rest are bulk downloaders.
    pub fn kind_of(&self, client_id: u32) -> ClientKind {
        if client_id < self.web_clients {
            ClientKind::Web
        } else {
            ClientKind::Bulk
        }
    }

    pub fn profile(&self, kind: ClientKind) -> ClientProfile {
        match kind {
            ClientKind::Web => ClientProfile {
                kind,
                download_kib: self.web_download_kib,
                think_time: Some((self.think_min_s, self.think_max_s)),
            },
            ClientKind::Bulk => ClientProfile {
                kind,
                download_kib: self.bulk_download_kib,
                think_time: None,
            },
        }
    }

    pub fn response_cells(&self, download_kib: u32) -> u32 {
        (u64::from(download_kib) * 1024).div_ceil(u64::from(self.cell_payload)) as u32
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.total_clients() == 0 {
            return Err("workload needs at least one client".into());
        }
        self.profile(ClientKind::Web).validate()?;
        self.profile(ClientKind::Bulk).validate()?;
        if self.cell_payload == 0 || self.chunk_cells == 0 || self.window_cells < self.chunk_cells {
            return Err("cell_payload, chunk_cells must be positive and window_cells >= chunk_cells".into());
        }
        if !(self.attach_timeout_s > 0.0) || !(self.start_spread_s >= 0.0) {
            return Err("attach_timeout_s must be positive and start_spread_s non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOutcome {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRecord {
    pub stream_id: u64,
    pub client_id: u32,
    pub client_kind: ClientKind,
    pub server_id: u32,
    pub port: u16,
    pub requested_at: SimTime,
    pub circuit_attached_at: Option<SimTime>,
    pub first_byte_at: Option<SimTime>,
    pub last_byte_at: Option<SimTime>,
    pub circuit_id: Option<CircuitId>,
    /// `[guard, middle, exit]`.
    pub path: Option<[RelayId; 3]>,
    pub outcome: StreamOutcome,
}

impl StreamRecord {
    pub fn is_completed(&self) -> bool {
        self.outcome == StreamOutcome::Completed
    }

    /// Time to first byte in seconds; `None` for failed streams.
    pub fn ttfb(&self) -> Option<f64> {
        self.completed_delta(self.first_byte_at)
    }

    /// Time to last byte in seconds; `None` for failed streams.
    pub fn ttlb(&self) -> Option<f64> {
        self.completed_delta(self.last_byte_at)
    }

    fn completed_delta(&self, at: Option<SimTime>) -> Option<f64> {
        if !self.is_completed() {
            return None;
        }
        at.map(|t| (t - self.requested_at).as_secs_f64())
    }
}

#[derive(Serialize, Deserialize)]
struct StreamRow {
    stream_id: u64,
    client_id: u32,
    client_kind: String,
    server_id: u32,
    port: u16,
    requested_at: String,
    circuit_attached_at: String,
    first_byte_at: String,
    last_byte_at: String,
    circuit_id: String,
    guard: String,
    middle: String,
    exit: String,
    outcome: String,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn parse_opt<T: FromStr>(s: &str, what: &str) -> Result<Option<T>, AnalysisError> {
    if s.is_empty() {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| AnalysisError::Malformed(format!("bad {what} value {s:?}")))
}

/// Write the streams CSV (one row per record, header first).
pub fn write_streams_csv<W: Write>(records: &[StreamRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(StreamRow {
            stream_id: r.stream_id,
            client_id: r.client_id,
            client_kind: r.client_kind.to_string(),
            server_id: r.server_id,
            port: r.port,
            requested_at: r.requested_at.to_string(),
            circuit_attached_at: opt(r.circuit_attached_at),
            first_byte_at: opt(r.first_byte_at),
            last_byte_at: opt(r.last_byte_at),
            circuit_id: opt(r.circuit_id),
            guard: opt(r.path.map(|p| p[0])),
            middle: opt(r.path.map(|p| p[1])),
            exit: opt(r.path.map(|p| p[2])),
            outcome: match r.outcome {
                StreamOutcome::Completed => "completed".into(),
                StreamOutcome::Failed => "failed".into(),
            },
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_streams_csv<R: Read>(input: R) -> Result<Vec<StreamRecord>, AnalysisError> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<StreamRow>() {
        let row = row.map_err(|e| AnalysisError::Malformed(e.to_string()))?;
        let path = match (
            parse_opt::<u32>(&row.guard, "guard")?,
            parse_opt::<u32>(&row.middle, "middle")?,
            parse_opt::<u32>(&row.exit, "exit")?,
        ) {
            (Some(g), Some(m), Some(e)) => Some([g, m, e]),
            (None, None, None) => None,
            _ => return Err(AnalysisError::Malformed(format!("partial path in stream {}", row.stream_id))),
        };
        out.push(StreamRecord {
            stream_id: row.stream_id,
            client_id: row.client_id,
            client_kind: row.client_kind.parse().map_err(AnalysisError::Malformed)?,
            server_id: row.server_id,
            port: row.port,
            requested_at: row.requested_at.parse().map_err(AnalysisError::Malformed)?,
            circuit_attached_at: parse_opt(&row.circuit_attached_at, "circuit_attached_at")?,
            first_byte_at: parse_opt(&row.first_byte_at, "first_byte_at")?,
            last_byte_at: parse_opt(&row.last_byte_at, "last_byte_at")?,
            circuit_id: parse_opt(&row.circuit_id, "circuit_id")?,
            path,
            outcome: match row.outcome.as_str() {
                "completed" => StreamOutcome::Completed,
                "failed" => StreamOutcome::Failed,
                other => return Err(AnalysisError::Malformed(format!("unknown outcome {other:?}"))),
            },
        });
    }
    Ok(out)
}

/// Per-circuit usage facts needed for the created/used counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CircuitUsage {
    pub client_id: u32,
    pub circuit_id: CircuitId,
    pub launched_at: SimTime,
    pub streams_attached: u32,
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile(&v, 0.5)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl FiveNumber {
    pub fn of(values: &[f64]) -> Option<FiveNumber> {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(FiveNumber {
            min: *v.first()?,
            q1: quantile(&v, 0.25)?,
            median: quantile(&v, 0.5)?,
            q3: quantile(&v, 0.75)?,
            max: *v.last()?,
        })
    }
}

/// Empirical distribution with plot-ready CDF points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistSummary {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p25: f64,
    pub p75: f64,
    pub p90: f64,
    /// `(value, cumulative fraction)` at up to [`CDF_POINTS`] quantiles.
    pub cdf: Vec<(f64, f64)>,
}

pub const CDF_POINTS: usize = 100;

impl DistSummary {
    pub fn of(values: &[f64]) -> Option<DistSummary> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(DistSummary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile(&v, 0.5)?,
            p25: quantile(&v, 0.25)?,
            p75: quantile(&v, 0.75)?,
            p90: quantile(&v, 0.9)?,
            cdf: cdf_points(&v),
        })
    }
}

/// Sorted input; returns at most [`CDF_POINTS`] + 1 points.
pub fn cdf_points(sorted: &[f64]) -> Vec<(f64, f64)> {
    let n = sorted.len();
    if n == 0 {
        return Vec::new();
    }
    if n <= CDF_POINTS {
        return sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| (x, (i + 1) as f64 / n as f64))
            .collect();
    }
    (0..=CDF_POINTS)
        .map(|k| {
            let q = k as f64 / CDF_POINTS as f64;
            (quantile(sorted, q).expect("non-empty"), q)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KindSummary {
    pub completed: usize,
    pub failed: usize,
    pub ttfb: Option<DistSummary>,
    pub ttlb: Option<DistSummary>,
    pub circuits_created: Option<DistSummary>,
    pub circuits_used: Option<DistSummary>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCircuitCounts {
    pub client_id: u32,
    pub kind: ClientKind,
    pub created: u32,
    pub used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub warmup_end_s: f64,
    pub by_kind: BTreeMap<ClientKind, KindSummary>,
    pub clients: Vec<ClientCircuitCounts>,
}

impl MetricsSummary {
    pub fn kind(&self, kind: ClientKind) -> Option<&KindSummary> {
        self.by_kind.get(&kind)
    }

    pub fn median_ttfb(&self, kind: ClientKind) -> Option<f64> {
        Some(self.kind(kind)?.ttfb.as_ref()?.median)
    }

    pub fn median_ttlb(&self, kind: ClientKind) -> Option<f64> {
        Some(self.kind(kind)?.ttlb.as_ref()?.median)
    }
}

/// Summarize a finished run. Streams requested and circuits launched before
/// `warmup_end` are excluded.
pub fn aggregate(
    records: &[StreamRecord],
    usage: &[CircuitUsage],
    client_kinds: &[ClientKind],
    warmup_end: SimTime,
) -> MetricsSummary {
    let mut clients: Vec<ClientCircuitCounts> = client_kinds
        .iter()
        .enumerate()
        .map(|(id, &kind)| ClientCircuitCounts {
            client_id: id as u32,
            kind,
            created: 0,
            used: 0,
        })
        .collect();
    for u in usage.iter().filter(|u| u.launched_at >= warmup_end) {
        if let Some(c) = clients.get_mut(u.client_id as usize) {
            c.created += 1;
            if u.streams_attached > 0 {
                c.used += 1;
            }
        }
    }
    let mut by_kind = BTreeMap::new();
    for kind in [ClientKind::Web, ClientKind::Bulk] {
        let window: Vec<&StreamRecord> = records
            .iter()
            .filter(|r| r.client_kind == kind && r.requested_at >= warmup_end)
            .collect();
        if window.is_empty() && !client_kinds.contains(&kind) {
            continue;
        }
        let ttfb: Vec<f64> = window.iter().filter_map(|r| r.ttfb()).collect();
        let ttlb: Vec<f64> = window.iter().filter_map(|r| r.ttlb()).collect();
        let of_kind = clients.iter().filter(|c| c.kind == kind);
        let created: Vec<f64> = of_kind.clone().map(|c| f64::from(c.created)).collect();
        let used: Vec<f64> = of_kind.map(|c| f64::from(c.used)).collect();
        by_kind.insert(
            kind,
            KindSummary {
                completed: window.iter().filter(|r| r.is_completed()).count(),
                failed: window.iter().filter(|r| !r.is_completed()).count(),
                ttfb: DistSummary::of(&ttfb),
                ttlb: DistSummary::of(&ttlb),
                circuits_created: DistSummary::of(&created),
                circuits_used: DistSummary::of(&used),
            },
        );
    }
    MetricsSummary {
        warmup_end_s: warmup_end.as_secs_f64(),
        by_kind,
        clients,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: u64, requested: f64, first: f64, last: f64) -> StreamRecord {
        StreamRecord {
            stream_id: id,
            client_id: 0,
            client_kind: ClientKind::Web,
            server_id: 3,
            port: 80,
            requested_at: SimTime::from_secs_f64(requested),
            circuit_attached_at: Some(SimTime::from_secs_f64(requested)),
            first_byte_at: Some(SimTime::from_secs_f64(first)),
            last_byte_at: Some(SimTime::from_secs_f64(last)),
            circuit_id: Some(9),
            path: Some([1, 2, 3]),
            outcome: StreamOutcome::Completed,
        }
    }

    #[test]
    fn ttfb_and_ttlb() {
        let r = record(0, 10.0, 12.5, 14.0);
        assert_eq!(r.ttfb(), Some(2.5));
        assert_eq!(r.ttlb(), Some(4.0));
        let failed = StreamRecord {
            outcome: StreamOutcome::Failed,
            ..r
        };
        assert_eq!(failed.ttfb(), None);
    }

    #[test]
    fn median_of_five() {
        assert_eq!(median(&[5.0, 1.0, 3.0, 2.0, 4.0]), Some(3.0));
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }

    #[test]
    fn aggregate_medians_and_counts() {
        let records: Vec<_> = (1..=5)
            .map(|i| record(i, 100.0, 100.0 + i as f64, 110.0 + i as f64))
            .collect();
        let usage = vec![
            CircuitUsage {
                client_id: 0,
                circuit_id: 1,
                launched_at: SimTime::from_secs(60),
                streams_attached: 5,
            },
            CircuitUsage {
                client_id: 0,
                circuit_id: 2,
                launched_at: SimTime::from_secs(60),
                streams_attached: 0,
            },
            CircuitUsage {
                client_id: 0,
                circuit_id: 0,
                launched_at: SimTime::from_secs(1),
                streams_attached: 3,
            },
        ];
        let summary = aggregate(&records, &usage, &[ClientKind::Web], SimTime::from_secs(50));
        assert_eq!(summary.median_ttfb(ClientKind::Web), Some(3.0));
        let c = &summary.clients[0];
        assert_eq!((c.created, c.used), (2, 1));
        assert!(c.used <= c.created);
    }

    #[test]
    fn warmup_excluded() {
        let records = vec![record(0, 10.0, 20.0, 30.0), record(1, 100.0, 101.0, 102.0)];
        let summary = aggregate(&records, &[], &[ClientKind::Web], SimTime::from_secs(50));
        let web = summary.kind(ClientKind::Web).unwrap();
        assert_eq!(web.completed, 1);
        assert_eq!(web.ttfb.as_ref().unwrap().median, 1.0);
    }

    #[test]
    fn csv_roundtrip() {
        let mut failed = record(2, 5.0, 0.0, 0.0);
        failed.outcome = StreamOutcome::Failed;
        failed.first_byte_at = None;
        failed.last_byte_at = None;
        failed.circuit_attached_at = None;
        failed.circuit_id = None;
        failed.path = None;
        let records = vec![record(1, 1.25, 2.0, 3.000001), failed];
        let mut buf = Vec::new();
        write_streams_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("stream_id,client_id,client_kind,server_id,port,requested_at"));
        assert_eq!(read_streams_csv(&buf[..]).unwrap(), records);
    }

    #[test]
    fn response_cells_round_up() {
        let w = WorkloadConfig::default();
        // 327680 bytes over 498-byte payloads: 658 cells carry 327684 bytes.
        assert_eq!(w.response_cells(320), 658);
        assert_eq!(w.response_cells(1), 3);
        assert_eq!(w.kind_of(0), ClientKind::Web);
        assert_eq!(w.kind_of(198), ClientKind::Bulk);
    }

    #[test]
    fn five_number() {
        let f = FiveNumber::of(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!((f.min, f.q1, f.median, f.q3, f.max), (1.0, 2.0, 3.0, 4.0, 5.0));
    }
}
