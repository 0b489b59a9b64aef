//! Experiment orchestration: per-seed runs with on-disk artifacts,
//! strategy x N sweeps, offline adversary analysis and reports.
//!
//! Layout of one run directory:
//!
//! ```text
//! <out>/seed-<k>/
//!     streams.csv  circuits.csv  pool.csv  metrics.json
//!     topology.toml  manifest.toml   [FAILED]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adversary::{network_compromise_rate, relay_compromise_runs, AdversaryConfig, CompromiseResult};
use crate::config::ExperimentConfig;
use crate::error::HarnessError;
use crate::network::Topology;
use crate::pool::TargetN;
use crate::strategy::StrategyId;
use crate::workload::{aggregate, read_streams_csv, write_streams_csv, ClientKind, FiveNumber, MetricsSummary};
use crate::world::{RunCounters, SimOutput, Simulation};

pub const STREAMS_CSV: &str = "streams.csv";
pub const CIRCUITS_CSV: &str = "circuits.csv";
pub const POOL_CSV: &str = "pool.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const TOPOLOGY_TOML: &str = "topology.toml";
pub const MANIFEST_TOML: &str = "manifest.toml";
pub const FAILED_MARKER: &str = "FAILED";
pub const ADVERSARY_JSON: &str = "adversary.json";

/// Everything needed to rerun one seed bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub config: ExperimentConfig,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| {
            HarnessError::Config(crate::error::ConfigError::Parse {
                path: path.to_owned(),
                message: e.to_string(),
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: StrategyId,
    pub target_n: TargetN,
    pub seed: u64,
    pub config_hash: String,
    pub summary: MetricsSummary,
    pub counters: RunCounters,
    pub events_dispatched: u64,
    pub trace_digest: String,
}

impl RunMetrics {
    pub fn load(dir: &Path) -> Result<RunMetrics, HarnessError> {
        let path = dir.join(METRICS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| HarnessError::Runtime(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: RunMetrics,
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    fs::write(path, bytes).map_err(|e| HarnessError::io(path, e))
}

fn csv_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Csv {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

fn fmt_opt_ms(t: Option<crate::sim::SimTime>) -> String {
    t.map(|t| format!("{:.3}", t.as_millis_f64())).unwrap_or_default()
}

fn write_circuit_log(path: &Path, out: &SimOutput) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time", "client_id", "circuit_id", "event", "guard", "middle", "exit", "rtt_ms", "source"])
        .map_err(|e| csv_err(path, e))?;
    for row in &out.circuit_log {
        w.write_record([
            row.time.to_string(),
            row.client_id.to_string(),
            row.circuit_id.to_string(),
            row.event.to_string(),
            row.path[0].to_string(),
            row.path[1].to_string(),
            row.path[2].to_string(),
            fmt_opt_ms(row.rtt),
            row.source.map(|s| s.as_str().to_string()).unwrap_or_default(),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn write_pool_log(path: &Path, out: &SimOutput) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["time", "client_id", "building", "open", "dirty", "abandoned", "clean_by_port"])
        .map_err(|e| csv_err(path, e))?;
    for row in &out.pool_log {
        let ports: Vec<String> = row.clean_by_port.iter().map(|(p, n)| format!("{p}:{n}")).collect();
        w.write_record([
            row.time.to_string(),
            row.client_id.to_string(),
            row.building.to_string(),
            row.open.to_string(),
            row.dirty.to_string(),
            row.abandoned.to_string(),
            ports.join(";"),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Config for exactly one seed, with file paths made absolute so the
/// manifest is self-contained.
fn single_seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.experiment.seeds = vec![seed];
    if let Some(f) = &c.topology.file {
        c.topology.file = Some(absolute(&cfg.resolve(f)));
    }
    if let Some(section) = &mut c.as_topology {
        if let Some(f) = &section.file {
            section.file = Some(absolute(&cfg.resolve(f)));
        }
    }
    c
}

fn absolute(p: &Path) -> PathBuf {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_owned())
}

fn simulate_into(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<RunMetrics, HarnessError> {
    let single = single_seed_config(cfg, seed);
    let config_hash = single.config_hash();
    let topology = cfg.topology_for(seed)?;
    let manifest = Manifest {
        seed,
        config_hash: config_hash.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: single,
    };
    write_file(
        &dir.join(MANIFEST_TOML),
        toml::to_string(&manifest).expect("manifest serializes").as_bytes(),
    )?;
    write_file(&dir.join(TOPOLOGY_TOML), topology.to_toml().as_bytes())?;

    let out = Simulation::new(&topology, cfg.run_spec(), seed).run();

    let streams_path = dir.join(STREAMS_CSV);
    let file = fs::File::create(&streams_path).map_err(|e| HarnessError::io(&streams_path, e))?;
    write_streams_csv(&out.records, std::io::BufWriter::new(file)).map_err(|e| csv_err(&streams_path, e))?;
    write_circuit_log(&dir.join(CIRCUITS_CSV), &out)?;
    write_pool_log(&dir.join(POOL_CSV), &out)?;

    let metrics = RunMetrics {
        strategy: cfg.experiment.strategy,
        target_n: cfg.pool.target_n,
        seed,
        config_hash,
        summary: aggregate(&out.records, &out.usage, &out.client_kinds, cfg.warmup_end()),
        counters: out.counters.clone(),
        events_dispatched: out.summary.events_dispatched,
        trace_digest: format!("{:016x}", out.summary.trace_digest),
    };
    let json = serde_json::to_string_pretty(&metrics).expect("metrics serialize");
    write_file(&dir.join(METRICS_JSON), json.as_bytes())?;
    Ok(metrics)
}

/// Run one seed into `<out>/seed-<seed>`. A failure leaves a `FAILED`
/// marker holding the error text.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<SeedResult, HarnessError> {
    let dir = seed_dir(out, seed);
    fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;
    let marker = dir.join(FAILED_MARKER);
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| HarnessError::io(&marker, e))?;
    }
    match simulate_into(cfg, seed, &dir) {
        Ok(metrics) => Ok(SeedResult { seed, dir, metrics }),
        Err(e) => {
            let _ = fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}

/// Validate `cfg` and run all its seeds in parallel into `out`.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SeedResult>, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let results: Vec<Result<SeedResult, HarnessError>> = cfg
        .experiment
        .seeds
        .par_iter()
        .map(|&seed| run_seed(cfg, seed, out))
        .collect();
    results.into_iter().collect()
}

/// Rerun the seed recorded in a manifest into `out`.
pub fn rerun_manifest(manifest_path: &Path, out: &Path) -> Result<SeedResult, HarnessError> {
    let m = Manifest::load(manifest_path)?;
    m.config.validate()?;
    run_seed(&m.config, m.seed, out)
}

/// One (strategy, N) combination of a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Cell {
    pub strategy: StrategyId,
    pub n: TargetN,
}

impl Cell {
    pub fn label(&self) -> String {
        match self.n {
            TargetN::Unchanged => format!("{}-unchanged", self.strategy),
            TargetN::Fixed(n) => format!("{}-n{n}", self.strategy),
        }
    }
}

/// Baselines keep their stock pool and appear once regardless of N.
pub fn sweep_cells(strategies: &[StrategyId], n_values: &[TargetN]) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &strategy in strategies {
        if strategy.is_baseline() {
            cells.push(Cell {
                strategy,
                n: TargetN::Unchanged,
            });
        } else {
            cells.extend(n_values.iter().map(|&n| Cell { strategy, n }));
        }
    }
    cells.dedup();
    cells
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    /// Per-seed web-client medians in seconds, in seed order.
    pub ttfb: Vec<f64>,
    pub ttlb: Vec<f64>,
    pub error: Option<String>,
}

impl CellResult {
    /// Median over seeds of the per-seed medians.
    pub fn median_ttfb(&self) -> Option<f64> {
        crate::workload::median(&self.ttfb)
    }

    pub fn median_ttlb(&self) -> Option<f64> {
        crate::workload::median(&self.ttlb)
    }
}

/// Relative change of `a` against `b`.
pub fn delta(a: f64, b: f64) -> f64 {
    (a - b) / b
}

pub fn format_pct(d: f64) -> String {
    format!("{:+.1}%", d * 100.0)
}

/// Published full-scale deltas of RTT-only against the two baselines.
pub const REFERENCE_ROWS: [(&str, u32, f64, f64, f64, f64); 2] = [
    // (strategy, N, TTFB vs car, TTFB vs vanilla, TTLB vs car, TTLB vs vanilla)
    ("rtt_only", 3, -0.15, -0.22, -0.09, -0.138),
    ("rtt_only", 5, -0.22, -0.27, -0.12, -0.16),
];

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<CellResult>,
}

impl SweepTable {
    pub fn cell(&self, strategy: StrategyId, n: TargetN) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.cell == Cell { strategy, n })
    }

    fn baseline(&self, strategy: StrategyId) -> Option<&CellResult> {
        self.cell(strategy, TargetN::Unchanged).filter(|c| c.error.is_none())
    }

    pub fn render(&self) -> String {
        let car = self.baseline(StrategyId::Car);
        let vanilla = self.baseline(StrategyId::Vanilla);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<30} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
            "cell", "ttfb_s", "ttlb_s", "fb_vs_car", "fb_vs_van", "lb_vs_car", "lb_vs_van"
        );
        let rel = |mine: Option<f64>, base: Option<&CellResult>, f: fn(&CellResult) -> Option<f64>| match (mine, base.and_then(f)) {
            (Some(a), Some(b)) => format_pct(delta(a, b)),
            _ => "-".into(),
        };
        for c in &self.cells {
            if let Some(e) = &c.error {
                let _ = writeln!(s, "{:<30} FAILED: {e}", c.cell.label());
                continue;
            }
            let (fb, lb) = (c.median_ttfb(), c.median_ttlb());
            let _ = writeln!(
                s,
                "{:<30} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                c.cell.label(),
                fb.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                lb.map(|v| format!("{v:.4}")).unwrap_or("-".into()),
                rel(fb, car, CellResult::median_ttfb),
                rel(fb, vanilla, CellResult::median_ttfb),
                rel(lb, car, CellResult::median_ttlb),
                rel(lb, vanilla, CellResult::median_ttlb),
            );
        }
        let _ = writeln!(s, "\npublished reference (full-scale):");
        for (name, n, fc, fv, lc, lv) in REFERENCE_ROWS {
            let _ = writeln!(
                s,
                "{:<30} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
                format!("{name}-n{n}"),
                "-",
                "-",
                format_pct(fc),
                format_pct(fv),
                format_pct(lc),
                format_pct(lv)
            );
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("strategy,n,seed_index,ttfb_median_s,ttlb_median_s\n");
        for c in &self.cells {
            for (i, (fb, lb)) in c.ttfb.iter().zip(&c.ttlb).enumerate() {
                let _ = writeln!(s, "{},{},{i},{fb:.6},{lb:.6}", c.cell.strategy, c.cell.n);
            }
        }
        s
    }
}

/// Run every cell of `strategies x n_values` over the base seeds. Each
/// cell writes to `<out>/<label>/seed-<k>`; a failing cell is reported and
/// the others continue.
pub fn sweep(
    base: &ExperimentConfig,
    strategies: &[StrategyId],
    n_values: &[TargetN],
    out: &Path,
) -> Result<SweepTable, HarnessError> {
    base.validate()?;
    let cells = sweep_cells(strategies, n_values);
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|i| base.experiment.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, u64, Result<SeedResult, HarnessError>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut cfg = base.clone();
            cfg.experiment.strategy = cells[i].strategy;
            cfg.pool.target_n = cells[i].n;
            (i, seed, run_seed(&cfg, seed, &out.join(cells[i].label())))
        })
        .collect();
    let mut table = SweepTable {
        cells: cells
            .iter()
            .map(|&cell| CellResult {
                cell,
                ttfb: Vec::new(),
                ttlb: Vec::new(),
                error: None,
            })
            .collect(),
    };
    for (i, seed, r) in results {
        let cell = &mut table.cells[i];
        match r {
            Ok(res) => {
                let s = &res.metrics.summary;
                if let (Some(fb), Some(lb)) = (s.median_ttfb(ClientKind::Web), s.median_ttlb(ClientKind::Web)) {
                    cell.ttfb.push(fb);
                    cell.ttlb.push(lb);
                }
            }
            Err(e) => {
                log::error!("cell {} seed {seed} failed: {e}", cell.cell.label());
                cell.error.get_or_insert_with(|| format!("seed {seed}: {e}"));
            }
        }
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write_file(&out.join("sweep.txt"), table.render().as_bytes())?;
    write_file(&out.join("sweep.csv"), table.to_csv().as_bytes())?;
    Ok(table)
}

/// All run directories (those holding a manifest) under `root`, sorted.
pub fn find_run_dirs(root: &Path) -> Vec<PathBuf> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_owned()];
    while let Some(dir) = stack.pop() {
        if dir.join(MANIFEST_TOML).is_file() {
            found.push(dir);
            continue;
        }
        if let Ok(entries) = fs::read_dir(&dir) {
            for e in entries.flatten() {
                if e.path().is_dir() {
                    stack.push(e.path());
                }
            }
        }
    }
    found.sort();
    found
}

fn is_complete(dir: &Path) -> bool {
    !dir.join(FAILED_MARKER).exists() && [STREAMS_CSV, METRICS_JSON, TOPOLOGY_TOML].iter().all(|f| dir.join(f).is_file())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelayRunSummary {
    pub run: u32,
    pub marked_guards: Vec<u32>,
    pub marked_exits: Vec<u32>,
    pub guard_share: f64,
    pub exit_share: f64,
    pub streams: u64,
    pub compromised: u64,
    pub overall_rate: f64,
    pub median_client_rate: f64,
    pub mean_client_rate: f64,
    pub client_box: Option<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSummary {
    pub streams: u64,
    pub compromised: u64,
    pub overall_rate: f64,
    pub median_client_rate: f64,
    pub client_box: Option<FiveNumber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryReport {
    pub relay_runs: Vec<RelayRunSummary>,
    /// Five-number summary of per-run median client rates.
    pub relay_median_box: Option<FiveNumber>,
    pub network: Option<NetworkSummary>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn write_rates_csv(path: &Path, rows: &[(u32, &CompromiseResult)]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["run", "client_id", "streams", "compromised", "rate"])
        .map_err(|e| csv_err(path, e))?;
    for (run, res) in rows {
        for c in &res.per_client {
            w.write_record([
                run.to_string(),
                c.client_id.to_string(),
                c.streams.to_string(),
                c.compromised.to_string(),
                format!("{:.6}", c.rate()),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

/// Relay- and (if configured) AS-level analysis of one run directory.
/// Writes `compromise_relay.csv`, `compromise_as.csv` and `adversary.json`.
pub fn analyze_run(dir: &Path, adversary: &AdversaryConfig, cfg: Option<&ExperimentConfig>) -> Result<AdversaryReport, HarnessError> {
    let streams_path = dir.join(STREAMS_CSV);
    let file = fs::File::open(&streams_path).map_err(|e| HarnessError::io(&streams_path, e))?;
    let streams = read_streams_csv(std::io::BufReader::new(file))?;
    let topology = Topology::load(&dir.join(TOPOLOGY_TOML))?;
    let runs = relay_compromise_runs(&streams, &topology.relays, adversary)?;
    let relay_rows: Vec<(u32, &CompromiseResult)> = runs.iter().map(|r| (r.run, &r.result)).collect();
    write_rates_csv(&dir.join("compromise_relay.csv"), &relay_rows)?;
    let relay_runs: Vec<RelayRunSummary> = runs
        .iter()
        .map(|r| RelayRunSummary {
            run: r.run,
            marked_guards: r.marked.guards.iter().copied().collect(),
            marked_exits: r.marked.exits.iter().copied().collect(),
            guard_share: r.marked.guard_share,
            exit_share: r.marked.exit_share,
            streams: r.result.total_streams(),
            compromised: r.result.compromised_streams(),
            overall_rate: r.result.overall_rate(),
            median_client_rate: r.result.median_client_rate(),
            mean_client_rate: mean(&r.result.client_rates()),
            client_box: r.result.box_stats(),
        })
        .collect();
    let medians: Vec<f64> = relay_runs.iter().map(|r| r.median_client_rate).collect();

    let manifest_seed = Manifest::load(&dir.join(MANIFEST_TOML)).map(|m| m.seed).unwrap_or(0);
    let network = match cfg.map(|c| c.as_topology_for(manifest_seed, &topology)).transpose()? {
        Some(Some(as_topo)) => {
            let res = network_compromise_rate(&streams, &as_topo)?;
            write_rates_csv(&dir.join("compromise_as.csv"), &[(0, &res)])?;
            write_file(&dir.join("as_topology.toml"), as_topo.to_toml().as_bytes())?;
            Some(NetworkSummary {
                streams: res.total_streams(),
                compromised: res.compromised_streams(),
                overall_rate: res.overall_rate(),
                median_client_rate: res.median_client_rate(),
                client_box: res.box_stats(),
            })
        }
        _ => None,
    };
    let report = AdversaryReport {
        relay_runs,
        relay_median_box: FiveNumber::of(&medians),
        network,
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&dir.join(ADVERSARY_JSON), json.as_bytes())?;
    Ok(report)
}

/// Analyze every complete run directory under `roots`.
pub fn adversary(roots: &[PathBuf], override_cfg: Option<&ExperimentConfig>) -> Result<Vec<(PathBuf, AdversaryReport)>, HarnessError> {
    let dirs: Vec<PathBuf> = roots.iter().flat_map(|r| find_run_dirs(r)).collect();
    if dirs.is_empty() {
        return Err(HarnessError::Runtime("no run directories found".into()));
    }
    dirs.par_iter()
        .filter(|d| is_complete(d))
        .map(|d| {
            let manifest_cfg = Manifest::load(&d.join(MANIFEST_TOML)).ok().map(|m| m.config);
            let cfg = override_cfg.cloned().or(manifest_cfg);
            let adv = cfg.as_ref().and_then(|c| c.adversary.clone()).unwrap_or_default();
            analyze_run(d, &adv, cfg.as_ref()).map(|r| (d.clone(), r))
        })
        .collect()
}

fn write_cdf(path: &Path, values: &[f64]) -> Result<(), HarnessError> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let mut s = String::from("value\tfraction\n");
    for (i, x) in v.iter().enumerate() {
        let _ = writeln!(s, "{x:.6}\t{:.6}", (i + 1) as f64 / n as f64);
    }
    write_file(path, s.as_bytes())
}

fn label_for(dir: &Path, roots: &[PathBuf]) -> String {
    let rel = roots
        .iter()
        .find_map(|r| dir.strip_prefix(r).ok())
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(dir);
    rel.to_string_lossy().replace(['/', '\\'], "_")
}

#[derive(Debug, Clone, Default)]
pub struct Report {
    pub text: String,
    pub files: Vec<PathBuf>,
    pub skipped: Vec<PathBuf>,
}

/// Summarize run directories under `roots` into `out`: a text table plus
/// one CDF file per metric and run. Incomplete runs are listed and skipped.
pub fn report(roots: &[PathBuf], out: &Path) -> Result<Report, HarnessError> {
    let dirs: Vec<PathBuf> = roots.iter().flat_map(|r| find_run_dirs(r)).collect();
    if dirs.is_empty() {
        return Err(HarnessError::Runtime("report needs at least one run directory".into()));
    }
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    let mut rep = Report::default();
    let _ = writeln!(
        rep.text,
        "{:<40} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10}",
        "run", "streams", "ttfb_med", "ttlb_med", "created", "used", "relay_cmp"
    );
    for dir in &dirs {
        if !is_complete(dir) {
            rep.skipped.push(dir.clone());
            continue;
        }
        let label = label_for(dir, roots);
        let metrics = RunMetrics::load(dir)?;
        let streams_path = dir.join(STREAMS_CSV);
        let file = fs::File::open(&streams_path).map_err(|e| HarnessError::io(&streams_path, e))?;
        let records = read_streams_csv(std::io::BufReader::new(file))?;
        let warmup = crate::sim::SimTime::from_secs_f64(metrics.summary.warmup_end_s);
        let web: Vec<_> = records
            .iter()
            .filter(|r| r.client_kind == ClientKind::Web && r.requested_at >= warmup)
            .collect();
        let ttfb: Vec<f64> = web.iter().filter_map(|r| r.ttfb()).collect();
        let ttlb: Vec<f64> = web.iter().filter_map(|r| r.ttlb()).collect();
        let web_clients = metrics.summary.clients.iter().filter(|c| c.kind == ClientKind::Web);
        let created: Vec<f64> = web_clients.clone().map(|c| c.created as f64).collect();
        let used: Vec<f64> = web_clients.map(|c| c.used as f64).collect();
        let mut series: Vec<(&str, Vec<f64>)> = vec![("ttfb", ttfb), ("ttlb", ttlb), ("created", created), ("used", used)];
        let adv: Option<AdversaryReport> = fs::read_to_string(dir.join(ADVERSARY_JSON))
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
        if let Some(a) = &adv {
            series.push(("relay_compromise", a.relay_runs.iter().map(|r| r.median_client_rate).collect()));
        }
        if dir.join("compromise_as.csv").is_file() {
            let mut rdr = csv::Reader::from_path(dir.join("compromise_as.csv")).map_err(|e| csv_err(dir, e))?;
            let rates: Vec<f64> = rdr
                .records()
                .filter_map(|r| r.ok().and_then(|r| r.get(4).and_then(|v| v.parse().ok())))
                .collect();
            series.push(("as_compromise", rates));
        }
        for (name, values) in &series {
            if values.is_empty() {
                continue;
            }
            let path = out.join(format!("{label}_{name}_cdf.tsv"));
            write_cdf(&path, values)?;
            rep.files.push(path);
        }
        let med = |v: &[f64]| crate::workload::median(v).map(|m| format!("{m:.4}")).unwrap_or("-".into());
        let _ = writeln!(
            rep.text,
            "{:<40} {:>8} {:>10} {:>10} {:>9} {:>9} {:>10}",
            label,
            web.len(),
            med(&series[0].1),
            med(&series[1].1),
            med(&series[2].1),
            med(&series[3].1),
            adv.as_ref()
                .and_then(|a| a.relay_median_box.as_ref())
                .map(|b| format!("{:.4}", b.median))
                .unwrap_or("-".into()),
        );
        if let Some(b) = adv.as_ref().and_then(|a| a.relay_median_box.as_ref()) {
            let _ = writeln!(
                rep.text,
                "    relay compromise over runs: min {:.4} q1 {:.4} median {:.4} q3 {:.4} max {:.4}",
                b.min, b.q1, b.median, b.q3, b.max
            );
        }
    }
    for s in &rep.skipped {
        let _ = writeln!(rep.text, "skipped incomplete run: {}", s.display());
    }
    write_file(&out.join("report.txt"), rep.text.as_bytes())?;
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_semantics() {
        let cells = sweep_cells(
            &[StrategyId::Vanilla, StrategyId::Car, StrategyId::RttOnly],
            &[TargetN::Fixed(3), TargetN::Fixed(5)],
        );
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[0].n, TargetN::Unchanged);
        assert_eq!(cells[3], Cell { strategy: StrategyId::RttOnly, n: TargetN::Fixed(5) });
    }

    #[test]
    fn delta_arithmetic() {
        assert!((delta(0.85, 1.0) + 0.15).abs() < 1e-12);
        assert_eq!(format_pct(delta(0.85, 1.0)), "-15.0%");
        assert_eq!(format_pct(0.05), "+5.0%");
    }

    #[test]
    fn reference_rows_embedded() {
        let t = SweepTable { cells: Vec::new() };
        let text = t.render();
        assert!(text.contains("published reference (full-scale)"));
        assert!(text.contains("rtt_only-n3"));
        assert!(text.contains("-15.0%") && text.contains("-22.0%") && text.contains("-27.0%"));
    }

    #[test]
    fn empty_report_is_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(report(&[dir.path().to_owned()], &dir.path().join("r")).is_err());
    }
}
