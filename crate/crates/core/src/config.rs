//! Experiment configuration: one TOML file describing topology, workload,
//! pool, circuit and link parameters, seeds and outputs.
//!
//! `ExperimentConfig::default()` is the desk-scale profile; the checked-in
//! `configs/desk.toml` spells out the same values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adversary::{AdversaryConfig, AsGeneratorConfig, AsTopology};
use crate::circuit::CircuitConfig;
use crate::error::ConfigError;
use crate::network::{GeneratorConfig, LinkModel, Topology};
use crate::pool::PoolConfig;
use crate::sim::{RngStream, SimTime};
use crate::strategy::StrategyId;
use crate::workload::WorkloadConfig;
use crate::world::RunSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub duration_s: f64,
    /// Leading share of `duration_s` excluded from metrics.
    pub warmup_fraction: f64,
    pub seeds: Vec<u64>,
    pub strategy: StrategyId,
    pub output_dir: PathBuf,
    /// Pool snapshot period; 0 disables the pool log.
    pub snapshot_interval_s: f64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "desk".into(),
            duration_s: 2700.0,
            warmup_fraction: 1.0 / 3.0,
            seeds: vec![0],
            strategy: StrategyId::RttOnly,
            output_dir: PathBuf::from("out"),
            snapshot_interval_s: 60.0,
        }
    }
}

/// Either a topology file or generator parameters. A file wins when set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TopologySection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AsSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<PathBuf>,
    pub generator: AsGeneratorConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub topology: TopologySection,
    pub workload: WorkloadConfig,
    pub pool: PoolConfig,
    pub circuit: CircuitConfig,
    pub link: LinkModel,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adversary: Option<AdversaryConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub as_topology: Option<AsSection>,
    /// Directory relative paths resolve against; the config file's own
    /// directory when loaded from disk.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_owned(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_owned(),
                message,
            },
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_owned).unwrap_or_default();
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<string>"),
            message: e.to_string(),
        })
    }

    /// Canonical serialization; also the input to [`Self::config_hash`].
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if !(e.duration_s.is_finite() && e.duration_s > 0.0) {
            return Err(invalid(format!("experiment.duration_s must be positive, got {}", e.duration_s)));
        }
        if !(0.0..1.0).contains(&e.warmup_fraction) {
            return Err(invalid("experiment.warmup_fraction must be in [0, 1)"));
        }
        if e.seeds.is_empty() {
            return Err(invalid("experiment.seeds must not be empty"));
        }
        if !(e.snapshot_interval_s >= 0.0 && e.snapshot_interval_s.is_finite()) {
            return Err(invalid("experiment.snapshot_interval_s must be non-negative"));
        }
        self.workload.validate().map_err(invalid)?;
        self.pool.validate().map_err(invalid)?;
        self.circuit.validate().map_err(invalid)?;
        self.link.validate()?;
        match &self.topology.file {
            Some(f) => {
                let path = self.resolve(f);
                if !path.is_file() {
                    return Err(ConfigError::Read {
                        path,
                        source: std::io::Error::new(std::io::ErrorKind::NotFound, "topology file not found"),
                    });
                }
            }
            None => self.topology.generator.validate()?,
        }
        if let Some(a) = &self.adversary {
            a.validate().map_err(|e| invalid(e.to_string()))?;
        }
        if let Some(a) = &self.as_topology {
            if a.file.is_none() {
                a.generator.validate().map_err(|e| invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    pub fn duration(&self) -> SimTime {
        SimTime::from_secs_f64(self.experiment.duration_s)
    }

    pub fn warmup_end(&self) -> SimTime {
        SimTime::from_secs_f64(self.experiment.duration_s * self.experiment.warmup_fraction)
    }

    pub fn run_spec(&self) -> RunSpec {
        RunSpec {
            strategy: self.experiment.strategy,
            pool: self.pool.clone(),
            circuit: self.circuit.clone(),
            workload: self.workload.clone(),
            link: self.link.clone(),
            duration: self.duration(),
            warmup_end: self.warmup_end(),
            snapshot_interval: SimTime::from_secs_f64(self.experiment.snapshot_interval_s),
        }
    }

    /// The network for `seed`: the configured file, or a fresh draw from
    /// the generator. Strategies compared under one seed share it.
    pub fn topology_for(&self, seed: u64) -> Result<Topology, ConfigError> {
        let clients = self.workload.total_clients();
        let topo = match &self.topology.file {
            Some(f) => Topology::load(&self.resolve(f))?,
            None => {
                let mut rng = RngStream::new(seed, "topology");
                self.topology.generator.generate(clients, &mut rng)?
            }
        };
        if topo.clients.len() as u32 != clients {
            return Err(invalid(format!(
                "topology has {} clients but the workload defines {clients}",
                topo.clients.len()
            )));
        }
        Ok(topo)
    }

    /// AS topology for `seed`, if configured.
    pub fn as_topology_for(&self, seed: u64, hosts: &Topology) -> Result<Option<AsTopology>, ConfigError> {
        let Some(section) = &self.as_topology else {
            return Ok(None);
        };
        let topo = match &section.file {
            Some(f) => AsTopology::load(&self.resolve(f))?,
            None => {
                let mut rng = RngStream::new(seed, "as-topology");
                section
                    .generator
                    .generate(hosts, &mut rng)
                    .map_err(|e| invalid(e.to_string()))?
            }
        };
        Ok(Some(topo))
    }
}
