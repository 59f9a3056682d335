//! TOML config file and the merge of file values with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::anyhow;
use netsched_core::workload::ArrivalProcess;
use netsched_core::{
    ClusterConfig, ContentionMode, ContentionParams, CsTable, EpisodeConfig, FeatureScales, Mix,
    RewardWeights, TraceSpec, TrainConfig,
};
use serde::{Deserialize, Serialize};

use crate::args::{ClusterArgs, EpisodeArgs, RewardArgs, TraceArgs};
use crate::failure::{Context, Failure, Outcome};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub output_root: Option<PathBuf>,
    pub seed: Option<u64>,
    pub cluster: ClusterConfig,
    pub episode: EpisodeSettings,
    pub trace: TraceSettings,
    pub reward: RewardSettings,
    pub train: TrainConfig,
    pub scales: Option<FeatureScales>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Outcome<FileConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::File(anyhow!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Failure::File(anyhow!("{}: {e}", path.display())))
    }

    pub fn apply_cluster(&mut self, a: &ClusterArgs) {
        if let Some(n) = a.nodes {
            self.cluster.num_nodes = n;
        }
        if let Some(g) = a.gpus_per_node {
            self.cluster.gpus_per_node = g;
        }
    }

    pub fn cluster(&self) -> Outcome<ClusterConfig> {
        self.cluster
            .validate()
            .map_err(|e| Failure::usage(e.to_string()))?;
        Ok(self.cluster.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeSettings {
    pub interval: f64,
    pub cs_threshold: f64,
    pub preempt_on_contention: bool,
    pub restore_penalty: f64,
    pub livelock_rounds: u32,
    pub max_rounds: usize,
    pub contention: ContentionMode,
    pub cs_table: Option<PathBuf>,
}

impl Default for EpisodeSettings {
    fn default() -> Self {
        EpisodeSettings {
            interval: 1.0,
            cs_threshold: 2.0,
            preempt_on_contention: true,
            restore_penalty: 5.0,
            livelock_rounds: 10,
            max_rounds: 5_000_000,
            contention: ContentionMode::Table,
            cs_table: None,
        }
    }
}

impl EpisodeSettings {
    pub fn apply(&mut self, a: &EpisodeArgs) {
        if let Some(m) = a.contention {
            self.contention = m;
        }
        if a.no_contention {
            self.contention = ContentionMode::Disabled;
        }
        if let Some(p) = &a.cs_table {
            self.cs_table = Some(p.clone());
        }
        if let Some(t) = a.cs_threshold {
            self.cs_threshold = t;
            self.preempt_on_contention = true;
        }
        if a.no_preempt {
            self.preempt_on_contention = false;
        }
        if let Some(i) = a.interval {
            self.interval = i;
        }
    }

    pub fn build(&self, cluster: &ClusterConfig, weights: RewardWeights) -> Outcome<EpisodeConfig> {
        let contention = match self.contention {
            ContentionMode::Disabled => ContentionParams::disabled(),
            ContentionMode::Synthetic => ContentionParams::synthetic(),
            ContentionMode::Table => match &self.cs_table {
                Some(path) => ContentionParams::with_table(CsTable::load(path)?),
                None => ContentionParams::calibrated(cluster),
            },
        };
        let cfg = EpisodeConfig {
            interval: self.interval,
            cs_threshold: self.preempt_on_contention.then_some(self.cs_threshold),
            restore_penalty: self.restore_penalty,
            contention,
            weights,
            livelock_rounds: self.livelock_rounds,
            max_rounds: self.max_rounds,
            audit: false,
        };
        cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSettings {
    pub mix: String,
    pub jobs: usize,
    pub sets: usize,
    pub arrivals: String,
    pub isolated_runtime: f64,
    pub time_scale: f64,
    pub jitter: f64,
    pub max_demand: u32,
}

impl Default for TraceSettings {
    fn default() -> Self {
        TraceSettings {
            mix: "normal".into(),
            jobs: 256,
            sets: 10,
            arrivals: "all-at-zero".into(),
            isolated_runtime: 3600.0,
            time_scale: 1.0 / 60.0,
            jitter: 0.2,
            max_demand: 32,
        }
    }
}

impl TraceSettings {
    pub fn apply(&mut self, a: &TraceArgs) {
        if let Some(m) = &a.mix {
            self.mix = m.clone();
        }
        if let Some(j) = a.jobs {
            self.jobs = j;
        }
        if let Some(s) = a.sets {
            self.sets = s;
        }
        if let Some(p) = &a.arrivals {
            self.arrivals = p.clone();
        }
        if let Some(t) = a.time_scale {
            self.time_scale = t;
        }
    }

    pub fn spec(&self, seed: u64) -> Outcome<TraceSpec> {
        let mix = Mix::named(&self.mix).ok_or_else(|| {
            Failure::usage(format!(
                "unknown mix `{}` (valid: {})",
                self.mix,
                Mix::NAMES.join(", ")
            ))
        })?;
        if self.jobs == 0 || self.sets == 0 {
            return Err(Failure::usage("--jobs and --sets must be at least 1"));
        }
        let arrivals: ArrivalProcess = self.arrivals.parse().map_err(Failure::Usage)?;
        let spec = TraceSpec {
            mix,
            num_jobs: self.jobs,
            num_sets: self.sets,
            seed,
            arrivals,
            isolated_runtime: self.isolated_runtime,
            time_scale: self.time_scale,
            jitter: self.jitter,
            max_demand: self.max_demand,
        };
        spec.validate().map_err(|e| Failure::usage(e.to_string()))?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSettings {
    pub branch: Option<String>,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
}

impl RewardSettings {
    /// Any reward flag replaces the file's reward table as a whole.
    pub fn apply(&mut self, a: &RewardArgs) {
        if a.branch.is_some() || a.w1.is_some() {
            *self = RewardSettings {
                branch: a.branch.clone(),
                w1: a.w1,
                w2: a.w2,
            };
        }
    }

    pub fn resolve(&self) -> Outcome<RewardWeights> {
        match (&self.branch, self.w1) {
            (Some(_), Some(_)) => Err(Failure::usage("give either a branch or w1, not both")),
            (Some(b), None) => RewardWeights::branch(b).ok_or_else(|| {
                Failure::usage(format!(
                    "unknown branch `{b}` (valid: {})",
                    RewardWeights::BRANCHES.join(", ")
                ))
            }),
            (None, Some(w1)) => match self.w2 {
                Some(w2) => RewardWeights::from_pair(w1, w2),
                None => RewardWeights::new(w1),
            }
            .map_err(|e| Failure::usage(e.to_string())),
            (None, None) if self.w2.is_some() => Err(Failure::usage("w2 needs w1")),
            (None, None) => Ok(RewardWeights::default()),
        }
    }
}

/// Branch name of a weight pair, or its w1 value.
pub fn weights_label(w: &RewardWeights) -> String {
    RewardWeights::BRANCHES
        .iter()
        .find(|b| RewardWeights::branch(b).is_some_and(|p| (p.w1() - w.w1()).abs() < 1e-12))
        .map(|b| b.to_string())
        .unwrap_or_else(|| format!("w1-{}", w.w1()))
}

pub fn check_exists(path: &Path, what: &str) -> Outcome<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::File(anyhow!(
            "{what} {} not found",
            path.display()
        )))
    }
}

/// Loads a trace file or generates one from the settings.
pub fn trace_source(
    path: Option<&Path>,
    settings: &TraceSettings,
    seed: u64,
    cluster: &ClusterConfig,
) -> Outcome<(netsched_core::Trace, String)> {
    match path {
        Some(p) => {
            check_exists(p, "trace")?;
            let t = netsched_core::Trace::load(p).context("loading trace")?;
            let id = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "trace".into());
            Ok((t, id))
        }
        None => {
            let spec = settings.spec(seed)?;
            let t = netsched_core::workload::generate_trace(&spec, cluster)
                .context("generating trace")?;
            Ok((t, trace_id(&spec)))
        }
    }
}

pub fn trace_id(spec: &TraceSpec) -> String {
    format!(
        "{}-j{}-n{}-s{}",
        spec.mix.name, spec.num_jobs, spec.num_sets, spec.seed
    )
}
