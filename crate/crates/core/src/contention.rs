//! Contention sensitivity: the ratio of a job's isolated throughput to its
//! throughput when it shares nodes with other jobs.
//!
//! Two interchangeable estimators are provided. The synthetic estimator
//! treats each node's link as a shared pipe: per-node demand is a job's
//! average bandwidth split evenly over its nodes, and the communication
//! fraction `r / (1 + r)` of a job's step time stretches by the link's
//! oversubscription factor. Every tenant of a node counts against that node's
//! NIC (`inter_node_bandwidth`), except on nodes where all tenants are
//! single-node jobs, which share the internal bus (`intra_node_bandwidth`).
//! Communication and computation are assumed not to overlap.
//!
//! The table estimator looks up calibrated pairwise values keyed by model
//! class and placement shape, falling back to the synthetic estimator for
//! missing pairs. With several co-located jobs the dominant pair wins.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, ClusterState, JobId, Placement, Shape};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModelClass {
    #[serde(rename = "GNN")]
    Gnn,
    #[serde(rename = "IMG")]
    Img,
    #[serde(rename = "DLRM")]
    Dlrm,
    #[serde(rename = "LM")]
    Lm,
    #[serde(rename = "FSDP")]
    Fsdp,
    #[serde(rename = "MoE")]
    Moe,
}

impl ModelClass {
    pub const ALL: [ModelClass; 6] = [
        ModelClass::Gnn,
        ModelClass::Img,
        ModelClass::Dlrm,
        ModelClass::Lm,
        ModelClass::Fsdp,
        ModelClass::Moe,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelClass::Gnn => "GNN",
            ModelClass::Img => "IMG",
            ModelClass::Dlrm => "DLRM",
            ModelClass::Lm => "LM",
            ModelClass::Fsdp => "FSDP",
            ModelClass::Moe => "MoE",
        }
    }
}

impl fmt::Display for ModelClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelClass {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        ModelClass::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown model class `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommPattern {
    AllReduce,
    ReduceScatterAllGather,
    AllToAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub model_class: ModelClass,
    /// MB/s, averaged over a training step.
    pub avg_bandwidth: f64,
    /// Communication time over computation time.
    pub comm_comp_ratio: f64,
    pub comm_pattern: CommPattern,
}

impl ModelProfile {
    /// Profiled reference characteristics of each workload class.
    pub fn reference(model_class: ModelClass) -> ModelProfile {
        let (avg_bandwidth, comm_comp_ratio, comm_pattern) = match model_class {
            ModelClass::Gnn => (24.63, 0.57, CommPattern::AllReduce),
            ModelClass::Img => (211.25, 2.43, CommPattern::AllReduce),
            ModelClass::Dlrm => (170.28, 13.36, CommPattern::AllReduce),
            ModelClass::Lm => (854.82, 1.87, CommPattern::AllReduce),
            ModelClass::Fsdp => (2672.40, 7.32, CommPattern::ReduceScatterAllGather),
            ModelClass::Moe => (929.48, 13.79, CommPattern::AllToAll),
        };
        ModelProfile {
            model_class,
            avg_bandwidth,
            comm_comp_ratio,
            comm_pattern,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.avg_bandwidth.is_finite() && self.avg_bandwidth > 0.0) {
            return Err(Error::Validation(format!(
                "avg_bandwidth {} must be > 0",
                self.avg_bandwidth
            )));
        }
        if !(self.comm_comp_ratio.is_finite() && self.comm_comp_ratio > 0.0) {
            return Err(Error::Validation(format!(
                "comm_comp_ratio {} must be > 0",
                self.comm_comp_ratio
            )));
        }
        Ok(())
    }

    /// Share of step time spent communicating.
    pub fn comm_fraction(&self) -> f64 {
        self.comm_comp_ratio / (1.0 + self.comm_comp_ratio)
    }
}

/// A placed job as seen by the contention model.
#[derive(Debug, Clone, Copy)]
pub struct Tenant<'a> {
    pub profile: &'a ModelProfile,
    pub placement: &'a Placement,
}

impl Tenant<'_> {
    fn per_node_demand(&self) -> f64 {
        self.profile.avg_bandwidth / self.placement.nodes.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CsKey {
    pub target: ModelClass,
    pub target_shape: Shape,
    pub colocated: ModelClass,
    pub colocated_shape: Shape,
}

/// Calibration table for the default 4x8 cluster, as generated by
/// [`CsTable::calibrated`].
pub const SHIPPED_TABLE: &str = include_str!("../data/cs_table.csv");

/// Calibrated pairwise contention sensitivities. `CS(A|B)` and `CS(B|A)` are
/// separate entries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CsTable {
    entries: BTreeMap<CsKey, f64>,
}

impl CsTable {
    pub fn new() -> CsTable {
        CsTable::default()
    }

    pub fn insert(&mut self, key: CsKey, cs: f64) -> Result<()> {
        if !(cs.is_finite() && cs >= 1.0) {
            return Err(Error::Validation(format!(
                "contention sensitivity {cs} is below 1.0"
            )));
        }
        self.entries.insert(key, cs);
        Ok(())
    }

    pub fn get(&self, key: &CsKey) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&CsKey, &f64)> {
        self.entries.iter()
    }

    pub fn shipped() -> CsTable {
        CsTable::parse(SHIPPED_TABLE.as_bytes(), Path::new("data/cs_table.csv"))
            .expect("shipped table parses")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CsTable> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        CsTable::parse(BufReader::new(file), path)
    }

    /// Parses `target,tn,tg,coloc,cn,cg,cs` records; `#` starts a comment.
    pub fn parse(reader: impl BufRead, origin: &Path) -> Result<CsTable> {
        let mut table = CsTable::new();
        for (idx, line) in reader.lines().enumerate() {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split(',').map(str::trim).collect();
            if fields.len() != 7 {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("expected 7 fields, found {}", fields.len()),
                ));
            }
            let model =
                |s: &str| ModelClass::from_str(s).map_err(|m| Error::parse(origin, lineno, m));
            let count = |s: &str| {
                s.parse::<u32>()
                    .map_err(|_| Error::parse(origin, lineno, format!("`{s}` is not a count")))
            };
            let shape = |n: &str, g: &str| {
                let (n, g) = (count(n)?, count(g)?);
                Shape::from_nodes(n, g).ok_or_else(|| {
                    Error::parse(
                        origin,
                        lineno,
                        format!("shape {n}x{g}: node count must be a power of two"),
                    )
                })
            };
            let key = CsKey {
                target: model(fields[0])?,
                target_shape: shape(fields[1], fields[2])?,
                colocated: model(fields[3])?,
                colocated_shape: shape(fields[4], fields[5])?,
            };
            let cs: f64 = fields[6].parse().map_err(|_| {
                Error::parse(origin, lineno, format!("`{}` is not a number", fields[6]))
            })?;
            table.insert(key, cs).map_err(|e| match e {
                Error::Validation(msg) => {
                    Error::Validation(format!("{}:{lineno}: {msg}", origin.display()))
                }
                other => other,
            })?;
        }
        Ok(table)
    }

    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "# target_model,target_nodes,target_gpus_per_node,coloc_model,coloc_nodes,coloc_gpus_per_node,cs_value")?;
        for (k, cs) in &self.entries {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                k.target,
                k.target_shape.num_nodes(),
                k.target_shape.gpus_per_node,
                k.colocated,
                k.colocated_shape.num_nodes(),
                k.colocated_shape.gpus_per_node,
                cs
            )?;
        }
        Ok(())
    }

    /// Calibration table for a cluster: pairwise synthetic values under
    /// maximal node overlap for every pair of shapes that can share a node, with each quoted block rescaled so that its worst
    /// entry equals the measured extreme. Values are rounded to two decimals.
    pub fn calibrated(config: &ClusterConfig) -> CsTable {
        const BLOCKS: [(ModelClass, ModelClass, f64); 4] = [
            (ModelClass::Fsdp, ModelClass::Moe, 1.96),
            (ModelClass::Moe, ModelClass::Fsdp, 3.00),
            (ModelClass::Fsdp, ModelClass::Img, 1.35),
            (ModelClass::Img, ModelClass::Fsdp, 1.43),
        ];
        let shapes: Vec<Shape> = (0..=config.max_node_exp())
            .flat_map(|e| {
                (1..=config.gpus_per_node).map(move |g| Shape {
                    node_exp: e,
                    gpus_per_node: g,
                })
            })
            .collect();
        let mut table = CsTable::new();
        for (target, coloc, worst) in BLOCKS {
            let tp = ModelProfile::reference(target);
            let cp = ModelProfile::reference(coloc);
            let mut block = Vec::new();
            for &ts in &shapes {
                for &cs_shape in &shapes {
                    if ts.gpus_per_node + cs_shape.gpus_per_node > config.gpus_per_node {
                        continue;
                    }
                    let a = Placement {
                        nodes: (0..ts.num_nodes() as usize).collect(),
                        gpus_per_node_used: ts.gpus_per_node,
                    };
                    let b = Placement {
                        nodes: (0..cs_shape.num_nodes() as usize).collect(),
                        gpus_per_node_used: cs_shape.gpus_per_node,
                    };
                    let excess = synthetic_cs(
                        Tenant {
                            profile: &tp,
                            placement: &a,
                        },
                        &[Tenant {
                            profile: &cp,
                            placement: &b,
                        }],
                        config,
                    ) - 1.0;
                    block.push((ts, cs_shape, excess));
                }
            }
            let max_excess = block.iter().map(|b| b.2).fold(0.0, f64::max);
            if max_excess <= 0.0 {
                continue;
            }
            let scale = (worst - 1.0) / max_excess;
            for (ts, cs_shape, excess) in block {
                let value = ((1.0 + excess * scale) * 100.0).round() / 100.0;
                let key = CsKey {
                    target,
                    target_shape: ts,
                    colocated: coloc,
                    colocated_shape: cs_shape,
                };
                table
                    .insert(key, value.max(1.0))
                    .expect("calibrated values are >= 1");
            }
        }
        table
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContentionMode {
    Synthetic,
    #[default]
    Table,
    /// Every job runs at its isolated throughput.
    Disabled,
}

impl FromStr for ContentionMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "synthetic" => Ok(ContentionMode::Synthetic),
            "table" => Ok(ContentionMode::Table),
            "disabled" | "off" => Ok(ContentionMode::Disabled),
            _ => Err(format!(
                "unknown contention mode `{s}` (synthetic, table, disabled)"
            )),
        }
    }
}

/// Contention estimator configuration. Multi-contender combination is fixed
/// to the pairwise maximum in table mode.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentionParams {
    pub mode: ContentionMode,
    pub table: Option<Arc<CsTable>>,
}

impl ContentionParams {
    pub fn synthetic() -> ContentionParams {
        ContentionParams {
            mode: ContentionMode::Synthetic,
            table: None,
        }
    }

    pub fn disabled() -> ContentionParams {
        ContentionParams {
            mode: ContentionMode::Disabled,
            table: None,
        }
    }

    pub fn with_table(table: CsTable) -> ContentionParams {
        ContentionParams {
            mode: ContentionMode::Table,
            table: Some(Arc::new(table)),
        }
    }

    /// Table mode backed by the calibration table for `config`.
    pub fn calibrated(config: &ClusterConfig) -> ContentionParams {
        ContentionParams::with_table(CsTable::calibrated(config))
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == ContentionMode::Table && self.table.is_none() {
            return Err(Error::Config(
                "table contention mode requires a CS table".into(),
            ));
        }
        Ok(())
    }

    /// Contention sensitivity of `job` given the other placed jobs. Jobs in
    /// `colocated` that share no node with `job` are ignored.
    pub fn contention_sensitivity(
        &self,
        job: Tenant<'_>,
        colocated: &[Tenant<'_>],
        config: &ClusterConfig,
    ) -> Result<f64> {
        if job.placement.nodes.is_empty() {
            return Err(Error::Precondition("job is not placed".into()));
        }
        let sharing: Vec<Tenant<'_>> = colocated
            .iter()
            .filter(|c| c.placement.shares_node_with(job.placement))
            .copied()
            .collect();
        if sharing.is_empty() {
            return Ok(1.0);
        }
        Ok(match self.mode {
            ContentionMode::Disabled => 1.0,
            ContentionMode::Synthetic => synthetic_cs(job, &sharing, config),
            ContentionMode::Table => {
                let table = self.table.as_deref().ok_or_else(|| {
                    Error::Config("table contention mode requires a CS table".into())
                })?;
                sharing
                    .iter()
                    .map(|c| {
                        let key = CsKey {
                            target: job.profile.model_class,
                            target_shape: job.placement.shape(),
                            colocated: c.profile.model_class,
                            colocated_shape: c.placement.shape(),
                        };
                        table
                            .get(&key)
                            .unwrap_or_else(|| synthetic_cs(job, std::slice::from_ref(c), config))
                    })
                    .fold(1.0, f64::max)
            }
        })
    }

    /// Throughput under contention: `ideal / CS`.
    pub fn contended_throughput(
        &self,
        ideal_throughput: f64,
        job: Tenant<'_>,
        colocated: &[Tenant<'_>],
        config: &ClusterConfig,
    ) -> Result<f64> {
        Ok(ideal_throughput / self.contention_sensitivity(job, colocated, config)?)
    }

    /// Contention sensitivity of a job already placed on `cluster`.
    pub fn job_cs<'a>(
        &self,
        cluster: &ClusterState,
        job: JobId,
        profile_of: impl Fn(JobId) -> &'a ModelProfile,
    ) -> Result<f64> {
        let placement = cluster
            .placement(job)
            .ok_or_else(|| Error::Precondition(format!("{job} is not placed")))?;
        let others: Vec<JobId> = cluster.colocated_jobs(job)?.into_iter().collect();
        let tenants: Vec<Tenant<'_>> = others
            .iter()
            .map(|&o| Tenant {
                profile: profile_of(o),
                placement: cluster.placement(o).expect("colocated job is placed"),
            })
            .collect();
        self.contention_sensitivity(
            Tenant {
                profile: profile_of(job),
                placement,
            },
            &tenants,
            cluster.config(),
        )
    }
}

/// Synthetic bandwidth-sharing estimate. Only nodes where `job` meets at least
/// one contender on the same link count toward the slowdown.
pub fn synthetic_cs(job: Tenant<'_>, colocated: &[Tenant<'_>], config: &ClusterConfig) -> f64 {
    let spans = job.placement.spans_network();
    let mut worst: f64 = 1.0;
    for node in &job.placement.nodes {
        let mut demand = job.per_node_demand();
        let mut contenders = 0;
        let mut internal = !spans;
        for c in colocated
            .iter()
            .filter(|c| c.placement.nodes.contains(node))
        {
            demand += c.per_node_demand();
            contenders += 1;
            internal &= !c.placement.spans_network();
        }
        if contenders > 0 {
            // Only a node whose tenants all stay inside it is bounded by the bus.
            let capacity = if internal {
                config.intra_node_bandwidth
            } else {
                config.inter_node_bandwidth
            };
            worst = worst.max(demand / capacity);
        }
    }
    1.0 + job.profile.comm_fraction() * (worst - 1.0)
}
