//! Physical cluster model: nodes, GPU slots, and per-job placements.
//!
//! A placement spreads a job's demand `j * 2^i` evenly over `2^i` distinct
//! nodes with `j` GPUs on each. Within a node, a job takes the lowest-indexed
//! free GPU slots, so replaying the same sequence of allocations always
//! produces the same occupancy grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Dense job identifier; traces number jobs `0..n` within a job set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct JobId(pub u32);

impl JobId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for JobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "job {}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub num_nodes: u32,
    pub gpus_per_node: u32,
    /// Per-node NIC bandwidth in MB/s.
    pub inter_node_bandwidth: f64,
    /// Per-node internal bus bandwidth in MB/s.
    pub intra_node_bandwidth: f64,
}

impl Default for ClusterConfig {
    /// Four nodes with eight GPUs each, 10 Gb/s Ethernet between nodes and a
    /// 16 GB/s PCIe bus inside each node.
    fn default() -> Self {
        ClusterConfig {
            num_nodes: 4,
            gpus_per_node: 8,
            inter_node_bandwidth: 1250.0,
            intra_node_bandwidth: 16000.0,
        }
    }
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_nodes == 0 || self.gpus_per_node == 0 {
            return Err(Error::Config(format!(
                "cluster needs at least one node and one GPU per node, got {}x{}",
                self.num_nodes, self.gpus_per_node
            )));
        }
        let bw_ok = |b: f64| b.is_finite() && b > 0.0;
        if !bw_ok(self.inter_node_bandwidth) || !bw_ok(self.intra_node_bandwidth) {
            return Err(Error::Config(format!(
                "bandwidths must be positive, got inter={} intra={}",
                self.inter_node_bandwidth, self.intra_node_bandwidth
            )));
        }
        Ok(())
    }

    pub fn total_gpus(&self) -> u32 {
        self.num_nodes * self.gpus_per_node
    }

    /// Largest `i` with `2^i <= num_nodes`.
    pub fn max_node_exp(&self) -> u32 {
        self.num_nodes.ilog2()
    }

    /// Every `(i, j)` shape with `j * 2^i == demand` that fits the cluster's
    /// dimensions, ordered by ascending `i`.
    pub fn shapes_for(&self, demand: u32) -> Vec<Shape> {
        (0..=self.max_node_exp())
            .filter_map(|exp| {
                let nodes = 1u32 << exp;
                (demand % nodes == 0)
                    .then(|| demand / nodes)
                    .filter(|&j| j >= 1 && j <= self.gpus_per_node)
                    .map(|j| Shape {
                        node_exp: exp,
                        gpus_per_node: j,
                    })
            })
            .collect()
    }

    /// Whether some shape can host `demand` on an empty cluster.
    pub fn is_schedulable(&self, demand: u32) -> bool {
        demand >= 1 && !self.shapes_for(demand).is_empty()
    }

    /// All node subsets of power-of-two size, ascending by size then
    /// lexicographic by node ids. This is the per-candidate action alphabet.
    pub fn node_subsets(&self) -> Vec<Vec<NodeId>> {
        let n = self.num_nodes as usize;
        let mut out = Vec::new();
        for exp in 0..=self.max_node_exp() {
            combinations(n, 1usize << exp, &mut out);
        }
        out
    }
}

fn combinations(n: usize, k: usize, out: &mut Vec<Vec<NodeId>>) {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<NodeId>, out: &mut Vec<Vec<NodeId>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for v in start..n {
            if n - v < k - cur.len() {
                break;
            }
            cur.push(v);
            rec(v + 1, n, k, cur, out);
            cur.pop();
        }
    }
    rec(0, n, k, &mut Vec::with_capacity(k), out);
}

/// Placement shape: `2^node_exp` nodes with `gpus_per_node` GPUs on each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub node_exp: u32,
    pub gpus_per_node: u32,
}

impl Shape {
    pub fn num_nodes(&self) -> u32 {
        1 << self.node_exp
    }

    pub fn total_gpus(&self) -> u32 {
        self.num_nodes() * self.gpus_per_node
    }

    /// Builds a shape from a node count, which must be a power of two.
    pub fn from_nodes(nodes: u32, gpus_per_node: u32) -> Option<Shape> {
        (nodes.is_power_of_two() && gpus_per_node >= 1).then(|| Shape {
            node_exp: nodes.trailing_zeros(),
            gpus_per_node,
        })
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.num_nodes(), self.gpus_per_node)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Placement {
    /// Ascending, distinct node ids; length is a power of two.
    pub nodes: Vec<NodeId>,
    pub gpus_per_node_used: u32,
}

impl Placement {
    pub fn new(mut nodes: Vec<NodeId>, gpus_per_node_used: u32) -> Result<Placement> {
        nodes.sort_unstable();
        let len = nodes.len();
        nodes.dedup();
        if nodes.len() != len {
            return Err(Error::InvalidPlacement(
                "duplicate node in placement".into(),
            ));
        }
        if !len.is_power_of_two() {
            return Err(Error::InvalidPlacement(format!(
                "node count {len} is not a power of two"
            )));
        }
        if gpus_per_node_used == 0 {
            return Err(Error::InvalidPlacement("zero GPUs per node".into()));
        }
        Ok(Placement {
            nodes,
            gpus_per_node_used,
        })
    }

    pub fn num_nodes(&self) -> u32 {
        self.nodes.len() as u32
    }

    pub fn total_gpus(&self) -> u32 {
        self.num_nodes() * self.gpus_per_node_used
    }

    pub fn shape(&self) -> Shape {
        Shape {
            node_exp: self.nodes.len().trailing_zeros(),
            gpus_per_node: self.gpus_per_node_used,
        }
    }

    pub fn spans_network(&self) -> bool {
        self.nodes.len() > 1
    }

    pub fn shares_node_with(&self, other: &Placement) -> bool {
        // Both lists are sorted and tiny.
        self.nodes.iter().any(|n| other.nodes.contains(n))
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes: Vec<String> = self.nodes.iter().map(|n| n.to_string()).collect();
        write!(f, "[{}]x{}", nodes.join(" "), self.gpus_per_node_used)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterState {
    config: ClusterConfig,
    occupancy: Vec<Vec<Option<JobId>>>,
    placements: BTreeMap<JobId, Placement>,
    free: Vec<u32>,
    used: u32,
}

impl ClusterState {
    pub fn new(config: ClusterConfig) -> Result<ClusterState> {
        config.validate()?;
        let nodes = config.num_nodes as usize;
        let gpus = config.gpus_per_node as usize;
        Ok(ClusterState {
            occupancy: vec![vec![None; gpus]; nodes],
            placements: BTreeMap::new(),
            free: vec![config.gpus_per_node; nodes],
            used: 0,
            config,
        })
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn occupancy(&self) -> &[Vec<Option<JobId>>] {
        &self.occupancy
    }

    pub fn placements(&self) -> &BTreeMap<JobId, Placement> {
        &self.placements
    }

    pub fn placement(&self, job: JobId) -> Option<&Placement> {
        self.placements.get(&job)
    }

    pub fn free_gpus(&self, node: NodeId) -> u32 {
        self.free[node]
    }

    pub fn used_gpus(&self) -> u32 {
        self.used
    }

    pub fn total_gpus(&self) -> u32 {
        self.config.total_gpus()
    }

    pub fn is_empty(&self) -> bool {
        self.placements.is_empty()
    }

    /// Fraction of GPU slots currently occupied.
    pub fn utilization(&self) -> f64 {
        self.used as f64 / self.total_gpus() as f64
    }

    /// Every feasible placement for `demand`, ascending by node count and
    /// then by node ids. Only nodes with at least `j` free GPUs are used.
    pub fn enumerate_placements(&self, demand: u32) -> Result<Vec<Placement>> {
        let capacity = self.total_gpus();
        if demand == 0 || demand > capacity {
            return Err(Error::InvalidDemand { demand, capacity });
        }
        let mut out = Vec::new();
        for shape in self.config.shapes_for(demand) {
            let j = shape.gpus_per_node;
            let eligible: Vec<NodeId> = (0..self.free.len())
                .filter(|&n| self.free[n] >= j)
                .collect();
            let k = shape.num_nodes() as usize;
            if eligible.len() < k {
                continue;
            }
            let mut idx = Vec::new();
            combinations(eligible.len(), k, &mut idx);
            out.extend(idx.into_iter().map(|c| Placement {
                nodes: c.into_iter().map(|i| eligible[i]).collect(),
                gpus_per_node_used: j,
            }));
        }
        Ok(out)
    }

    /// First placement in `enumerate_placements` order, without building the
    /// whole list.
    pub fn first_fit(&self, demand: u32) -> Option<Placement> {
        for shape in self.config.shapes_for(demand) {
            let j = shape.gpus_per_node;
            let k = shape.num_nodes() as usize;
            let nodes: Vec<NodeId> = (0..self.free.len())
                .filter(|&n| self.free[n] >= j)
                .take(k)
                .collect();
            if nodes.len() == k {
                return Some(Placement {
                    nodes,
                    gpus_per_node_used: j,
                });
            }
        }
        None
    }

    /// Whether `placement` fits the current occupancy.
    pub fn can_allocate(&self, placement: &Placement) -> bool {
        self.check_placement(JobId(u32::MAX), placement).is_ok()
    }

    fn check_placement(&self, job: JobId, placement: &Placement) -> Result<()> {
        let p = placement;
        if p.nodes.is_empty() || !p.nodes.len().is_power_of_two() {
            return Err(Error::InvalidPlacement(format!(
                "{p}: node count must be a power of two"
            )));
        }
        if p.gpus_per_node_used == 0 || p.gpus_per_node_used > self.config.gpus_per_node {
            return Err(Error::InvalidPlacement(format!(
                "{p}: GPUs per node must be in 1..={}",
                self.config.gpus_per_node
            )));
        }
        if p.nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidPlacement(format!(
                "{p}: nodes must be ascending and distinct"
            )));
        }
        if let Some(&bad) = p.nodes.iter().find(|&&n| n >= self.free.len()) {
            return Err(Error::InvalidPlacement(format!("{p}: unknown node {bad}")));
        }
        for &node in &p.nodes {
            if self.free[node] < p.gpus_per_node_used {
                return Err(Error::AllocationConflict {
                    job,
                    node,
                    free: self.free[node],
                    needed: p.gpus_per_node_used,
                });
            }
        }
        Ok(())
    }

    /// Places `job`. On error the state is left untouched.
    pub fn allocate(&mut self, job: JobId, placement: Placement) -> Result<()> {
        if self.placements.contains_key(&job) {
            return Err(Error::Precondition(format!("{job} is already placed")));
        }
        self.check_placement(job, &placement)?;
        let j = placement.gpus_per_node_used;
        for &node in &placement.nodes {
            let mut left = j;
            for slot in self.occupancy[node].iter_mut() {
                if left == 0 {
                    break;
                }
                if slot.is_none() {
                    *slot = Some(job);
                    left -= 1;
                }
            }
            self.free[node] -= j;
        }
        self.used += placement.total_gpus();
        self.placements.insert(job, placement);
        Ok(())
    }

    /// Vacates every slot held by `job` and returns its placement.
    pub fn free(&mut self, job: JobId) -> Result<Placement> {
        let placement = self.placements.remove(&job).ok_or(Error::NotFound(job))?;
        for &node in &placement.nodes {
            for slot in self.occupancy[node].iter_mut() {
                if *slot == Some(job) {
                    *slot = None;
                }
            }
            self.free[node] += placement.gpus_per_node_used;
        }
        self.used -= placement.total_gpus();
        Ok(placement)
    }

    /// Other jobs sharing at least one node with `job`.
    pub fn colocated_jobs(&self, job: JobId) -> Result<BTreeSet<JobId>> {
        let placement = self.placements.get(&job).ok_or(Error::NotFound(job))?;
        let mut out = BTreeSet::new();
        for &node in &placement.nodes {
            out.extend(
                self.occupancy[node]
                    .iter()
                    .flatten()
                    .filter(|&&other| other != job),
            );
        }
        Ok(out)
    }

    /// Rebuilds the bookkeeping from the occupancy grid and checks it against
    /// the placement map.
    pub fn audit(&self) -> Result<()> {
        let mut counts: BTreeMap<(JobId, NodeId), u32> = BTreeMap::new();
        let mut used = 0;
        for (node, slots) in self.occupancy.iter().enumerate() {
            let occupied = slots.iter().flatten().count() as u32;
            if self.free[node] + occupied != self.config.gpus_per_node {
                return Err(Error::Audit(format!(
                    "node {node}: free count {} disagrees with {occupied} occupied slots",
                    self.free[node]
                )));
            }
            used += occupied;
            for job in slots.iter().flatten() {
                *counts.entry((*job, node)).or_default() += 1;
            }
        }
        if used != self.used {
            return Err(Error::Audit(format!(
                "used counter {} but grid has {used}",
                self.used
            )));
        }
        let mut expected: BTreeMap<(JobId, NodeId), u32> = BTreeMap::new();
        for (&job, p) in &self.placements {
            for &node in &p.nodes {
                expected.insert((job, node), p.gpus_per_node_used);
            }
        }
        if counts != expected {
            return Err(Error::Audit(
                "occupancy grid and placements disagree".into(),
            ));
        }
        Ok(())
    }
}
