//! Fixed-shape observation tensor and candidate selection.
//!
//! The tensor has shape `[nodes][2 * gpus_per_node][FEATURE_DIM]`. The left
//! half mirrors the occupancy grid; the right half holds each candidate at
//! slot `[i][gpus_per_node + j - 1]` for every cluster-feasible `j * 2^i`
//! factorization of its demand.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, ClusterState};
use crate::contention::ModelClass;
use crate::error::{Error, Result};
use crate::workload::Job;

pub const FEATURE_DIM: usize = 10;
pub const DEFAULT_CANDIDATES: usize = 3;

/// Normalization constants for the scalar features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureScales {
    pub bandwidth: f64,
    pub comm_comp: f64,
    /// CS is clipped here before dividing.
    pub cs_cap: f64,
}

impl Default for FeatureScales {
    fn default() -> Self {
        FeatureScales {
            bandwidth: 3000.0,
            comm_comp: 15.0,
            cs_cap: 4.0,
        }
    }
}

impl FeatureScales {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.bandwidth)
            || !ok(self.comm_comp)
            || !(self.cs_cap.is_finite() && self.cs_cap >= 1.0)
        {
            return Err(Error::Config(format!("bad feature scales {self:?}")));
        }
        Ok(())
    }

    /// Feature vector: model one-hot, comm/comp, bandwidth, last CS, progress.
    /// Values above the scale are clipped so every entry stays in `[0, 1]`.
    pub fn features(&self, job: &Job) -> [f64; FEATURE_DIM] {
        let mut f = [0.0; FEATURE_DIM];
        f[job.spec.model_class.index()] = 1.0;
        let n = ModelClass::ALL.len();
        f[n] = (job.spec.profile.comm_comp_ratio / self.comm_comp).min(1.0);
        f[n + 1] = (job.spec.profile.avg_bandwidth / self.bandwidth).min(1.0);
        f[n + 2] = job
            .state
            .last_cs
            .map_or(0.0, |cs| cs.min(self.cs_cap) / self.cs_cap);
        f[n + 3] = job.fraction_done();
        f
    }
}

/// First job of each distinct demand, scanning from the queue head, up to `k`.
pub fn select_candidates<'a>(queue: impl IntoIterator<Item = &'a Job>, k: usize) -> Vec<&'a Job> {
    let mut out: Vec<&Job> = Vec::with_capacity(k);
    for job in queue {
        if out.len() >= k {
            break;
        }
        if out.iter().all(|c| c.spec.gpu_demand != job.spec.gpu_demand) {
            out.push(job);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateTensor {
    nodes: usize,
    width: usize,
    values: Vec<f64>,
}

impl StateTensor {
    pub fn zeros(config: &ClusterConfig) -> StateTensor {
        let nodes = config.num_nodes as usize;
        let width = 2 * config.gpus_per_node as usize;
        StateTensor {
            nodes,
            width,
            values: vec![0.0; nodes * width * FEATURE_DIM],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.nodes, self.width, FEATURE_DIM]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn slot(&self, row: usize, col: usize) -> &[f64] {
        let at = (row * self.width + col) * FEATURE_DIM;
        &self.values[at..at + FEATURE_DIM]
    }

    fn slot_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let at = (row * self.width + col) * FEATURE_DIM;
        &mut self.values[at..at + FEATURE_DIM]
    }

    pub fn is_slot_zero(&self, row: usize, col: usize) -> bool {
        self.slot(row, col).iter().all(|&v| v == 0.0)
    }

    /// `(flat index, value)` for every nonzero entry, in index order.
    pub fn nonzeros(&self) -> Vec<(usize, f64)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, &v)| (i, v))
            .collect()
    }

    /// One CSV grid per feature, separated by a `# feature k` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for k in 0..FEATURE_DIM {
            let _ = writeln!(out, "# feature {k}");
            for r in 0..self.nodes {
                let row: Vec<String> = (0..self.width)
                    .map(|c| self.slot(r, c)[k].to_string())
                    .collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        out
    }
}

/// Builds the observation. `jobs` is indexed by job id.
pub fn encode_state(
    cluster: &ClusterState,
    jobs: &[Job],
    candidates: &[&Job],
    scales: &FeatureScales,
) -> Result<StateTensor> {
    scales.validate()?;
    let config = cluster.config();
    let mut t = StateTensor::zeros(config);
    for (node, slots) in cluster.occupancy().iter().enumerate() {
        for (gpu, occupant) in slots.iter().enumerate() {
            if let Some(id) = occupant {
                let job = jobs
                    .get(id.index())
                    .ok_or_else(|| Error::Precondition(format!("{id} has no job record")))?;
                t.slot_mut(node, gpu).copy_from_slice(&scales.features(job));
            }
        }
    }
    let gpn = config.gpus_per_node as usize;
    for cand in candidates {
        let f = scales.features(cand);
        for shape in config.shapes_for(cand.spec.gpu_demand) {
            let col = gpn + shape.gpus_per_node as usize - 1;
            t.slot_mut(shape.node_exp as usize, col).copy_from_slice(&f);
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{JobId, Placement};
    use crate::contention::ModelProfile;
    use crate::workload::JobSpec;

    fn job(id: u32, demand: u32) -> Job {
        Job::new(JobSpec {
            id: JobId(id),
            model_class: ModelClass::Dlrm,
            gpu_demand: demand,
            total_samples: 100.0,
            ideal_throughput: 1.0,
            arrival_time: 0.0,
            profile: ModelProfile::reference(ModelClass::Dlrm),
        })
    }

    #[test]
    fn candidates_take_first_of_each_demand() {
        let q: Vec<Job> = [8, 8, 4, 2, 8]
            .iter()
            .enumerate()
            .map(|(i, &d)| job(i as u32, d))
            .collect();
        let c = select_candidates(&q, 3);
        let ids: Vec<u32> = c.iter().map(|j| j.id().0).collect();
        assert_eq!(ids, [0, 2, 3]);
        assert!(select_candidates(std::iter::empty(), 3).is_empty());
        assert_eq!(select_candidates(&q, 1).len(), 1);
    }

    #[test]
    fn empty_everything_is_zero() {
        let cluster = ClusterState::new(ClusterConfig::default()).unwrap();
        let t = encode_state(&cluster, &[], &[], &FeatureScales::default()).unwrap();
        assert_eq!(t.shape(), [4, 16, FEATURE_DIM]);
        assert!(t.nonzeros().is_empty());
    }

    #[test]
    fn candidate_demand_four_slots() {
        let cluster = ClusterState::new(ClusterConfig::default()).unwrap();
        let jobs = vec![job(0, 4)];
        let t = encode_state(&cluster, &jobs, &[&jobs[0]], &FeatureScales::default()).unwrap();
        let mut nonzero = Vec::new();
        for r in 0..4 {
            for c in 0..16 {
                if !t.is_slot_zero(r, c) {
                    nonzero.push((r, c));
                }
            }
        }
        // (i=0, j=4), (i=1, j=2), (i=2, j=1)
        assert_eq!(nonzero, [(0, 11), (1, 9), (2, 8)]);
    }

    #[test]
    fn running_job_fills_its_slots() {
        let mut cluster = ClusterState::new(ClusterConfig::default()).unwrap();
        let mut jobs = vec![job(0, 2)];
        let p = Placement::new(vec![0], 2).unwrap();
        cluster.allocate(JobId(0), p.clone()).unwrap();
        jobs[0].start(p, 0.0).unwrap();
        let t = encode_state(&cluster, &jobs, &[], &FeatureScales::default()).unwrap();
        let occupied: Vec<(usize, usize)> = (0..4)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| !t.is_slot_zero(r, c))
            .collect();
        assert_eq!(occupied, [(0, 0), (0, 1)]);
    }

    #[test]
    fn features_are_clipped() {
        let mut j = job(0, 1);
        j.spec.profile.avg_bandwidth = 9000.0;
        j.state.last_cs = Some(10.0);
        let f = FeatureScales::default().features(&j);
        assert!(f.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f[7], 1.0);
        assert_eq!(f[8], 1.0);
    }

    #[test]
    fn bad_scales_rejected() {
        let cluster = ClusterState::new(ClusterConfig::default()).unwrap();
        let scales = FeatureScales {
            bandwidth: 0.0,
            ..FeatureScales::default()
        };
        assert!(matches!(
            encode_state(&cluster, &[], &[], &scales),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_dump_has_one_grid_per_feature() {
        let t = StateTensor::zeros(&ClusterConfig::default());
        let csv = t.to_csv();
        assert_eq!(
            csv.lines().filter(|l| l.starts_with('#')).count(),
            FEATURE_DIM
        );
        assert_eq!(csv.lines().count(), FEATURE_DIM * 5);
    }
}
