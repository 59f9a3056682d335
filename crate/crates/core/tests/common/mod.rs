#![allow(dead_code)]

use netsched_core::contention::ModelClass;
use netsched_core::{ClusterConfig, ClusterState, JobId, JobSpec, ModelProfile};
use proptest::prelude::*;

pub const CLASSES: [ModelClass; 6] = [
    ModelClass::Gnn,
    ModelClass::Img,
    ModelClass::Dlrm,
    ModelClass::Lm,
    ModelClass::Fsdp,
    ModelClass::Moe,
];

/// Job spec whose isolated runtime is `runtime` seconds.
pub fn spec(id: u32, class: ModelClass, demand: u32, runtime: f64) -> JobSpec {
    JobSpec {
        id: JobId(id),
        model_class: class,
        gpu_demand: demand,
        total_samples: runtime * 10.0,
        ideal_throughput: 10.0,
        arrival_time: 0.0,
        profile: ModelProfile::reference(class),
    }
}

/// One requested tenant: class index, demand, and which feasible placement
/// to take (modulo the number available).
pub type Draw = (usize, u32, usize);

pub fn draws(max_jobs: usize) -> impl Strategy<Value = Vec<Draw>> {
    prop::collection::vec((0..6usize, 1..=32u32, any::<usize>()), 0..=max_jobs)
}

/// Builds a cluster state from `draws`, skipping draws with an
/// unschedulable demand or no free placement. Returns the profiles of the
/// placed jobs indexed by job id.
pub fn build(config: &ClusterConfig, draws: &[Draw]) -> (ClusterState, Vec<ModelProfile>) {
    let mut cluster = ClusterState::new(config.clone()).unwrap();
    let mut profiles = Vec::new();
    for &(class, demand, pick) in draws {
        if !config.is_schedulable(demand) {
            continue;
        }
        let options = cluster.enumerate_placements(demand).unwrap();
        if options.is_empty() {
            continue;
        }
        let id = JobId(profiles.len() as u32);
        cluster
            .allocate(id, options[pick % options.len()].clone())
            .unwrap();
        profiles.push(ModelProfile::reference(CLASSES[class]));
    }
    (cluster, profiles)
}
