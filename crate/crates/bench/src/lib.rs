//! Fixtures shared by the benchmarks under `benches/`.

use netsched_core::workload::generate_trace;
use netsched_core::{ClusterConfig, ClusterState, JobId, JobSpec, Mix, ModelProfile, TraceSpec};

/// One job set of the given mix and size.
pub fn job_set(mix: &str, jobs: usize, seed: u64) -> Vec<JobSpec> {
    let spec = TraceSpec::new(Mix::named(mix).expect("built-in mix"), jobs, seed);
    generate_trace(&spec, &ClusterConfig::default())
        .expect("valid recipe")
        .sets
        .remove(0)
}

/// The default cluster filled first-fit from `jobs`, with the profiles of
/// the placed jobs indexed by job id.
pub fn packed_cluster(jobs: &[JobSpec]) -> (ClusterState, Vec<ModelProfile>) {
    let mut cluster = ClusterState::new(ClusterConfig::default()).expect("default config");
    let mut profiles = Vec::new();
    for j in jobs {
        if let Some(p) = cluster.first_fit(j.gpu_demand) {
            let id = JobId(profiles.len() as u32);
            cluster.allocate(id, p).expect("first fit");
            profiles.push(j.profile);
        }
    }
    (cluster, profiles)
}
