mod common;

use netsched_core::{ClusterConfig, ClusterState, JobId};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Op {
    Place(u32, usize),
    Free(usize),
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(
        prop_oneof![
            (1..=32u32, any::<usize>()).prop_map(|(d, p)| Op::Place(d, p)),
            any::<usize>().prop_map(Op::Free),
        ],
        0..60,
    )
}

fn slots_held(cluster: &ClusterState, job: JobId) -> usize {
    cluster
        .occupancy()
        .iter()
        .flatten()
        .filter(|s| **s == Some(job))
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn allocate_free_sequences_stay_consistent(ops in ops()) {
        let cfg = ClusterConfig::default();
        let total = cfg.total_gpus() as f64;
        let mut cluster = ClusterState::new(cfg.clone()).unwrap();
        let mut live: Vec<(JobId, u32)> = Vec::new();
        let mut next = 0u32;
        for op in ops {
            let before = cluster.utilization();
            match op {
                Op::Place(demand, pick) => {
                    if !cfg.is_schedulable(demand) {
                        prop_assert!(cluster.enumerate_placements(demand).map_or(true, |v| v.is_empty()));
                        continue;
                    }
                    let options = cluster.enumerate_placements(demand).unwrap();
                    prop_assert_eq!(cluster.first_fit(demand), options.first().cloned());
                    for p in &options {
                        prop_assert!(cluster.can_allocate(p));
                        prop_assert_eq!(p.total_gpus(), demand);
                    }
                    if options.is_empty() {
                        continue;
                    }
                    let id = JobId(next);
                    next += 1;
                    let chosen = options[pick % options.len()].clone();
                    cluster.allocate(id, chosen.clone()).unwrap();
                    let again = cluster.clone().allocate(JobId(next + 1000), chosen.clone()).is_ok();
                    prop_assert_eq!(again, cluster.can_allocate(&chosen));
                    live.push((id, demand));
                    prop_assert!((cluster.utilization() - before - demand as f64 / total).abs() < 1e-12);
                }
                Op::Free(pick) => {
                    if live.is_empty() {
                        prop_assert!(cluster.free(JobId(9999)).is_err());
                        continue;
                    }
                    let (id, demand) = live.remove(pick % live.len());
                    cluster.free(id).unwrap();
                    prop_assert!(cluster.free(id).is_err());
                    prop_assert!((before - cluster.utilization() - demand as f64 / total).abs() < 1e-12);
                }
            }
            cluster.audit().unwrap();
            let used: u32 = live.iter().map(|l| l.1).sum();
            prop_assert_eq!(cluster.used_gpus(), used);
            for &(id, demand) in &live {
                prop_assert_eq!(slots_held(&cluster, id), demand as usize);
            }
        }
    }

    #[test]
    fn colocation_is_symmetric(d in common::draws(12)) {
        let (cluster, _) = common::build(&ClusterConfig::default(), &d);
        for &a in cluster.placements().keys() {
            for b in cluster.colocated_jobs(a).unwrap() {
                prop_assert!(a != b);
                prop_assert!(cluster.colocated_jobs(b).unwrap().contains(&a));
                prop_assert!(cluster.placement(a).unwrap().shares_node_with(cluster.placement(b).unwrap()));
            }
        }
    }
}
