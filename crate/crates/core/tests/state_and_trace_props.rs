mod common;

use common::{spec, CLASSES};
use netsched_core::contention::ModelClass;
use netsched_core::encoding::{encode_state, select_candidates};
use netsched_core::workload::{generate_trace, ArrivalProcess, DemandDistribution};
use netsched_core::{ClusterConfig, FeatureScales, Job, Mix, Trace, TraceSpec};
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn tensor_slots_mirror_occupancy_and_candidate_shapes(
        d in common::draws(10),
        queue in prop::collection::vec(prop::sample::select(vec![1u32, 2, 3, 4, 5, 6, 8, 12, 16, 24, 32]), 0..8),
        k in 1usize..5,
    ) {
        let cfg = ClusterConfig::default();
        let (cluster, _) = common::build(&cfg, &d);
        let mut jobs: Vec<Job> = (0..cluster.placements().len())
            .map(|i| Job::new(spec(i as u32, CLASSES[i % 6], 1, 10.0)))
            .collect();
        let first = jobs.len();
        for (n, &demand) in queue.iter().enumerate() {
            jobs.push(Job::new(spec((first + n) as u32, CLASSES[n % 6], demand, 10.0)));
        }
        let cands = select_candidates(&jobs[first..], k);
        let mut seen = Vec::new();
        for c in &cands {
            prop_assert!(!seen.contains(&c.spec.gpu_demand));
            seen.push(c.spec.gpu_demand);
        }
        prop_assert!(cands.len() <= k);
        let distinct = {
            let mut v: Vec<u32> = queue.clone();
            v.sort();
            v.dedup();
            v.len()
        };
        prop_assert_eq!(cands.len(), distinct.min(k));

        let t = encode_state(&cluster, &jobs, &cands, &FeatureScales::default()).unwrap();
        let gpn = cfg.gpus_per_node as usize;
        let left = (0..cfg.num_nodes as usize)
            .flat_map(|r| (0..gpn).map(move |c| (r, c)))
            .filter(|&(r, c)| !t.is_slot_zero(r, c))
            .count();
        prop_assert_eq!(left as u32, cluster.used_gpus());
        for row in 0..cfg.num_nodes as usize {
            for j in 1..=gpn {
                let want = cands.iter().any(|c| c.spec.gpu_demand == (j as u32) << row)
                    && (1usize << row) <= cfg.num_nodes as usize;
                prop_assert_eq!(!t.is_slot_zero(row, gpn + j - 1), want, "slot ({}, {})", row, j);
            }
        }
        let right = (0..cfg.num_nodes as usize)
            .flat_map(|r| (gpn..2 * gpn).map(move |c| (r, c)))
            .filter(|&(r, c)| !t.is_slot_zero(r, c))
            .count();
        let shapes: usize = cands.iter().map(|c| cfg.shapes_for(c.spec.gpu_demand).len()).sum();
        prop_assert_eq!(right, shapes);
        prop_assert!(t.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn traces_round_trip_and_respect_the_recipe(
        mix in prop::sample::select(Mix::NAMES.to_vec()),
        jobs in 1usize..40,
        sets in 1usize..3,
        seed in any::<u64>(),
        poisson in prop::option::of(0.01f64..2.0),
    ) {
        let cfg = ClusterConfig::default();
        let mut ts = TraceSpec::new(Mix::named(mix).unwrap(), jobs, seed);
        ts.num_sets = sets;
        if let Some(rate) = poisson {
            ts.arrivals = ArrivalProcess::Poisson { rate };
        }
        let trace = generate_trace(&ts, &cfg).unwrap();
        prop_assert_eq!(&trace, &generate_trace(&ts, &cfg).unwrap());
        let support = DemandDistribution::new(&cfg, ts.max_demand).unwrap();
        for set in &trace.sets {
            prop_assert_eq!(set.len(), jobs);
            for (i, j) in set.iter().enumerate() {
                prop_assert_eq!(j.id.0 as usize, i);
                prop_assert!(support.support().contains(&j.gpu_demand));
                prop_assert!((j.isolated_runtime() - ts.sim_runtime()).abs() < 1e-9);
                let base = netsched_core::ModelProfile::reference(j.model_class);
                let r = j.profile.avg_bandwidth / base.avg_bandwidth;
                prop_assert!((1.0 - ts.jitter..=1.0 + ts.jitter).contains(&r));
            }
            prop_assert!(set.windows(2).all(|w| w[0].arrival_time <= w[1].arrival_time));
        }
        let mut buf = Vec::new();
        trace.write(&mut buf).unwrap();
        let back = Trace::parse(buf.as_slice(), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, trace);
    }
}

#[test]
fn class_counts_follow_the_mix() {
    let cfg = ClusterConfig::default();
    for name in Mix::NAMES {
        let mix = Mix::named(name).unwrap();
        let trace = generate_trace(&TraceSpec::new(mix.clone(), 6000, 17), &cfg).unwrap();
        let mut counts = [0.0f64; 6];
        for j in &trace.sets[0] {
            counts[j.model_class.index()] += 1.0;
        }
        let stat: f64 = ModelClass::ALL
            .iter()
            .map(|&c| {
                let expected = 6000.0 * mix.fraction(c);
                (counts[c.index()] - expected).powi(2) / expected
            })
            .sum();
        let p = 1.0 - ChiSquared::new(5.0).unwrap().cdf(stat);
        assert!(p > 1e-3, "{name}: chi-square {stat} (p = {p})");
    }
}

#[test]
fn demands_are_uniform_over_the_support() {
    let cfg = ClusterConfig::default();
    let trace = generate_trace(
        &TraceSpec::new(Mix::named("normal").unwrap(), 8000, 5),
        &cfg,
    )
    .unwrap();
    let support = DemandDistribution::new(&cfg, 32).unwrap();
    let k = support.support().len() as f64;
    let expected = 8000.0 / k;
    let stat: f64 = support
        .support()
        .iter()
        .map(|d| {
            let n = trace.sets[0].iter().filter(|j| j.gpu_demand == *d).count() as f64;
            (n - expected).powi(2) / expected
        })
        .sum();
    let p = 1.0 - ChiSquared::new(k - 1.0).unwrap().cdf(stat);
    assert!(p > 1e-3, "chi-square {stat} (p = {p})");
}
