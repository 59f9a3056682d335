//! Round-based episode driver.

use std::collections::VecDeque;

use log::warn;

use crate::cluster::{ClusterConfig, ClusterState, JobId};
use crate::contention::ContentionParams;
use crate::error::{Error, Result};
use crate::policy::{greedy_place, Decision, RoundContext, Scheduler};
use crate::report::{EpisodeReport, JobRecord, RoundRecord};
use crate::rl::reward::{compute_reward, RewardWeights};
use crate::workload::{Job, JobSpec, Phase};

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    /// Sim-seconds between rounds.
    pub interval: f64,
    /// Running jobs whose CS exceeds this are preempted; `None` disables it.
    pub cs_threshold: Option<f64>,
    /// Sim-seconds a resumed job spends restoring before it progresses.
    pub restore_penalty: f64,
    pub contention: ContentionParams,
    pub weights: RewardWeights,
    /// Idle rounds with queued work before a greedy placement is forced.
    pub livelock_rounds: u32,
    /// Hard cap on rounds per episode.
    pub max_rounds: usize,
    /// Re-check occupancy and work conservation every round.
    pub audit: bool,
}

impl EpisodeConfig {
    /// Defaults with the calibrated CS table for `cluster`.
    pub fn new(cluster: &ClusterConfig) -> EpisodeConfig {
        EpisodeConfig {
            interval: 1.0,
            cs_threshold: Some(2.0),
            restore_penalty: 5.0,
            contention: ContentionParams::calibrated(cluster),
            weights: RewardWeights::default(),
            livelock_rounds: 10,
            max_rounds: 5_000_000,
            audit: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval.is_finite() && self.interval > 0.0) {
            return Err(Error::Config(format!(
                "round interval {} must be > 0",
                self.interval
            )));
        }
        if let Some(t) = self.cs_threshold {
            if !(t > 1.0) {
                return Err(Error::Config(format!("CS threshold {t} must be > 1")));
            }
        }
        if !(self.restore_penalty.is_finite() && self.restore_penalty >= 0.0) {
            return Err(Error::Config("restore penalty must be >= 0".into()));
        }
        if self.livelock_rounds == 0 {
            return Err(Error::Config(
                "livelock guard needs at least one round".into(),
            ));
        }
        self.contention.validate()
    }
}

/// Mutable simulation state for one episode.
struct Engine<'a> {
    cfg: &'a EpisodeConfig,
    cluster: ClusterState,
    jobs: Vec<Job>,
    queue: VecDeque<JobId>,
    /// Time each job was most recently placed.
    placed_at: Vec<f64>,
}

impl Engine<'_> {
    fn running(&self) -> Vec<JobId> {
        self.cluster.placements().keys().copied().collect()
    }

    fn cs_of(&self, id: JobId) -> Result<f64> {
        self.cfg
            .contention
            .job_cs(&self.cluster, id, |o| &self.jobs[o.index()].spec.profile)
    }

    fn preempt(&mut self, id: JobId) -> Result<()> {
        let job = &mut self.jobs[id.index()];
        if job.state.phase != Phase::Running {
            return Err(Error::State(format!(
                "cannot preempt {id} in phase {:?}",
                job.state.phase
            )));
        }
        job.preempt(self.cfg.restore_penalty)?;
        self.cluster.free(id)?;
        Ok(())
    }

    fn apply(&mut self, decision: Decision, now: f64) -> Result<usize> {
        let mut requeue = Vec::with_capacity(decision.preempt.len());
        for id in decision.preempt {
            self.preempt(id)?;
            requeue.push(id);
        }
        for id in requeue.into_iter().rev() {
            self.queue.push_front(id);
        }
        let placed = decision.place.len();
        for (id, placement) in decision.place {
            let pos = self
                .queue
                .iter()
                .position(|&q| q == id)
                .ok_or_else(|| Error::State(format!("{id} is not waiting")))?;
            let job = &mut self.jobs[id.index()];
            if placement.total_gpus() != job.spec.gpu_demand {
                return Err(Error::InvalidPlacement(format!(
                    "{placement} gives {id} {} GPUs, it needs {}",
                    placement.total_gpus(),
                    job.spec.gpu_demand
                )));
            }
            self.cluster.allocate(id, placement.clone())?;
            job.start(placement, now)?;
            self.placed_at[id.index()] = now;
            self.queue.remove(pos);
        }
        Ok(placed)
    }

    /// Preempts the worst offender above the threshold until none remain.
    /// Ties go to the most recently placed job, then the higher id.
    fn enforce_threshold(&mut self) -> Result<()> {
        let Some(threshold) = self.cfg.cs_threshold else {
            return Ok(());
        };
        let mut requeue = Vec::new();
        loop {
            let mut worst: Option<(f64, f64, JobId)> = None;
            for id in self.running() {
                let cs = self.cs_of(id)?;
                if cs > threshold {
                    let key = (cs, self.placed_at[id.index()], id);
                    if worst.is_none_or(|w| {
                        key.0
                            .total_cmp(&w.0)
                            .then(key.1.total_cmp(&w.1))
                            .then(key.2.cmp(&w.2))
                            .is_gt()
                    }) {
                        worst = Some(key);
                    }
                }
            }
            match worst {
                Some((_, _, id)) => {
                    self.preempt(id)?;
                    requeue.push(id);
                }
                None => break,
            }
        }
        for id in requeue.into_iter().rev() {
            self.queue.push_front(id);
        }
        Ok(())
    }
}

/// Checks ids are dense and every demand can be hosted.
pub fn validate_job_set(jobs: &[JobSpec], cluster: &ClusterConfig) -> Result<()> {
    for (i, j) in jobs.iter().enumerate() {
        if j.id.index() != i {
            return Err(Error::Validation(format!(
                "job ids must be 0..n in order, found {} at {i}",
                j.id
            )));
        }
        if !cluster.is_schedulable(j.gpu_demand) {
            return Err(Error::InvalidDemand {
                demand: j.gpu_demand,
                capacity: cluster.total_gpus(),
            });
        }
        if !(j.total_samples > 0.0 && j.ideal_throughput > 0.0 && j.arrival_time >= 0.0) {
            return Err(Error::Validation(format!(
                "{} has a non-positive size or rate",
                j.id
            )));
        }
    }
    Ok(())
}

/// Runs `scheduler` over one job set until every job finishes.
pub fn run_episode(
    scheduler: &mut dyn Scheduler,
    specs: &[JobSpec],
    cluster: &ClusterConfig,
    cfg: &EpisodeConfig,
) -> Result<EpisodeReport> {
    cfg.validate()?;
    cluster.validate()?;
    validate_job_set(specs, cluster)?;
    let n = specs.len();
    let mut arrivals: Vec<usize> = (0..n).collect();
    arrivals.sort_by(|&a, &b| {
        specs[a]
            .arrival_time
            .total_cmp(&specs[b].arrival_time)
            .then(a.cmp(&b))
    });

    let mut eng = Engine {
        cfg,
        cluster: ClusterState::new(cluster.clone())?,
        jobs: specs.iter().cloned().map(Job::new).collect(),
        queue: VecDeque::new(),
        placed_at: vec![0.0; n],
    };
    let t = cfg.interval;
    let mut round: u64 = 0;
    let now_at = |round: u64| round as f64 * t;
    let mut next = 0;
    let mut finished = 0;
    let mut idle = 0u32;
    let mut rounds = Vec::new();

    while finished < n {
        let now = now_at(round);
        while next < n && specs[arrivals[next]].arrival_time <= now {
            eng.queue.push_back(JobId(arrivals[next] as u32));
            next += 1;
        }
        if eng.queue.is_empty() && eng.cluster.is_empty() {
            // Nothing to do until the next arrival.
            let at = specs[arrivals[next]].arrival_time;
            round = ((at / t).ceil() as u64).max(round + 1);
            continue;
        }
        if rounds.len() >= cfg.max_rounds {
            return Err(Error::State(format!(
                "episode exceeded {} rounds with {} of {n} jobs finished",
                cfg.max_rounds, finished
            )));
        }

        let decision = {
            let queue = eng.queue.make_contiguous();
            let ctx = RoundContext {
                now,
                cluster: &eng.cluster,
                jobs: &eng.jobs,
                queue,
            };
            scheduler.decide(&ctx)?
        };
        let placed = eng.apply(decision, now)?;

        if eng.cluster.is_empty() && !eng.queue.is_empty() && placed == 0 {
            idle += 1;
            if idle >= cfg.livelock_rounds {
                let queue: Vec<JobId> = eng.queue.iter().copied().collect();
                let forced: Vec<_> = greedy_place(&eng.cluster, &eng.jobs, queue)
                    .into_iter()
                    .take(1)
                    .collect();
                warn!(
                    "{}: no progress for {idle} rounds at t={now}, forcing {}",
                    scheduler.name(),
                    forced[0].0
                );
                eng.apply(
                    Decision {
                        preempt: Vec::new(),
                        place: forced,
                    },
                    now,
                )?;
                idle = 0;
            }
        } else {
            idle = 0;
        }

        let running = eng.running();
        let mut cs = Vec::with_capacity(running.len());
        for &id in &running {
            cs.push(eng.cs_of(id)?);
        }
        let utilization = eng.cluster.utilization();
        let reward = compute_reward(&cs, utilization, &cfg.weights);
        let mean_cs = (!cs.is_empty()).then(|| cs.iter().sum::<f64>() / cs.len() as f64);

        for (&id, &c) in running.iter().zip(&cs) {
            let job = &mut eng.jobs[id.index()];
            let before = job.state.samples_done;
            let owed = job.state.restore_remaining.min(t);
            let rate = job.spec.ideal_throughput / c;
            let done = job.advance(now, t, rate, c)?;
            if cfg.audit {
                let expect = (rate * (t - owed)).min(job.spec.total_samples - before);
                let got = job.state.samples_done - before;
                if (got - expect).abs() > 1e-9 * expect.abs().max(1.0) {
                    return Err(Error::Audit(format!(
                        "{id}: progressed {got}, expected {expect}"
                    )));
                }
            }
            if done.is_some() {
                eng.cluster.free(id)?;
                finished += 1;
            }
        }
        round += 1;
        eng.enforce_threshold()?;
        if cfg.audit {
            eng.cluster.audit()?;
        }
        rounds.push(RoundRecord {
            time: now,
            utilization,
            mean_cs,
            reward,
            running: running.len(),
            queued: eng.queue.len(),
        });
        scheduler.observe_reward(reward);
    }

    let records = eng
        .jobs
        .iter()
        .map(|j| {
            let finish = j.state.finish_time.expect("all jobs finished");
            JobRecord {
                id: j.id(),
                model_class: j.spec.model_class,
                demand: j.spec.gpu_demand,
                arrival: j.spec.arrival_time,
                start: j.state.start_time.expect("finished jobs started"),
                finish,
                jct: finish - j.spec.arrival_time,
                isolated_runtime: j.spec.isolated_runtime(),
                preemptions: j.state.preemption_count,
                mean_cs: j.state.mean_cs(),
            }
        })
        .collect();
    let report = EpisodeReport::new(scheduler.name(), records, rounds);
    if cfg.audit {
        report.audit()?;
    }
    Ok(report)
}
