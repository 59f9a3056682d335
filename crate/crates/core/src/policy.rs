//! Scheduling policies behind one per-round decision interface.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, ClusterState, JobId, NodeId, Placement};
use crate::encoding::{encode_state, select_candidates, FeatureScales};
use crate::error::{Error, Result};
use crate::rl::net::{argmax_masked, masked_softmax, sample_masked, PolicyNet};
use crate::rl::train::Step;
use crate::workload::Job;

/// What the engine sees at a round boundary. `jobs` is indexed by job id;
/// `queue` lists waiting and preempted jobs in queue order.
#[derive(Debug, Clone, Copy)]
pub struct RoundContext<'a> {
    pub now: f64,
    pub cluster: &'a ClusterState,
    pub jobs: &'a [Job],
    pub queue: &'a [JobId],
}

impl RoundContext<'_> {
    fn job(&self, id: JobId) -> &Job {
        &self.jobs[id.index()]
    }
}

/// Preemptions are applied before placements.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decision {
    pub preempt: Vec<JobId>,
    pub place: Vec<(JobId, Placement)>,
}

impl Decision {
    pub fn is_empty(&self) -> bool {
        self.preempt.is_empty() && self.place.is_empty()
    }
}

pub trait Scheduler {
    fn name(&self) -> String;

    fn decide(&mut self, ctx: &RoundContext<'_>) -> Result<Decision>;

    /// Reward for the interval that followed the latest decision.
    fn observe_reward(&mut self, _reward: f64) {}
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    FifoGreedy,
    Las,
    Srtf,
    RlBase,
    RlHybrid,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::FifoGreedy,
        PolicyKind::Las,
        PolicyKind::Srtf,
        PolicyKind::RlBase,
        PolicyKind::RlHybrid,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FifoGreedy => "fifo-greedy",
            PolicyKind::Las => "las",
            PolicyKind::Srtf => "srtf",
            PolicyKind::RlBase => "rl-base",
            PolicyKind::RlHybrid => "rl-hybrid",
        }
    }

    pub fn needs_checkpoint(self) -> bool {
        matches!(self, PolicyKind::RlBase | PolicyKind::RlHybrid)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                let names: Vec<&str> = PolicyKind::ALL.iter().map(|k| k.name()).collect();
                format!(
                    "unknown policy `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Places jobs in `order`, each at its first feasible placement on a scratch
/// copy of the cluster, skipping jobs that do not fit.
pub fn greedy_place(
    cluster: &ClusterState,
    jobs: &[Job],
    order: impl IntoIterator<Item = JobId>,
) -> Vec<(JobId, Placement)> {
    let mut scratch = cluster.clone();
    greedy_into(&mut scratch, jobs, order)
}

fn greedy_into(
    scratch: &mut ClusterState,
    jobs: &[Job],
    order: impl IntoIterator<Item = JobId>,
) -> Vec<(JobId, Placement)> {
    let mut out = Vec::new();
    for id in order {
        if scratch.used_gpus() == scratch.total_gpus() {
            break;
        }
        if let Some(p) = scratch.first_fit(jobs[id.index()].spec.gpu_demand) {
            scratch
                .allocate(id, p.clone())
                .expect("first fit is feasible");
            out.push((id, p));
        }
    }
    out
}

/// Least attained service first; ties by arrival time, then id.
pub fn las_order(jobs: &[Job], queue: &[JobId]) -> Vec<JobId> {
    sorted_by_key(jobs, queue, |j| j.state.attained_service)
}

/// Shortest ideal remaining time first; ties by arrival time, then id.
pub fn srtf_order(jobs: &[Job], queue: &[JobId]) -> Vec<JobId> {
    sorted_by_key(jobs, queue, Job::remaining_time)
}

fn sorted_by_key(jobs: &[Job], queue: &[JobId], key: impl Fn(&Job) -> f64) -> Vec<JobId> {
    let mut ids = queue.to_vec();
    ids.sort_by(|&a, &b| {
        let (ja, jb) = (&jobs[a.index()], &jobs[b.index()]);
        key(ja)
            .total_cmp(&key(jb))
            .then(ja.spec.arrival_time.total_cmp(&jb.spec.arrival_time))
            .then(a.cmp(&b))
    });
    ids
}

#[derive(Debug, Clone, Default)]
pub struct FifoGreedy;

impl Scheduler for FifoGreedy {
    fn name(&self) -> String {
        PolicyKind::FifoGreedy.name().into()
    }

    fn decide(&mut self, ctx: &RoundContext<'_>) -> Result<Decision> {
        Ok(Decision {
            preempt: Vec::new(),
            place: greedy_place(ctx.cluster, ctx.jobs, ctx.queue.iter().copied()),
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Las;

impl Scheduler for Las {
    fn name(&self) -> String {
        PolicyKind::Las.name().into()
    }

    fn decide(&mut self, ctx: &RoundContext<'_>) -> Result<Decision> {
        let order = las_order(ctx.jobs, ctx.queue);
        Ok(Decision {
            preempt: Vec::new(),
            place: greedy_place(ctx.cluster, ctx.jobs, order),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Srtf {
    pub preemptive: bool,
}

impl Default for Srtf {
    fn default() -> Self {
        Srtf { preemptive: true }
    }
}

impl Scheduler for Srtf {
    fn name(&self) -> String {
        if self.preemptive {
            PolicyKind::Srtf.name().into()
        } else {
            "srtf-np".into()
        }
    }

    fn decide(&mut self, ctx: &RoundContext<'_>) -> Result<Decision> {
        let order = srtf_order(ctx.jobs, ctx.queue);
        let mut scratch = ctx.cluster.clone();
        let mut decision = Decision {
            preempt: Vec::new(),
            place: greedy_into(&mut scratch, ctx.jobs, order.iter().copied()),
        };
        if !self.preemptive {
            return Ok(decision);
        }
        for &id in &order {
            if decision.place.iter().any(|(p, _)| *p == id) {
                continue;
            }
            let job = ctx.job(id);
            // Room freed by earlier preemptions in this round.
            if let Some(p) = scratch.first_fit(job.spec.gpu_demand) {
                scratch.allocate(id, p.clone())?;
                decision.place.push((id, p));
                continue;
            }
            let mine = job.remaining_time();
            // Running jobs with strictly more remaining work, longest first.
            let mut victims: Vec<JobId> = ctx
                .cluster
                .placements()
                .keys()
                .copied()
                .filter(|v| !decision.preempt.contains(v) && ctx.job(*v).remaining_time() > mine)
                .collect();
            victims.sort_by(|&a, &b| {
                ctx.job(b)
                    .remaining_time()
                    .total_cmp(&ctx.job(a).remaining_time())
                    .then(b.cmp(&a))
            });
            let mut trial = scratch.clone();
            for (n, &v) in victims.iter().enumerate() {
                trial.free(v)?;
                if let Some(p) = trial.first_fit(job.spec.gpu_demand) {
                    trial.allocate(id, p.clone())?;
                    scratch = trial;
                    decision.preempt.extend_from_slice(&victims[..=n]);
                    decision.place.push((id, p));
                    break;
                }
            }
        }
        Ok(decision)
    }
}

/// Per-candidate choice alphabet: every power-of-two node subset, then skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionSpace {
    config: ClusterConfig,
    subsets: Vec<Vec<NodeId>>,
    heads: usize,
}

impl ActionSpace {
    pub fn new(config: &ClusterConfig, heads: usize) -> Result<ActionSpace> {
        config.validate()?;
        let subsets = config.node_subsets();
        if heads == 0 || subsets.len() + 1 > 64 {
            return Err(Error::Config(format!(
                "action space with {heads} heads and {} subsets is not supported",
                subsets.len()
            )));
        }
        Ok(ActionSpace {
            config: config.clone(),
            subsets,
            heads,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_size(&self) -> usize {
        self.subsets.len() + 1
    }

    pub fn skip(&self) -> usize {
        self.subsets.len()
    }

    pub fn subsets(&self) -> &[Vec<NodeId>] {
        &self.subsets
    }

    /// Placement for `choice` if the subset size divides `demand` into a
    /// legal per-node share.
    pub fn placement_for(&self, choice: usize, demand: u32) -> Option<Placement> {
        let nodes = self.subsets.get(choice)?;
        let n = nodes.len() as u32;
        if demand % n != 0 || demand / n > self.config.gpus_per_node {
            return None;
        }
        Some(Placement {
            nodes: nodes.clone(),
            gpus_per_node_used: demand / n,
        })
    }

    /// Bitmask of feasible choices against `scratch`. Skip is always set.
    pub fn mask(&self, scratch: &ClusterState, demand: Option<u32>) -> u64 {
        let mut mask = 1u64 << self.skip();
        if let Some(d) = demand {
            for c in 0..self.subsets.len() {
                if let Some(p) = self.placement_for(c, d) {
                    if p.nodes
                        .iter()
                        .all(|&n| scratch.free_gpus(n) >= p.gpus_per_node_used)
                    {
                        mask |= 1 << c;
                    }
                }
            }
        }
        mask
    }
}

#[derive(Debug, Clone)]
pub enum Selection {
    /// Sample each head from its masked distribution.
    Sample(ChaCha8Rng),
    /// Highest-probability feasible choice; ties go to the lower index.
    Greedy,
}

/// Scheduler driven by a policy network over the candidate action space.
#[derive(Debug, Clone)]
pub struct RlScheduler {
    net: Arc<PolicyNet>,
    space: ActionSpace,
    scales: FeatureScales,
    selection: Selection,
    hybrid: bool,
    record: bool,
    steps: Vec<Step>,
}

impl RlScheduler {
    pub fn new(
        net: Arc<PolicyNet>,
        space: ActionSpace,
        scales: FeatureScales,
        selection: Selection,
        hybrid: bool,
    ) -> Result<RlScheduler> {
        let arch = net.architecture();
        let input = space.config.num_nodes as usize
            * 2
            * space.config.gpus_per_node as usize
            * crate::encoding::FEATURE_DIM;
        if arch.heads != space.heads()
            || arch.head_size != space.head_size()
            || arch.input_dim != input
        {
            return Err(Error::CheckpointMismatch {
                found: arch.to_string(),
                expected: format!(
                    "mlp(in={input}, hidden={}x2, heads={}x{})",
                    arch.hidden,
                    space.heads(),
                    space.head_size()
                ),
            });
        }
        scales.validate()?;
        Ok(RlScheduler {
            net,
            space,
            scales,
            selection,
            hybrid,
            record: false,
            steps: Vec::new(),
        })
    }

    /// Keeps `(state, action, reward)` steps for a later update.
    pub fn recording(mut self) -> RlScheduler {
        self.record = true;
        self
    }

    pub fn take_steps(&mut self) -> Vec<Step> {
        std::mem::take(&mut self.steps)
    }

    fn choose(&mut self, probs: &[f64], mask: u64) -> usize {
        let choice = match &mut self.selection {
            Selection::Greedy => argmax_masked(probs, mask),
            Selection::Sample(rng) => sample_masked(probs, mask, rng.random()),
        };
        choice.unwrap_or(self.space.skip())
    }
}

impl Scheduler for RlScheduler {
    fn name(&self) -> String {
        if self.hybrid {
            PolicyKind::RlHybrid.name().into()
        } else {
            PolicyKind::RlBase.name().into()
        }
    }

    fn decide(&mut self, ctx: &RoundContext<'_>) -> Result<Decision> {
        if ctx.queue.is_empty() && !self.record {
            return Ok(Decision::default());
        }
        let candidates =
            select_candidates(ctx.queue.iter().map(|&id| ctx.job(id)), self.space.heads());
        let tensor = encode_state(ctx.cluster, ctx.jobs, &candidates, &self.scales)?;
        let input = tensor.nonzeros();
        let fwd = self.net.forward(&input);
        let hs = self.space.head_size();
        let mut scratch = ctx.cluster.clone();
        let mut place = Vec::new();
        let mut choices = Vec::with_capacity(self.space.heads());
        let mut masks = Vec::with_capacity(self.space.heads());
        for k in 0..self.space.heads() {
            let cand = candidates.get(k);
            let mask = self.space.mask(&scratch, cand.map(|c| c.spec.gpu_demand));
            let probs = masked_softmax(fwd.head_logits(k, hs), mask);
            let choice = self.choose(&probs, mask);
            if let (Some(job), Some(p)) = (
                cand,
                self.space
                    .placement_for(choice, cand.map_or(0, |c| c.spec.gpu_demand)),
            ) {
                scratch.allocate(job.id(), p.clone())?;
                place.push((job.id(), p));
            }
            choices.push(choice as u8);
            masks.push(mask);
        }
        if self.record {
            self.steps.push(Step {
                input,
                choices,
                masks,
                reward: f64::NAN,
                span: 1,
            });
        }
        if self.hybrid && place.is_empty() {
            place = greedy_place(ctx.cluster, ctx.jobs, ctx.queue.iter().copied());
        }
        Ok(Decision {
            preempt: Vec::new(),
            place,
        })
    }

    fn observe_reward(&mut self, reward: f64) {
        if let Some(last) = self.steps.last_mut() {
            if last.reward.is_nan() {
                last.reward = reward;
            }
        }
    }
}

/// Convenience ordering check used by tests and audits.
pub fn is_sorted_by(jobs: &[Job], order: &[JobId], key: impl Fn(&Job) -> f64) -> bool {
    order.windows(2).all(|w| {
        let (a, b) = (&jobs[w[0].index()], &jobs[w[1].index()]);
        match key(a).total_cmp(&key(b)) {
            Ordering::Less => true,
            Ordering::Greater => false,
            Ordering::Equal => (a.spec.arrival_time, a.id()) <= (b.spec.arrival_time, b.id()),
        }
    })
}
