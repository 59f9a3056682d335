//! Jobs, their lifecycle, and synthetic trace generation.

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, JobId, Placement};
use crate::contention::{ModelClass, ModelProfile};
use crate::error::{Error, Result};

/// Immutable description of a training job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub id: JobId,
    pub model_class: ModelClass,
    pub gpu_demand: u32,
    pub total_samples: f64,
    /// Samples per second when running alone.
    pub ideal_throughput: f64,
    pub arrival_time: f64,
    pub profile: ModelProfile,
}

impl JobSpec {
    pub fn isolated_runtime(&self) -> f64 {
        self.total_samples / self.ideal_throughput
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Waiting,
    Running,
    Preempted,
    Finished,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobState {
    pub phase: Phase,
    pub samples_done: f64,
    /// GPU-seconds held so far.
    pub attained_service: f64,
    pub submit_time: f64,
    pub start_time: Option<f64>,
    pub finish_time: Option<f64>,
    pub placement: Option<Placement>,
    pub preemption_count: u32,
    /// Checkpoint-restore time still owed before progress resumes.
    pub restore_remaining: f64,
    /// Most recently observed contention sensitivity, if the job ever ran.
    pub last_cs: Option<f64>,
    cs_time: f64,
    run_time: f64,
}

impl JobState {
    pub fn new(submit_time: f64) -> JobState {
        JobState {
            phase: Phase::Waiting,
            samples_done: 0.0,
            attained_service: 0.0,
            submit_time,
            start_time: None,
            finish_time: None,
            placement: None,
            preemption_count: 0,
            restore_remaining: 0.0,
            last_cs: None,
            cs_time: 0.0,
            run_time: 0.0,
        }
    }

    /// Time-weighted mean contention sensitivity while running (1.0 if the
    /// job never ran).
    pub fn mean_cs(&self) -> f64 {
        if self.run_time > 0.0 {
            self.cs_time / self.run_time
        } else {
            1.0
        }
    }
}

/// A job spec together with its evolving state.
#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub spec: JobSpec,
    pub state: JobState,
}

impl Job {
    pub fn new(spec: JobSpec) -> Job {
        let state = JobState::new(spec.arrival_time);
        Job { spec, state }
    }

    pub fn id(&self) -> JobId {
        self.spec.id
    }

    pub fn remaining_samples(&self) -> f64 {
        (self.spec.total_samples - self.state.samples_done).max(0.0)
    }

    /// Remaining runtime at the isolated throughput.
    pub fn remaining_time(&self) -> f64 {
        self.remaining_samples() / self.spec.ideal_throughput
    }

    pub fn fraction_done(&self) -> f64 {
        (self.state.samples_done / self.spec.total_samples).clamp(0.0, 1.0)
    }

    pub fn jct(&self) -> Option<f64> {
        self.state.finish_time.map(|f| f - self.spec.arrival_time)
    }

    /// Marks the job as running on `placement` from time `now`.
    pub fn start(&mut self, placement: Placement, now: f64) -> Result<()> {
        match self.state.phase {
            Phase::Waiting | Phase::Preempted => {}
            other => {
                return Err(Error::State(format!(
                    "cannot start {} in phase {other:?}",
                    self.id()
                )));
            }
        }
        self.state.placement = Some(placement);
        self.state.phase = Phase::Running;
        self.state.start_time.get_or_insert(now);
        Ok(())
    }

    /// Stops a running job, keeping its progress and charging `penalty`
    /// seconds on its next start.
    pub fn preempt(&mut self, penalty: f64) -> Result<Placement> {
        if self.state.phase != Phase::Running {
            return Err(Error::State(format!(
                "cannot preempt {} in phase {:?}",
                self.id(),
                self.state.phase
            )));
        }
        self.state.phase = Phase::Preempted;
        self.state.preemption_count += 1;
        self.state.restore_remaining = penalty;
        Ok(self
            .state
            .placement
            .take()
            .expect("running job has a placement"))
    }

    /// Integrates progress over `[now, now + dt)` at a constant `throughput`.
    /// Outstanding restore time is consumed first. Returns the exact finish
    /// time if the job completes inside the interval.
    pub fn advance(&mut self, now: f64, dt: f64, throughput: f64, cs: f64) -> Result<Option<f64>> {
        if self.state.phase != Phase::Running {
            return Err(Error::State(format!(
                "cannot advance {} in phase {:?}",
                self.id(),
                self.state.phase
            )));
        }
        if !(dt >= 0.0) || !(throughput >= 0.0) {
            return Err(Error::Precondition(format!(
                "dt={dt} and throughput={throughput} must be >= 0"
            )));
        }
        let demand = self.spec.gpu_demand as f64;
        let restore = self.state.restore_remaining.min(dt);
        self.state.restore_remaining -= restore;
        let mut held = restore;
        let work_window = dt - restore;
        let remaining = self.remaining_samples();
        let mut finished = None;
        if work_window > 0.0 && throughput > 0.0 {
            let progress = throughput * work_window;
            if progress >= remaining {
                let used = remaining / throughput;
                self.state.samples_done = self.spec.total_samples;
                held += used;
                self.accumulate_cs(cs, used);
                let t = now + restore + used;
                self.state.phase = Phase::Finished;
                self.state.finish_time = Some(t);
                finished = Some(t);
            } else {
                self.state.samples_done += progress;
                held += work_window;
                self.accumulate_cs(cs, work_window);
            }
        } else {
            held += work_window;
            self.accumulate_cs(cs, work_window);
        }
        self.state.attained_service += demand * held;
        self.state.last_cs = Some(cs);
        Ok(finished)
    }

    fn accumulate_cs(&mut self, cs: f64, secs: f64) {
        self.state.cs_time += cs * secs;
        self.state.run_time += secs;
    }
}

/// Relative frequency of each model class, in `ModelClass::ALL` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub name: String,
    pub ratios: [f64; 6],
}

impl Mix {
    pub const NAMES: [&'static str; 4] = ["normal", "heavy", "medium", "low"];

    /// Built-in communication-intensity mixes, GNN:IMG:DLRM:LM:FSDP:MoE.
    pub fn named(name: &str) -> Option<Mix> {
        let ratios = match name {
            "normal" => [1.0, 1.0, 1.0, 1.0, 1.0, 1.0],
            "heavy" => [1.0, 1.0, 1.0, 1.0, 4.0, 4.0],
            "medium" => [1.0, 1.0, 4.0, 4.0, 1.0, 1.0],
            "low" => [4.0, 4.0, 1.0, 1.0, 1.0, 1.0],
            _ => return None,
        };
        Some(Mix {
            name: name.to_string(),
            ratios,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Validation(format!(
                "mix ratios must be positive: {:?}",
                self.ratios
            )));
        }
        Ok(())
    }

    pub fn fraction(&self, class: ModelClass) -> f64 {
        self.ratios[class.index()] / self.ratios.iter().sum::<f64>()
    }

    fn ratio_string(&self) -> String {
        let parts: Vec<String> = self.ratios.iter().map(|r| r.to_string()).collect();
        parts.join(":")
    }
}

impl fmt::Display for Mix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArrivalProcess {
    /// Every job is queued at t = 0, in trace order.
    #[default]
    AllAtZero,
    /// Exponential inter-arrival gaps with `rate` jobs per sim-second.
    Poisson { rate: f64 },
}

impl fmt::Display for ArrivalProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ArrivalProcess::AllAtZero => f.write_str("all-at-zero"),
            ArrivalProcess::Poisson { rate } => write!(f, "poisson:{rate}"),
        }
    }
}

impl FromStr for ArrivalProcess {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        if s == "all-at-zero" {
            return Ok(ArrivalProcess::AllAtZero);
        }
        s.strip_prefix("poisson:")
            .and_then(|r| r.parse().ok())
            .filter(|r: &f64| r.is_finite() && *r > 0.0)
            .map(|rate| ArrivalProcess::Poisson { rate })
            .ok_or_else(|| format!("bad arrival process `{s}` (all-at-zero or poisson:<rate>)"))
    }
}

/// Recipe for a synthetic trace of one or more job sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSpec {
    pub mix: Mix,
    pub num_jobs: usize,
    pub num_sets: usize,
    pub seed: u64,
    pub arrivals: ArrivalProcess,
    /// Isolated runtime of every job in real-cluster seconds.
    pub isolated_runtime: f64,
    /// Sim-seconds per real second.
    pub time_scale: f64,
    /// Relative per-job jitter on bandwidth and comm/comp ratio.
    pub jitter: f64,
    pub max_demand: u32,
}

impl TraceSpec {
    pub fn new(mix: Mix, num_jobs: usize, seed: u64) -> TraceSpec {
        TraceSpec {
            mix,
            num_jobs,
            num_sets: 1,
            seed,
            arrivals: ArrivalProcess::AllAtZero,
            isolated_runtime: 3600.0,
            time_scale: 1.0 / 60.0,
            jitter: 0.2,
            max_demand: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.mix.validate()?;
        if self.num_jobs == 0 || self.num_sets == 0 {
            return Err(Error::Validation(
                "a trace needs at least one job and one set".into(),
            ));
        }
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.isolated_runtime) || !pos(self.time_scale) {
            return Err(Error::Validation(
                "isolated runtime and time scale must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return Err(Error::Validation(format!(
                "jitter {} must be in [0, 1)",
                self.jitter
            )));
        }
        Ok(())
    }

    /// Isolated runtime in sim-seconds.
    pub fn sim_runtime(&self) -> f64 {
        self.isolated_runtime * self.time_scale
    }
}

/// Uniform sampler over the GPU demands that some `j * 2^i` shape can host.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandDistribution {
    values: Vec<u32>,
}

impl DemandDistribution {
    pub fn new(cluster: &ClusterConfig, max_demand: u32) -> Result<DemandDistribution> {
        let values: Vec<u32> = (1..=max_demand.min(cluster.total_gpus()))
            .filter(|&d| cluster.is_schedulable(d))
            .collect();
        if values.is_empty() {
            return Err(Error::Validation(format!(
                "no schedulable demand up to {max_demand}"
            )));
        }
        Ok(DemandDistribution { values })
    }

    pub fn support(&self) -> &[u32] {
        &self.values
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        self.values[rng.random_range(0..self.values.len())]
    }
}

/// Per-GPU isolated throughput in samples/s. Only ratios matter; the job's
/// sample count is derived from the isolated runtime.
fn per_gpu_throughput(class: ModelClass) -> f64 {
    match class {
        ModelClass::Gnn => 400.0,
        ModelClass::Img => 300.0,
        ModelClass::Dlrm => 2000.0,
        ModelClass::Lm => 40.0,
        ModelClass::Fsdp => 16.0,
        ModelClass::Moe => 24.0,
    }
}

/// A generated or loaded trace: `sets[k]` is the k-th job set in arrival
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub spec: TraceSpec,
    pub sets: Vec<Vec<JobSpec>>,
}

fn set_rng(seed: u64, set: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(set as u64);
    rng
}

/// Generates one job set: classes i.i.d. from the mix, demands uniform over
/// schedulable values, per-job jitter on the communication profile.
pub fn generate_job_set(
    spec: &TraceSpec,
    cluster: &ClusterConfig,
    set: usize,
) -> Result<Vec<JobSpec>> {
    spec.validate()?;
    let mut rng = set_rng(spec.seed, set);
    let classes =
        WeightedIndex::new(spec.mix.ratios).map_err(|e| Error::Validation(e.to_string()))?;
    let demands = DemandDistribution::new(cluster, spec.max_demand)?;
    let runtime = spec.sim_runtime();
    let mut arrival = 0.0;
    let gaps = match spec.arrivals {
        ArrivalProcess::AllAtZero => None,
        ArrivalProcess::Poisson { rate } => {
            Some(Exp::new(rate).map_err(|e| Error::Validation(e.to_string()))?)
        }
    };
    let mut jobs = Vec::with_capacity(spec.num_jobs);
    for id in 0..spec.num_jobs {
        let model_class = ModelClass::ALL[classes.sample(&mut rng)];
        let gpu_demand = demands.sample(&mut rng);
        let mut profile = ModelProfile::reference(model_class);
        let lo = 1.0 - spec.jitter;
        let hi = 1.0 + spec.jitter;
        profile.avg_bandwidth *= rng.random_range(lo..=hi);
        profile.comm_comp_ratio *= rng.random_range(lo..=hi);
        if let Some(exp) = &gaps {
            arrival += exp.sample(&mut rng);
        }
        let ideal_throughput = per_gpu_throughput(model_class) * gpu_demand as f64;
        jobs.push(JobSpec {
            id: JobId(id as u32),
            model_class,
            gpu_demand,
            total_samples: ideal_throughput * runtime,
            ideal_throughput,
            arrival_time: arrival,
            profile,
        });
    }
    Ok(jobs)
}

pub fn generate_trace(spec: &TraceSpec, cluster: &ClusterConfig) -> Result<Trace> {
    let sets = (0..spec.num_sets)
        .map(|s| generate_job_set(spec, cluster, s))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trace {
        spec: spec.clone(),
        sets,
    })
}

const TRACE_MAGIC: &str = "#netsched-trace";
const TRACE_VERSION: &str = "v1";

impl Trace {
    /// Line-delimited `key=value` records; the first line describes the recipe.
    pub fn write(&self, mut w: impl Write) -> std::io::Result<()> {
        let s = &self.spec;
        writeln!(
            w,
            "{TRACE_MAGIC} {TRACE_VERSION} mix={} ratios={} jobs={} sets={} seed={} arrivals={} isolated_runtime={} time_scale={} jitter={} max_demand={}",
            s.mix.name,
            s.mix.ratio_string(),
            s.num_jobs,
            s.num_sets,
            s.seed,
            s.arrivals,
            s.isolated_runtime,
            s.time_scale,
            s.jitter,
            s.max_demand
        )?;
        for (set, jobs) in self.sets.iter().enumerate() {
            for j in jobs {
                writeln!(
                    w,
                    "set={set} id={} model={} demand={} samples={} throughput={} arrival={} bandwidth={} comm_comp={}",
                    j.id.0,
                    j.model_class,
                    j.gpu_demand,
                    j.total_samples,
                    j.ideal_throughput,
                    j.arrival_time,
                    j.profile.avg_bandwidth,
                    j.profile.comm_comp_ratio
                )?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write(&mut buf).map_err(|e| Error::io(path, e))?;
        crate::write_atomic(path, &buf)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Trace> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Trace::parse(BufReader::new(file), path)
    }

    pub fn parse(reader: impl BufRead, origin: &Path) -> Result<Trace> {
        let mut lines = reader.lines().enumerate();
        let header = match lines.next() {
            Some((_, l)) => l.map_err(|e| Error::io(origin, e))?,
            None => return Err(Error::parse(origin, 1, "empty trace file")),
        };
        let mut head = header.split_whitespace();
        if head.next() != Some(TRACE_MAGIC) || head.next() != Some(TRACE_VERSION) {
            return Err(Error::parse(origin, 1, "missing trace header"));
        }
        let kv = KeyValues::parse(head, origin, 1)?;
        let ratios_str = kv.get("ratios")?;
        let ratios: Vec<f64> = ratios_str
            .split(':')
            .map(|r| r.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::parse(origin, 1, format!("bad ratios `{ratios_str}`")))?;
        let ratios: [f64; 6] = ratios
            .try_into()
            .map_err(|_| Error::parse(origin, 1, "mix needs six ratios"))?;
        let spec = TraceSpec {
            mix: Mix {
                name: kv.get("mix")?.to_string(),
                ratios,
            },
            num_jobs: kv.num("jobs")?,
            num_sets: kv.num("sets")?,
            seed: kv.num("seed")?,
            arrivals: kv
                .get("arrivals")?
                .parse()
                .map_err(|m: String| Error::parse(origin, 1, m))?,
            isolated_runtime: kv.num("isolated_runtime")?,
            time_scale: kv.num("time_scale")?,
            jitter: kv.num("jitter")?,
            max_demand: kv.num("max_demand")?,
        };
        let mut sets: Vec<Vec<JobSpec>> = vec![Vec::new(); spec.num_sets];
        for (idx, line) in lines {
            let lineno = idx + 1;
            let line = line.map_err(|e| Error::io(origin, e))?;
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let kv = KeyValues::parse(line.split_whitespace(), origin, lineno)?;
            let set: usize = kv.num("set")?;
            let model_class: ModelClass = kv
                .get("model")?
                .parse()
                .map_err(|m: String| Error::parse(origin, lineno, m))?;
            let mut profile = ModelProfile::reference(model_class);
            profile.avg_bandwidth = kv.num("bandwidth")?;
            profile.comm_comp_ratio = kv.num("comm_comp")?;
            let job = JobSpec {
                id: JobId(kv.num("id")?),
                model_class,
                gpu_demand: kv.num("demand")?,
                total_samples: kv.num("samples")?,
                ideal_throughput: kv.num("throughput")?,
                arrival_time: kv.num("arrival")?,
                profile,
            };
            validate_job(&job).map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
            sets.get_mut(set)
                .ok_or_else(|| Error::parse(origin, lineno, format!("set {set} out of range")))?
                .push(job);
        }
        Ok(Trace { spec, sets })
    }
}

fn validate_job(job: &JobSpec) -> Result<()> {
    job.profile.validate()?;
    let pos = |v: f64| v.is_finite() && v > 0.0;
    if job.gpu_demand == 0 || !pos(job.total_samples) || !pos(job.ideal_throughput) {
        return Err(Error::Validation(format!(
            "{}: demand, samples and throughput must be positive",
            job.id
        )));
    }
    if !(job.arrival_time.is_finite() && job.arrival_time >= 0.0) {
        return Err(Error::Validation(format!("{}: bad arrival time", job.id)));
    }
    Ok(())
}

struct KeyValues<'a> {
    pairs: Vec<(&'a str, &'a str)>,
    origin: &'a Path,
    line: usize,
}

impl<'a> KeyValues<'a> {
    fn parse(
        tokens: impl Iterator<Item = &'a str>,
        origin: &'a Path,
        line: usize,
    ) -> Result<KeyValues<'a>> {
        let pairs = tokens
            .map(|t| {
                t.split_once('=').ok_or_else(|| {
                    Error::parse(origin, line, format!("expected key=value, got `{t}`"))
                })
            })
            .collect::<Result<_>>()?;
        Ok(KeyValues {
            pairs,
            origin,
            line,
        })
    }

    fn get(&self, key: &str) -> Result<&'a str> {
        self.pairs
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::parse(self.origin, self.line, format!("missing `{key}`")))
    }

    fn num<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key)?;
        v.parse().map_err(|_| {
            Error::parse(
                self.origin,
                self.line,
                format!("bad value `{v}` for `{key}`"),
            )
        })
    }
}
