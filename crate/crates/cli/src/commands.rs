use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::anyhow;
use log::info;
use netsched_core::encoding::{encode_state, select_candidates};
use netsched_core::policy::{
    ActionSpace, FifoGreedy, Las, RlScheduler, RoundContext, Selection, Srtf,
};
use netsched_core::report::{self, Comparison};
use netsched_core::rl::{self, train::write_curve_csv, CheckpointMeta};
use netsched_core::workload::generate_trace;
use netsched_core::{
    run_episode, Checkpoint, ClusterConfig, Decision, EpisodeConfig, EpisodeReport, FeatureScales,
    JobSpec, PolicyKind, PolicyNet, RewardWeights, Scheduler, Summary,
};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::{Cli, Command, CompareArgs, CsTableArgs, EvalArgs, GenTraceArgs, TrainArgs};
use crate::config::{
    check_exists, trace_id, trace_source, weights_label, EpisodeSettings, FileConfig, TraceSettings,
};
use crate::failure::{Context, Failure, Outcome};
use crate::output::{self, csv_bytes, json_bytes, provenance, sanitize, Layout, Manifest};

pub fn run(cli: Cli) -> Outcome<()> {
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let root = cli
        .output_root
        .clone()
        .or_else(|| file.output_root.clone())
        .unwrap_or_else(|| PathBuf::from(output::DEFAULT_ROOT));
    let layout = Layout { root };
    match cli.command {
        Command::GenTrace(a) => gen_trace(a, file, &layout),
        Command::Train(a) => train(a, file, &layout),
        Command::Eval(a) => eval(a, file, &layout),
        Command::Compare(a) => compare(a, file, &layout),
        Command::CsTable(a) => cs_table(a, file),
    }
}

fn gen_trace(a: GenTraceArgs, mut file: FileConfig, layout: &Layout) -> Outcome<()> {
    file.apply_cluster(&a.cluster);
    file.trace.apply(&a.trace);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let cluster = file.cluster()?;
    let spec = file.trace.spec(seed)?;
    let trace = generate_trace(&spec, &cluster).context("generating trace")?;
    let path = a
        .out
        .unwrap_or_else(|| layout.traces().join(format!("{}.trace", trace_id(&spec))));

    #[derive(Serialize)]
    struct Resolved<'a> {
        cluster: &'a ClusterConfig,
        trace: &'a TraceSettings,
    }
    let prov = provenance(
        "gen-trace",
        seed,
        &Resolved {
            cluster: &cluster,
            trace: &file.trace,
        },
    );
    let mut body = Vec::new();
    trace.write(&mut body).expect("writing to memory");
    // The recipe header must stay on the first line.
    let split = body
        .iter()
        .position(|&b| b == b'\n')
        .map_or(body.len(), |i| i + 1);
    let mut bytes = body[..split].to_vec();
    bytes.extend_from_slice(output::provenance_line(&prov).as_bytes());
    bytes.extend_from_slice(&body[split..]);
    output::write(&path, &bytes)?;
    println!("{}", path.display());
    Ok(())
}

fn train(a: TrainArgs, mut file: FileConfig, layout: &Layout) -> Outcome<()> {
    file.apply_cluster(&a.cluster);
    file.trace.apply(&a.gen);
    file.episode.apply(&a.episode);
    file.reward.apply(&a.reward);
    if let Some(e) = a.episodes {
        file.train.episodes = e;
    }
    if let Some(h) = a.hidden {
        file.train.hidden = h;
    }
    if let Some(lr) = a.lr {
        file.train.adam.learning_rate = lr;
    }
    let seed = a.seed.or(file.seed).unwrap_or(file.train.seed);
    file.train.seed = seed;
    file.train
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let cluster = file.cluster()?;
    let weights = file.reward.resolve()?;
    let episode = file.episode.build(&cluster, weights)?;
    let scales = file.scales.unwrap_or_default();
    scales
        .validate()
        .map_err(|e| Failure::usage(e.to_string()))?;
    let (trace, tid) = trace_source(a.trace.as_deref(), &file.trace, seed, &cluster)?;
    let label = weights_label(&weights);
    let name = sanitize(&a.id.unwrap_or_else(|| format!("rl-{label}-{tid}-t{seed}")));

    #[derive(Serialize)]
    struct Resolved<'a> {
        cluster: &'a ClusterConfig,
        episode: &'a EpisodeSettings,
        reward: Value,
        train: &'a rl::TrainConfig,
        scales: &'a FeatureScales,
        trace_path: Option<&'a Path>,
        trace: &'a netsched_core::TraceSpec,
    }
    let prov = provenance(
        "train",
        seed,
        &Resolved {
            cluster: &cluster,
            episode: &file.episode,
            reward: json!({"branch": label, "w1": weights.w1(), "w2": weights.w2()}),
            train: &file.train,
            scales: &scales,
            trace_path: a.trace.as_deref(),
            trace: &trace.spec,
        },
    );

    info!("training {name} for {} episodes", file.train.episodes);
    let outcome =
        rl::train(&trace.sets, &cluster, &episode, &file.train, &scales).context("training")?;
    let meta = CheckpointMeta {
        seed,
        weights,
        trace_id: tid,
        episodes: file.train.episodes,
        cluster: cluster.clone(),
        scales,
        provenance: prov.clone(),
    };
    let ck = Checkpoint::new(&outcome.net, meta);
    let mut manifest = Manifest::new(layout.report(&format!("train-{name}")), &layout.root);
    let ck_path = layout.checkpoints().join(format!("{name}.json"));
    manifest.add(&ck_path, &ck.to_bytes())?;
    let curve = csv_bytes(&prov, |w| write_curve_csv(&outcome.curve, w));
    manifest.add(
        &layout.checkpoints().join(format!("{name}.curve.csv")),
        &curve,
    )?;
    manifest.finish(&name, &prov)?;
    println!("{}", ck_path.display());
    Ok(())
}

/// A checkpoint loaded for evaluation.
struct LoadedPolicy {
    net: Arc<PolicyNet>,
    scales: FeatureScales,
    weights: RewardWeights,
    path: PathBuf,
}

impl LoadedPolicy {
    fn stem(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

fn load_policy(path: &Path, cluster: &ClusterConfig) -> Outcome<LoadedPolicy> {
    check_exists(path, "checkpoint")?;
    let ck = Checkpoint::load(path).context(format!("loading {}", path.display()))?;
    if ck.meta.cluster != *cluster {
        return Err(Failure::File(anyhow!(
            "{} was trained for {:?}, not {:?}",
            path.display(),
            ck.meta.cluster,
            cluster
        )));
    }
    let scales = ck.meta.scales;
    let weights = ck.meta.weights;
    let arch = ck.architecture;
    let net = ck
        .into_net(&arch)
        .context(format!("loading {}", path.display()))?;
    Ok(LoadedPolicy {
        net: Arc::new(net),
        scales,
        weights,
        path: path.to_path_buf(),
    })
}

/// One column of an evaluation: a policy kind and, for RL kinds, its weights.
#[derive(Clone)]
struct Entrant {
    label: String,
    kind: PolicyKind,
    policy: Option<Arc<LoadedPolicy>>,
}

impl Entrant {
    fn scheduler(&self, cluster: &ClusterConfig) -> Outcome<Box<dyn Scheduler>> {
        Ok(match self.kind {
            PolicyKind::FifoGreedy => Box::new(FifoGreedy),
            PolicyKind::Las => Box::new(Las),
            PolicyKind::Srtf => Box::new(Srtf::default()),
            PolicyKind::RlBase | PolicyKind::RlHybrid => {
                let p = self
                    .policy
                    .as_ref()
                    .expect("RL entrants carry a checkpoint");
                let space = ActionSpace::new(cluster, p.net.architecture().heads)?;
                Box::new(RlScheduler::new(
                    p.net.clone(),
                    space,
                    p.scales,
                    Selection::Greedy,
                    self.kind == PolicyKind::RlHybrid,
                )?)
            }
        })
    }

    fn scales(&self) -> FeatureScales {
        self.policy.as_ref().map(|p| p.scales).unwrap_or_default()
    }
}

/// Records the observation of the first round with queued work.
struct TensorProbe {
    inner: Box<dyn Scheduler>,
    scales: FeatureScales,
    heads: usize,
    csv: Option<String>,
}

impl Scheduler for TensorProbe {
    fn name(&self) -> String {
        self.inner.name()
    }

    fn decide(&mut self, ctx: &RoundContext<'_>) -> netsched_core::Result<Decision> {
        if self.csv.is_none() && !ctx.queue.is_empty() {
            let cands =
                select_candidates(ctx.queue.iter().map(|id| &ctx.jobs[id.index()]), self.heads);
            let t = encode_state(ctx.cluster, ctx.jobs, &cands, &self.scales)?;
            self.csv = Some(t.to_csv());
        }
        self.inner.decide(ctx)
    }

    fn observe_reward(&mut self, reward: f64) {
        self.inner.observe_reward(reward)
    }
}

struct Cell {
    report: EpisodeReport,
    tensor: Option<String>,
}

/// Runs every (entrant, set) pair. Cells are independent and may run in
/// parallel; results come back in entrant-major order.
fn run_cells(
    entrants: &[Entrant],
    sets: &[Vec<JobSpec>],
    cluster: &ClusterConfig,
    episode: &EpisodeConfig,
    dump_tensor: bool,
) -> Outcome<Vec<Vec<Cell>>> {
    let pairs: Vec<(usize, usize)> = (0..entrants.len())
        .flat_map(|e| (0..sets.len()).map(move |s| (e, s)))
        .collect();
    let cells: Vec<Outcome<Cell>> = pairs
        .par_iter()
        .map(|&(e, s)| {
            let ent = &entrants[e];
            let what = format!("{} on set {s}", ent.label);
            let inner = ent.scheduler(cluster)?;
            let (report, tensor) = if dump_tensor && s == 0 {
                let mut probe = TensorProbe {
                    inner,
                    scales: ent.scales(),
                    heads: netsched_core::encoding::DEFAULT_CANDIDATES,
                    csv: None,
                };
                let r = run_episode(&mut probe, &sets[s], cluster, episode).context(&what)?;
                (r, probe.csv)
            } else {
                let mut sched = inner;
                let r = run_episode(sched.as_mut(), &sets[s], cluster, episode).context(&what)?;
                (r, None)
            };
            report.audit().context(&what)?;
            info!("{what}: avg JCT {:.2}", report.summary.avg_jct);
            let mut report = report;
            report.policy = ent.label.clone();
            Ok(Cell { report, tensor })
        })
        .collect();
    let mut out: Vec<Vec<Cell>> = entrants.iter().map(|_| Vec::new()).collect();
    for (&(e, _), c) in pairs.iter().zip(cells) {
        out[e].push(c?);
    }
    Ok(out)
}

fn select_sets(sets: Vec<Vec<JobSpec>>, limit: Option<usize>) -> Outcome<Vec<Vec<JobSpec>>> {
    match limit {
        Some(0) => Err(Failure::usage("--limit-sets must be at least 1")),
        Some(n) if n > sets.len() => Err(Failure::usage(format!(
            "--limit-sets {n} exceeds the {} sets in the trace",
            sets.len()
        ))),
        Some(n) => Ok(sets.into_iter().take(n).collect()),
        None => Ok(sets),
    }
}

/// Episode settings and inputs shared by `eval` and `compare`.
#[derive(Serialize)]
struct EvalResolved<'a> {
    cluster: &'a ClusterConfig,
    episode: &'a EpisodeSettings,
    reward: Value,
    policies: Vec<String>,
    checkpoints: Vec<&'a Path>,
    trace_path: Option<&'a Path>,
    trace: &'a netsched_core::TraceSpec,
    sets: usize,
}

fn eval(a: EvalArgs, mut file: FileConfig, layout: &Layout) -> Outcome<()> {
    file.apply_cluster(&a.cluster);
    file.trace.apply(&a.gen);
    file.episode.apply(&a.episode);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let cluster = file.cluster()?;
    let policy = if a.policy.needs_checkpoint() {
        let path = a
            .checkpoint
            .as_deref()
            .ok_or_else(|| Failure::usage(format!("--checkpoint is required for {}", a.policy)))?;
        Some(Arc::new(load_policy(path, &cluster)?))
    } else {
        None
    };
    let weights = match &policy {
        Some(p) => p.weights,
        None => file.reward.resolve()?,
    };
    let episode = file.episode.build(&cluster, weights)?;
    let (trace, tid) = trace_source(a.trace.as_deref(), &file.trace, seed, &cluster)?;
    let spec = trace.spec.clone();
    let sets = select_sets(trace.sets, a.limit_sets)?;

    let mut label = a.policy.name().to_string();
    if let Some(p) = &policy {
        label = format!("{label}-{}", p.stem());
    }
    let mut default_id = format!("eval-{label}-{tid}-s{seed}");
    if episode.contention.mode == netsched_core::ContentionMode::Disabled {
        default_id.push_str("-nocontention");
    }
    let id = sanitize(&a.id.unwrap_or(default_id));
    let prov = provenance(
        "eval",
        seed,
        &EvalResolved {
            cluster: &cluster,
            episode: &file.episode,
            reward: json!({"w1": weights.w1(), "w2": weights.w2()}),
            policies: vec![a.policy.name().to_string()],
            checkpoints: a.checkpoint.as_deref().into_iter().collect(),
            trace_path: a.trace.as_deref(),
            trace: &spec,
            sets: sets.len(),
        },
    );

    let entrant = Entrant {
        label: a.policy.name().to_string(),
        kind: a.policy,
        policy,
    };
    let cells = run_cells(&[entrant], &sets, &cluster, &episode, a.dump_tensor)?
        .pop()
        .expect("one entrant");

    let mut manifest = Manifest::new(layout.report(&id), &layout.root);
    let summaries: Vec<Summary> = cells.iter().map(|c| c.report.summary.clone()).collect();
    for (s, c) in cells.iter().enumerate() {
        let jobs = csv_bytes(&prov, |w| c.report.write_jobs_csv(w));
        manifest.add_local(&format!("set-{s:02}-jobs.csv"), &jobs)?;
        let rounds = csv_bytes(&prov, |w| c.report.write_rounds_csv(w));
        manifest.add_local(&format!("set-{s:02}-rounds.csv"), &rounds)?;
        if let Some(t) = &c.tensor {
            let bytes = [
                output::provenance_line(&prov).into_bytes(),
                t.clone().into_bytes(),
            ]
            .concat();
            manifest.add_local("tensor.csv", &bytes)?;
        }
    }
    let aggregate = report::PolicyAggregate::from_summaries(a.policy.name(), &summaries);
    let doc = json!({
        "provenance": prov,
        "policy": a.policy.name(),
        "trace_id": tid,
        "aggregate": aggregate,
        "sets": summaries,
    });
    manifest.add_local("summary.json", &json_bytes(&doc))?;
    let dir = manifest.dir().to_path_buf();
    manifest.finish(&id, &prov)?;
    println!("{}", dir.display());
    Ok(())
}

fn compare(a: CompareArgs, mut file: FileConfig, layout: &Layout) -> Outcome<()> {
    if a.policies.len() < 2 {
        return Err(Failure::usage("compare needs at least two policies"));
    }
    if a.bins == 0 {
        return Err(Failure::usage("--bins must be at least 1"));
    }
    file.apply_cluster(&a.cluster);
    file.trace.apply(&a.gen);
    file.episode.apply(&a.episode);
    let seed = a.seed.or(file.seed).unwrap_or(0);
    let cluster = file.cluster()?;
    let wants_rl = a.policies.iter().any(|k| k.needs_checkpoint());
    if wants_rl && a.checkpoint.is_empty() {
        return Err(Failure::usage(
            "--checkpoint is required for the RL policies",
        ));
    }
    let loaded: Vec<Arc<LoadedPolicy>> = if wants_rl {
        a.checkpoint
            .iter()
            .map(|p| load_policy(p, &cluster).map(Arc::new))
            .collect::<Outcome<_>>()?
    } else {
        Vec::new()
    };
    let weights = file.reward.resolve()?;
    let episode = file.episode.build(&cluster, weights)?;
    let (trace, tid) = trace_source(a.trace.as_deref(), &file.trace, seed, &cluster)?;
    let spec = trace.spec.clone();
    let sets = select_sets(trace.sets, a.limit_sets)?;

    let mut entrants = Vec::new();
    for &kind in &a.policies {
        if kind.needs_checkpoint() {
            for p in &loaded {
                let label = if loaded.len() == 1 {
                    kind.name().to_string()
                } else {
                    format!("{kind}[{}]", p.stem())
                };
                entrants.push(Entrant {
                    label,
                    kind,
                    policy: Some(p.clone()),
                });
            }
        } else {
            entrants.push(Entrant {
                label: kind.name().to_string(),
                kind,
                policy: None,
            });
        }
    }
    // Repeated policies get distinct labels so each keeps its own column.
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for e in &mut entrants {
        let n = seen.entry(e.label.clone()).or_insert(0);
        *n += 1;
        if *n > 1 {
            e.label = format!("{}#{n}", e.label);
        }
    }

    let id = sanitize(&a.id.unwrap_or_else(|| {
        let names: Vec<&str> = a.policies.iter().map(|k| k.name()).collect();
        format!("compare-{}-{tid}-s{seed}", names.join("+"))
    }));
    let prov = provenance(
        "compare",
        seed,
        &EvalResolved {
            cluster: &cluster,
            episode: &file.episode,
            reward: json!({"w1": weights.w1(), "w2": weights.w2()}),
            policies: entrants.iter().map(|e| e.label.clone()).collect(),
            checkpoints: a.checkpoint.iter().map(PathBuf::as_path).collect(),
            trace_path: a.trace.as_deref(),
            trace: &spec,
            sets: sets.len(),
        },
    );

    let cells = run_cells(&entrants, &sets, &cluster, &episode, false)?;
    let per_policy: BTreeMap<String, Vec<Summary>> = entrants
        .iter()
        .zip(&cells)
        .map(|(e, c)| {
            (
                e.label.clone(),
                c.iter().map(|x| x.report.summary.clone()).collect(),
            )
        })
        .collect();
    let comparison: Comparison = report::compare(&per_policy);
    let pooled: Vec<EpisodeReport> = entrants
        .iter()
        .zip(&cells)
        .map(|(e, c)| {
            let jobs = c
                .iter()
                .flat_map(|x| x.report.jobs.iter().cloned())
                .collect();
            let rounds = c
                .iter()
                .flat_map(|x| x.report.rounds.iter().cloned())
                .collect();
            EpisodeReport::new(e.label.clone(), jobs, rounds)
        })
        .collect();

    let mut manifest = Manifest::new(layout.report(&id), &layout.root);
    let doc = json!({
        "provenance": prov,
        "trace_id": tid,
        "comparison": comparison,
    });
    manifest.add_local("comparison.json", &json_bytes(&doc))?;
    manifest.add_local(
        "aggregates.csv",
        &csv_bytes(&prov, |w| {
            writeln!(w, "policy,sets,avg_jct,p90_jct,mean_utilization,mean_cs")?;
            for g in &comparison.aggregates {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    g.policy, g.sets, g.avg_jct, g.p90_jct, g.mean_utilization, g.mean_cs
                )?;
            }
            Ok(())
        }),
    )?;
    manifest.add_local(
        "deltas.csv",
        &csv_bytes(&prov, |w| {
            writeln!(
                w,
                "policy,against,avg_jct_pct,p90_jct_pct,mean_utilization_pct,mean_cs_pct"
            )?;
            for d in &comparison.deltas {
                writeln!(
                    w,
                    "{},{},{},{},{},{}",
                    d.policy,
                    d.against,
                    d.avg_jct_pct,
                    d.p90_jct_pct,
                    d.mean_utilization_pct,
                    d.mean_cs_pct
                )?;
            }
            Ok(())
        }),
    )?;
    let series = |header: &str, f: &dyn Fn(&EpisodeReport) -> Vec<(f64, f64)>| {
        csv_bytes(&prov, |w| {
            writeln!(w, "policy,{header}")?;
            for r in &pooled {
                for (x, y) in f(r) {
                    writeln!(w, "{},{x},{y}", r.policy)?;
                }
            }
            Ok(())
        })
    };
    manifest.add_local("jct_cdf.csv", &series("jct,fraction", &|r| r.jct_cdf()))?;
    manifest.add_local(
        "utilization_hist.csv",
        &series("utilization,fraction", &|r| r.utilization_histogram(a.bins)),
    )?;
    manifest.add_local(
        "cs_distribution.csv",
        &series("cs,fraction", &|r| r.cs_distribution()),
    )?;
    manifest.add_local(
        "branch_scatter.csv",
        &csv_bytes(&prov, |w| {
            writeln!(w, "variant,branch,w1,checkpoint,avg_jct,mean_utilization")?;
            for (e, g) in entrants
                .iter()
                .zip(&comparison_rows(&comparison, &entrants))
            {
                if let (Some(p), Some(g)) = (&e.policy, g) {
                    writeln!(
                        w,
                        "{},{},{},{},{},{}",
                        e.kind,
                        weights_label(&p.weights),
                        p.weights.w1(),
                        p.stem(),
                        g.avg_jct,
                        g.mean_utilization
                    )?;
                }
            }
            Ok(())
        }),
    )?;
    let dir = manifest.dir().to_path_buf();
    manifest.finish(&id, &prov)?;
    println!("{}", dir.display());
    Ok(())
}

/// Aggregate row of each entrant, in entrant order.
fn comparison_rows<'a>(
    c: &'a Comparison,
    entrants: &[Entrant],
) -> Vec<Option<&'a report::PolicyAggregate>> {
    entrants
        .iter()
        .map(|e| c.aggregates.iter().find(|g| g.policy == e.label))
        .collect()
}

fn cs_table(a: CsTableArgs, mut file: FileConfig) -> Outcome<()> {
    file.apply_cluster(&a.cluster);
    let cluster = file.cluster()?;
    let table = netsched_core::CsTable::calibrated(&cluster);
    let prov = provenance("cs-table", 0, &json!({ "cluster": cluster }));
    let bytes = csv_bytes(&prov, |w| table.write(w));
    match a.out {
        Some(p) => output::write(&p, &bytes)?,
        None => {
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Failure::Runtime(e.into()))?;
        }
    }
    Ok(())
}
