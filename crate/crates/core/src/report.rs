//! Episode records, aggregate metrics, and policy comparison tables.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::cluster::JobId;
use crate::contention::ModelClass;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: JobId,
    pub model_class: ModelClass,
    pub demand: u32,
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
    pub jct: f64,
    pub isolated_runtime: f64,
    pub preemptions: u32,
    /// Time-weighted CS while the job held GPUs.
    pub mean_cs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// Start of the interval.
    pub time: f64,
    pub utilization: f64,
    /// Mean CS over running jobs; `None` when nothing ran.
    pub mean_cs: Option<f64>,
    pub reward: f64,
    pub running: usize,
    pub queued: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub num_jobs: usize,
    pub avg_jct: f64,
    pub p90_jct: f64,
    pub makespan: f64,
    /// Mean over recorded rounds.
    pub mean_utilization: f64,
    /// Mean over rounds in which at least one job ran.
    pub mean_cs: f64,
    /// Mean of per-job time-weighted CS.
    pub mean_job_cs: f64,
    pub preemptions: u64,
    pub rounds: usize,
    pub total_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub policy: String,
    pub jobs: Vec<JobRecord>,
    pub rounds: Vec<RoundRecord>,
    pub summary: Summary,
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (rank - lo as f64)
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn summarize(jobs: &[JobRecord], rounds: &[RoundRecord]) -> Summary {
    let jcts: Vec<f64> = jobs.iter().map(|j| j.jct).collect();
    Summary {
        num_jobs: jobs.len(),
        avg_jct: mean(jcts.iter().copied()),
        p90_jct: percentile(&jcts, 0.9),
        makespan: jobs.iter().map(|j| j.finish).fold(0.0, f64::max),
        mean_utilization: mean(rounds.iter().map(|r| r.utilization)),
        mean_cs: mean(rounds.iter().filter_map(|r| r.mean_cs)),
        mean_job_cs: mean(jobs.iter().map(|j| j.mean_cs)),
        preemptions: jobs.iter().map(|j| j.preemptions as u64).sum(),
        rounds: rounds.len(),
        total_reward: rounds.iter().map(|r| r.reward).sum(),
    }
}

impl EpisodeReport {
    pub fn new(
        policy: impl Into<String>,
        jobs: Vec<JobRecord>,
        rounds: Vec<RoundRecord>,
    ) -> EpisodeReport {
        let summary = summarize(&jobs, &rounds);
        EpisodeReport {
            policy: policy.into(),
            jobs,
            rounds,
            summary,
        }
    }

    /// Recomputes the aggregates from the raw records.
    pub fn audit(&self) -> Result<()> {
        let again = summarize(&self.jobs, &self.rounds);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1e-300);
        let s = &self.summary;
        let checks = [
            ("avg_jct", s.avg_jct, again.avg_jct),
            ("p90_jct", s.p90_jct, again.p90_jct),
            (
                "mean_utilization",
                s.mean_utilization,
                again.mean_utilization,
            ),
            ("mean_cs", s.mean_cs, again.mean_cs),
        ];
        for (name, a, b) in checks {
            if !close(a, b) {
                return Err(Error::Audit(format!("{name}: stored {a}, recomputed {b}")));
            }
        }
        for j in &self.jobs {
            if !close(j.jct, j.finish - j.arrival) || j.jct < j.isolated_runtime * (1.0 - 1e-9) {
                return Err(Error::Audit(format!(
                    "{}: inconsistent JCT {}",
                    j.id, j.jct
                )));
            }
        }
        Ok(())
    }

    /// `(jct, fraction of jobs with JCT <= jct)` at every distinct JCT.
    pub fn jct_cdf(&self) -> Vec<(f64, f64)> {
        cdf(self.jobs.iter().map(|j| j.jct).collect())
    }

    /// Fraction of rounds per utilization bin, keyed by bin centre.
    pub fn utilization_histogram(&self, bins: usize) -> Vec<(f64, f64)> {
        histogram(self.rounds.iter().map(|r| r.utilization), 0.0, 1.0, bins)
    }

    /// Fraction of jobs per mean-CS bin of width 0.1 starting at 1.
    pub fn cs_distribution(&self) -> Vec<(f64, f64)> {
        let top = self.jobs.iter().map(|j| j.mean_cs).fold(1.1, f64::max);
        let bins = ((top - 1.0) / 0.1).ceil() as usize;
        histogram(
            self.jobs.iter().map(|j| j.mean_cs),
            1.0,
            1.0 + 0.1 * bins as f64,
            bins,
        )
    }

    pub fn write_jobs_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "id,model,demand,arrival,start,finish,jct,isolated_runtime,preemptions,mean_cs"
        )?;
        for j in &self.jobs {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{}",
                j.id.0,
                j.model_class,
                j.demand,
                j.arrival,
                j.start,
                j.finish,
                j.jct,
                j.isolated_runtime,
                j.preemptions,
                j.mean_cs
            )?;
        }
        Ok(())
    }

    pub fn write_rounds_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "time,utilization,mean_cs,reward,running,queued")?;
        for r in &self.rounds {
            let cs = r.mean_cs.map(|c| c.to_string()).unwrap_or_default();
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.time, r.utilization, cs, r.reward, r.running, r.queued
            )?;
        }
        Ok(())
    }
}

pub fn cdf(mut values: Vec<f64>) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, v) in values.iter().enumerate() {
        let y = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *v => last.1 = y,
            _ => out.push((*v, y)),
        }
    }
    out
}

pub fn histogram(
    values: impl IntoIterator<Item = f64>,
    lo: f64,
    hi: f64,
    bins: usize,
) -> Vec<(f64, f64)> {
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    let mut n = 0usize;
    for v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
        n += 1;
    }
    counts
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            (
                lo + width * (i as f64 + 0.5),
                if n == 0 { 0.0 } else { c as f64 / n as f64 },
            )
        })
        .collect()
}

pub fn write_points(mut w: impl Write, header: &str, points: &[(f64, f64)]) -> std::io::Result<()> {
    writeln!(w, "{header}")?;
    for (x, y) in points {
        writeln!(w, "{x},{y}")?;
    }
    Ok(())
}

/// Per-policy means over job sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAggregate {
    pub policy: String,
    pub sets: usize,
    pub avg_jct: f64,
    pub p90_jct: f64,
    pub mean_utilization: f64,
    pub mean_cs: f64,
}

impl PolicyAggregate {
    pub fn from_summaries(policy: &str, summaries: &[Summary]) -> PolicyAggregate {
        PolicyAggregate {
            policy: policy.to_string(),
            sets: summaries.len(),
            avg_jct: mean(summaries.iter().map(|s| s.avg_jct)),
            p90_jct: mean(summaries.iter().map(|s| s.p90_jct)),
            mean_utilization: mean(summaries.iter().map(|s| s.mean_utilization)),
            mean_cs: mean(summaries.iter().map(|s| s.mean_cs)),
        }
    }
}

/// Relative change of `ours` against `theirs`, in percent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDelta {
    pub policy: String,
    pub against: String,
    pub avg_jct_pct: f64,
    pub p90_jct_pct: f64,
    pub mean_utilization_pct: f64,
    pub mean_cs_pct: f64,
}

fn pct(ours: f64, theirs: f64) -> f64 {
    if theirs == 0.0 {
        if ours == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        100.0 * (ours - theirs) / theirs
    }
}

impl PairwiseDelta {
    pub fn between(ours: &PolicyAggregate, theirs: &PolicyAggregate) -> PairwiseDelta {
        PairwiseDelta {
            policy: ours.policy.clone(),
            against: theirs.policy.clone(),
            avg_jct_pct: pct(ours.avg_jct, theirs.avg_jct),
            p90_jct_pct: pct(ours.p90_jct, theirs.p90_jct),
            mean_utilization_pct: pct(ours.mean_utilization, theirs.mean_utilization),
            mean_cs_pct: pct(ours.mean_cs, theirs.mean_cs),
        }
    }
}

/// Published full-scale reductions of the learned policy, kept for context
/// next to measured deltas. They are never asserted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub policy: String,
    pub against: String,
    pub avg_jct_pct: f64,
    pub p90_jct_pct: f64,
}

pub fn reference_lines() -> Vec<ReferenceLine> {
    vec![
        ReferenceLine {
            policy: "rl-base".into(),
            against: "srtf".into(),
            avg_jct_pct: -15.4,
            p90_jct_pct: -16.4,
        },
        ReferenceLine {
            policy: "rl-base".into(),
            against: "las".into(),
            avg_jct_pct: -18.2,
            p90_jct_pct: -20.7,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub aggregates: Vec<PolicyAggregate>,
    pub deltas: Vec<PairwiseDelta>,
    pub reference: Vec<ReferenceLine>,
}

/// Builds aggregates and all ordered pairwise deltas. Keys are policy labels.
pub fn compare(per_policy: &BTreeMap<String, Vec<Summary>>) -> Comparison {
    let aggregates: Vec<PolicyAggregate> = per_policy
        .iter()
        .map(|(p, s)| PolicyAggregate::from_summaries(p, s))
        .collect();
    let mut deltas = Vec::new();
    for a in &aggregates {
        for b in &aggregates {
            if a.policy != b.policy {
                deltas.push(PairwiseDelta::between(a, b));
            }
        }
    }
    Comparison {
        aggregates,
        deltas,
        reference: reference_lines(),
    }
}
