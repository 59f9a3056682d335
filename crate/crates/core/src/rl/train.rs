//! Policy-gradient training: a learned value baseline, GAE(lambda)
//! advantages (lambda = 1 is plain REINFORCE) and an entropy bonus.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cluster::{ClusterConfig, JobId};
use crate::encoding::{FeatureScales, DEFAULT_CANDIDATES, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::policy::{ActionSpace, RlScheduler, Selection};
use crate::rl::adam::{Adam, AdamConfig};
use crate::rl::net::{masked_softmax, Architecture, PolicyNet};
use crate::sim::{run_episode, EpisodeConfig};
use crate::workload::JobSpec;

/// One policy invocation: sparse observation, the choice and feasibility
/// mask of every head, and the discounted reward of the `span` rounds that
/// followed.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub input: Vec<(usize, f64)>,
    pub choices: Vec<u8>,
    pub masks: Vec<u64>,
    pub reward: f64,
    pub span: u32,
}

impl Step {
    /// True if some head had more than one feasible choice.
    pub fn has_choice(&self) -> bool {
        self.masks.iter().any(|m| m.count_ones() > 1)
    }
}

/// Folds every round without a real choice into the decision step before
/// it, discounting per round. Returns at the kept steps are unchanged;
/// rounds before the first decision are dropped.
pub fn decision_steps(steps: Vec<Step>, gamma: f64) -> Vec<Step> {
    let mut out: Vec<Step> = Vec::new();
    let mut factor = 1.0;
    for step in steps {
        if step.has_choice() {
            factor = gamma.powi(step.span as i32);
            out.push(step);
        } else if let Some(last) = out.last_mut() {
            last.reward += factor * step.reward;
            last.span += step.span;
            factor *= gamma.powi(step.span as i32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub hidden: usize,
    pub heads: usize,
    pub gamma: f64,
    /// GAE smoothing. 1.0 gives Monte Carlo returns minus the value
    /// baseline; smaller values bootstrap from the value head.
    pub gae_lambda: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    /// Steps per gradient update; each episode is split into shuffled
    /// minibatches and each minibatch is one update.
    pub minibatch: usize,
    /// Passes over each episode's steps.
    pub epochs: usize,
    pub normalize_advantages: bool,
    /// Present each episode's jobs in a fresh random queue order.
    pub shuffle_jobs: bool,
    /// Initial logit of the skip choice on every head.
    pub skip_bias: f64,
    pub seed: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 20,
            hidden: 256,
            heads: DEFAULT_CANDIDATES,
            gamma: 0.99,
            gae_lambda: 0.8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            minibatch: 128,
            epochs: 2,
            normalize_advantages: true,
            shuffle_jobs: true,
            skip_bias: 0.0,
            seed: 0,
            adam: AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::Config("training needs at least one episode".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma)
            || !(0.0..=1.0).contains(&self.gae_lambda)
            || self.minibatch == 0
            || self.epochs == 0
            || self.hidden == 0
            || self.heads == 0
        {
            return Err(Error::Config(format!("invalid training settings {self:?}")));
        }
        if !(self.adam.learning_rate > 0.0) || self.entropy_coef < 0.0 || self.value_coef < 0.0 {
            return Err(Error::Config(
                "learning rate must be > 0 and coefficients >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn architecture(&self, cluster: &ClusterConfig) -> Result<Architecture> {
        let space = ActionSpace::new(cluster, self.heads)?;
        Ok(Architecture {
            input_dim: cluster.num_nodes as usize
                * 2
                * cluster.gpus_per_node as usize
                * FEATURE_DIM,
            hidden: self.hidden,
            heads: self.heads,
            head_size: space.head_size(),
        })
    }
}

/// Discounted returns, accumulated back to front.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut g = 0.0;
    for (i, r) in rewards.iter().enumerate().rev() {
        g = r + gamma * g;
        out[i] = g;
    }
    out
}

fn step_returns(steps: &[Step], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; steps.len()];
    let mut g = 0.0;
    for (i, s) in steps.iter().enumerate().rev() {
        g = s.reward + gamma.powi(s.span as i32) * g;
        out[i] = g;
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub entropy: f64,
    pub value: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossCoefs {
    pub entropy: f64,
    pub value: f64,
}

/// Mean loss over `batch` and its gradient. Per step:
/// `-A * sum_k log p_k(a_k) - c_H * sum_k H_k + c_V * (V - G)^2 / 2`,
/// with `A` held constant. Heads with a single feasible choice contribute
/// nothing to the policy and entropy terms.
pub fn loss_and_grad(
    net: &PolicyNet,
    batch: &[&Step],
    returns: &[f64],
    advantages: &[f64],
    coefs: LossCoefs,
) -> Result<(LossParts, Vec<f64>)> {
    let arch = *net.architecture();
    let hs = arch.head_size;
    let mut grad = vec![0.0; arch.num_params()];
    let mut parts = LossParts::default();
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut dlogits = vec![0.0; arch.heads * hs];
    for (n, step) in batch.iter().enumerate() {
        let fwd = net.forward(&step.input);
        let adv = advantages[n];
        dlogits.iter_mut().for_each(|d| *d = 0.0);
        for k in 0..arch.heads {
            let mask = step.masks[k];
            if mask.count_ones() < 2 {
                continue;
            }
            let p = masked_softmax(fwd.head_logits(k, hs), mask);
            let a = step.choices[k] as usize;
            let logp = p[a].ln();
            let entropy: f64 = -p
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|q| q * q.ln())
                .sum::<f64>();
            parts.policy -= scale * adv * logp;
            parts.entropy += scale * entropy;
            let d = &mut dlogits[k * hs..(k + 1) * hs];
            for i in 0..hs {
                if mask >> i & 1 == 0 || p[i] == 0.0 {
                    continue;
                }
                let delta = if i == a { 1.0 } else { 0.0 };
                let dpolicy = -adv * (delta - p[i]);
                let dentropy = coefs.entropy * p[i] * (p[i].ln() + entropy);
                d[i] = scale * (dpolicy + dentropy);
            }
        }
        let verr = fwd.value - returns[n];
        parts.value += scale * 0.5 * verr * verr;
        let dvalue = scale * coefs.value * verr;
        if !dlogits.iter().all(|d| d.is_finite()) || !dvalue.is_finite() {
            return Err(Error::NonFinite {
                step: n,
                detail: format!("value={} return={} advantage={adv}", fwd.value, returns[n]),
            });
        }
        net.backward(&step.input, &fwd, &dlogits, dvalue, &mut grad);
    }
    parts.total = parts.policy - coefs.entropy * parts.entropy + coefs.value * parts.value;
    if !parts.total.is_finite() {
        return Err(Error::NonFinite {
            step: 0,
            detail: format!("loss {parts:?}"),
        });
    }
    Ok((parts, grad))
}

/// Value targets and advantages for a whole trajectory under the current
/// value head. With `lambda = 1` the targets are the discounted returns and
/// the advantages are returns minus the baseline.
pub fn advantages(
    net: &PolicyNet,
    steps: &[Step],
    gamma: f64,
    lambda: f64,
    normalize: bool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(i) = steps.iter().position(|s| !s.reward.is_finite()) {
        return Err(Error::NonFinite {
            step: i,
            detail: format!("reward {}", steps[i].reward),
        });
    }
    let values: Vec<f64> = steps.iter().map(|s| net.forward(&s.input).value).collect();
    let (targets, mut adv) = if lambda >= 1.0 {
        let returns = step_returns(steps, gamma);
        let adv = returns.iter().zip(&values).map(|(g, v)| g - v).collect();
        (returns, adv)
    } else {
        let mut adv = vec![0.0; steps.len()];
        let mut acc = 0.0;
        for i in (0..steps.len()).rev() {
            let next = values.get(i + 1).copied().unwrap_or(0.0);
            let discount = gamma.powi(steps[i].span as i32);
            let delta = steps[i].reward + discount * next - values[i];
            acc = delta + discount * lambda.powi(steps[i].span as i32) * acc;
            adv[i] = acc;
        }
        let targets = adv.iter().zip(&values).map(|(a, v)| a + v).collect();
        (targets, adv)
    };
    if normalize && adv.len() > 1 {
        let n = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / n;
        let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        let sd = var.sqrt();
        for a in &mut adv {
            *a = if sd > 1e-12 { (*a - mean) / sd } else { 0.0 };
        }
    }
    Ok((targets, adv))
}

/// One gradient step over the whole trajectory.
pub fn update(
    net: &mut PolicyNet,
    opt: &mut Adam,
    steps: &[Step],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    if steps.is_empty() {
        return Err(Error::Precondition("empty trajectory".into()));
    }
    let (returns, adv) = advantages(
        net,
        steps,
        cfg.gamma,
        cfg.gae_lambda,
        cfg.normalize_advantages,
    )?;
    let batch: Vec<&Step> = steps.iter().collect();
    apply_batch(net, opt, &batch, &returns, &adv, cfg)
}

fn apply_batch(
    net: &mut PolicyNet,
    opt: &mut Adam,
    batch: &[&Step],
    returns: &[f64],
    adv: &[f64],
    cfg: &TrainConfig,
) -> Result<LossParts> {
    let coefs = LossCoefs {
        entropy: cfg.entropy_coef,
        value: cfg.value_coef,
    };
    let (parts, mut grad) = loss_and_grad(net, batch, returns, adv, coefs)?;
    opt.step(net.params_mut(), &mut grad);
    Ok(parts)
}

/// Per-episode training curve entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub mean_reward: f64,
    pub mean_cs: f64,
    pub mean_utilization: f64,
    pub avg_jct: f64,
    pub steps: usize,
    pub loss: f64,
    pub entropy: f64,
    /// Fraction of heads with a real choice that chose skip.
    pub skip_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: PolicyNet,
    pub curve: Vec<CurvePoint>,
}

/// Trains a fresh policy, cycling through `sets` one episode at a time.
pub fn train(
    sets: &[Vec<JobSpec>],
    cluster: &ClusterConfig,
    episode: &EpisodeConfig,
    cfg: &TrainConfig,
    scales: &FeatureScales,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if sets.is_empty() || sets.iter().any(|s| s.is_empty()) {
        return Err(Error::Precondition(
            "training needs non-empty job sets".into(),
        ));
    }
    let arch = cfg.architecture(cluster)?;
    let space = ActionSpace::new(cluster, cfg.heads)?;
    let mut net = PolicyNet::new(arch, cfg.seed)?;
    if cfg.skip_bias != 0.0 {
        net.set_head_bias(space.skip(), cfg.skip_bias);
    }
    let mut opt = Adam::new(cfg.adam, arch.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut curve = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let mut act_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        act_rng.set_stream(1000 + e as u64);
        let mut sched = RlScheduler::new(
            Arc::new(net.clone()),
            space.clone(),
            *scales,
            Selection::Sample(act_rng),
            false,
        )?
        .recording();
        let mut jobs = sets[e % sets.len()].clone();
        if cfg.shuffle_jobs {
            shuffle_queue(&mut jobs, &mut rng);
        }
        let report = run_episode(&mut sched, &jobs, cluster, episode)?;
        let steps = decision_steps(sched.take_steps(), cfg.gamma);
        if steps.is_empty() {
            log::warn!("episode {e}: no decision had a real choice");
        }
        let (returns, adv) = advantages(
            &net,
            &steps,
            cfg.gamma,
            cfg.gae_lambda,
            cfg.normalize_advantages,
        )?;
        let mut order: Vec<usize> = (0..steps.len()).collect();
        let mut loss = 0.0;
        let mut entropy = 0.0;
        for pass in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(cfg.minibatch) {
                let batch: Vec<&Step> = chunk.iter().map(|&i| &steps[i]).collect();
                let r: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let parts = apply_batch(&mut net, &mut opt, &batch, &r, &a, cfg)?;
                if pass == 0 {
                    loss += parts.total * chunk.len() as f64;
                    entropy += parts.entropy * chunk.len() as f64;
                }
            }
        }
        let skip = space.skip() as u8;
        let (skipped, open) = steps
            .iter()
            .flat_map(|s| s.choices.iter().zip(&s.masks))
            .filter(|(_, m)| m.count_ones() > 1)
            .fold((0usize, 0usize), |(k, n), (&c, _)| {
                (k + (c == skip) as usize, n + 1)
            });
        let s = &report.summary;
        let point = CurvePoint {
            episode: e,
            mean_reward: s.total_reward / s.rounds.max(1) as f64,
            mean_cs: s.mean_cs,
            mean_utilization: s.mean_utilization,
            avg_jct: s.avg_jct,
            steps: steps.len(),
            loss: loss / steps.len().max(1) as f64,
            entropy: entropy / steps.len().max(1) as f64,
            skip_rate: if open == 0 {
                0.0
            } else {
                skipped as f64 / open as f64
            },
        };
        log::info!(
            "episode {e}: reward {:.4} util {:.3} cs {:.3} jct {:.1} skip {:.3} entropy {:.3} decisions {}/{}",
            point.mean_reward,
            point.mean_utilization,
            point.mean_cs,
            point.avg_jct,
            point.skip_rate,
            point.entropy,
            steps.len(),
            s.rounds
        );
        curve.push(point);
    }
    Ok(TrainOutcome { net, curve })
}

/// Permutes a job set and renumbers ids so the queue order changes while
/// the jobs themselves stay the same.
pub fn shuffle_queue(jobs: &mut [JobSpec], rng: &mut ChaCha8Rng) {
    jobs.shuffle(rng);
    for (i, j) in jobs.iter_mut().enumerate() {
        j.id = JobId(i as u32);
    }
}

pub fn write_curve_csv(curve: &[CurvePoint], mut w: impl std::io::Write) -> std::io::Result<()> {
    writeln!(
        w,
        "episode,mean_reward,mean_cs,mean_utilization,avg_jct,steps,loss,entropy,skip_rate"
    )?;
    for p in curve {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            p.episode,
            p.mean_reward,
            p.mean_cs,
            p.mean_utilization,
            p.avg_jct,
            p.steps,
            p.loss,
            p.entropy,
            p.skip_rate
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn returns_discount_backwards() {
        let g = discounted_returns(&[1.0, 0.0, 2.0], 0.5);
        assert_eq!(g, [1.5, 1.0, 2.0]);
    }

    #[test]
    fn empty_trajectory_rejected() {
        let arch = Architecture {
            input_dim: 4,
            hidden: 4,
            heads: 1,
            head_size: 2,
        };
        let mut net = PolicyNet::new(arch, 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), arch.num_params());
        assert!(update(&mut net, &mut opt, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn nan_reward_is_reported() {
        let arch = Architecture {
            input_dim: 4,
            hidden: 4,
            heads: 1,
            head_size: 2,
        };
        let mut net = PolicyNet::new(arch, 0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), arch.num_params());
        let step = Step {
            input: vec![(0, 1.0)],
            choices: vec![0],
            masks: vec![0b11],
            reward: f64::NAN,
            span: 1,
        };
        assert!(matches!(
            update(&mut net, &mut opt, &[step], &TrainConfig::default()),
            Err(Error::NonFinite { step: 0, .. })
        ));
    }

    fn small_set() -> Vec<JobSpec> {
        use crate::contention::{ModelClass, ModelProfile};
        (0..6)
            .map(|i| {
                let class = ModelClass::ALL[i % 6];
                JobSpec {
                    id: JobId(i as u32),
                    model_class: class,
                    gpu_demand: [1, 2, 4, 8, 16, 3][i],
                    total_samples: 50.0,
                    ideal_throughput: 10.0,
                    arrival_time: 0.0,
                    profile: ModelProfile::reference(class),
                }
            })
            .collect()
    }

    #[test]
    fn shuffling_keeps_jobs_and_renumbers() {
        let mut jobs = small_set();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        shuffle_queue(&mut jobs, &mut rng);
        for (i, j) in jobs.iter().enumerate() {
            assert_eq!(j.id, JobId(i as u32));
        }
        let mut demands: Vec<u32> = jobs.iter().map(|j| j.gpu_demand).collect();
        demands.sort();
        assert_eq!(demands, [1, 2, 3, 4, 8, 16]);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cluster = ClusterConfig::default();
        let episode = EpisodeConfig::new(&cluster);
        let cfg = TrainConfig {
            episodes: 2,
            hidden: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let scales = FeatureScales::default();
        let a = train(&[small_set()], &cluster, &episode, &cfg, &scales).unwrap();
        let b = train(&[small_set()], &cluster, &episode, &cfg, &scales).unwrap();
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.len(), 2);
        let fresh = PolicyNet::new(*a.net.architecture(), 3).unwrap();
        assert_ne!(a.net, fresh);
    }
}
