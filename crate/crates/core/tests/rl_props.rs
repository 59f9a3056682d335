use netsched_core::rl::adam::{Adam, AdamConfig};
use netsched_core::rl::net::{masked_softmax, sample_masked};
use netsched_core::rl::reward::{compute_reward, reward_from_terms, CS_CAP};
use netsched_core::rl::train::{
    advantages, decision_steps, discounted_returns, loss_and_grad, LossCoefs, Step,
};
use netsched_core::{Architecture, PolicyNet, RewardWeights};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: Architecture = Architecture {
    input_dim: 8,
    hidden: 4,
    heads: 2,
    head_size: 4,
};

fn random_step(rng: &mut ChaCha8Rng, arch: &Architecture) -> Step {
    let mut input = Vec::new();
    for i in 0..arch.input_dim {
        if rng.random_bool(0.6) {
            input.push((i, rng.random_range(-1.0..1.0)));
        }
    }
    if input.is_empty() {
        input.push((0, 0.5));
    }
    let full = (1u64 << arch.head_size) - 1;
    let mut masks = Vec::new();
    let mut choices = Vec::new();
    for _ in 0..arch.heads {
        let mut m = rng.random_range(0..=full);
        while m.count_ones() < 2 {
            m = rng.random_range(0..=full);
        }
        let feasible: Vec<usize> = (0..arch.head_size).filter(|i| m >> i & 1 == 1).collect();
        choices.push(feasible[rng.random_range(0..feasible.len())] as u8);
        masks.push(m);
    }
    Step {
        input,
        choices,
        masks,
        reward: 0.0,
        span: 1,
    }
}

fn total_loss(net: &PolicyNet, step: &Step, ret: f64, adv: f64, coefs: LossCoefs) -> f64 {
    loss_and_grad(net, &[step], &[ret], &[adv], coefs)
        .unwrap()
        .0
        .total
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let coefs = LossCoefs {
        entropy: 0.05,
        value: 0.5,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for probe in 0..20 {
        let mut net = PolicyNet::new(TINY, probe).unwrap();
        // Move off the near-zero head initialization.
        for p in net.params_mut() {
            *p += rng.random_range(-0.5..0.5);
        }
        let step = random_step(&mut rng, &TINY);
        let ret = rng.random_range(-2.0..2.0);
        let adv = rng.random_range(-2.0..2.0);
        let (_, grad) = loss_and_grad(&net, &[&step], &[ret], &[adv], coefs).unwrap();
        let h = 1e-6;
        let mut numeric = vec![0.0; grad.len()];
        for i in 0..grad.len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            numeric[i] = (total_loss(&plus, &step, ret, adv, coefs)
                - total_loss(&minus, &step, ret, adv, coefs))
                / (2.0 * h);
        }
        let diff: f64 = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / norm(&grad).max(norm(&numeric)).max(1e-12);
        assert!(rel < 1e-4, "probe {probe}: relative error {rel}");
    }
}

#[test]
fn score_function_estimate_is_unbiased_under_masking() {
    let arch = Architecture {
        input_dim: 2,
        hidden: 4,
        heads: 1,
        head_size: 3,
    };
    let mut net = PolicyNet::new(arch, 5).unwrap();
    let bias = arch.num_params() - arch.hidden - 1 - arch.head_size;
    net.params_mut()[bias] = 0.4;
    net.params_mut()[bias + 2] = 2.0;
    let mask = 0b011;
    let rewards = [1.0, 3.0];
    let input = vec![(0, 1.0), (1, -0.5)];
    let fwd = net.forward(&input);
    let probs = masked_softmax(fwd.head_logits(0, 3), mask);
    assert_eq!(probs[2], 0.0);
    let coefs = LossCoefs {
        entropy: 0.0,
        value: 0.0,
    };
    let grad_for = |a: usize| {
        let step = Step {
            input: input.clone(),
            choices: vec![a as u8],
            masks: vec![mask],
            reward: rewards[a],
            span: 1,
        };
        loss_and_grad(&net, &[&step], &[fwd.value], &[rewards[a]], coefs)
            .unwrap()
            .1
    };
    let per_action = [grad_for(0), grad_for(1)];
    let n = arch.num_params();
    let exact: Vec<f64> = (0..n)
        .map(|i| probs[0] * per_action[0][i] + probs[1] * per_action[1][i])
        .collect();

    let samples = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut sum = vec![0.0; n];
    let mut sum_sq = vec![0.0; n];
    for _ in 0..samples {
        let a = sample_masked(&probs, mask, rng.random()).unwrap();
        assert!(a < 2, "masked choice sampled");
        for i in 0..n {
            let g = per_action[a][i];
            sum[i] += g;
            sum_sq[i] += g * g;
        }
    }
    let m = samples as f64;
    for i in 0..n {
        let mean = sum[i] / m;
        let var = (sum_sq[i] / m - mean * mean).max(0.0);
        let se = (var / m).sqrt();
        assert!(
            (mean - exact[i]).abs() <= 3.0 * se + 1e-15,
            "param {i}: {mean} vs {} (se {se})",
            exact[i]
        );
    }
    // The masked choice's logit never receives gradient.
    assert_eq!(exact[bias + 2], 0.0);
    assert_eq!(sum[bias + 2], 0.0);
}

#[test]
fn zero_advantage_with_exact_baseline_is_a_no_op() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut net = PolicyNet::new(TINY, 1).unwrap();
    let steps: Vec<Step> = (0..8).map(|_| random_step(&mut rng, &TINY)).collect();
    let batch: Vec<&Step> = steps.iter().collect();
    let returns: Vec<f64> = steps.iter().map(|s| net.forward(&s.input).value).collect();
    let coefs = LossCoefs {
        entropy: 0.0,
        value: 0.5,
    };
    let (_, mut grad) = loss_and_grad(&net, &batch, &returns, &[0.0; 8], coefs).unwrap();
    assert!(grad.iter().all(|g| g.abs() < 1e-15));
    let before = net.params().to_vec();
    let mut opt = Adam::new(AdamConfig::default(), TINY.num_params());
    opt.step(net.params_mut(), &mut grad);
    let moved = before
        .iter()
        .zip(net.params())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(moved < 1e-12, "moved {moved}");
}

#[test]
fn positive_advantage_raises_taken_log_probability() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let coefs = LossCoefs {
        entropy: 0.0,
        value: 0.0,
    };
    for seed in 0..10 {
        let mut net = PolicyNet::new(TINY, seed).unwrap();
        let step = random_step(&mut rng, &TINY);
        let logp = |net: &PolicyNet| -> f64 {
            let f = net.forward(&step.input);
            (0..TINY.heads)
                .map(|k| {
                    masked_softmax(f.head_logits(k, TINY.head_size), step.masks[k])
                        [step.choices[k] as usize]
                        .ln()
                })
                .sum()
        };
        let before = logp(&net);
        let (_, mut grad) = loss_and_grad(&net, &[&step], &[0.0], &[1.0], coefs).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                learning_rate: 1e-3,
                ..AdamConfig::default()
            },
            TINY.num_params(),
        );
        opt.step(net.params_mut(), &mut grad);
        assert!(logp(&net) > before);
    }
}

#[test]
fn gae_with_unit_lambda_is_return_minus_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = PolicyNet::new(TINY, 2).unwrap();
    let mut steps: Vec<Step> = (0..30).map(|_| random_step(&mut rng, &TINY)).collect();
    for s in &mut steps {
        s.reward = rng.random_range(-1.0..1.0);
        s.span = rng.random_range(1..4);
    }
    let (targets, adv) = advantages(&net, &steps, 0.9, 1.0, false).unwrap();
    let (_, gae) = advantages(&net, &steps, 0.9, 1.0 - 1e-12, false).unwrap();
    let mut g = 0.0;
    for i in (0..steps.len()).rev() {
        g = steps[i].reward + 0.9f64.powi(steps[i].span as i32) * g;
        let v = net.forward(&steps[i].input).value;
        assert!((targets[i] - g).abs() < 1e-12);
        assert!((adv[i] - (g - v)).abs() < 1e-12);
        assert!((gae[i] - adv[i]).abs() < 1e-9);
    }
    // One-step bootstrapping at lambda = 0.
    let (_, td) = advantages(&net, &steps, 0.9, 0.0, false).unwrap();
    let v = |i: usize| net.forward(&steps[i].input).value;
    let d = 0.9f64.powi(steps[3].span as i32);
    assert!((td[3] - (steps[3].reward + d * v(4) - v(3))).abs() < 1e-12);
}

proptest! {
    #[test]
    fn masked_softmax_is_exact(logits in prop::collection::vec(-50.0f64..50.0, 12), mask in 1u64..(1 << 12)) {
        let p = masked_softmax(&logits, mask);
        for (i, v) in p.iter().enumerate() {
            if mask >> i & 1 == 0 {
                prop_assert_eq!(*v, 0.0);
            } else {
                prop_assert!(*v >= 0.0);
            }
        }
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn reward_is_the_weighted_difference(w1 in 0.0f64..=1.0, cs in 1.0f64..CS_CAP, util in 0.0f64..=1.0) {
        let w = RewardWeights::new(w1).unwrap();
        let direct = -w1 * cs + (1.0 - w1) * util;
        prop_assert!((reward_from_terms(cs, util, &w) - direct).abs() <= 1e-12);
        prop_assert!((compute_reward(&[cs], util, &w) - direct).abs() <= 1e-12);
    }

    #[test]
    fn reward_is_bounded(w1 in 0.0f64..=1.0, cs in prop::collection::vec(1.0f64..20.0, 0..10), util in 0.0f64..=1.0) {
        let w = RewardWeights::new(w1).unwrap();
        let r = compute_reward(&cs, util, &w);
        prop_assert!(r >= -w.w1() * CS_CAP - 1e-12 && r <= w.w2() + 1e-12, "{r}");
    }

    #[test]
    fn folding_forced_rounds_keeps_returns(rewards in prop::collection::vec(-1.0f64..1.0, 1..80), open in prop::collection::vec(any::<bool>(), 80), gamma in 0.5f64..1.0) {
        let steps: Vec<Step> = rewards
            .iter()
            .enumerate()
            .map(|(i, &r)| Step {
                input: vec![(i, 1.0)],
                choices: vec![0],
                masks: vec![if open[i] { 0b11 } else { 0b10 }],
                reward: r,
                span: 1,
            })
            .collect();
        let full = discounted_returns(&rewards, gamma);
        let kept = decision_steps(steps, gamma);
        prop_assert_eq!(kept.len(), open[..rewards.len()].iter().filter(|&&o| o).count());
        let spans: u32 = kept.iter().map(|s| s.span).sum();
        let first = open.iter().position(|&o| o).unwrap_or(rewards.len()).min(rewards.len());
        prop_assert_eq!(spans as usize, rewards.len() - first);
        let mut g = 0.0;
        let mut folded = vec![0.0; kept.len()];
        for i in (0..kept.len()).rev() {
            g = kept[i].reward + gamma.powi(kept[i].span as i32) * g;
            folded[i] = g;
        }
        for (s, g) in kept.iter().zip(&folded) {
            let at = s.input[0].0;
            prop_assert!((full[at] - g).abs() < 1e-9);
        }
    }
}
