//! Two-layer tanh MLP with `K` categorical heads and a scalar value head,
//! stored as one flat parameter vector.
//!
//! Layout (row-major, input index outermost so a sparse input touches
//! contiguous rows of the first layer):
//! `W1[input][h] b1[h] W2[h][h] b2[h] Wp[h][K*A] bp[K*A] Wv[h] bv`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    /// Number of policy heads (candidates per round).
    pub heads: usize,
    /// Choices per head, skip included.
    pub head_size: usize,
}

impl Architecture {
    pub fn num_params(&self) -> usize {
        let Architecture {
            input_dim: i,
            hidden: h,
            heads,
            head_size,
        } = *self;
        let out = heads * head_size;
        i * h + h + h * h + h + h * out + out + h + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.hidden == 0
            || self.heads == 0
            || self.head_size < 2
            || self.head_size > 64
        {
            return Err(Error::Config(format!("unsupported architecture {self}")));
        }
        Ok(())
    }

    fn offsets(&self) -> Offsets {
        let h = self.hidden;
        let out = self.heads * self.head_size;
        let w1 = 0;
        let b1 = w1 + self.input_dim * h;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let wp = b2 + h;
        let bp = wp + h * out;
        let wv = bp + out;
        let bv = wv + h;
        Offsets {
            b1,
            w2,
            b2,
            wp,
            bp,
            wv,
            bv,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "mlp(in={}, hidden={}x2, heads={}x{})",
            self.input_dim, self.hidden, self.heads, self.head_size
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Offsets {
    b1: usize,
    w2: usize,
    b2: usize,
    wp: usize,
    bp: usize,
    wv: usize,
    bv: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    arch: Architecture,
    params: Vec<f64>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
    /// `heads * head_size` raw logits.
    pub logits: Vec<f64>,
    pub value: f64,
}

impl Forward {
    pub fn head_logits(&self, head: usize, head_size: usize) -> &[f64] {
        &self.logits[head * head_size..(head + 1) * head_size]
    }
}

impl PolicyNet {
    /// Glorot-uniform hidden layers; policy and value heads start near zero
    /// so the initial policy is close to uniform over feasible choices.
    pub fn new(arch: Architecture, seed: u64) -> Result<PolicyNet> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.num_params()];
        let o = arch.offsets();
        let h = arch.hidden;
        let out = arch.heads * arch.head_size;
        let mut fill = |range: std::ops::Range<usize>, limit: f64, params: &mut Vec<f64>| {
            for p in &mut params[range] {
                *p = rng.random_range(-limit..=limit);
            }
        };
        let glorot = |a: usize, b: usize| (6.0 / (a + b) as f64).sqrt();
        fill(0..o.b1, glorot(arch.input_dim, h), &mut params);
        fill(o.w2..o.b2, glorot(h, h), &mut params);
        fill(o.wp..o.bp, 0.01 * glorot(h, out), &mut params);
        fill(o.wv..o.bv, 0.01 * glorot(h, 1), &mut params);
        Ok(PolicyNet { arch, params })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<PolicyNet> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::Validation(format!(
                "{arch} needs {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Validation("non-finite parameter".into()));
        }
        Ok(PolicyNet { arch, params })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sets the initial bias of one choice on every head.
    pub fn set_head_bias(&mut self, choice: usize, bias: f64) {
        let o = self.arch.offsets();
        for k in 0..self.arch.heads {
            self.params[o.bp + k * self.arch.head_size + choice] = bias;
        }
    }

    /// Forward pass on a sparse input given as `(index, value)` pairs.
    pub fn forward(&self, input: &[(usize, f64)]) -> Forward {
        let a = &self.arch;
        let o = a.offsets();
        let h = a.hidden;
        let p = &self.params;
        let mut z1 = p[o.b1..o.b1 + h].to_vec();
        for &(i, x) in input {
            let row = &p[i * h..(i + 1) * h];
            for (z, w) in z1.iter_mut().zip(row) {
                *z += x * w;
            }
        }
        let h1: Vec<f64> = z1.iter().map(|z| z.tanh()).collect();
        let h2 = dense_tanh(&h1, &p[o.w2..o.b2], &p[o.b2..o.b2 + h]);
        let out = a.heads * a.head_size;
        let mut logits = p[o.bp..o.bp + out].to_vec();
        for (x, row) in h2.iter().zip(p[o.wp..o.bp].chunks_exact(out)) {
            for (l, w) in logits.iter_mut().zip(row) {
                *l += x * w;
            }
        }
        let value = p[o.bv]
            + h2.iter()
                .zip(&p[o.wv..o.bv])
                .map(|(x, w)| x * w)
                .sum::<f64>();
        Forward {
            h1,
            h2,
            logits,
            value,
        }
    }

    /// Accumulates into `grad` the parameter gradient given upstream
    /// gradients on the logits and the value.
    pub fn backward(
        &self,
        input: &[(usize, f64)],
        fwd: &Forward,
        dlogits: &[f64],
        dvalue: f64,
        grad: &mut [f64],
    ) {
        let a = &self.arch;
        let o = a.offsets();
        let h = a.hidden;
        let out = a.heads * a.head_size;
        let p = &self.params;

        // Output layers.
        let mut dh2 = vec![0.0; h];
        for (r, (x, row)) in fwd
            .h2
            .iter()
            .zip(p[o.wp..o.bp].chunks_exact(out))
            .enumerate()
        {
            let g = &mut grad[o.wp + r * out..o.wp + (r + 1) * out];
            let mut acc = 0.0;
            for ((gw, w), d) in g.iter_mut().zip(row).zip(dlogits) {
                *gw += x * d;
                acc += w * d;
            }
            dh2[r] = acc + p[o.wv + r] * dvalue;
            grad[o.wv + r] += x * dvalue;
        }
        for (g, d) in grad[o.bp..o.bp + out].iter_mut().zip(dlogits) {
            *g += d;
        }
        grad[o.bv] += dvalue;

        // Second hidden layer.
        let dz2: Vec<f64> = dh2
            .iter()
            .zip(&fwd.h2)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();
        let mut dh1 = vec![0.0; h];
        for (r, x) in fwd.h1.iter().enumerate() {
            let row = &p[o.w2 + r * h..o.w2 + (r + 1) * h];
            let g = &mut grad[o.w2 + r * h..o.w2 + (r + 1) * h];
            let mut acc = 0.0;
            for ((gw, w), d) in g.iter_mut().zip(row).zip(&dz2) {
                *gw += x * d;
                acc += w * d;
            }
            dh1[r] = acc;
        }
        for (g, d) in grad[o.b2..o.b2 + h].iter_mut().zip(&dz2) {
            *g += d;
        }

        // First layer, touching only rows of nonzero inputs.
        let dz1: Vec<f64> = dh1
            .iter()
            .zip(&fwd.h1)
            .map(|(d, y)| d * (1.0 - y * y))
            .collect();
        for &(i, x) in input {
            for (g, d) in grad[i * h..(i + 1) * h].iter_mut().zip(&dz1) {
                *g += x * d;
            }
        }
        for (g, d) in grad[o.b1..o.b1 + h].iter_mut().zip(&dz1) {
            *g += d;
        }
    }
}

fn dense_tanh(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut z = b.to_vec();
    for (xi, row) in x.iter().zip(w.chunks_exact(n)) {
        for (zj, wij) in z.iter_mut().zip(row) {
            *zj += xi * wij;
        }
    }
    for v in &mut z {
        *v = v.tanh();
    }
    z
}

/// Softmax restricted to the choices whose bit is set in `mask`; masked
/// entries get probability exactly 0.
pub fn masked_softmax(logits: &[f64], mask: u64) -> Vec<f64> {
    let max = logits
        .iter()
        .enumerate()
        .filter(|(i, _)| mask >> i & 1 == 1)
        .map(|(_, &l)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            if mask >> i & 1 == 1 {
                (l - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let sum: f64 = p.iter().sum();
    for v in &mut p {
        *v /= sum;
    }
    p
}

/// Inverse-CDF draw over the unmasked choices for a uniform `u` in [0, 1).
/// Rounding slack falls on the last unmasked choice.
pub fn sample_masked(probs: &[f64], mask: u64, u: f64) -> Option<usize> {
    let mut acc = 0.0;
    let mut last = None;
    for (i, &p) in probs.iter().enumerate() {
        if mask >> i & 1 == 0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return last;
        }
    }
    last
}

/// Most probable unmasked choice; ties go to the lower index.
pub fn argmax_masked(probs: &[f64], mask: u64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &p) in probs.iter().enumerate() {
        if mask >> i & 1 == 1 && best.is_none_or(|b| p > probs[b]) {
            best = Some(i);
        }
    }
    best
}
