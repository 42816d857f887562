//! A deliberately naive scalar reference implementation of the whole loss
//! family, sharing no code with the library: plain loops, string-keyed
//! method dispatch, and an unshifted softmax (safe here because |s * logit|
//! stays far below exp overflow). Tests compare the library against this.
//!
//! Each integration test binary compiles its own copy and uses a subset.
#![allow(dead_code)]

/// Shared hyperparameters, all explicit.
#[derive(Debug, Clone, Copy)]
pub struct OracleParams {
    pub s: f64,
    pub m: f64,
    pub h: f64,
    /// Adaptive curriculum value in effect.
    pub t: f64,
    pub t_fixed: f64,
}

const COS_CLAMP: f64 = 1e-7;

fn clamp_cos(c: f64) -> f64 {
    c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP)
}

fn cos_arg(theta_plus_margin: f64) -> f64 {
    theta_plus_margin.clamp(0.0, std::f64::consts::PI).cos()
}

/// Loss and per-sample true-class probabilities, computed sample by sample.
/// `phi_override` pins the per-sample modulation coefficients (for
/// finite-difference probes); otherwise they are `t + h * sin(theta_y / 2)`.
pub fn oracle_loss(
    cosines: &[Vec<f64>],
    labels: &[usize],
    method: &str,
    p: &OracleParams,
    phi_override: Option<&[f64]>,
) -> (f64, Vec<f64>) {
    let b = cosines.len();
    assert_eq!(labels.len(), b);
    let mut probs = Vec::with_capacity(b);
    let mut loss_sum = 0.0;

    for i in 0..b {
        let row = &cosines[i];
        let n = row.len();
        let y = labels[i];
        let c: Vec<f64> = row.iter().map(|&v| clamp_cos(v)).collect();
        let theta_y = c[y].acos();
        let threshold = cos_arg(theta_y + p.m);

        let mut any_hard = false;
        let mut hard = vec![false; n];
        for j in 0..n {
            if j != y && threshold < c[j] {
                hard[j] = true;
                any_hard = true;
            }
        }

        let phi = match phi_override {
            Some(values) => values[i],
            None => p.t + p.h * (theta_y / 2.0).sin(),
        };

        let target = match method {
            "softmax" => c[y],
            "sphereface" => cos_arg(p.m * theta_y),
            "cosface" => c[y] - p.m,
            "arcface" | "mv-arc-softmax" | "curricular" | "adasin-n" => cos_arg(theta_y + p.m),
            "adasin" | "adasin-t" => {
                if any_hard {
                    cos_arg(theta_y + phi * p.m)
                } else {
                    cos_arg(theta_y + p.m)
                }
            }
            other => panic!("oracle does not know method {other:?}"),
        };

        let mut denom = (p.s * target).exp();
        for j in 0..n {
            if j == y {
                continue;
            }
            let logit = if !hard[j] {
                c[j]
            } else {
                match method {
                    "mv-arc-softmax" => (p.t_fixed + 1.0) * c[j] + p.t_fixed,
                    "curricular" => (p.t + c[j]) * c[j],
                    "adasin" | "adasin-n" => phi * c[j],
                    _ => c[j],
                }
            };
            denom += (p.s * logit).exp();
        }
        let prob = (p.s * target).exp() / denom;
        probs.push(prob);
        loss_sum -= prob.ln();
    }

    (loss_sum / b as f64, probs)
}

/// Scalar EMA: `t = alpha * mean(batch) + (1 - alpha) * t`, starting at 0.
pub fn oracle_ema(batches: &[Vec<f64>], alpha: f64) -> f64 {
    let mut t = 0.0;
    for batch in batches {
        let mean = batch.iter().sum::<f64>() / batch.len() as f64;
        t = alpha * mean + (1.0 - alpha) * t;
    }
    t
}

/// A tiny xorshift generator so the oracle's test data does not depend on
/// the library's RNG choices.
pub struct XorShift(pub u64);

impl XorShift {
    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn index(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }
}
