//! Shared fixtures and independent statistical oracles for integration tests.
#![allow(dead_code)]

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use cfdecode::model::{LanguageModel, NGramModel, TokenId};

/// Upper-tail p-value of Pearson's chi-square statistic.
pub fn chi_square_p(observed: &[u64], expected: &[f64]) -> f64 {
    let stat: f64 = observed
        .iter()
        .zip(expected)
        .map(|(&o, &e)| (o as f64 - e).powi(2) / e)
        .sum();
    let df = (observed.len() - 1) as f64;
    ChiSquared::new(df).unwrap().sf(stat)
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> (f64, f64) {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    let ne = (n * m) as f64 / (n + m) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    (d, kolmogorov_q(lambda))
}

/// Kolmogorov survival function Q(lambda) = 2 sum (-1)^(k-1) exp(-2 k^2 lambda^2).
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let k = k as f64;
        let term = (-2.0 * k * k * lambda * lambda).exp();
        sum += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sided sign test: P(at least `wins` successes among `wins + losses`
/// fair coin flips). Ties are dropped by the caller.
pub fn sign_test_greater(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n).unwrap().sf(wins - 1)
}

/// Softmax computed with a log-sum-exp shift.
pub fn softmax_oracle(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    logits.iter().map(|l| (l - m).exp() / z).collect()
}

/// First index of the maximum.
pub fn argmax_oracle(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn random_text(rng: &mut StdRng, alphabet: &[u8], len: usize) -> String {
    (0..len)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())] as char)
        .collect()
}

/// Small n-gram models trained on random corpora with varied order,
/// smoothing and alphabet skew.
pub fn toy_models(seed: u64) -> Vec<NGramModel> {
    let mut rng = StdRng::seed_from_u64(seed);
    let configs: [(&[u8], usize, f64); 6] = [
        (b"ab", 1, 1.0),
        (b"abc ", 2, 0.5),
        (b"the quick brown fox", 3, 0.1),
        (b"xyz", 4, 0.01),
        (b"abcdefghijklmnop", 3, 0.05),
        (b"01", 5, 2.0),
    ];
    configs
        .iter()
        .map(|&(alphabet, order, smoothing)| {
            let lines: Vec<String> = (0..40)
                .map(|_| {
                    let len = rng.random_range(1..30);
                    random_text(&mut rng, alphabet, len)
                })
                .collect();
            NGramModel::train(&lines.join("\n"), order, smoothing).unwrap()
        })
        .collect()
}

/// A (prompt, reference) pair over a model's vocabulary. Prompts end in bos;
/// references end in eos. Half the references are sampled from the model,
/// half are uniform random tokens (often very unlikely under the model).
pub fn random_pair(model: &NGramModel, rng: &mut StdRng) -> (Vec<TokenId>, Vec<TokenId>) {
    let vocab = model.vocab();
    let bytes: Vec<TokenId> = (0..vocab.size() as TokenId).filter(|&t| vocab.is_byte(t)).collect();
    let mut prompt: Vec<TokenId> = vec![vocab.bos()];
    for _ in 0..rng.random_range(0..6) {
        prompt.push(bytes[rng.random_range(0..bytes.len())]);
    }
    prompt.push(vocab.bos());
    let mut reference = Vec::new();
    let len = rng.random_range(0..25);
    if rng.random_bool(0.5) {
        let mut ctx = prompt.clone();
        for _ in 0..len {
            let p = softmax_oracle(&model.next_logits(&ctx).unwrap());
            let mut u: f64 = rng.random();
            let mut pick = bytes[0];
            for (t, &pt) in p.iter().enumerate() {
                if u < pt {
                    pick = t as TokenId;
                    break;
                }
                u -= pt;
            }
            if pick == vocab.eos() {
                break;
            }
            if pick == vocab.bos() {
                pick = bytes[0];
            }
            reference.push(pick);
            ctx.push(pick);
        }
    } else {
        for _ in 0..len {
            reference.push(bytes[rng.random_range(0..bytes.len())]);
        }
    }
    reference.push(vocab.eos());
    (prompt, reference)
}
