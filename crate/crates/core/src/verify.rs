//! Self-check of the exactly-k machinery against brute-force enumeration.

use std::collections::BTreeMap;

use rand::Rng;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::exactk::{self, oracle, ExactKRowDistribution};
use crate::rng::SeedTree;
use crate::tensor::Tensor;

pub const ENUMERATION_LIMIT: usize = 12;

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerifyReport {
    pub m: usize,
    pub k: usize,
    pub trials: usize,
    pub seed: u64,
    pub checks: Vec<Check>,
    pub passed: bool,
}

fn random_logits(rng: &mut impl Rng, m: usize, scale: f64) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-scale..=scale)).collect()
}

/// Largest absolute error of log-partition and marginals over `vectors`
/// random logit rows in `[-4, 4]`.
pub fn enumeration_error(m: usize, k: usize, vectors: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = SeedTree::new(seed).path(&[m as u64, k as u64]).rng();
    let (mut lz_err, mut mu_err) = (0.0f64, 0.0f64);
    for _ in 0..vectors {
        let theta = random_logits(&mut rng, m, 4.0);
        let d = ExactKRowDistribution::new(&theta, k)?;
        lz_err = lz_err.max((d.log_partition() - oracle::log_partition(&theta, k)?).abs());
        for (a, b) in d.marginals().iter().zip(oracle::marginals(&theta, k)?) {
            mu_err = mu_err.max((a - b).abs());
        }
    }
    Ok((lz_err, mu_err))
}

/// χ² goodness-of-fit p-value of `trials` samples against enumeration.
/// Subsets with expected count below 5 are pooled into one cell.
pub fn chi_square_p_value(theta: &[f64], k: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 {
        return Err(Error::Invalid("trials must be positive".into()));
    }
    let d = ExactKRowDistribution::new(theta, k)?;
    let probs = oracle::probabilities(theta, k)?;
    let index: BTreeMap<&[usize], usize> = probs.iter().enumerate().map(|(i, (s, _))| (s.as_slice(), i)).collect();
    let mut counts = vec![0usize; probs.len()];
    let mut rng = SeedTree::new(seed).rng();
    for _ in 0..trials {
        counts[index[d.sample(&mut rng).as_slice()]] += 1;
    }
    let n = trials as f64;
    let (mut stat, mut cells) = (0.0, 0usize);
    let (mut pooled_obs, mut pooled_exp) = (0.0, 0.0);
    for ((_, p), &c) in probs.iter().zip(&counts) {
        let e = n * p;
        if e < 5.0 {
            pooled_obs += c as f64;
            pooled_exp += e;
        } else {
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_exp > 0.0 {
        stat += (pooled_obs - pooled_exp).powi(2) / pooled_exp;
        cells += 1;
    }
    if cells < 2 {
        // a single cell: the sampler is deterministic and trivially consistent
        return Ok(1.0);
    }
    let chi = ChiSquared::new((cells - 1) as f64).map_err(|e| Error::Invalid(e.to_string()))?;
    Ok(chi.sf(stat))
}

/// Worst norm-relative error of the marginal Jacobian-vector product against
/// central differences of the marginals.
pub fn jacobian_error(theta: &[f64], k: usize, upstream: &[f64]) -> Result<f64> {
    let eps = 1e-5;
    let got = exactk::marginal_jacobian_vp(&Tensor::vector(theta.to_vec()), k, &Tensor::vector(upstream.to_vec()))?;
    let mut fd = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut p = theta.to_vec();
        p[i] += eps;
        let mut q = theta.to_vec();
        q[i] -= eps;
        let (a, b) = (exactk::marginals(&p, k)?, exactk::marginals(&q, k)?);
        fd.push(upstream.iter().zip(a.iter().zip(&b)).map(|(g, (x, y))| g * (x - y) / (2.0 * eps)).sum::<f64>());
    }
    let scale = fd.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-3);
    Ok(got.data().iter().zip(&fd).fold(0.0f64, |a, (x, y)| a.max((x - y).abs() / scale)))
}

/// Partition, marginal, sampling and gradient oracles for one `(m, k)`.
pub fn verify_sampler(m: usize, k: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("need 1 <= k <= m, got k={k}, m={m}")));
    }
    if m > ENUMERATION_LIMIT {
        return Err(Error::Invalid(format!("m={m} exceeds the enumeration limit {ENUMERATION_LIMIT}")));
    }
    let mut checks = Vec::new();
    let (lz, mu) = enumeration_error(m, k, 50, seed)?;
    checks.push(Check { name: "log_partition".into(), passed: lz < 1e-10, value: lz, threshold: 1e-10 });
    checks.push(Check { name: "marginals".into(), passed: mu < 1e-10, value: mu, threshold: 1e-10 });

    let mut rng = SeedTree::new(seed).child(1).rng();
    let theta = random_logits(&mut rng, m, 1.0);
    let p = chi_square_p_value(&theta, k, trials, seed)?;
    checks.push(Check { name: "sampling_chi2_p".into(), passed: p > 1e-3, value: p, threshold: 1e-3 });

    let mut worst = 0.0f64;
    for _ in 0..20 {
        let theta = random_logits(&mut rng, m, 4.0);
        let g = random_logits(&mut rng, m, 1.0);
        worst = worst.max(jacobian_error(&theta, k, &g)?);
    }
    checks.push(Check { name: "jacobian_fd".into(), passed: worst < 1e-6, value: worst, threshold: 1e-6 });

    let passed = checks.iter().all(|c| c.passed);
    Ok(VerifyReport { m, k, trials, seed, checks, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_cases_pass() {
        let r = verify_sampler(4, 2, 20_000, 1).unwrap();
        assert!(r.passed, "{r:?}");
        let r = verify_sampler(3, 3, 100, 1).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(verify_sampler(2, 3, 100, 1).is_err());
        assert!(verify_sampler(13, 3, 100, 1).is_err());
    }

    #[test]
    fn chi_square_rejects_a_wrong_target() {
        // samples from uniform logits tested against a skewed target
        let theta = [0.0, 0.0, 0.0, 0.0];
        let d = ExactKRowDistribution::new(&[2.0, 0.0, 0.0, -2.0], 2).unwrap();
        let probs = oracle::probabilities(&theta, 2).unwrap();
        let mut rng = SeedTree::new(3).rng();
        let mut counts = vec![0usize; probs.len()];
        for _ in 0..5_000 {
            let s = d.sample(&mut rng);
            counts[probs.iter().position(|(t, _)| *t == s).unwrap()] += 1;
        }
        let stat: f64 = probs.iter().zip(&counts).map(|((_, p), &c)| (c as f64 - 5_000.0 * p).powi(2) / (5_000.0 * p)).sum();
        assert!(ChiSquared::new(5.0).unwrap().sf(stat) < 1e-6);
    }
}
