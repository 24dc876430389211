//! Exactly-k conditional Bernoulli rows.
//!
//! A row of logits `θ ∈ R^m` defines independent Bernoulli variables with odds
//! `w = exp(θ)`; conditioning on exactly `k` ones gives
//! `p(S) = Π_{j∈S} w_j / e_k(w)` over `k`-subsets `S`. Everything is computed
//! in log-space from the table `F[i][t] = log e_t(w_1..w_i)`.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::AssignmentMatrix;
use crate::rng::SeedTree;
use crate::tensor::{Tape, Tensor, Var};

/// Logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` before use.
pub const LOGIT_CLAMP: f64 = 30.0;

/// Finite stand-in for `-inf` on the tape, so gradients never see `inf - inf`.
const NEG: f64 = -1e30;

fn lae(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn check_k(m: usize, k: usize) -> Result<()> {
    if k == 0 || k > m {
        return Err(Error::Invalid(format!("need 1 <= k <= m, got k={k}, m={m}")));
    }
    Ok(())
}

/// Forward table over a slice of logits, `(len+1) × (k+1)` row-major.
fn esp_table(theta: &[f64], k: usize) -> Vec<f64> {
    let kk = k + 1;
    let mut f = vec![f64::NEG_INFINITY; (theta.len() + 1) * kk];
    f[0] = 0.0;
    for (i, &th) in theta.iter().enumerate() {
        let (prev, cur) = f.split_at_mut((i + 1) * kk);
        let prev = &prev[i * kk..];
        cur[0] = prev[0];
        for t in 1..kk {
            cur[t] = lae(prev[t], th + prev[t - 1]);
        }
    }
    f
}

/// One row of the exactly-k distribution with its log-ESP table.
#[derive(Clone, Debug)]
pub struct ExactKRowDistribution {
    logits: Vec<f64>,
    k: usize,
    log_esp: Vec<f64>,
}

impl ExactKRowDistribution {
    pub fn new(logits: &[f64], k: usize) -> Result<Self> {
        check_k(logits.len(), k)?;
        if logits.iter().any(|x| x.is_nan()) {
            return Err(Error::Domain("NaN logit".into()));
        }
        let logits: Vec<f64> = logits.iter().map(|x| x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
        let log_esp = esp_table(&logits, k);
        Ok(Self { logits, k, log_esp })
    }

    pub fn m(&self) -> usize {
        self.logits.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Clamped logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// `log e_t(w_1..w_i)`.
    pub fn log_esp(&self, i: usize, t: usize) -> f64 {
        self.log_esp[i * (self.k + 1) + t]
    }

    pub fn log_partition(&self) -> f64 {
        self.log_esp(self.m(), self.k)
    }

    pub fn marginals(&self) -> Vec<f64> {
        let (m, k) = (self.m(), self.k);
        if k == m {
            return vec![1.0; m];
        }
        let kk = k + 1;
        // suffix[j][t] = log e_t(w_j..w_{m-1}), zero-based items
        let mut suffix = vec![f64::NEG_INFINITY; (m + 1) * kk];
        suffix[m * kk] = 0.0;
        for j in (0..m).rev() {
            for t in 0..kk {
                let skip = suffix[(j + 1) * kk + t];
                let take = if t > 0 { self.logits[j] + suffix[(j + 1) * kk + t - 1] } else { f64::NEG_INFINITY };
                suffix[j * kk + t] = lae(skip, take);
            }
        }
        let log_z = self.log_partition();
        (0..m)
            .map(|j| {
                let mut s = f64::NEG_INFINITY;
                for t in 0..k {
                    s = lae(s, self.log_esp(j, t) + suffix[(j + 1) * kk + (k - 1 - t)]);
                }
                (self.logits[j] + s - log_z).exp()
            })
            .collect()
    }

    /// Log-probability of a subset (any order, must have `k` distinct entries).
    pub fn log_prob(&self, subset: &[usize]) -> Result<f64> {
        let mut s = subset.to_vec();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.k || s.iter().any(|&j| j >= self.m()) {
            return Err(Error::Invalid(format!("{subset:?} is not a {}-subset of [{}]", self.k, self.m())));
        }
        Ok(s.iter().map(|&j| self.logits[j]).sum::<f64>() - self.log_partition())
    }

    /// Exact draw by sequential conditional Bernoulli, scanning items from
    /// the last to the first. Returns sorted indices.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.k);
        let mut t = self.k;
        for i in (1..=self.m()).rev() {
            if t == 0 {
                break;
            }
            let include = if t == i {
                true
            } else {
                let p = (self.logits[i - 1] + self.log_esp(i - 1, t - 1) - self.log_esp(i, t)).exp();
                rng.random::<f64>() < p
            };
            if include {
                out.push(i - 1);
                t -= 1;
            }
        }
        out.reverse();
        out
    }
}

pub fn log_partition(logits: &[f64], k: usize) -> Result<f64> {
    Ok(ExactKRowDistribution::new(logits, k)?.log_partition())
}

pub fn marginals(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    Ok(ExactKRowDistribution::new(logits, k)?.marginals())
}

pub fn sample_row<R: Rng + ?Sized>(logits: &[f64], k: usize, rng: &mut R) -> Result<Vec<usize>> {
    Ok(ExactKRowDistribution::new(logits, k)?.sample(rng))
}

/// Row-wise marginals of an `[n×m]` prior matrix.
pub fn marginal_rows(priors: &Tensor, k: usize) -> Result<Tensor> {
    let (n, m) = matrix_dims(priors)?;
    let mut data = Vec::with_capacity(n * m);
    for v in 0..n {
        data.extend(marginals(priors.row(v), k)?);
    }
    Tensor::new(vec![n, m], data)
}

fn matrix_dims(t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::Shape(format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

/// `q` independent assignments. Row `v` of sample `s` draws from stream
/// `seeds.path(&[s, v])`.
pub fn sample_assignment(priors: &Tensor, k: usize, q: usize, seeds: SeedTree) -> Result<Vec<AssignmentMatrix>> {
    let (n, m) = matrix_dims(priors)?;
    if q == 0 {
        return Err(Error::Invalid("q must be at least 1".into()));
    }
    check_k(m, k)?;
    let rows: Vec<ExactKRowDistribution> =
        (0..n).map(|v| ExactKRowDistribution::new(priors.row(v), k)).collect::<Result<_>>()?;
    (0..q)
        .map(|s| {
            let sample_seeds = seeds.child(s as u64);
            let picks = rows
                .iter()
                .enumerate()
                .map(|(v, d)| d.sample(&mut sample_seeds.child(v as u64).rng()))
                .collect();
            AssignmentMatrix::new(m, k, picks)
        })
        .collect()
}

/// Differentiable marginals of an `[n×m]` logit matrix, all rows at once.
///
/// The same log-space recursion as [`ExactKRowDistribution`], recorded on the
/// tape with `O(m)` operations on `[n×(k+1)]` tensors.
pub fn marginals_var<'a>(theta: Var<'a>, k: usize) -> Result<Var<'a>> {
    let shape = theta.shape();
    if shape.len() != 2 {
        return Err(Error::Shape(format!("expected a matrix of logits, got {shape:?}")));
    }
    let (n, m) = (shape[0], shape[1]);
    check_k(m, k)?;
    let tape = theta.tape();
    let kk = k + 1;
    let th = theta.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);

    let mut start = Tensor::full(&[n, kk], NEG);
    for v in 0..n {
        start.data_mut()[v * kk] = 0.0;
    }
    let start = tape.constant(start);
    let shift: Vec<Option<usize>> = std::iter::once(None).chain((0..k).map(Some)).collect();
    let step = |prev: Var<'a>, j: usize| -> Result<Var<'a>> {
        let col = th.gather_cols(&vec![Some(j); kk], 0.0)?;
        prev.logaddexp(col.add(prev.gather_cols(&shift, NEG)?)?)
    };

    let mut prefix = vec![start];
    for j in 0..m {
        prefix.push(step(prefix[j], j)?);
    }
    let mut suffix = vec![start; m + 1];
    for j in (0..m).rev() {
        suffix[j] = step(suffix[j + 1], j)?;
    }

    let log_z = prefix[m].gather_cols(&[Some(k)], 0.0)?;
    let head: Vec<Option<usize>> = (0..k).map(Some).collect();
    let tail: Vec<Option<usize>> = (0..k).rev().map(Some).collect();
    let cols = (0..m)
        .map(|j| {
            let pair = prefix[j].gather_cols(&head, 0.0)?.add(suffix[j + 1].gather_cols(&tail, 0.0)?)?;
            let log_mu = th.gather_cols(&[Some(j)], 0.0)?.add(pair.logsumexp_rows()?)?.sub(log_z)?;
            Ok(log_mu.exp())
        })
        .collect::<Result<Vec<_>>>()?;
    tape.concat_cols(&cols)
}

/// `(∂μ/∂θ)ᵀ · upstream`, row-wise. Accepts a single row `[m]` or `[n×m]`.
pub fn marginal_jacobian_vp(logits: &Tensor, k: usize, upstream: &Tensor) -> Result<Tensor> {
    if logits.shape() != upstream.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs upstream {:?}",
            logits.shape(),
            upstream.shape()
        )));
    }
    let as_matrix = |t: &Tensor| -> Result<Tensor> {
        match t.rank() {
            1 => t.clone().reshape(&[1, t.len()]),
            2 => Ok(t.clone()),
            _ => Err(Error::Shape(format!("expected rank 1 or 2, got {:?}", t.shape()))),
        }
    };
    let tape = Tape::new();
    let theta = tape.leaf(as_matrix(logits)?);
    let mu = marginals_var(theta, k)?;
    let grads = tape.backward_with(mu, as_matrix(upstream)?)?;
    grads.wrt(theta).reshape(logits.shape())
}

/// How the model turns priors into assignment tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AssignMode {
    /// Exact samples forward, marginal Jacobian backward.
    StraightThrough,
    /// `H = μ(θ)` forward and backward. Diagnostic only.
    Relaxed,
}

/// Differentiable assignment tensors plus the discrete samples behind them.
pub struct Assignments<'a> {
    pub dense: Vec<Var<'a>>,
    /// Empty in relaxed mode.
    pub samples: Vec<AssignmentMatrix>,
}

/// `q` straight-through assignment tensors for priors `[n×m]`.
///
/// Each forward value is a sampled binary `H`; the backward pass maps the
/// gradient at `H` through the row-wise marginal Jacobian.
pub fn straight_through_assign<'a>(priors: Var<'a>, k: usize, q: usize, seeds: SeedTree) -> Result<Assignments<'a>> {
    let samples = sample_assignment(&priors.value(), k, q, seeds)?;
    straight_through_from_samples(priors, k, samples)
}

/// Straight-through tensors for samples drawn elsewhere.
pub fn straight_through_from_samples<'a>(
    priors: Var<'a>,
    k: usize,
    samples: Vec<AssignmentMatrix>,
) -> Result<Assignments<'a>> {
    let theta = priors.value();
    let (n, m) = matrix_dims(&theta)?;
    if let Some(bad) = samples.iter().find(|h| h.n() != n || h.m() != m || h.k() != k) {
        return Err(Error::Shape(format!(
            "assignment {}x{} (k={}) for priors {n}x{m} (k={k})",
            bad.n(),
            bad.m(),
            bad.k()
        )));
    }
    let tape = priors.tape();
    let dense = samples
        .iter()
        .map(|h| {
            let theta = Rc::clone(&theta);
            tape.custom_grad(&[priors], h.to_dense(), move |g| Ok(vec![marginal_jacobian_vp(&theta, k, g)?]))
        })
        .collect();
    Ok(Assignments { dense, samples })
}

pub fn assign<'a>(priors: Var<'a>, k: usize, q: usize, seeds: SeedTree, mode: AssignMode) -> Result<Assignments<'a>> {
    match mode {
        AssignMode::StraightThrough => straight_through_assign(priors, k, q, seeds),
        AssignMode::Relaxed => {
            let mu = marginals_var(priors, k)?;
            Ok(Assignments {
                dense: vec![mu; q.max(1)],
                samples: Vec::new(),
            })
        }
    }
}

/// Brute-force enumeration over all `k`-subsets, used as an oracle.
pub mod oracle {
    use super::*;

    /// Every `k`-subset (sorted, in bitmask order) with its log-weight `Σθ`.
    pub fn subsets(logits: &[f64], k: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        let m = logits.len();
        check_k(m, k)?;
        if m > 20 {
            return Err(Error::Invalid(format!("enumeration over m={m} is too large")));
        }
        let th: Vec<f64> = logits.iter().map(|x| x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)).collect();
        Ok((0u32..1 << m)
            .filter(|mask| mask.count_ones() as usize == k)
            .map(|mask| {
                let s: Vec<usize> = (0..m).filter(|j| mask >> j & 1 == 1).collect();
                let lw = s.iter().map(|&j| th[j]).sum();
                (s, lw)
            })
            .collect())
    }

    pub fn log_partition(logits: &[f64], k: usize) -> Result<f64> {
        let subs = subsets(logits, k)?;
        let top = subs.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        Ok(top + subs.iter().map(|s| (s.1 - top).exp()).sum::<f64>().ln())
    }

    /// Subset probabilities in the order of [`subsets`].
    pub fn probabilities(logits: &[f64], k: usize) -> Result<Vec<(Vec<usize>, f64)>> {
        let log_z = log_partition(logits, k)?;
        Ok(subsets(logits, k)?.into_iter().map(|(s, lw)| (s, (lw - log_z).exp())).collect())
    }

    pub fn marginals(logits: &[f64], k: usize) -> Result<Vec<f64>> {
        let mut mu = vec![0.0; logits.len()];
        for (s, p) in probabilities(logits, k)? {
            for j in s {
                mu[j] += p;
            }
        }
        Ok(mu)
    }
}
