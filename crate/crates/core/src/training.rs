//! Losses, Adam with cosine annealing, the training loop and evaluation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactk::AssignMode;
use crate::graph::{AttributedGraph, Target};
use crate::metrics;
use crate::model::{Batch, Bound, Model, Sampling};
use crate::rng::SeedTree;
use crate::tensor::{ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Multiclass,
    Binary,
    RegressionMae,
    RegressionMse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskHead {
    pub kind: TaskKind,
    pub out_dim: usize,
}

impl TaskHead {
    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            TaskKind::Multiclass | TaskKind::Binary => "accuracy",
            TaskKind::RegressionMae | TaskKind::RegressionMse => "mae",
        }
    }

    /// Whether larger metric values are better.
    pub fn maximize(&self) -> bool {
        matches!(self.kind, TaskKind::Multiclass | TaskKind::Binary)
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim == 0 || (self.kind == TaskKind::Binary && self.out_dim != 1) {
            return Err(Error::Invalid(format!("bad output width {} for {:?}", self.out_dim, self.kind)));
        }
        Ok(())
    }
}

fn target_of(t: Option<&Target>) -> Result<&Target> {
    t.ok_or_else(|| Error::Invalid("graph has no target".into()))
}

/// Mean loss over the rows of `pred` (`[G×out]`).
pub fn loss<'a>(pred: Var<'a>, targets: &[Option<Target>], head: TaskHead) -> Result<Var<'a>> {
    let shape = pred.shape();
    if shape.len() != 2 || shape[0] != targets.len() || shape[1] != head.out_dim {
        return Err(Error::Shape(format!(
            "prediction {shape:?} for {} targets of width {}",
            targets.len(),
            head.out_dim
        )));
    }
    let (g, c) = (shape[0], shape[1]);
    let tape = pred.tape();
    let scale = 1.0 / g as f64;
    match head.kind {
        TaskKind::Multiclass => {
            let mut mask = Tensor::zeros(&[g, c]);
            for (i, t) in targets.iter().enumerate() {
                let y = target_of(t.as_ref())?.class()?;
                if y >= c {
                    return Err(Error::Index(format!("class {y} with {c} outputs")));
                }
                mask.data_mut()[i * c + y] = 1.0;
            }
            Ok(pred.log_softmax_rows()?.mul(tape.constant(mask))?.sum_all().scale(-scale))
        }
        TaskKind::Binary => {
            let y = targets
                .iter()
                .map(|t| match target_of(t.as_ref())?.class()? {
                    y @ (0 | 1) => Ok(y as f64),
                    y => Err(Error::Index(format!("binary target {y}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            // softplus(z) − y·z
            let softplus = pred.logaddexp(tape.constant(Tensor::zeros(&[g, 1])))?;
            let yz = pred.mul(tape.constant(Tensor::new(vec![g, 1], y)?))?;
            Ok(softplus.sub(yz)?.sum_all().scale(scale))
        }
        TaskKind::RegressionMae | TaskKind::RegressionMse => {
            let mut y = Vec::with_capacity(g * c);
            for t in targets {
                let v = target_of(t.as_ref())?.as_slice();
                if v.len() != c {
                    return Err(Error::Shape(format!("target of width {} for {c} outputs", v.len())));
                }
                y.extend_from_slice(v);
            }
            let diff = pred.sub(tape.constant(Tensor::new(vec![g, c], y)?))?;
            let per = if head.kind == TaskKind::RegressionMae { diff.abs() } else { diff.mul(diff)? };
            Ok(per.sum_all().scale(1.0 / (g * c) as f64))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_base: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            lr_min: 1e-5,
            epochs: 100,
            batch_size: 32,
            clip_norm: 5.0,
        }
    }
}

/// Adam with a cosine-annealed learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: usize,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
    pub lr_base: f64,
    pub lr_min: f64,
    pub total_steps: usize,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(params: &ParameterStore, lr_base: f64, lr_min: f64, total_steps: usize) -> Self {
        let zeros: BTreeMap<String, Tensor> = params
            .iter()
            .filter(|(n, _)| !n.starts_with("opt."))
            .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape())))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
            lr_base,
            lr_min,
            total_steps: total_steps.max(1),
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }

    /// `lr_min + ½(lr_base − lr_min)(1 + cos(π·step/total))`, clamped at the end.
    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = (step as f64 / self.total_steps as f64).min(1.0);
        self.lr_min + 0.5 * (self.lr_base - self.lr_min) * (1.0 + (PI * frac).cos())
    }

    pub fn lr(&self) -> f64 {
        self.lr_at(self.step)
    }

    /// One Adam update at the current learning rate; returns that rate.
    pub fn apply(&mut self, params: &mut ParameterStore, grads: &BTreeMap<String, Tensor>) -> Result<f64> {
        let lr = self.lr();
        self.step += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::Invalid(format!("gradient for unknown {name}")))?;
            let m = self.first.get_mut(name).ok_or_else(|| Error::Invalid(format!("no moments for {name}")))?;
            let v = self.second.get_mut(name).expect("moments are created together");
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!("{name}: gradient {:?} vs {:?}", g.shape(), p.shape())));
            }
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + self.eps);
            }
        }
        Ok(lr)
    }

    /// Writes moments under `opt.m.*`, `opt.v.*` and scalars under `opt.*`.
    pub fn store_into(&self, store: &mut ParameterStore) {
        for (n, t) in &self.first {
            store.insert(format!("opt.m.{n}"), t.clone());
        }
        for (n, t) in &self.second {
            store.insert(format!("opt.v.{n}"), t.clone());
        }
        store.insert("opt.step", Tensor::vector(vec![self.step as f64]));
        store.insert("opt.schedule", Tensor::vector(vec![self.lr_base, self.lr_min, self.total_steps as f64]));
    }

    /// Restores from a store written by [`store_into`](Self::store_into).
    pub fn load_from(store: &ParameterStore) -> Result<Option<Self>> {
        let Some(step) = store.get("opt.step") else {
            return Ok(None);
        };
        let sched = store.get("opt.schedule").ok_or_else(|| Error::Checkpoint("opt.schedule missing".into()))?;
        if sched.len() != 3 || step.len() != 1 {
            return Err(Error::Checkpoint("malformed optimizer scalars".into()));
        }
        let mut state = Self::new(store, sched.data()[0], sched.data()[1], sched.data()[2] as usize);
        state.step = step.data()[0] as usize;
        let names: Vec<String> = state.first.keys().cloned().collect();
        for n in names {
            let m = store.get(&format!("opt.m.{n}")).ok_or_else(|| Error::Checkpoint(format!("opt.m.{n} missing")))?;
            let v = store.get(&format!("opt.v.{n}")).ok_or_else(|| Error::Checkpoint(format!("opt.v.{n} missing")))?;
            state.first.insert(n.clone(), m.clone());
            state.second.insert(n, v.clone());
        }
        Ok(Some(state))
    }
}

/// Model parameters only (drops optimizer entries).
pub fn model_params(store: &ParameterStore) -> ParameterStore {
    let mut out = store.clone();
    let opt: Vec<String> = store.names().filter(|n| n.starts_with("opt.")).cloned().collect();
    for n in opt {
        out.remove(&n);
    }
    out
}

/// Scales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One JSONL metric record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub metric: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

fn theta_summary(theta: &Tensor) -> String {
    let d = theta.data();
    let finite: Vec<f64> = d.iter().copied().filter(|x| x.is_finite()).collect();
    let n = finite.len().max(1) as f64;
    let mean = finite.iter().sum::<f64>() / n;
    let std = (finite.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let (lo, hi) = finite.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    format!(
        "theta: {} entries, {} non-finite, mean {mean:.4e}, std {std:.4e}, min {lo:.4e}, max {hi:.4e}",
        d.len(),
        d.len() - finite.len()
    )
}

/// Loss and gradients of one batch.
pub fn batch_gradients(
    model: &Model,
    params: &ParameterStore,
    batch: &Batch,
    head: TaskHead,
    sampling: Sampling,
) -> Result<(f64, Tensor, BTreeMap<String, Tensor>)> {
    let tape = Tape::new();
    let bound = Bound::new(&tape, &model_params(params));
    let out = model.forward(&bound, batch, sampling)?;
    let l = loss(out.prediction, &batch.targets, head)?;
    let value = l.value().item()?;
    if !value.is_finite() {
        let detail = out.theta.map_or_else(|| "no priors".to_string(), |t| theta_summary(&t.value()));
        return Err(Error::Divergence(format!("loss {value}; {detail}")));
    }
    let grads = tape.backward(l)?;
    let named = bound.iter().map(|(n, &v)| (n.clone(), grads.wrt(v))).collect();
    Ok((value, out.prediction.value().as_ref().clone(), named))
}

fn m_for(model: &Model) -> usize {
    model.spec.m.max(1)
}

/// Epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub loss: f64,
    pub metric: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// One pass over `train` in a seed-determined order. Sampling streams are
/// keyed by `(seed, epoch, graph index)`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &Model,
    head: TaskHead,
    train: &[AttributedGraph],
    params: &mut ParameterStore,
    opt: &mut OptimizerState,
    cfg: &OptimConfig,
    seed: u64,
    epoch: usize,
) -> Result<EpochMetrics> {
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let start = Instant::now();
    let root = SeedTree::new(seed).child(epoch as u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut root.child(0).rng());
    let (mut loss_sum, mut lr) = (0.0, opt.lr());
    let mut preds = Vec::with_capacity(train.len());
    let mut targets = Vec::with_capacity(train.len());
    for chunk in order.chunks(cfg.batch_size.max(1)) {
        let members: Vec<(u64, &AttributedGraph)> = chunk.iter().map(|&i| (i as u64, &train[i])).collect();
        let batch = Batch::new(&members, m_for(model))?;
        let sampling = Sampling {
            seeds: root.child(1),
            q: model.spec.samples(true),
            mode: AssignMode::StraightThrough,
        };
        let (l, pred, mut grads) = batch_gradients(model, params, &batch, head, sampling)?;
        clip_global_norm(&mut grads, cfg.clip_norm);
        lr = opt.apply(params, &grads)?;
        loss_sum += l * chunk.len() as f64;
        for (i, t) in batch.targets.iter().enumerate() {
            preds.push(pred.row(i).to_vec());
            targets.push(t.clone());
        }
    }
    Ok(EpochMetrics {
        loss: loss_sum / train.len() as f64,
        metric: metrics::task_metric(&preds, &targets, head)?,
        lr,
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

/// Predictions `[G×out]` with `q_eval` samples per graph.
pub fn predict(
    model: &Model,
    params: &ParameterStore,
    graphs: &[AttributedGraph],
    batch_size: usize,
    seeds: SeedTree,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(graphs.len());
    let idx: Vec<usize> = (0..graphs.len()).collect();
    let params = model_params(params);
    for chunk in idx.chunks(batch_size.max(1)) {
        let members: Vec<(u64, &AttributedGraph)> = chunk.iter().map(|&i| (i as u64, &graphs[i])).collect();
        let batch = Batch::new(&members, m_for(model))?;
        let tape = Tape::new();
        let bound = Bound::new(&tape, &params);
        let sampling = Sampling {
            seeds,
            q: model.spec.samples(false),
            mode: AssignMode::StraightThrough,
        };
        let pred = model.forward(&bound, &batch, sampling)?.prediction.value();
        out.extend((0..chunk.len()).map(|i| pred.row(i).to_vec()));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub per_repeat: Vec<f64>,
    /// Metric of the predictions averaged over all repeats.
    pub ensemble: f64,
    /// Average precision for binary heads.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub average_precision: Option<f64>,
    pub loss: f64,
}

/// Metric over `repeats` independent assignment draws.
pub fn evaluate(
    model: &Model,
    head: TaskHead,
    graphs: &[AttributedGraph],
    params: &ParameterStore,
    seed: u64,
    repeats: usize,
) -> Result<MetricReport> {
    if repeats == 0 {
        return Err(Error::Invalid("repeats must be at least 1".into()));
    }
    if graphs.is_empty() {
        return Err(Error::Invalid("evaluation set is empty".into()));
    }
    let targets: Vec<Option<Target>> = graphs.iter().map(|g| g.label().cloned()).collect();
    let mut per_repeat = Vec::with_capacity(repeats);
    let mut mean_pred = vec![vec![0.0; head.out_dim]; graphs.len()];
    for r in 0..repeats {
        let preds = predict(model, params, graphs, 64, SeedTree::new(seed).path(&[u64::MAX - 7, r as u64]))?;
        per_repeat.push(metrics::task_metric(&preds, &targets, head)?);
        for (acc, p) in mean_pred.iter_mut().zip(&preds) {
            for (a, x) in acc.iter_mut().zip(p) {
                *a += x / repeats as f64;
            }
        }
    }
    let mean = per_repeat.iter().sum::<f64>() / repeats as f64;
    let std = (per_repeat.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
    let tape = Tape::new();
    let flat = Tensor::from_rows(&mean_pred)?;
    let l = loss(tape.constant(flat), &targets, head)?.value().item()?;
    let average_precision = if head.kind == TaskKind::Binary {
        let scores: Vec<f64> = mean_pred.iter().map(|p| p[0]).collect();
        let labels = targets.iter().map(|t| Ok(target_of(t.as_ref())?.class()? == 1)).collect::<Result<Vec<_>>>()?;
        Some(metrics::average_precision(&scores, &labels)?)
    } else {
        None
    };
    Ok(MetricReport {
        metric: head.metric_name().into(),
        mean,
        std,
        per_repeat,
        ensemble: metrics::task_metric(&mean_pred, &targets, head)?,
        average_precision,
        loss: l,
    })
}

/// Result of [`fit`].
pub struct FitResult {
    pub params: ParameterStore,
    pub best: ParameterStore,
    pub history: Vec<MetricRecord>,
}

/// Trains for `cfg.epochs`, tracking the best validation checkpoint (or the
/// last one when there is no validation split). `stop` can end training
/// early after any epoch.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    model: &Model,
    head: TaskHead,
    train: &[AttributedGraph],
    val: &[AttributedGraph],
    params: ParameterStore,
    cfg: &OptimConfig,
    seed: u64,
    mut stop: impl FnMut(usize, &ParameterStore, &[MetricRecord]) -> Result<bool>,
) -> Result<FitResult> {
    let mut params = params;
    let steps = cfg.epochs * train.len().div_ceil(cfg.batch_size.max(1));
    // a resumed run keeps its moments but follows the current schedule
    let mut opt = match OptimizerState::load_from(&params)? {
        Some(mut o) => {
            (o.lr_base, o.lr_min, o.total_steps) = (cfg.lr_base, cfg.lr_min, steps.max(1));
            o
        }
        None => OptimizerState::new(&params, cfg.lr_base, cfg.lr_min, steps),
    };
    let mut params_only = model_params(&params);
    let first_epoch = opt.step / train.len().div_ceil(cfg.batch_size.max(1)).max(1);
    let mut history = Vec::new();
    let mut best = params_only.clone();
    let mut best_score = f64::NEG_INFINITY;
    for epoch in first_epoch..cfg.epochs {
        let m = train_epoch(model, head, train, &mut params_only, &mut opt, cfg, seed, epoch)?;
        history.push(MetricRecord {
            epoch,
            split: "train".into(),
            loss: m.loss,
            metric: m.metric,
            lr: m.lr,
            wall_ms: m.wall_ms,
        });
        let score = if val.is_empty() {
            f64::INFINITY
        } else {
            let t = Instant::now();
            let r = evaluate(model, head, val, &params_only, seed ^ epoch as u64, 1)?;
            history.push(MetricRecord {
                epoch,
                split: "val".into(),
                loss: r.loss,
                metric: r.mean,
                lr: m.lr,
                wall_ms: t.elapsed().as_secs_f64() * 1e3,
            });
            if head.maximize() { r.mean } else { -r.mean }
        };
        if score >= best_score {
            best_score = score;
            best = params_only.clone();
        }
        if stop(epoch, &params_only, &history)? {
            break;
        }
    }
    params = params_only;
    opt.store_into(&mut params);
    Ok(FitResult { params, best, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::leafcount_tree;
    use crate::model::{ModelDims, ModelSpec, ReadoutSource, VirtualInit};

    fn head(kind: TaskKind, out_dim: usize) -> TaskHead {
        TaskHead { kind, out_dim }
    }

    fn scalar_loss(pred: Vec<Vec<f64>>, targets: Vec<Target>, h: TaskHead) -> Result<f64> {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&pred)?);
        let t: Vec<Option<Target>> = targets.into_iter().map(Some).collect();
        loss(p, &t, h)?.value().item()
    }

    #[test]
    fn loss_examples() {
        let bin = head(TaskKind::Binary, 1);
        for y in [0.0, 1.0] {
            let l = scalar_loss(vec![vec![0.0]], vec![Target::Scalar(y)], bin).unwrap();
            assert!((l - 2f64.ln()).abs() < 1e-15);
        }
        let mae = head(TaskKind::RegressionMae, 2);
        assert_eq!(scalar_loss(vec![vec![1.5, -2.0]], vec![Target::Vector(vec![1.5, -2.0])], mae).unwrap(), 0.0);
        let mse = head(TaskKind::RegressionMse, 1);
        assert_eq!(scalar_loss(vec![vec![1.0], vec![3.0]], vec![Target::Scalar(0.0); 2], mse).unwrap(), 5.0);
        let mc = head(TaskKind::Multiclass, 3);
        let l = scalar_loss(vec![vec![1.0, 0.0, 0.0]], vec![Target::Scalar(0.0)], mc).unwrap();
        let e = std::f64::consts::E;
        assert!((l - (-(e / (e + 2.0)).ln())).abs() < 1e-12);
        assert!((l - 0.5514).abs() < 1e-4);
        assert!(scalar_loss(vec![vec![1.0, 0.0, 0.0]], vec![Target::Scalar(3.0)], mc).is_err());
    }

    #[test]
    fn cosine_schedule() {
        let opt = OptimizerState::new(&ParameterStore::new(), 1e-2, 1e-4, 100);
        assert_eq!(opt.lr_at(0), 1e-2);
        assert!((opt.lr_at(50) - (1e-2 + 1e-4) / 2.0).abs() < 1e-15);
        assert!((opt.lr_at(100) - 1e-4).abs() < 1e-15);
        assert!((0..=120).all(|s| (1e-4..=1e-2).contains(&opt.lr_at(s))));
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![0.3, -1.0]));
        let before = store.clone();
        let mut opt = OptimizerState::new(&store, 0.1, 0.0, 10);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        for _ in 0..5 {
            opt.apply(&mut store, &grads).unwrap();
        }
        assert_eq!(store, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.0]));
        let mut opt = OptimizerState::new(&store, 0.1, 0.1, 10);
        opt.apply(&mut store, &BTreeMap::from([("w".to_string(), Tensor::vector(vec![3.0]))])).unwrap();
        assert!((store.get("w").unwrap().data()[0] - 0.9).abs() < 1e-9);
    }

    #[test]
    fn optimizer_state_roundtrips_through_the_store() {
        let mut store = ParameterStore::new();
        store.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = OptimizerState::new(&store, 0.1, 0.01, 10);
        opt.apply(&mut store, &BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, -1.0]))])).unwrap();
        let mut saved = store.clone();
        opt.store_into(&mut saved);
        assert_eq!(OptimizerState::load_from(&saved).unwrap().unwrap(), opt);
        assert_eq!(model_params(&saved), store);
        assert!(OptimizerState::load_from(&store).unwrap().is_none());
    }

    #[test]
    fn clipping() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0, 4.0]))]);
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
    }

    fn tiny_model(ds: bool) -> Model {
        let spec = ModelSpec {
            d_hidden_up: 8,
            layers_up: 1,
            d_hidden_down: 8,
            layers_down: 1,
            m: 2,
            k: 1,
            q: 1,
            virtual_init: VirtualInit::Identity,
            readout_source: ReadoutSource::Root,
            ds_enabled: ds,
            ..ModelSpec::default()
        };
        Model::new(spec, ModelDims { d_in: 3, d_edge: None, out_dim: 5 }).unwrap()
    }

    #[test]
    fn zero_learning_rate_repeats_the_loss() {
        let model = tiny_model(true);
        let g = vec![leafcount_tree(2, &[true, false, true, true]).unwrap()];
        let h = head(TaskKind::Multiclass, 5);
        let cfg = OptimConfig { lr_base: 0.0, lr_min: 0.0, epochs: 3, batch_size: 1, clip_norm: 5.0 };
        let init = model.init_params(0);
        let mut params = init.clone();
        let mut opt = OptimizerState::new(&params, 0.0, 0.0, 3);
        let a = train_epoch(&model, h, &g, &mut params, &mut opt, &cfg, 4, 0).unwrap();
        let b = train_epoch(&model, h, &g, &mut params, &mut opt, &cfg, 4, 0).unwrap();
        assert_eq!(params, init);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn single_example_overfits() {
        // one leaf-count tree, priors pinned so the assignment is fixed
        let model = tiny_model(true);
        let g = vec![leafcount_tree(2, &[true, false, true, true]).unwrap()];
        let h = head(TaskKind::Multiclass, 5);
        let mut params = model.init_params(1);
        params.insert("up.head.b", Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap());
        let cfg = OptimConfig { lr_base: 1e-2, lr_min: 1e-2, epochs: 50, batch_size: 1, clip_norm: 5.0 };
        let mut opt = OptimizerState::new(&params, 1e-2, 1e-2, 50);
        let mut losses = Vec::new();
        for e in 0..50 {
            losses.push(train_epoch(&model, h, &g, &mut params, &mut opt, &cfg, 0, e).unwrap().loss);
        }
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
        assert!(losses[49] < 1e-6);
    }

    #[test]
    fn training_is_deterministic() {
        let model = tiny_model(true);
        let graphs: Vec<_> = crate::datasets::gen_trees_leafcount(2, 12, 3).unwrap();
        let h = head(TaskKind::Multiclass, 5);
        let cfg = OptimConfig { lr_base: 1e-2, lr_min: 1e-3, epochs: 3, batch_size: 4, clip_norm: 5.0 };
        let run = || {
            fit(&model, h, &graphs, &[], model.init_params(2), &cfg, 9, |_, _, _| Ok(false))
                .unwrap()
                .history
                .iter()
                .map(|r| r.loss.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluation_examples() {
        let model = tiny_model(true);
        let h = head(TaskKind::Multiclass, 5);
        let graphs = crate::datasets::gen_trees_leafcount(2, 10, 3).unwrap();
        let mut params = model.init_params(5);
        params.insert("up.head.b", Tensor::new(vec![1, 2], vec![30.0, -30.0]).unwrap());
        let r = evaluate(&model, h, &graphs, &params, 0, 3).unwrap();
        assert_eq!(r.std, 0.0);
        assert!(evaluate(&model, h, &graphs, &params, 0, 0).is_err());

        // a constant predictor on a balanced binary set scores one half
        let spec = ModelSpec { ds_enabled: false, d_hidden_down: 2, ..ModelSpec::default() };
        let model = Model::new(spec, ModelDims { d_in: 1, d_edge: None, out_dim: 1 }).unwrap();
        let mut params = model.init_params(0);
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut pairs = Vec::new();
        for s in [3, 4] {
            let (a, b) = crate::datasets::gen_wl_pair(crate::datasets::PairFamily::CycleSplit, s, SeedTree::new(0)).unwrap();
            pairs.extend([a, b]);
        }
        let r = evaluate(&model, head(TaskKind::Binary, 1), &pairs, &params, 0, 1).unwrap();
        assert_eq!(r.mean, 0.5);
    }

    #[test]
    fn divergence_is_reported_with_prior_statistics() {
        let model = tiny_model(true);
        let g = vec![leafcount_tree(2, &[true, false, true, true]).unwrap()];
        let mut params = model.init_params(1);
        params.get_mut("head.lin2.b").unwrap().data_mut()[0] = f64::NAN;
        let batch = Batch::new(&[(0, &g[0])], 2).unwrap();
        let sampling = Sampling { seeds: SeedTree::new(0), q: 1, mode: AssignMode::StraightThrough };
        match batch_gradients(&model, &params, &batch, head(TaskKind::Multiclass, 5), sampling) {
            Err(Error::Divergence(msg)) => assert!(msg.contains("theta"), "{msg}"),
            other => panic!("{:?}", other.map(|r| r.0)),
        }
    }
}
