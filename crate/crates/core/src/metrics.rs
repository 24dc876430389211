//! Over-squashing diagnostics and task metrics.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactk::AssignMode;
use crate::graph::{AssignmentMatrix, AttributedGraph, Target};
use crate::model::{Batch, Bound, Model, Sampling};
use crate::rng::SeedTree;
use crate::tensor::{ParameterStore, Tape, Tensor};
use crate::training::{model_params, TaskHead, TaskKind};

/// Eigenvalues below this are treated as zero in the pseudoinverse.
pub const EIGEN_CUTOFF: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResistanceReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub graph_id: Option<u64>,
    pub r_total: f64,
    /// `(u, v, R(u,v))` for `u < v` in the same component.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_pair: Option<Vec<(usize, usize, f64)>>,
}

/// Before/after record emitted by diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResistanceComparison {
    pub graph_id: u64,
    pub r_total_before: f64,
    pub r_total_after: f64,
    pub log_ratio: f64,
}

impl ResistanceComparison {
    pub fn new(graph_id: u64, before: &ResistanceReport, after: &ResistanceReport) -> Self {
        Self {
            graph_id,
            r_total_before: before.r_total,
            r_total_after: after.r_total,
            log_ratio: (after.r_total / before.r_total).ln(),
        }
    }
}

fn laplacian_of(n: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(n, n);
    for &(u, v) in edges {
        l[(u, v)] -= 1.0;
        l[(v, u)] -= 1.0;
        l[(u, u)] += 1.0;
        l[(v, v)] += 1.0;
    }
    l
}

fn pseudoinverse(l: DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let eig = SymmetricEigen::new(l);
    let mut pinv = DMatrix::zeros(n, n);
    for (i, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda.abs() > EIGEN_CUTOFF {
            let col = eig.eigenvectors.column(i);
            pinv += (col * col.transpose()) / lambda;
        }
    }
    pinv
}

fn components_of(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(u, v) in edges {
        let (a, b) = (find(&mut parent, u), find(&mut parent, v));
        parent[a.max(b)] = a.min(b);
    }
    (0..n).map(|v| find(&mut parent, v)).collect()
}

/// Resistance over pairs `u < v < limit` sharing a component.
fn resistance_report(n: usize, edges: &[(usize, usize)], limit: usize) -> ResistanceReport {
    let pinv = pseudoinverse(laplacian_of(n, edges));
    let comp = components_of(n, edges);
    let mut pairs = Vec::new();
    let mut total = 0.0;
    for u in 0..limit {
        for v in u + 1..limit {
            if comp[u] == comp[v] {
                let r = (pinv[(u, u)] + pinv[(v, v)] - 2.0 * pinv[(u, v)]).max(0.0);
                total += r;
                pairs.push((u, v, r));
            }
        }
    }
    ResistanceReport { graph_id: None, r_total: total, per_pair: Some(pairs) }
}

/// Total effective resistance with unit resistors on every edge, summed over
/// intra-component pairs.
pub fn effective_resistance(g: &AttributedGraph) -> ResistanceReport {
    resistance_report(g.n(), g.edges(), g.n())
}

/// The edges of `g` plus node–virtual edges from `h` and a complete graph on
/// the virtual nodes, which are numbered `n..n+m`.
pub fn augmented_edges(g: &AttributedGraph, h: &AssignmentMatrix) -> Result<Vec<(usize, usize)>> {
    if h.n() != g.n() {
        return Err(Error::Shape(format!("assignment for {} nodes on a graph with {}", h.n(), g.n())));
    }
    let n = g.n();
    let mut edges = g.edges().to_vec();
    for (v, row) in h.rows().iter().enumerate() {
        edges.extend(row.iter().map(|&c| (v, n + c)));
    }
    for a in 0..h.m() {
        edges.extend((a + 1..h.m()).map(|b| (n + a, n + b)));
    }
    Ok(edges)
}

/// Resistance over original-node pairs after rewiring with `h`.
pub fn rewired_resistance(g: &AttributedGraph, h: &AssignmentMatrix) -> Result<ResistanceReport> {
    let edges = augmented_edges(g, h)?;
    Ok(resistance_report(g.n() + h.m(), &edges, g.n()))
}

/// Whether some virtual node has at least two attached nodes.
pub fn has_shared_virtual_node(h: &AssignmentMatrix) -> bool {
    h.max_load() >= 2
}

/// A pair attaining the diameter, lexicographically first.
pub fn most_distant_pair(g: &AttributedGraph) -> Result<(usize, usize, usize)> {
    if g.n() == 0 {
        return Err(Error::Graph("empty graph".into()));
    }
    let mut best = (0, 0, 0);
    for u in 0..g.n() {
        for (v, d) in g.bfs(u).into_iter().enumerate() {
            let d = d.ok_or_else(|| Error::Graph("graph is disconnected".into()))?;
            if d > best.2 {
                best = (u, v, d);
            }
        }
    }
    Ok(best)
}

/// `log ‖∂h^l_v/∂h^k_u + ∂h^l_u/∂h^k_v‖₁` (entrywise), or `-∞` when the sum
/// is exactly zero. Virtual-node models use one assignment drawn from `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sensitivity(
    g: &AttributedGraph,
    model: &Model,
    params: &ParameterStore,
    u: usize,
    v: usize,
    k_layer: usize,
    l_layer: usize,
    seeds: SeedTree,
) -> Result<f64> {
    let n = g.n();
    if u >= n || v >= n {
        return Err(Error::Index(format!("nodes ({u}, {v}) in a graph with {n}")));
    }
    if k_layer > l_layer || l_layer > model.spec.layers_down {
        return Err(Error::Index(format!("layers {k_layer}..{l_layer} with {}", model.spec.layers_down)));
    }
    let params = model_params(params);
    let batch = Batch::single(g, model.spec.m.max(1))?;

    let (hk, virt) = {
        let tape = Tape::new();
        let p = Bound::new(&tape, &params);
        let sampling = Sampling { seeds, q: 1, mode: AssignMode::StraightThrough };
        let out = model.forward(&p, &batch, sampling)?;
        let hk = out.node_states[0][k_layer].value().as_ref().clone();
        let virt = if model.spec.ds_enabled {
            Some((out.virtual_states[0][k_layer].value().as_ref().clone(), out.assignments[0].to_dense()))
        } else {
            None
        };
        (hk, virt)
    };

    let tape = Tape::new();
    let p = Bound::new(&tape, &params);
    let h = tape.leaf(hk);
    let virt = virt.map(|(gk, hm)| (tape.constant(gk), tape.constant(hm)));
    let hl = model.propagate(&p, &batch, h, virt, k_layer, l_layer)?;
    let d_out = hl.shape()[1];
    let d_in = h.shape()[1];
    let mut jac = vec![0.0; d_out * d_in];
    for i in 0..d_out {
        for (target, source) in [(v, u), (u, v)] {
            let mut seed = Tensor::zeros(&[n, d_out]);
            seed.data_mut()[target * d_out + i] = 1.0;
            let grad = tape.backward_with(hl, seed)?.wrt(h);
            for (j, x) in grad.row(source).iter().enumerate() {
                jac[i * d_in + j] += x;
            }
        }
    }
    let l1: f64 = jac.iter().map(|x| x.abs()).sum();
    Ok(if l1 == 0.0 { f64::NEG_INFINITY } else { l1.ln() })
}

/// Sensitivity of the most distant pair from layer 0 to every layer.
pub fn sensitivity_profile(
    g: &AttributedGraph,
    model: &Model,
    params: &ParameterStore,
    seeds: SeedTree,
) -> Result<Vec<(usize, f64)>> {
    let (u, v, _) = most_distant_pair(g)?;
    (1..=model.spec.layers_down)
        .map(|l| Ok((l, layer_sensitivity(g, model, params, u, v, 0, l, seeds)?)))
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &x)| if x > row[best] { i } else { best })
}

fn check_lengths(preds: &[Vec<f64>], targets: &[Option<Target>]) -> Result<()> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    Ok(())
}

fn target(t: &Option<Target>) -> Result<&Target> {
    t.as_ref().ok_or_else(|| Error::Invalid("graph has no target".into()))
}

/// Argmax accuracy; a single output column is read as a logit with threshold 0.
pub fn accuracy(preds: &[Vec<f64>], targets: &[Option<Target>]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let mut hits = 0usize;
    for (p, t) in preds.iter().zip(targets) {
        let guess = if p.len() == 1 { usize::from(p[0] > 0.0) } else { argmax(p) };
        hits += usize::from(guess == target(t)?.class()?);
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Mean absolute error over all entries.
pub fn mae(preds: &[Vec<f64>], targets: &[Option<Target>]) -> Result<f64> {
    check_lengths(preds, targets)?;
    let (mut sum, mut count) = (0.0, 0usize);
    for (p, t) in preds.iter().zip(targets) {
        let y = target(t)?.as_slice();
        if y.len() != p.len() {
            return Err(Error::Shape(format!("target width {} vs prediction {}", y.len(), p.len())));
        }
        sum += p.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += y.len();
    }
    Ok(sum / count as f64)
}

/// Average precision: `Σ (R_i − R_{i−1}) P_i` over descending score
/// thresholds, tied scores sharing one threshold.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Domain("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += usize::from(labels[order[i]]);
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * tp as f64 / seen as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Accuracy for classification heads, MAE for regression heads.
pub fn task_metric(preds: &[Vec<f64>], targets: &[Option<Target>], head: TaskHead) -> Result<f64> {
    match head.kind {
        TaskKind::Multiclass | TaskKind::Binary => accuracy(preds, targets),
        TaskKind::RegressionMae | TaskKind::RegressionMse => mae(preds, targets),
    }
}
