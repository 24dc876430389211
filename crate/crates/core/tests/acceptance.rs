//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Every criterion is always
//! evaluated and reported; the process exits non-zero on a failure only when
//! `IPR_ACCEPTANCE_STRICT` is set, so the rest of a workspace test run still
//! executes. `IPR_ACCEPTANCE_ONLY=3,7` restricts the run to some criteria.

use std::time::Instant;

use rand::Rng;

use ipr_core::datasets::{self, DatasetSpec, PairFamily};
use ipr_core::exactk::{self, AssignMode};
use ipr_core::graph::AttributedGraph;
use ipr_core::metrics;
use ipr_core::model::{self, Batch, Bound, Model, ModelDims, ModelSpec, ReadoutSource, Sampling, VirtualInit};
use ipr_core::rng::SeedTree;
use ipr_core::tensor::{grad_check, ParameterStore, Tape, Tensor, Var};
use ipr_core::training::{self, OptimConfig, OptimizerState, TaskHead, TaskKind};
use ipr_core::verify;
use ipr_core::wl;
use ipr_core::{Error, Result};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

fn model_for(spec: ModelSpec, splits: &datasets::Splits, head: TaskHead) -> Result<Model> {
    let dims = ModelDims { d_in: splits.feature_dim()?, d_edge: splits.edge_feature_dim(), out_dim: head.out_dim };
    Model::new(spec, dims)
}

/// Best test accuracy seen at checkpoints every `every` epochs (and at the
/// end), stopping once `target` is reached. Returns `(accuracy, epochs run)`.
fn train_until(ds: &DatasetSpec, spec: ModelSpec, cfg: &OptimConfig, seed: u64, every: usize, target: f64) -> Result<(f64, usize)> {
    let splits = ds.build()?;
    let head = ds.head();
    let model = model_for(spec, &splits, head)?;
    let mut best = 0.0f64;
    let mut ran = 0;
    training::fit(&model, head, &splits.train, &[], model.init_params(seed), cfg, seed, |epoch, params, _| {
        ran = epoch + 1;
        if ran % every == 0 || ran == cfg.epochs {
            best = best.max(training::evaluate(&model, head, &splits.test, params, seed, 1)?.mean);
        }
        Ok(best >= target)
    })?;
    Ok((best, ran))
}

/// Training budgets for criteria 4 and 5; `IPR_ACCEPTANCE_FULL` picks the large one.
fn budget(small: usize, full: usize) -> usize {
    if std::env::var_os("IPR_ACCEPTANCE_FULL").is_some() {
        full
    } else {
        small
    }
}

fn optim(epochs: usize, lr_base: f64, batch_size: usize) -> OptimConfig {
    OptimConfig { lr_base, lr_min: 1e-5, epochs, batch_size, clip_norm: 5.0 }
}

fn tree_spec(layers_down: usize) -> ModelSpec {
    ModelSpec {
        d_hidden_up: 32,
        layers_up: 2,
        d_hidden_down: 32,
        d_hidden_virtual: Some(64),
        layers_down,
        m: 2,
        k: 1,
        q: 2,
        virtual_init: VirtualInit::Identity,
        readout_source: ReadoutSource::Root,
        ..ModelSpec::default()
    }
}

fn base(spec: ModelSpec) -> ModelSpec {
    ModelSpec { ds_enabled: false, ..spec }
}

fn criterion_1() -> Result<Outcome> {
    let start = Instant::now();
    let (mut lz, mut mu) = (0.0f64, 0.0f64);
    for m in 1..=verify::ENUMERATION_LIMIT {
        for k in 1..=m {
            let (a, b) = verify::enumeration_error(m, k, 50, 17)?;
            lz = lz.max(a);
            mu = mu.max(b);
        }
    }
    let mut rng = SeedTree::new(23).rng();
    let mut p_min = 1.0f64;
    for (m, k) in [(4, 2), (6, 3), (8, 1)] {
        let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        p_min = p_min.min(verify::chi_square_p_value(&theta, k, 100_000, 29 + m as u64)?);
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = lz <= 1e-10 && mu <= 1e-10 && p_min > 1e-3 && secs < 60.0;
    Ok(Outcome::new(passed, format!("max |log Z err| {lz:.2e}, max |marginal err| {mu:.2e}, min chi2 p {p_min:.4}, {secs:.1}s")))
}

/// `‖prediction‖²` with the prior bias rebound to `bias`, relaxed assignment.
fn relaxed_objective<'a>(tape: &'a Tape, bias: Var<'a>, model: &Model, store: &ParameterStore, batch: &Batch) -> Result<Var<'a>> {
    let mut p = Bound::new(tape, store);
    p.replace("up.head.b", bias);
    let sampling = Sampling { seeds: SeedTree::new(0), q: 1, mode: AssignMode::Relaxed };
    let y = model.forward(&p, batch, sampling)?.prediction;
    y.mul(y).map(Var::sum_all)
}

fn criterion_2() -> Result<Outcome> {
    let mut rng = SeedTree::new(31).rng();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let m = rng.random_range(1..=8);
        let k = rng.random_range(1..=m);
        let theta: Vec<f64> = (0..m).map(|_| rng.random_range(-4.0..=4.0)).collect();
        let upstream: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..=1.0)).collect();
        worst = worst.max(verify::jacobian_error(&theta, k, &upstream)?);
    }

    // n = 3 path, m = 2, k = 1: θ-gradient through the relaxed forward pass
    let g = AttributedGraph::unlabeled(3, vec![(0, 1), (1, 2)])?
        .with_features(Tensor::new(vec![3, 2], vec![0.5, -0.2, 1.0, 0.3, -0.7, 0.8])?)?;
    let spec = ModelSpec {
        d_hidden_up: 8,
        layers_up: 1,
        d_hidden_down: 8,
        d_hidden_virtual: Some(8),
        layers_down: 1,
        m: 2,
        k: 1,
        q: 1,
        virtual_init: VirtualInit::SubgraphMpnn,
        ..ModelSpec::default()
    };
    let model = Model::new(spec, ModelDims { d_in: 2, d_edge: None, out_dim: 1 })?;
    let store = model.init_params(1);
    let batch = Batch::single(&g, 2)?;
    let bias = store.get("up.head.b").ok_or_else(|| Error::Invalid("no prior bias".into()))?.clone();
    let tape = Tape::new();
    let b = tape.leaf(bias.clone());
    let norm = tape.backward(relaxed_objective(&tape, b, &model, &store, &batch)?)?.wrt(b).data().iter().map(|x| x.abs()).sum::<f64>();
    let e2e = grad_check(|t, v| relaxed_objective(t, v, &model, &store, &batch), &bias, 1e-5)?;
    // a vanishing gradient would make the comparison vacuous
    let passed = worst <= 1e-6 && e2e <= 1e-5 && norm > 0.0;
    Ok(Outcome::new(
        passed,
        format!("worst Jacobian rel err {worst:.2e} over 100 instances, relaxed toy grad err {e2e:.2e} (|grad| {norm:.2e})"),
    ))
}

fn criterion_3() -> Result<Outcome> {
    let depth = 4;
    let ds = DatasetSpec::TreesLeafcount { depth, n_samples: 1000, split: [0.8, 0.0, 0.2], seed: 1 };
    let start = Instant::now();
    let (ipr, epochs) = train_until(&ds, tree_spec(1), &optim(200, 1e-3, 32), 1, 5, 1.0)?;
    let (gin, _) = train_until(&ds, base(tree_spec(1)), &optim(50, 1e-3, 32), 1, 5, 1.1)?;
    let chance = 1.0 / ((1 << depth) + 1) as f64;
    let passed = ipr >= 1.0 && gin <= chance + 0.1;
    Ok(Outcome::new(
        passed,
        format!(
            "IPR test acc {ipr:.3} after {epochs} epochs, base {gin:.3} (bound {:.3}), {:.0}s",
            chance + 0.1,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn criterion_4() -> Result<Outcome> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut passed = true;
    let (n_samples, epochs) = (budget(4000, 16000), budget(15, 100));
    for (depth, bound) in [(4usize, 0.99), (5, 0.95)] {
        let ds = DatasetSpec::TreesNeighboursmatch { depth, n_samples, split: [0.8, 0.0, 0.2], seed: 2 };
        let (ipr, _) = train_until(&ds, tree_spec(depth + 1), &optim(epochs, 1e-3, 32), 2, 5, bound)?;
        passed &= ipr >= bound;
        parts.push(format!("depth {depth}: IPR {ipr:.3} (need {bound})"));
        if depth == 4 {
            let (gin, _) = train_until(&ds, base(tree_spec(depth + 1)), &optim(epochs, 1e-3, 32), 2, 5, 1.1)?;
            passed &= gin <= 0.60;
            parts.push(format!("base {gin:.3} (need <= 0.60)"));
        }
    }
    parts.push(format!("{:.0}s", start.elapsed().as_secs_f64()));
    Ok(Outcome::new(passed, parts.join(", ")))
}

fn csl_spec() -> ModelSpec {
    ModelSpec {
        d_hidden_up: 64,
        layers_up: 1,
        d_hidden_down: 64,
        d_hidden_virtual: Some(64),
        layers_down: 6,
        m: 8,
        k: 7,
        q: 15,
        virtual_init: VirtualInit::SubgraphMpnn,
        readout_source: ReadoutSource::Both,
        layer_norm: true,
        ..ModelSpec::default()
    }
}

fn criterion_5() -> Result<Outcome> {
    let start = Instant::now();
    let folds = 10;
    let cfg = optim(budget(5, 100), 1e-3, 16);
    let (mut ipr, mut gin) = (0.0, 0.0);
    for fold in 0..folds {
        let ds = DatasetSpec::Csl { per_class: 15, folds, fold, seed: 3 };
        ipr += train_until(&ds, csl_spec(), &cfg, 3, cfg.epochs, 1.1)?.0 / folds as f64;
        let spec = ModelSpec { readout_source: ReadoutSource::Nodes, ..base(csl_spec()) };
        gin += train_until(&ds, spec, &cfg, 3, cfg.epochs, 1.1)?.0 / folds as f64;
    }

    let pairs = DatasetSpec::WlPairs {
        family: PairFamily::CslPair,
        sizes: (11..=30).collect(),
        copies: 5,
        split: [0.8, 0.0, 0.2],
        seed: 4,
    };
    let pair_spec = ModelSpec { readout_source: ReadoutSource::Nodes, ..csl_spec() };
    let pair_cfg = optim(budget(10, 50), 1e-3, 16);
    let (ipr_pairs, _) = train_until(&pairs, pair_spec.clone(), &pair_cfg, 4, 5, 0.95)?;
    let (gin_pairs, _) = train_until(&pairs, base(pair_spec), &pair_cfg, 4, 5, 1.1)?;

    let passed = ipr >= 0.95 && gin <= 0.15 && ipr_pairs >= 0.95 && (gin_pairs - 0.5).abs() <= 0.05;
    Ok(Outcome::new(
        passed,
        format!(
            "CSL {folds}-fold mean: IPR {ipr:.3} (need >= 0.95), base {gin:.3} (need <= 0.15); \
             WL pairs: IPR {ipr_pairs:.3} (need >= 0.95), base {gin_pairs:.3} (need 0.50 +- 0.05); {:.0}s",
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn criterion_6() -> Result<Outcome> {
    let root = SeedTree::new(6);
    let mut rng = root.child(0).rng();
    let (mut shared, mut violations, mut total) = (0, 0, 0);
    for i in 0..400u64 {
        let n = rng.random_range(4..=40);
        let g = if i < 200 {
            datasets::random_tree(n, root.path(&[1, i]))?
        } else {
            datasets::random_connected_graph(n, rng.random_range(1..=n / 2), root.path(&[2, i]))?
        };
        let m = rng.random_range(2..=5);
        let k = rng.random_range(1..m);
        let priors = Tensor::new(vec![n, m], (0..n * m).map(|_| rng.random_range(-2.0..=2.0)).collect())?;
        let h = exactk::sample_assignment(&priors, k, 1, root.path(&[3, i]))?.swap_remove(0);
        let before = metrics::effective_resistance(&g).r_total;
        let after = metrics::rewired_resistance(&g, &h)?.r_total;
        total += 1;
        if metrics::has_shared_virtual_node(&h) {
            shared += 1;
            if after >= before {
                violations += 1;
            }
        }
    }
    let passed = violations == 0 && shared > 0;
    Ok(Outcome::new(passed, format!("{violations} violations among {shared} shared assignments ({total} graphs)")))
}

fn criterion_7() -> Result<Outcome> {
    let depth = 5;
    let g = datasets::gen_trees_leafcount(depth, 1, 7)?.swap_remove(0);
    let (u, v, diameter) = metrics::most_distant_pair(&g)?;
    let dims = ModelDims { d_in: 3, d_edge: None, out_dim: (1 << depth) + 1 };
    let layers = 6;
    let base_model = Model::new(base(tree_spec(layers)), dims)?;
    let mut base_zero = true;
    for l in 1..=layers.min(diameter - 1) {
        let s = metrics::layer_sensitivity(&g, &base_model, &base_model.init_params(0), u, v, 0, l, SeedTree::new(0))?;
        base_zero &= s == f64::NEG_INFINITY;
    }
    let ipr_model = Model::new(tree_spec(layers), dims)?;
    let draws = 40;
    let mut finite = 0;
    for d in 0..draws {
        let params = ipr_model.init_params(100 + d);
        let s = metrics::layer_sensitivity(&g, &ipr_model, &params, u, v, 0, layers, SeedTree::new(d))?;
        finite += s.is_finite() as usize;
    }
    let frac = finite as f64 / draws as f64;
    let passed = base_zero && frac >= 0.95;
    Ok(Outcome::new(
        passed,
        format!("pair ({u}, {v}) at distance {diameter}: base zero for every span < diameter: {base_zero}; IPR finite in {finite}/{draws}"),
    ))
}

fn criterion_8() -> Result<Outcome> {
    let spec = ModelSpec { m: 2, k: 1, ..ModelSpec::default() };
    let n = 200;
    let extras = [0usize, 50, 100, 200, 400, 800];
    let ops: Vec<usize> = extras
        .iter()
        .map(|&e| Ok(model::count_message_ops(&datasets::random_connected_graph(n, e, SeedTree::new(e as u64))?, &spec)))
        .collect::<Result<_>>()?;
    let slope = (ops[1] - ops[0]) as f64 / (extras[1] - extras[0]) as f64;
    let linear = extras.iter().zip(&ops).all(|(&e, &o)| o as f64 == ops[0] as f64 + slope * e as f64) && slope > 0.0;

    let head = TaskHead { kind: TaskKind::Binary, out_dim: 1 };
    let model = Model::new(spec, ModelDims { d_in: 1, d_edge: None, out_dim: 1 })?;
    let cfg = optim(1, 1e-3, 2);
    let mut times = Vec::new();
    for n in [512usize, 1024, 2048] {
        let graphs: Vec<AttributedGraph> = (0..4u64)
            .map(|i| {
                let g = datasets::random_regular_graph(n, 3, SeedTree::new(n as u64).child(i))?;
                Ok(g.with_label(Some(ipr_core::graph::Target::Scalar((i % 2) as f64))))
            })
            .collect::<Result<_>>()?;
        let mut samples = Vec::new();
        for rep in 0..3 {
            let mut params = model.init_params(rep);
            let mut opt = OptimizerState::new(&params, cfg.lr_base, cfg.lr_min, 2);
            let t = Instant::now();
            training::train_epoch(&model, head, &graphs, &mut params, &mut opt, &cfg, rep, 0)?;
            samples.push(t.elapsed().as_secs_f64());
        }
        samples.sort_by(f64::total_cmp);
        times.push(samples[1]);
    }
    let ratios: Vec<f64> = times.windows(2).map(|w| w[1] / w[0]).collect();
    let passed = linear && ratios.iter().all(|&r| r <= 2.5);
    Ok(Outcome::new(
        passed,
        format!(
            "ops linear in |E| with slope {slope} per edge: {linear}; epoch time ratios {:.2} and {:.2} for n 512 to 2048",
            ratios[0], ratios[1]
        ),
    ))
}

fn criterion_9() -> Result<Outcome> {
    let root = SeedTree::new(9);
    let (mut violations, mut checked, mut not_equivalent) = (0, 0, 0);
    for i in 0..50u64 {
        let (family, size) = if i % 2 == 0 { (PairFamily::CycleSplit, 3 + i as usize / 2) } else { (PairFamily::CslPair, 11 + i as usize / 2) };
        let (mut a, mut b) = datasets::gen_wl_pair(family, size, root.path(&[0, i]))?;
        if i >= 25 {
            // a random tree on both sides gives several colour classes
            let t = datasets::random_tree(3 + i as usize % 7, root.path(&[1, i]))?;
            let perm: Vec<usize> = (0..t.n()).rev().collect();
            a = t.disjoint_union(&a)?;
            b = t.permute(&perm)?.disjoint_union(&b)?;
        }
        if wl::wl_distinguishable(&a, &b)? {
            not_equivalent += 1;
            continue;
        }
        for (_, sa, sb) in wl::paired_color_subgraphs(&a, &b)? {
            checked += 1;
            violations += wl::wl_distinguishable(&sa, &sb)? as usize;
        }
    }
    let passed = violations == 0 && not_equivalent == 0;
    Ok(Outcome::new(passed, format!("{violations} violations over {checked} colour classes of 50 pairs")))
}

type Criterion = fn() -> Result<Outcome>;

fn main() {
    let only: Option<Vec<usize>> =
        std::env::var("IPR_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, Criterion); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        ran += 1;
        let outcome = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        println!("criterion {id}: {} ({})", if outcome.passed { "PASS" } else { "FAIL" }, outcome.detail);
        if !outcome.passed {
            failed.push(id);
        }
    }
    println!("acceptance: {}/{ran} criteria passed", ran - failed.len());
    if !failed.is_empty() && std::env::var_os("IPR_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
