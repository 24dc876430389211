use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Serialize;
use serde_json::{json, Value};

use ipr_core::datasets::{write_jsonl, Splits};
use ipr_core::exactk::AssignMode;
use ipr_core::graph::AttributedGraph;
use ipr_core::metrics::{self, ResistanceComparison};
use ipr_core::model::{Batch, Bound, Model, ModelDims, Sampling};
use ipr_core::rng::SeedTree;
use ipr_core::tensor::{ParameterStore, Tape};
use ipr_core::training::{self, MetricRecord};
use ipr_core::verify::{self, ENUMERATION_LIMIT};

use crate::config::ExperimentConfig;
use crate::{CheckpointMismatch, UsageError};

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn pick(self, splits: &Splits) -> &[AttributedGraph] {
        match self {
            Split::Train => &splits.train,
            Split::Val => &splits.val,
            Split::Test => &splits.test,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

pub fn gen(cfg: &ExperimentConfig, out: Option<PathBuf>, force: bool) -> anyhow::Result<()> {
    if !cfg.dataset.is_generator() {
        bail!(UsageError("gen needs a generated dataset, not jsonl_file".into()));
    }
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("data"));
    let names = ["train.jsonl", "val.jsonl", "test.jsonl", "manifest.json"];
    if !force {
        if let Some(existing) = names.iter().map(|n| dir.join(n)).find(|p| p.exists()) {
            bail!(UsageError(format!("{} exists; pass --force to overwrite", existing.display())));
        }
    }
    let splits = cfg.dataset.build()?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    for (name, graphs) in names.iter().zip([&splits.train, &splits.val, &splits.test]) {
        write_jsonl(dir.join(name), graphs)?;
    }
    let manifest = json!({
        "dataset": cfg.dataset,
        "head": cfg.dataset.head(),
        "seed": cfg.seed,
        "counts": {"train": splits.train.len(), "val": splits.val.len(), "test": splits.test.len()},
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!("{}", serde_json::to_string(&manifest["counts"])?);
    Ok(())
}

fn model_for(cfg: &ExperimentConfig, splits: &Splits) -> anyhow::Result<Model> {
    let head = cfg.dataset.head();
    head.validate()?;
    let dims = ModelDims {
        d_in: splits.feature_dim()?,
        d_edge: splits.edge_feature_dim(),
        out_dim: head.out_dim,
    };
    Ok(Model::new(cfg.model.clone(), dims)?)
}

fn load_checkpoint(model: &Model, path: &Path) -> anyhow::Result<ParameterStore> {
    let store = ParameterStore::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let bad = model.shape_mismatches(&store);
    if !bad.is_empty() {
        bail!(CheckpointMismatch(bad));
    }
    Ok(store)
}

fn append_records(path: &Path, records: &[MetricRecord]) -> anyhow::Result<()> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, resume: Option<&Path>, stop_after: Option<usize>) -> anyhow::Result<()> {
    let splits = cfg.dataset.build()?;
    let model = model_for(cfg, &splits)?;
    let head = cfg.dataset.head();
    let params = match resume {
        Some(path) => load_checkpoint(&model, path)?,
        None => model.init_params(cfg.seed),
    };
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    let log = dir.join("metrics.jsonl");
    if resume.is_none() {
        File::create(&log)?;
    }
    let (best_path, final_path) = (dir.join("checkpoint_best.bin"), dir.join("checkpoint_final.bin"));
    if cfg.optim.epochs == 0 {
        params.save(&best_path)?;
        params.save(&final_path)?;
        return Ok(());
    }

    let mut written = 0;
    let result = training::fit(&model, head, &splits.train, &splits.val, params, &cfg.optim, cfg.seed, |epoch, _, history| {
        append_records(&log, &history[written..]).map_err(|e| ipr_core::Error::Invalid(e.to_string()))?;
        if let Some(r) = history.iter().rev().find(|r| r.split == "train") {
            let val = history.last().filter(|r| r.split == "val").map(|r| format!(" val {:.4}", r.metric)).unwrap_or_default();
            eprintln!("epoch {:>4} loss {:.4} {} {:.4}{val}", r.epoch, r.loss, head.metric_name(), r.metric);
        }
        written = history.len();
        Ok(stop_after.is_some_and(|n| epoch + 1 >= n))
    })?;
    result.best.save(&best_path)?;
    result.params.save(&final_path)?;

    if !splits.test.is_empty() {
        let report = training::evaluate(&model, head, &splits.test, &result.best, cfg.seed, 1)?;
        let epoch = result.history.last().map_or(0, |r| r.epoch);
        let record = MetricRecord {
            epoch,
            split: "test".into(),
            loss: report.loss,
            metric: report.mean,
            lr: result.history.last().map_or(0.0, |r| r.lr),
            wall_ms: 0.0,
        };
        append_records(&log, std::slice::from_ref(&record))?;
        println!("{}", serde_json::to_string(&record)?);
    }
    Ok(())
}

pub fn eval(cfg: &ExperimentConfig, checkpoint: &Path, repeats: usize, split: Split) -> anyhow::Result<()> {
    if repeats == 0 {
        bail!(UsageError("--repeats must be at least 1".into()));
    }
    let splits = cfg.dataset.build()?;
    let model = model_for(cfg, &splits)?;
    let store = load_checkpoint(&model, checkpoint)?;
    let graphs = split.pick(&splits);
    if graphs.is_empty() {
        bail!(UsageError(format!("the {} split is empty", split.name())));
    }
    let report = training::evaluate(&model, cfg.dataset.head(), graphs, &store, cfg.seed, repeats)?;
    let out = json!({"split": split.name(), "repeats": repeats, "report": report});
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("eval_{}.json", split.name())), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}

pub fn verify_sampler(m: usize, k: usize, trials: usize, seed: u64) -> anyhow::Result<()> {
    if k == 0 || k > m {
        bail!(UsageError(format!("need 1 <= k <= m, got k={k}, m={m}")));
    }
    if m > ENUMERATION_LIMIT {
        bail!(UsageError(format!("m={m} exceeds the enumeration limit {ENUMERATION_LIMIT}")));
    }
    if trials == 0 {
        bail!(UsageError("--trials must be positive".into()));
    }
    let report = verify::verify_sampler(m, k, trials, seed)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed {
        let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        bail!("sampler checks failed: {}", failed.join(", "));
    }
    Ok(())
}

/// `-inf` has no JSON number; it is written as the string `"-inf"`.
fn log_value(x: f64) -> Value {
    if x == f64::NEG_INFINITY {
        Value::String("-inf".into())
    } else {
        json!(x)
    }
}

pub fn diagnose(cfg: &ExperimentConfig, checkpoint: &Path, split: Split, limit: Option<usize>) -> anyhow::Result<()> {
    let splits = cfg.dataset.build()?;
    let model = model_for(cfg, &splits)?;
    let store = training::model_params(&load_checkpoint(&model, checkpoint)?);
    let graphs = split.pick(&splits);
    let graphs = &graphs[..limit.unwrap_or(graphs.len()).min(graphs.len())];
    let root = SeedTree::new(cfg.seed);

    let mut resistance = Vec::new();
    let mut sensitivity = Vec::new();
    for (id, g) in graphs.iter().enumerate() {
        let id = id as u64;
        let seeds = root.child(id);
        let before = metrics::effective_resistance(g);
        let mut record = json!({"graph_id": id, "n": g.n(), "r_total_before": before.r_total});
        if !g.is_connected() {
            record["note"] = json!("disconnected: resistance summed over intra-component pairs");
        }
        if model.spec.ds_enabled {
            let batch = Batch::new(&[(id, g)], model.spec.m)?;
            let tape = Tape::new();
            let p = Bound::new(&tape, &store);
            let sampling = Sampling { seeds, q: 1, mode: AssignMode::StraightThrough };
            let h = model.forward(&p, &batch, sampling)?.assignments.swap_remove(0);
            let after = metrics::rewired_resistance(g, &h)?;
            let cmp = ResistanceComparison::new(id, &before, &after);
            record["r_total_after"] = json!(cmp.r_total_after);
            record["log_ratio"] = json!(cmp.log_ratio);
            record["shared_virtual_node"] = json!(metrics::has_shared_virtual_node(&h));
        }
        resistance.push(record);

        match metrics::most_distant_pair(g) {
            Ok((u, v, dist)) => {
                let profile = metrics::sensitivity_profile(g, &model, &store, seeds)?
                    .into_iter()
                    .map(|(span, s)| json!({"k": 0, "l": span, "log_sensitivity": log_value(s)}))
                    .collect::<Vec<_>>();
                sensitivity.push(json!({"graph_id": id, "u": u, "v": v, "distance": dist, "profile": profile}));
            }
            Err(e) => sensitivity.push(json!({"graph_id": id, "note": e.to_string()})),
        }
    }
    let out = json!({
        "split": split.name(),
        "ds_enabled": model.spec.ds_enabled,
        "resistance": resistance,
        "sensitivity": sensitivity,
    });
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join(format!("diagnose_{}.json", split.name())), &out)?;
    println!("{}", serde_json::to_string(&out)?);
    Ok(())
}
