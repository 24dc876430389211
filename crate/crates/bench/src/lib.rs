//! Fixtures shared by the benchmarks.

use ipr_core::datasets::gen_trees_leafcount;
use ipr_core::graph::AttributedGraph;
use ipr_core::model::{Model, ModelDims, ModelSpec, ReadoutSource, VirtualInit};

pub fn logits(m: usize) -> Vec<f64> {
    (0..m).map(|i| ((i * 7919) % 13) as f64 / 4.0 - 1.5).collect()
}

pub fn leafcount(depth: usize, n: usize) -> Vec<AttributedGraph> {
    gen_trees_leafcount(depth, n, 0).expect("valid depth")
}

pub fn leafcount_model(depth: usize, ds_enabled: bool) -> Model {
    let spec = ModelSpec {
        ds_enabled,
        virtual_init: VirtualInit::Identity,
        readout_source: ReadoutSource::Root,
        ..ModelSpec::default()
    };
    let dims = ModelDims { d_in: 3, d_edge: None, out_dim: (1 << depth) + 1 };
    Model::new(spec, dims).expect("valid spec")
}
