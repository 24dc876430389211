//! Implicitly rewired message passing.
//!
//! An upstream GIN scores every (node, virtual node) pair; exactly-k samples
//! of those scores wire each node to `k` of `m` virtual nodes; the downstream
//! network then alternates node→virtual pooling, a virtual-node update over
//! the complete virtual graph, and a virtual→node update alongside ordinary
//! neighbour aggregation.
//!
//! Batches are disjoint unions. Virtual node `c` of graph `g` is row
//! `g·m + c` of the virtual state, and an assignment is a dense `[N×m]`
//! tensor whose entry `(v, c)` weights every message between `v` and `c`.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exactk::{self, AssignMode, ExactKRowDistribution};
use crate::graph::{AssignmentMatrix, AttributedGraph, Target};
use crate::rng::SeedTree;
use crate::tensor::{Segments, WeightedSegments};
use crate::tensor::{Aggregator, ParameterStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VirtualInit {
    /// One-layer GIN over each assignment-induced subgraph, sum-pooled.
    SubgraphMpnn,
    /// Fresh standard-normal rows per graph and sample.
    Random,
    /// A learned row per virtual node.
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadoutSource {
    Nodes,
    Virtual,
    Both,
    /// The first node of each graph (the root of the tree tasks).
    Root,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub d_hidden_up: usize,
    pub layers_up: usize,
    pub d_hidden_down: usize,
    /// Defaults to twice `d_hidden_down`.
    pub d_hidden_virtual: Option<usize>,
    pub layers_down: usize,
    pub m: usize,
    pub k: usize,
    /// Samples per forward pass during training.
    pub q: usize,
    /// Samples per forward pass at evaluation; defaults to `q`.
    pub q_eval: Option<usize>,
    pub virtual_init: VirtualInit,
    pub readout_source: ReadoutSource,
    pub readout_agg: Aggregator,
    pub agg_n: Aggregator,
    pub agg_c: Aggregator,
    pub agg: Aggregator,
    pub ds: Aggregator,
    /// `false` gives the plain GIN baseline: no priors, no virtual nodes.
    pub ds_enabled: bool,
    pub residual: bool,
    pub layer_norm: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            d_hidden_up: 32,
            layers_up: 2,
            d_hidden_down: 32,
            d_hidden_virtual: None,
            layers_down: 1,
            m: 2,
            k: 1,
            q: 2,
            q_eval: None,
            virtual_init: VirtualInit::Random,
            readout_source: ReadoutSource::Nodes,
            readout_agg: Aggregator::Sum,
            agg_n: Aggregator::Sum,
            agg_c: Aggregator::Sum,
            agg: Aggregator::Sum,
            ds: Aggregator::Sum,
            ds_enabled: true,
            residual: true,
            layer_norm: false,
        }
    }
}

impl ModelSpec {
    pub fn d_virtual(&self) -> usize {
        self.d_hidden_virtual.unwrap_or(2 * self.d_hidden_down)
    }

    pub fn samples(&self, training: bool) -> usize {
        if training {
            self.q
        } else {
            self.q_eval.unwrap_or(self.q)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Invalid(msg));
        if self.d_hidden_up == 0 || self.d_hidden_down == 0 || self.d_virtual() == 0 {
            return bad("hidden dimensions must be positive".into());
        }
        if self.ds_enabled {
            if self.m == 0 || self.k == 0 || self.k > self.m {
                return bad(format!("need 1 <= k <= m, got k={}, m={}", self.k, self.m));
            }
            if self.q == 0 || self.q_eval == Some(0) {
                return bad("q must be at least 1".into());
            }
        } else if matches!(self.readout_source, ReadoutSource::Virtual | ReadoutSource::Both) {
            return bad("virtual readout needs ds_enabled".into());
        }
        Ok(())
    }
}

/// Data-dependent sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_edge: Option<usize>,
    pub out_dim: usize,
}

/// Pairwise message operations per downstream layer:
/// `2|E| + n·k` (pool) `+ m(m−1)` (virtual clique) `+ n·k` (distribute).
pub fn count_message_ops(g: &AttributedGraph, spec: &ModelSpec) -> usize {
    2 * g.num_edges() + 2 * g.n() * spec.k + spec.m * spec.m.saturating_sub(1)
}

/// A disjoint union of graphs with the index structures the layers need.
pub struct Batch {
    pub n: usize,
    pub num_graphs: usize,
    pub m: usize,
    /// Dataset index per graph; keys the sampling streams.
    pub ids: Vec<u64>,
    pub node_offset: Vec<usize>,
    pub graph_of_node: Vec<usize>,
    pub x: Tensor,
    pub targets: Vec<Option<Target>>,
    nbr: Rc<Segments>,
    /// Directed edges `(source, edge feature row)` grouped by target node.
    edge_src: Vec<usize>,
    edge_in: Rc<Segments>,
    edge_attr: Option<Tensor>,
    graph_nodes: Rc<Segments>,
    graph_vns: Rc<Segments>,
    vn_in: Rc<WeightedSegments>,
    vn_others: Rc<Segments>,
    ds_in: Rc<WeightedSegments>,
    copy_node: Vec<usize>,
    copy_msg: Rc<WeightedSegments>,
}

impl Batch {
    /// `m` is the virtual-node count (any value ≥ 1 when unused).
    pub fn new(graphs: &[(u64, &AttributedGraph)], m: usize) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let d = graphs[0].1.feature_dim();
        if let Some((id, _)) = graphs.iter().find(|(_, g)| g.feature_dim() != d) {
            return Err(Error::Shape(format!("graph {id} has a different feature width")));
        }
        let d_edge = graphs[0].1.edge_features().map(Tensor::cols);
        let mut node_offset = vec![0];
        for (_, g) in graphs {
            node_offset.push(node_offset.last().unwrap() + g.n());
        }
        let n = *node_offset.last().unwrap();
        let mut x = Vec::with_capacity(n * d);
        let mut graph_of_node = Vec::with_capacity(n);
        let mut nbr = Vec::with_capacity(n);
        let mut edge_src = Vec::new();
        let mut edge_in = Vec::with_capacity(n);
        let mut edge_rows = Vec::new();
        for (gi, (id, g)) in graphs.iter().enumerate() {
            if g.edge_features().map(Tensor::cols) != d_edge {
                return Err(Error::Shape(format!("graph {id} disagrees on edge features")));
            }
            let off = node_offset[gi];
            x.extend_from_slice(g.features().data());
            for v in 0..g.n() {
                graph_of_node.push(gi);
                nbr.push(g.nbrs(v).iter().map(|&u| u + off).collect::<Vec<_>>());
                let mut incoming = Vec::new();
                for (&u, &e) in g.nbrs(v).iter().zip(g.nbr_edges(v)) {
                    incoming.push(edge_src.len());
                    edge_src.push(u + off);
                    if let Some(ef) = g.edge_features() {
                        edge_rows.extend_from_slice(ef.row(e));
                    }
                }
                edge_in.push(incoming);
            }
        }
        let edge_attr = match d_edge {
            Some(de) => Some(Tensor::new(vec![edge_src.len(), de], edge_rows)?),
            None => None,
        };
        let num_graphs = graphs.len();
        let nodes_of = |gi: usize| node_offset[gi]..node_offset[gi + 1];
        let graph_nodes = Segments::from_lists((0..num_graphs).map(|gi| nodes_of(gi).collect::<Vec<_>>()));
        let graph_vns = Segments::from_lists((0..num_graphs).map(|gi| (gi * m..(gi + 1) * m).collect::<Vec<_>>()));
        let vn_in = WeightedSegments::from_lists(
            (0..num_graphs * m).map(|r| nodes_of(r / m).map(|v| (v, v * m + r % m)).collect::<Vec<_>>()),
        );
        let vn_others = Segments::from_lists(
            (0..num_graphs * m).map(|r| (r / m * m..(r / m + 1) * m).filter(|&o| o != r).collect::<Vec<_>>()),
        );
        let ds_in = WeightedSegments::from_lists(
            (0..n).map(|v| (0..m).map(|c| (graph_of_node[v] * m + c, v * m + c)).collect::<Vec<_>>()),
        );
        let copy_node = (0..n * m).map(|r| r / m).collect();
        let copy_msg = WeightedSegments::from_lists(
            (0..n * m).map(|r| nbr[r / m].iter().map(|&u| (u, u * m + r % m)).collect::<Vec<_>>()),
        );
        Ok(Self {
            n,
            num_graphs,
            m,
            ids: graphs.iter().map(|(id, _)| *id).collect(),
            x: Tensor::new(vec![n, d], x)?,
            targets: graphs.iter().map(|(_, g)| g.label().cloned()).collect(),
            node_offset,
            graph_of_node,
            nbr: Rc::new(Segments::from_lists(nbr)),
            edge_src,
            edge_in: Rc::new(Segments::from_lists(edge_in)),
            edge_attr,
            graph_nodes: Rc::new(graph_nodes),
            graph_vns: Rc::new(graph_vns),
            vn_in: Rc::new(vn_in),
            vn_others: Rc::new(vn_others),
            ds_in: Rc::new(ds_in),
            copy_node,
            copy_msg: Rc::new(copy_msg),
        })
    }

    pub fn single(g: &AttributedGraph, m: usize) -> Result<Self> {
        Self::new(&[(0, g)], m)
    }

    /// Draws `q` assignments, row `v` of graph `g` in sample `s` from stream
    /// `seeds.path(&[id_g, s, v_local])`, so samples do not depend on batching.
    pub fn sample_assignments(&self, priors: &Tensor, k: usize, q: usize, seeds: SeedTree) -> Result<Vec<AssignmentMatrix>> {
        let rows: Vec<ExactKRowDistribution> =
            (0..self.n).map(|v| ExactKRowDistribution::new(priors.row(v), k)).collect::<Result<_>>()?;
        (0..q)
            .map(|s| {
                let picks = (0..self.n)
                    .map(|v| {
                        let gi = self.graph_of_node[v];
                        let local = v - self.node_offset[gi];
                        rows[v].sample(&mut seeds.path(&[self.ids[gi], s as u64, local as u64]).rng())
                    })
                    .collect();
                AssignmentMatrix::new(priors.cols(), k, picks)
            })
            .collect()
    }
}

/// Parameters bound to a tape as gradient-carrying leaves.
pub struct Bound<'a> {
    vars: BTreeMap<String, Var<'a>>,
}

impl<'a> Bound<'a> {
    pub fn new(tape: &'a Tape, store: &ParameterStore) -> Self {
        Self {
            vars: store.iter().map(|(k, v)| (k.clone(), tape.leaf(v.clone()))).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var<'a>> {
        self.vars.get(name).copied().ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var<'a>)> {
        self.vars.iter()
    }

    /// Rebinds `name`, e.g. to a leaf a gradient check perturbs.
    pub fn replace(&mut self, name: &str, var: Var<'a>) -> Option<Var<'a>> {
        self.vars.insert(name.to_string(), var)
    }

    fn linear(&self, prefix: &str, x: Var<'a>) -> Result<Var<'a>> {
        let y = x.matmul(self.get(&format!("{prefix}.w"))?)?;
        match self.vars.get(&format!("{prefix}.b")) {
            Some(&b) => y.add_bias(b),
            None => Ok(y),
        }
    }

    /// `relu(lin2(relu(lin1(x))))`.
    fn mlp(&self, prefix: &str, x: Var<'a>) -> Result<Var<'a>> {
        let hidden = self.linear(&format!("{prefix}.lin1"), x)?.relu();
        Ok(self.linear(&format!("{prefix}.lin2"), hidden)?.relu())
    }
}

/// Everything a forward pass exposes besides the prediction.
pub struct ForwardOutput<'a> {
    /// `[G×out]`, the mean over samples.
    pub prediction: Var<'a>,
    /// Per-sample predictions.
    pub per_sample: Vec<Var<'a>>,
    pub theta: Option<Var<'a>>,
    pub assignments: Vec<AssignmentMatrix>,
    /// Node states per sample: index `t` holds `h^(t)`, `t = 0..=layers_down`.
    pub node_states: Vec<Vec<Var<'a>>>,
    pub virtual_states: Vec<Vec<Var<'a>>>,
}

/// How assignments are produced for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Sampling {
    pub seeds: SeedTree,
    pub q: usize,
    pub mode: AssignMode,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub dims: ModelDims,
}

impl Model {
    pub fn new(spec: ModelSpec, dims: ModelDims) -> Result<Self> {
        spec.validate()?;
        if dims.out_dim == 0 {
            return Err(Error::Invalid("output dimension must be positive".into()));
        }
        Ok(Self { spec, dims })
    }

    fn readout_width(&self) -> usize {
        let s = &self.spec;
        match s.readout_source {
            ReadoutSource::Nodes | ReadoutSource::Root => s.d_hidden_down,
            ReadoutSource::Virtual => s.d_virtual(),
            ReadoutSource::Both => s.d_hidden_down + s.d_virtual(),
        }
    }

    /// Name and shape of every parameter; biases are `[1×d]`.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let s = &self.spec;
        let (d, dv, du) = (s.d_hidden_down, s.d_virtual(), s.d_hidden_up);
        let mut out = Vec::new();
        let mut lin = |name: String, i: usize, o: usize, bias: bool| {
            out.push((format!("{name}.w"), vec![i, o], true));
            if bias {
                out.push((format!("{name}.b"), vec![1, o], false));
            }
        };
        lin("enc".into(), self.dims.d_in, d, true);
        if s.ds_enabled {
            let mut width = self.dims.d_in;
            for l in 0..s.layers_up.max(1) {
                lin(format!("up.{l}.lin1"), width, du, true);
                lin(format!("up.{l}.lin2"), du, du, true);
                width = du;
            }
            lin("up.head".into(), du, s.m, true);
            match s.virtual_init {
                VirtualInit::Identity => lin("vn.table".into(), s.m, dv, false),
                VirtualInit::SubgraphMpnn => {
                    lin("vn.sub.lin1".into(), d, dv, true);
                    lin("vn.sub.lin2".into(), dv, dv, true);
                }
                VirtualInit::Random => {}
            }
        }
        for t in 0..s.layers_down {
            if let Some(de) = self.dims.d_edge {
                lin(format!("down.{t}.edge"), de, d, true);
            }
            if s.ds_enabled {
                lin(format!("down.{t}.aggn"), d, dv, false);
                lin(format!("down.{t}.updc.lin1"), 3 * dv, dv, true);
                lin(format!("down.{t}.updc.lin2"), dv, dv, true);
                lin(format!("down.{t}.upd.lin1"), d + dv, d, true);
            } else {
                lin(format!("down.{t}.upd.lin1"), d, d, true);
            }
            lin(format!("down.{t}.upd.lin2"), d, d, true);
        }
        lin("head.lin1".into(), self.readout_width(), d, true);
        lin("head.lin2".into(), d, self.dims.out_dim, true);
        out
    }

    /// Fan-in uniform weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParameterStore {
        let mut store = ParameterStore::new();
        for (i, (name, shape, is_weight)) in self.parameter_shapes().into_iter().enumerate() {
            let t = if is_weight {
                use rand::Rng;
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let mut rng = SeedTree::new(seed).path(&[0x1417, i as u64]).rng();
                let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            } else {
                Tensor::zeros(&shape)
            };
            store.insert(name, t);
        }
        store
    }

    /// Names whose shapes differ from (or are missing in) `store`, plus
    /// unexpected extras. Entries under `opt.` are ignored.
    pub fn shape_mismatches(&self, store: &ParameterStore) -> Vec<String> {
        let expected: BTreeMap<String, Vec<usize>> =
            self.parameter_shapes().into_iter().map(|(n, s, _)| (n, s)).collect();
        let mut bad = Vec::new();
        for (name, shape) in &expected {
            match store.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => bad.push(format!("{name}: expected {shape:?}, found {:?}", t.shape())),
                None => bad.push(format!("{name}: missing")),
            }
        }
        for name in store.names().filter(|n| !n.starts_with("opt.") && !expected.contains_key(*n)) {
            bad.push(format!("{name}: unexpected"));
        }
        bad
    }

    /// `θ = h_u(A, X)`: GIN layers on raw features, then a linear head to `m`.
    pub fn upstream_priors<'a>(&self, p: &Bound<'a>, batch: &Batch, x: Var<'a>) -> Result<Var<'a>> {
        let mut h = x;
        if self.spec.layers_up == 0 {
            h = p.mlp("up.0", h)?;
        }
        for l in 0..self.spec.layers_up {
            let agg = h.add(h.aggregate_rows(Rc::clone(&batch.nbr), Aggregator::Sum)?)?;
            h = p.mlp(&format!("up.{l}"), agg)?;
        }
        p.linear("up.head", h)
    }

    /// Initial virtual states `[G·m × d_v]` for one assignment `hmat`.
    pub fn init_virtual<'a>(
        &self,
        p: &Bound<'a>,
        batch: &Batch,
        h0: Var<'a>,
        hmat: Var<'a>,
        seeds: SeedTree,
        sample: usize,
    ) -> Result<Var<'a>> {
        let tape = h0.tape();
        let (m, dv) = (self.spec.m, self.spec.d_virtual());
        match self.spec.virtual_init {
            VirtualInit::Identity => {
                let rows: Vec<usize> = (0..batch.num_graphs * m).map(|r| r % m).collect();
                p.get("vn.table.w")?.gather_rows(&rows)
            }
            VirtualInit::Random => {
                let mut data = Vec::with_capacity(batch.num_graphs * m * dv);
                for &id in &batch.ids {
                    let mut rng = seeds.path(&[id, sample as u64, u64::MAX]).rng();
                    data.extend((0..m * dv).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
                }
                Ok(tape.constant(Tensor::new(vec![batch.num_graphs * m, dv], data)?))
            }
            VirtualInit::SubgraphMpnn => {
                let own = h0.gather_rows(&batch.copy_node)?;
                let msg = tape.weighted_aggregate(h0, hmat, Rc::clone(&batch.copy_msg), Aggregator::Sum)?;
                let z = p.mlp("vn.sub", own.add(msg)?)?;
                let pool = Rc::new(pool_copies(batch));
                tape.weighted_aggregate(z, hmat, pool, Aggregator::Sum)
            }
        }
    }

    /// `relu(AGGn{h_v : v ∈ a⁻¹(c)} · W)`; empty groups give zero.
    pub fn aggregate_to_virtual<'a>(&self, p: &Bound<'a>, batch: &Batch, h: Var<'a>, hmat: Var<'a>, t: usize) -> Result<Var<'a>> {
        let pooled = h.tape().weighted_aggregate(h, hmat, Rc::clone(&batch.vn_in), self.spec.agg_n)?;
        Ok(p.linear(&format!("down.{t}.aggn"), pooled)?.relu())
    }

    /// `UPDc(g_c, ḡ_c, AGGc{ḡ_j : j ≠ c})`.
    pub fn update_virtual<'a>(&self, p: &Bound<'a>, batch: &Batch, g: Var<'a>, pooled: Var<'a>, t: usize) -> Result<Var<'a>> {
        let others = pooled.aggregate_rows(Rc::clone(&batch.vn_others), self.spec.agg_c)?;
        let cat = g.tape().concat_cols(&[g, pooled, others])?;
        p.mlp(&format!("down.{t}.updc"), cat)
    }

    fn neighbour_message<'a>(&self, p: &Bound<'a>, batch: &Batch, h: Var<'a>, t: usize) -> Result<Var<'a>> {
        match &batch.edge_attr {
            None => h.aggregate_rows(Rc::clone(&batch.nbr), self.spec.agg),
            Some(ea) => {
                let e = p.linear(&format!("down.{t}.edge"), h.tape().constant(ea.clone()))?;
                let msgs = h.gather_rows(&batch.edge_src)?.add(e)?.relu();
                msgs.aggregate_rows(Rc::clone(&batch.edge_in), self.spec.agg)
            }
        }
    }

    /// `UPD(h_v, AGG{h_u : u ∈ N(v)}, DS{g_c : c ∈ a(v)})` with optional residual.
    pub fn update_original<'a>(
        &self,
        p: &Bound<'a>,
        batch: &Batch,
        h: Var<'a>,
        virt: Option<(Var<'a>, Var<'a>)>,
        t: usize,
    ) -> Result<Var<'a>> {
        let tape = h.tape();
        let msg = h.add(self.neighbour_message(p, batch, h, t)?)?;
        let input = match virt {
            Some((g, hmat)) => {
                let ds = tape.weighted_aggregate(g, hmat, Rc::clone(&batch.ds_in), self.spec.ds)?;
                tape.concat_cols(&[msg, ds])?
            }
            None => msg,
        };
        let mut out = p.mlp(&format!("down.{t}.upd"), input)?;
        if self.spec.residual {
            out = h.add(out)?;
        }
        if self.spec.layer_norm {
            out = out.layer_norm_rows(1e-5)?;
        }
        Ok(out)
    }

    fn readout<'a>(&self, p: &Bound<'a>, batch: &Batch, h: Var<'a>, g: Option<Var<'a>>) -> Result<Var<'a>> {
        let s = &self.spec;
        let virt = || -> Result<Var<'a>> {
            let g = g.ok_or_else(|| Error::Invalid("virtual readout without virtual nodes".into()))?;
            g.aggregate_rows(Rc::clone(&batch.graph_vns), s.readout_agg)
        };
        let pooled = match s.readout_source {
            ReadoutSource::Nodes => h.aggregate_rows(Rc::clone(&batch.graph_nodes), s.readout_agg)?,
            ReadoutSource::Root => h.gather_rows(&batch.node_offset[..batch.num_graphs])?,
            ReadoutSource::Virtual => virt()?,
            ReadoutSource::Both => {
                let nodes = h.aggregate_rows(Rc::clone(&batch.graph_nodes), s.readout_agg)?;
                h.tape().concat_cols(&[nodes, virt()?])?
            }
        };
        let hidden = p.linear("head.lin1", pooled)?.relu();
        p.linear("head.lin2", hidden)
    }

    /// Full pass: priors, `q` assignments, downstream layers, readout, mean.
    pub fn forward<'a>(&self, p: &Bound<'a>, batch: &Batch, sampling: Sampling) -> Result<ForwardOutput<'a>> {
        let s = &self.spec;
        if batch.x.cols() != self.dims.d_in {
            return Err(Error::Shape(format!("features have width {}, model expects {}", batch.x.cols(), self.dims.d_in)));
        }
        if s.ds_enabled && batch.m != s.m {
            return Err(Error::Shape(format!("batch built for m={}, model has m={}", batch.m, s.m)));
        }
        let tape = p.get("enc.w")?.tape();
        let x = tape.constant(batch.x.clone());
        let h0 = p.linear("enc", x)?;

        let mut out = ForwardOutput {
            prediction: h0,
            per_sample: Vec::new(),
            theta: None,
            assignments: Vec::new(),
            node_states: Vec::new(),
            virtual_states: Vec::new(),
        };

        if !s.ds_enabled {
            let mut h = h0;
            let mut states = vec![h];
            for t in 0..s.layers_down {
                h = self.update_original(p, batch, h, None, t)?;
                states.push(h);
            }
            let pred = self.readout(p, batch, h, None)?;
            out.prediction = pred;
            out.per_sample.push(pred);
            out.node_states.push(states);
            return Ok(out);
        }

        let theta = self.upstream_priors(p, batch, x)?;
        let dense = match sampling.mode {
            AssignMode::StraightThrough => {
                let samples = batch.sample_assignments(&theta.value(), s.k, sampling.q, sampling.seeds)?;
                let a = exactk::straight_through_from_samples(theta, s.k, samples)?;
                out.assignments = a.samples;
                a.dense
            }
            AssignMode::Relaxed => exactk::assign(theta, s.k, sampling.q, sampling.seeds, AssignMode::Relaxed)?.dense,
        };
        out.theta = Some(theta);

        for (si, &hmat) in dense.iter().enumerate() {
            let mut h = h0;
            let mut g = self.init_virtual(p, batch, h0, hmat, sampling.seeds, si)?;
            let mut hs = vec![h];
            let mut gs = vec![g];
            for t in 0..s.layers_down {
                let pooled = self.aggregate_to_virtual(p, batch, h, hmat, t)?;
                g = self.update_virtual(p, batch, g, pooled, t)?;
                h = self.update_original(p, batch, h, Some((g, hmat)), t)?;
                hs.push(h);
                gs.push(g);
            }
            out.per_sample.push(self.readout(p, batch, h, Some(g))?);
            out.node_states.push(hs);
            out.virtual_states.push(gs);
        }
        let mut sum = out.per_sample[0];
        for &y in &out.per_sample[1..] {
            sum = sum.add(y)?;
        }
        out.prediction = sum.scale(1.0 / out.per_sample.len() as f64);
        Ok(out)
    }

    /// Runs downstream layers `from..to` starting at `h^(from)` and, when
    /// virtual nodes are on, `(g^(from), H)`. Returns `h^(to)`.
    pub fn propagate<'a>(
        &self,
        p: &Bound<'a>,
        batch: &Batch,
        mut h: Var<'a>,
        mut virt: Option<(Var<'a>, Var<'a>)>,
        from: usize,
        to: usize,
    ) -> Result<Var<'a>> {
        if from > to || to > self.spec.layers_down {
            return Err(Error::Index(format!("layer span {from}..{to} with {} layers", self.spec.layers_down)));
        }
        if self.spec.ds_enabled != virt.is_some() {
            return Err(Error::Invalid("virtual state must be given exactly when virtual nodes are enabled".into()));
        }
        for t in from..to {
            if let Some((g, hmat)) = virt {
                let pooled = self.aggregate_to_virtual(p, batch, h, hmat, t)?;
                virt = Some((self.update_virtual(p, batch, g, pooled, t)?, hmat));
            }
            h = self.update_original(p, batch, h, virt, t)?;
        }
        Ok(h)
    }
}

/// Pools copies `(v, c)` (row `v·m + c`) into virtual node `g·m + c`,
/// weighted by the assignment entry of the same index.
fn pool_copies(batch: &Batch) -> WeightedSegments {
    let m = batch.m;
    WeightedSegments::from_lists((0..batch.num_graphs * m).map(|r| {
        let gi = r / m;
        (batch.node_offset[gi]..batch.node_offset[gi + 1]).map(|v| (v * m + r % m, v * m + r % m)).collect::<Vec<_>>()
    }))
}
