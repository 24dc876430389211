//! Attributed undirected graphs, virtual-node assignments and the graph JSON
//! record format.

use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Graph-level (or pair-level) prediction target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Target {
    pub fn as_slice(&self) -> &[f64] {
        match self {
            Target::Scalar(x) => std::slice::from_ref(x),
            Target::Vector(v) => v,
        }
    }

    /// Class index for classification targets stored as a scalar.
    pub fn class(&self) -> Result<usize> {
        match self {
            Target::Scalar(x) if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
            other => Err(Error::Invalid(format!("{other:?} is not a class index"))),
        }
    }
}

/// Undirected simple graph with a dense node-feature matrix.
///
/// Immutable after construction. Edges keep their input order (which indexes
/// `edge_features`); adjacency is stored CSR-style, sorted by neighbour.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributedGraph {
    n: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    adj: Vec<usize>,
    adj_edge: Vec<usize>,
    features: Tensor,
    edge_features: Option<Tensor>,
    label: Option<Target>,
}

impl AttributedGraph {
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        features: Tensor,
        edge_features: Option<Tensor>,
        label: Option<Target>,
    ) -> Result<Self> {
        if features.rank() != 2 || features.rows() != n {
            return Err(Error::Graph(format!(
                "feature matrix {:?} does not have {n} rows",
                features.shape()
            )));
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for &(u, v) in &edges {
            if u >= n || v >= n {
                return Err(Error::Graph(format!("edge ({u}, {v}) has an endpoint outside [0, {n})")));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop at node {u}")));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::Graph(format!("duplicate edge ({u}, {v})")));
            }
        }
        if let Some(ef) = &edge_features {
            if ef.rank() != 2 || ef.rows() != edges.len() {
                return Err(Error::Graph(format!(
                    "edge feature matrix {:?} does not have {} rows",
                    ef.shape(),
                    edges.len()
                )));
            }
        }
        let mut lists: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        for (e, &(u, v)) in edges.iter().enumerate() {
            lists[u].push((v, e));
            lists[v].push((u, e));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let mut adj = Vec::with_capacity(2 * edges.len());
        let mut adj_edge = Vec::with_capacity(2 * edges.len());
        for mut l in lists {
            l.sort_unstable();
            for (u, e) in l {
                adj.push(u);
                adj_edge.push(e);
            }
            offsets.push(adj.len());
        }
        Ok(Self {
            n,
            edges,
            offsets,
            adj,
            adj_edge,
            features,
            edge_features,
            label,
        })
    }

    /// Graph with constant scalar node features (`[n×1]` of ones).
    pub fn unlabeled(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(n, edges, Tensor::full(&[n, 1], 1.0), None, None)
    }

    pub fn with_label(mut self, label: Option<Target>) -> Self {
        self.label = label;
        self
    }

    pub fn with_features(self, features: Tensor) -> Result<Self> {
        Self::new(self.n, self.edges, features, self.edge_features, self.label)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn feature_dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn edge_features(&self) -> Option<&Tensor> {
        self.edge_features.as_ref()
    }

    pub fn label(&self) -> Option<&Target> {
        self.label.as_ref()
    }

    pub fn degree(&self, v: usize) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Sorted neighbours of `v`.
    pub fn neighbors(&self, v: usize) -> Result<&[usize]> {
        if v >= self.n {
            return Err(Error::Index(format!("node {v} outside [0, {})", self.n)));
        }
        Ok(self.nbrs(v))
    }

    pub(crate) fn nbrs(&self, v: usize) -> &[usize] {
        &self.adj[self.offsets[v]..self.offsets[v + 1]]
    }

    /// Edge ids parallel to [`Self::neighbors`].
    pub(crate) fn nbr_edges(&self, v: usize) -> &[usize] {
        &self.adj_edge[self.offsets[v]..self.offsets[v + 1]]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && v < self.n && self.nbrs(u).binary_search(&v).is_ok()
    }

    /// Subgraph induced by `nodes`, relabelled in ascending old-index order.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Subgraph> {
        let mut keep: Vec<usize> = nodes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if let Some(&bad) = keep.iter().find(|&&v| v >= self.n) {
            return Err(Error::Index(format!("node {bad} outside [0, {})", self.n)));
        }
        let mut old_to_new = vec![None; self.n];
        for (i, &v) in keep.iter().enumerate() {
            old_to_new[v] = Some(i);
        }
        let mut edges = Vec::new();
        let mut edge_rows = Vec::new();
        for (e, &(u, v)) in self.edges.iter().enumerate() {
            if let (Some(a), Some(b)) = (old_to_new[u], old_to_new[v]) {
                edges.push((a, b));
                edge_rows.push(e);
            }
        }
        let d = self.feature_dim();
        let mut x = Vec::with_capacity(keep.len() * d);
        for &v in &keep {
            x.extend_from_slice(self.features.row(v));
        }
        let features = Tensor::new(vec![keep.len(), d], x)?;
        let edge_features = match &self.edge_features {
            Some(ef) => {
                let de = ef.cols();
                let mut data = Vec::with_capacity(edge_rows.len() * de);
                for &e in &edge_rows {
                    data.extend_from_slice(ef.row(e));
                }
                Some(Tensor::new(vec![edge_rows.len(), de], data)?)
            }
            None => None,
        };
        let graph = AttributedGraph::new(keep.len(), edges, features, edge_features, self.label.clone())?;
        Ok(Subgraph {
            graph,
            old_to_new,
            new_to_old: keep,
        })
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n {
            return Err(Error::Invalid("permutation length differs from n".into()));
        }
        let mut seen = vec![false; self.n];
        for &p in perm {
            if p >= self.n || std::mem::replace(&mut seen[p], true) {
                return Err(Error::Invalid("not a permutation".into()));
            }
        }
        let d = self.feature_dim();
        let mut x = vec![0.0; self.n * d];
        for v in 0..self.n {
            x[perm[v] * d..(perm[v] + 1) * d].copy_from_slice(self.features.row(v));
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();
        Self::new(
            self.n,
            edges,
            Tensor::new(vec![self.n, d], x)?,
            self.edge_features.clone(),
            self.label.clone(),
        )
    }

    /// Disjoint union; the second graph's nodes are shifted by `self.n()`.
    pub fn disjoint_union(&self, other: &Self) -> Result<Self> {
        if self.feature_dim() != other.feature_dim() {
            return Err(Error::Shape("feature dims differ in disjoint union".into()));
        }
        let n = self.n + other.n;
        let mut edges = self.edges.clone();
        edges.extend(other.edges.iter().map(|&(u, v)| (u + self.n, v + self.n)));
        let mut x = self.features.data().to_vec();
        x.extend_from_slice(other.features.data());
        let edge_features = match (&self.edge_features, &other.edge_features) {
            (Some(a), Some(b)) if a.cols() == b.cols() => {
                let mut d = a.data().to_vec();
                d.extend_from_slice(b.data());
                Some(Tensor::new(vec![edges.len(), a.cols()], d)?)
            }
            (None, None) => None,
            _ => return Err(Error::Shape("edge features present on only one side".into())),
        };
        Self::new(n, edges, Tensor::new(vec![n, self.feature_dim()], x)?, edge_features, None)
    }

    /// Dense combinatorial Laplacian `D - A`.
    pub fn laplacian(&self) -> Tensor {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for &(u, v) in &self.edges {
            l[u * n + v] -= 1.0;
            l[v * n + u] -= 1.0;
            l[u * n + u] += 1.0;
            l[v * n + v] += 1.0;
        }
        Tensor::new(vec![n, n], l).expect("n×n")
    }

    /// BFS hop distances from `source`; `None` for unreachable nodes.
    pub fn bfs(&self, source: usize) -> Vec<Option<usize>> {
        let mut dist = vec![None; self.n];
        let mut q = VecDeque::new();
        dist[source] = Some(0);
        q.push_back(source);
        while let Some(v) = q.pop_front() {
            let dv = dist[v].unwrap();
            for &u in self.nbrs(v) {
                if dist[u].is_none() {
                    dist[u] = Some(dv + 1);
                    q.push_back(u);
                }
            }
        }
        dist
    }

    /// Component id per node, numbered in order of lowest member.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.n];
        let mut next = 0;
        for s in 0..self.n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(v) = stack.pop() {
                for &u in self.nbrs(v) {
                    if comp[u] == usize::MAX {
                        comp[u] = next;
                        stack.push(u);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    pub fn num_components(&self) -> usize {
        self.components().iter().max().map_or(0, |m| m + 1)
    }

    pub fn is_connected(&self) -> bool {
        self.num_components() <= 1
    }

    pub fn to_record(&self) -> GraphRecord {
        GraphRecord {
            n: self.n,
            edges: self.edges.iter().map(|&(u, v)| [u, v]).collect(),
            x: (0..self.n).map(|v| self.features.row(v).to_vec()).collect(),
            edge_attr: self
                .edge_features
                .as_ref()
                .map(|ef| (0..ef.rows()).map(|e| ef.row(e).to_vec()).collect()),
            y: self.label.clone(),
        }
    }
}

/// An induced subgraph and its index maps.
#[derive(Clone, Debug)]
pub struct Subgraph {
    pub graph: AttributedGraph,
    pub old_to_new: Vec<Option<usize>>,
    pub new_to_old: Vec<usize>,
}

/// One line of a graph dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphRecord {
    pub n: usize,
    pub edges: Vec<[usize; 2]>,
    pub x: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edge_attr: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Target>,
}

impl TryFrom<GraphRecord> for AttributedGraph {
    type Error = Error;

    fn try_from(r: GraphRecord) -> Result<Self> {
        if r.x.len() != r.n {
            return Err(Error::Graph(format!("field x: {} rows for n = {}", r.x.len(), r.n)));
        }
        let d = r.x.first().map_or(0, Vec::len);
        if r.x.iter().any(|row| row.len() != d) {
            return Err(Error::Graph("field x: rows have different lengths".into()));
        }
        let features = Tensor::new(vec![r.n, d], r.x.into_iter().flatten().collect())?;
        let edge_features = match r.edge_attr {
            Some(rows) => {
                let de = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|row| row.len() != de) {
                    return Err(Error::Graph("field edge_attr: rows have different lengths".into()));
                }
                Some(Tensor::new(vec![rows.len(), de], rows.into_iter().flatten().collect())?)
            }
            None => None,
        };
        let edges = r.edges.into_iter().map(|[u, v]| (u, v)).collect();
        AttributedGraph::new(r.n, edges, features, edge_features, r.y)
    }
}

/// Binary `n×m` node-to-virtual-node assignment with exactly `k` ones per row.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct AssignmentMatrix {
    n: usize,
    m: usize,
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl AssignmentMatrix {
    pub fn new(m: usize, k: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if k > m {
            return Err(Error::Invalid(format!("k = {k} exceeds m = {m}")));
        }
        let mut rows = rows;
        for (v, row) in rows.iter_mut().enumerate() {
            row.sort_unstable();
            let distinct = row.windows(2).all(|w| w[0] != w[1]);
            if row.len() != k || !distinct || row.iter().any(|&c| c >= m) {
                return Err(Error::Invalid(format!(
                    "row {v} = {row:?} is not {k} distinct indices in [0, {m})"
                )));
            }
        }
        Ok(Self {
            n: rows.len(),
            m,
            k,
            rows,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, v: usize) -> &[usize] {
        &self.rows[v]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    /// Nodes assigned to virtual node `c`, ascending.
    pub fn inverse_assignment(&self, c: usize) -> Result<Vec<usize>> {
        if c >= self.m {
            return Err(Error::Index(format!("virtual node {c} outside [0, {})", self.m)));
        }
        Ok((0..self.n).filter(|&v| self.rows[v].binary_search(&c).is_ok()).collect())
    }

    pub fn is_assigned(&self, v: usize, c: usize) -> bool {
        self.rows[v].binary_search(&c).is_ok()
    }

    pub fn to_dense(&self) -> Tensor {
        let mut d = vec![0.0; self.n * self.m];
        for (v, row) in self.rows.iter().enumerate() {
            for &c in row {
                d[v * self.m + c] = 1.0;
            }
        }
        Tensor::new(vec![self.n, self.m], d).expect("n×m")
    }

    /// Largest number of nodes sharing one virtual node.
    pub fn max_load(&self) -> usize {
        let mut load = vec![0; self.m];
        for row in &self.rows {
            for &c in row {
                load[c] += 1;
            }
        }
        load.into_iter().max().unwrap_or(0)
    }
}
