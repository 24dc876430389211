//! Synthetic graph datasets and JSONL ingestion.

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, GraphRecord, Target};
use crate::rng::SeedTree;
use crate::tensor::Tensor;
use crate::training::{TaskHead, TaskKind};

/// Skip lengths of the standard circular skip-link classes.
pub const CSL_SKIPS: [usize; 10] = [2, 3, 4, 5, 6, 9, 11, 12, 13, 16];
pub const CSL_NODES: usize = 41;

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

fn default_per_class() -> usize {
    15
}

fn default_folds() -> usize {
    10
}

fn default_copies() -> usize {
    10
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairFamily {
    /// `C_{2s}` against two disjoint copies of `C_s`.
    CycleSplit,
    /// `C(n, 2)` against `C(n, 3)`.
    CslPair,
}

/// Which dataset to build. Serialized with a `"name"` tag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DatasetSpec {
    TreesLeafcount {
        depth: usize,
        n_samples: usize,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    TreesNeighboursmatch {
        depth: usize,
        n_samples: usize,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    /// Stratified `folds`-fold split; `fold` selects the test fold.
    Csl {
        #[serde(default = "default_per_class")]
        per_class: usize,
        #[serde(default = "default_folds")]
        folds: usize,
        #[serde(default)]
        fold: usize,
        #[serde(default)]
        seed: u64,
    },
    WlPairs {
        family: PairFamily,
        sizes: Vec<usize>,
        #[serde(default = "default_copies")]
        copies: usize,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        seed: u64,
    },
    JsonlFile {
        train: PathBuf,
        #[serde(default)]
        val: Option<PathBuf>,
        #[serde(default)]
        test: Option<PathBuf>,
        head: TaskHead,
    },
}

#[derive(Clone, Debug, Default)]
pub struct Splits {
    pub train: Vec<AttributedGraph>,
    pub val: Vec<AttributedGraph>,
    pub test: Vec<AttributedGraph>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &AttributedGraph> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }

    pub fn feature_dim(&self) -> Result<usize> {
        let mut dims = self.all().map(AttributedGraph::feature_dim);
        let d = dims.next().ok_or_else(|| Error::Invalid("dataset is empty".into()))?;
        if dims.any(|x| x != d) {
            return Err(Error::Invalid("graphs disagree on feature dimension".into()));
        }
        Ok(d)
    }

    pub fn edge_feature_dim(&self) -> Option<usize> {
        self.all().find_map(|g| g.edge_features().map(Tensor::cols))
    }
}

impl DatasetSpec {
    pub fn is_generator(&self) -> bool {
        !matches!(self, DatasetSpec::JsonlFile { .. })
    }

    pub fn head(&self) -> TaskHead {
        let multiclass = |out_dim| TaskHead {
            kind: TaskKind::Multiclass,
            out_dim,
        };
        match self {
            DatasetSpec::TreesLeafcount { depth, .. } => multiclass((1 << depth) + 1),
            DatasetSpec::TreesNeighboursmatch { depth, .. } => multiclass(1 << depth),
            DatasetSpec::Csl { .. } => multiclass(CSL_SKIPS.len()),
            DatasetSpec::WlPairs { .. } => TaskHead {
                kind: TaskKind::Binary,
                out_dim: 1,
            },
            DatasetSpec::JsonlFile { head, .. } => *head,
        }
    }

    /// Materializes train/val/test.
    pub fn build(&self) -> Result<Splits> {
        match self {
            DatasetSpec::TreesLeafcount {
                depth,
                n_samples,
                split,
                seed,
            } => split_by_fraction(gen_trees_leafcount(*depth, *n_samples, *seed)?, *split, *seed).map(Into::into),
            DatasetSpec::TreesNeighboursmatch {
                depth,
                n_samples,
                split,
                seed,
            } => split_by_fraction(gen_trees_neighboursmatch(*depth, *n_samples, *seed)?, *split, *seed).map(Into::into),
            DatasetSpec::Csl {
                per_class,
                folds,
                fold,
                seed,
            } => {
                let graphs = gen_csl(CSL_NODES, &CSL_SKIPS, *per_class, *seed)?;
                let assignment = stratified_folds(&graphs, *folds, *seed)?;
                if fold >= folds {
                    return Err(Error::Invalid(format!("fold {fold} of {folds}")));
                }
                let mut s = Splits::default();
                for (g, f) in graphs.into_iter().zip(assignment) {
                    if f == *fold {
                        s.test.push(g);
                    } else {
                        s.train.push(g);
                    }
                }
                Ok(s)
            }
            DatasetSpec::WlPairs {
                family,
                sizes,
                copies,
                split,
                seed,
            } => {
                let mut pairs = Vec::new();
                for &size in sizes {
                    for c in 0..*copies {
                        let tree = SeedTree::new(*seed).path(&[size as u64, c as u64]);
                        pairs.push(gen_wl_pair(*family, size, tree)?);
                    }
                }
                let s = split_by_fraction(pairs, *split, *seed)?;
                let flat = |v: Vec<(AttributedGraph, AttributedGraph)>| v.into_iter().flat_map(|(a, b)| [a, b]).collect();
                Ok(Splits {
                    train: flat(s.train),
                    val: flat(s.val),
                    test: flat(s.test),
                })
            }
            DatasetSpec::JsonlFile { train, val, test, .. } => Ok(Splits {
                train: load_jsonl(train)?,
                val: val.as_deref().map(load_jsonl).transpose()?.unwrap_or_default(),
                test: test.as_deref().map(load_jsonl).transpose()?.unwrap_or_default(),
            }),
        }
    }
}

/// Shuffles and cuts by `[train, val, test]` fractions (which must sum to 1).
pub fn split_by_fraction<T>(mut items: Vec<T>, split: [f64; 3], seed: u64) -> Result<GenericSplits<T>> {
    if split.iter().any(|&f| f < 0.0) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!("split fractions {split:?} must be non-negative and sum to 1")));
    }
    items.shuffle(&mut SeedTree::new(seed).child(u64::MAX).rng());
    let n = items.len();
    let n_train = (split[0] * n as f64).round() as usize;
    let n_val = ((split[1] * n as f64).round() as usize).min(n - n_train);
    let test = items.split_off(n_train + n_val);
    let val = items.split_off(n_train);
    Ok(GenericSplits { train: items, val, test })
}

/// Train/val/test of anything; [`Splits`] is the graph case.
pub struct GenericSplits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl From<GenericSplits<AttributedGraph>> for Splits {
    fn from(s: GenericSplits<AttributedGraph>) -> Self {
        Splits {
            train: s.train,
            val: s.val,
            test: s.test,
        }
    }
}

fn one_hot_rows(n: usize, width: usize, hot: impl Fn(usize) -> Vec<usize>) -> Tensor {
    let mut x = Tensor::zeros(&[n, width]);
    for v in 0..n {
        for j in hot(v) {
            x.data_mut()[v * width + j] = 1.0;
        }
    }
    x
}

/// Complete binary tree with root 0 and children `2i+1`, `2i+2`.
pub fn complete_binary_tree_edges(depth: usize) -> Vec<(usize, usize)> {
    let n = (1usize << (depth + 1)) - 1;
    (1..n).map(|v| ((v - 1) / 2, v)).collect()
}

/// Index of the first leaf of a complete binary tree.
pub fn first_leaf(depth: usize) -> usize {
    (1 << depth) - 1
}

/// A leaf-count tree. Features are one-hot `[label 0, label 1, null]`;
/// the target is the number of leaves labelled 1.
pub fn leafcount_tree(depth: usize, leaves: &[bool]) -> Result<AttributedGraph> {
    if leaves.len() != 1 << depth {
        return Err(Error::Invalid(format!("depth {depth} needs {} leaf labels", 1 << depth)));
    }
    let n = (1 << (depth + 1)) - 1;
    let first = first_leaf(depth);
    let x = one_hot_rows(n, 3, |v| vec![if v < first { 2 } else { leaves[v - first] as usize }]);
    let count = leaves.iter().filter(|&&b| b).count();
    AttributedGraph::new(n, complete_binary_tree_edges(depth), x, None, Some(Target::Scalar(count as f64)))
}

/// Trees whose target count is uniform over `0..=2^depth`.
pub fn gen_trees_leafcount(depth: usize, n: usize, seed: u64) -> Result<Vec<AttributedGraph>> {
    if !(2..=6).contains(&depth) {
        return Err(Error::Invalid(format!("leaf-count depth {depth} outside [2, 6]")));
    }
    let leaves = 1usize << depth;
    (0..n)
        .map(|i| {
            let mut rng = SeedTree::new(seed).child(i as u64).rng();
            let ones = rng.random_range(0..=leaves);
            let mut labels: Vec<bool> = (0..leaves).map(|j| j < ones).collect();
            labels.shuffle(&mut rng);
            leafcount_tree(depth, &labels)
        })
        .collect()
}

/// A neighbours-match tree. Leaf `j` carries `labels[j]` and `markers[j]`,
/// the root carries `root_marker`. Features are one-hot label (width `L+1`)
/// followed by one-hot marker (width `L+1`), where `L = 2^depth` and index
/// `L` is the null category. The target is the label of the leaf whose
/// marker equals the root's.
pub fn neighboursmatch_tree(depth: usize, labels: &[usize], markers: &[usize], root_marker: usize) -> Result<AttributedGraph> {
    let l = 1usize << depth;
    if labels.len() != l || markers.len() != l {
        return Err(Error::Invalid(format!("depth {depth} needs {l} labels and markers")));
    }
    if labels.iter().chain(markers).any(|&x| x >= l) || root_marker >= l {
        return Err(Error::Invalid("labels and markers must lie in [0, 2^depth)".into()));
    }
    let target = markers
        .iter()
        .position(|&mk| mk == root_marker)
        .map(|j| labels[j])
        .ok_or_else(|| Error::Invalid("no leaf carries the root marker".into()))?;
    let n = (1 << (depth + 1)) - 1;
    let first = first_leaf(depth);
    let x = one_hot_rows(n, 2 * (l + 1), |v| {
        if v == 0 {
            vec![l, l + 1 + root_marker]
        } else if v < first {
            vec![l, 2 * l + 1]
        } else {
            vec![labels[v - first], l + 1 + markers[v - first]]
        }
    });
    AttributedGraph::new(n, complete_binary_tree_edges(depth), x, None, Some(Target::Scalar(target as f64)))
}

/// Leaf labels and markers are independent random permutations; the root
/// marker is uniform, so targets are balanced.
pub fn gen_trees_neighboursmatch(depth: usize, n: usize, seed: u64) -> Result<Vec<AttributedGraph>> {
    if !(2..=7).contains(&depth) {
        return Err(Error::Invalid(format!("neighbours-match depth {depth} outside [2, 7]")));
    }
    let l = 1usize << depth;
    (0..n)
        .map(|i| {
            let mut rng = SeedTree::new(seed).child(i as u64).rng();
            let mut labels: Vec<usize> = (0..l).collect();
            labels.shuffle(&mut rng);
            let mut markers: Vec<usize> = (0..l).collect();
            markers.shuffle(&mut rng);
            let root = rng.random_range(0..l);
            neighboursmatch_tree(depth, &labels, &markers, root)
        })
        .collect()
}

/// Circular skip-link graph: a cycle on `n` nodes plus chords `i ~ i+skip`.
pub fn csl_graph(n: usize, skip: usize) -> Result<AttributedGraph> {
    if skip < 2 || 2 * skip >= n {
        return Err(Error::Invalid(format!("skip {skip} must lie in [2, n/2) for n = {n}")));
    }
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    edges.extend((0..n).map(|i| (i, (i + skip) % n)));
    AttributedGraph::unlabeled(n, edges)
}

fn random_permutation(n: usize, tree: SeedTree) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut tree.rng());
    p
}

/// `per_class` node-permuted copies of `C(n, R)` for every skip; the class is
/// the skip's position in `skips`.
pub fn gen_csl(n: usize, skips: &[usize], per_class: usize, seed: u64) -> Result<Vec<AttributedGraph>> {
    let mut sorted = skips.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != skips.len() {
        return Err(Error::Invalid("skip lengths must be distinct".into()));
    }
    let mut out = Vec::with_capacity(skips.len() * per_class);
    for (class, &r) in skips.iter().enumerate() {
        let base = csl_graph(n, r)?;
        for c in 0..per_class {
            let perm = random_permutation(n, SeedTree::new(seed).path(&[r as u64, c as u64]));
            out.push(base.permute(&perm)?.with_label(Some(Target::Scalar(class as f64))));
        }
    }
    Ok(out)
}

/// Fold index per graph, stratified by class and shuffled within class.
pub fn stratified_folds(graphs: &[AttributedGraph], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Invalid("need at least 2 folds".into()));
    }
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, g) in graphs.iter().enumerate() {
        let class = g.label().ok_or_else(|| Error::Invalid("unlabelled graph".into()))?.class()?;
        by_class.entry(class).or_default().push(i);
    }
    let mut out = vec![0; graphs.len()];
    for (offset, (class, mut members)) in by_class.into_iter().enumerate() {
        members.shuffle(&mut SeedTree::new(seed).path(&[u64::MAX - 1, class as u64]).rng());
        for (j, i) in members.into_iter().enumerate() {
            out[i] = (offset + j) % folds;
        }
    }
    Ok(out)
}

fn cycle_edges(n: usize, offset: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).map(move |i| (offset + i, offset + (i + 1) % n))
}

/// One 1-WL-indistinguishable, non-isomorphic pair, each member randomly
/// relabelled. The first graph has label 0, the second label 1.
pub fn gen_wl_pair(family: PairFamily, size: usize, tree: SeedTree) -> Result<(AttributedGraph, AttributedGraph)> {
    let (a, b) = match family {
        PairFamily::CycleSplit => {
            if size < 3 {
                return Err(Error::Invalid(format!("cycle split needs s >= 3, got {size}")));
            }
            let a = AttributedGraph::unlabeled(2 * size, cycle_edges(2 * size, 0).collect())?;
            let b = AttributedGraph::unlabeled(2 * size, cycle_edges(size, 0).chain(cycle_edges(size, size)).collect())?;
            (a, b)
        }
        PairFamily::CslPair => {
            if size < 11 {
                return Err(Error::Invalid(format!("skip-link pair needs n >= 11, got {size}")));
            }
            (csl_graph(size, 2)?, csl_graph(size, 3)?)
        }
    };
    let n = a.n();
    let a = a.permute(&random_permutation(n, tree.child(0)))?.with_label(Some(Target::Scalar(0.0)));
    let b = b.permute(&random_permutation(n, tree.child(1)))?.with_label(Some(Target::Scalar(1.0)));
    Ok((a, b))
}

/// Uniform random labelled tree on `n` nodes (decoded Prüfer sequence).
pub fn random_tree(n: usize, tree: SeedTree) -> Result<AttributedGraph> {
    if n < 2 {
        return AttributedGraph::unlabeled(n, vec![]);
    }
    let mut rng = tree.rng();
    let code: Vec<usize> = (0..n - 2).map(|_| rng.random_range(0..n)).collect();
    let mut degree = vec![1usize; n];
    for &c in &code {
        degree[c] += 1;
    }
    let mut leaves: std::collections::BTreeSet<usize> = (0..n).filter(|&v| degree[v] == 1).collect();
    let mut edges = Vec::with_capacity(n - 1);
    for &c in &code {
        let leaf = leaves.pop_first().expect("a Prüfer sequence always leaves a leaf");
        edges.push((leaf, c));
        degree[c] -= 1;
        if degree[c] == 1 {
            leaves.insert(c);
        }
    }
    let last: Vec<usize> = leaves.into_iter().collect();
    edges.push((last[0], last[1]));
    AttributedGraph::unlabeled(n, edges)
}

/// A random tree plus `extra` distinct random chords; always connected.
pub fn random_connected_graph(n: usize, extra: usize, tree: SeedTree) -> Result<AttributedGraph> {
    let base = random_tree(n, tree.child(0))?;
    let max_extra = n * n.saturating_sub(1) / 2 - base.num_edges();
    if extra > max_extra {
        return Err(Error::Invalid(format!("{extra} extra edges do not fit on {n} nodes")));
    }
    let mut edges = base.edges().to_vec();
    let mut seen: std::collections::BTreeSet<(usize, usize)> = edges.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
    let mut rng = tree.child(1).rng();
    while edges.len() < n - 1 + extra {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v && seen.insert((u.min(v), u.max(v))) {
            edges.push((u, v));
        }
    }
    AttributedGraph::unlabeled(n, edges)
}

/// Simple `d`-regular graph from the pairing model, redrawn until no loops
/// or multi-edges remain.
pub fn random_regular_graph(n: usize, d: usize, tree: SeedTree) -> Result<AttributedGraph> {
    if d >= n || (n * d) % 2 == 1 {
        return Err(Error::Invalid(format!("no simple {d}-regular graph on {n} nodes")));
    }
    for attempt in 0..10_000u64 {
        let mut rng = tree.child(attempt).rng();
        let mut stubs: Vec<usize> = (0..n).flat_map(|v| std::iter::repeat_n(v, d)).collect();
        stubs.shuffle(&mut rng);
        let mut seen = std::collections::BTreeSet::new();
        let simple = stubs.chunks(2).all(|p| p[0] != p[1] && seen.insert((p[0].min(p[1]), p[0].max(p[1]))));
        if simple {
            return AttributedGraph::unlabeled(n, seen.into_iter().collect());
        }
    }
    Err(Error::Invalid(format!("pairing model kept failing for n={n}, d={d}")))
}

/// One graph per line; errors name the line (1-based) and the field.
pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<AttributedGraph>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<AttributedGraph>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse { line: i + 1, msg };
        let record: GraphRecord = serde_json::from_str(&line).map_err(|e| parse(e.to_string()))?;
        out.push(AttributedGraph::try_from(record).map_err(|e| parse(e.to_string()))?);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, graphs: &[AttributedGraph]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for g in graphs {
        serde_json::to_writer(&mut w, &g.to_record())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wl::wl_distinguishable;

    #[test]
    fn random_generators_have_the_requested_shape() {
        for n in [1, 2, 3, 10, 57] {
            let t = random_tree(n, SeedTree::new(n as u64)).unwrap();
            assert_eq!(t.num_edges(), n.saturating_sub(1));
            assert!(t.is_connected());
        }
        let g = random_connected_graph(30, 12, SeedTree::new(4)).unwrap();
        assert_eq!(g.num_edges(), 29 + 12);
        assert!(g.is_connected());
        assert!(random_connected_graph(4, 4, SeedTree::new(0)).is_err());
        let r = random_regular_graph(64, 3, SeedTree::new(2)).unwrap();
        assert_eq!(r.num_edges(), 96);
        assert!((0..64).all(|v| r.degree(v) == 3));
        assert!(random_regular_graph(5, 3, SeedTree::new(0)).is_err());
    }

    #[test]
    fn leafcount_examples() {
        let t = leafcount_tree(2, &[false; 4]).unwrap();
        assert_eq!(t.label(), Some(&Target::Scalar(0.0)));
        assert_eq!(leafcount_tree(2, &[true; 4]).unwrap().label(), Some(&Target::Scalar(4.0)));
        let bits = [true, false, true, true, false, false, false, true];
        assert_eq!(leafcount_tree(3, &bits).unwrap().label(), Some(&Target::Scalar(4.0)));
        assert!(gen_trees_leafcount(1, 3, 0).is_err());
        assert!(gen_trees_leafcount(7, 3, 0).is_err());
    }

    #[test]
    fn leafcount_targets_cover_all_classes() {
        let gs = gen_trees_leafcount(2, 500, 3).unwrap();
        let mut seen = [0usize; 5];
        for g in &gs {
            seen[g.label().unwrap().class().unwrap()] += 1;
        }
        assert!(seen.iter().all(|&c| c > 60), "{seen:?}");
    }

    #[test]
    fn neighboursmatch_examples() {
        // depth 2: leaves are nodes 3..7; the third leaf (node 5) carries marker 3
        let g = neighboursmatch_tree(2, &[2, 0, 1, 3], &[0, 1, 3, 2], 3).unwrap();
        assert_eq!(g.label(), Some(&Target::Scalar(1.0)));
        assert_eq!(g.features().row(5), &[0., 1., 0., 0., 0., 0., 0., 0., 1., 0.]);
        assert_eq!(g.features().row(0), &[0., 0., 0., 0., 1., 0., 0., 0., 1., 0.]);
        assert_eq!(g.features().row(1), &[0., 0., 0., 0., 1., 0., 0., 0., 0., 1.]);

        for g in gen_trees_neighboursmatch(3, 20, 7).unwrap() {
            let first = first_leaf(3);
            let root_marker = (0..8).find(|&j| g.features().get2(0, 9 + j) == 1.0).unwrap();
            let matches = (first..g.n()).filter(|&v| g.features().get2(v, 9 + root_marker) == 1.0).count();
            assert_eq!(matches, 1);
        }
        let a = gen_trees_neighboursmatch(3, 5, 7).unwrap();
        assert_eq!(a, gen_trees_neighboursmatch(3, 5, 7).unwrap());
    }

    #[test]
    fn trees_are_trees() {
        for g in gen_trees_leafcount(4, 3, 1).unwrap().iter().chain(&gen_trees_neighboursmatch(4, 3, 1).unwrap()) {
            assert_eq!(g.num_edges(), g.n() - 1);
            assert!(g.is_connected());
        }
    }

    #[test]
    fn csl_examples() {
        let gs = gen_csl(CSL_NODES, &CSL_SKIPS, 15, 0).unwrap();
        assert_eq!(gs.len(), 150);
        assert!(gs.iter().all(|g| (0..g.n()).all(|v| g.degree(v) == 4)));
        let pick = |class: f64| gs.iter().find(|g| g.label() == Some(&Target::Scalar(class))).unwrap();
        for c in 1..10 {
            assert!(!wl_distinguishable(pick(0.0), pick(c as f64)).unwrap());
        }
    }

    #[test]
    fn csl_folds_are_stratified() {
        let gs = gen_csl(CSL_NODES, &CSL_SKIPS, 15, 0).unwrap();
        let folds = stratified_folds(&gs, 10, 4).unwrap();
        for f in 0..10 {
            let members: Vec<usize> = (0..150).filter(|&i| folds[i] == f).collect();
            assert_eq!(members.len(), 15);
            let mut classes: Vec<usize> = members.iter().map(|&i| gs[i].label().unwrap().class().unwrap()).collect();
            classes.sort();
            classes.dedup();
            assert!(classes.len() >= 9);
        }
    }

    #[test]
    fn wl_pair_examples() {
        for s in [3, 4] {
            let (a, b) = gen_wl_pair(PairFamily::CycleSplit, s, SeedTree::new(1)).unwrap();
            assert!(!wl_distinguishable(&a, &b).unwrap());
            assert_ne!(a.num_components(), b.num_components());
        }
        assert!(gen_wl_pair(PairFamily::CycleSplit, 2, SeedTree::new(1)).is_err());
        let (a, b) = gen_wl_pair(PairFamily::CslPair, 11, SeedTree::new(1)).unwrap();
        assert!(!wl_distinguishable(&a, &b).unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_deterministic() {
        let spec: DatasetSpec =
            serde_json::from_str(r#"{"name":"trees_leafcount","depth":2,"n_samples":50,"seed":9}"#).unwrap();
        let a = spec.build().unwrap();
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (40, 5, 5));
        let b = spec.build().unwrap();
        assert_eq!(a.test, b.test);
        let s = split_by_fraction((0..100).collect(), [0.6, 0.2, 0.2], 1).unwrap();
        let mut all: Vec<i32> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_by_fraction(vec![1], [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(load_jsonl(&p).unwrap().is_empty());

        let gs = gen_trees_leafcount(2, 4, 0).unwrap();
        write_jsonl(&p, &gs).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), gs);

        let bad = "{\"n\":2,\"edges\":[[0,1]],\"x\":[[1],[1]]}\n{\"n\":2,\"edges\":[[0,1],[1,0]],\"x\":[[1],[1]]}\n";
        std::fs::write(&p, bad).unwrap();
        match load_jsonl(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("{e}"),
        }
        std::fs::write(&p, "{\"n\":1,\"edges\":[],\"x\":[[1]],\"colour\":3}\n").unwrap();
        let msg = load_jsonl(&p).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("colour"), "{msg}");
    }
}
