//! 1-WL colour refinement.
//!
//! Colours are canonicalised by ranking the exact refinement keys
//! `(own colour, sorted neighbour colours)` in lexicographic order, so colour
//! ids are contiguous from 0 and do not depend on node numbering. No hashing
//! is involved.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::graph::AttributedGraph;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Coloring {
    pub colors: Vec<usize>,
    pub round: usize,
    pub histogram: BTreeMap<usize, usize>,
}

impl Coloring {
    /// Canonical colouring from arbitrary labels (ranked by label value).
    pub fn from_labels(labels: &[usize]) -> Self {
        let distinct: BTreeSet<usize> = labels.iter().copied().collect();
        let rank: BTreeMap<usize, usize> = distinct.into_iter().enumerate().map(|(i, l)| (l, i)).collect();
        Self::build(labels.iter().map(|l| rank[l]).collect(), 0)
    }

    pub fn uniform(n: usize) -> Self {
        Self::build(vec![0; n], 0)
    }

    fn build(colors: Vec<usize>, round: usize) -> Self {
        let mut histogram = BTreeMap::new();
        for &c in &colors {
            *histogram.entry(c).or_insert(0) += 1;
        }
        Self {
            colors,
            round,
            histogram,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.histogram.len()
    }

    /// Nodes per colour class.
    pub fn classes(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (v, &c) in self.colors.iter().enumerate() {
            out.entry(c).or_default().push(v);
        }
        out
    }
}

/// One refinement round.
pub fn refine_step(g: &AttributedGraph, c: &Coloring) -> Result<Coloring> {
    if c.colors.len() != g.n() {
        return Err(Error::Invalid(format!(
            "colouring has {} entries for {} nodes",
            c.colors.len(),
            g.n()
        )));
    }
    let keys: Vec<(usize, Vec<usize>)> = (0..g.n())
        .map(|v| {
            let mut nb: Vec<usize> = g.nbrs(v).iter().map(|&u| c.colors[u]).collect();
            nb.sort_unstable();
            (c.colors[v], nb)
        })
        .collect();
    let distinct: BTreeSet<&(usize, Vec<usize>)> = keys.iter().collect();
    let rank: BTreeMap<&(usize, Vec<usize>), usize> =
        distinct.into_iter().enumerate().map(|(i, k)| (k, i)).collect();
    let colors = keys.iter().map(|k| rank[k]).collect();
    Ok(Coloring::build(colors, c.round + 1))
}

/// Refines until the partition stops splitting (at most `n` rounds).
pub fn stable_coloring(g: &AttributedGraph, init: Option<&[usize]>) -> Result<Coloring> {
    let mut c = match init {
        Some(labels) if labels.len() != g.n() => {
            return Err(Error::Invalid(format!(
                "initial labels have {} entries for {} nodes",
                labels.len(),
                g.n()
            )))
        }
        Some(labels) => Coloring::from_labels(labels),
        None => Coloring::uniform(g.n()),
    };
    loop {
        let next = refine_step(g, &c)?;
        if next.num_classes() == c.num_classes() {
            return Ok(Coloring { round: c.round, ..next });
        }
        c = next;
    }
}

/// Discrete labels read from one feature column (exact float bit patterns).
pub fn feature_labels(g: &AttributedGraph, column: usize) -> Result<Vec<usize>> {
    if column >= g.feature_dim() {
        return Err(Error::Index(format!("feature column {column} of {}", g.feature_dim())));
    }
    let vals: Vec<u64> = (0..g.n()).map(|v| g.features().get2(v, column).to_bits()).collect();
    let distinct: BTreeSet<u64> = vals.iter().copied().collect();
    let rank: BTreeMap<u64, usize> = distinct.into_iter().enumerate().map(|(i, b)| (b, i)).collect();
    Ok(vals.iter().map(|b| rank[b]).collect())
}

/// Stable colouring of the disjoint union `g ⊔ h`, split back per graph.
pub fn joint_stable_coloring(
    g: &AttributedGraph,
    h: &AttributedGraph,
) -> Result<(Coloring, Coloring)> {
    let union = disjoint_union_structure(g, h)?;
    let c = stable_coloring(&union, None)?;
    let (cg, ch) = c.colors.split_at(g.n());
    Ok((Coloring::build(cg.to_vec(), c.round), Coloring::build(ch.to_vec(), c.round)))
}

fn disjoint_union_structure(g: &AttributedGraph, h: &AttributedGraph) -> Result<AttributedGraph> {
    let mut edges = g.edges().to_vec();
    edges.extend(h.edges().iter().map(|&(u, v)| (u + g.n(), v + g.n())));
    AttributedGraph::unlabeled(g.n() + h.n(), edges)
}

/// True iff 1-WL (uniform initial colours) tells `g` and `h` apart.
pub fn wl_distinguishable(g: &AttributedGraph, h: &AttributedGraph) -> Result<bool> {
    if g.n() != h.n() {
        return Ok(true);
    }
    let (cg, ch) = joint_stable_coloring(g, h)?;
    Ok(cg.histogram != ch.histogram)
}

/// Induced subgraph of every colour class.
pub fn color_induced_subgraphs(
    g: &AttributedGraph,
    c: &Coloring,
) -> Result<BTreeMap<usize, AttributedGraph>> {
    if c.colors.len() != g.n() {
        return Err(Error::Invalid("colouring length differs from n".into()));
    }
    c.classes()
        .into_iter()
        .map(|(color, nodes)| Ok((color, g.induced_subgraph(&nodes)?.graph)))
        .collect()
}

/// For a pair with a shared stable colouring, the same-colour induced
/// subgraphs side by side. Colours present in only one graph pair with an
/// empty graph.
pub fn paired_color_subgraphs(
    g: &AttributedGraph,
    h: &AttributedGraph,
) -> Result<Vec<(usize, AttributedGraph, AttributedGraph)>> {
    let (cg, ch) = joint_stable_coloring(g, h)?;
    let mut sg = color_induced_subgraphs(g, &cg)?;
    let mut sh = color_induced_subgraphs(h, &ch)?;
    let colors: BTreeSet<usize> = sg.keys().chain(sh.keys()).copied().collect();
    let empty = || AttributedGraph::unlabeled(0, vec![]);
    colors
        .into_iter()
        .map(|c| {
            let a = sg.remove(&c).map_or_else(empty, Ok)?;
            let b = sh.remove(&c).map_or_else(empty, Ok)?;
            Ok((c, a, b))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cycle(n: usize) -> AttributedGraph {
        AttributedGraph::unlabeled(n, (0..n).map(|i| (i, (i + 1) % n)).collect()).unwrap()
    }

    fn path(n: usize) -> AttributedGraph {
        AttributedGraph::unlabeled(n, (1..n).map(|i| (i - 1, i)).collect()).unwrap()
    }

    fn star(leaves: usize) -> AttributedGraph {
        AttributedGraph::unlabeled(leaves + 1, (1..=leaves).map(|i| (0, i)).collect()).unwrap()
    }

    fn k3() -> AttributedGraph {
        cycle(3)
    }

    #[test]
    fn refine_step_examples() {
        let c6 = cycle(6);
        let step = refine_step(&c6, &Coloring::uniform(6)).unwrap();
        assert_eq!(step.num_classes(), 1);

        let s3 = star(3);
        let step = refine_step(&s3, &Coloring::uniform(4)).unwrap();
        assert_eq!(step.num_classes(), 2);
        assert_eq!(step.histogram.values().copied().collect::<BTreeSet<_>>(), BTreeSet::from([1, 3]));
        assert!(step.colors[1] == step.colors[2] && step.colors[2] == step.colors[3]);

        let p3 = path(3);
        let step = refine_step(&p3, &Coloring::uniform(3)).unwrap();
        assert_eq!(step.colors[0], step.colors[2]);
        assert_ne!(step.colors[0], step.colors[1]);
    }

    #[test]
    fn stable_coloring_examples() {
        assert_eq!(stable_coloring(&k3(), None).unwrap().num_classes(), 1);
        let p4 = stable_coloring(&path(4), None).unwrap();
        assert_eq!(p4.num_classes(), 2);
        assert_eq!(p4.colors[0], p4.colors[3]);
        assert_eq!(p4.colors[1], p4.colors[2]);
        assert!(stable_coloring(&path(4), Some(&[0, 1])).is_err());
    }

    #[test]
    fn distinguishability_examples() {
        let two_c3 = AttributedGraph::unlabeled(6, vec![(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]).unwrap();
        assert!(!wl_distinguishable(&cycle(6), &two_c3).unwrap());
        assert!(wl_distinguishable(&k3(), &path(3)).unwrap());
        let g = path(5);
        let h = g.permute(&[3, 0, 4, 1, 2]).unwrap();
        assert!(!wl_distinguishable(&g, &h).unwrap());
    }

    #[test]
    fn color_induced_subgraph_examples() {
        let c6 = cycle(6);
        let subs = color_induced_subgraphs(&c6, &stable_coloring(&c6, None).unwrap()).unwrap();
        assert_eq!(subs.len(), 1);
        assert_eq!(subs.values().next().unwrap(), &c6);

        let s3 = star(3);
        let subs = color_induced_subgraphs(&s3, &stable_coloring(&s3, None).unwrap()).unwrap();
        let mut sizes: Vec<(usize, usize)> = subs.values().map(|g| (g.n(), g.num_edges())).collect();
        sizes.sort();
        assert_eq!(sizes, vec![(1, 0), (3, 0)]);

        let p4 = path(4);
        let col = stable_coloring(&p4, None).unwrap();
        let subs = color_induced_subgraphs(&p4, &col).unwrap();
        let ends = &subs[&col.colors[0]];
        assert_eq!((ends.n(), ends.num_edges()), (2, 0));
    }

    #[test]
    fn feature_labels_seed_refinement() {
        let g = path(3)
            .with_features(crate::Tensor::new(vec![3, 1], vec![1.0, 1.0, 2.0]).unwrap())
            .unwrap();
        let labels = feature_labels(&g, 0).unwrap();
        assert_eq!(labels, vec![0, 0, 1]);
        assert_eq!(stable_coloring(&g, Some(&labels)).unwrap().num_classes(), 3);
    }

    fn arb_graph() -> impl Strategy<Value = AttributedGraph> {
        (1usize..10).prop_flat_map(|n| {
            prop::collection::btree_set((0..n, 0..n), 0..25).prop_map(move |pairs| {
                let set: BTreeSet<(usize, usize)> =
                    pairs.into_iter().filter(|(u, v)| u != v).map(|(u, v)| (u.min(v), u.max(v))).collect();
                AttributedGraph::unlabeled(n, set.into_iter().collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn refinement_is_monotone_and_terminates(g in arb_graph()) {
            let mut c = Coloring::uniform(g.n());
            for _ in 0..=g.n() {
                let next = refine_step(&g, &c).unwrap();
                prop_assert!(next.num_classes() >= c.num_classes());
                c = next;
            }
            let stable = stable_coloring(&g, None).unwrap();
            prop_assert!(stable.round <= g.n());
            prop_assert!(stable.num_classes() >= 1 && stable.num_classes() <= g.n());
            prop_assert_eq!(stable.histogram.values().sum::<usize>(), g.n());
        }

        #[test]
        fn stable_histogram_is_permutation_invariant(g in arb_graph(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..g.n()).collect();
            perm.shuffle(&mut crate::rng::SeedTree::new(seed).rng());
            let h = g.permute(&perm).unwrap();
            prop_assert_eq!(
                stable_coloring(&g, None).unwrap().histogram,
                stable_coloring(&h, None).unwrap().histogram
            );
        }
    }
}
