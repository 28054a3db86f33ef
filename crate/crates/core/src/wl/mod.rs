//! Explicit-topology branch: Weisfeiler-Lehman label refinement, the subtree
//! kernel and its explicit feature map, a trainable head over the feature map,
//! and kernel nearest-neighbour pseudo-labelling.

mod gkn;
mod similarity;

use std::collections::{BTreeSet, HashMap};

pub use gkn::GknBranch;
pub use similarity::{
    gram_matrix, normalized_kernel, pseudo_label, pseudo_label_from_similarities, pseudo_label_graphs,
    write_gram_csv,
};

use crate::graph::Graph;

pub const DEFAULT_WL_DEPTH: usize = 2;

/// Label given to nodes whose subtree signature was never seen while fitting.
pub const UNK: u32 = u32::MAX;

#[derive(Debug, thiserror::Error)]
pub enum WlError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

type Signature = (usize, u32, Vec<u32>);

/// Shared WL compression table, fitted once and then frozen.
///
/// Iteration 0 labels are the raw node labels. The label of a node at
/// iteration `i` is the compressed form of its iteration `i-1` label together
/// with the sorted multiset of its neighbours' iteration `i-1` labels. Within
/// one iteration new signatures are numbered in lexicographic order, so the
/// table depends only on the set of fitted graphs.
#[derive(Debug, Clone)]
pub struct WlLabeler {
    depth: usize,
    table: HashMap<Signature, u32>,
    /// `(iteration, label)` → feature column. The UNK column comes last.
    columns: HashMap<(usize, u32), usize>,
}

impl WlLabeler {
    pub fn fit<'a>(graphs: impl IntoIterator<Item = &'a Graph>, depth: usize) -> Self {
        let graphs: Vec<&Graph> = graphs.into_iter().collect();
        let mut columns = HashMap::new();
        let mut current: Vec<Vec<u32>> = graphs.iter().map(|g| g.node_labels().to_vec()).collect();
        let raw: BTreeSet<u32> = current.iter().flatten().copied().collect();
        for label in raw {
            let next = columns.len();
            columns.insert((0, label), next);
        }
        let mut table = HashMap::new();
        let mut fresh = 0u32;
        for iteration in 1..=depth {
            let sigs: Vec<Vec<Signature>> = graphs
                .iter()
                .zip(&current)
                .map(|(g, labels)| signatures(g, labels, iteration))
                .collect();
            let unique: BTreeSet<&Signature> = sigs.iter().flatten().collect();
            for sig in unique {
                table.insert(sig.clone(), fresh);
                columns.insert((iteration, fresh), columns.len());
                fresh += 1;
            }
            current = sigs
                .iter()
                .map(|gs| gs.iter().map(|s| table[s]).collect())
                .collect();
        }
        Self { depth, table, columns }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Number of feature columns, including the trailing UNK column.
    pub fn vocab_size(&self) -> usize {
        self.columns.len() + 1
    }

    pub fn unk_column(&self) -> usize {
        self.columns.len()
    }

    /// Node labels for iterations `0..=depth`. Unseen signatures map to [`UNK`].
    pub fn refine(&self, g: &Graph) -> Vec<Vec<u32>> {
        let mut out = Vec::with_capacity(self.depth + 1);
        out.push(g.node_labels().to_vec());
        for iteration in 1..=self.depth {
            let prev = out.last().expect("iteration 0 present");
            let next = signatures(g, prev, iteration)
                .iter()
                .map(|s| self.table.get(s).copied().unwrap_or(UNK))
                .collect();
            out.push(next);
        }
        out
    }

    /// Histogram of labels over all iterations.
    pub fn features(&self, g: &Graph) -> WlFeatureVector {
        let mut counts: HashMap<usize, u32> = HashMap::new();
        for (iteration, labels) in self.refine(g).iter().enumerate() {
            for &label in labels {
                let col = self
                    .columns
                    .get(&(iteration, label))
                    .copied()
                    .unwrap_or(self.unk_column());
                *counts.entry(col).or_default() += 1;
            }
        }
        let mut entries: Vec<(usize, u32)> = counts.into_iter().collect();
        entries.sort_unstable();
        WlFeatureVector { entries }
    }
}

fn signatures(g: &Graph, labels: &[u32], iteration: usize) -> Vec<Signature> {
    (0..g.node_count())
        .map(|v| {
            let mut neigh: Vec<u32> = g.neighbors(v).iter().map(|&u| labels[u]).collect();
            neigh.sort_unstable();
            (iteration, labels[v], neigh)
        })
        .collect()
}

/// Sparse histogram of WL labels across iterations `0..=depth`, keyed by
/// feature column. Inner products of these vectors are WL subtree kernel values.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WlFeatureVector {
    entries: Vec<(usize, u32)>,
}

impl WlFeatureVector {
    /// `(column, count)` pairs sorted by column; every count is positive.
    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| u64::from(c)).sum()
    }

    pub fn dot(&self, other: &WlFeatureVector) -> u64 {
        let (mut i, mut j, mut acc) = (0, 0, 0u64);
        while i < self.entries.len() && j < other.entries.len() {
            let (ca, na) = self.entries[i];
            let (cb, nb) = other.entries[j];
            match ca.cmp(&cb) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    acc += u64::from(na) * u64::from(nb);
                    i += 1;
                    j += 1;
                }
            }
        }
        acc
    }

    pub fn write_dense(&self, row: &mut [f64]) {
        row.fill(0.0);
        for &(col, count) in &self.entries {
            row[col] = f64::from(count);
        }
    }
}

/// WL subtree kernel `Σ_{i=0..depth} #{(u1, u2) : label_i(u1) = label_i(u2)}`
/// with a table fitted on the two graphs.
pub fn wl_kernel(g1: &Graph, g2: &Graph, depth: usize) -> u64 {
    let labeler = WlLabeler::fit([g1, g2], depth);
    labeler.features(g1).dot(&labeler.features(g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    fn star3(label: u32) -> Graph {
        Graph::new(4, [(0, 1), (0, 2), (0, 3)], vec![label; 4], None).unwrap()
    }

    #[test]
    fn single_node_keeps_its_label_class() {
        let g = Graph::new(1, [], vec![4], None).unwrap();
        let lab = WlLabeler::fit([&g], 3);
        let levels = lab.refine(&g);
        assert_eq!(levels.len(), 4);
        assert_eq!(levels[0], vec![4]);
        // one node, one class per iteration
        assert!(levels.iter().all(|l| l.len() == 1));
        assert_eq!(lab.features(&g).total(), 4);
    }

    #[test]
    fn star_center_differs_from_leaves() {
        let g = star3(0);
        let lab = WlLabeler::fit([&g], 1);
        let levels = lab.refine(&g);
        assert_eq!(levels[0], vec![0, 0, 0, 0]);
        let it1 = &levels[1];
        assert_ne!(it1[0], it1[1]);
        assert_eq!(it1[1], it1[2]);
        assert_eq!(it1[2], it1[3]);
    }

    #[test]
    fn kernel_examples() {
        let a = Graph::new(1, [], vec![7], None).unwrap();
        assert_eq!(wl_kernel(&a, &a.clone(), 0), 1);
        let e = Graph::new(2, [(0, 1)], vec![3, 3], None).unwrap();
        assert_eq!(wl_kernel(&e, &e, 1), 8);
        let x = Graph::new(3, [(0, 1), (1, 2)], vec![0, 1, 0], None).unwrap();
        let y = Graph::new(3, [(0, 1), (1, 2)], vec![2, 3, 2], None).unwrap();
        assert_eq!(wl_kernel(&x, &y, 2), 0);
    }

    #[test]
    fn unseen_labels_bucket_to_unk() {
        let train = Graph::new(2, [(0, 1)], vec![0, 0], None).unwrap();
        let lab = WlLabeler::fit([&train], 2);
        let novel = Graph::new(3, [(0, 1), (1, 2)], vec![5, 5, 5], None).unwrap();
        let fv = lab.features(&novel);
        assert_eq!(fv.entries(), &[(lab.unk_column(), 9)]);
    }

    fn random_graph(n: usize, mask: &[bool], labels: &[u32]) -> Graph {
        let pairs: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
        let edges: Vec<_> = pairs.iter().zip(mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
        Graph::new(n, edges, labels[..n].to_vec(), None).unwrap()
    }

    proptest! {
        #[test]
        fn isomorphic_graphs_share_label_multisets(
            n in 1usize..8,
            mask in prop::collection::vec(any::<bool>(), 28),
            labels in prop::collection::vec(0u32..3, 8),
            seed in any::<u64>(),
        ) {
            let g = random_graph(n, &mask, &labels);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let h = g.permuted(&perm);
            let lab = WlLabeler::fit([&g, &h], 3);
            for (a, b) in lab.refine(&g).into_iter().zip(lab.refine(&h)) {
                let (mut a, mut b) = (a, b);
                a.sort_unstable();
                b.sort_unstable();
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(lab.features(&g), lab.features(&h));
        }

        #[test]
        fn feature_counts_partition_nodes(
            n in 0usize..8,
            mask in prop::collection::vec(any::<bool>(), 28),
            labels in prop::collection::vec(0u32..4, 8),
            depth in 0usize..4,
        ) {
            let g = random_graph(n, &mask, &labels);
            let fv = WlLabeler::fit([&g], depth).features(&g);
            prop_assert_eq!(fv.total(), (n * (depth + 1)) as u64);
            prop_assert!(fv.entries().iter().all(|&(_, c)| c > 0));
            // self-kernel lower bound, tight iff all labels distinct per iteration
            let k = fv.dot(&fv);
            prop_assert!(k >= (n * (depth + 1)) as u64);
            prop_assert_eq!(k == (n * (depth + 1)) as u64, fv.entries().iter().all(|&(_, c)| c == 1));
        }
    }
}
