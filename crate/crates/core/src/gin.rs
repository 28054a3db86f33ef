//! Implicit-topology branch: a two-layer GIN encoder over one-hot node
//! labels, sum readout and an MLP classifier head.
//!
//! Each layer computes `h_v = MLP((1 + eps)·h_v + Σ_{u∈N(v)} h_u)` with a
//! two-layer MLP. Batches are disjoint unions of graphs, so batched and
//! per-graph evaluation agree exactly.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{softmax_rows, Bound, Linear, ParamStore, SparseMatrix, Tape, Tensor, Var};
use crate::graph::Graph;
use crate::head::{BranchOutput, ClassifierHead};

pub const GIN_LAYERS: usize = 2;

/// Disjoint union of a batch of graphs with one-hot node features.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    num_graphs: usize,
    node_offsets: Vec<usize>,
    adjacency: Rc<SparseMatrix>,
    segments: Rc<[usize]>,
    features: Tensor,
}

impl GraphBatch {
    pub fn new(graphs: &[&Graph], alphabet_size: usize) -> Self {
        let total: usize = graphs.iter().map(|g| g.node_count()).sum();
        let mut node_offsets = Vec::with_capacity(graphs.len() + 1);
        let mut triplets = Vec::new();
        let mut segments = Vec::with_capacity(total);
        let mut features = Tensor::zeros(total, alphabet_size);
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            node_offsets.push(offset);
            for &(u, v) in g.edges() {
                triplets.push((offset + u, offset + v, 1.0));
                triplets.push((offset + v, offset + u, 1.0));
            }
            for (v, &label) in g.node_labels().iter().enumerate() {
                assert!(
                    (label as usize) < alphabet_size,
                    "node label {label} outside alphabet of size {alphabet_size}"
                );
                features.set(offset + v, label as usize, 1.0);
                segments.push(gi);
            }
            offset += g.node_count();
        }
        node_offsets.push(offset);
        Self {
            num_graphs: graphs.len(),
            node_offsets,
            adjacency: Rc::new(SparseMatrix::from_triplets(total, total, &triplets)),
            segments: segments.into(),
            features,
        }
    }

    pub fn num_graphs(&self) -> usize {
        self.num_graphs
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    /// Node rows of graph `i` are `node_range(i)`.
    pub fn node_range(&self, i: usize) -> std::ops::Range<usize> {
        self.node_offsets[i]..self.node_offsets[i + 1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }
}

#[derive(Debug, Clone)]
struct GinLayer {
    first: Linear,
    second: Linear,
}

#[derive(Debug, Clone)]
pub struct GinEncoder {
    layers: Vec<GinLayer>,
    /// Self-weight in `(1 + eps)·h_v`; fixed, not learned.
    eps_gin: f64,
    input_dim: usize,
    hidden_dim: usize,
}

impl GinEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..GIN_LAYERS)
            .map(|l| {
                let in_dim = if l == 0 { input_dim } else { hidden_dim };
                GinLayer {
                    first: Linear::new(store, &format!("{prefix}.layer{l}.0"), in_dim, hidden_dim, rng),
                    second: Linear::new(store, &format!("{prefix}.layer{l}.1"), hidden_dim, hidden_dim, rng),
                }
            })
            .collect();
        Self {
            layers,
            eps_gin: 0.0,
            input_dim,
            hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    /// Returns `(node embeddings N×hidden, graph representations B×hidden)`.
    pub fn forward<'t>(&self, p: &Bound<'t>, batch: &GraphBatch, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        assert_eq!(
            x.shape(),
            (batch.num_nodes(), self.input_dim),
            "GIN input shape mismatch: got {:?}, expected {:?}",
            x.shape(),
            (batch.num_nodes(), self.input_dim)
        );
        let mut h = x;
        for layer in &self.layers {
            let agg = h.sparse_left_matmul(&batch.adjacency);
            let combined = h.scale(1.0 + self.eps_gin).add(agg);
            h = layer.second.forward(p, layer.first.forward(p, combined).relu());
        }
        let z = h.segment_sum(&batch.segments, batch.num_graphs);
        (h, z)
    }
}

/// GIN encoder plus classifier head, with its own parameters.
#[derive(Debug, Clone)]
pub struct GinBranch {
    pub params: ParamStore,
    encoder: GinEncoder,
    head: ClassifierHead,
}

impl GinBranch {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let encoder = GinEncoder::new(&mut params, "gin", input_dim, hidden_dim, rng);
        let head = ClassifierHead::new(&mut params, "gin.head", hidden_dim, num_classes, rng);
        Self {
            params,
            encoder,
            head,
        }
    }

    pub fn encoder(&self) -> &GinEncoder {
        &self.encoder
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    /// Batched forward. `delta`, when given, is an N×d perturbation added to
    /// the one-hot input features.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        tape: &'t Tape,
        batch: &GraphBatch,
        delta: Option<Var<'t>>,
    ) -> BranchOutput<'t> {
        let mut x = tape.constant(batch.features.clone());
        if let Some(d) = delta {
            x = x.add(d);
        }
        let (_, z) = self.encoder.forward(p, batch, x);
        BranchOutput {
            repr: z,
            logits: self.head.forward(p, z),
        }
    }

    /// Node embeddings and graph representation of a single graph.
    ///
    /// Panics if `delta` is not `|V|×d`.
    pub fn encode(&self, g: &Graph, delta: Option<&Tensor>) -> (Tensor, Tensor) {
        let batch = GraphBatch::new(&[g], self.encoder.input_dim);
        if let Some(d) = delta {
            assert_eq!(
                d.shape(),
                (g.node_count(), self.encoder.input_dim),
                "delta shape mismatch: got {:?}, expected {:?}",
                d.shape(),
                (g.node_count(), self.encoder.input_dim)
            );
        }
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let mut x = tape.constant(batch.features.clone());
        if let Some(d) = delta {
            x = x.add(tape.constant(d.clone()));
        }
        let (h, z) = self.encoder.forward(&p, &batch, x);
        let out = (h.value().clone(), z.value().clone());
        out
    }

    /// Class probabilities `softmax(H(z))` for a 1×hidden (or B×hidden) representation.
    pub fn predict(&self, z: &Tensor) -> Tensor {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let logits = self.head.forward(&p, tape.constant(z.clone()));
        let out = softmax_rows(&logits.value());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn branch(seed: u64) -> GinBranch {
        GinBranch::new(3, 64, 2, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn triangle_with_tail() -> Graph {
        Graph::new(4, [(0, 1), (1, 2), (0, 2), (2, 3)], vec![0, 1, 2, 0], Some(1)).unwrap()
    }

    #[test]
    fn zero_delta_matches_unperturbed() {
        let b = branch(1);
        let g = triangle_with_tail();
        let (h0, z0) = b.encode(&g, None);
        let (h1, z1) = b.encode(&g, Some(&Tensor::zeros(4, 3)));
        assert_eq!(h0, h1);
        assert_eq!(z0, z1);
    }

    #[test]
    fn output_width_is_hidden_dim() {
        let b = branch(2);
        let (h, z) = b.encode(&triangle_with_tail(), None);
        assert_eq!(h.shape(), (4, 64));
        assert_eq!(z.shape(), (1, 64));
    }

    #[test]
    fn isolated_node_sees_only_itself() {
        let b = branch(3);
        let g = Graph::new(1, [], vec![2], None).unwrap();
        let (h, _) = b.encode(&g, None);
        // MLP((1 + 0)·x) evaluated by hand
        let tape = Tape::new();
        let p = b.params.bind(&tape, false);
        let mut x = tape.constant(Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]));
        for layer in &b.encoder.layers {
            x = layer.second.forward(&p, layer.first.forward(&p, x).relu());
        }
        assert_eq!(h, *x.value());
    }

    #[test]
    #[should_panic(expected = "delta shape mismatch")]
    fn wrong_delta_shape_panics() {
        branch(4).encode(&triangle_with_tail(), Some(&Tensor::zeros(3, 3)));
    }

    #[test]
    fn zero_head_predicts_uniform() {
        let mut b = branch(5);
        b.zero_head();
        let (_, z) = b.encode(&triangle_with_tail(), None);
        assert_eq!(b.predict(&z).data(), &[0.5, 0.5]);
    }

    #[test]
    fn batched_forward_matches_single_graphs() {
        let b = branch(6);
        let g1 = triangle_with_tail();
        let g2 = Graph::new(2, [(0, 1)], vec![1, 1], Some(0)).unwrap();
        let batch = GraphBatch::new(&[&g1, &g2], 3);
        let tape = Tape::new();
        let p = b.params.bind(&tape, false);
        let out = b.forward(&p, &tape, &batch, None);
        let z = out.repr.value().clone();
        assert_eq!(z.row(0), b.encode(&g1, None).1.row(0));
        assert_eq!(z.row(1), b.encode(&g2, None).1.row(0));
    }

    #[test]
    fn disconnected_component_leaves_existing_nodes_unchanged() {
        let b = branch(7);
        let g = triangle_with_tail();
        let extra = Graph::new(3, [(0, 1), (1, 2)], vec![1, 2, 0], None).unwrap();
        let (h, _) = b.encode(&g, None);
        let (hu, _) = b.encode(&g.disjoint_union(&extra), None);
        for v in 0..g.node_count() {
            assert_eq!(h.row(v), hu.row(v));
        }
    }

    #[test]
    fn classification_gradient_reaches_delta() {
        let b = branch(8);
        let g = triangle_with_tail();
        let batch = GraphBatch::new(&[&g], 3);
        let tape = Tape::new();
        let p = b.params.bind(&tape, false);
        let delta = tape.leaf(Tensor::zeros(4, 3));
        let out = b.forward(&p, &tape, &batch, Some(delta));
        let grads = tape.backward(out.logits.softmax_cross_entropy(&[1]));
        assert!(grads.wrt(delta).frobenius_norm() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn readout_is_permutation_invariant(
            n in 1usize..9,
            mask in prop::collection::vec(any::<bool>(), 36),
            labels in prop::collection::vec(0u32..3, 9),
            seed in any::<u64>(),
        ) {
            let pairs: Vec<_> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
            let edges: Vec<_> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(&e, _)| e).collect();
            let g = Graph::new(n, edges, labels[..n].to_vec(), None).unwrap();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = branch(seed % 7);
            let (h, z) = b.encode(&g, None);
            let (hp, zp) = b.encode(&g.permuted(&perm), None);
            for (a, c) in z.data().iter().zip(zp.data()) {
                prop_assert!((a - c).abs() <= 1e-9);
            }
            for (v, &pv) in perm.iter().enumerate() {
                for (a, c) in h.row(v).iter().zip(hp.row(pv)) {
                    prop_assert!((a - c).abs() <= 1e-9);
                }
            }
            let probs = b.predict(&z);
            prop_assert!((probs.data().iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }
}
