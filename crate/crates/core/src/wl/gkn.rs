use rand::Rng;

use super::WlFeatureVector;
use crate::autodiff::{softmax_rows, Bound, Linear, ParamStore, Tape, Tensor, Var};
use crate::head::{BranchOutput, ClassifierHead};

/// Trainable head over the explicit WL feature map:
/// `p = softmax(classifier(relu(embedding(fv) + zeta)))`.
#[derive(Debug, Clone)]
pub struct GknBranch {
    pub params: ParamStore,
    embedding: Linear,
    head: ClassifierHead,
    vocab_size: usize,
    hidden_dim: usize,
}

impl GknBranch {
    pub fn new<R: Rng + ?Sized>(vocab_size: usize, hidden_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        let mut params = ParamStore::new();
        let embedding = Linear::new(&mut params, "gkn.embedding", vocab_size, hidden_dim, rng);
        let head = ClassifierHead::new(&mut params, "gkn.head", hidden_dim, num_classes, rng);
        Self {
            params,
            embedding,
            head,
            vocab_size,
            hidden_dim,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn zero_head(&mut self) {
        self.head.zero(&mut self.params);
    }

    /// Dense B×vocab matrix of feature counts.
    pub fn densify(&self, features: &[&WlFeatureVector]) -> Tensor {
        let mut out = Tensor::zeros(features.len(), self.vocab_size);
        for (i, fv) in features.iter().enumerate() {
            fv.write_dense(out.row_mut(i));
        }
        out
    }

    /// Batched forward over densified features. `zeta`, when given, is a
    /// B×hidden perturbation added after the embedding layer.
    pub fn forward<'t>(&self, p: &Bound<'t>, features: Var<'t>, zeta: Option<Var<'t>>) -> BranchOutput<'t> {
        assert_eq!(
            features.shape().1,
            self.vocab_size,
            "GKN input width {} does not match vocabulary size {}",
            features.shape().1,
            self.vocab_size
        );
        let mut e = self.embedding.forward(p, features);
        if let Some(z) = zeta {
            e = e.add(z);
        }
        let repr = e.relu();
        BranchOutput {
            repr,
            logits: self.head.forward(p, repr),
        }
    }

    /// Class probabilities for one feature vector. Panics unless `zeta` is 1×hidden.
    pub fn predict(&self, fv: &WlFeatureVector, zeta: Option<&Tensor>) -> Tensor {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(self.densify(&[fv]));
        let zeta = zeta.map(|z| {
            assert_eq!(
                z.shape(),
                (1, self.hidden_dim),
                "zeta shape mismatch: got {:?}, expected {:?}",
                z.shape(),
                (1, self.hidden_dim)
            );
            tape.constant(z.clone())
        });
        let out = self.forward(&p, x, zeta);
        let probs = softmax_rows(&out.logits.value());
        probs
    }
}
