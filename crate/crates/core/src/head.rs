//! Pieces shared by both branches: the MLP classifier head and the
//! representation/prediction pair a branch hands to its discriminator.

use rand::Rng;

use crate::autodiff::{Bound, Linear, ParamStore, Var};

/// Graph-level output of one branch for a batch.
#[derive(Debug, Clone, Copy)]
pub struct BranchOutput<'t> {
    /// B×hidden graph representations.
    pub repr: Var<'t>,
    /// B×C unnormalised class scores.
    pub logits: Var<'t>,
}

impl<'t> BranchOutput<'t> {
    pub fn probs(&self) -> Var<'t> {
        self.logits.softmax()
    }
}

/// `linear(hidden→hidden) → relu → linear(hidden→C)`.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    hidden: Linear,
    out: Linear,
}

impl ClassifierHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{prefix}.0"), hidden_dim, hidden_dim, rng),
            out: Linear::new(store, &format!("{prefix}.1"), hidden_dim, num_classes, rng),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, z: Var<'t>) -> Var<'t> {
        self.out.forward(p, self.hidden.forward(p, z).relu())
    }

    /// Zeroes every weight so the head predicts the uniform distribution.
    pub fn zero(&self, store: &mut ParamStore) {
        self.hidden.zero(store);
        self.out.zero(store);
    }

    pub fn num_classes(&self) -> usize {
        self.out.out_dim
    }
}
