//! Unsupervised domain-adaptive graph classification with a dual-branch
//! encoder (a GIN branch and a Weisfeiler-Lehman subtree-kernel branch) and
//! per-branch adversarial perturbation learning.

pub mod autodiff;
pub mod graph;
pub mod gin;
pub mod head;
pub mod wl;
pub mod adversarial;
pub mod trainer;
pub mod synthetic;
pub mod experiment;
