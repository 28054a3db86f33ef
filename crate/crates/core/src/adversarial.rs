//! Conditional domain discriminators, the domain-adversarial objective and
//! the normalised-gradient perturbation update.
//!
//! The discriminator sees `[z ‖ p]`, a branch's graph representation
//! concatenated with its class probabilities, and outputs the logit of
//! "source". The domain objective is
//!
//! ```text
//! L_DA = mean_s ln D(z_s + perturbation, p_s) + mean_t ln(1 - D(z_t, p_t))
//! ```
//!
//! which the discriminator maximises. Each source graph owns a persistent
//! perturbation that moves by `δ ← δ - ε·φ/‖φ‖_F`, with `φ = ∇_δ ln D`, and is
//! then projected back onto the Frobenius ball of radius `ε`.

use rand::Rng;

use crate::autodiff::{
    concat_cols, Adam, AdamConfig, AutodiffError, Bound, Checkpoint, Linear, ParamStore, Tensor, Var,
};

/// Gradients below this Frobenius norm leave the perturbation untouched.
pub const MIN_GRADIENT_NORM: f64 = 1e-12;

/// `linear(repr+C → hidden) → relu → linear(hidden → 1)`, read through a sigmoid.
#[derive(Debug, Clone)]
pub struct DomainDiscriminator {
    pub params: ParamStore,
    adam: Adam,
    hidden: Linear,
    out: Linear,
}

impl DomainDiscriminator {
    pub fn new<R: Rng + ?Sized>(
        prefix: &str,
        repr_dim: usize,
        num_classes: usize,
        hidden_dim: usize,
        optimizer: AdamConfig,
        rng: &mut R,
    ) -> Self {
        let mut params = ParamStore::new();
        let hidden = Linear::new(&mut params, &format!("{prefix}.0"), repr_dim + num_classes, hidden_dim, rng);
        let out = Linear::new(&mut params, &format!("{prefix}.1"), hidden_dim, 1, rng);
        let adam = Adam::new(optimizer, &params);
        Self {
            params,
            adam,
            hidden,
            out,
        }
    }

    /// B×1 logits of `D([repr ‖ probs])`.
    pub fn logits<'t>(&self, p: &Bound<'t>, repr: Var<'t>, probs: Var<'t>) -> Var<'t> {
        let input = concat_cols(&[repr, probs]);
        self.out.forward(p, self.hidden.forward(p, input).relu())
    }

    /// Gradient ascent on the domain objective: `grads` are `∂L_DA/∂θ_d`.
    pub fn ascend(&mut self, grads: &[Tensor]) -> Result<(), AutodiffError> {
        self.adam.ascend(&mut self.params, grads)
    }
}

/// `mean(ln σ(source)) + mean(ln(1 - σ(target)))` over B×1 discriminator logits.
///
/// Panics if either batch is empty.
pub fn domain_loss<'t>(source_logits: Var<'t>, target_logits: Var<'t>) -> Var<'t> {
    assert!(source_logits.shape().0 > 0, "domain_loss: empty source batch");
    assert!(target_logits.shape().0 > 0, "domain_loss: empty target batch");
    let source_term = source_logits.log_sigmoid().mean();
    let target_term = target_logits.neg().log_sigmoid().mean();
    source_term.add(target_term)
}

/// Result of one perturbation update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Frobenius length of the raw step, `None` when the gradient was degenerate.
    pub raw_step_norm: Option<f64>,
    /// Norm after projection.
    pub norm: f64,
}

/// Rescales `t` onto the ball of radius `epsilon` if it lies outside.
/// Guarantees `‖t‖_F ≤ ε` in floating point.
pub fn project_to_ball(t: &mut Tensor, epsilon: f64) {
    let norm = t.frobenius_norm();
    assert!(norm.is_finite(), "cannot project a non-finite perturbation");
    if norm <= epsilon {
        return;
    }
    let mut scale = epsilon / norm;
    loop {
        let candidate = t.scale(scale);
        if candidate.frobenius_norm() <= epsilon {
            *t = candidate;
            return;
        }
        scale *= 1.0 - f64::EPSILON;
    }
}

/// `δ ← proj(δ - ε·φ/‖φ‖_F)`; a no-op when `‖φ‖_F < MIN_GRADIENT_NORM` or
/// when φ is not finite.
pub fn perturbation_step(current: &mut Tensor, grad: &Tensor, epsilon: f64) -> StepReport {
    assert_eq!(
        current.shape(),
        grad.shape(),
        "perturbation/gradient shape mismatch: {:?} vs {:?}",
        current.shape(),
        grad.shape()
    );
    let gnorm = grad.frobenius_norm();
    if !(gnorm >= MIN_GRADIENT_NORM && gnorm.is_finite()) {
        return StepReport {
            raw_step_norm: None,
            norm: current.frobenius_norm(),
        };
    }
    let step = grad.scale(-epsilon / gnorm);
    let raw_step_norm = step.frobenius_norm();
    current.add_assign(&step);
    project_to_ball(current, epsilon);
    StepReport {
        raw_step_norm: Some(raw_step_norm),
        norm: current.frobenius_norm(),
    }
}

/// Which of the two branch slots a perturbation belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerturbationSlot {
    /// First branch (`delta`), the GIN branch in the default model.
    Delta,
    /// Second branch (`zeta`), the kernel branch in the default model.
    Zeta,
}

impl PerturbationSlot {
    pub fn key(self) -> &'static str {
        match self {
            Self::Delta => "delta",
            Self::Zeta => "zeta",
        }
    }
}

/// Persistent per-source-graph perturbations for both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationStore {
    epsilon: f64,
    delta: Vec<Tensor>,
    zeta: Vec<Tensor>,
    steps: u64,
}

impl PerturbationStore {
    /// Zero-initialised perturbations with the given per-graph shapes.
    pub fn new(epsilon: f64, delta_shapes: &[(usize, usize)], zeta_shapes: &[(usize, usize)]) -> Self {
        assert!(epsilon > 0.0, "epsilon must be positive, got {epsilon}");
        assert_eq!(delta_shapes.len(), zeta_shapes.len(), "one delta and one zeta per graph");
        let zeros = |shapes: &[(usize, usize)]| shapes.iter().map(|&(r, c)| Tensor::zeros(r, c)).collect();
        Self {
            epsilon,
            delta: zeros(delta_shapes),
            zeta: zeros(zeta_shapes),
            steps: 0,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.delta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.delta.is_empty()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn get(&self, slot: PerturbationSlot, index: usize) -> &Tensor {
        match slot {
            PerturbationSlot::Delta => &self.delta[index],
            PerturbationSlot::Zeta => &self.zeta[index],
        }
    }

    pub fn all(&self, slot: PerturbationSlot) -> &[Tensor] {
        match slot {
            PerturbationSlot::Delta => &self.delta,
            PerturbationSlot::Zeta => &self.zeta,
        }
    }

    /// Applies [`perturbation_step`] to one graph's perturbation.
    pub fn step(&mut self, slot: PerturbationSlot, index: usize, grad: &Tensor) -> StepReport {
        self.steps += 1;
        let eps = self.epsilon;
        let target = match slot {
            PerturbationSlot::Delta => &mut self.delta[index],
            PerturbationSlot::Zeta => &mut self.zeta[index],
        };
        perturbation_step(target, grad, eps)
    }

    pub fn max_norm(&self, slot: PerturbationSlot) -> f64 {
        self.all(slot).iter().map(Tensor::frobenius_norm).fold(0.0, f64::max)
    }

    /// Entries keyed `delta/<i>` and `zeta/<i>`.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for slot in [PerturbationSlot::Delta, PerturbationSlot::Zeta] {
            for (i, t) in self.all(slot).iter().enumerate() {
                ckpt.insert(format!("{}/{i}", slot.key()), t.clone());
            }
        }
        ckpt
    }

    /// Restores every entry present in `ckpt`.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) {
        for slot in [PerturbationSlot::Delta, PerturbationSlot::Zeta] {
            for (key, t) in ckpt.with_prefix(slot.key()) {
                if let Ok(i) = key.parse::<usize>() {
                    let dst = match slot {
                        PerturbationSlot::Delta => self.delta.get_mut(i),
                        PerturbationSlot::Zeta => self.zeta.get_mut(i),
                    };
                    if let Some(dst) = dst {
                        assert_eq!(dst.shape(), t.shape(), "checkpoint shape mismatch for {key}");
                        *dst = t.clone();
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    fn loss_for(source: &[f64], target: &[f64]) -> f64 {
        let tape = Tape::new();
        let s = tape.constant(Tensor::from_vec(source.len(), 1, source.iter().map(|&p| logit(p)).collect()));
        let t = tape.constant(Tensor::from_vec(target.len(), 1, target.iter().map(|&p| logit(p)).collect()));
        let v = domain_loss(s, t).item();
        v
    }

    #[test]
    fn constant_half_discriminator() {
        assert!((loss_for(&[0.5, 0.5], &[0.5]) - (-1.3862943611198906)).abs() < 1e-12);
    }

    #[test]
    fn arithmetic_example() {
        let expected = 0.8f64.ln() + 0.7f64.ln();
        assert!((loss_for(&[0.8], &[0.3]) - expected).abs() < 1e-12);
        assert!((expected - (-0.5798)).abs() < 1e-4);
    }

    #[test]
    fn perfect_discriminator_approaches_zero() {
        let v = loss_for(&[1.0 - 1e-9], &[1e-9]);
        assert!(v < 0.0 && v > -1e-6, "{v}");
    }

    #[test]
    #[should_panic(expected = "empty source batch")]
    fn empty_batch_panics() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(0, 1));
        let t = tape.constant(Tensor::zeros(1, 1));
        domain_loss(s, t);
    }

    #[test]
    fn swapping_domains_with_flipped_discriminator_preserves_loss() {
        let src = [0.9, 0.2, 0.6];
        let tgt = [0.35, 0.7];
        let flipped_tgt: Vec<f64> = tgt.iter().map(|p| 1.0 - p).collect();
        let flipped_src: Vec<f64> = src.iter().map(|p| 1.0 - p).collect();
        let a = loss_for(&src, &tgt);
        let b = loss_for(&flipped_tgt, &flipped_src);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn step_from_origin_has_length_epsilon() {
        let mut d = Tensor::zeros(2, 3);
        let g = Tensor::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
        let r = perturbation_step(&mut d, &g, 0.7);
        assert!((r.raw_step_norm.unwrap() - 0.7).abs() < 1e-12);
        assert!(d.frobenius_norm() <= 0.7);
        assert!((d.frobenius_norm() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_is_a_noop() {
        let mut d = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let before = d.clone();
        let r = perturbation_step(&mut d, &Tensor::zeros(1, 2), 1.0);
        assert_eq!(r.raw_step_norm, None);
        assert_eq!(d, before);
    }

    #[test]
    fn non_finite_gradient_is_a_noop() {
        let mut d = Tensor::from_rows(&[vec![0.1, 0.2]]);
        let before = d.clone();
        for bad in [f64::NAN, f64::INFINITY] {
            let r = perturbation_step(&mut d, &Tensor::from_rows(&[vec![bad, 1.0]]), 1.0);
            assert_eq!(r.raw_step_norm, None);
            assert_eq!(d, before);
        }
    }

    #[test]
    fn outward_step_is_projected_back() {
        // on the boundary, gradient pointing inward so the step points outward
        let eps = 1.0;
        let mut d = Tensor::from_rows(&[vec![0.6, 0.8]]);
        let g = Tensor::from_rows(&[vec![-0.6, -0.8]]);
        let raw = {
            let mut r = d.clone();
            r.axpy(-eps / g.frobenius_norm(), &g);
            r
        };
        let oracle = raw.scale(eps / raw.frobenius_norm());
        perturbation_step(&mut d, &g, eps);
        assert!(d.frobenius_norm() <= eps);
        for (a, b) in d.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ascent_improves_separable_toy_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut disc = DomainDiscriminator::new("d", 2, 2, 8, AdamConfig::with_lr(1e-2), &mut rng);
        let src = Tensor::from_rows(&[vec![2.0, 1.0], vec![1.5, 2.0]]);
        let tgt = Tensor::from_rows(&[vec![-2.0, -1.0], vec![-1.0, -2.5]]);
        let probs = Tensor::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let eval = |disc: &DomainDiscriminator| {
            let tape = Tape::new();
            let p = disc.params.bind(&tape, true);
            let ls = disc.logits(&p, tape.constant(src.clone()), tape.constant(probs.clone()));
            let lt = disc.logits(&p, tape.constant(tgt.clone()), tape.constant(probs.clone()));
            let loss = domain_loss(ls, lt);
            let grads = p.grads(&tape.backward(loss));
            (loss.item(), grads)
        };
        let (before, grads) = eval(&disc);
        disc.ascend(&grads).unwrap();
        let (after, _) = eval(&disc);
        assert!(after > before, "{after} <= {before}");
    }

    #[test]
    fn discriminators_update_independently() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut a = DomainDiscriminator::new("a", 4, 2, 8, AdamConfig::default(), &mut rng);
        let b = DomainDiscriminator::new("b", 4, 2, 8, AdamConfig::default(), &mut rng);
        let b_before = b.params.clone();
        let a_before = a.params.clone();
        let grads: Vec<Tensor> = a.params.iter().map(|(_, t)| Tensor::filled(t.rows(), t.cols(), 0.1)).collect();
        a.ascend(&grads).unwrap();
        assert_ne!(a.params, a_before);
        assert_eq!(b.params, b_before);

        let zero: Vec<Tensor> = a.params.iter().map(|(_, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let mut c = DomainDiscriminator::new("c", 4, 2, 8, AdamConfig::default(), &mut rng);
        let c_before = c.params.clone();
        c.ascend(&zero).unwrap();
        assert_eq!(c.params, c_before);
    }

    #[test]
    fn store_checkpoint_round_trip() {
        let mut store = PerturbationStore::new(1.0, &[(2, 3), (1, 3)], &[(1, 4), (1, 4)]);
        store.step(PerturbationSlot::Delta, 0, &Tensor::filled(2, 3, 1.0));
        store.step(PerturbationSlot::Zeta, 1, &Tensor::filled(1, 4, -1.0));
        let ckpt = store.to_checkpoint();
        assert!(ckpt.get("delta/0").is_some() && ckpt.get("zeta/1").is_some());
        let mut fresh = PerturbationStore::new(1.0, &[(2, 3), (1, 3)], &[(1, 4), (1, 4)]);
        fresh.load_checkpoint(&ckpt);
        fresh.steps = store.steps;
        assert_eq!(fresh, store);
    }

    proptest! {
        #[test]
        fn repeated_steps_stay_in_ball(
            grads in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 6), 1..30),
            eps in 0.01f64..5.0,
        ) {
            let mut d = Tensor::zeros(2, 3);
            for g in grads {
                let g = Tensor::from_vec(2, 3, g);
                let r = perturbation_step(&mut d, &g, eps);
                prop_assert!(d.frobenius_norm() <= eps);
                if let Some(len) = r.raw_step_norm {
                    prop_assert!((len - eps).abs() <= 1e-10);
                }
            }
        }
    }
}
