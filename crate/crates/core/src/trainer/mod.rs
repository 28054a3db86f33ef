//! Alternating optimisation of discriminators, perturbations and model
//! parameters, plus evaluation.
//!
//! Every batch pair runs three phases, each on its own tape:
//!
//! 1. discriminator ascent on `L_DA^C + L_DA^K` (discriminator parameters only);
//! 2. one normalised-gradient step on the perturbation of every source graph in
//!    the batch (`δ` for the first branch, `ζ` for the second);
//! 3. descent on `L = L_S - λ1·L_DA^C - λ2·L_DA^K` over model parameters, with
//!    discriminators and perturbations frozen.
//!
//! Random streams for initialisation and shuffling are independent, so the
//! discriminators never shift the model's random draws.

mod config;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{TrainConfig, Variant};

use crate::adversarial::{domain_loss, DomainDiscriminator, PerturbationSlot, PerturbationStore, StepReport};
use crate::autodiff::{
    concat_rows, sigmoid, softmax_rows, Adam, AdamConfig, AutodiffError, Bound, Checkpoint, ParamStore, Tape,
    Tensor, Var,
};
use crate::gin::{GinBranch, GraphBatch};
use crate::graph::{Domain, DomainDataset, Graph, GraphError};
use crate::head::BranchOutput;
use crate::wl::{GknBranch, WlFeatureVector, WlLabeler};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0:?} domain is empty")]
    EmptyDomain(Domain),
    #[error("target graph {0} carries a class label; target labels must stay hidden from training")]
    TargetLabelsVisible(usize),
    #[error("unlabeled graph {0} in a labeled batch")]
    Unlabeled(usize),
    #[error("non-finite {what} at epoch {epoch}")]
    NonFinite { epoch: usize, what: &'static str },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// `L_S - λ1·L_DA^C - λ2·L_DA^K` on plain numbers.
pub fn total_loss(source: f64, domain_c: f64, domain_k: f64, lambda1: f64, lambda2: f64) -> f64 {
    source - lambda1 * domain_c - lambda2 * domain_k
}

fn total_loss_var<'t>(source: Var<'t>, domain_c: Var<'t>, domain_k: Var<'t>, lambda1: f64, lambda2: f64) -> Var<'t> {
    source.sub(domain_c.scale(lambda1)).sub(domain_k.scale(lambda2))
}

/// Mean cross-entropy of each head, averaged with equal weight.
pub fn source_loss<'t>(logits: &[Var<'t>], labels: &[usize]) -> Var<'t> {
    assert!(!logits.is_empty(), "source_loss needs at least one head");
    let mut acc = logits[0].softmax_cross_entropy(labels);
    for l in &logits[1..] {
        acc = acc.add(l.softmax_cross_entropy(labels));
    }
    acc.scale(1.0 / logits.len() as f64)
}

/// Per-epoch means over batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub source_loss: f64,
    pub domain_loss_c: f64,
    pub domain_loss_k: f64,
    pub total_loss: f64,
    pub target_accuracy: Option<f64>,
}

/// Running record of every perturbation update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PerturbationAudit {
    pub steps: u64,
    pub degenerate: u64,
    /// Largest `| ‖raw step‖_F - ε |` over non-degenerate steps.
    pub max_raw_step_error: f64,
    /// Largest post-projection norm.
    pub max_norm: f64,
}

impl PerturbationAudit {
    fn record(&mut self, r: StepReport, epsilon: f64) {
        self.steps += 1;
        match r.raw_step_norm {
            Some(len) => self.max_raw_step_error = self.max_raw_step_error.max((len - epsilon).abs()),
            None => self.degenerate += 1,
        }
        self.max_norm = self.max_norm.max(r.norm);
    }
}

#[derive(Debug, Clone)]
enum BranchModel {
    Gin(GinBranch),
    Gkn(GknBranch),
}

impl BranchModel {
    fn params(&self) -> &ParamStore {
        match self {
            Self::Gin(b) => &b.params,
            Self::Gkn(b) => &b.params,
        }
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Gin(b) => &mut b.params,
            Self::Gkn(b) => &mut b.params,
        }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    model: BranchModel,
    adam: Adam,
    disc: DomainDiscriminator,
    perturb: bool,
    key: PerturbationSlot,
}

/// Graphs of one domain with their cached kernel features.
#[derive(Debug, Clone)]
struct Prepared {
    graphs: Vec<Graph>,
    wl: Vec<WlFeatureVector>,
}

/// Inputs for one batch, shared by all three phases.
struct BatchInputs {
    gin: Option<GraphBatch>,
    gkn: Option<Tensor>,
    size: usize,
}

/// Stream ids of the seeded generators.
mod stream {
    pub const SLOT0: u64 = 0;
    pub const SLOT1: u64 = 1;
    pub const DISC0: u64 = 2;
    pub const DISC1: u64 = 3;
    pub const SOURCE_ORDER: u64 = 4;
    pub const TARGET_ORDER: u64 = 5;
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Models, discriminators, perturbations and optimiser state of one run.
#[derive(Debug, Clone)]
pub struct TrainState {
    config: TrainConfig,
    num_classes: usize,
    alphabet: usize,
    slots: [Slot; 2],
    labeler: Option<WlLabeler>,
    source: Prepared,
    source_labels: Vec<usize>,
    target: Prepared,
    perturbations: PerturbationStore,
    audit: PerturbationAudit,
    source_rng: ChaCha8Rng,
    target_rng: ChaCha8Rng,
    history: Vec<EpochRecord>,
    instantiated: Vec<&'static str>,
}

impl TrainState {
    /// Builds every component for a source/target pair. The target must be unlabeled.
    pub fn new(config: TrainConfig, source: &DomainDataset, target: &DomainDataset) -> Result<Self, TrainError> {
        config.validate()?;
        if source.is_empty() {
            return Err(TrainError::EmptyDomain(Domain::Source));
        }
        if target.is_empty() {
            return Err(TrainError::EmptyDomain(Domain::Target));
        }
        if let Some(i) = target.graphs().iter().position(|g| g.graph_label().is_some()) {
            return Err(TrainError::TargetLabelsVisible(i));
        }
        let source_labels = source
            .graphs()
            .iter()
            .enumerate()
            .map(|(i, g)| g.graph_label().ok_or(TrainError::Unlabeled(i)))
            .collect::<Result<Vec<_>, _>>()?;
        if source.num_classes() != target.num_classes() {
            return Err(TrainError::Config(format!(
                "source has {} classes, target has {}",
                source.num_classes(),
                target.num_classes()
            )));
        }
        if source.label_alphabet_size() != target.label_alphabet_size() {
            return Err(TrainError::Config("source and target node-label alphabets differ".into()));
        }
        let num_classes = source.num_classes();
        let alphabet = source.label_alphabet_size();
        let hidden = config.hidden_dim;
        let mut instantiated = Vec::new();

        let needs_kernel = config.variant != Variant::GinOnlyDual;
        let labeler = needs_kernel.then(|| {
            instantiated.push("wl-labeler");
            WlLabeler::fit(source.graphs().iter().chain(target.graphs()), config.wl_depth)
        });
        let prepare = |ds: &DomainDataset| Prepared {
            graphs: ds.graphs().to_vec(),
            wl: labeler
                .as_ref()
                .map(|l| ds.graphs().iter().map(|g| l.features(g)).collect())
                .unwrap_or_default(),
        };
        let source_p = prepare(source);
        let target_p = prepare(target);

        let optimizer = AdamConfig::with_lr(config.lr);
        let mut build_model = |kind_gin: bool, stream_id: u64| {
            let mut r = rng(config.seed, stream_id);
            if kind_gin {
                instantiated.push("gin");
                BranchModel::Gin(GinBranch::new(alphabet, hidden, num_classes, &mut r))
            } else {
                instantiated.push("gkn");
                let vocab = labeler.as_ref().expect("kernel branch has a labeler").vocab_size();
                BranchModel::Gkn(GknBranch::new(vocab, hidden, num_classes, &mut r))
            }
        };
        let (first_gin, second_gin) = match config.variant {
            Variant::Full | Variant::P1 | Variant::P2 => (true, false),
            Variant::GinOnlyDual => (true, true),
            Variant::GknOnlyDual => (false, false),
        };
        let models = [build_model(first_gin, stream::SLOT0), build_model(second_gin, stream::SLOT1)];
        let (perturb0, perturb1) = config.perturbations_enabled();
        let [m0, m1] = models;
        let mut make_slot = |model: BranchModel, disc_stream: u64, perturb: bool, key: PerturbationSlot| {
            instantiated.push("discriminator");
            let disc = DomainDiscriminator::new(
                &format!("disc.{}", key.key()),
                hidden,
                num_classes,
                hidden,
                optimizer,
                &mut rng(config.seed, disc_stream),
            );
            Slot {
                adam: Adam::new(optimizer, model.params()),
                model,
                disc,
                perturb,
                key,
            }
        };
        let slots = [
            make_slot(m0, stream::DISC0, perturb0, PerturbationSlot::Delta),
            make_slot(m1, stream::DISC1, perturb1, PerturbationSlot::Zeta),
        ];
        let shape_for = |slot: &Slot, g: &Graph| match slot.model {
            BranchModel::Gin(_) => (g.node_count(), alphabet),
            BranchModel::Gkn(_) => (1, hidden),
        };
        let delta_shapes: Vec<_> = source.graphs().iter().map(|g| shape_for(&slots[0], g)).collect();
        let zeta_shapes: Vec<_> = source.graphs().iter().map(|g| shape_for(&slots[1], g)).collect();
        let perturbations = PerturbationStore::new(config.epsilon, &delta_shapes, &zeta_shapes);

        Ok(Self {
            source_rng: rng(config.seed, stream::SOURCE_ORDER),
            target_rng: rng(config.seed, stream::TARGET_ORDER),
            config,
            num_classes,
            alphabet,
            slots,
            labeler,
            source: source_p,
            source_labels,
            target: target_p,
            perturbations,
            audit: PerturbationAudit::default(),
            history: Vec::new(),
            instantiated,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn perturbations(&self) -> &PerturbationStore {
        &self.perturbations
    }

    pub fn perturbation_audit(&self) -> PerturbationAudit {
        self.audit
    }

    /// Components built by [`TrainState::new`], in construction order.
    pub fn instantiated(&self) -> &[&'static str] {
        &self.instantiated
    }

    /// Model parameters of the two branches.
    pub fn model_params(&self) -> [&ParamStore; 2] {
        [self.slots[0].model.params(), self.slots[1].model.params()]
    }

    pub fn discriminator_params(&self) -> [&ParamStore; 2] {
        [&self.slots[0].disc.params, &self.slots[1].disc.params]
    }

    pub fn epoch(&self) -> usize {
        self.history.len()
    }

    fn batch_inputs(&self, prepared: &Prepared, idx: &[usize]) -> BatchInputs {
        let any_gin = self.slots.iter().any(|s| matches!(s.model, BranchModel::Gin(_)));
        let gin = any_gin.then(|| {
            let graphs: Vec<&Graph> = idx.iter().map(|&i| &prepared.graphs[i]).collect();
            GraphBatch::new(&graphs, self.alphabet)
        });
        let gkn = self.labeler.as_ref().map(|l| {
            let mut x = Tensor::zeros(idx.len(), l.vocab_size());
            for (row, &i) in idx.iter().enumerate() {
                prepared.wl[i].write_dense(x.row_mut(row));
            }
            x
        });
        BatchInputs {
            gin,
            gkn,
            size: idx.len(),
        }
    }

    fn forward_slot<'t>(
        slot: &Slot,
        p: &Bound<'t>,
        tape: &'t Tape,
        inputs: &BatchInputs,
        perturbation: Option<Var<'t>>,
    ) -> BranchOutput<'t> {
        match &slot.model {
            BranchModel::Gin(b) => b.forward(p, tape, inputs.gin.as_ref().expect("GIN batch built"), perturbation),
            BranchModel::Gkn(b) => {
                let x = tape.constant(inputs.gkn.clone().expect("kernel features built"));
                b.forward(p, x, perturbation)
            }
        }
    }

    /// Stacked perturbations of the source graphs `idx` for slot `k`, as
    /// constants or as one leaf per graph.
    fn perturbation_vars<'t>(&self, tape: &'t Tape, k: usize, idx: &[usize], leaves: bool) -> (Option<Var<'t>>, Vec<Var<'t>>) {
        if !self.slots[k].perturb {
            return (None, Vec::new());
        }
        let key = self.slots[k].key;
        let parts: Vec<Var<'t>> = idx
            .iter()
            .map(|&i| {
                let t = self.perturbations.get(key, i).clone();
                if leaves {
                    tape.leaf(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        (Some(concat_rows(&parts)), parts)
    }

    fn discriminator_phase(&mut self, src_idx: &[usize], src: &BatchInputs, tgt: &BatchInputs) -> Result<(), TrainError> {
        let tape = Tape::new();
        let mut bound_discs = Vec::with_capacity(2);
        let mut total: Option<Var<'_>> = None;
        for k in 0..2 {
            let slot = &self.slots[k];
            let p = slot.model.params().bind(&tape, false);
            let d = slot.disc.params.bind(&tape, true);
            let (pert, _) = self.perturbation_vars(&tape, k, src_idx, false);
            let out_s = Self::forward_slot(slot, &p, &tape, src, pert);
            let out_t = Self::forward_slot(slot, &p, &tape, tgt, None);
            let ls = slot.disc.logits(&d, out_s.repr, out_s.probs());
            let lt = slot.disc.logits(&d, out_t.repr, out_t.probs());
            let l = domain_loss(ls, lt);
            total = Some(match total {
                Some(t) => t.add(l),
                None => l,
            });
            bound_discs.push(d);
        }
        let grads = tape.backward(total.expect("two slots"));
        let disc_grads: Vec<Vec<Tensor>> = bound_discs.iter().map(|d| d.grads(&grads)).collect();
        for (slot, g) in self.slots.iter_mut().zip(disc_grads) {
            slot.disc.ascend(&g)?;
        }
        Ok(())
    }

    fn perturbation_phase(&mut self, src_idx: &[usize], src: &BatchInputs) {
        if !self.slots.iter().any(|s| s.perturb) {
            return;
        }
        let tape = Tape::new();
        let mut objective: Option<Var<'_>> = None;
        let mut leaves: Vec<(PerturbationSlot, Vec<Var<'_>>)> = Vec::new();
        for k in 0..2 {
            let slot = &self.slots[k];
            if !slot.perturb {
                continue;
            }
            let p = slot.model.params().bind(&tape, false);
            let d = slot.disc.params.bind(&tape, false);
            let (pert, parts) = self.perturbation_vars(&tape, k, src_idx, true);
            let out = Self::forward_slot(slot, &p, &tape, src, pert);
            // per-graph terms are independent, so the sum's gradient w.r.t. each
            // graph's perturbation is that graph's own ∇ ln D
            let log_d = slot.disc.logits(&d, out.repr, out.probs()).log_sigmoid().sum();
            objective = Some(match objective {
                Some(o) => o.add(log_d),
                None => log_d,
            });
            leaves.push((slot.key, parts));
        }
        let grads = tape.backward(objective.expect("at least one perturbed slot"));
        let eps = self.perturbations.epsilon();
        for (key, parts) in leaves {
            for (&i, v) in src_idx.iter().zip(parts) {
                let report = self.perturbations.step(key, i, &grads.wrt(v));
                self.audit.record(report, eps);
            }
        }
    }

    /// Returns `(L_S, L_DA^C, L_DA^K, L)`.
    fn model_phase(
        &mut self,
        src_idx: &[usize],
        src: &BatchInputs,
        tgt: &BatchInputs,
    ) -> Result<[f64; 4], TrainError> {
        let labels: Vec<usize> = src_idx.iter().map(|&i| self.source_labels[i]).collect();
        let tape = Tape::new();
        let mut bound = Vec::with_capacity(2);
        let mut logits = Vec::with_capacity(2);
        let mut domain = Vec::with_capacity(2);
        for k in 0..2 {
            let slot = &self.slots[k];
            let p = slot.model.params().bind(&tape, true);
            let d = slot.disc.params.bind(&tape, false);
            let (pert, _) = self.perturbation_vars(&tape, k, src_idx, false);
            let out_s = Self::forward_slot(slot, &p, &tape, src, pert);
            let out_t = Self::forward_slot(slot, &p, &tape, tgt, None);
            let ls = slot.disc.logits(&d, out_s.repr, out_s.probs());
            let lt = slot.disc.logits(&d, out_t.repr, out_t.probs());
            domain.push(domain_loss(ls, lt));
            logits.push(out_s.logits);
            bound.push(p);
        }
        let l_s = source_loss(&logits, &labels);
        let loss = total_loss_var(l_s, domain[0], domain[1], self.config.lambda1, self.config.lambda2);
        let values = [l_s.item(), domain[0].item(), domain[1].item(), loss.item()];
        let grads = tape.backward(loss);
        let model_grads: Vec<Vec<Tensor>> = bound.iter().map(|p| p.grads(&grads)).collect();
        for (slot, g) in self.slots.iter_mut().zip(model_grads) {
            slot.adam.step(slot.model.params_mut(), &g)?;
        }
        Ok(values)
    }

    fn source_only_phase(&mut self, src_idx: &[usize], src: &BatchInputs) -> Result<f64, TrainError> {
        let labels: Vec<usize> = src_idx.iter().map(|&i| self.source_labels[i]).collect();
        let tape = Tape::new();
        let mut bound = Vec::with_capacity(2);
        let mut logits = Vec::with_capacity(2);
        for slot in &self.slots {
            let p = slot.model.params().bind(&tape, true);
            logits.push(Self::forward_slot(slot, &p, &tape, src, None).logits);
            bound.push(p);
        }
        let l_s = source_loss(&logits, &labels);
        let value = l_s.item();
        let grads = tape.backward(l_s);
        let model_grads: Vec<Vec<Tensor>> = bound.iter().map(|p| p.grads(&grads)).collect();
        for (slot, g) in self.slots.iter_mut().zip(model_grads) {
            slot.adam.step(slot.model.params_mut(), &g)?;
        }
        Ok(value)
    }

    fn shuffled_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        order.chunks(batch).map(<[usize]>::to_vec).collect()
    }

    fn check_finite(&self, values: &[f64]) -> Result<(), TrainError> {
        if values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(TrainError::NonFinite {
                epoch: self.history.len() + 1,
                what: "loss",
            })
        }
    }

    /// One pass over the source batches with the full three-phase schedule.
    /// Target batches cycle when there are fewer of them.
    pub fn train_epoch(&mut self) -> Result<EpochRecord, TrainError> {
        let bs = self.config.batch_size;
        let src_batches = Self::shuffled_batches(self.source.graphs.len(), bs, &mut self.source_rng);
        let tgt_batches = Self::shuffled_batches(self.target.graphs.len(), bs, &mut self.target_rng);
        let mut sums = [0.0; 4];
        for (b, src_idx) in src_batches.iter().enumerate() {
            let tgt_idx = &tgt_batches[b % tgt_batches.len()];
            let src = self.batch_inputs(&self.source, src_idx);
            let tgt = self.batch_inputs(&self.target, tgt_idx);
            debug_assert!(src.size > 0 && tgt.size > 0);
            self.discriminator_phase(src_idx, &src, &tgt)?;
            self.perturbation_phase(src_idx, &src);
            let values = self.model_phase(src_idx, &src, &tgt)?;
            self.check_finite(&values)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let n = src_batches.len() as f64;
        let record = EpochRecord {
            epoch: self.history.len() + 1,
            source_loss: sums[0] / n,
            domain_loss_c: sums[1] / n,
            domain_loss_k: sums[2] / n,
            total_loss: sums[3] / n,
            target_accuracy: None,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Plain supervised epoch on the source domain: both heads, no
    /// discriminators, no perturbations. Consumes the same random stream as
    /// [`TrainState::train_epoch`] for batch order.
    pub fn train_epoch_source_only(&mut self) -> Result<EpochRecord, TrainError> {
        let bs = self.config.batch_size;
        let src_batches = Self::shuffled_batches(self.source.graphs.len(), bs, &mut self.source_rng);
        let mut sum = 0.0;
        for src_idx in &src_batches {
            let src = self.batch_inputs(&self.source, src_idx);
            let v = self.source_only_phase(src_idx, &src)?;
            self.check_finite(&[v])?;
            sum += v;
        }
        let l_s = sum / src_batches.len() as f64;
        let record = EpochRecord {
            epoch: self.history.len() + 1,
            source_loss: l_s,
            domain_loss_c: 0.0,
            domain_loss_k: 0.0,
            total_loss: l_s,
            target_accuracy: None,
        };
        self.history.push(record);
        Ok(record)
    }

    /// Trains for `config.epochs` epochs. When `eval` is given its accuracy is
    /// logged after each epoch; it never feeds back into training.
    pub fn fit(&mut self, eval: Option<&DomainDataset>) -> Result<&[EpochRecord], TrainError> {
        self.fit_with(eval, Self::train_epoch)
    }

    /// [`TrainState::fit`] with the source-only epoch.
    pub fn fit_source_only(&mut self, eval: Option<&DomainDataset>) -> Result<&[EpochRecord], TrainError> {
        self.fit_with(eval, Self::train_epoch_source_only)
    }

    fn fit_with(
        &mut self,
        eval: Option<&DomainDataset>,
        epoch_fn: fn(&mut Self) -> Result<EpochRecord, TrainError>,
    ) -> Result<&[EpochRecord], TrainError> {
        for _ in 0..self.config.epochs {
            epoch_fn(self)?;
            if let Some(ds) = eval {
                let acc = self.evaluate(ds)?;
                self.history.last_mut().expect("epoch recorded").target_accuracy = Some(acc);
            }
        }
        Ok(&self.history)
    }

    /// Mean of the two branches' class probabilities, without perturbations.
    pub fn predict_proba(&self, graphs: &[Graph]) -> Tensor {
        let features: Vec<WlFeatureVector> = self
            .labeler
            .as_ref()
            .map(|l| graphs.iter().map(|g| l.features(g)).collect())
            .unwrap_or_default();
        let prepared = Prepared {
            graphs: graphs.to_vec(),
            wl: features,
        };
        let mut out = Tensor::zeros(graphs.len(), self.num_classes);
        let idx: Vec<usize> = (0..graphs.len()).collect();
        for chunk in idx.chunks(self.config.batch_size.max(1)) {
            let inputs = self.batch_inputs(&prepared, chunk);
            let tape = Tape::new();
            let mut mean = Tensor::zeros(chunk.len(), self.num_classes);
            for slot in &self.slots {
                let p = slot.model.params().bind(&tape, false);
                let out = Self::forward_slot(slot, &p, &tape, &inputs, None);
                mean.axpy(0.5, &softmax_rows(&out.logits.value()));
            }
            for (row, &i) in chunk.iter().enumerate() {
                out.row_mut(i).copy_from_slice(mean.row(row));
            }
        }
        out
    }

    /// Fraction of graphs whose fused argmax matches their label.
    pub fn evaluate(&self, labeled: &DomainDataset) -> Result<f64, TrainError> {
        let labels = labeled
            .graphs()
            .iter()
            .enumerate()
            .map(|(i, g)| g.graph_label().ok_or(TrainError::Unlabeled(i)))
            .collect::<Result<Vec<_>, _>>()?;
        let probs = self.predict_proba(labeled.graphs());
        Ok(accuracy_from_probs(&probs, &labels))
    }

    /// Balanced accuracy of each branch's discriminator at telling perturbed
    /// source graphs from target graphs.
    pub fn domain_accuracy(&self) -> [f64; 2] {
        let src_idx: Vec<usize> = (0..self.source.graphs.len()).collect();
        let tgt_idx: Vec<usize> = (0..self.target.graphs.len()).collect();
        let mut result = [0.0; 2];
        for (k, acc) in result.iter_mut().enumerate() {
            let mut correct_s = 0usize;
            let mut correct_t = 0usize;
            for chunk in src_idx.chunks(self.config.batch_size) {
                let inputs = self.batch_inputs(&self.source, chunk);
                let tape = Tape::new();
                let slot = &self.slots[k];
                let p = slot.model.params().bind(&tape, false);
                let d = slot.disc.params.bind(&tape, false);
                let (pert, _) = self.perturbation_vars(&tape, k, chunk, false);
                let out = Self::forward_slot(slot, &p, &tape, &inputs, pert);
                let logits = slot.disc.logits(&d, out.repr, out.probs());
                correct_s += logits.value().data().iter().filter(|&&l| sigmoid(l) > 0.5).count();
            }
            for chunk in tgt_idx.chunks(self.config.batch_size) {
                let inputs = self.batch_inputs(&self.target, chunk);
                let tape = Tape::new();
                let slot = &self.slots[k];
                let p = slot.model.params().bind(&tape, false);
                let d = slot.disc.params.bind(&tape, false);
                let out = Self::forward_slot(slot, &p, &tape, &inputs, None);
                let logits = slot.disc.logits(&d, out.repr, out.probs());
                correct_t += logits.value().data().iter().filter(|&&l| sigmoid(l) <= 0.5).count();
            }
            *acc = 0.5 * (correct_s as f64 / src_idx.len() as f64 + correct_t as f64 / tgt_idx.len() as f64);
        }
        result
    }

    /// Model and discriminator parameters under `slot{0,1}/` and `disc{0,1}/`.
    pub fn model_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        for (k, slot) in self.slots.iter().enumerate() {
            ckpt.insert_params(&format!("slot{k}"), slot.model.params());
            ckpt.insert_params(&format!("disc{k}"), &slot.disc.params);
        }
        ckpt
    }

    /// Restores parameters saved by [`TrainState::model_checkpoint`].
    pub fn load_model_checkpoint(&mut self, ckpt: &Checkpoint) {
        for (k, slot) in self.slots.iter_mut().enumerate() {
            let prefix = format!("slot{k}");
            slot.model.params_mut().load(ckpt.with_prefix(&prefix));
            let prefix = format!("disc{k}");
            slot.disc.params.load(ckpt.with_prefix(&prefix));
        }
    }

    pub fn save_checkpoints(&self, model_path: &Path, perturbation_path: &Path) -> Result<(), TrainError> {
        self.model_checkpoint().save(model_path)?;
        self.perturbations.to_checkpoint().save(perturbation_path)?;
        Ok(())
    }
}

/// Accuracy of row-wise argmax against `labels`.
pub fn accuracy_from_probs(probs: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(probs.rows(), labels.len(), "one label per prediction row");
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| probs.argmax_row(i) == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// CSV with columns `epoch,L_S,L_DA_C,L_DA_K,L,target_accuracy`.
pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,L_S,L_DA_C,L_DA_K,L,target_accuracy\n");
    for r in history {
        let acc = r.target_accuracy.map(|a| a.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch, r.source_loss, r.domain_loss_c, r.domain_loss_k, r.total_loss, acc
        )
        .expect("string write");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(n: usize, edges: &[(usize, usize)], labels: &[u32], y: Option<usize>) -> Graph {
        Graph::new(n, edges.iter().copied(), labels.to_vec(), y).unwrap()
    }

    fn toy() -> (DomainDataset, DomainDataset) {
        let mut src = Vec::new();
        let mut tgt = Vec::new();
        for i in 0..12 {
            let y = i % 2;
            let lab = if y == 0 { [0, 0, 1] } else { [1, 1, 0] };
            src.push(graph(3, &[(0, 1), (1, 2)], &lab, Some(y)));
            tgt.push(graph(3, &[(0, 1), (1, 2), (0, 2)], &lab, Some(y)));
        }
        (
            DomainDataset::new(src, Domain::Source, 2, 2).unwrap(),
            DomainDataset::new(tgt, Domain::Target, 2, 2).unwrap(),
        )
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden_dim: 8,
            batch_size: 4,
            epochs: 3,
            lr: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(total_loss(0.7, -1.0, -2.0, 0.0, 0.0), 0.7);
        assert!((total_loss(1.0, -1.3863, -1.3863, 0.1, 0.1) - 1.27726).abs() < 1e-12);
        assert_eq!(total_loss(0.4, 0.0, -3.0, 1.0, 0.0), 0.4);
    }

    #[test]
    fn source_loss_examples() {
        let tape = Tape::new();
        let confident = tape.constant(Tensor::from_rows(&[vec![800.0, 0.0]]));
        assert_eq!(source_loss(&[confident], &[0]).item(), 0.0);
        let uniform = tape.constant(Tensor::zeros(1, 2));
        assert!((source_loss(&[uniform], &[1]).item() - std::f64::consts::LN_2).abs() < 1e-15);
        let pair = tape.constant(Tensor::from_rows(&[vec![800.0, 0.0], vec![0.0, 0.0]]));
        assert!((source_loss(&[pair], &[0, 0]).item() - std::f64::consts::LN_2 / 2.0).abs() < 1e-15);
    }

    #[test]
    fn labeled_target_is_rejected() {
        let (src, tgt) = toy();
        let err = TrainState::new(small_config(), &src, &tgt).unwrap_err();
        assert!(matches!(err, TrainError::TargetLabelsVisible(0)));
    }

    #[test]
    fn empty_domains_are_rejected() {
        let (src, tgt) = toy();
        let empty = DomainDataset::new(vec![], Domain::Target, 2, 2).unwrap();
        assert!(matches!(
            TrainState::new(small_config(), &src, &empty),
            Err(TrainError::EmptyDomain(Domain::Target))
        ));
        let empty_src = DomainDataset::new(vec![], Domain::Source, 2, 2).unwrap();
        assert!(matches!(
            TrainState::new(small_config(), &empty_src, &tgt.without_labels()),
            Err(TrainError::EmptyDomain(Domain::Source))
        ));
    }

    #[test]
    fn p1_never_moves_delta_and_p2_never_moves_zeta() {
        let (src, tgt) = toy();
        let hidden = tgt.without_labels();
        for (variant, frozen, moving) in [
            (Variant::P1, PerturbationSlot::Delta, PerturbationSlot::Zeta),
            (Variant::P2, PerturbationSlot::Zeta, PerturbationSlot::Delta),
        ] {
            let cfg = TrainConfig {
                variant,
                ..small_config()
            };
            let mut st = TrainState::new(cfg, &src, &hidden).unwrap();
            st.fit(None).unwrap();
            assert_eq!(st.perturbations().max_norm(frozen), 0.0, "{variant}");
            assert!(st.perturbations().max_norm(moving) > 0.0, "{variant}");
        }
    }

    #[test]
    fn gkn_only_never_builds_gin() {
        let (src, tgt) = toy();
        let cfg = TrainConfig {
            variant: Variant::GknOnlyDual,
            ..small_config()
        };
        let st = TrainState::new(cfg, &src, &tgt.without_labels()).unwrap();
        assert!(!st.instantiated().contains(&"gin"));
        assert_eq!(st.instantiated().iter().filter(|&&c| c == "gkn").count(), 2);
        let cfg = TrainConfig {
            variant: Variant::GinOnlyDual,
            ..small_config()
        };
        let st = TrainState::new(cfg, &src, &tgt.without_labels()).unwrap();
        assert!(!st.instantiated().contains(&"gkn"));
        assert_ne!(st.model_params()[0], st.model_params()[1]);
    }

    #[test]
    fn every_variant_trains_and_stays_finite() {
        let (src, tgt) = toy();
        for variant in Variant::ALL {
            let cfg = TrainConfig {
                variant,
                ..small_config()
            };
            let mut st = TrainState::new(cfg, &src, &tgt.without_labels()).unwrap();
            let hist = st.fit(Some(&tgt)).unwrap();
            assert_eq!(hist.len(), 3);
            for r in hist {
                assert!(r.source_loss.is_finite() && r.total_loss.is_finite());
                let acc = r.target_accuracy.unwrap();
                assert!((0.0..=1.0).contains(&acc));
            }
        }
    }

    #[test]
    fn evaluate_ignores_target_order() {
        let (src, tgt) = toy();
        let mut st = TrainState::new(small_config(), &src, &tgt.without_labels()).unwrap();
        st.fit(None).unwrap();
        let mut reversed: Vec<usize> = (0..tgt.len()).collect();
        reversed.reverse();
        let shuffled = tgt.subset(&reversed, Domain::Target).unwrap();
        assert_eq!(st.evaluate(&tgt).unwrap(), st.evaluate(&shuffled).unwrap());
    }

    #[test]
    fn accuracy_oracle() {
        // both heads right
        let probs = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(accuracy_from_probs(&probs, &[0, 1]), 1.0);
        // mean of uniform and one-hot follows the one-hot
        let mut fused = Tensor::zeros(1, 3);
        fused.axpy(0.5, &Tensor::from_rows(&[vec![1.0 / 3.0; 3]]));
        fused.axpy(0.5, &Tensor::from_rows(&[vec![0.0, 0.0, 1.0]]));
        assert_eq!(fused.argmax_row(0), 2);
        // hand-set 10-graph toy: 7 of 10 correct
        let rows: Vec<Vec<f64>> = (0..10)
            .map(|i| if i < 7 { vec![0.6, 0.4] } else { vec![0.3, 0.7] })
            .collect();
        assert_eq!(accuracy_from_probs(&Tensor::from_rows(&rows), &[0; 10]), 0.7);
    }

    #[test]
    fn history_csv_header() {
        let csv = loss_history_csv(&[EpochRecord {
            epoch: 1,
            source_loss: 0.5,
            domain_loss_c: -1.0,
            domain_loss_k: -1.5,
            total_loss: 0.75,
            target_accuracy: Some(0.5),
        }]);
        assert_eq!(csv, "epoch,L_S,L_DA_C,L_DA_K,L,target_accuracy\n1,0.5,-1,-1.5,0.75,0.5\n");
    }

    #[test]
    fn checkpoint_restores_predictions() {
        let (src, tgt) = toy();
        let hidden = tgt.without_labels();
        let mut st = TrainState::new(small_config(), &src, &hidden).unwrap();
        st.fit(None).unwrap();
        let ckpt = Checkpoint::from_text(&st.model_checkpoint().to_text()).unwrap();
        let mut fresh = TrainState::new(small_config(), &src, &hidden).unwrap();
        fresh.load_model_checkpoint(&ckpt);
        assert_eq!(fresh.predict_proba(tgt.graphs()), st.predict_proba(tgt.graphs()));
    }
}
