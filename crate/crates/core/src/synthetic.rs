//! Two-domain generator: random background graphs carrying a class-specific
//! motif, with the background edge probability differing between domains.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Domain, DomainDataset, Graph, GraphError};

/// Node label reserved for motif nodes; background nodes use `1..alphabet`.
pub const MOTIF_LABEL: u32 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ShiftTaskConfig {
    pub graphs_per_domain: usize,
    pub min_background: usize,
    pub max_background: usize,
    pub alphabet: usize,
    /// Background edge probability in the source domain.
    pub source_edge_prob: f64,
    /// Background edge probability in the target domain.
    pub target_edge_prob: f64,
    pub seed: u64,
}

impl Default for ShiftTaskConfig {
    fn default() -> Self {
        Self {
            graphs_per_domain: 160,
            min_background: 8,
            max_background: 14,
            alphabet: 3,
            source_edge_prob: 0.12,
            target_edge_prob: 0.35,
            seed: 7,
        }
    }
}

/// Motif planted on four nodes labelled [`MOTIF_LABEL`]: a path for class 0,
/// a star for class 1.
pub fn motif_edges(class: usize) -> &'static [(usize, usize)] {
    match class {
        0 => &[(0, 1), (1, 2), (2, 3)],
        1 => &[(0, 1), (0, 2), (0, 3)],
        _ => panic!("motif class must be 0 or 1, got {class}"),
    }
}

const MOTIF_SIZE: usize = 4;

fn sample_graph(rng: &mut ChaCha8Rng, cfg: &ShiftTaskConfig, class: usize, p: f64) -> Result<Graph, GraphError> {
    let nb = rng.gen_range(cfg.min_background..=cfg.max_background);
    let n = MOTIF_SIZE + nb;
    let mut labels = vec![MOTIF_LABEL; MOTIF_SIZE];
    labels.extend((0..nb).map(|_| rng.gen_range(1..cfg.alphabet as u32)));
    let mut edges: Vec<(usize, usize)> = motif_edges(class).to_vec();
    for u in 0..n {
        for v in (u + 1).max(MOTIF_SIZE)..n {
            if rng.gen_bool(p) {
                edges.push((u, v));
            }
        }
    }
    // hide node order so position never encodes the motif
    let mut perm: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), rng);
    Graph::new(n, edges, labels, Some(class)).map(|g| g.permuted(&perm))
}

/// Labeled source and labeled target datasets. Hide the target labels with
/// [`DomainDataset::without_labels`] before training.
pub fn shift_task(cfg: &ShiftTaskConfig) -> Result<(DomainDataset, DomainDataset), GraphError> {
    if cfg.alphabet < 2 || cfg.min_background > cfg.max_background {
        return Err(GraphError::Config("shift task needs alphabet >= 2 and min_background <= max_background".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut build = |p: f64, domain: Domain| -> Result<DomainDataset, GraphError> {
        let graphs = (0..cfg.graphs_per_domain)
            .map(|i| sample_graph(&mut rng, cfg, i % 2, p))
            .collect::<Result<Vec<_>, _>>()?;
        DomainDataset::new(graphs, domain, 2, cfg.alphabet)
    };
    let source = build(cfg.source_edge_prob, Domain::Source)?;
    let target = build(cfg.target_edge_prob, Domain::Target)?;
    Ok((source, target))
}
