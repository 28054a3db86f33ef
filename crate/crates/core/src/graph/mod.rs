//! Graph data model, benchmark-format ingestion and edge-density splitting.

mod split;
mod tudataset;

use std::collections::HashSet;

pub use split::{edge_density, split_by_density, DensityPartition, NUM_DENSITY_GROUPS};
pub use tudataset::{parse_tudataset, write_tudataset};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge ({u}, {v}) references a node outside 0..{node_count}")]
    NodeOutOfRange { u: usize, v: usize, node_count: usize },
    #[error("{labels} node labels for {node_count} nodes")]
    LabelCount { labels: usize, node_count: usize },
    #[error("graph {index}: node label {label} outside alphabet of size {alphabet}")]
    NodeLabelOutOfRange { index: usize, label: u32, alphabet: usize },
    #[error("graph {index}: class {label} outside 0..{num_classes}")]
    ClassOutOfRange { index: usize, label: usize, num_classes: usize },
    #[error("source graph {0} has no class label")]
    UnlabeledSource(usize),
    #[error("graph index {index} out of range for dataset of {len} graphs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("configuration error: {0}")]
    Config(String),
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("missing dataset file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {message}")]
    Format {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Undirected simple graph with categorical node labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    node_labels: Vec<u32>,
    graph_label: Option<usize>,
    neighbors: Vec<Vec<usize>>,
}

impl Graph {
    /// Validates and builds a graph. Edges are stored as `(min, max)` in the
    /// given order.
    pub fn new(
        node_count: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        node_labels: Vec<u32>,
        graph_label: Option<usize>,
    ) -> Result<Self, GraphError> {
        if node_labels.len() != node_count {
            return Err(GraphError::LabelCount {
                labels: node_labels.len(),
                node_count,
            });
        }
        let mut seen = HashSet::new();
        let mut stored = Vec::new();
        let mut neighbors = vec![Vec::new(); node_count];
        for (u, v) in edges {
            if u >= node_count || v >= node_count {
                return Err(GraphError::NodeOutOfRange { u, v, node_count });
            }
            if u == v {
                return Err(GraphError::SelfLoop(u));
            }
            let e = (u.min(v), u.max(v));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
            stored.push(e);
            neighbors[u].push(v);
            neighbors[v].push(u);
        }
        Ok(Self {
            node_count,
            edges: stored,
            node_labels,
            graph_label,
            neighbors,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_labels(&self) -> &[u32] {
        &self.node_labels
    }

    pub fn graph_label(&self) -> Option<usize> {
        self.graph_label
    }

    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.neighbors[v]
    }

    pub fn with_label(&self, label: Option<usize>) -> Self {
        Self {
            graph_label: label,
            ..self.clone()
        }
    }

    /// Relabels node `v` as `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.node_count, "permutation length");
        let mut labels = vec![0; self.node_count];
        for (v, &p) in perm.iter().enumerate() {
            labels[p] = self.node_labels[v];
        }
        let edges = self.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
        Self::new(self.node_count, edges, labels, self.graph_label).expect("permutation preserves validity")
    }

    /// Disjoint union with `other`; `other`'s nodes are appended after this graph's.
    pub fn disjoint_union(&self, other: &Graph) -> Self {
        let off = self.node_count;
        let edges = self
            .edges
            .iter()
            .copied()
            .chain(other.edges.iter().map(|&(u, v)| (u + off, v + off)));
        let labels = self.node_labels.iter().chain(&other.node_labels).copied().collect();
        Self::new(off + other.node_count, edges, labels, self.graph_label).expect("union preserves validity")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Domain {
    Source,
    Target,
}

/// Graphs from one domain sharing a label space and a node-label alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomainDataset {
    graphs: Vec<Graph>,
    domain: Domain,
    num_classes: usize,
    label_alphabet_size: usize,
}

impl DomainDataset {
    pub fn new(
        graphs: Vec<Graph>,
        domain: Domain,
        num_classes: usize,
        label_alphabet_size: usize,
    ) -> Result<Self, GraphError> {
        for (index, g) in graphs.iter().enumerate() {
            if let Some(&label) = g.node_labels().iter().find(|&&l| l as usize >= label_alphabet_size) {
                return Err(GraphError::NodeLabelOutOfRange {
                    index,
                    label,
                    alphabet: label_alphabet_size,
                });
            }
            match g.graph_label() {
                Some(label) if label >= num_classes => {
                    return Err(GraphError::ClassOutOfRange {
                        index,
                        label,
                        num_classes,
                    })
                }
                None if domain == Domain::Source => return Err(GraphError::UnlabeledSource(index)),
                _ => {}
            }
        }
        Ok(Self {
            graphs,
            domain,
            num_classes,
            label_alphabet_size,
        })
    }

    pub fn graphs(&self) -> &[Graph] {
        &self.graphs
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label_alphabet_size(&self) -> usize {
        self.label_alphabet_size
    }

    /// Class labels of every graph, or `None` if any graph is unlabeled.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.graphs.iter().map(Graph::graph_label).collect()
    }

    pub fn is_unlabeled(&self) -> bool {
        self.graphs.iter().all(|g| g.graph_label().is_none())
    }

    /// New dataset from the graphs at `indices`, tagged with `domain`.
    pub fn subset(&self, indices: &[usize], domain: Domain) -> Result<Self, GraphError> {
        let graphs = indices
            .iter()
            .map(|&index| {
                self.graphs.get(index).cloned().ok_or(GraphError::IndexOutOfRange {
                    index,
                    len: self.graphs.len(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(graphs, domain, self.num_classes, self.label_alphabet_size)
    }

    /// Copy with every class label removed, tagged as target domain.
    pub fn without_labels(&self) -> Self {
        Self {
            graphs: self.graphs.iter().map(|g| g.with_label(None)).collect(),
            domain: Domain::Target,
            num_classes: self.num_classes,
            label_alphabet_size: self.label_alphabet_size,
        }
    }
}
