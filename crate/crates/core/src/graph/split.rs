use super::{DomainDataset, Graph, GraphError};

pub const NUM_DENSITY_GROUPS: usize = 4;

/// `2|E| / (|V|(|V|-1))`, or 0 for graphs with at most one node.
pub fn edge_density(g: &Graph) -> f64 {
    let n = g.node_count();
    if n <= 1 {
        return 0.0;
    }
    2.0 * g.edge_count() as f64 / (n * (n - 1)) as f64
}

/// Four density-ordered groups of graph indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityPartition {
    /// `groups[0]` holds the sparsest graphs.
    pub groups: [Vec<usize>; NUM_DENSITY_GROUPS],
    /// Upper density boundary of groups 0..3.
    pub boundaries: [f64; NUM_DENSITY_GROUPS - 1],
}

/// Sorts graphs by `(density, index)` and chunks them into four contiguous
/// quartiles. The first `len % 4` groups take one extra graph.
pub fn split_by_density(ds: &DomainDataset) -> Result<DensityPartition, GraphError> {
    let n = ds.len();
    if n < NUM_DENSITY_GROUPS {
        return Err(GraphError::Config(format!(
            "density split needs at least {NUM_DENSITY_GROUPS} graphs, dataset has {n}"
        )));
    }
    let densities: Vec<f64> = ds.graphs().iter().map(edge_density).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| densities[a].total_cmp(&densities[b]).then(a.cmp(&b)));

    let base = n / NUM_DENSITY_GROUPS;
    let extra = n % NUM_DENSITY_GROUPS;
    let mut groups: [Vec<usize>; NUM_DENSITY_GROUPS] = Default::default();
    let mut start = 0;
    for (k, group) in groups.iter_mut().enumerate() {
        let size = base + usize::from(k < extra);
        *group = order[start..start + size].to_vec();
        start += size;
    }
    let mut boundaries = [0.0; NUM_DENSITY_GROUPS - 1];
    for (k, b) in boundaries.iter_mut().enumerate() {
        *b = groups[k]
            .iter()
            .map(|&i| densities[i])
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(DensityPartition { groups, boundaries })
}
