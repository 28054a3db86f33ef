use std::fmt::Write as _;
use std::path::Path;

use super::{WlError, WlFeatureVector, WlLabeler};
use crate::autodiff::Tensor;
use crate::graph::{DomainDataset, Graph};

/// `K(a,b) / sqrt(K(a,a) K(b,b))`, or 0 when either self-similarity is 0.
pub fn normalized_kernel(a: &WlFeatureVector, b: &WlFeatureVector) -> f64 {
    let denom = (a.dot(a) as f64 * b.dot(b) as f64).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        a.dot(b) as f64 / denom
    }
}

/// Kernel Gram matrix in input order.
pub fn gram_matrix(features: &[WlFeatureVector], normalized: bool) -> Tensor {
    let n = features.len();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if normalized {
                normalized_kernel(&features[i], &features[j])
            } else {
                features[i].dot(&features[j]) as f64
            };
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// Writes a Gram matrix as CSV: a header row of graph ids, then one row of
/// kernel values per graph, both in dataset order.
pub fn write_gram_csv(path: &Path, ids: &[usize], gram: &Tensor) -> Result<(), WlError> {
    assert_eq!(gram.shape(), (ids.len(), ids.len()), "gram/ids size mismatch");
    let mut out = String::new();
    let header: Vec<String> = ids.iter().map(ToString::to_string).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for i in 0..ids.len() {
        for (j, v) in gram.row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|source| WlError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Label of the most similar source; ties go to the lowest source index.
pub fn pseudo_label_from_similarities(similarities: &[f64], source_labels: &[usize]) -> Result<usize, WlError> {
    if similarities.is_empty() {
        return Err(WlError::Config("pseudo-labelling needs at least one source graph".into()));
    }
    assert_eq!(similarities.len(), source_labels.len(), "one label per similarity");
    let mut best = 0;
    for (i, &s) in similarities.iter().enumerate() {
        if s > similarities[best] {
            best = i;
        }
    }
    Ok(source_labels[best])
}

/// Nearest-neighbour (k = 1) label transfer under the normalised WL kernel.
pub fn pseudo_label(
    source_features: &[WlFeatureVector],
    source_labels: &[usize],
    target: &WlFeatureVector,
) -> Result<usize, WlError> {
    let sims: Vec<f64> = source_features.iter().map(|s| normalized_kernel(s, target)).collect();
    pseudo_label_from_similarities(&sims, source_labels)
}

/// [`pseudo_label`] with a WL table fitted on the sources and the target.
pub fn pseudo_label_graphs(sources: &DomainDataset, target: &Graph, depth: usize) -> Result<usize, WlError> {
    let labels = sources
        .labels()
        .ok_or_else(|| WlError::Config("source graphs must be labeled".into()))?;
    let labeler = WlLabeler::fit(sources.graphs().iter().chain(std::iter::once(target)), depth);
    let feats: Vec<_> = sources.graphs().iter().map(|g| labeler.features(g)).collect();
    pseudo_label(&feats, &labels, &labeler.features(target))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Domain;

    #[test]
    fn argmax_oracle() {
        assert_eq!(pseudo_label_from_similarities(&[0.2, 0.9, 0.5], &[0, 1, 0]).unwrap(), 1);
    }

    #[test]
    fn ties_go_to_first_source() {
        assert_eq!(pseudo_label_from_similarities(&[0.4, 0.4, 0.4], &[2, 0, 1]).unwrap(), 2);
    }

    #[test]
    fn empty_sources_are_rejected() {
        assert!(matches!(
            pseudo_label_from_similarities(&[], &[]),
            Err(WlError::Config(_))
        ));
    }

    #[test]
    fn identical_target_takes_matching_label() {
        let a = Graph::new(3, [(0, 1), (1, 2)], vec![0, 1, 0], Some(0)).unwrap();
        let b = Graph::new(4, [(0, 1), (1, 2), (2, 3), (0, 3)], vec![1, 1, 1, 1], Some(1)).unwrap();
        let c = Graph::new(2, [(0, 1)], vec![0, 0], Some(0)).unwrap();
        let ds = DomainDataset::new(vec![a, b.clone(), c], Domain::Source, 2, 2).unwrap();
        assert_eq!(pseudo_label_graphs(&ds, &b.with_label(None), 2).unwrap(), 1);
    }

    #[test]
    fn gram_csv_layout() {
        let g1 = Graph::new(1, [], vec![0], None).unwrap();
        let g2 = Graph::new(2, [(0, 1)], vec![0, 0], None).unwrap();
        let lab = WlLabeler::fit([&g1, &g2], 0);
        let gram = gram_matrix(&[lab.features(&g1), lab.features(&g2)], false);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gram.csv");
        write_gram_csv(&path, &[10, 11], &gram).unwrap();
        assert_eq!(std::fs::read_to_string(path).unwrap(), "10,11\n1,2\n2,4\n");
    }
}
