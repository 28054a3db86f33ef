//! Reader and writer for the plain-text graph benchmark layout:
//!
//! - `{DS}_A.txt`: one `u, v` pair per line, 1-indexed global node ids
//! - `{DS}_graph_indicator.txt`: graph id (1-indexed) of every node
//! - `{DS}_graph_labels.txt`: one class label per graph
//! - `{DS}_node_labels.txt`: one categorical label per node
//!
//! Raw class and node labels are remapped to `0..k` in sorted order of the raw
//! values. Each undirected edge is usually listed in both directions; repeats
//! collapse into one edge. Self-loops are dropped.

use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use super::{DatasetError, Domain, DomainDataset, Graph};

fn file_path(root: &Path, name: &str, suffix: &str) -> PathBuf {
    root.join(format!("{name}_{suffix}.txt"))
}

fn read(path: &Path) -> Result<String, DatasetError> {
    if !path.is_file() {
        return Err(DatasetError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Non-empty lines with their 1-based line numbers.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_ints(path: &Path, text: &str) -> Result<Vec<(usize, i64)>, DatasetError> {
    numbered_lines(text)
        .map(|(line, l)| {
            l.parse::<i64>().map(|v| (line, v)).map_err(|e| DatasetError::Format {
                file: path.to_path_buf(),
                line,
                message: format!("expected an integer, found {l:?} ({e})"),
            })
        })
        .collect()
}

/// Dense remap of raw values in sorted order.
fn remap(values: &[i64]) -> (Vec<i64>, impl Fn(i64) -> usize) {
    let sorted: Vec<i64> = values.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let lookup = sorted.clone();
    (sorted, move |v| lookup.binary_search(&v).expect("value collected above"))
}

/// Parses `root/{name}_*.txt` into a source-domain dataset.
pub fn parse_tudataset(root: &Path, name: &str) -> Result<DomainDataset, DatasetError> {
    let a_path = file_path(root, name, "A");
    let ind_path = file_path(root, name, "graph_indicator");
    let gl_path = file_path(root, name, "graph_labels");
    let nl_path = file_path(root, name, "node_labels");
    let a_text = read(&a_path)?;
    let ind_text = read(&ind_path)?;
    let gl_text = read(&gl_path)?;
    let nl_text = read(&nl_path)?;

    let graph_labels = parse_ints(&gl_path, &gl_text)?;
    let num_graphs = graph_labels.len();
    let indicator = parse_ints(&ind_path, &ind_text)?;
    let node_labels = parse_ints(&nl_path, &nl_text)?;
    if node_labels.len() != indicator.len() {
        let line = node_labels.last().map_or(1, |l| l.0);
        return Err(DatasetError::Format {
            file: nl_path,
            line,
            message: format!(
                "{} node labels but {} nodes in the graph indicator",
                node_labels.len(),
                indicator.len()
            ),
        });
    }

    // global node -> (graph, local id)
    let mut owner = Vec::with_capacity(indicator.len());
    let mut sizes = vec![0usize; num_graphs];
    for &(line, gid) in &indicator {
        if gid < 1 || gid as usize > num_graphs {
            return Err(DatasetError::Format {
                file: ind_path,
                line,
                message: format!("graph id {gid} outside 1..={num_graphs}"),
            });
        }
        let g = gid as usize - 1;
        owner.push((g, sizes[g]));
        sizes[g] += 1;
    }

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); num_graphs];
    let mut seen: Vec<HashSet<(usize, usize)>> = vec![HashSet::new(); num_graphs];
    for (line, l) in numbered_lines(&a_text) {
        let fmt_err = |message: String| DatasetError::Format {
            file: a_path.clone(),
            line,
            message,
        };
        let mut parts = l.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(fmt_err(format!("expected \"u, v\", found {l:?}")));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| fmt_err(format!("bad node id {s:?} ({e})")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        for x in [u, v] {
            if x < 1 || x > owner.len() {
                return Err(fmt_err(format!("node {x} outside 1..={}", owner.len())));
            }
        }
        let ((gu, lu), (gv, lv)) = (owner[u - 1], owner[v - 1]);
        if gu != gv {
            return Err(fmt_err(format!(
                "edge ({u}, {v}) joins graph {} and graph {}",
                gu + 1,
                gv + 1
            )));
        }
        if lu == lv {
            continue;
        }
        let e = (lu.min(lv), lu.max(lv));
        if seen[gu].insert(e) {
            edges[gu].push(e);
        }
    }

    let raw_node: Vec<i64> = node_labels.iter().map(|&(_, v)| v).collect();
    let (node_alphabet, node_index) = remap(&raw_node);
    let raw_graph: Vec<i64> = graph_labels.iter().map(|&(_, v)| v).collect();
    let (classes, class_index) = remap(&raw_graph);

    let mut per_graph_labels: Vec<Vec<u32>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    for (&(g, _), &raw) in owner.iter().zip(&raw_node) {
        per_graph_labels[g].push(node_index(raw) as u32);
    }
    let graphs = per_graph_labels
        .into_iter()
        .zip(edges)
        .zip(&raw_graph)
        .map(|((labels, es), &y)| Graph::new(labels.len(), es, labels, Some(class_index(y))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(DomainDataset::new(
        graphs,
        Domain::Source,
        classes.len(),
        node_alphabet.len(),
    )?)
}

/// Writes `ds` in the benchmark layout, listing every edge in both directions.
/// Unlabeled graphs are written with class 0.
pub fn write_tudataset(ds: &DomainDataset, root: &Path, name: &str) -> Result<(), DatasetError> {
    fs::create_dir_all(root).map_err(|source| DatasetError::Io {
        path: root.to_path_buf(),
        source,
    })?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut gl = String::new();
    let mut nl = String::new();
    let mut offset = 1;
    for (gi, g) in ds.graphs().iter().enumerate() {
        for &(u, v) in g.edges() {
            a.push_str(&format!("{}, {}\n{}, {}\n", u + offset, v + offset, v + offset, u + offset));
        }
        for &l in g.node_labels() {
            ind.push_str(&format!("{}\n", gi + 1));
            nl.push_str(&format!("{l}\n"));
        }
        gl.push_str(&format!("{}\n", g.graph_label().unwrap_or(0)));
        offset += g.node_count();
    }
    for (suffix, body) in [("A", a), ("graph_indicator", ind), ("graph_labels", gl), ("node_labels", nl)] {
        let path = file_path(root, name, suffix);
        fs::write(&path, body).map_err(|source| DatasetError::Io { path, source })?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_fixture(dir: &Path, name: &str, a: &str, ind: &str, gl: &str, nl: &str) {
        for (suffix, body) in [("A", a), ("graph_indicator", ind), ("graph_labels", gl), ("node_labels", nl)] {
            fs::write(file_path(dir, name, suffix), body).unwrap();
        }
    }

    #[test]
    fn merges_directed_duplicates() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "T", "1, 2\n2, 1\n", "1\n1\n2\n", "0\n1\n", "3\n5\n3\n");
        let ds = parse_tudataset(dir.path(), "T").unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.graphs()[0].node_count(), 2);
        assert_eq!(ds.graphs()[0].edges(), &[(0, 1)]);
        assert_eq!(ds.graphs()[1].node_count(), 1);
        assert_eq!(ds.graphs()[1].edge_count(), 0);
        assert_eq!(ds.graphs()[0].node_labels(), &[0, 1]);
        assert_eq!(ds.label_alphabet_size(), 2);
        assert_eq!(ds.num_classes(), 2);
    }

    #[test]
    fn single_node_no_edges() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "S", "", "1\n", "7\n", "0\n");
        let ds = parse_tudataset(dir.path(), "S").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.graphs()[0].node_count(), 1);
        assert!(ds.graphs()[0].edges().is_empty());
        assert_eq!(ds.graphs()[0].graph_label(), Some(0));
    }

    #[test]
    fn accepts_crlf_and_tight_commas() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "C", "1,2\r\n2,3\r\n", "1\r\n1\r\n1\r\n", "-1\r\n", "0\r\n0\r\n1\r\n");
        let ds = parse_tudataset(dir.path(), "C").unwrap();
        assert_eq!(ds.graphs()[0].edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn class_labels_are_remapped_in_sorted_order() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "R", "", "1\n2\n3\n", "1\n-1\n1\n", "0\n0\n0\n");
        let ds = parse_tudataset(dir.path(), "R").unwrap();
        assert_eq!(ds.labels(), Some(vec![1, 0, 1]));
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(file_path(dir.path(), "M", "A"), "").unwrap();
        let err = parse_tudataset(dir.path(), "M").unwrap_err();
        match err {
            DatasetError::MissingFile(p) => assert!(p.ends_with("M_graph_indicator.txt")),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn cross_graph_edge_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "X", "1, 2\n2, 3\n", "1\n1\n2\n", "0\n1\n", "0\n0\n0\n");
        match parse_tudataset(dir.path(), "X").unwrap_err() {
            DatasetError::Format { file, line, .. } => {
                assert!(file.ends_with("X_A.txt"));
                assert_eq!(line, 2);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn out_of_range_node_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        write_fixture(dir.path(), "O", "1, 2\n\n2, 9\n", "1\n1\n", "0\n", "0\n0\n");
        match parse_tudataset(dir.path(), "O").unwrap_err() {
            DatasetError::Format { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other}"),
        }
    }

    fn arb_dataset() -> impl Strategy<Value = DomainDataset> {
        let graph = (1usize..7).prop_flat_map(|n| {
            (
                Just(n),
                prop::collection::vec(any::<bool>(), n * (n - 1) / 2),
                prop::collection::vec(0u32..3, n),
                0usize..2,
            )
        });
        prop::collection::vec(graph, 1..6).prop_map(|specs| {
            let mut graphs: Vec<Graph> = specs
                .into_iter()
                .map(|(n, mask, labels, y)| {
                    let pairs = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v)));
                    let edges: Vec<_> = pairs.zip(mask).filter(|(_, m)| *m).map(|(e, _)| e).collect();
                    Graph::new(n, edges, labels, Some(y)).unwrap()
                })
                .collect();
            // make both alphabets dense so the sorted remap is the identity
            graphs.push(Graph::new(3, [(0, 1)], vec![0, 1, 2], Some(0)).unwrap());
            graphs.push(Graph::new(1, [], vec![0], Some(1)).unwrap());
            DomainDataset::new(graphs, Domain::Source, 2, 3).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn write_then_parse_is_identity(ds in arb_dataset()) {
            let dir = tempfile::tempdir().unwrap();
            write_tudataset(&ds, dir.path(), "RT").unwrap();
            let back = parse_tudataset(dir.path(), "RT").unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
