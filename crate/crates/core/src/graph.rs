//! Residue graph built from the template and its symmetric degree normalization.

use std::collections::BTreeSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{norm, sub, Conformation};

/// Minimum sequence separation for distance-based contact edges.
pub const CONTACT_MIN_SEPARATION: usize = 3;

/// Default Cα contact cutoff (Å) when no explicit edge list is given.
pub const DEFAULT_CONTACT_CUTOFF: f64 = 6.0;

/// Undirected residue graph with `(dᵢdⱼ)^(-1/2)` aggregation weights.
///
/// Indices are 0-based. Self-contributions are implicit: each node aggregates
/// over `N(i) ∪ {i}` and `dᵢ = |N(i) ∪ {i}|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProteinGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    norm_weights: Vec<Vec<(usize, f64)>>,
}

impl ProteinGraph {
    /// Builds a graph from an explicit undirected edge set (pairs are normalized to `i < j`).
    pub fn from_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if node_count == 0 {
            return Err(Error::InvalidInput("graph needs at least one node".into()));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= node_count || j >= node_count {
                return Err(Error::InvalidInput(format!(
                    "edge ({}, {}) out of range for {node_count} nodes",
                    i + 1,
                    j + 1
                )));
            }
            if i == j {
                return Err(Error::InvalidInput(format!("self-loop on node {}", i + 1)));
            }
            set.insert((i.min(j), i.max(j)));
        }
        let edges: Vec<(usize, usize)> = set.into_iter().collect();
        let norm_weights = normalization(node_count, &edges);
        Ok(Self {
            node_count,
            edges,
            norm_weights,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Sorted undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// `(j, weight)` pairs over `N(i) ∪ {i}` for each node, ascending in `j`.
    pub fn norm_weights(&self) -> &[Vec<(usize, f64)>] {
        &self.norm_weights
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.norm_weights.iter().map(Vec::len).collect()
    }

    /// Applies the normalized aggregation to an `N×k` row-major feature block.
    pub fn aggregate(&self, features: &[f64], k: usize) -> Result<Vec<f64>> {
        if k == 0 || features.len() != self.node_count * k {
            return Err(Error::Dimension(format!(
                "features of length {} do not form {}×{k}",
                features.len(),
                self.node_count
            )));
        }
        let mut out = vec![0.0; features.len()];
        self.aggregate_into(features, k, &mut out);
        Ok(out)
    }

    /// Unchecked aggregation into a preallocated buffer.
    pub(crate) fn aggregate_into(&self, features: &[f64], k: usize, out: &mut [f64]) {
        for (i, row) in self.norm_weights.iter().enumerate() {
            let dst = &mut out[i * k..(i + 1) * k];
            dst.fill(0.0);
            for &(j, w) in row {
                let src = &features[j * k..(j + 1) * k];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

fn normalization(node_count: usize, edges: &[(usize, usize)]) -> Vec<Vec<(usize, f64)>> {
    let mut neighbours: Vec<Vec<usize>> = (0..node_count).map(|i| vec![i]).collect();
    for &(i, j) in edges {
        neighbours[i].push(j);
        neighbours[j].push(i);
    }
    for n in &mut neighbours {
        n.sort_unstable();
    }
    let degree: Vec<f64> = neighbours.iter().map(|n| n.len() as f64).collect();
    neighbours
        .iter()
        .enumerate()
        .map(|(i, n)| n.iter().map(|&j| (j, 1.0 / (degree[i] * degree[j]).sqrt())).collect())
        .collect()
}

/// Residue graph from the template: peptide-bond chain edges plus either explicit
/// secondary-structure edges or, failing that, Cα contacts within `contact_cutoff`.
pub fn build_graph(
    template: &Conformation,
    extra_edges: Option<&[(usize, usize)]>,
    contact_cutoff: Option<f64>,
) -> Result<ProteinGraph> {
    let n = template.residue_count();
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    if let Some(cutoff) = contact_cutoff {
        if !(cutoff > 0.0) {
            return Err(Error::InvalidInput(format!("contact cutoff must be positive, got {cutoff}")));
        }
    }
    match (extra_edges, contact_cutoff) {
        (Some(extra), _) => edges.extend_from_slice(extra),
        (None, Some(cutoff)) => {
            let x = template.coords();
            for i in 0..n {
                for j in i + CONTACT_MIN_SEPARATION..n {
                    if norm(sub(x[i], x[j])) <= cutoff {
                        edges.push((i, j));
                    }
                }
            }
        }
        (None, None) => {}
    }
    ProteinGraph::from_edges(n, edges)
}

/// Parses an edge-list file: one `i j` pair per line, 1-based, `#` starts a comment.
pub fn read_edge_list(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path)?;
    parse_edge_list(&text, path)
}

pub(crate) fn parse_edge_list(text: &str, path: &Path) -> Result<Vec<(usize, usize)>> {
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            message,
        };
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(err(format!("expected two indices, found '{content}'")));
        }
        let parse = |s: &str| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(err(format!("'{s}' is not a 1-based residue index"))),
            }
        };
        edges.push((parse(fields[0])?, parse(fields[1])?));
    }
    Ok(edges)
}

/// Writes edges (0-based in memory) as a 1-based edge-list file.
pub fn write_edge_list(path: &Path, edges: &[(usize, usize)]) -> Result<()> {
    let mut text = String::from("# residue pairs, 1-based\n");
    for (i, j) in edges {
        text.push_str(&format!("{} {}\n", i + 1, j + 1));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn line(n: usize, spacing: f64) -> Conformation {
        Conformation::new((0..n).map(|i| [i as f64 * spacing, 0.0, 0.0]).collect()).unwrap()
    }

    fn random_graph(rng: &mut impl Rng, n: usize) -> ProteinGraph {
        let mut extra = Vec::new();
        for i in 0..n {
            for j in i + 2..n {
                if rng.random_bool(0.2) {
                    extra.push((i, j));
                }
            }
        }
        build_graph(&line(n, 3.8), Some(&extra), None).unwrap()
    }

    #[test]
    fn pure_chain_degrees() {
        let g = build_graph(&line(3, 3.8), None, None).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert_eq!(g.degrees(), vec![2, 3, 2]);
    }

    #[test]
    fn straight_chain_has_no_contacts() {
        let g = build_graph(&line(4, 3.8), None, Some(6.0)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn contacts_respect_separation() {
        // a tight zig-zag where (0, 2) is close but too near in sequence
        let x = Conformation::new(vec![
            [0.0, 0.0, 0.0],
            [3.8, 0.0, 0.0],
            [3.8, 3.8, 0.0],
            [0.0, 3.8, 0.0],
        ])
        .unwrap();
        let g = build_graph(&x, None, Some(6.0)).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (0, 3), (1, 2), (2, 3)]);
    }

    #[test]
    fn invalid_inputs() {
        let x = line(4, 3.8);
        assert!(build_graph(&x, Some(&[(0, 4)]), None).is_err());
        assert!(build_graph(&x, Some(&[(2, 2)]), None).is_err());
        assert!(build_graph(&x, None, Some(0.0)).is_err());
        assert!(build_graph(&x, None, Some(-1.0)).is_err());
    }

    #[test]
    fn isolated_node_aggregation_is_identity() {
        let g = ProteinGraph::from_edges(1, []).unwrap();
        assert_eq!(g.aggregate(&[2.5, -1.0], 2).unwrap(), vec![2.5, -1.0]);
    }

    #[test]
    fn two_node_hand_evaluation() {
        let g = ProteinGraph::from_edges(2, [(0, 1)]).unwrap();
        let out = g.aggregate(&[1.0, 0.0, 0.0, 1.0], 2).unwrap();
        assert_eq!(out, vec![0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn aggregate_shape_mismatch() {
        let g = ProteinGraph::from_edges(3, [(0, 1)]).unwrap();
        assert!(matches!(g.aggregate(&[0.0; 5], 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn aggregation_is_linear_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 12);
            let k = 3;
            let a: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..36).map(|_| rng.random_range(-1.0..1.0)).collect();
            let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let ga = g.aggregate(&a, k).unwrap();
            let gb = g.aggregate(&b, k).unwrap();
            let gs = g.aggregate(&sum, k).unwrap();
            for i in 0..36 {
                assert!((gs[i] - ga[i] - gb[i]).abs() < 1e-12);
            }
            let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
            assert!((dot(&ga, &b) - dot(&a, &gb)).abs() < 1e-9);
        }
    }

    #[test]
    fn spectral_norm_at_most_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..10 {
            let g = random_graph(&mut rng, 15);
            let mut v: Vec<f64> = (0..15).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut lambda = 0.0;
            for _ in 0..500 {
                let w = g.aggregate(&v, 1).unwrap();
                lambda = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                v = w.iter().map(|x| x / lambda).collect();
            }
            assert!(lambda <= 1.0 + 1e-9, "spectral norm {lambda}");
        }
    }

    #[test]
    fn stored_weights_match_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let g = random_graph(&mut rng, 10);
        let again = normalization(g.node_count(), g.edges());
        for (r0, r1) in g.norm_weights().iter().zip(&again) {
            for ((j0, w0), (j1, w1)) in r0.iter().zip(r1) {
                assert_eq!(j0, j1);
                assert!((w0 - w1).abs() < 1e-12);
            }
        }
        let g2 = build_graph(&line(10, 3.8), Some(g.edges()), None).unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn edge_list_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("edges.txt");
        write_edge_list(&path, &[(0, 4), (2, 7)]).unwrap();
        assert_eq!(read_edge_list(&path).unwrap(), vec![(0, 4), (2, 7)]);

        let text = "# header\n1 5  # helix\n\n3 x\n";
        match parse_edge_list(text, Path::new("e.txt")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert!(parse_edge_list("0 1\n", Path::new("e.txt")).is_err());
    }
}
