//! Directed Top-K sensor graph learned from embedding similarity.
//!
//! Each sensor carries a learnable embedding vector; cosine similarity
//! between embeddings ranks candidate neighbours, and every sensor keeps
//! directed edges to its top min(k, N-1) peers. The adjacency is rebuilt
//! once per training epoch from the current embedding values and frozen
//! after training.

use crate::rng::Rng;

/// Guards against zero-norm embeddings in the cosine denominator.
const NORM_GUARD: f64 = 1e-12;

/// Directed neighbour lists. `rows[i]` holds the peers j with an edge j -> i
/// contributes to i's aggregation; every row is sorted ascending and has
/// exactly `k_eff` entries, never including i itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorGraph {
    pub rows: Vec<Vec<usize>>,
    pub k_eff: usize,
}

impl SensorGraph {
    pub fn n_sensors(&self) -> usize {
        self.rows.len()
    }

    pub fn n_edges(&self) -> usize {
        self.rows.len() * self.k_eff
    }

    /// Undirected edge set (i < j, sorted, deduplicated). This is the graph
    /// the persistence stage filters.
    pub fn undirected_edges(&self) -> Vec<(usize, usize)> {
        let mut edges: Vec<(usize, usize)> = Vec::with_capacity(self.n_edges());
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                edges.push((i.min(j), i.max(j)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Graphviz rendering of the directed adjacency.
    pub fn to_dot(&self, names: &[String]) -> String {
        let mut out = String::from("digraph sensors {\n  rankdir=LR;\n");
        let label = |i: usize| {
            names
                .get(i)
                .cloned()
                .unwrap_or_else(|| format!("s{i}"))
        };
        for i in 0..self.rows.len() {
            out.push_str(&format!("  \"{}\";\n", label(i)));
        }
        for (i, row) in self.rows.iter().enumerate() {
            for &j in row {
                out.push_str(&format!("  \"{}\" -> \"{}\";\n", label(j), label(i)));
            }
        }
        out.push_str("}\n");
        out
    }
}

/// Seeded embedding init: i.i.d. standard normal scaled by 1/sqrt(d).
pub fn init_embeddings(n: usize, d: usize, rng: &mut Rng) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    (0..n * d).map(|_| scale * rng.normal()).collect()
}

/// Dense N x N cosine similarity of embedding rows.
pub fn cosine_similarity(embeddings: &[f64], n: usize, d: usize) -> Vec<f64> {
    assert_eq!(embeddings.len(), n * d, "embedding buffer shape mismatch");
    let norms: Vec<f64> = (0..n)
        .map(|i| {
            let row = &embeddings[i * d..(i + 1) * d];
            row.iter().map(|v| v * v).sum::<f64>().sqrt() + NORM_GUARD
        })
        .collect();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: f64 = (0..d).map(|t| embeddings[i * d + t] * embeddings[j * d + t]).sum();
            sim[i * n + j] = dot / (norms[i] * norms[j]);
        }
    }
    sim
}

/// Row-wise Top-K selection over a similarity matrix; ties prefer the lower
/// index, self-loops are excluded, and k is clamped to N-1 with a warning.
pub fn adjacency_from_similarity(sim: &[f64], n: usize, k: usize) -> SensorGraph {
    assert_eq!(sim.len(), n * n, "similarity buffer shape mismatch");
    let k_eff = if n == 0 {
        0
    } else if k >= n {
        log::warn!("top-k {k} >= sensor count {n}; clamping to {}", n - 1);
        n - 1
    } else {
        k
    };
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let mut candidates: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        candidates.sort_by(|&a, &b| {
            sim[i * n + b].total_cmp(&sim[i * n + a]).then(a.cmp(&b))
        });
        let mut row: Vec<usize> = candidates.into_iter().take(k_eff).collect();
        row.sort_unstable();
        rows.push(row);
    }
    SensorGraph { rows, k_eff }
}

pub fn build_adjacency(embeddings: &[f64], n: usize, d: usize, k: usize) -> SensorGraph {
    adjacency_from_similarity(&cosine_similarity(embeddings, n, d), n, k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let e = vec![3.0, 4.0, 3.0, 4.0];
        let sim = cosine_similarity(&e, 2, 2);
        assert!((sim[1] - 1.0).abs() < 1e-9);
        assert!((sim[2] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let e = vec![2.0, 0.0, 0.0, 5.0];
        let sim = cosine_similarity(&e, 2, 2);
        assert_eq!(sim[1], 0.0);
    }

    #[test]
    fn cosine_forty_five_degrees() {
        let e = vec![1.0, 0.0, 1.0, 1.0];
        let sim = cosine_similarity(&e, 2, 2);
        assert!((sim[1] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_embedding_stays_finite() {
        let e = vec![0.0, 0.0, 1.0, 2.0];
        let sim = cosine_similarity(&e, 2, 2);
        assert!(sim.iter().all(|v| v.is_finite()));
        assert_eq!(sim[1], 0.0);
    }

    #[test]
    fn three_node_top_one_enumeration() {
        // Pairwise similarities: (0,1)=0.9, (0,2)=0.1, (1,2)=0.2.
        let sim = vec![
            1.0, 0.9, 0.1, //
            0.9, 1.0, 0.2, //
            0.1, 0.2, 1.0,
        ];
        let g = adjacency_from_similarity(&sim, 3, 1);
        assert_eq!(g.rows, vec![vec![1], vec![0], vec![1]]);
        assert_eq!(g.k_eff, 1);
    }

    #[test]
    fn k_equal_n_minus_one_is_complete_digraph() {
        let sim = vec![0.5; 16];
        let g = adjacency_from_similarity(&sim, 4, 3);
        for (i, row) in g.rows.iter().enumerate() {
            let expect: Vec<usize> = (0..4).filter(|&j| j != i).collect();
            assert_eq!(*row, expect);
        }
    }

    #[test]
    fn equal_similarities_pick_the_lower_index() {
        let sim = vec![
            1.0, 0.7, 0.7, 0.1, //
            0.7, 1.0, 0.3, 0.3, //
            0.7, 0.3, 1.0, 0.0, //
            0.1, 0.3, 0.0, 1.0,
        ];
        let g = adjacency_from_similarity(&sim, 4, 1);
        assert_eq!(g.rows[0], vec![1]);
        assert_eq!(g.rows[1], vec![0]);
        assert_eq!(g.rows[3], vec![1]);
    }

    #[test]
    fn oversized_k_clamps_to_n_minus_one() {
        let sim = vec![0.0; 9];
        let g = adjacency_from_similarity(&sim, 3, 10);
        assert_eq!(g.k_eff, 2);
        for row in &g.rows {
            assert_eq!(row.len(), 2);
        }
    }

    #[test]
    fn out_degree_is_exact_and_rows_exclude_self() {
        let mut rng = Rng::new(99);
        for &(n, d, k) in &[(5usize, 3usize, 2usize), (8, 4, 7), (6, 2, 1), (3, 5, 9)] {
            let e = init_embeddings(n, d, &mut rng);
            let g = build_adjacency(&e, n, d, k);
            let k_eff = k.min(n - 1);
            assert_eq!(g.k_eff, k_eff);
            for (i, row) in g.rows.iter().enumerate() {
                assert_eq!(row.len(), k_eff, "row {i} of n={n} k={k}");
                assert!(row.windows(2).all(|w| w[0] < w[1]), "row {i} sorted strictly");
                assert!(!row.contains(&i), "self-loop at {i}");
            }
        }
    }

    #[test]
    fn adjacency_is_invariant_under_positive_rescale() {
        let mut rng = Rng::new(7);
        let e = init_embeddings(10, 6, &mut rng);
        let scaled: Vec<f64> = e.iter().map(|v| v * 3.7).collect();
        let a = build_adjacency(&e, 10, 6, 3);
        let b = build_adjacency(&scaled, 10, 6, 3);
        assert_eq!(a, b);
    }

    #[test]
    fn rebuild_is_deterministic() {
        let mut rng = Rng::new(21);
        let e = init_embeddings(12, 8, &mut rng);
        assert_eq!(build_adjacency(&e, 12, 8, 4), build_adjacency(&e, 12, 8, 4));
    }

    #[test]
    fn undirected_edges_merge_reciprocal_pairs() {
        let g = SensorGraph { rows: vec![vec![1], vec![0], vec![1]], k_eff: 1 };
        assert_eq!(g.undirected_edges(), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn dot_output_lists_every_edge() {
        let g = SensorGraph { rows: vec![vec![1], vec![0]], k_eff: 1 };
        let names = vec!["pump".to_string(), "valve".to_string()];
        let dot = g.to_dot(&names);
        assert!(dot.contains("\"valve\" -> \"pump\";"));
        assert!(dot.contains("\"pump\" -> \"valve\";"));
        assert!(dot.starts_with("digraph sensors {"));
    }
}
