//! Sublevel-set persistence on filtered sensor graphs.
//!
//! A filtration view assigns each node a real value; thresholds sweep
//! ascending quantiles of those values. Nodes enter when their value drops
//! below the threshold, edges when both endpoints are in. Union-find with
//! the elder rule yields one 0-dimensional bar per node; each edge that
//! closes a cycle yields a 1-dimensional bar that never dies (graphs carry
//! no faces). A brute-force Betti oracle rebuilds every sublevel subgraph
//! from scratch for cross-checking.

pub mod barcode;
mod union_find;

use union_find::UnionFind;

/// Offset separating the two thresholds of a degenerate (constant) view.
pub const DEGENERATE_SPREAD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Dim0Bar {
    /// The node whose entry created this component.
    pub node: usize,
    pub birth_idx: usize,
    pub death_idx: usize,
    pub essential: bool,
    /// The merge edge that killed the component; None for essential bars.
    pub killer: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dim1Bar {
    /// The edge whose insertion closed the cycle.
    pub edge: (usize, usize),
    pub birth_idx: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PersistenceDiagram {
    /// Exactly one bar per node, indexed by node.
    pub dim0: Vec<Dim0Bar>,
    pub dim1: Vec<Dim1Bar>,
    pub n_thresholds: usize,
}

/// Linearly interpolated quantile of an ascending slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty slice");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// The n+1 uniform quantiles of `values`, deduplicated to a strictly
/// ascending list. A constant input degenerates to {v, v + 1e-9}; the flag
/// reports that case. The last threshold always equals the maximum value,
/// so the final sublevel graph contains every node.
pub fn quantile_thresholds(values: &[f64], n: usize) -> (Vec<f64>, bool) {
    assert!(n >= 1, "need at least one filtration step");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = sorted[0];
    let hi = sorted[sorted.len() - 1];
    if lo == hi {
        return (vec![lo, lo + DEGENERATE_SPREAD], true);
    }
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = quantile_sorted(&sorted, i as f64 / n as f64);
        if out.last().is_none_or(|&prev| t > prev) {
            out.push(t);
        }
    }
    (out, false)
}

/// First threshold index admitting `value`, clamped into range.
fn entry_index(thresholds: &[f64], value: f64) -> usize {
    thresholds
        .partition_point(|&a| a < value)
        .min(thresholds.len() - 1)
}

/// Runs the filtration sweep. `edges` is an undirected edge list (treated
/// as a multiset; parallel edges each close a cycle). Thresholds must be
/// strictly ascending with the last one at or above every node value.
pub fn persistence(
    values: &[f64],
    edges: &[(usize, usize)],
    thresholds: &[f64],
) -> PersistenceDiagram {
    let n = values.len();
    let n_thr = thresholds.len();
    assert!(n_thr >= 1, "need at least one threshold");

    let births: Vec<usize> = values.iter().map(|&v| entry_index(thresholds, v)).collect();

    let mut nodes_at: Vec<Vec<usize>> = vec![Vec::new(); n_thr];
    for (v, &b) in births.iter().enumerate() {
        nodes_at[b].push(v);
    }
    let mut edges_at: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_thr];
    let mut sorted_edges: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(u, v)| (u.min(v), u.max(v)))
        .collect();
    sorted_edges.sort_unstable();
    for (u, v) in sorted_edges {
        edges_at[births[u].max(births[v])].push((u, v));
    }

    let mut uf = UnionFind::new(n);
    let mut deaths: Vec<Option<(usize, (usize, usize))>> = vec![None; n];
    let mut dim1 = Vec::new();
    for j in 0..n_thr {
        for &v in &nodes_at[j] {
            uf.activate(v, j);
        }
        for &(u, v) in &edges_at[j] {
            match uf.union(u, v) {
                Some((_, creator)) => deaths[creator] = Some((j, (u, v))),
                None => dim1.push(Dim1Bar { edge: (u, v), birth_idx: j }),
            }
        }
    }

    let dim0 = (0..n)
        .map(|v| match deaths[v] {
            Some((j, edge)) => Dim0Bar {
                node: v,
                birth_idx: births[v],
                death_idx: j,
                essential: false,
                killer: Some(edge),
            },
            None => Dim0Bar {
                node: v,
                birth_idx: births[v],
                death_idx: n_thr - 1,
                essential: true,
                killer: None,
            },
        })
        .collect();

    PersistenceDiagram { dim0, dim1, n_thresholds: n_thr }
}

/// Number of (dim0, dim1) bars alive at threshold index `j`. A component
/// that merges at `j` is already gone at `j`; cycles never die.
pub fn alive_counts(diag: &PersistenceDiagram, j: usize) -> (usize, usize) {
    let d0 = diag
        .dim0
        .iter()
        .filter(|b| b.birth_idx <= j && (b.essential || b.death_idx > j))
        .count();
    let d1 = diag.dim1.iter().filter(|b| b.birth_idx <= j).count();
    (d0, d1)
}

/// Brute-force Betti curve: rebuilds the sublevel subgraph at every
/// threshold, counts components by search, and uses beta1 = E - V + beta0.
pub fn oracle_betti(
    values: &[f64],
    edges: &[(usize, usize)],
    thresholds: &[f64],
) -> Vec<(usize, usize)> {
    let n = values.len();
    let mut out = Vec::with_capacity(thresholds.len());
    for &a in thresholds {
        let kept: Vec<bool> = values.iter().map(|&v| v <= a).collect();
        let kept_edges: Vec<(usize, usize)> = edges
            .iter()
            .copied()
            .filter(|&(u, v)| kept[u] && kept[v])
            .collect();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for &(u, v) in &kept_edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; n];
        let mut beta0 = 0usize;
        for s in 0..n {
            if !kept[s] || seen[s] {
                continue;
            }
            beta0 += 1;
            let mut stack = vec![s];
            seen[s] = true;
            while let Some(u) = stack.pop() {
                for &w in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        let v_count = kept.iter().filter(|&&k| k).count();
        let beta1 = kept_edges.len() + beta0 - v_count;
        out.push((beta0, beta1));
    }
    out
}
