//! Graph attention over the learned sensor graph.
//!
//! Each sensor's window features are projected through a shared matrix,
//! fused with its embedding by elementwise addition, and scored against
//! each in-neighbour by a small feed-forward on the concatenated pair.
//! Scores pass LeakyReLU then a per-row softmax; the aggregated neighbour
//! features go through a sigmoid. Multiple heads share the projection,
//! keep separate scoring networks, and average their outputs.

use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::rng::Rng;
use crate::tensor::{Tape, TensorRef};

/// Negative slope used both on raw scores and inside the scoring network.
const LEAKY_SLOPE: f64 = 0.2;

pub struct HeadParams {
    pub w1: TensorRef,
    pub b1: TensorRef,
    pub w2: TensorRef,
    pub b2: TensorRef,
}

pub struct AttentionLayer {
    /// Shared (w_in, d) projection applied to every sensor window.
    pub w_proj: TensorRef,
    pub heads: Vec<HeadParams>,
    pub d: usize,
    pub hidden: usize,
}

pub struct AttentionOutput {
    /// (B*N, d) aggregated features, post sigmoid, averaged over heads.
    pub z: TensorRef,
    /// (B*N, k_eff) attention weights of the last head; rows sum to 1.
    pub alpha: TensorRef,
}

fn uniform_matrix(tape: &mut Tape, rows: usize, cols: usize, rng: &mut Rng) -> Result<TensorRef> {
    let bound = 1.0 / (rows as f64).sqrt();
    let v: Vec<f64> = (0..rows * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
    tape.param(&[rows, cols], v)
}

impl AttentionLayer {
    pub fn new(
        tape: &mut Tape,
        w_in: usize,
        d: usize,
        hidden: usize,
        n_heads: usize,
        rng: &mut Rng,
    ) -> Result<AttentionLayer> {
        if n_heads == 0 {
            return Err(Error::Config("attention needs at least one head".into()));
        }
        if hidden == 0 || d == 0 || w_in == 0 {
            return Err(Error::Config("attention dimensions must be positive".into()));
        }
        let w_proj = uniform_matrix(tape, w_in, d, rng)?;
        let mut heads = Vec::with_capacity(n_heads);
        for _ in 0..n_heads {
            let w1 = uniform_matrix(tape, 2 * d, hidden, rng)?;
            let b1 = tape.param(&[hidden], vec![0.0; hidden])?;
            let w2 = uniform_matrix(tape, hidden, 1, rng)?;
            let b2 = tape.param(&[1], vec![0.0])?;
            heads.push(HeadParams { w1, b1, w2, b2 });
        }
        Ok(AttentionLayer { w_proj, heads, d, hidden })
    }

    /// Parameter handles in a fixed order, for optimizers and checkpoints.
    pub fn params(&self) -> Vec<TensorRef> {
        let mut p = vec![self.w_proj];
        for h in &self.heads {
            p.extend([h.w1, h.b1, h.w2, h.b2]);
        }
        p
    }

    /// `y` is (B*N, w_in) window features, `embeddings` the (N, d) sensor
    /// embedding matrix. Returns (B*N, d) aggregated features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        y: TensorRef,
        embeddings: TensorRef,
        graph: &SensorGraph,
        batch: usize,
    ) -> Result<AttentionOutput> {
        let n = graph.n_sensors();
        if graph.k_eff == 0 {
            return Err(Error::Config(
                "every sensor needs at least one neighbor for attention".into(),
            ));
        }
        if tape.shape(y)[0] != batch * n {
            return Err(Error::Contract(format!(
                "window features have {} rows, expected batch {batch} x {n} sensors",
                tape.shape(y)[0]
            )));
        }

        let h = tape.matmul(y, self.w_proj)?;
        let c_tiled = tape.tile_rows(embeddings, batch)?;
        let g = tape.add(h, c_tiled)?;

        // Target-major edge list: all in-edges of (item 0, node 0), then
        // (item 0, node 1), ... giving uniform groups of size k_eff.
        let n_edges = batch * n * graph.k_eff;
        let mut tgt_rows = Vec::with_capacity(n_edges);
        let mut src_rows = Vec::with_capacity(n_edges);
        for b in 0..batch {
            for (i, row) in graph.rows.iter().enumerate() {
                for &j in row {
                    tgt_rows.push(b * n + i);
                    src_rows.push(b * n + j);
                }
            }
        }

        let gi = tape.gather_rows(g, &tgt_rows)?;
        let gj = tape.gather_rows(g, &src_rows)?;
        let pair = tape.concat_cols(&[gi, gj])?;
        let h_src = tape.gather_rows(h, &src_rows)?;

        let mut z_heads = Vec::with_capacity(self.heads.len());
        let mut alpha_last = None;
        for head in &self.heads {
            let a1 = tape.matmul(pair, head.w1)?;
            let a1b = tape.add(a1, head.b1)?;
            let hid = tape.leaky_relu(a1b, LEAKY_SLOPE)?;
            let s = tape.matmul(hid, head.w2)?;
            let s = tape.add(s, head.b2)?;
            let s_rows = tape.reshape(s, &[batch * n, graph.k_eff])?;
            let act = tape.leaky_relu(s_rows, LEAKY_SLOPE)?;
            let alpha = tape.softmax(act, 1)?;
            let alpha_col = tape.reshape(alpha, &[n_edges, 1])?;
            let weighted = tape.mul(alpha_col, h_src)?;
            let summed = tape.segment_sum_rows(weighted, graph.k_eff)?;
            z_heads.push(tape.sigmoid(summed)?);
            alpha_last = Some(alpha);
        }

        let mut layer = z_heads;
        while layer.len() > 1 {
            let mut next = Vec::with_capacity(layer.len().div_ceil(2));
            for pair in layer.chunks(2) {
                next.push(if pair.len() == 2 { tape.add(pair[0], pair[1])? } else { pair[0] });
            }
            layer = next;
        }
        let z = tape.scale(layer[0], 1.0 / self.heads.len() as f64)?;
        Ok(AttentionOutput { z, alpha: alpha_last.unwrap() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete_graph(n: usize) -> SensorGraph {
        let rows = (0..n)
            .map(|i| (0..n).filter(|&j| j != i).collect())
            .collect();
        SensorGraph { rows, k_eff: n - 1 }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(31);
        let (n, w, d, b) = (5, 6, 4, 3);
        let layer = AttentionLayer::new(&mut tape, w, d, d, 2, &mut rng).unwrap();
        let emb = tape.param(&[n, d], (0..n * d).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
        let y = tape
            .param(&[b * n, w], (0..b * n * w).map(|i| (i as f64 * 0.07).sin()).collect())
            .unwrap();
        let g = complete_graph(n);
        let out = layer.forward(&mut tape, y, emb, &g, b).unwrap();
        let alpha = tape.values(out.alpha);
        for row in alpha.chunks(g.k_eff) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
        }
        assert_eq!(tape.shape(out.z), &[b * n, d]);
    }

    #[test]
    fn single_neighbor_gets_weight_one_and_sigmoid_of_its_features() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(32);
        let (n, w) = (2, 3);
        // Identity projection makes h equal the raw window features.
        let layer = AttentionLayer::new(&mut tape, w, w, 4, 1, &mut rng).unwrap();
        let mut ident = vec![0.0; w * w];
        for i in 0..w {
            ident[i * w + i] = 1.0;
        }
        tape.values_mut(layer.w_proj).copy_from_slice(&ident);
        let emb = tape.param(&[n, w], vec![0.3; n * w]).unwrap();
        let ys = vec![1.0, -2.0, 0.5, 0.25, 4.0, -1.0];
        let y = tape.param(&[n, w], ys.clone()).unwrap();
        let g = SensorGraph { rows: vec![vec![1], vec![0]], k_eff: 1 };
        let out = layer.forward(&mut tape, y, emb, &g, 1).unwrap();
        assert_eq!(tape.values(out.alpha), &[1.0, 1.0]);
        let z = tape.values(out.z);
        for t in 0..w {
            assert!((z[t] - sigmoid(ys[w + t])).abs() < 1e-12, "node 0 col {t}");
            assert!((z[w + t] - sigmoid(ys[t])).abs() < 1e-12, "node 1 col {t}");
        }
    }

    #[test]
    fn zero_scoring_network_gives_uniform_weights() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(33);
        let (n, w, d) = (4, 5, 3);
        let layer = AttentionLayer::new(&mut tape, w, d, d, 1, &mut rng).unwrap();
        for h in &layer.heads {
            tape.values_mut(h.w1).fill(0.0);
            tape.values_mut(h.w2).fill(0.0);
        }
        let emb = tape.param(&[n, d], (0..n * d).map(|i| i as f64 * 0.1).collect()).unwrap();
        let y = tape.param(&[n, w], (0..n * w).map(|i| (i as f64).sin()).collect()).unwrap();
        let g = complete_graph(n);
        let out = layer.forward(&mut tape, y, emb, &g, 1).unwrap();
        for &a in tape.values(out.alpha) {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_neighbor_features_give_one_half_everywhere() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(34);
        let (n, w, d) = (3, 4, 5);
        let layer = AttentionLayer::new(&mut tape, w, d, d, 2, &mut rng).unwrap();
        let emb = tape.param(&[n, d], (0..n * d).map(|i| i as f64 * 0.2 - 1.0).collect()).unwrap();
        let y = tape.param(&[n, w], vec![0.0; n * w]).unwrap();
        let g = complete_graph(n);
        let out = layer.forward(&mut tape, y, emb, &g, 1).unwrap();
        for &v in tape.values(out.z) {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn neighborhood_order_does_not_change_the_output() {
        let build = |order: Vec<usize>| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = Rng::new(35);
            let (n, w, d) = (4, 3, 3);
            let layer = AttentionLayer::new(&mut tape, w, d, d, 1, &mut rng).unwrap();
            let emb = tape.param(&[n, d], (0..n * d).map(|i| (i as f64 * 0.3).cos()).collect()).unwrap();
            let y = tape.param(&[n, w], (0..n * w).map(|i| (i as f64 * 0.5).sin()).collect()).unwrap();
            let mut g = complete_graph(n);
            g.rows[0] = order;
            let out = layer.forward(&mut tape, y, emb, &g, 1).unwrap();
            tape.values(out.z).to_vec()
        };
        let a = build(vec![1, 2, 3]);
        let b = build(vec![3, 1, 2]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shifting_activated_scores_leaves_weights_unchanged() {
        // The layer normalizes post-LeakyReLU scores with a row softmax; a
        // constant added to a whole row must cancel.
        let mut tape = Tape::new();
        let act = tape.param(&[2, 3], vec![0.4, -1.2, 2.0, 0.0, 0.3, -0.7]).unwrap();
        let base = tape.softmax(act, 1).unwrap();
        let shifted_in = tape.add_scalar(act, 5.5).unwrap();
        let shifted = tape.softmax(shifted_in, 1).unwrap();
        for (a, b) in tape.values(base).iter().zip(tape.values(shifted)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_neighborhood_is_a_config_error() {
        let mut tape = Tape::new();
        let mut rng = Rng::new(36);
        let layer = AttentionLayer::new(&mut tape, 3, 3, 3, 1, &mut rng).unwrap();
        let emb = tape.param(&[1, 3], vec![0.1, 0.2, 0.3]).unwrap();
        let y = tape.param(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let g = SensorGraph { rows: vec![vec![]], k_eff: 0 };
        assert!(matches!(
            layer.forward(&mut tape, y, emb, &g, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_heads_average_to_a_single_head() {
        let run = |heads: usize| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut rng = Rng::new(37);
            let (n, w, d) = (3, 4, 2);
            let layer = AttentionLayer::new(&mut tape, w, d, d, heads, &mut rng).unwrap();
            // Overwrite every head with the first head's drawn values.
            let first: Vec<Vec<f64>> = [
                layer.heads[0].w1,
                layer.heads[0].b1,
                layer.heads[0].w2,
                layer.heads[0].b2,
            ]
            .iter()
            .map(|&r| tape.values(r).to_vec())
            .collect();
            for h in &layer.heads[1..] {
                for (&r, vals) in [h.w1, h.b1, h.w2, h.b2].iter().zip(&first) {
                    tape.values_mut(r).copy_from_slice(vals);
                }
            }
            let emb = tape.param(&[n, d], (0..n * d).map(|i| i as f64 * 0.4).collect()).unwrap();
            let y = tape.param(&[n, w], (0..n * w).map(|i| (i as f64).cos()).collect()).unwrap();
            let g = complete_graph(n);
            let out = layer.forward(&mut tape, y, emb, &g, 1).unwrap();
            tape.values(out.z).to_vec()
        };
        let one = run(1);
        let two = run(2);
        for (a, b) in one.iter().zip(&two) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn all_attention_parameters_pass_finite_differences() {
        let (n, w, d, hid, heads, b) = (3usize, 4usize, 3usize, 3usize, 2usize, 1usize);
        let emb_vals: Vec<f64> = (0..n * d).map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.2).collect();
        let y_vals: Vec<f64> = (0..b * n * w).map(|i| ((i * 5 % 11) as f64 - 5.0) * 0.15).collect();

        let eval = |perturb: Option<(usize, usize, f64)>| -> (f64, Vec<Vec<f64>>) {
            let mut tape = Tape::new();
            let mut rng = Rng::new(38);
            let layer = AttentionLayer::new(&mut tape, w, d, hid, heads, &mut rng).unwrap();
            let params = layer.params();
            if let Some((p, i, delta)) = perturb {
                tape.values_mut(params[p])[i] += delta;
            }
            tape.freeze_params();
            let emb = tape.constant(&[n, d], emb_vals.clone()).unwrap();
            let y = tape.constant(&[b * n, w], y_vals.clone()).unwrap();
            let g = complete_graph(n);
            let out = layer.forward(&mut tape, y, emb, &g, b).unwrap();
            let loss = tape.mean_all(out.z).unwrap();
            let value = tape.values(loss)[0];
            if perturb.is_none() {
                tape.backward(loss).unwrap();
                let grads = params.iter().map(|&r| tape.grad(r).to_vec()).collect();
                (value, grads)
            } else {
                (value, Vec::new())
            }
        };

        let (_, grads) = eval(None);
        let h = 1e-6;
        let mut checked = 0;
        for (p, g) in grads.iter().enumerate() {
            for i in (0..g.len()).step_by(3) {
                let (fp, _) = eval(Some((p, i, h)));
                let (fm, _) = eval(Some((p, i, -h)));
                let fd = (fp - fm) / (2.0 * h);
                // Floor guards against FD truncation noise on near-zero grads.
                let denom = fd.abs().max(g[i].abs()).max(1e-6);
                assert!(
                    (fd - g[i]).abs() / denom < 1e-4,
                    "param {p} elem {i}: fd {fd} vs grad {}",
                    g[i]
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "checked only {checked} coordinates");
    }
}
