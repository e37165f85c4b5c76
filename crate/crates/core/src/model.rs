//! Pipeline assembly: windows to per-sensor predictions to anomaly scores.
//!
//! Forward path: multi-scale temporal convolution, graph attention over the
//! learned Top-K sensor graph, then (when enabled) topological pooling:
//! per-view filtration values, sublevel persistence on the disjoint union
//! of the batch's graphs, value-space pair coordinates, point-transform
//! vectorization, and residual fusion. The output stage multiplies each
//! fused row by the softmax-normalized sensor embedding and maps it to a
//! scalar through a small feed-forward stack.
//!
//! Thresholds and bar structure are recomputed from current values and
//! carry no gradient; gradients reach the topology parameters through the
//! pair coordinates, which are differentiable functions of the creating
//! and merging nodes' filtration values.

use std::collections::HashMap;

use crate::attention::AttentionLayer;
use crate::checkpoint::TensorRecord;
use crate::config::RunConfig;
use crate::data::{TimeSeriesFrame, WindowBatch};
use crate::error::{Error, Result};
use crate::graph::{self, SensorGraph};
use crate::rng::Rng;
use crate::temporal::KernelBank;
use crate::tensor::{Tape, TensorRef};
use crate::topology::{self, DEGENERATE_SPREAD};
use crate::vectorize::{FamilyKind, Vectorizer, ViewProjections};

pub const SCORE_EPS: f64 = 1e-8;
pub const RESCALE_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub n_sensors: usize,
    pub window: usize,
    pub embedding_dim: usize,
    pub top_k: usize,
    pub heads: usize,
    pub attention_hidden_dim: usize,
    pub filtrations: usize,
    pub families: Vec<FamilyKind>,
    pub instances_per_family: usize,
    pub samples_q: usize,
    pub gaussian_sigma: f64,
    pub rational_hat_r: f64,
    pub output_layers: usize,
    pub kernel_sizes: Vec<usize>,
    pub dilation: usize,
    pub mstcn_enabled: bool,
    pub tcn_single_scale: bool,
    pub ta_enabled: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn from_run(run: &RunConfig, n_sensors: usize) -> ModelConfig {
        ModelConfig {
            n_sensors,
            window: run.window,
            embedding_dim: run.embedding_dim,
            top_k: run.top_k,
            heads: run.heads,
            attention_hidden_dim: run.attention_hidden_dim,
            filtrations: run.filtrations,
            families: run.transform_families.clone(),
            instances_per_family: run.instances_per_family,
            samples_q: run.samples_q,
            gaussian_sigma: run.gaussian_sigma,
            rational_hat_r: run.rational_hat_r,
            output_layers: run.output_layers,
            kernel_sizes: run.kernel_sizes.clone(),
            dilation: run.dilation,
            mstcn_enabled: run.mstcn_enabled,
            tcn_single_scale: run.tcn_single_scale,
            ta_enabled: run.ta_enabled,
            seed: run.seed,
        }
    }

    /// Small configuration for tests and gradient checks.
    pub fn small(n_sensors: usize, window: usize) -> ModelConfig {
        ModelConfig {
            n_sensors,
            window,
            embedding_dim: 6,
            top_k: 2,
            heads: 1,
            attention_hidden_dim: 5,
            filtrations: 3,
            families: vec![FamilyKind::Triangle, FamilyKind::Gaussian],
            instances_per_family: 2,
            samples_q: 3,
            gaussian_sigma: 0.1,
            rational_hat_r: 0.5,
            output_layers: 2,
            kernel_sizes: vec![2, 3],
            dilation: 1,
            mstcn_enabled: true,
            tcn_single_scale: false,
            ta_enabled: true,
            seed: 7,
        }
    }

    pub fn k_views(&self) -> usize {
        self.families.len() * self.instances_per_family
    }
}

pub struct TopoGdnModel {
    pub cfg: ModelConfig,
    pub tape: Tape,
    pub embeddings: TensorRef,
    pub bank: KernelBank,
    pub attention: AttentionLayer,
    pub view_proj: ViewProjections,
    pub vectorizer: Vectorizer,
    /// (weight, bias) pairs; all but the last map d to d with ReLU after.
    pub out_stack: Vec<(TensorRef, TensorRef)>,
    graph: SensorGraph,
    named: Vec<(String, TensorRef)>,
}

impl TopoGdnModel {
    /// Registers every parameter in a fixed order (ablation flags gate the
    /// forward pass, not the parameter set), freezes them, and builds the
    /// initial Top-K graph from the seeded embeddings.
    pub fn new(cfg: ModelConfig) -> Result<TopoGdnModel> {
        let mut tape = Tape::new();
        let mut rng = Rng::new(cfg.seed);
        let (n, d, w) = (cfg.n_sensors, cfg.embedding_dim, cfg.window);
        if n < 2 {
            return Err(Error::Config("need at least 2 sensors".into()));
        }

        let mut named: Vec<(String, TensorRef)> = Vec::new();
        let emb_vals = graph::init_embeddings(n, d, &mut rng);
        let embeddings = tape.param(&[n, d], emb_vals)?;
        named.push(("embeddings".into(), embeddings));

        let bank = KernelBank::new(&mut tape, &cfg.kernel_sizes, cfg.dilation, &mut rng)?;
        for (i, &k) in bank.kernels.iter().enumerate() {
            named.push((format!("tcn.kernel.{i}"), k));
        }

        let attention =
            AttentionLayer::new(&mut tape, w, d, cfg.attention_hidden_dim, cfg.heads, &mut rng)?;
        named.push(("attention.w_proj".into(), attention.w_proj));
        for (h, head) in attention.heads.iter().enumerate() {
            named.push((format!("attention.head.{h}.w1"), head.w1));
            named.push((format!("attention.head.{h}.b1"), head.b1));
            named.push((format!("attention.head.{h}.w2"), head.w2));
            named.push((format!("attention.head.{h}.b2"), head.b2));
        }

        let view_proj = ViewProjections::new(&mut tape, d, cfg.k_views(), &mut rng)?;
        named.push(("views.proj.w".into(), view_proj.w));
        named.push(("views.proj.b".into(), view_proj.b));

        let vectorizer = Vectorizer::new(
            &mut tape,
            &cfg.families,
            cfg.instances_per_family,
            cfg.samples_q,
            d,
            cfg.gaussian_sigma,
            cfg.rational_hat_r,
            &mut rng,
        )?;
        for (i, inst) in vectorizer.views.iter().enumerate() {
            named.push((format!("transform.{i}.samples"), inst.samples));
            if let Some(aux) = inst.aux {
                named.push((format!("transform.{i}.aux"), aux));
            }
        }
        named.push(("vectorize.node_w".into(), vectorizer.node_w));
        named.push(("vectorize.node_b".into(), vectorizer.node_b));
        named.push(("vectorize.global_w".into(), vectorizer.global_w));
        named.push(("vectorize.global_b".into(), vectorizer.global_b));

        let mut out_stack = Vec::with_capacity(cfg.output_layers);
        let bound = 1.0 / (d as f64).sqrt();
        for l in 0..cfg.output_layers {
            let cols = if l + 1 == cfg.output_layers { 1 } else { d };
            let w_vals: Vec<f64> = (0..d * cols).map(|_| rng.uniform_in(-bound, bound)).collect();
            let wt = tape.param(&[d, cols], w_vals)?;
            let bt = tape.param(&[cols], vec![0.0; cols])?;
            named.push((format!("out.{l}.w"), wt));
            named.push((format!("out.{l}.b"), bt));
            out_stack.push((wt, bt));
        }

        tape.freeze_params();
        let graph = graph::build_adjacency(tape.values(embeddings), n, d, cfg.top_k);
        Ok(TopoGdnModel {
            cfg,
            tape,
            embeddings,
            bank,
            attention,
            view_proj,
            vectorizer,
            out_stack,
            graph,
            named,
        })
    }

    pub fn graph(&self) -> &SensorGraph {
        &self.graph
    }

    pub fn set_graph(&mut self, g: SensorGraph) -> Result<()> {
        if g.rows.len() != self.cfg.n_sensors {
            return Err(Error::Contract(format!(
                "graph has {} rows for {} sensors",
                g.rows.len(),
                self.cfg.n_sensors
            )));
        }
        self.graph = g;
        Ok(())
    }

    /// Recomputes the Top-K adjacency from current embedding values.
    pub fn rebuild_graph(&mut self) {
        self.graph = graph::build_adjacency(
            self.tape.values(self.embeddings),
            self.cfg.n_sensors,
            self.cfg.embedding_dim,
            self.cfg.top_k,
        );
    }

    pub fn params(&self) -> &[(String, TensorRef)] {
        &self.named
    }

    /// One prediction per (item, sensor): contexts are N*w row-major
    /// windows; output is (B*N, 1).
    pub fn forward_batch(&mut self, contexts: &[Vec<f64>]) -> Result<TensorRef> {
        let (n, w) = (self.cfg.n_sensors, self.cfg.window);
        let b = contexts.len();
        if b == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        for (i, c) in contexts.iter().enumerate() {
            if c.len() != n * w {
                return Err(Error::Contract(format!(
                    "window {i} has {} values, expected {n} sensors x {w} steps",
                    c.len()
                )));
            }
        }
        // Drop any left-over activations from a previous inference pass.
        self.tape.clear();

        let mut flat = Vec::with_capacity(b * n * w);
        for c in contexts {
            flat.extend_from_slice(c);
        }
        let x = self.tape.constant(&[b * n, w], flat)?;

        let y = if self.cfg.mstcn_enabled {
            let used = if self.cfg.tcn_single_scale { 1 } else { self.bank.kernels.len() };
            self.bank.forward_first(&mut self.tape, x, used)?
        } else {
            x
        };

        let att = self.attention.forward(&mut self.tape, y, self.embeddings, &self.graph, b)?;
        let z = att.z;

        let p = if self.cfg.ta_enabled {
            let (per_node, global) = self.topo_features(z, b)?;
            self.vectorizer.fuse(&mut self.tape, z, per_node, global)?
        } else {
            z
        };

        let emb_soft = self.tape.softmax(self.embeddings, 1)?;
        let emb_tiled = self.tape.tile_rows(emb_soft, b)?;
        let mut h = self.tape.mul(emb_tiled, p)?;
        let depth = self.out_stack.len();
        for (l, &(wt, bt)) in self.out_stack.iter().enumerate() {
            let lin = self.tape.matmul(h, wt)?;
            h = self.tape.add(lin, bt)?;
            if l + 1 < depth {
                h = self.tape.leaky_relu(h, 0.0)?;
            }
        }
        Ok(h)
    }

    /// Persistence over the disjoint union of the batch's sensor graphs,
    /// one run per view, then vectorization. Returns per-node (B*N, d)
    /// features and the (1, d) global cycle vector.
    fn topo_features(&mut self, z: TensorRef, b: usize) -> Result<(TensorRef, TensorRef)> {
        let n = self.cfg.n_sensors;
        let bn = b * n;
        let k = self.cfg.k_views();
        let f_all = self.view_proj.forward(&mut self.tape, z)?;

        let base_edges = self.graph.undirected_edges();
        let mut union_edges = Vec::with_capacity(b * base_edges.len());
        for item in 0..b {
            let off = item * n;
            union_edges.extend(base_edges.iter().map(|&(u, v)| (off + u, off + v)));
        }

        let mut node_pairs = Vec::with_capacity(k);
        let mut cycle_pairs = Vec::with_capacity(k);
        for view in 0..k {
            let col_idx: Vec<usize> = (0..bn).map(|r| r * k + view).collect();
            let col = self.tape.gather_elems(f_all, &col_idx)?;

            let vals = self.tape.values(col).to_vec();
            let (thresholds, degenerate) =
                topology::quantile_thresholds(&vals, self.cfg.filtrations);
            let diagram = topology::persistence(&vals, &union_edges, &thresholds);

            // Value-space pair coordinates. Birth of node v's bar is its own
            // filtration value; a killed bar dies at its merge edge's entry
            // value, clamped from below by the birth (quantization can order
            // the sweep so the edge value sits under the node value); an
            // essential bar dies at the filtration ceiling.
            let lo = self.tape.segment_min(col, bn)?;
            let hi = self.tape.segment_max(col, bn)?;
            let ceiling = if degenerate {
                self.tape.add_scalar(hi, DEGENERATE_SPREAD)?
            } else {
                hi
            };
            let span = self.tape.sub(ceiling, lo)?;
            let span_eps = self.tape.add_scalar(span, RESCALE_EPS)?;

            let mut killer_u = Vec::with_capacity(bn);
            let mut killer_v = Vec::with_capacity(bn);
            let mut killed_mask = Vec::with_capacity(bn);
            for bar in &diagram.dim0 {
                let (u, v) = bar.killer.unwrap_or((bar.node, bar.node));
                killer_u.push(u);
                killer_v.push(v);
                killed_mask.push(if bar.essential { 0.0 } else { 1.0 });
            }
            let ku = self.tape.gather_elems(col, &killer_u)?;
            let kv = self.tape.gather_elems(col, &killer_v)?;
            let edge_val = self.tape.max_elem(ku, kv)?;
            let killed_death = self.tape.max_elem(col, edge_val)?;
            let mask = self.tape.constant(&[bn], killed_mask)?;
            let ones = self.tape.constant(&[bn], vec![1.0; bn])?;
            let ess_mask = self.tape.sub(ones, mask)?;
            let killed_part = self.tape.mul(mask, killed_death)?;
            let ess_part = self.tape.mul(ess_mask, ceiling)?;
            let deaths = self.tape.add(killed_part, ess_part)?;

            let b_shift = self.tape.sub(col, lo)?;
            let b01 = self.tape.div(b_shift, span_eps)?;
            let d_shift = self.tape.sub(deaths, lo)?;
            let d01 = self.tape.div(d_shift, span_eps)?;
            node_pairs.push((b01, d01));

            if diagram.dim1.is_empty() {
                cycle_pairs.push(None);
            } else {
                let m = diagram.dim1.len();
                let (mut cu, mut cv) = (Vec::with_capacity(m), Vec::with_capacity(m));
                for bar in &diagram.dim1 {
                    cu.push(bar.edge.0);
                    cv.push(bar.edge.1);
                }
                let eu = self.tape.gather_elems(col, &cu)?;
                let ev = self.tape.gather_elems(col, &cv)?;
                let births = self.tape.max_elem(eu, ev)?;
                let cb_shift = self.tape.sub(births, lo)?;
                let cb01 = self.tape.div(cb_shift, span_eps)?;
                let cd = self.tape.repeat_elems(ceiling, m)?;
                let cd_shift = self.tape.sub(cd, lo)?;
                let cd01 = self.tape.div(cd_shift, span_eps)?;
                cycle_pairs.push(Some((cb01, cd01)));
            }
        }

        let per_node = self.vectorizer.vectorize_nodes(&mut self.tape, &node_pairs)?;
        let global = self.vectorizer.vectorize_cycles(&mut self.tape, &cycle_pairs)?;
        Ok((per_node, global))
    }

    /// Mean squared error between predictions and targets over the batch.
    pub fn batch_loss(&mut self, contexts: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<TensorRef> {
        let n = self.cfg.n_sensors;
        if targets.len() != contexts.len() {
            return Err(Error::Contract(format!(
                "{} targets for {} windows",
                targets.len(),
                contexts.len()
            )));
        }
        let pred = self.forward_batch(contexts)?;
        let mut flat = Vec::with_capacity(targets.len() * n);
        for t in targets {
            if t.len() != n {
                return Err(Error::Contract(format!(
                    "target has {} sensors, expected {n}",
                    t.len()
                )));
            }
            flat.extend_from_slice(t);
        }
        let tgt = self.tape.constant(&[contexts.len() * n, 1], flat)?;
        let diff = self.tape.sub(pred, tgt)?;
        let sq = self.tape.mul(diff, diff)?;
        self.tape.mean_all(sq)
    }

    /// Per-item length-N predictions.
    pub fn predict(&mut self, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let pred = self.forward_batch(contexts)?;
        let n = self.cfg.n_sensors;
        let values = self.tape.values(pred);
        Ok(values.chunks(n).map(|c| c.to_vec()).collect())
    }

    pub fn param_records(&self) -> Vec<TensorRecord> {
        self.named
            .iter()
            .map(|(name, r)| {
                TensorRecord::new(
                    name.clone(),
                    self.tape.shape(*r).to_vec(),
                    self.tape.values(*r).to_vec(),
                )
            })
            .collect()
    }

    /// Restores parameter values by name; every model parameter must be
    /// present with matching dims, and unknown names are rejected.
    pub fn load_param_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        let by_name: HashMap<&str, &TensorRecord> =
            records.iter().map(|r| (r.name.as_str(), r)).collect();
        if by_name.len() != records.len() {
            return Err(Error::Checkpoint("duplicate record names".into()));
        }
        let known: Vec<&str> = self.named.iter().map(|(n, _)| n.as_str()).collect();
        for r in records {
            if !known.contains(&r.name.as_str()) && r.name != "graph.rows" && !r.name.starts_with("meta.") {
                return Err(Error::Checkpoint(format!("unknown record {:?}", r.name)));
            }
        }
        for (name, tref) in &self.named {
            let rec = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("missing record {name:?}")))?;
            if rec.dims != self.tape.shape(*tref) {
                return Err(Error::Checkpoint(format!(
                    "record {name:?} dims {:?} do not match parameter dims {:?}",
                    rec.dims,
                    self.tape.shape(*tref)
                )));
            }
            self.tape.values_mut(*tref).copy_from_slice(&rec.values);
        }
        Ok(())
    }

    /// The frozen adjacency as a tensor record (node indices as floats).
    pub fn graph_record(&self) -> TensorRecord {
        let rows = &self.graph.rows;
        let k = self.graph.k_eff;
        let mut values = Vec::with_capacity(rows.len() * k);
        for row in rows {
            values.extend(row.iter().map(|&j| j as f64));
        }
        TensorRecord::new("graph.rows", vec![rows.len(), k], values)
    }

    pub fn load_graph_record(&mut self, rec: &TensorRecord) -> Result<()> {
        if rec.name != "graph.rows" || rec.dims.len() != 2 {
            return Err(Error::Checkpoint(format!(
                "expected a graph.rows record, got {:?}",
                rec.name
            )));
        }
        let (n, k) = (rec.dims[0], rec.dims[1]);
        let mut rows = Vec::with_capacity(n);
        for chunk in rec.values.chunks(k.max(1)) {
            let row: Vec<usize> = chunk.iter().map(|&v| v as usize).collect();
            if row.iter().any(|&j| j >= n) {
                return Err(Error::Checkpoint("graph record indexes outside node range".into()));
            }
            rows.push(row);
        }
        if k == 0 {
            rows = vec![Vec::new(); n];
        }
        self.set_graph(SensorGraph { rows, k_eff: k })
    }
}

/// Per-sensor robust calibration plus the detection threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub median: Vec<f64>,
    pub iqr: Vec<f64>,
    pub threshold: f64,
}

/// Median and inter-quartile range of absolute errors per sensor.
/// `abs_errors[s]` collects sensor s's validation-split errors.
pub fn robust_stats(abs_errors: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut median = Vec::with_capacity(abs_errors.len());
    let mut iqr = Vec::with_capacity(abs_errors.len());
    for (s, errs) in abs_errors.iter().enumerate() {
        if errs.is_empty() {
            return Err(Error::Config(format!("sensor {s} has no validation errors")));
        }
        let mut sorted = errs.clone();
        sorted.sort_by(f64::total_cmp);
        median.push(topology::quantile_sorted(&sorted, 0.5));
        iqr.push(topology::quantile_sorted(&sorted, 0.75) - topology::quantile_sorted(&sorted, 0.25));
    }
    Ok((median, iqr))
}

/// Max over sensors of the robust-normalized deviation; also returns the
/// arg-max sensor.
pub fn anomaly_score(abs_err: &[f64], cal: &Calibration) -> Result<(f64, usize)> {
    if abs_err.len() != cal.median.len() {
        return Err(Error::Contract(format!(
            "{} errors for {} calibrated sensors",
            abs_err.len(),
            cal.median.len()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0;
    for (i, &e) in abs_err.iter().enumerate() {
        let s = (e - cal.median[i]) / (cal.iqr[i] + SCORE_EPS);
        if s > best {
            best = s;
            arg = i;
        }
    }
    Ok((best, arg))
}

/// Threshold calibration: the maximum score seen on the validation split.
pub fn calibrate_threshold(validation_scores: &[f64]) -> Result<f64> {
    if validation_scores.is_empty() {
        return Err(Error::Config("cannot calibrate a threshold on no scores".into()));
    }
    Ok(validation_scores.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub true_neg: usize,
}

/// Point-wise precision/recall/F1 from 0/1 label vectors. Each metric is a
/// single division of integer counts, so rational anchors come out exact;
/// zero denominators yield 0.
pub fn evaluate(pred: &[u8], truth: &[u8]) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(Error::Contract(format!(
            "prediction length {} vs label length {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p != 0, t != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(Metrics {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        true_pos: tp,
        false_pos: fp,
        false_neg: fn_,
        true_neg: tn,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub t: usize,
    pub score: f64,
    pub label_pred: u8,
    pub label_true: Option<u8>,
    pub padded: bool,
    pub top_sensor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyReport {
    pub rows: Vec<ReportRow>,
    pub threshold: f64,
    pub metrics: Option<Metrics>,
}

impl AnomalyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,score,label_pred,label_true,padded,top_sensor\n");
        for r in &self.rows {
            let truth = r.label_true.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.t, r.score, r.label_pred, truth, r.padded as u8, r.top_sensor
            ));
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<AnomalyReport> {
        let mut rows = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if idx == 0 {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("expected 6 columns, got {}", f.len()),
                });
            }
            let bad = |what: &str| Error::Parse { line: idx + 1, msg: format!("bad {what}") };
            rows.push(ReportRow {
                t: f[0].parse().map_err(|_| bad("step"))?,
                score: f[1].parse().map_err(|_| bad("score"))?,
                label_pred: f[2].parse().map_err(|_| bad("predicted label"))?,
                label_true: if f[3].is_empty() {
                    None
                } else {
                    Some(f[3].parse().map_err(|_| bad("true label"))?)
                },
                padded: f[4] == "1",
                top_sensor: f[5].parse().map_err(|_| bad("sensor"))?,
            });
        }
        Ok(AnomalyReport { rows, threshold: f64::NAN, metrics: None })
    }
}

/// Scores every window of a normalized frame against the calibration.
/// Labels fire on strict inequality; metrics appear when the frame has
/// ground-truth labels.
pub fn detect(
    model: &mut TopoGdnModel,
    windows: &WindowBatch,
    frame: &TimeSeriesFrame,
    cal: &Calibration,
    batch_size: usize,
) -> Result<AnomalyReport> {
    let n = model.cfg.n_sensors;
    if windows.n_sensors != n {
        return Err(Error::Contract(format!(
            "frame has {} sensors, model expects {n}",
            windows.n_sensors
        )));
    }
    let mut rows = Vec::with_capacity(windows.contexts.len());
    let t_len = frame.n_steps();
    let mut i = 0;
    while i < windows.contexts.len() {
        let end = (i + batch_size).min(windows.contexts.len());
        let preds = model.predict(&windows.contexts[i..end])?;
        for (item, pred) in preds.iter().enumerate() {
            let idx = i + item;
            let target = &windows.targets[idx];
            let abs_err: Vec<f64> = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).collect();
            let (score, top_sensor) = anomaly_score(&abs_err, cal)?;
            let t = windows.target_indices[idx];
            let label_true = frame
                .labels
                .as_ref()
                .map(|ls| ls[t.min(t_len - 1)]);
            rows.push(ReportRow {
                t,
                score,
                label_pred: (score > cal.threshold) as u8,
                label_true,
                padded: windows.padded[idx],
                top_sensor,
            });
        }
        i = end;
    }
    let metrics = if rows.iter().all(|r| r.label_true.is_some()) && !rows.is_empty() {
        let pred: Vec<u8> = rows.iter().map(|r| r.label_pred).collect();
        let truth: Vec<u8> = rows.iter().map(|r| r.label_true.unwrap()).collect();
        Some(evaluate(&pred, &truth)?)
    } else {
        None
    };
    Ok(AnomalyReport { rows, threshold: cal.threshold, metrics })
}
