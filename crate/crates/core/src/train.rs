//! Optimizer, training loop, and finite-difference gradient checking.

use crate::config::RunConfig;
use crate::data::{self, TimeSeriesFrame, WindowBatch};
use crate::error::{Error, Result};
use crate::graph::SensorGraph;
use crate::model::{self, Calibration, TopoGdnModel};
use crate::rng::Rng;
use crate::tensor::{Tape, TensorRef};

/// Keeps the minibatch shuffle stream independent of the parameter-init
/// stream that already consumed the raw seed.
const SHUFFLE_SALT: u64 = 0x5DEECE66D;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias correction. State vectors are indexed by position in the
/// fixed parameter list.
pub struct Adam {
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Adam {
        Adam {
            lr,
            m: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: param_sizes.iter().map(|&s| vec![0.0; s]).collect(),
            t: 0,
        }
    }

    /// One update from the gradients currently on the tape.
    pub fn step(&mut self, tape: &mut Tape, params: &[TensorRef]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (idx, &r) in params.iter().enumerate() {
            let g = tape.grad(r).to_vec();
            if g.len() != self.m[idx].len() {
                return Err(Error::Contract(format!(
                    "parameter {idx} has {} elements, optimizer state has {}",
                    g.len(),
                    self.m[idx].len()
                )));
            }
            let values = tape.values_mut(r);
            for i in 0..g.len() {
                let m = ADAM_BETA1 * self.m[idx][i] + (1.0 - ADAM_BETA1) * g[i];
                let v = ADAM_BETA2 * self.v[idx][i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                self.m[idx][i] = m;
                self.v[idx][i] = v;
                values[i] -= self.lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub validation_ratio: f64,
    pub window: usize,
    pub stride: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn from_run(run: &RunConfig) -> TrainConfig {
        TrainConfig {
            epochs: run.epochs,
            learning_rate: run.learning_rate,
            batch_size: run.batch_size,
            patience: run.early_stop_patience,
            validation_ratio: run.validation_ratio,
            window: run.window,
            stride: run.stride,
            seed: run.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub stopped_early: bool,
    pub calibration: Calibration,
}

pub fn train_log_csv(log: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_mse,val_mse\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_mse, e.val_mse));
    }
    out
}

fn batch_of(windows: &WindowBatch, order: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let ctxs = order.iter().map(|&i| windows.contexts[i].clone()).collect();
    let tgts = order.iter().map(|&i| windows.targets[i].clone()).collect();
    (ctxs, tgts)
}

fn validation_mse(model: &mut TopoGdnModel, windows: &WindowBatch, batch: usize) -> Result<f64> {
    let mut sq = 0.0;
    let mut count = 0usize;
    let mut i = 0;
    while i < windows.contexts.len() {
        let end = (i + batch).min(windows.contexts.len());
        let preds = model.predict(&windows.contexts[i..end])?;
        for (item, pred) in preds.iter().enumerate() {
            for (p, t) in pred.iter().zip(&windows.targets[i + item]) {
                sq += (p - t) * (p - t);
                count += 1;
            }
        }
        i = end;
    }
    Ok(sq / count as f64)
}

/// Absolute per-sensor errors for every window, in window order.
fn abs_errors(model: &mut TopoGdnModel, windows: &WindowBatch, batch: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(windows.contexts.len());
    let mut i = 0;
    while i < windows.contexts.len() {
        let end = (i + batch).min(windows.contexts.len());
        let preds = model.predict(&windows.contexts[i..end])?;
        for (item, pred) in preds.iter().enumerate() {
            out.push(
                pred.iter()
                    .zip(&windows.targets[i + item])
                    .map(|(p, t)| (p - t).abs())
                    .collect(),
            );
        }
        i = end;
    }
    Ok(out)
}

/// Trains on the normalized frame: tail split for validation, shuffled
/// minibatches, adjacency rebuilt every epoch, early stop on stalled
/// validation MSE, best parameters restored before calibration. The
/// calibration's threshold is the maximum validation anomaly score.
pub fn train(model: &mut TopoGdnModel, frame: &TimeSeriesFrame, cfg: &TrainConfig) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    let (train_frame, val_frame) = data::split_train_validation(frame, cfg.validation_ratio, cfg.window)?;
    let train_w = data::make_windows(&train_frame, cfg.window, cfg.stride)?;
    let val_w = data::make_windows(&val_frame, cfg.window, cfg.stride)?;

    let refs: Vec<TensorRef> = model.params().iter().map(|p| p.1).collect();
    let sizes: Vec<usize> = refs.iter().map(|&r| model.tape.values(r).len()).collect();
    let mut adam = Adam::new(cfg.learning_rate, &sizes);
    let mut rng = Rng::new(cfg.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..train_w.contexts.len()).collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, Vec<Vec<f64>>, SensorGraph)> = None;
    let mut since_best = 0usize;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut sq = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (ctxs, tgts) = batch_of(&train_w, chunk);
            let loss = model.batch_loss(&ctxs, &tgts)?;
            let loss_val = model.tape.values(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            model.tape.backward(loss)?;
            adam.step(&mut model.tape, &refs)?;
            model.tape.zero_grad();
            let elems = chunk.len() * model.cfg.n_sensors;
            sq += loss_val * elems as f64;
            count += elems;
        }
        let train_mse = sq / count as f64;

        model.rebuild_graph();
        let val_mse = validation_mse(model, &val_w, cfg.batch_size)?;
        if !val_mse.is_finite() {
            return Err(Error::Numeric(format!("non-finite validation loss at epoch {epoch}")));
        }
        log.push(EpochStats { epoch, train_mse, val_mse });

        let improved = best.as_ref().is_none_or(|b| val_mse < b.0);
        if improved {
            let snapshot: Vec<Vec<f64>> =
                refs.iter().map(|&r| model.tape.values(r).to_vec()).collect();
            best = Some((val_mse, epoch, snapshot, model.graph().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_mse, best_epoch, snapshot, graph) =
        best.expect("at least one epoch ran");
    for (&r, vals) in refs.iter().zip(&snapshot) {
        model.tape.values_mut(r).copy_from_slice(vals);
    }
    model.set_graph(graph)?;

    let errs = abs_errors(model, &val_w, cfg.batch_size)?;
    let n = model.cfg.n_sensors;
    let mut by_sensor: Vec<Vec<f64>> = vec![Vec::with_capacity(errs.len()); n];
    for e in &errs {
        for (s, &v) in e.iter().enumerate() {
            by_sensor[s].push(v);
        }
    }
    let (median, iqr) = model::robust_stats(&by_sensor)?;
    let mut cal = Calibration { median, iqr, threshold: 0.0 };
    let scores: Vec<f64> = errs
        .iter()
        .map(|e| model::anomaly_score(e, &cal).map(|(s, _)| s))
        .collect::<Result<_>>()?;
    cal.threshold = model::calibrate_threshold(&scores)?;

    Ok(TrainOutcome { log, best_epoch, best_val_mse, stopped_early, calibration: cal })
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped_nonsmooth: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

/// Central-difference check of every parameter element against the tape's
/// gradients, holding the adjacency fixed. Elements where halving the step
/// moves the estimate by more than 1% sit on a non-smooth point (max ties,
/// rectifier kinks, persistence reorderings) and are skipped rather than
/// compared against a meaningless one-sided slope.
pub fn grad_check(
    model: &mut TopoGdnModel,
    contexts: &[Vec<f64>],
    targets: &[Vec<f64>],
    eps: f64,
) -> Result<GradCheckReport> {
    let loss = model.batch_loss(contexts, targets)?;
    model.tape.backward(loss)?;
    let refs: Vec<(String, TensorRef)> = model.params().to_vec();
    let grads: Vec<Vec<f64>> =
        refs.iter().map(|&(_, r)| model.tape.grad(r).to_vec()).collect();
    model.tape.zero_grad();

    let eval = |model: &mut TopoGdnModel, r: TensorRef, i: usize, x: f64| -> Result<f64> {
        model.tape.values_mut(r)[i] = x;
        let l = model.batch_loss(contexts, targets)?;
        Ok(model.tape.values(l)[0])
    };

    let mut report = GradCheckReport {
        checked: 0,
        skipped_nonsmooth: 0,
        max_rel_err: 0.0,
        worst_param: String::new(),
    };
    for (p, (name, r)) in refs.iter().enumerate() {
        for i in 0..grads[p].len() {
            let orig = model.tape.values(*r)[i];
            let full = (eval(model, *r, i, orig + eps)? - eval(model, *r, i, orig - eps)?) / (2.0 * eps);
            let half =
                (eval(model, *r, i, orig + eps / 2.0)? - eval(model, *r, i, orig - eps / 2.0)?) / eps;
            model.tape.values_mut(*r)[i] = orig;

            if (full - half).abs() > 1e-2 * full.abs().max(half.abs()).max(1e-8) {
                report.skipped_nonsmooth += 1;
                continue;
            }
            let g = grads[p][i];
            // Floor guards against FD truncation noise on near-zero grads.
            let rel = (half - g).abs() / half.abs().max(g.abs()).max(1e-6);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sine_frame(n: usize, steps: usize, amp: f64) -> TimeSeriesFrame {
        let names = (0..n).map(|i| format!("s{i}")).collect();
        let mut values = Vec::with_capacity(n * steps);
        for s in 0..n {
            for t in 0..steps {
                values.push(0.5 + amp * ((t as f64 * 0.17 + s as f64).sin()));
            }
        }
        TimeSeriesFrame::new(names, values, None).unwrap()
    }

    fn constant_frame(n: usize, steps: usize) -> TimeSeriesFrame {
        let names = (0..n).map(|i| format!("s{i}")).collect();
        TimeSeriesFrame::new(names, vec![0.5; n * steps], None).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 4,
            patience: 10,
            validation_ratio: 0.7,
            window: 6,
            stride: 2,
            seed: 9,
        }
    }

    #[test]
    fn adam_first_step_matches_hand_arithmetic() {
        let mut tape = Tape::new();
        let x = tape.param(&[1], vec![2.0]).unwrap();
        tape.freeze_params();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        tape.backward(loss).unwrap();
        // g = 2x = 4; bias-corrected m_hat = 4, v_hat = 16.
        let mut adam = Adam::new(1e-3, &[1]);
        adam.step(&mut tape, &[x]).unwrap();
        let want = 2.0 - 1e-3 * (4.0 / (4.0 + ADAM_EPS));
        assert_eq!(tape.values(x)[0], want);
    }

    #[test]
    fn adam_steps_stay_within_the_classic_bound() {
        let mut tape = Tape::new();
        let x = tape.param(&[3], vec![0.3, -0.8, 2.0]).unwrap();
        tape.freeze_params();
        let lr = 0.01;
        let mut adam = Adam::new(lr, &[3]);
        let bound = lr / (1.0 - ADAM_BETA1) * 1.05;
        for _ in 0..25 {
            let before = tape.values(x).to_vec();
            let sq = tape.mul(x, x).unwrap();
            let loss = tape.mean_all(sq).unwrap();
            tape.backward(loss).unwrap();
            adam.step(&mut tape, &[x]).unwrap();
            tape.zero_grad();
            for (b, a) in before.iter().zip(tape.values(x)) {
                assert!((a - b).abs() <= bound, "step {} exceeds {bound}", (a - b).abs());
            }
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let frame = sine_frame(4, 40, 0.3);
        let mk = || TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        let mut m = mk();
        let fresh = mk();
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        cfg.patience = 50;
        train(&mut m, &frame, &cfg).unwrap();
        for ((_, a), (_, b)) in m.params().iter().zip(fresh.params()) {
            assert_eq!(m.tape.values(*a), fresh.tape.values(*b));
        }
    }

    #[test]
    fn same_seed_trains_to_bit_identical_logs() {
        let frame = sine_frame(4, 40, 0.3);
        let run = || {
            let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
            train(&mut m, &frame, &tiny_cfg()).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.log, b.log);
        assert_eq!(a.calibration, b.calibration);
    }

    #[test]
    fn constant_series_trains_to_near_zero_validation_error() {
        let frame = constant_frame(4, 60);
        let mut normalized = frame.clone();
        data::minmax_normalize(&mut normalized).unwrap();
        let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 50;
        cfg.learning_rate = 3e-3;
        let out = train(&mut m, &normalized, &cfg).unwrap();
        assert!(
            out.best_val_mse < 1e-6,
            "best validation MSE {} after {} epochs",
            out.best_val_mse,
            out.log.len()
        );
        let first = out.log[0].val_mse;
        assert!(out.best_val_mse < first);
    }

    #[test]
    fn stalled_validation_stops_after_patience_epochs() {
        let frame = sine_frame(4, 40, 0.3);
        let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        let mut cfg = tiny_cfg();
        cfg.learning_rate = 0.0;
        cfg.epochs = 50;
        cfg.patience = 2;
        let out = train(&mut m, &frame, &cfg).unwrap();
        // Epoch 1 sets the best; zero learning keeps every later epoch equal,
        // which never counts as an improvement.
        assert!(out.stopped_early);
        assert_eq!(out.log.len(), 1 + cfg.patience);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn poisoned_parameters_fail_fast_with_the_epoch_named() {
        let frame = sine_frame(4, 40, 0.3);
        let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        m.tape.values_mut(m.embeddings)[0] = f64::NAN;
        match train(&mut m, &frame, &tiny_cfg()) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("epoch 1"), "{msg}"),
            other => panic!("expected a numeric error, got {other:?}"),
        }
    }

    #[test]
    fn training_log_serializes_in_epoch_order() {
        let log = vec![
            EpochStats { epoch: 1, train_mse: 0.5, val_mse: 0.25 },
            EpochStats { epoch: 2, train_mse: 0.125, val_mse: 0.0625 },
        ];
        let csv = train_log_csv(&log);
        assert_eq!(csv, "epoch,train_mse,val_mse\n1,0.5,0.25\n2,0.125,0.0625\n");
    }

    #[test]
    fn tape_gradients_match_finite_differences_on_a_small_model() {
        let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        let mut rng = Rng::new(3);
        let ctxs: Vec<Vec<f64>> =
            (0..2).map(|_| (0..24).map(|_| rng.uniform_in(0.0, 1.0)).collect()).collect();
        let tgts: Vec<Vec<f64>> =
            (0..2).map(|_| (0..4).map(|_| rng.uniform_in(0.0, 1.0)).collect()).collect();
        let report = grad_check(&mut m, &ctxs, &tgts, 1e-5).unwrap();
        assert!(report.checked > 100, "only {} elements checked", report.checked);
        assert!(
            report.max_rel_err < 1e-4,
            "max relative error {} at {}",
            report.max_rel_err,
            report.worst_param
        );
        assert!(
            report.skipped_nonsmooth * 20 < report.checked,
            "{} of {} elements skipped",
            report.skipped_nonsmooth,
            report.checked
        );
    }

    #[test]
    fn trained_model_restores_the_best_epoch_snapshot() {
        let frame = sine_frame(4, 60, 0.3);
        let mut m = TopoGdnModel::new(ModelConfig::small(4, 6)).unwrap();
        let mut cfg = tiny_cfg();
        cfg.epochs = 6;
        let out = train(&mut m, &frame, &cfg).unwrap();
        let best = out.log.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_mse, best);
        // Re-scoring the validation split with the restored parameters must
        // reproduce the best epoch's MSE.
        let (_, val_frame) =
            data::split_train_validation(&frame, cfg.validation_ratio, cfg.window).unwrap();
        let val_w = data::make_windows(&val_frame, cfg.window, cfg.stride).unwrap();
        let re = validation_mse(&mut m, &val_w, cfg.batch_size).unwrap();
        assert!((re - best).abs() < 1e-12, "{re} vs {best}");
    }
}
