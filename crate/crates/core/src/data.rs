//! Sensor CSV loading, per-sensor min-max normalization, and sliding windows.
//!
//! Frames store values sensor-major (one contiguous slice per sensor).
//! Normalization statistics are captured on training data and reapplied to
//! test data without clamping, so out-of-range test values keep their signal.

use std::path::Path;

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TimeSeriesFrame {
    pub sensor_names: Vec<String>,
    /// values[s * n_steps + t], sensor-major.
    values: Vec<f64>,
    n_steps: usize,
    pub labels: Option<Vec<u8>>,
}

impl TimeSeriesFrame {
    pub fn new(sensor_names: Vec<String>, values: Vec<f64>, labels: Option<Vec<u8>>) -> Result<Self> {
        let n = sensor_names.len();
        if n == 0 {
            return Err(Error::Data("frame needs at least one sensor".into()));
        }
        if values.len() % n != 0 {
            return Err(Error::Dim(format!(
                "{} values do not fill {} sensors evenly",
                values.len(),
                n
            )));
        }
        let t = values.len() / n;
        if t < 2 {
            return Err(Error::Data(format!("frame needs at least 2 steps, got {t}")));
        }
        if let Some(l) = &labels {
            if l.len() != t {
                return Err(Error::Dim(format!("{} labels for {t} steps", l.len())));
            }
        }
        Ok(TimeSeriesFrame { sensor_names, values, n_steps: t, labels })
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_names.len()
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn sensor(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_steps..(s + 1) * self.n_steps]
    }

    pub fn value(&self, s: usize, t: usize) -> f64 {
        self.values[s * self.n_steps + t]
    }

    fn sensor_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.values[s * self.n_steps..(s + 1) * self.n_steps]
    }

    /// Steps [start, end) as a new frame, labels sliced along.
    pub fn slice_steps(&self, start: usize, end: usize) -> Result<TimeSeriesFrame> {
        if start >= end || end > self.n_steps {
            return Err(Error::Contract(format!(
                "slice [{start}, {end}) outside 0..{}",
                self.n_steps
            )));
        }
        let mut values = Vec::with_capacity(self.n_sensors() * (end - start));
        for s in 0..self.n_sensors() {
            values.extend_from_slice(&self.sensor(s)[start..end]);
        }
        let labels = self.labels.as_ref().map(|l| l[start..end].to_vec());
        TimeSeriesFrame::new(self.sensor_names.clone(), values, labels)
    }
}

/// Per-sensor min/max captured during normalization, reusable on test data.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizeStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// CSV with a header of sensor names and one time step per row; an optional
/// trailing "label" column becomes the frame's labels.
pub fn load_csv(path: &Path) -> Result<TimeSeriesFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::Data(format!("cannot open {}: {e}", path.display())),
            _ => Error::Parse { line: 1, msg: e.to_string() },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
        .clone();
    if headers.is_empty() {
        return Err(Error::Parse { line: 1, msg: "empty header".into() });
    }
    let has_label = headers.iter().last() == Some("label");
    let n = if has_label { headers.len() - 1 } else { headers.len() };
    if n == 0 {
        return Err(Error::Parse { line: 1, msg: "no sensor columns before the label column".into() });
    }
    let sensor_names: Vec<String> = headers.iter().take(n).map(str::to_owned).collect();

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); n];
    let mut labels: Vec<u8> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let line = row_idx + 2;
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(line, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        if record.len() != headers.len() {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        for (s, cell) in record.iter().take(n).enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                line,
                msg: format!("non-numeric cell {:?} in column {}", cell, sensor_names[s]),
            })?;
            columns[s].push(v);
        }
        if has_label {
            let cell = record.iter().last().unwrap_or("").trim();
            let l: u8 = match cell {
                "0" => 0,
                "1" => 1,
                _ => {
                    return Err(Error::Parse {
                        line,
                        msg: format!("label cell must be 0 or 1, got {cell:?}"),
                    })
                }
            };
            labels.push(l);
        }
    }
    if columns[0].is_empty() {
        return Err(Error::Parse { line: 2, msg: "no data rows".into() });
    }
    let mut values = Vec::with_capacity(n * columns[0].len());
    for col in columns {
        values.extend(col);
    }
    TimeSeriesFrame::new(sensor_names, values, if has_label { Some(labels) } else { None })
}

/// Frame plus labels to CSV, one time step per row.
pub fn write_csv(frame: &TimeSeriesFrame, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&frame.sensor_names.join(","));
    if frame.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for t in 0..frame.n_steps() {
        for s in 0..frame.n_sensors() {
            if s > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", frame.value(s, t)));
        }
        if let Some(l) = &frame.labels {
            out.push_str(&format!(",{}", l[t]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// In-place per-sensor map x -> (x - min) / (max - min + eps); returns the
/// statistics for reuse. Constant sensors map to all zeros.
pub fn minmax_normalize(frame: &mut TimeSeriesFrame) -> Result<NormalizeStats> {
    let n = frame.n_sensors();
    let mut stats = NormalizeStats { min: Vec::with_capacity(n), max: Vec::with_capacity(n) };
    for s in 0..n {
        let col = frame.sensor(s);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for (t, &v) in col.iter().enumerate() {
            if v.is_nan() {
                return Err(Error::Data(format!(
                    "NaN value in sensor {} at step {t}",
                    frame.sensor_names[s]
                )));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        stats.min.push(lo);
        stats.max.push(hi);
    }
    apply_normalization(frame, &stats)?;
    Ok(stats)
}

/// Applies previously captured statistics, unclamped: test values outside the
/// training range map outside [0, 1] on purpose.
pub fn apply_normalization(frame: &mut TimeSeriesFrame, stats: &NormalizeStats) -> Result<()> {
    if stats.min.len() != frame.n_sensors() {
        return Err(Error::Dim(format!(
            "stats cover {} sensors, frame has {}",
            stats.min.len(),
            frame.n_sensors()
        )));
    }
    for s in 0..frame.n_sensors() {
        let (lo, hi) = (stats.min[s], stats.max[s]);
        let inv = 1.0 / (hi - lo + NORM_EPS);
        for (t, v) in frame.sensor_mut(s).iter_mut().enumerate() {
            if v.is_nan() {
                return Err(Error::Data(format!("NaN value in sensor {s} at step {t}")));
            }
            *v = (*v - lo) * inv;
        }
    }
    Ok(())
}

/// Sliding windows with stride. Contexts are row-major N x w matrices holding
/// columns [t-w, t-1]; the target is column t. When the last natural target
/// falls short of the final step, one extra window is built against a frame
/// extended by replicating the last column, and flagged as padded.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub window: usize,
    pub stride: usize,
    pub n_sensors: usize,
    /// Each context is an N*w row-major matrix.
    pub contexts: Vec<Vec<f64>>,
    /// Each target is the length-N column at the target step.
    pub targets: Vec<Vec<f64>>,
    pub target_indices: Vec<usize>,
    /// Parallel to targets; true only for the replicated-tail window.
    pub padded: Vec<bool>,
}

pub fn make_windows(frame: &TimeSeriesFrame, w: usize, s: usize) -> Result<WindowBatch> {
    if w < 2 || s == 0 {
        return Err(Error::Config(format!("window {w} and stride {s} must be >= 2 and >= 1")));
    }
    let t_len = frame.n_steps();
    if t_len <= w {
        return Err(Error::Config(format!("series length {t_len} must exceed window {w}")));
    }
    let n = frame.n_sensors();
    let mut batch = WindowBatch {
        window: w,
        stride: s,
        n_sensors: n,
        contexts: Vec::new(),
        targets: Vec::new(),
        target_indices: Vec::new(),
        padded: Vec::new(),
    };
    let column = |t: usize| -> Vec<f64> {
        // Reads past the end replicate the final column.
        let tc = t.min(t_len - 1);
        (0..n).map(|i| frame.value(i, tc)).collect()
    };
    let push_window = |batch: &mut WindowBatch, t: usize, padded: bool| {
        let mut ctx = Vec::with_capacity(n * w);
        for i in 0..n {
            for j in 0..w {
                let tc = (t - w + j).min(t_len - 1);
                ctx.push(frame.value(i, tc));
            }
        }
        batch.contexts.push(ctx);
        batch.targets.push(column(t));
        batch.target_indices.push(t);
        batch.padded.push(padded);
    };
    let mut t = w;
    while t <= t_len - 1 {
        push_window(&mut batch, t, false);
        t += s;
    }
    let last_natural = batch.target_indices.last().copied().unwrap_or(0);
    if last_natural != t_len - 1 {
        // One aligned extra target against the replicated tail.
        push_window(&mut batch, last_natural + s, true);
    }
    Ok(batch)
}

/// Temporal split: first ceil(ratio * T) steps train, remainder validation.
/// Both sides must keep at least w + 1 steps.
pub fn split_train_validation(
    frame: &TimeSeriesFrame,
    ratio: f64,
    w: usize,
) -> Result<(TimeSeriesFrame, TimeSeriesFrame)> {
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let t_len = frame.n_steps();
    let cut = (ratio * t_len as f64).ceil() as usize;
    if cut < w + 1 || t_len - cut < w + 1 {
        return Err(Error::Config(format!(
            "split {cut}/{} leaves a side below {} steps",
            t_len - cut,
            w + 1
        )));
    }
    Ok((frame.slice_steps(0, cut)?, frame.slice_steps(cut, t_len)?))
}
