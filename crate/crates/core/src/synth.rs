//! Deterministic synthetic sensor streams with injected anomalies.
//!
//! Base signals are per-sensor sinusoids mixed through a row-normalized
//! coupling matrix, plus Gaussian noise. Anomalies are injected into the
//! per-sensor base signals before mixing, so a spike of magnitude m on sensor
//! s moves sensor i's mixed value by exactly m * sigma * mix[i][s].
//!
//! Draw order from the seed is fixed and load-bearing: sinusoid parameters
//! per sensor, then coupling rows, then noise in sensor-major step order.
//! Noise never depends on the anomaly plan, and injections touch only their
//! own steps, so time steps outside every anomaly interval are bit-identical
//! across runs that differ only in the plan.

use crate::data::TimeSeriesFrame;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnomalyKind {
    /// Adds magnitude * sigma at each step of the interval (usually one step).
    Spike,
    /// Adds a constant magnitude * sigma over the interval.
    LevelShift,
    /// Multiplies the base signal's first difference by magnitude inside the
    /// interval, then snaps back to the base signal.
    RateChange,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Spike => "spike",
            AnomalyKind::LevelShift => "level-shift",
            AnomalyKind::RateChange => "rate-change",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "spike" => Some(AnomalyKind::Spike),
            "level-shift" => Some(AnomalyKind::LevelShift),
            "rate-change" => Some(AnomalyKind::RateChange),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnomalyEvent {
    pub kind: AnomalyKind,
    pub sensors: Vec<usize>,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub sensors: usize,
    pub steps: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub events: Vec<AnomalyEvent>,
}

impl SynthSpec {
    /// Desk-scale default: 16 sensors, 4000 steps, all anomalies in the final
    /// 40% so the clean prefix can train a model, 200 anomalous steps (5%).
    pub fn desk_default(seed: u64) -> Self {
        let mut events = Vec::new();
        let spike = |s: usize, t: usize, m: f64| AnomalyEvent {
            kind: AnomalyKind::Spike,
            sensors: vec![s],
            start: t,
            duration: 1,
            magnitude: m,
        };
        let shift = |sensors: Vec<usize>, t: usize, dur: usize, m: f64| AnomalyEvent {
            kind: AnomalyKind::LevelShift,
            sensors,
            start: t,
            duration: dur,
            magnitude: m,
        };
        let rate = |sensors: Vec<usize>, t: usize, dur: usize, m: f64| AnomalyEvent {
            kind: AnomalyKind::RateChange,
            sensors,
            start: t,
            duration: dur,
            magnitude: m,
        };
        // Magnitudes are calibrated against the cross-prediction baseline:
        // aggregation excludes each sensor's own history, so clean-data
        // prediction error sits near a third of the normalized range, and
        // an injection must push the robust deviation well past the
        // validation maximum to be separable.
        for (i, t) in [2500, 2570, 2640, 2710, 2780, 2850, 2920, 2990].into_iter().enumerate() {
            events.push(spike(i * 2, t, 70.0));
        }
        events.push(shift(vec![1, 9], 3060, 20, 80.0));
        events.push(shift(vec![3, 11], 3140, 20, -60.0));
        events.push(shift(vec![5, 13], 3220, 20, 80.0));
        events.push(shift(vec![7, 15], 3300, 20, -60.0));
        events.push(rate(vec![0, 8], 3396, 18, 12.0));
        events.push(rate(vec![2, 10], 3476, 18, -9.0));
        events.push(rate(vec![4, 12], 3556, 18, 12.0));
        events.push(rate(vec![6, 14], 3636, 18, -9.0));
        for (i, t) in [3720, 3760, 3800, 3840].into_iter().enumerate() {
            events.push(spike(i * 4 + 1, t, -100.0));
        }
        events.push(shift(vec![2, 6], 3880, 20, 80.0));
        events.push(rate(vec![9, 13], 3926, 16, 10.0));
        SynthSpec { sensors: 16, steps: 4000, seed, noise_sigma: 0.05, events }
    }

    /// Line-oriented key=value text, one `anomaly=` line per injection:
    /// `anomaly=<kind>,<sensor[+sensor...]>,<start>,<duration>,<magnitude>`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut sensors = None;
        let mut steps = None;
        let mut seed = 0u64;
        let mut noise_sigma = 0.05;
        let mut events = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: line_no,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |msg: String| Error::Parse { line: line_no, msg };
            match key {
                "sensors" => sensors = Some(value.parse().map_err(|_| bad(format!("bad sensor count {value:?}")))?),
                "steps" => steps = Some(value.parse().map_err(|_| bad(format!("bad step count {value:?}")))?),
                "seed" => seed = value.parse().map_err(|_| bad(format!("bad seed {value:?}")))?,
                "noise_sigma" => {
                    noise_sigma = value.parse().map_err(|_| bad(format!("bad noise_sigma {value:?}")))?
                }
                "anomaly" => {
                    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                    if parts.len() != 5 {
                        return Err(bad(format!(
                            "anomaly needs kind,sensors,start,duration,magnitude; got {value:?}"
                        )));
                    }
                    let kind = AnomalyKind::parse(parts[0])
                        .ok_or_else(|| bad(format!("unknown anomaly kind {:?}", parts[0])))?;
                    let sensors: Vec<usize> = parts[1]
                        .split('+')
                        .map(|p| p.trim().parse().map_err(|_| bad(format!("bad sensor index {p:?}"))))
                        .collect::<Result<_>>()?;
                    events.push(AnomalyEvent {
                        kind,
                        sensors,
                        start: parts[2].parse().map_err(|_| bad(format!("bad start {:?}", parts[2])))?,
                        duration: parts[3]
                            .parse()
                            .map_err(|_| bad(format!("bad duration {:?}", parts[3])))?,
                        magnitude: parts[4]
                            .parse()
                            .map_err(|_| bad(format!("bad magnitude {:?}", parts[4])))?,
                    });
                }
                other => return Err(bad(format!("unknown key {other:?}"))),
            }
        }
        let spec = SynthSpec {
            sensors: sensors.ok_or_else(|| Error::Parse { line: 1, msg: "missing sensors=".into() })?,
            steps: steps.ok_or_else(|| Error::Parse { line: 1, msg: "missing steps=".into() })?,
            seed,
            noise_sigma,
            events,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensors == 0 || self.steps < 2 {
            return Err(Error::Spec(format!(
                "need at least 1 sensor and 2 steps, got {}x{}",
                self.sensors, self.steps
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Spec(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        for (i, e) in self.events.iter().enumerate() {
            if e.sensors.is_empty() {
                return Err(Error::Spec(format!("event {i} names no sensors")));
            }
            for &s in &e.sensors {
                if s >= self.sensors {
                    return Err(Error::Spec(format!("event {i} sensor {s} out of range")));
                }
            }
            if e.duration == 0 || e.start >= self.steps || e.start + e.duration > self.steps {
                return Err(Error::Spec(format!(
                    "event {i} interval [{}, {}) outside [0, {})",
                    e.start,
                    e.start + e.duration,
                    self.steps
                )));
            }
            if !e.magnitude.is_finite() {
                return Err(Error::Spec(format!("event {i} magnitude must be finite")));
            }
        }
        // Per-sensor interval overlap.
        for s in 0..self.sensors {
            let mut spans: Vec<(usize, usize)> = self
                .events
                .iter()
                .filter(|e| e.sensors.contains(&s))
                .map(|e| (e.start, e.start + e.duration))
                .collect();
            spans.sort_unstable();
            for pair in spans.windows(2) {
                if pair[1].0 < pair[0].1 {
                    return Err(Error::Spec(format!(
                        "overlapping anomaly intervals on sensor {s}: [{}, {}) and [{}, {})",
                        pair[0].0, pair[0].1, pair[1].0, pair[1].1
                    )));
                }
            }
        }
        Ok(())
    }
}

struct BaseModel {
    period: Vec<f64>,
    amplitude: Vec<f64>,
    phase: Vec<f64>,
    mix: Vec<Vec<f64>>,
}

/// Draws sinusoid and coupling parameters; the returned generator is
/// positioned exactly where the noise draws begin.
fn draw_base(spec: &SynthSpec) -> (BaseModel, Rng) {
    let mut rng = Rng::new(spec.seed);
    let n = spec.sensors;
    let mut model = BaseModel {
        period: Vec::with_capacity(n),
        amplitude: Vec::with_capacity(n),
        phase: Vec::with_capacity(n),
        mix: Vec::with_capacity(n),
    };
    for _ in 0..n {
        model.period.push(rng.uniform_in(40.0, 200.0));
        model.amplitude.push(rng.uniform_in(0.5, 1.5));
        model.phase.push(rng.uniform_in(0.0, std::f64::consts::TAU));
    }
    for i in 0..n {
        if n == 1 {
            model.mix.push(vec![1.0]);
            continue;
        }
        let self_weight = 0.6 + 0.2 * rng.uniform();
        let raw: Vec<f64> = (0..n - 1).map(|_| rng.uniform()).collect();
        let total: f64 = raw.iter().sum();
        let mut row = vec![0.0; n];
        row[i] = self_weight;
        let mut r = 0;
        for j in 0..n {
            if j == i {
                continue;
            }
            row[j] = if total > 0.0 {
                raw[r] / total * (1.0 - self_weight)
            } else {
                (1.0 - self_weight) / (n - 1) as f64
            };
            r += 1;
        }
        model.mix.push(row);
    }
    (model, rng)
}

/// The seeded coupling matrix, for tests that check injection arithmetic.
pub fn mixing_matrix(spec: &SynthSpec) -> Vec<Vec<f64>> {
    draw_base(spec).0.mix
}

pub fn generate(spec: &SynthSpec) -> Result<TimeSeriesFrame> {
    spec.validate()?;
    let (model, mut rng) = draw_base(spec);
    let (n, t_len) = (spec.sensors, spec.steps);

    let mut base = vec![vec![0.0; t_len]; n];
    for s in 0..n {
        let w = std::f64::consts::TAU / model.period[s];
        for (t, v) in base[s].iter_mut().enumerate() {
            *v = model.amplitude[s] * (w * t as f64 + model.phase[s]).sin();
        }
    }

    let mut injected = base.clone();
    for e in &spec.events {
        for &s in &e.sensors {
            let delta = e.magnitude * spec.noise_sigma;
            match e.kind {
                AnomalyKind::Spike | AnomalyKind::LevelShift => {
                    for t in e.start..e.start + e.duration {
                        injected[s][t] = base[s][t] + delta;
                    }
                }
                AnomalyKind::RateChange => {
                    let mut prev = if e.start == 0 { base[s][0] } else { base[s][e.start - 1] };
                    for t in e.start..e.start + e.duration {
                        let diff = if t == 0 { 0.0 } else { base[s][t] - base[s][t - 1] };
                        prev += e.magnitude * diff;
                        injected[s][t] = prev;
                    }
                    // Steps after the interval already hold the base signal.
                }
            }
        }
    }

    let mut noise = vec![vec![0.0; t_len]; n];
    for row in noise.iter_mut() {
        for v in row.iter_mut() {
            *v = spec.noise_sigma * rng.normal();
        }
    }

    let mut values = Vec::with_capacity(n * t_len);
    for i in 0..n {
        for t in 0..t_len {
            let mut acc = 0.0;
            for j in 0..n {
                acc += model.mix[i][j] * injected[j][t];
            }
            values.push(acc + noise[i][t]);
        }
    }

    let mut labels = vec![0u8; t_len];
    for e in &spec.events {
        for l in labels.iter_mut().skip(e.start).take(e.duration) {
            *l = 1;
        }
    }

    let names = (0..n).map(|i| format!("s{i}")).collect();
    TimeSeriesFrame::new(names, values, Some(labels))
}
