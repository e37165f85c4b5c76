//! Command-line frontend: synthesis, training, detection, evaluation,
//! plotting, and hyperparameter sweeps.
//!
//! Exit codes: 0 success, 2 input or configuration problem, 3 numerical
//! failure during training. Panics are caught and reported as 2.

use std::env;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use topogdn::checkpoint::{self, TensorRecord};
use topogdn::config::RunConfig;
use topogdn::data::{self, NormalizeStats};
use topogdn::graph::SensorGraph;
use topogdn::model::{self, AnomalyReport, Calibration, ModelConfig, TopoGdnModel};
use topogdn::synth::{self, SynthSpec};
use topogdn::topology::{self, barcode::BarcodeView};
use topogdn::train::{self, TrainConfig};
use topogdn::{Error, Result};

const SEED_ENV: &str = "TOPOGDN_SEED";
const CHECKPOINT_FILE: &str = "checkpoint.tgdn";
const TRAIN_LOG_FILE: &str = "train_log.csv";
const REPORT_FILE: &str = "report.csv";
const CONFIG_ECHO_FILE: &str = "config.txt";

#[derive(Parser)]
#[command(name = "topogdn", version, about = "Graph anomaly detection over multivariate time series")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a seeded synthetic dataset with injected anomalies.
    Synth {
        /// Line-oriented spec file (key=value plus anomaly= lines).
        spec: PathBuf,
        /// Destination CSV (labels included).
        out: PathBuf,
    },
    /// Train a model and write checkpoint, calibration, and loss log.
    Train {
        /// Run configuration (key=value lines).
        config: PathBuf,
    },
    /// Score a test series against a trained checkpoint.
    Detect {
        config: PathBuf,
        /// Overrides the config's test_csv when given.
        #[arg(long)]
        test_csv: Option<PathBuf>,
    },
    /// Point-wise precision, recall, and F1 of a report against labels.
    Eval {
        /// Report CSV produced by detect.
        report: PathBuf,
        /// Data CSV whose label column is ground truth.
        labels: PathBuf,
    },
    /// Render a persistence barcode for a node-valued graph.
    PlotBarcode {
        /// One filtration value per line.
        values: PathBuf,
        /// One "u,v" edge per line.
        edges: PathBuf,
        #[arg(long, default_value_t = 8)]
        filtrations: usize,
        #[arg(long)]
        out_svg: PathBuf,
        #[arg(long)]
        out_csv: Option<PathBuf>,
    },
    /// Render the learned sensor graph as DOT.
    PlotGraph {
        config: PathBuf,
        out: PathBuf,
    },
    /// Train and evaluate once per value of one config key; writes (value, F1).
    Sweep {
        config: PathBuf,
        key: String,
        #[arg(required = true)]
        values: Vec<String>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match panic::catch_unwind(AssertUnwindSafe(|| run(cli))) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            eprintln!("error: internal failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth { spec, out } => cmd_synth(&spec, &out),
        Cmd::Train { config } => cmd_train(&config),
        Cmd::Detect { config, test_csv } => cmd_detect(&config, test_csv.as_deref()),
        Cmd::Eval { report, labels } => cmd_eval(&report, &labels),
        Cmd::PlotBarcode { values, edges, filtrations, out_svg, out_csv } => {
            cmd_plot_barcode(&values, &edges, filtrations, &out_svg, out_csv.as_deref())
        }
        Cmd::PlotGraph { config, out } => cmd_plot_graph(&config, &out),
        Cmd::Sweep { config, key, values } => cmd_sweep(&config, &key, &values),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::parse(&read_text(path)?)?;
    cfg.apply_seed_override(env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(spec_path: &Path, out: &Path) -> Result<()> {
    let spec = SynthSpec::parse(&read_text(spec_path)?)?;
    let frame = synth::generate(&spec)?;
    data::write_csv(&frame, out)?;
    let anomalous: usize = frame
        .labels
        .as_ref()
        .map(|ls| ls.iter().filter(|&&l| l != 0).count())
        .unwrap_or(0);
    println!(
        "wrote {} sensors x {} steps to {} ({} anomalous steps)",
        frame.n_sensors(),
        frame.n_steps(),
        out.display(),
        anomalous
    );
    Ok(())
}

/// Extra checkpoint records carried alongside the parameters.
fn meta_records(stats: &NormalizeStats, cal: &Calibration, cfg_hash: u64) -> Vec<TensorRecord> {
    let n = stats.min.len();
    vec![
        TensorRecord::new("meta.norm.min", vec![n], stats.min.clone()),
        TensorRecord::new("meta.norm.max", vec![n], stats.max.clone()),
        TensorRecord::new("meta.cal.median", vec![n], cal.median.clone()),
        TensorRecord::new("meta.cal.iqr", vec![n], cal.iqr.clone()),
        TensorRecord::new("meta.cal.threshold", vec![1], vec![cal.threshold]),
        TensorRecord::new(
            "meta.cfg.hash",
            vec![2],
            vec![(cfg_hash >> 32) as f64, (cfg_hash & 0xFFFF_FFFF) as f64],
        ),
    ]
}

fn find_record<'a>(records: &'a [TensorRecord], name: &str) -> Result<&'a TensorRecord> {
    records
        .iter()
        .find(|r| r.name == name)
        .ok_or_else(|| Error::Checkpoint(format!("missing record {name:?}")))
}

fn cmd_train(config_path: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir)?;

    let mut frame = data::load_csv(Path::new(&cfg.train_csv))?;
    let stats = data::minmax_normalize(&mut frame)?;
    let mut model = TopoGdnModel::new(ModelConfig::from_run(&cfg, frame.n_sensors()))?;
    let outcome = train::train(&mut model, &frame, &TrainConfig::from_run(&cfg))?;

    fs::write(run_dir.join(TRAIN_LOG_FILE), train::train_log_csv(&outcome.log))?;
    fs::write(run_dir.join(CONFIG_ECHO_FILE), cfg.canonical())?;
    let mut records = model.param_records();
    records.push(model.graph_record());
    records.extend(meta_records(&stats, &outcome.calibration, cfg.hash()));
    checkpoint::save(&run_dir.join(CHECKPOINT_FILE), &records)?;

    println!(
        "trained {} epochs (best epoch {}, validation mse {:e}, threshold {:.6}); artifacts in {}",
        outcome.log.len(),
        outcome.best_epoch,
        outcome.best_val_mse,
        outcome.calibration.threshold,
        run_dir.display()
    );
    Ok(())
}

/// Rebuilds the trained model and calibration from a run directory.
fn restore(cfg: &RunConfig) -> Result<(TopoGdnModel, NormalizeStats, Calibration)> {
    let ckpt = cfg.run_dir().join(CHECKPOINT_FILE);
    if !ckpt.exists() {
        return Err(Error::Checkpoint(format!(
            "no checkpoint at {}; run train with this config first",
            ckpt.display()
        )));
    }
    let records = checkpoint::load(&ckpt)?;

    let hash_rec = find_record(&records, "meta.cfg.hash")?;
    let stored = ((hash_rec.values[0] as u64) << 32) | hash_rec.values[1] as u64;
    if stored != cfg.hash() {
        return Err(Error::Checkpoint(
            "checkpoint was produced by a different configuration".into(),
        ));
    }

    let stats = NormalizeStats {
        min: find_record(&records, "meta.norm.min")?.values.clone(),
        max: find_record(&records, "meta.norm.max")?.values.clone(),
    };
    let cal = Calibration {
        median: find_record(&records, "meta.cal.median")?.values.clone(),
        iqr: find_record(&records, "meta.cal.iqr")?.values.clone(),
        threshold: find_record(&records, "meta.cal.threshold")?.values[0],
    };

    let n = stats.min.len();
    let mut model = TopoGdnModel::new(ModelConfig::from_run(cfg, n))?;
    model.load_param_records(&records)?;
    model.load_graph_record(find_record(&records, "graph.rows")?)?;
    Ok((model, stats, cal))
}

fn cmd_detect(config_path: &Path, test_csv: Option<&Path>) -> Result<()> {
    let cfg = load_config(config_path)?;
    let (mut model, stats, cal) = restore(&cfg)?;

    let test_path = test_csv
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(&cfg.test_csv));
    let mut frame = data::load_csv(&test_path)?;
    if frame.n_sensors() != model.cfg.n_sensors {
        return Err(Error::Contract(format!(
            "test series has {} sensors, checkpoint was trained on {}",
            frame.n_sensors(),
            model.cfg.n_sensors
        )));
    }
    data::apply_normalization(&mut frame, &stats)?;

    let windows = data::make_windows(&frame, cfg.window, cfg.stride)?;
    let report = model::detect(&mut model, &windows, &frame, &cal, cfg.batch_size)?;
    let out = cfg.run_dir().join(REPORT_FILE);
    fs::write(&out, report.to_csv())?;

    let flagged = report.rows.iter().filter(|r| r.label_pred != 0).count();
    println!(
        "scored {} windows, {} above threshold {:.6}; report at {}",
        report.rows.len(),
        flagged,
        cal.threshold,
        out.display()
    );
    if let Some(m) = report.metrics {
        println!("precision={} recall={} f1={}", m.precision, m.recall, m.f1);
    }
    Ok(())
}

fn cmd_eval(report_path: &Path, labels_path: &Path) -> Result<()> {
    let report = AnomalyReport::parse_csv(&read_text(report_path)?)?;
    let frame = data::load_csv(labels_path)?;
    let labels = frame
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data(format!("{} has no label column", labels_path.display())))?;

    let mut pred = Vec::with_capacity(report.rows.len());
    let mut truth = Vec::with_capacity(report.rows.len());
    for row in &report.rows {
        if row.t >= labels.len() && !row.padded {
            return Err(Error::Contract(format!(
                "report step {} outside the {}-step label series",
                row.t,
                labels.len()
            )));
        }
        pred.push(row.label_pred);
        truth.push(labels[row.t.min(labels.len() - 1)]);
    }
    let m = model::evaluate(&pred, &truth)?;
    println!("precision={} recall={} f1={}", m.precision, m.recall, m.f1);
    Ok(())
}

fn parse_barcode_inputs(values_path: &Path, edges_path: &Path) -> Result<(Vec<f64>, Vec<(usize, usize)>)> {
    let mut values = Vec::new();
    for (i, line) in read_text(values_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        values.push(line.parse().map_err(|_| Error::Parse {
            line: i + 1,
            msg: format!("bad filtration value {line:?}"),
        })?);
    }
    if values.is_empty() {
        return Err(Error::Data("no filtration values given".into()));
    }
    let mut edges = Vec::new();
    for (i, line) in read_text(edges_path)?.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Parse { line: i + 1, msg: format!("bad edge {line:?}") };
        let (u, v) = line.split_once(',').ok_or_else(bad)?;
        let u: usize = u.trim().parse().map_err(|_| bad())?;
        let v: usize = v.trim().parse().map_err(|_| bad())?;
        if u >= values.len() || v >= values.len() {
            return Err(Error::Data(format!("edge ({u},{v}) outside {} nodes", values.len())));
        }
        edges.push((u, v));
    }
    Ok((values, edges))
}

fn cmd_plot_barcode(
    values_path: &Path,
    edges_path: &Path,
    filtrations: usize,
    out_svg: &Path,
    out_csv: Option<&Path>,
) -> Result<()> {
    if filtrations == 0 {
        return Err(Error::Config("filtrations must be at least 1".into()));
    }
    let (values, edges) = parse_barcode_inputs(values_path, edges_path)?;
    let (thresholds, _) = topology::quantile_thresholds(&values, filtrations);
    let diagram = topology::persistence(&values, &edges, &thresholds);
    let view = BarcodeView { view_index: 0, thresholds, diagram };
    fs::write(out_svg, topology::barcode::barcode_svg(&[view.clone()]))?;
    if let Some(csv_path) = out_csv {
        fs::write(csv_path, topology::barcode::barcode_csv(&[view]))?;
    }
    println!("wrote barcode to {}", out_svg.display());
    Ok(())
}

fn cmd_plot_graph(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = load_config(config_path)?;
    let frame = data::load_csv(Path::new(&cfg.train_csv))?;
    let n = frame.n_sensors();

    let ckpt = cfg.run_dir().join(CHECKPOINT_FILE);
    let graph: SensorGraph = if ckpt.exists() {
        let records = checkpoint::load(&ckpt)?;
        let mut model = TopoGdnModel::new(ModelConfig::from_run(&cfg, n))?;
        model.load_graph_record(find_record(&records, "graph.rows")?)?;
        model.graph().clone()
    } else {
        // No trained run yet: plot the seeded initial adjacency.
        let mut rng = topogdn::rng::Rng::new(cfg.seed);
        let emb = topogdn::graph::init_embeddings(n, cfg.embedding_dim, &mut rng);
        topogdn::graph::build_adjacency(&emb, n, cfg.embedding_dim, cfg.top_k)
    };
    fs::write(out, graph.to_dot(&frame.sensor_names))?;
    println!(
        "wrote {}-node graph (out-degree {}) to {}",
        n,
        graph.k_eff,
        out.display()
    );
    Ok(())
}

fn cmd_sweep(config_path: &Path, key: &str, values: &[String]) -> Result<()> {
    let base = load_config(config_path)?;
    let mut rows = Vec::with_capacity(values.len());
    for value in values {
        let mut cfg = base.clone();
        cfg.set(key, value)?;
        cfg.validate()?;

        let mut frame = data::load_csv(Path::new(&cfg.train_csv))?;
        let stats = data::minmax_normalize(&mut frame)?;
        let mut model = TopoGdnModel::new(ModelConfig::from_run(&cfg, frame.n_sensors()))?;
        let outcome = train::train(&mut model, &frame, &TrainConfig::from_run(&cfg))?;

        let mut test = data::load_csv(Path::new(&cfg.test_csv))?;
        if test.labels.is_none() {
            return Err(Error::Data(format!(
                "{} has no label column; sweep needs labeled test data",
                cfg.test_csv
            )));
        }
        data::apply_normalization(&mut test, &stats)?;
        let windows = data::make_windows(&test, cfg.window, cfg.stride)?;
        let report =
            model::detect(&mut model, &windows, &test, &outcome.calibration, cfg.batch_size)?;
        let f1 = report.metrics.expect("labels checked above").f1;
        println!("{key}={value}: f1={f1}");
        rows.push((value.clone(), f1));
    }

    fs::create_dir_all(&base.out_dir)?;
    let out = Path::new(&base.out_dir).join(format!("sweep_{key}.csv"));
    let mut csv = String::from("value,f1\n");
    for (v, f1) in &rows {
        csv.push_str(&format!("{v},{f1}\n"));
    }
    fs::write(&out, csv)?;
    println!("wrote {} sweep rows to {}", rows.len(), out.display());
    Ok(())
}
