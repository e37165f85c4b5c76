//! Run configuration: line-oriented key=value files.
//!
//! Every key has a default; unknown keys are rejected with a line number.
//! "#" starts a comment. The canonical serialization (fixed key order) is
//! hashed with 64-bit FNV-1a to name the run directory, so identical
//! configurations always land in the same place.

use std::path::Path;

use crate::error::{Error, Result};
use crate::vectorize::FamilyKind;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train_csv: String,
    pub test_csv: String,
    pub out_dir: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub window: usize,
    pub stride: usize,
    pub top_k: usize,
    pub embedding_dim: usize,
    pub filtrations: usize,
    pub views: usize,
    pub output_layers: usize,
    pub kernel_sizes: Vec<usize>,
    pub dilation: usize,
    pub mstcn_enabled: bool,
    pub tcn_single_scale: bool,
    pub ta_enabled: bool,
    pub heads: usize,
    pub attention_hidden_dim: usize,
    pub transform_families: Vec<FamilyKind>,
    pub instances_per_family: usize,
    pub samples_q: usize,
    pub gaussian_sigma: f64,
    pub rational_hat_r: f64,
    pub validation_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            train_csv: String::new(),
            test_csv: String::new(),
            out_dir: "runs".into(),
            epochs: 50,
            learning_rate: 1e-3,
            batch_size: 32,
            seed: 42,
            early_stop_patience: 10,
            window: 100,
            stride: 10,
            top_k: 20,
            embedding_dim: 128,
            filtrations: 8,
            views: 12,
            output_layers: 2,
            kernel_sizes: vec![2, 3, 5, 7],
            dilation: 1,
            mstcn_enabled: true,
            tcn_single_scale: false,
            ta_enabled: true,
            heads: 1,
            attention_hidden_dim: 128,
            transform_families: crate::vectorize::DEFAULT_FAMILIES.to_vec(),
            instances_per_family: 3,
            samples_q: 16,
            gaussian_sigma: 0.1,
            rational_hat_r: 0.5,
            validation_ratio: 0.9,
        }
    }
}

fn parse_list<T, F>(value: &str, mut one: F) -> Result<Vec<T>>
where
    F: FnMut(&str) -> Result<T>,
{
    value.split(',').map(|p| one(p.trim())).collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
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
            cfg.set(key, value).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
        }
        match key {
            "train_csv" => self.train_csv = value.to_string(),
            "test_csv" => self.test_csv = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "epochs" => self.epochs = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "early_stop_patience" => self.early_stop_patience = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "stride" => self.stride = num(key, value)?,
            "top_k" => self.top_k = num(key, value)?,
            "embedding_dim" => self.embedding_dim = num(key, value)?,
            "filtrations" => self.filtrations = num(key, value)?,
            "views" => self.views = num(key, value)?,
            "output_layers" => self.output_layers = num(key, value)?,
            "kernel_sizes" => self.kernel_sizes = parse_list(value, |p| num(key, p))?,
            "dilation" => self.dilation = num(key, value)?,
            "mstcn_enabled" => self.mstcn_enabled = num(key, value)?,
            "tcn_single_scale" => self.tcn_single_scale = num(key, value)?,
            "ta_enabled" => self.ta_enabled = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "attention_hidden_dim" => self.attention_hidden_dim = num(key, value)?,
            "transform_families" => {
                self.transform_families = parse_list(value, |p| {
                    FamilyKind::parse(p)
                        .ok_or_else(|| Error::Config(format!("unknown transform family {p:?}")))
                })?
            }
            "instances_per_family" => self.instances_per_family = num(key, value)?,
            "samples_q" => self.samples_q = num(key, value)?,
            "gaussian_sigma" => self.gaussian_sigma = num(key, value)?,
            "rational_hat_r" => self.rational_hat_r = num(key, value)?,
            "validation_ratio" => self.validation_ratio = num(key, value)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 12] = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("window", self.window),
            ("stride", self.stride),
            ("top_k", self.top_k),
            ("embedding_dim", self.embedding_dim),
            ("filtrations", self.filtrations),
            ("output_layers", self.output_layers),
            ("dilation", self.dilation),
            ("heads", self.heads),
            ("attention_hidden_dim", self.attention_hidden_dim),
            ("samples_q", self.samples_q),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::Config("kernel_sizes needs positive widths".into()));
        }
        if self.transform_families.is_empty() || self.instances_per_family == 0 {
            return Err(Error::Config("need at least one transform view".into()));
        }
        let derived = self.transform_families.len() * self.instances_per_family;
        if self.views != derived {
            return Err(Error::Config(format!(
                "views = {} but {} families x {} instances = {derived}",
                self.views,
                self.transform_families.len(),
                self.instances_per_family
            )));
        }
        if !(self.validation_ratio > 0.0 && self.validation_ratio < 1.0) {
            return Err(Error::Config(format!(
                "validation_ratio {} must lie strictly between 0 and 1",
                self.validation_ratio
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if !(self.gaussian_sigma > 0.0) || !(self.rational_hat_r > 0.0) {
            return Err(Error::Config("transform scale parameters must be positive".into()));
        }
        Ok(())
    }

    /// Applies the seed override (the TOPOGDN_SEED convention); `None`
    /// leaves the configured seed alone.
    pub fn apply_seed_override(&mut self, env_value: Option<&str>) -> Result<()> {
        if let Some(raw) = env_value {
            self.seed = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad seed override {raw:?}")))?;
        }
        Ok(())
    }

    /// Canonical serialization: every key in declaration order, one per
    /// line. Parsing this text reproduces the configuration.
    pub fn canonical(&self) -> String {
        let families: Vec<&str> = self.transform_families.iter().map(|f| f.name()).collect();
        let sizes: Vec<String> = self.kernel_sizes.iter().map(|s| s.to_string()).collect();
        format!(
            "train_csv={}\ntest_csv={}\nout_dir={}\nepochs={}\nlearning_rate={}\n\
             batch_size={}\nseed={}\nearly_stop_patience={}\nwindow={}\nstride={}\n\
             top_k={}\nembedding_dim={}\nfiltrations={}\nviews={}\noutput_layers={}\n\
             kernel_sizes={}\ndilation={}\nmstcn_enabled={}\ntcn_single_scale={}\n\
             ta_enabled={}\nheads={}\nattention_hidden_dim={}\ntransform_families={}\n\
             instances_per_family={}\nsamples_q={}\ngaussian_sigma={}\nrational_hat_r={}\n\
             validation_ratio={}\n",
            self.train_csv,
            self.test_csv,
            self.out_dir,
            self.epochs,
            self.learning_rate,
            self.batch_size,
            self.seed,
            self.early_stop_patience,
            self.window,
            self.stride,
            self.top_k,
            self.embedding_dim,
            self.filtrations,
            self.views,
            self.output_layers,
            sizes.join(","),
            self.dilation,
            self.mstcn_enabled,
            self.tcn_single_scale,
            self.ta_enabled,
            self.heads,
            self.attention_hidden_dim,
            families.join(","),
            self.instances_per_family,
            self.samples_q,
            self.gaussian_sigma,
            self.rational_hat_r,
            self.validation_ratio,
        )
    }

    /// FNV-1a 64 over the canonical serialization; names the run directory.
    pub fn hash(&self) -> u64 {
        fnv1a(self.canonical().as_bytes())
    }

    /// `<out_dir>/<16-hex-digit config hash>`.
    pub fn run_dir(&self) -> std::path::PathBuf {
        Path::new(&self.out_dir).join(format!("{:016x}", self.hash()))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
