//! Experiment description: the flat TOML document read by the CLI.
//!
//! Hyperparameter keys are those of [`oafel_core::config::KNOWN_KEYS`];
//! the keys below describe the data, policy and outputs. Any other key is an
//! error.

use std::path::{Path, PathBuf};

use oafel_core::config::{validate_config, ValidatedConfig, KNOWN_KEYS};
use oafel_core::learner::{Dataset, LossModel, MlpModel, PartitionMode};
use oafel_core::rng::derive_stream;
use oafel_core::scheduler::Policy;
use toml::{Table, Value};

use crate::mnist::load_mnist_idx;
use crate::synth::{synth_quadratic, QuadraticSpec, SynthQuadratic};
use crate::HarnessError;

pub const HARNESS_KEYS: &[&str] = &[
    "dataset",
    "mnist_dir",
    "train_subset",
    "test_subset",
    "eval_subset",
    "hidden",
    "partition",
    "labels_per_device",
    "policy",
    "obs_error",
    "seeds",
    "out",
    "data_seed",
    "fading_scale",
    "eval_every",
    "quad_samples_per_device",
    "quad_curvature",
    "quad_eigen_min",
    "quad_eigen_max",
    "quad_center_spread",
    "quad_noise_spread",
    "quad_init_scale",
];

/// Loaded data and the loss model that goes with it.
#[derive(Debug, Clone)]
pub enum PreparedData {
    Quadratic(SynthQuadratic),
    Mnist { model: MlpModel, train: Dataset, test: Dataset },
}

impl PreparedData {
    pub fn loss_model(&self) -> LossModel {
        match self {
            PreparedData::Quadratic(q) => LossModel::Quadratic(q.model.clone()),
            PreparedData::Mnist { model, .. } => LossModel::MlpSoftmax(*model),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub config: ValidatedConfig,
    pub data: PreparedData,
    pub partition: PartitionMode,
    pub policy: Policy,
    pub obs_error: f64,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data_seed: u64,
    pub fading_scale: f64,
    /// Training-loss evaluation sample count (MNIST only).
    pub eval_subset: usize,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub policy: Option<Policy>,
    pub out: Option<PathBuf>,
    pub rounds: Option<usize>,
    pub v: Option<f64>,
    pub gamma0: Option<f64>,
    pub obs_error: Option<f64>,
}

impl Overrides {
    pub fn apply(&self, raw: &mut Table) {
        if let Some(s) = self.seed {
            raw.insert("seeds".into(), Value::Array(vec![Value::Integer(s as i64)]));
        }
        if let Some(p) = self.policy {
            raw.insert("policy".into(), Value::String(p.to_string()));
        }
        if let Some(o) = &self.out {
            raw.insert("out".into(), Value::String(o.display().to_string()));
        }
        if let Some(t) = self.rounds {
            raw.insert("T".into(), Value::Integer(t as i64));
        }
        if let Some(v) = self.v {
            raw.insert("V".into(), Value::Float(v));
        }
        if let Some(g) = self.gamma0 {
            raw.insert("gamma0".into(), Value::Float(g));
        }
        if let Some(e) = self.obs_error {
            raw.insert("obs_error".into(), Value::Float(e));
        }
    }
}

fn spec_err(msg: impl Into<String>) -> HarnessError {
    HarnessError::Spec(msg.into())
}

fn f64_or(raw: &Table, key: &str, default: f64) -> Result<f64, HarnessError> {
    match raw.get(key) {
        None => Ok(default),
        Some(Value::Float(x)) => Ok(*x),
        Some(Value::Integer(i)) => Ok(*i as f64),
        Some(_) => Err(spec_err(format!("`{key}` must be a number"))),
    }
}

fn usize_opt(raw: &Table, key: &str) -> Result<Option<usize>, HarnessError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(_) => Err(spec_err(format!("`{key}` must be a non-negative integer"))),
    }
}

fn str_or<'a>(raw: &'a Table, key: &str, default: &'a str) -> Result<&'a str, HarnessError> {
    match raw.get(key) {
        None => Ok(default),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(spec_err(format!("`{key}` must be a string"))),
    }
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// `k / classes` samples of every class, taken in file order.
pub fn stratified_subset(data: &Dataset, k: usize) -> Result<Vec<usize>, HarnessError> {
    let classes = data.class_count();
    if !k.is_multiple_of(classes) {
        return Err(spec_err(format!("subset size {k} is not a multiple of {classes} classes")));
    }
    let per = k / classes;
    let mut taken = vec![0usize; classes];
    let mut idx = Vec::with_capacity(k);
    for i in 0..data.len() {
        let y = data.label(i);
        if taken[y] < per {
            taken[y] += 1;
            idx.push(i);
        }
    }
    if idx.len() != k {
        return Err(spec_err(format!("dataset cannot supply {per} samples of every class")));
    }
    Ok(idx)
}

fn quadratic_spec(raw: &Table, devices: usize, dim: usize) -> Result<QuadraticSpec, HarnessError> {
    let curvature = match raw.get("quad_curvature") {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| match v {
                Value::Float(x) => Ok(*x),
                Value::Integer(i) => Ok(*i as f64),
                _ => Err(spec_err("`quad_curvature` must hold numbers")),
            })
            .collect::<Result<Vec<_>, _>>()?,
        Some(_) => return Err(spec_err("`quad_curvature` must be an array")),
        None => {
            let lo = f64_or(raw, "quad_eigen_min", 0.5)?;
            let hi = f64_or(raw, "quad_eigen_max", 2.0)?;
            if dim == 1 {
                vec![hi]
            } else {
                (0..dim).map(|i| lo + (hi - lo) * i as f64 / (dim - 1) as f64).collect()
            }
        }
    };
    Ok(QuadraticSpec {
        devices,
        dim,
        samples_per_device: usize_opt(raw, "quad_samples_per_device")?.unwrap_or(64),
        curvature,
        center_spread: f64_or(raw, "quad_center_spread", 0.0)?,
        noise_spread: f64_or(raw, "quad_noise_spread", 1.0)?,
        init_scale: f64_or(raw, "quad_init_scale", 1.0)?,
    })
}

fn fill_missing(raw: &mut Table, key: &str, value: Value) {
    raw.entry(key.to_owned()).or_insert(value);
}

impl ExperimentSpec {
    /// Parses and validates a document, loading or generating its data.
    /// Relative paths resolve against `base_dir`.
    pub fn from_table(mut raw: Table, base_dir: &Path) -> Result<Self, HarnessError> {
        if let Some(k) = raw.keys().find(|k| !KNOWN_KEYS.contains(&k.as_str()) && !HARNESS_KEYS.contains(&k.as_str())) {
            return Err(HarnessError::UnknownKey(k.clone()));
        }
        let devices = match raw.get("N") {
            Some(Value::Integer(n)) if *n >= 1 => *n as usize,
            _ => return Err(oafel_core::config::ConfigError::MissingKey("N".into()).into()),
        };
        let data_seed = usize_opt(&raw, "data_seed")?.unwrap_or(0) as u64;

        let data = match str_or(&raw, "dataset", "quadratic")? {
            "quadratic" => {
                let dim = match raw.get("s") {
                    Some(Value::Integer(s)) if *s >= 1 => *s as usize,
                    _ => return Err(spec_err("quadratic dataset needs an integer `s` >= 1")),
                };
                let qs = quadratic_spec(&raw, devices, dim)?;
                let q = synth_quadratic(&qs, &mut derive_stream(data_seed, "synth", 0, 0))?;
                fill_missing(&mut raw, "l_smooth", Value::Float(q.l_smooth));
                fill_missing(&mut raw, "mu", Value::Float(q.mu));
                fill_missing(&mut raw, "G_sq", Value::Float(q.g_sq));
                PreparedData::Quadratic(q)
            }
            "mnist" => {
                let dir = resolve(base_dir, str_or(&raw, "mnist_dir", "data/mnist")?);
                let full_train = load_mnist_idx(
                    &dir.join("train-images-idx3-ubyte.gz"),
                    &dir.join("train-labels-idx1-ubyte.gz"),
                )?;
                let full_test = load_mnist_idx(
                    &dir.join("t10k-images-idx3-ubyte.gz"),
                    &dir.join("t10k-labels-idx1-ubyte.gz"),
                )?;
                let train = match usize_opt(&raw, "train_subset")? {
                    Some(k) => full_train.subset(&stratified_subset(&full_train, k)?),
                    None => full_train,
                };
                let test = match usize_opt(&raw, "test_subset")? {
                    Some(k) => full_test.subset(&stratified_subset(&full_test, k)?),
                    None => full_test,
                };
                let hidden = usize_opt(&raw, "hidden")?.unwrap_or(MlpModel::MNIST.hidden);
                let model = MlpModel::new(train.feature_dim(), hidden, train.class_count());
                match raw.get("s") {
                    None => {
                        raw.insert("s".into(), Value::Integer(model.param_count() as i64));
                    }
                    Some(Value::Integer(s)) if *s as usize == model.param_count() => {}
                    Some(_) => {
                        return Err(spec_err(format!("`s` must equal the network size {}", model.param_count())))
                    }
                }
                PreparedData::Mnist { model, train, test }
            }
            other => return Err(spec_err(format!("unknown dataset `{other}` (expected quadratic or mnist)"))),
        };

        let config = validate_config(&raw)?;
        let partition = match str_or(&raw, "partition", "iid")? {
            "iid" => PartitionMode::Iid,
            "non_iid" => PartitionMode::NonIid(usize_opt(&raw, "labels_per_device")?.unwrap_or(1)),
            other => return Err(spec_err(format!("unknown partition `{other}`"))),
        };
        let policy = str_or(&raw, "policy", "dynamic")?.parse::<Policy>().map_err(HarnessError::Spec)?;
        let obs_error = f64_or(&raw, "obs_error", 0.0)?;
        if !(0.0..1.0).contains(&obs_error) {
            return Err(spec_err("`obs_error` must lie in [0, 1)"));
        }
        let seeds = match raw.get("seeds") {
            None => vec![0],
            Some(Value::Array(items)) => items
                .iter()
                .map(|v| match v {
                    Value::Integer(i) if *i >= 0 => Ok(*i as u64),
                    _ => Err(spec_err("`seeds` must hold non-negative integers")),
                })
                .collect::<Result<Vec<_>, _>>()?,
            Some(Value::Integer(i)) if *i >= 0 => vec![*i as u64],
            Some(_) => return Err(spec_err("`seeds` must be an integer array")),
        };
        if seeds.is_empty() {
            return Err(spec_err("`seeds` must not be empty"));
        }
        let fading_scale = f64_or(&raw, "fading_scale", 1.0)?;
        if !(fading_scale > 0.0 && fading_scale.is_finite()) {
            return Err(spec_err("`fading_scale` must be positive"));
        }
        let rounds = config.hyper.rounds;
        let eval_every = match usize_opt(&raw, "eval_every")? {
            Some(0) => return Err(spec_err("`eval_every` must be >= 1")),
            Some(k) => k,
            None if rounds <= 500 => 1,
            None => 10,
        };
        Ok(Self {
            config,
            data,
            partition,
            policy,
            obs_error,
            seeds,
            out: resolve(base_dir, str_or(&raw, "out", "out")?),
            data_seed,
            fading_scale,
            eval_subset: usize_opt(&raw, "eval_subset")?.unwrap_or(1000),
            eval_every,
        })
    }

    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let mut raw: Table = text.parse().map_err(|e: toml::de::Error| spec_err(e.to_string()))?;
        overrides.apply(&mut raw);
        Self::from_table(raw, base_dir)
    }

    pub fn from_path(path: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }
}
