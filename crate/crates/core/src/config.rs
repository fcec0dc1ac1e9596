//! Validated hyperparameters and per-device energy configuration.
//!
//! The raw document is a flat TOML table whose keys are the symbol names
//! used throughout the crate (`T`, `N`, `s`, `L_b`, `eta`, `V`, ...).
//! Keys not listed in [`KNOWN_KEYS`] are ignored here so that the harness can
//! keep its own experiment keys in the same file.

use serde::{Deserialize, Serialize};
use thiserror::Error;
use toml::{Table, Value};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("invalid value for `{0}`: {1}")]
    InvalidValue(String, String),
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidValue(key.to_owned(), reason.into())
}

/// Keys consumed by [`validate_config`].
pub const KNOWN_KEYS: &[&str] = &[
    "T",
    "N",
    "s",
    "L_b",
    "L_e",
    "eta",
    "momentum",
    "l_smooth",
    "mu",
    "G_sq",
    "gamma0",
    "sigma0_sq",
    "V",
    "q_min",
    "delta_h",
    "delta_h_mode",
    "K_local",
    "power_mode",
    "estimator",
    "certify_theorem1",
    "e_n",
    "E_bar_n",
    "E_cp_round",
    "E_bar_round",
];

pub const DEFAULT_Q_MIN: f64 = 0.1;
pub const DEFAULT_MOMENTUM: f64 = 0.0;
pub const DEFAULT_K_LOCAL: usize = 1;
pub const DEFAULT_DELTA_H_REL: f64 = 0.5;

/// Learning-rate sequence `eta_t`, `t = 1..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearningRate {
    Constant(f64),
    PerRound(Vec<f64>),
}

impl LearningRate {
    /// Rate for round `t` (1-based). Rounds past the end reuse the last value.
    pub fn at(&self, t: usize) -> f64 {
        match self {
            LearningRate::Constant(eta) => *eta,
            LearningRate::PerRound(v) => v[t.clamp(1, v.len()) - 1],
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            LearningRate::Constant(eta) => *eta,
            LearningRate::PerRound(v) => v.iter().copied().fold(f64::MIN, f64::max),
        }
    }
}

/// How the power scalar `sigma_t` is derived from the norm estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerMode {
    /// `gamma0 * sigma0_sq * sqrt(s) / min ||g||`, as printed.
    PaperLiteral,
    /// `sigma0 * sqrt(gamma0 * s) / min ||g||`, which makes the expected
    /// received SNR of the weakest single device equal `gamma0`.
    SnrConsistent,
}

/// Which gradient-norm predictor feeds the energy estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormEstimator {
    /// Most recently reported norm.
    EstP,
    /// Fresh probe gradient on `L_e` samples each round.
    EstC,
}

/// Back-off threshold for the post-computation rescheduling step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Rescheduling {
    Disabled,
    /// Back off when `E - E_est > delta_h`.
    Absolute(f64),
    /// Back off when `E - E_est > factor * E_est`.
    Relative(f64),
}

impl Rescheduling {
    /// The tolerance `delta_h` for a device whose estimate was `e_est`.
    pub fn tolerance(&self, e_est: f64) -> f64 {
        match *self {
            Rescheduling::Disabled => f64::INFINITY,
            Rescheduling::Absolute(d) => d,
            Rescheduling::Relative(f) => f * e_est,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub rounds: usize,
    pub devices: usize,
    pub dim: usize,
    pub batch_size: usize,
    pub est_batch_size: usize,
    pub eta: LearningRate,
    pub momentum: f64,
    pub l_smooth: f64,
    pub mu: Option<f64>,
    pub g_sq: f64,
    pub gamma0: f64,
    pub sigma0_sq: f64,
    /// Drift-plus-penalty weight `V`.
    pub penalty_weight: f64,
    pub q_min: f64,
    pub rescheduling: Rescheduling,
    pub local_iters: usize,
    pub power_mode: PowerMode,
    pub estimator: NormEstimator,
    pub certify_theorem1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    /// Computation energy per sample per gradient pass `e_n` (J).
    pub energy_per_sample: f64,
    /// Total energy budget over all `T` rounds (J).
    pub budget: f64,
}

impl DeviceConfig {
    /// Per-round budget share `E_bar_n / T`.
    pub fn budget_share(&self, rounds: usize) -> f64 {
        self.budget / rounds as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidatedConfig {
    pub hyper: Hyperparams,
    pub devices: Vec<DeviceConfig>,
}

fn get_f64(raw: &Table, key: &str) -> Result<Option<f64>, ConfigError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::Float(x)) => Ok(Some(*x)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(other) => Err(invalid(key, format!("expected a number, got {}", other.type_str()))),
    }
}

fn req_f64(raw: &Table, key: &str) -> Result<f64, ConfigError> {
    get_f64(raw, key)?.ok_or_else(|| ConfigError::MissingKey(key.to_owned()))
}

fn get_usize(raw: &Table, key: &str) -> Result<Option<usize>, ConfigError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
        Some(Value::Integer(_)) => Err(invalid(key, "must be non-negative")),
        Some(other) => Err(invalid(key, format!("expected an integer, got {}", other.type_str()))),
    }
}

fn req_usize(raw: &Table, key: &str) -> Result<usize, ConfigError> {
    get_usize(raw, key)?.ok_or_else(|| ConfigError::MissingKey(key.to_owned()))
}

fn get_str<'a>(raw: &'a Table, key: &str) -> Result<Option<&'a str>, ConfigError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s.as_str())),
        Some(other) => Err(invalid(key, format!("expected a string, got {}", other.type_str()))),
    }
}

/// A number or an array of numbers; a scalar is broadcast to `len` entries.
fn get_f64_list(raw: &Table, key: &str, len: usize) -> Result<Option<Vec<f64>>, ConfigError> {
    match raw.get(key) {
        None => Ok(None),
        Some(Value::Array(items)) => {
            if items.len() != len {
                return Err(invalid(key, format!("expected {len} entries, got {}", items.len())));
            }
            items
                .iter()
                .map(|v| match v {
                    Value::Float(x) => Ok(*x),
                    Value::Integer(i) => Ok(*i as f64),
                    other => Err(invalid(key, format!("expected numbers, got {}", other.type_str()))),
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some)
        }
        Some(_) => Ok(get_f64(raw, key)?.map(|x| vec![x; len])),
    }
}

fn positive(key: &str, x: f64) -> Result<f64, ConfigError> {
    if x.is_finite() && x > 0.0 {
        Ok(x)
    } else {
        Err(invalid(key, "must be finite and > 0"))
    }
}

/// Checks every invariant of [`Hyperparams`] and [`DeviceConfig`] and fills
/// documented defaults (`q_min = 0.1`, `momentum = 0`, `K_local = 1`,
/// `L_e = L_b`, relative `delta_h = 0.5`).
pub fn validate_config(raw: &Table) -> Result<ValidatedConfig, ConfigError> {
    let rounds = req_usize(raw, "T")?;
    let devices = req_usize(raw, "N")?;
    let dim = req_usize(raw, "s")?;
    let batch_size = req_usize(raw, "L_b")?;
    for (key, v) in [("T", rounds), ("N", devices), ("s", dim), ("L_b", batch_size)] {
        if v < 1 {
            return Err(invalid(key, "must be >= 1"));
        }
    }
    let est_batch_size = get_usize(raw, "L_e")?.unwrap_or(batch_size);
    if est_batch_size < 1 {
        return Err(invalid("L_e", "must be >= 1"));
    }
    if est_batch_size > batch_size {
        return Err(invalid("L_e", "must not exceed L_b"));
    }

    let eta = match raw.get("eta") {
        None => return Err(ConfigError::MissingKey("eta".into())),
        Some(Value::Array(_)) => LearningRate::PerRound(get_f64_list(raw, "eta", rounds)?.unwrap_or_default()),
        Some(_) => LearningRate::Constant(req_f64(raw, "eta")?),
    };
    let etas = match &eta {
        LearningRate::Constant(e) => vec![*e],
        LearningRate::PerRound(v) => v.clone(),
    };
    if etas.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
        return Err(invalid("eta", "every learning rate must be finite and > 0"));
    }

    let momentum = get_f64(raw, "momentum")?.unwrap_or(DEFAULT_MOMENTUM);
    if !(0.0..1.0).contains(&momentum) {
        return Err(invalid("momentum", "must lie in [0, 1)"));
    }
    let l_smooth = positive("l_smooth", req_f64(raw, "l_smooth")?)?;
    let mu = match get_f64(raw, "mu")? {
        None => None,
        Some(m) => {
            let m = positive("mu", m)?;
            if m > l_smooth {
                return Err(invalid("mu", "must not exceed l_smooth"));
            }
            Some(m)
        }
    };
    let g_sq = req_f64(raw, "G_sq")?;
    if !(g_sq.is_finite() && g_sq >= 0.0) {
        return Err(invalid("G_sq", "must be finite and >= 0"));
    }
    let gamma0 = positive("gamma0", req_f64(raw, "gamma0")?)?;
    let sigma0_sq = positive("sigma0_sq", req_f64(raw, "sigma0_sq")?)?;
    let penalty_weight = positive("V", req_f64(raw, "V")?)?;
    let q_min = get_f64(raw, "q_min")?.unwrap_or(DEFAULT_Q_MIN);
    if !(q_min.is_finite() && q_min >= 0.0) {
        return Err(invalid("q_min", "must be finite and >= 0"));
    }

    let rescheduling = match get_str(raw, "delta_h_mode")?.unwrap_or("relative") {
        "off" => Rescheduling::Disabled,
        mode @ ("relative" | "absolute") => {
            let d = get_f64(raw, "delta_h")?.unwrap_or(DEFAULT_DELTA_H_REL);
            if !(d.is_finite() && d >= 0.0) {
                return Err(invalid("delta_h", "must be finite and >= 0"));
            }
            if mode == "relative" {
                Rescheduling::Relative(d)
            } else {
                Rescheduling::Absolute(d)
            }
        }
        other => return Err(invalid("delta_h_mode", format!("unknown mode `{other}`"))),
    };

    let local_iters = get_usize(raw, "K_local")?.unwrap_or(DEFAULT_K_LOCAL);
    if local_iters < 1 {
        return Err(invalid("K_local", "must be >= 1"));
    }
    let power_mode = match get_str(raw, "power_mode")?.unwrap_or("paper_literal") {
        "paper_literal" => PowerMode::PaperLiteral,
        "snr_consistent" => PowerMode::SnrConsistent,
        other => return Err(invalid("power_mode", format!("unknown mode `{other}`"))),
    };
    let estimator = match get_str(raw, "estimator")?.unwrap_or("est_p") {
        "est_p" => NormEstimator::EstP,
        "est_c" => NormEstimator::EstC,
        other => return Err(invalid("estimator", format!("unknown estimator `{other}`"))),
    };
    let certify_theorem1 = match raw.get("certify_theorem1") {
        None => false,
        Some(Value::Boolean(b)) => *b,
        Some(_) => return Err(invalid("certify_theorem1", "expected a boolean")),
    };
    if certify_theorem1 {
        let cap = (1.0 / l_smooth).min(1.0);
        if etas.iter().any(|e| *e > cap) {
            return Err(invalid("eta", format!("must satisfy eta_t <= min(1/l, 1) = {cap}")));
        }
    }

    let energy_per_sample = match (
        get_f64_list(raw, "e_n", devices)?,
        get_f64(raw, "E_cp_round")?,
    ) {
        (Some(_), Some(_)) => return Err(invalid("e_n", "give either e_n or E_cp_round, not both")),
        (Some(v), None) => v,
        (None, Some(round)) => vec![round / (batch_size * local_iters) as f64; devices],
        (None, None) => return Err(ConfigError::MissingKey("e_n".into())),
    };
    let budgets = match (
        get_f64_list(raw, "E_bar_n", devices)?,
        get_f64(raw, "E_bar_round")?,
    ) {
        (Some(_), Some(_)) => {
            return Err(invalid("E_bar_n", "give either E_bar_n or E_bar_round, not both"))
        }
        (Some(v), None) => v,
        (None, Some(round)) => vec![round * rounds as f64; devices],
        (None, None) => return Err(ConfigError::MissingKey("E_bar_n".into())),
    };
    let device_cfgs = energy_per_sample
        .into_iter()
        .zip(budgets)
        .map(|(e, b)| {
            Ok(DeviceConfig {
                energy_per_sample: positive("e_n", e)?,
                budget: positive("E_bar_n", b)?,
            })
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;

    Ok(ValidatedConfig {
        hyper: Hyperparams {
            rounds,
            devices,
            dim,
            batch_size,
            est_batch_size,
            eta,
            momentum,
            l_smooth,
            mu,
            g_sq,
            gamma0,
            sigma0_sq,
            penalty_weight,
            q_min,
            rescheduling,
            local_iters,
            power_mode,
            estimator,
            certify_theorem1,
        },
        devices: device_cfgs,
    })
}
