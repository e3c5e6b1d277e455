//! Run configuration: flat `section.key = value` settings, read from a
//! TOML-compatible file and overridden from the command line.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_PI_2;
use std::path::{Path, PathBuf};

use privacyface::dp::{PrivacyBudget, DEFAULT_DELTA};
use privacyface::dplc::{DplcMode, DplcParams};
use privacyface::federation::{Aggregation, FederationConfig, Mode};
use privacyface::geometry::Angle;
use privacyface::losses::{LossConfig, LossKind};
use privacyface::synth::SyntheticParams;
use serde::Serialize;
use toml::Value;

/// Environment variable naming the default output directory.
pub const OUTPUT_ENV: &str = "PRIVACYFACE_OUT";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot parse {origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation { key: key.to_string(), message: message.into() }
}

/// Fully resolved settings, echoed into every output file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub output: PathBuf,
    pub synth: SyntheticParams,
    pub federation: FederationConfig,
    /// Release mode used by the `cluster` subcommand. Simulations derive it from the federation mode.
    pub cluster_mode: DplcMode,
}

/// Ordered `key -> value` settings before they are applied.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settings(BTreeMap<String, Value>);

impl Settings {
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let table: toml::Table =
            text.parse().map_err(|e: toml::de::Error| ConfigError::Parse { origin: origin.into(), message: e.to_string() })?;
        let mut out = Settings::default();
        flatten("", &Value::Table(table), &mut out.0);
        Ok(out)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Sets `key` from a raw command-line value. Anything that is not a TOML
    /// literal is taken as a bare string, so `--set federation.mode=phi` works.
    pub fn set_raw(&mut self, key: &str, raw: &str) {
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| Value::String(raw.to_string()));
        self.0.insert(key.to_string(), value);
    }

    /// Parses `key=value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| ConfigError::Parse {
            origin: "--set".into(),
            message: format!("expected key=value, got `{assignment}`"),
        })?;
        self.set_raw(k.trim(), v.trim());
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: Value) {
        self.0.insert(key.to_string(), value);
    }

    /// Later entries win.
    pub fn merge(&mut self, other: Settings) {
        self.0.extend(other.0);
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.0.get(key)
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        resolve(self)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, Value>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn float(key: &str, v: &Value) -> Result<f64, ConfigError> {
    match v {
        Value::Float(f) => Ok(*f),
        Value::Integer(i) => Ok(*i as f64),
        Value::String(s) if s == "inf" => Ok(f64::INFINITY),
        _ => Err(invalid(key, format!("expected a number, got {v}"))),
    }
}

fn count(key: &str, v: &Value) -> Result<usize, ConfigError> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as usize),
        _ => Err(invalid(key, format!("expected a non-negative integer, got {v}"))),
    }
}

fn positive(key: &str, v: &Value) -> Result<usize, ConfigError> {
    let n = count(key, v)?;
    if n == 0 {
        return Err(invalid(key, "must be >= 1"));
    }
    Ok(n)
}

fn boolean(key: &str, v: &Value) -> Result<bool, ConfigError> {
    v.as_bool().ok_or_else(|| invalid(key, format!("expected true or false, got {v}")))
}

fn text<'a>(key: &str, v: &'a Value) -> Result<&'a str, ConfigError> {
    v.as_str().ok_or_else(|| invalid(key, format!("expected a string, got {v}")))
}

fn cap_angle(key: &str, v: &Value) -> Result<Angle, ConfigError> {
    let r = float(key, v)?;
    if !(r > 0.0 && r <= FRAC_PI_2) {
        return Err(invalid(key, format!("must be in (0, pi/2], got {r}")));
    }
    Angle::new(r).map_err(|e| invalid(key, e.to_string()))
}

fn finite_nonneg(key: &str, v: &Value) -> Result<f64, ConfigError> {
    let x = float(key, v)?;
    if !(x >= 0.0 && x.is_finite()) {
        return Err(invalid(key, format!("must be finite and >= 0, got {x}")));
    }
    Ok(x)
}

pub fn parse_mode(key: &str, s: &str) -> Result<Mode, ConfigError> {
    match s {
        "phi" => Ok(Mode::Phi),
        "phi-p" => Ok(Mode::PhiP),
        "phi-hat" => Ok(Mode::PhiHat),
        "naive" => Ok(Mode::Naive),
        _ => Err(invalid(key, format!("unknown mode `{s}` (phi, phi-p, phi-hat, naive)"))),
    }
}

fn resolve(settings: &Settings) -> Result<RunConfig, ConfigError> {
    let mut seed = 0u64;
    let mut output = None;
    let mut synth = SyntheticParams::default();
    let mut fed = FederationConfig::default();
    let mut epsilon = 1.0;
    let mut delta = DEFAULT_DELTA;
    let mut cluster_mode = DplcMode::Sanitized;
    let mut loss_kind = LossKind::ArcFace;
    let mut loss_scale = 64.0;
    let mut loss_margin = None;
    let mut loss_rho = None;

    for (key, v) in &settings.0 {
        let k = key.as_str();
        match k {
            "seed" => {
                seed = match v {
                    Value::Integer(i) if *i >= 0 => *i as u64,
                    _ => return Err(invalid(k, format!("expected a non-negative integer, got {v}"))),
                }
            }
            "output" => output = Some(PathBuf::from(text(k, v)?)),

            "synth.identities_per_client" => synth.identities_per_client = positive(k, v)?,
            "synth.train_per_identity" => synth.train_per_identity = positive(k, v)?,
            "synth.eval_per_identity" => synth.eval_per_identity = count(k, v)?,
            "synth.kappa" => {
                synth.kappa = float(k, v)?;
                if !(synth.kappa > 0.0) {
                    return Err(invalid(k, "must be > 0 (or \"inf\")"));
                }
            }
            "synth.latent_dim" => synth.latent_dim = count(k, v)?,
            "synth.input_dim" => synth.input_dim = count(k, v)?,
            "synth.domain_offset" => synth.domain_offset = finite_nonneg(k, v)?,
            "synth.client_offset" => synth.client_offset = finite_nonneg(k, v)?,
            "synth.public_identities" => synth.public_identities = count(k, v)?,

            "federation.clients" => fed.clients = positive(k, v)?,
            "federation.rounds" => fed.rounds = positive(k, v)?,
            "federation.mode" => fed.mode = parse_mode(k, text(k, v)?)?,
            "federation.learning_rate" => fed.learning_rate = finite_nonneg(k, v)?,
            "federation.weight_decay" => fed.weight_decay = finite_nonneg(k, v)?,
            "federation.batch_size" => fed.batch_size = positive(k, v)?,
            "federation.local_epochs" => fed.local_epochs = count(k, v)?,
            "federation.aggregation" => {
                fed.aggregation = match text(k, v)? {
                    "fed_avg" | "fedavg" => Aggregation::FedAvg,
                    "fed_sgd" | "fedsgd" => Aggregation::FedSgd,
                    s => return Err(invalid(k, format!("unknown aggregation `{s}` (fedavg, fedsgd)"))),
                }
            }
            "federation.offline_probability" => {
                let p = float(k, v)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(invalid(k, format!("must be in [0, 1], got {p}")));
                }
                fed.offline_probability = p;
            }
            "federation.shared_public_shard" => fed.shared_public_shard = boolean(k, v)?,
            "federation.embedding_dim" => fed.embedding_dim = count(k, v)?,
            "federation.init_scale" => fed.init_scale = float(k, v)?,
            "federation.far_targets" => {
                let items = v.as_array().ok_or_else(|| invalid(k, "expected an array of numbers"))?;
                fed.far_targets = items.iter().map(|x| float(k, x)).collect::<Result<_, _>>()?;
                if fed.far_targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(invalid(k, "targets must lie in [0, 1]"));
                }
            }
            "federation.negative_pairs" => fed.negative_pairs = count(k, v)?,

            "dplc.rho" => fed.dplc.rho = cap_angle(k, v)?,
            "dplc.min_cluster_size" => fed.dplc.min_cluster_size = positive(k, v)?,
            "dplc.max_queries" => fed.dplc.max_queries = positive(k, v)?,
            "dplc.epsilon" => epsilon = float(k, v)?,
            "dplc.delta" => delta = float(k, v)?,
            "dplc.mode" => {
                cluster_mode = match text(k, v)? {
                    "sanitized" => DplcMode::Sanitized,
                    "noise_free" => DplcMode::NoiseFree,
                    "naive_per_center" => DplcMode::NaivePerCenter,
                    s => return Err(invalid(k, format!("unknown mode `{s}` (sanitized, noise_free, naive_per_center)"))),
                }
            }

            "loss.kind" => {
                loss_kind = match text(k, v)? {
                    "cosface" | "cos_face" => LossKind::CosFace,
                    "arcface" | "arc_face" => LossKind::ArcFace,
                    s => return Err(invalid(k, format!("unknown loss `{s}` (cosface, arcface)"))),
                }
            }
            "loss.scale" => loss_scale = float(k, v)?,
            "loss.margin" => loss_margin = Some(float(k, v)?),
            "loss.rho" => loss_rho = Some(cap_angle(k, v)?),

            _ => return Err(invalid(k, "unknown key")),
        }
    }

    fed.dplc.budget = PrivacyBudget::new(epsilon, delta).map_err(|e| {
        let key = if epsilon > 0.0 && epsilon.is_finite() { "dplc.delta" } else { "dplc.epsilon" };
        invalid(key, e.to_string())
    })?;
    let margin = loss_margin.unwrap_or_else(|| LossConfig::default_margin(loss_kind));
    fed.loss = LossConfig::new(loss_kind, loss_scale, margin).map_err(|e| {
        let key = if loss_scale > 0.0 && loss_scale.is_finite() { "loss.margin" } else { "loss.scale" };
        invalid(key, e.to_string())
    })?;
    fed.rho = loss_rho.unwrap_or(fed.dplc.rho);
    synth.clients = fed.clients;

    synth.validate().map_err(|e| invalid("synth", e.to_string()))?;
    fed.validate().map_err(|e| invalid("federation", e.to_string()))?;
    DplcParams { mode: cluster_mode, ..fed.dplc }.validate().map_err(|e| invalid("dplc", e.to_string()))?;

    let output = output
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    Ok(RunConfig { seed, output, synth, federation: fed, cluster_mode })
}
