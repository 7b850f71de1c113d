//! Run configuration.
//!
//! Config files are flat `key = value` lines with dotted section names
//! (a TOML subset), for example:
//!
//! ```text
//! train.epochs = 30
//! model.variant = "dinf"
//! iff.gamma = 0.1
//! synth.mixture = [[0.7, 0.0, 0.3], [0.2, 0.3, 0.5], [0.1, 0.5, 0.9]]
//! ```
//!
//! Unknown keys are rejected. [`TrainConfig::to_text`] writes every key, and
//! parsing that text gives back an identical config.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::filter::FilterConfig;
use crate::infn::{InfnConfig, Variant};
use crate::losses::IffConfig;
use crate::synth::{OverlapBucket, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Seed for parameter initialization and batch order.
    pub seed: u64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_grad_norm: Option<f64>,
    /// Evaluate on the eval split every this many epochs (0: last epoch only).
    pub eval_every: usize,
    pub variant: Variant,
    pub k: usize,
    pub k_eval: usize,
    pub iff: IffConfig,
    pub filter: FilterConfig,
    pub synth: SynthConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            clip_grad_norm: Some(5.0),
            eval_every: 1,
            variant: Variant::Dinf,
            k: 3,
            k_eval: 1,
            iff: IffConfig::default(),
            filter: FilterConfig::desk(),
            synth: SynthConfig::default(),
        }
    }
}

fn cfg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}

fn as_f64(key: &str, v: &toml::Value) -> Result<f64> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        _ => cfg_err(format!("`{key}` must be a number, got {v}")),
    }
}

fn as_u64(key: &str, v: &toml::Value) -> Result<u64> {
    match v {
        toml::Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        _ => cfg_err(format!("`{key}` must be a non-negative integer, got {v}")),
    }
}

fn as_usize(key: &str, v: &toml::Value) -> Result<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_bool(key: &str, v: &toml::Value) -> Result<bool> {
    v.as_bool()
        .map_or_else(|| cfg_err(format!("`{key}` must be true or false, got {v}")), Ok)
}

fn as_str<'a>(key: &str, v: &'a toml::Value) -> Result<&'a str> {
    v.as_str()
        .map_or_else(|| cfg_err(format!("`{key}` must be a string, got {v}")), Ok)
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

/// Parses a flat dotted-key text into `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, toml::Value)>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    let mut out = Vec::new();
    flatten("", &table, &mut out);
    Ok(out)
}

/// Parses a single command-line value: anything TOML accepts, otherwise a bare
/// string.
pub fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl TrainConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies every key in `text` on top of the current values. A
    /// `filter.preset` key is applied before the individual widths.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut pairs = parse_pairs(text)?;
        pairs.sort_by_key(|(k, _)| k != "filter.preset");
        for (k, v) in pairs {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, v: &toml::Value) -> Result<()> {
        match key {
            "train.epochs" => self.epochs = as_usize(key, v)?,
            "train.batch_size" => self.batch_size = as_usize(key, v)?,
            "train.learning_rate" => self.learning_rate = as_f64(key, v)?,
            "train.momentum" => self.momentum = as_f64(key, v)?,
            "train.seed" => self.seed = as_u64(key, v)?,
            "train.clip_grad_norm" => {
                let c = as_f64(key, v)?;
                self.clip_grad_norm = (c > 0.0).then_some(c);
            }
            "train.eval_every" => self.eval_every = as_usize(key, v)?,
            "model.variant" => self.variant = Variant::from_name(as_str(key, v)?)?,
            "model.k" => self.k = as_usize(key, v)?,
            "model.k_eval" => self.k_eval = as_usize(key, v)?,
            "iff.enabled" => {
                if as_bool(key, v)? {
                    if self.iff.gamma.is_none() {
                        self.iff.gamma = IffConfig::default().gamma;
                    }
                } else {
                    self.iff.gamma = None;
                }
            }
            "iff.gamma" => self.iff.gamma = Some(as_f64(key, v)?),
            "iff.iou_floor" => self.iff.iou_floor = as_f64(key, v)?,
            "iff.reg_weight" => self.iff.reg_weight = as_f64(key, v)?,
            "filter.preset" => self.filter = FilterConfig::preset(as_str(key, v)?)?,
            "filter.channels" => self.filter.channels = as_usize(key, v)?,
            "filter.mid_channels" => self.filter.mid_channels = as_usize(key, v)?,
            "filter.spatial" => self.filter.spatial = as_usize(key, v)?,
            "filter.instance_dim" => self.filter.instance_dim = as_usize(key, v)?,
            "synth.num_classes" => self.synth.num_classes = as_usize(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = as_f64(key, v)?,
            "synth.pattern_ratio" => self.synth.pattern_ratio = as_f64(key, v)?,
            "synth.n_train" => self.synth.n_train = as_usize(key, v)?,
            "synth.n_eval" => self.synth.n_eval = as_usize(key, v)?,
            "synth.seed" => self.synth.seed = as_u64(key, v)?,
            "synth.mixture" => self.synth.overlap_mixture = parse_mixture(key, v)?,
            other => return cfg_err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }

    /// Brings derived fields in line (grid shape of the data follows the
    /// filter) and checks the whole config.
    pub fn resolve(&mut self) -> Result<()> {
        self.synth.channels = self.filter.channels;
        self.synth.spatial = self.filter.spatial;
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return cfg_err("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return cfg_err(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return cfg_err(format!("momentum must lie in [0,1), got {}", self.momentum));
        }
        if self.synth.channels != self.filter.channels || self.synth.spatial != self.filter.spatial {
            return cfg_err("data grid does not match the filter widths");
        }
        self.iff.validate()?;
        self.synth.validate()?;
        self.model().validate()
    }

    pub fn model(&self) -> InfnConfig {
        InfnConfig {
            k: self.k,
            k_eval: self.k_eval,
            filter: self.filter,
            num_classes: self.synth.num_classes,
            variant: self.variant,
        }
    }

    /// Every key, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        let f = |x: f64| format!("{x:?}");
        line("train.epochs", self.epochs.to_string());
        line("train.batch_size", self.batch_size.to_string());
        line("train.learning_rate", f(self.learning_rate));
        line("train.momentum", f(self.momentum));
        line("train.seed", self.seed.to_string());
        line("train.clip_grad_norm", f(self.clip_grad_norm.unwrap_or(0.0)));
        line("train.eval_every", self.eval_every.to_string());
        line("model.variant", format!("\"{}\"", self.variant.name()));
        line("model.k", self.k.to_string());
        line("model.k_eval", self.k_eval.to_string());
        line("iff.enabled", self.iff.gamma.is_some().to_string());
        if let Some(g) = self.iff.gamma {
            line("iff.gamma", f(g));
        }
        line("iff.iou_floor", f(self.iff.iou_floor));
        line("iff.reg_weight", f(self.iff.reg_weight));
        line("filter.channels", self.filter.channels.to_string());
        line("filter.mid_channels", self.filter.mid_channels.to_string());
        line("filter.spatial", self.filter.spatial.to_string());
        line("filter.instance_dim", self.filter.instance_dim.to_string());
        line("synth.num_classes", self.synth.num_classes.to_string());
        line("synth.noise_sigma", f(self.synth.noise_sigma));
        line("synth.pattern_ratio", f(self.synth.pattern_ratio));
        line("synth.n_train", self.synth.n_train.to_string());
        line("synth.n_eval", self.synth.n_eval.to_string());
        line("synth.seed", self.synth.seed.to_string());
        let mix: Vec<String> = self
            .synth
            .overlap_mixture
            .iter()
            .map(|b| format!("[{}, {}, {}]", f(b.prob), f(b.lo), f(b.hi)))
            .collect();
        line("synth.mixture", format!("[{}]", mix.join(", ")));
        s
    }
}

fn parse_mixture(key: &str, v: &toml::Value) -> Result<[OverlapBucket; 3]> {
    let rows = v
        .as_array()
        .filter(|a| a.len() == 3)
        .map_or_else(|| cfg_err(format!("`{key}` must hold three [prob, lo, hi] rows")), Ok)?;
    let mut out = [OverlapBucket { prob: 0.0, lo: 0.0, hi: 0.0 }; 3];
    for (slot, row) in out.iter_mut().zip(rows) {
        let r = row
            .as_array()
            .filter(|r| r.len() == 3)
            .map_or_else(|| cfg_err(format!("`{key}` rows must be [prob, lo, hi]")), Ok)?;
        *slot = OverlapBucket {
            prob: as_f64(key, &r[0])?,
            lo: as_f64(key, &r[1])?,
            hi: as_f64(key, &r[2])?,
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = TrainConfig {
            learning_rate: 0.1 + 0.2,
            variant: Variant::ReluInteraction,
            iff: IffConfig::disabled(),
            ..TrainConfig::default()
        };
        cfg.resolve().unwrap();
        assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(TrainConfig::from_text("train.epoch = 3").is_err());
        assert!(TrainConfig::from_text("train.epochs = -3").is_err());
    }

    #[test]
    fn preset_applies_before_widths() {
        let cfg = TrainConfig::from_text("filter.channels = 64\nfilter.preset = \"full\"").unwrap();
        assert_eq!(cfg.filter.channels, 64);
        assert_eq!(cfg.filter.instance_dim, 1024);
    }

    #[test]
    fn cli_values() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("dinf"), toml::Value::String("dinf".into()));
    }
}
