use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::EncoderConfig;
use crate::baselines::{LayerChoice, MixupConfig};
use crate::error::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Vanilla,
    Mlti,
    Mtm,
    Vtm,
    Hvtm,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Vanilla, Method::Mlti, Method::Mtm, Method::Vtm, Method::Hvtm];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::Mlti => "mlti",
            Method::Mtm => "mtm",
            Method::Vtm => "vtm",
            Method::Hvtm => "hvtm",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, Method::Vtm | Method::Hvtm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Config(format!("unknown method {s:?}; expected one of: {}", names.join(", ")))
        })
    }
}

/// Every knob of a training run. Serialized as a flat TOML table; missing
/// keys take their defaults, unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub config_version: u32,
    pub method: Method,
    pub iterations: usize,
    /// Episodes per meta-batch (`T`).
    pub meta_batch: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub lr: f64,
    pub mc_samples: usize,
    /// Weight of the original-task loss.
    pub lambda_orig: f64,
    /// Weight of the KL term.
    pub kl_weight: f64,
    pub seed: u64,
    pub log_every: usize,
    pub eval_every: usize,
    pub val_episodes: usize,
    pub checkpoint_every: usize,
    pub n_blocks: usize,
    pub channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    /// One delta per task instead of one per class.
    pub per_task_deltas: bool,
    /// Separate support and query latents.
    pub split_latent: bool,
    /// Block carrying the flat variational latent.
    pub vtm_layer: usize,
    pub mixup_alpha: f64,
    pub mixup_beta: f64,
    /// `"random"` or a layer index in `[0, n_blocks]`.
    pub mixup_layer: String,
    /// Include elapsed seconds in the metrics stream (makes it
    /// non-reproducible).
    pub record_wallclock: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            method: Method::Vanilla,
            iterations: 2000,
            meta_batch: 4,
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            lr: 1e-3,
            mc_samples: 20,
            lambda_orig: 0.01,
            kl_weight: 0.01,
            seed: 0,
            log_every: 50,
            eval_every: 500,
            val_episodes: 100,
            checkpoint_every: 500,
            n_blocks: 4,
            channels: 32,
            kernel: 3,
            pool: 2,
            bn_epsilon: 1e-5,
            bn_momentum: 0.9,
            per_task_deltas: false,
            split_latent: false,
            vtm_layer: 0,
            mixup_alpha: 2.0,
            mixup_beta: 2.0,
            mixup_layer: "random".into(),
            record_wallclock: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.config_version != CONFIG_VERSION {
            return bad(format!("config_version {} is not supported (expected {CONFIG_VERSION})", self.config_version));
        }
        if self.meta_batch < 2 && self.method != Method::Vanilla {
            return bad(format!("{} needs meta_batch >= 2, got {}", self.method, self.meta_batch));
        }
        if self.meta_batch == 0 || self.n_way == 0 || self.k_shot == 0 || self.q_per_class == 0 {
            return bad("meta_batch, n_way, k_shot and q_per_class must be positive".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.mc_samples == 0 {
            return bad("mc_samples must be at least 1".into());
        }
        if !(self.lambda_orig >= 0.0) || !(self.kl_weight >= 0.0) {
            return bad(format!(
                "lambda_orig and kl_weight must be >= 0, got {} and {}",
                self.lambda_orig, self.kl_weight
            ));
        }
        if self.log_every == 0 || self.eval_every == 0 || self.checkpoint_every == 0 || self.val_episodes == 0 {
            return bad("log_every, eval_every, checkpoint_every and val_episodes must be positive".into());
        }
        if self.vtm_layer >= self.n_blocks {
            return bad(format!("vtm_layer {} outside [0, {})", self.vtm_layer, self.n_blocks));
        }
        self.mixup()?.validate()?;
        if let LayerChoice::Fixed(l) = self.mixup()?.layer {
            if l > self.n_blocks {
                return bad(format!("mixup_layer {l} outside [0, {}]", self.n_blocks));
            }
        }
        Ok(())
    }

    pub fn encoder(&self, input_shape: (usize, usize, usize)) -> EncoderConfig {
        EncoderConfig {
            input_shape,
            n_blocks: self.n_blocks,
            channels: self.channels,
            kernel: self.kernel,
            pool: self.pool,
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
        }
    }

    pub fn mixup(&self) -> Result<MixupConfig> {
        let layer = match self.mixup_layer.as_str() {
            "random" => LayerChoice::Random,
            s => LayerChoice::Fixed(s.parse().map_err(|_| {
                Error::Config(format!("mixup_layer must be \"random\" or a layer index, got {s:?}"))
            })?),
        };
        Ok(MixupConfig {
            alpha: self.mixup_alpha,
            beta: self.mixup_beta,
            layer,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key = value` with `value` parsed as a TOML value (bare
    /// words are taken as strings).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table = toml::Table::try_from(&*self).expect("flat config serializes");
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (Some(toml::Value::String(_)), v) if !v.is_str() => toml::Value::String(value.to_string()),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        let updated: TrainConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        *self = updated;
        Ok(())
    }

    /// Names of every key, for error messages.
    pub fn keys() -> Vec<String> {
        toml::Table::try_from(TrainConfig::default())
            .expect("flat config serializes")
            .keys()
            .cloned()
            .collect()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        crate::evaluator::fingerprint(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_config_round_trips() {
        let cfg = TrainConfig {
            method: Method::Hvtm,
            iterations: 50_000,
            channels: 32,
            ..Default::default()
        };
        let text = cfg.to_toml();
        assert!(text.contains("iterations = 50000"));
        assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = TrainConfig::from_toml("learning_rate = 0.1\n").unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        assert!(err.contains("kl_weight") && err.contains("lambda_orig"), "{err}");
    }

    #[test]
    fn unknown_method_lists_all_five() {
        let err = "foo".parse::<Method>().unwrap_err().to_string();
        for m in Method::ALL {
            assert!(err.contains(m.name()), "{err}");
        }
    }

    #[test]
    fn set_overrides() {
        let mut cfg = TrainConfig::default();
        cfg.set("method", "mtm").unwrap();
        cfg.set("kl_weight", "0.1").unwrap();
        cfg.set("iterations", "7").unwrap();
        cfg.set("lr", "1").unwrap();
        assert_eq!(cfg.lr, 1.0);
        cfg.set("mixup_layer", "2").unwrap();
        assert_eq!(cfg.mixup_layer, "2");
        assert_eq!((cfg.method, cfg.kl_weight, cfg.iterations), (Method::Mtm, 0.1, 7));
        assert!(cfg.set("nope", "1").is_err());
        assert!(TrainConfig::keys().contains(&"mc_samples".to_string()));
    }

    #[test]
    fn invariants_are_checked() {
        for (k, v) in [("mc_samples", "0"), ("lambda_orig", "-1.0"), ("kl_weight", "-0.5")] {
            let mut cfg = TrainConfig::default();
            cfg.set(k, v).unwrap();
            assert!(cfg.validate().is_err(), "{k} = {v}");
        }
    }
}
