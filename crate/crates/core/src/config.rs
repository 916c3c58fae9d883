//! key=value run configuration shared by the CLI commands.
//!
//! One flat namespace covers encoder geometry, attack training, trigger
//! and target specs, inversion, landscape, and detection thresholds.
//! Unknown keys are rejected so typos fail loudly. `echo()` produces the
//! canonical sorted rendering used for report embedding and hashing.

use crate::attack::{Insertion, Similarity, TargetSpec, TrainConfig, TriggerSpec};
use crate::detect::{DetectionThresholds, LandscapeConfig};
use crate::encoder::{EncoderConfig, MaskMode, Pooling};
use crate::error::{Error, Result};
use crate::inversion::InversionConfig;
use rand::{rngs::StdRng, SeedableRng};
use std::collections::BTreeMap;
use std::path::Path;

const KNOWN_KEYS: &[&str] = &[
    "vocab_size",
    "d_model",
    "n_layers",
    "n_heads",
    "max_len",
    "mask",
    "pooling",
    "tau",
    "xi",
    "similarity",
    "lr",
    "steps",
    "batch_size",
    "poison_fraction",
    "trigger",
    "trigger_ids",
    "trigger_len",
    "insertion",
    "target_text",
    "target_kind",
    "lambda",
    "gamma",
    "inv_lr",
    "inv_batch",
    "epochs",
    "check_cadence",
    "m_train",
    "m_test",
    "sigma",
    "grid_size",
    "probe_batch",
    "assim_cut",
    "dev_cut",
    "rho1",
    "rho2",
    "rho3",
    "objective",
    "temperature",
    "tether",
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key=value", lineno + 1)));
            };
            let key = key.trim();
            let value = value.trim();
            if !KNOWN_KEYS.contains(&key) {
                return Err(Error::Config(format!("line {}: unknown key {key:?}", lineno + 1)));
            }
            if values.insert(key.to_string(), value.to_string()).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {key:?}", lineno + 1)));
            }
        }
        Ok(RunConfig { values })
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parse_typed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.values.get(key) {
            None => Ok(default),
            Some(raw) => raw
                .parse()
                .map_err(|_| Error::Config(format!("bad value {raw:?} for {key}"))),
        }
    }

    /// Canonical sorted key=value rendering.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(k);
            out.push('=');
            out.push_str(v);
            out.push('\n');
        }
        out
    }

    pub fn hash(&self) -> String {
        format!("{:016x}", fnv1a64(self.echo().as_bytes()))
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let default = EncoderConfig::default();
        let cfg = EncoderConfig {
            vocab_size: self.parse_typed("vocab_size", default.vocab_size)?,
            d_model: self.parse_typed("d_model", default.d_model)?,
            n_layers: self.parse_typed("n_layers", default.n_layers)?,
            n_heads: self.parse_typed("n_heads", default.n_heads)?,
            max_len: self.parse_typed("max_len", default.max_len)?,
            mask: match self.get("mask").unwrap_or("causal") {
                "causal" => MaskMode::Causal,
                "bidirectional" => MaskMode::Bidirectional,
                other => return Err(Error::Config(format!("unknown mask {other:?}"))),
            },
            pooling: match self.get("pooling").unwrap_or("eos_token") {
                "eos_token" => Pooling::EosToken,
                "mean" => Pooling::Mean,
                other => return Err(Error::Config(format!("unknown pooling {other:?}"))),
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        let default = TrainConfig::default();
        Ok(TrainConfig {
            tau: self.parse_typed("tau", default.tau)?,
            xi: self.parse_typed("xi", default.xi)?,
            similarity: match self.get("similarity").unwrap_or("cosine") {
                "cosine" => Similarity::Cosine,
                "mse" => Similarity::Mse,
                "mae" => Similarity::Mae,
                other => return Err(Error::Config(format!("unknown similarity {other:?}"))),
            },
            lr: self.parse_typed("lr", default.lr)?,
            steps: self.parse_typed("steps", default.steps)?,
            batch_size: self.parse_typed("batch_size", default.batch_size)?,
            poison_fraction: self.parse_typed("poison_fraction", default.poison_fraction)?,
            seed,
        })
    }

    fn insertion(&self) -> Result<Insertion> {
        match self.get("insertion").unwrap_or("random_interior") {
            "after_bos" => Ok(Insertion::AfterBos),
            "random_interior" => Ok(Insertion::RandomInterior),
            other => Err(Error::Config(format!("unknown insertion {other:?}"))),
        }
    }

    /// Trigger from `trigger` (text), `trigger_ids` (comma-separated), or
    /// `trigger_len` (random ids drawn from `seed`).
    pub fn trigger(&self, seed: u64) -> Result<TriggerSpec> {
        let insertion = self.insertion()?;
        if let Some(text) = self.get("trigger") {
            return TriggerSpec::from_text(text, insertion);
        }
        if let Some(ids) = self.get("trigger_ids") {
            let parsed: std::result::Result<Vec<u32>, _> =
                ids.split(',').map(|s| s.trim().parse()).collect();
            return TriggerSpec::new(
                parsed.map_err(|_| Error::Config(format!("bad trigger_ids {ids:?}")))?,
                insertion,
            );
        }
        let len = self.parse_typed("trigger_len", 3usize)?;
        let mut rng = StdRng::seed_from_u64(seed);
        TriggerSpec::random(len, insertion, &mut rng)
    }

    /// Target from `target_text`, or a seeded random unit feature when
    /// `target_kind=raw_feature` (the default).
    pub fn target(&self, d_model: usize, seed: u64) -> Result<TargetSpec> {
        if let Some(text) = self.get("target_text") {
            return Ok(TargetSpec::TextPrompt(text.to_string()));
        }
        match self.get("target_kind").unwrap_or("raw_feature") {
            "raw_feature" | "random" => {
                let mut rng = StdRng::seed_from_u64(seed ^ 0x7a96);
                Ok(crate::attack::random_unit_target(d_model, &mut rng))
            }
            other => Err(Error::Config(format!("unknown target_kind {other:?}"))),
        }
    }

    pub fn inversion_config(&self, seed: u64) -> Result<InversionConfig> {
        let default = InversionConfig::default();
        Ok(InversionConfig {
            lambda: self.parse_typed("lambda", default.lambda)?,
            gamma: self.parse_typed("gamma", default.gamma)?,
            lr: self.parse_typed("inv_lr", default.lr)?,
            batch_size: self.parse_typed("inv_batch", default.batch_size)?,
            epochs: self.parse_typed("epochs", default.epochs)?,
            check_cadence: self.parse_typed("check_cadence", default.check_cadence)?,
            seed,
        })
    }

    pub fn shallow_sizes(&self) -> Result<(usize, usize)> {
        Ok((self.parse_typed("m_train", 200usize)?, self.parse_typed("m_test", 50usize)?))
    }

    pub fn thresholds(&self) -> Result<DetectionThresholds> {
        let default = DetectionThresholds::default();
        Ok(DetectionThresholds {
            assim_cut: self.parse_typed("assim_cut", default.assim_cut)?,
            dev_cut: self.parse_typed("dev_cut", default.dev_cut)?,
            rho1: self.parse_typed("rho1", default.rho1)?,
            rho2: self.parse_typed("rho2", default.rho2)?,
            rho3: self.parse_typed("rho3", default.rho3)?,
        })
    }

    pub fn landscape_config(&self) -> Result<LandscapeConfig> {
        let default = LandscapeConfig::default();
        Ok(LandscapeConfig {
            sigma: self.parse_typed("sigma", default.sigma)?,
            grid_size: self.parse_typed("grid_size", default.grid_size)?,
            probe_batch: self.parse_typed("probe_batch", default.probe_batch)?,
        })
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
