//! Flat `key = value` run configuration with documented defaults.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use omnidistill::buffer::ExpertConfig;
use omnidistill::datagen::GeneratorConfig;
use omnidistill::distill::{DistillConfig, Method};
use omnidistill::eval::EvalConfig;
use omnidistill::objectives::LossConfig;
use omnidistill::theory::DeskConfig;
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "OMNIDISTILL_SEED";

/// Every accepted key with its default, in echo order.
pub const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "0"),
    // generator
    ("modalities", "video,text,audio"),
    ("d_in", "48,32,40"),
    ("latent_dim", "12"),
    ("num_classes", "20"),
    ("within_class_spread", "0.6"),
    ("view_distortion", "0.8"),
    ("modality_noise", "0.5,0.6,0.7"),
    ("n_train", "2000"),
    ("n_test", "500"),
    // heads and inner objective
    ("d", "16"),
    ("tau", "0.1"),
    ("tau_prime", "0.2"),
    ("beta", "0.5"),
    // buffer
    ("epochs", "10"),
    ("num_experts", "20"),
    ("batch_size", "128"),
    ("lr_teacher", "0.01"),
    // distillation
    ("method", "hopa"),
    ("n", "50"),
    ("iterations", "500"),
    ("syn_steps", "16"),
    ("expert_epochs", "2"),
    ("max_start_epoch", "5"),
    ("mini_batch_size", "25"),
    ("lr_data", "100"),
    ("lr_lr", "0.0001"),
    ("lr_sim", "10"),
    ("momentum", "0.5"),
    ("sim_rank", "10"),
    ("sim_alpha", "1"),
    // evaluation
    ("eval_epochs", "10"),
    ("eval_batch_size", "128"),
    ("seeds", "0,1,2"),
    ("ks", "1,5,10"),
    // verification
    ("trials", "100"),
    ("gradient_instances", "100"),
    ("spectrum_candidates", "1000"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn known_key(key: &str) -> Result<&'static str, CliError> {
    DEFAULTS
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(k, _)| *k)
        .ok_or_else(|| CliError::Config(format!("unknown key '{key}'")))
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected 'key = value', got '{line}'", no + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| CliError::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = known_key(key)?;
        if value.is_empty() {
            return Err(CliError::Config(format!("empty value for '{key}'")));
        }
        self.values.insert(key, value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override '{pair}' is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Seed precedence: flag, then environment, then whatever the config already holds.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<String>) -> Result<(), CliError> {
        if let Some(s) = flag {
            return self.set("seed", &s.to_string());
        }
        if let Some(s) = env {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}='{s}' is not an unsigned integer")))?;
            return self.set("seed", &seed.to_string());
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values[known_key(key).expect("key listed in DEFAULTS")]
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("'{key}' = '{raw}': {e}")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError>
    where
        T::Err: Display,
    {
        self.raw(key)
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("'{key}' item '{}': {e}", s.trim())))
            })
            .collect()
    }

    /// The resolved configuration as it is echoed to the run directory.
    pub fn render(&self) -> String {
        DEFAULTS
            .iter()
            .map(|(k, _)| format!("{k} = {}\n", self.values[k]))
            .collect()
    }

    /// First 12 hex digits of the SHA-256 of [`render`](Self::render).
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.render().as_bytes()))[..12].to_string()
    }

    pub fn seed(&self) -> Result<u64, CliError> {
        self.get("seed")
    }

    pub fn loss(&self) -> Result<LossConfig, CliError> {
        let l = LossConfig {
            tau: self.get("tau")?,
            tau_prime: self.get("tau_prime")?,
            beta: self.get("beta")?,
        };
        l.validate()?;
        Ok(l)
    }

    pub fn method(&self) -> Result<Method, CliError> {
        self.raw("method").parse().map_err(|e| CliError::Config(format!("{e}")))
    }

    pub fn generator(&self, n: usize) -> Result<GeneratorConfig, CliError> {
        let g = GeneratorConfig {
            n,
            modality_names: self.list("modalities")?,
            d_in: self.list("d_in")?,
            latent_dim: self.get("latent_dim")?,
            num_classes: self.get("num_classes")?,
            within_class_spread: self.get("within_class_spread")?,
            view_distortion: self.get("view_distortion")?,
            modality_noise: self.list("modality_noise")?,
            seed: self.seed()?,
        };
        g.validate()?;
        Ok(g)
    }

    /// Expert settings; the experts train with the inner objective of the configured method.
    pub fn expert(&self, names: &[String]) -> Result<ExpertConfig, CliError> {
        let e = ExpertConfig {
            d: self.get("d")?,
            epochs: self.get("epochs")?,
            batch_size: self.get("batch_size")?,
            lr_teacher: self.get("lr_teacher")?,
            loss: self.loss()?,
            objective: self.method()?.objective(names)?,
            num_experts: self.get("num_experts")?,
            seed_base: self.seed()?,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn distill(&self) -> Result<DistillConfig, CliError> {
        let d = DistillConfig {
            method: self.method()?,
            n: self.get("n")?,
            iterations: self.get("iterations")?,
            syn_steps: self.get("syn_steps")?,
            expert_epochs: self.get("expert_epochs")?,
            max_start_epoch: self.get("max_start_epoch")?,
            mini_batch_size: self.get("mini_batch_size")?,
            lr_data: self.get("lr_data")?,
            lr_lr: self.get("lr_lr")?,
            lr_sim: self.get("lr_sim")?,
            lr_teacher: self.get("lr_teacher")?,
            momentum: self.get("momentum")?,
            sim_rank: self.get("sim_rank")?,
            sim_alpha: self.get("sim_alpha")?,
            loss: self.loss()?,
            seed: self.seed()?,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn eval(&self) -> Result<EvalConfig, CliError> {
        let e = EvalConfig {
            d: self.get("d")?,
            epochs: self.get("eval_epochs")?,
            batch_size: self.get("eval_batch_size")?,
            lr_teacher: self.get("lr_teacher")?,
            loss: self.loss()?,
            ks: self.list("ks")?,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn desk(&self) -> Result<DeskConfig, CliError> {
        let d = DeskConfig {
            loss: self.loss()?,
            ..DeskConfig::default()
        };
        d.validate()?;
        Ok(d)
    }
}
