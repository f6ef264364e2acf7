//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! skipped; unknown keys are an error.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use posesynth::harness::ExperimentConfig;

use crate::CliError;

pub const KEYS: &[&str] = &[
    "seed",
    "profile",
    "policy",
    "arch",
    "epochs",
    "batch_size",
    "lr",
    "decay_every",
    "embed_dim",
    "pos_dim",
    "layers",
    "heads",
    "dropout",
    "translation_scale",
    "beta",
    "gamma",
    "fill_holes",
    "sigma_yaw_deg",
    "sigma_pitch_deg",
    "sigma_roll_deg",
];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(CliError::User(format!("config line {}: expected key = value", n + 1)));
            };
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(CliError::User(format!("config line {}: unknown key {k:?}", n + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::User(format!("--config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.values
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::User(format!("config key {key}: invalid value {v:?}: {e}")))
            })
            .transpose()
    }

    /// Flag value if given, else the config value.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Experiment settings for the configured profile with every override applied.
    pub fn experiment(&self, seed: u64, epochs: Option<usize>) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match self.get::<String>("profile")?.as_deref() {
            None | Some("outdoor") => ExperimentConfig::outdoor_desk(),
            Some("indoor") => ExperimentConfig::indoor_desk(),
            Some(other) => return Err(CliError::User(format!("config key profile: unknown profile {other:?}"))),
        }
        .with_seed(seed);
        if let Some(e) = self.pick(epochs, "epochs")? {
            cfg.schedule = cfg.schedule.rescaled(e);
        }
        macro_rules! set {
            ($key:literal, $field:expr) => {
                if let Some(v) = self.get($key)? {
                    $field = v;
                }
            };
        }
        set!("batch_size", cfg.schedule.batch_size);
        set!("lr", cfg.schedule.lr);
        set!("decay_every", cfg.schedule.decay_every);
        set!("embed_dim", cfg.regressor.embed_dim);
        set!("pos_dim", cfg.regressor.pos_dim);
        set!("layers", cfg.regressor.layers);
        set!("heads", cfg.regressor.heads);
        set!("dropout", cfg.regressor.dropout);
        set!("translation_scale", cfg.regressor.translation_scale);
        set!("beta", cfg.loss.beta);
        set!("gamma", cfg.loss.gamma);
        set!("fill_holes", cfg.synth.fill_holes);
        set!("sigma_yaw_deg", cfg.perturb.sigma_yaw_deg);
        set!("sigma_pitch_deg", cfg.perturb.sigma_pitch_deg);
        set!("sigma_roll_deg", cfg.perturb.sigma_roll_deg);
        if let Some(a) = self.get("arch")? {
            cfg.regressor.arch = a;
        }
        cfg.regressor.validate().map_err(|e| CliError::User(e.to_string()))?;
        cfg.schedule.validate().map_err(|e| CliError::User(e.to_string()))?;
        cfg.perturb.validate().map_err(|e| CliError::User(e.to_string()))?;
        Ok(cfg)
    }
}
