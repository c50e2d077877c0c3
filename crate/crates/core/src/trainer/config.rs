use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::manipulator::ManipulatorKind;
use crate::models::{DiscriminatorSpec, GeneratorSpec};
use crate::perturbation::PerturbationMode;

/// Hyperparameters of one adversarial training run.
///
/// Defaults follow the reference setup (batch 16, Adam 2e-4 with betas
/// 0.5/0.999, 20 epochs, α = 1) at full network width.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub alpha: f64,
    pub seed: u64,
    pub manipulator_kind: ManipulatorKind,
    pub perturbation_mode: PerturbationMode,
    pub device_hint: String,
    pub sigma: f64,
    pub trunk_width: usize,
    pub residual_blocks: usize,
    pub disc_base_width: usize,
    pub disc_min_input: usize,
    pub region_size: usize,
    /// Start the generator close to the identity map (see `Generator::calibrate_passthrough`).
    pub passthrough_init: bool,
    pub surrogate_epochs: usize,
    pub surrogate_width: usize,
    /// Weights file for the `external` manipulator kind.
    pub manipulator_weights: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 20,
            batch_size: 16,
            learning_rate: 2e-4,
            adam_betas: (0.5, 0.999),
            alpha: 1.0,
            seed: 0,
            manipulator_kind: ManipulatorKind::InpaintSurrogate,
            perturbation_mode: PerturbationMode::FixedUniversal,
            device_hint: "cpu".into(),
            sigma: 1.0,
            trunk_width: 64,
            residual_blocks: 3,
            disc_base_width: 32,
            disc_min_input: 64,
            region_size: 32,
            passthrough_init: true,
            surrogate_epochs: 10,
            surrogate_width: 16,
            manipulator_weights: None,
        }
    }
}

pub const CONFIG_KEYS: &[&str] = &[
    "epochs",
    "batch_size",
    "learning_rate",
    "adam_betas",
    "alpha",
    "seed",
    "manipulator_kind",
    "perturbation_mode",
    "device_hint",
    "sigma",
    "trunk_width",
    "residual_blocks",
    "disc_base_width",
    "disc_min_input",
    "region_size",
    "passthrough_init",
    "surrogate_epochs",
    "surrogate_width",
    "manipulator_weights",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

/// Splits `key = value` text into pairs, skipping blanks and `#` comments.
pub fn parse_kv_lines(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl TrainingConfig {
    /// Small networks for desk-scale runs on 64×64 phantoms. The discriminator
    /// is kept narrow: at base width 8 it overpowers the generator within a few
    /// hundred steps and the protected slices degrade badly.
    pub fn toy() -> Self {
        TrainingConfig {
            trunk_width: 16,
            disc_base_width: 4,
            ..TrainingConfig::default()
        }
    }

    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            trunk_width: self.trunk_width,
            residual_blocks: self.residual_blocks,
            ..GeneratorSpec::default()
        }
    }

    pub fn discriminator_spec(&self) -> DiscriminatorSpec {
        DiscriminatorSpec {
            min_input: self.disc_min_input,
            ..DiscriminatorSpec::with_base_width(self.disc_base_width)
        }
    }

    pub fn is_key(key: &str) -> bool {
        CONFIG_KEYS.contains(&key)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "adam_betas" => {
                let (a, b) = value
                    .trim_matches(|c| c == '(' || c == ')' || c == '[' || c == ']')
                    .split_once(',')
                    .ok_or_else(|| Error::Config(format!("`adam_betas`: expected `b1,b2`, got `{value}`")))?;
                self.adam_betas = (parse(key, a.trim())?, parse(key, b.trim())?);
            }
            "alpha" => self.alpha = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "manipulator_kind" => {
                self.manipulator_kind = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "perturbation_mode" => {
                self.perturbation_mode = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "device_hint" => self.device_hint = value.to_string(),
            "sigma" => self.sigma = parse(key, value)?,
            "trunk_width" => self.trunk_width = parse(key, value)?,
            "residual_blocks" => self.residual_blocks = parse(key, value)?,
            "disc_base_width" => self.disc_base_width = parse(key, value)?,
            "disc_min_input" => self.disc_min_input = parse(key, value)?,
            "region_size" => self.region_size = parse(key, value)?,
            "passthrough_init" => self.passthrough_init = parse(key, value)?,
            "surrogate_epochs" => self.surrogate_epochs = parse(key, value)?,
            "surrogate_width" => self.surrogate_width = parse(key, value)?,
            "manipulator_weights" => {
                self.manipulator_weights = (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
            }
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Parses a full `key = value` file on top of the defaults.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainingConfig::default();
        for (k, v) in parse_kv_lines(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        line("epochs", self.epochs.to_string());
        line("batch_size", self.batch_size.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("adam_betas", format!("{},{}", self.adam_betas.0, self.adam_betas.1));
        line("alpha", self.alpha.to_string());
        line("seed", self.seed.to_string());
        line("manipulator_kind", self.manipulator_kind.to_string());
        line("perturbation_mode", self.perturbation_mode.to_string());
        line("device_hint", self.device_hint.clone());
        line("sigma", self.sigma.to_string());
        line("trunk_width", self.trunk_width.to_string());
        line("residual_blocks", self.residual_blocks.to_string());
        line("disc_base_width", self.disc_base_width.to_string());
        line("disc_min_input", self.disc_min_input.to_string());
        line("region_size", self.region_size.to_string());
        line("passthrough_init", self.passthrough_init.to_string());
        line("surrogate_epochs", self.surrogate_epochs.to_string());
        line("surrogate_width", self.surrogate_width.to_string());
        line(
            "manipulator_weights",
            self.manipulator_weights
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        );
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !(b1 > 0.0 && b1 < 1.0 && b2 > 0.0 && b2 < 1.0) {
            return bad(format!("adam_betas ({b1}, {b2}) must lie in (0, 1)"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha {} must be finite and non-negative", self.alpha));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be positive", self.sigma));
        }
        if self.trunk_width < 2 || self.disc_base_width == 0 {
            return bad("network widths must be positive (trunk at least 2)".into());
        }
        if self.region_size == 0 || self.region_size % 4 != 0 {
            return bad(format!("region_size {} must be a positive multiple of 4", self.region_size));
        }
        if self.manipulator_kind == ManipulatorKind::External && self.manipulator_weights.is_none() {
            return bad("the external manipulator needs `manipulator_weights`".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reference_setup() {
        let c = TrainingConfig::default();
        assert_eq!((c.epochs, c.batch_size), (20, 16));
        assert_eq!(c.learning_rate, 0.0002);
        assert_eq!(c.adam_betas, (0.5, 0.999));
        assert_eq!(c.alpha, 1.0);
        c.validate().unwrap();
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let mut c = TrainingConfig::toy();
        c.set("alpha", "0.6").unwrap();
        c.set("adam_betas", "0.4, 0.99").unwrap();
        c.set("perturbation_mode", "resampled_per_batch").unwrap();
        assert_eq!(TrainingConfig::from_kv(&c.to_kv()).unwrap(), c);
        assert!(c.set("nonsense", "1").is_err());
        assert!(c.set("epochs", "many").is_err());
        assert!(TrainingConfig::from_kv("epochs = 0").is_err());
        assert!(TrainingConfig::from_kv("epochs 3").is_err());
        let parsed = TrainingConfig::from_kv("# comment\n\nalpha = 0.2 # trailing\n").unwrap();
        assert_eq!(parsed.alpha, 0.2);
        assert_eq!(CONFIG_KEYS.len(), c.to_kv().lines().count());
    }
}
