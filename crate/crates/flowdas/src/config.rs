//! Experiment files: a TOML table layered over a named preset.
//!
//! ```toml
//! preset = "doublewell-desk"
//! seed = 3
//! [infer]
//! zeta = 0.5
//! ```
//!
//! Keys absent from the file keep the preset's values; nested tables merge
//! key by key. Unknown keys are rejected.

use std::path::Path;

use flowdas_core::config::ExperimentConfig;
use toml::{Table, Value};

use crate::error::{CliError, Result};

const DEFAULT_PRESET: &str = "lorenz-desk";

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let user: Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    let name = match user.get("preset") {
        None => DEFAULT_PRESET,
        Some(Value::String(s)) => s.as_str(),
        Some(_) => return Err(CliError::Config("`preset` must be a string".into())),
    };
    let base = ExperimentConfig::preset(name)?;
    let mut merged = Value::try_from(&base).map_err(|e| CliError::Config(e.to_string()))?;
    merge(&mut merged, Value::Table(user));
    let cfg: ExperimentConfig = merged
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Command-line overrides, applied after loading.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub zeta: Option<f64>,
    pub mc_samples: Option<usize>,
}

pub fn apply(mut cfg: ExperimentConfig, o: Overrides) -> Result<ExperimentConfig> {
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(z) = o.zeta {
        cfg.infer.zeta = z;
    }
    if let Some(j) = o.mc_samples {
        cfg.infer.mc_samples = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowdas_core::config::{ObservationKind, SystemKind};

    #[test]
    fn empty_file_is_default_preset() {
        assert_eq!(parse("").unwrap(), ExperimentConfig::preset(DEFAULT_PRESET).unwrap());
    }

    #[test]
    fn nested_keys_merge_over_preset() {
        let c = parse("preset = \"doublewell-desk\"\nseed = 9\n[infer]\nzeta = 0.5\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.infer.zeta, 0.5);
        assert_eq!(c.infer.mc_samples, 17);
        assert_eq!(c.system.kind, SystemKind::DoubleWell);
        assert_eq!(c.system.observation, ObservationKind::Cube);
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for text in [
            "preset = \"nope\"",
            "[infer]\nbogus = 1",
            "[infer]\nmc_samples = 0",
            "[system\n",
            "preset = 3",
        ] {
            let err = parse(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
    }

    #[test]
    fn overrides_apply_and_validate() {
        let c = apply(
            parse("").unwrap(),
            Overrides {
                seed: Some(4),
                zeta: Some(0.0),
                mc_samples: Some(3),
            },
        )
        .unwrap();
        assert_eq!((c.seed, c.infer.zeta, c.infer.mc_samples), (4, 0.0, 3));
        assert!(apply(
            c,
            Overrides {
                mc_samples: Some(0),
                ..Default::default()
            }
        )
        .is_err());
    }
}
