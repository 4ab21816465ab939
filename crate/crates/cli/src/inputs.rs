//! Configuration and plan resolution: named presets or line-oriented
//! `key = value` files. Unknown and duplicate keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use bsr_core::policy::{BsrPlan, ResidualPlan, TrainScheme};
use bsr_core::vit::ViTConfig;

use crate::{read_text, CliError};

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
fn parse_pairs(text: &str, what: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut pairs = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!(
                "{what} line {}: expected `key = value`, got `{line}`",
                lineno + 1
            ))
        })?;
        let key = key.trim().to_string();
        if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(CliError::Validation(format!("{what}: duplicate key `{key}`")));
        }
    }
    Ok(pairs)
}

fn parse_index_list(value: &str, key: &str) -> Result<Vec<usize>, CliError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|part| {
            part.trim().parse::<usize>().map_err(|_| {
                CliError::Validation(format!("{key}: `{}` is not a block index", part.trim()))
            })
        })
        .collect()
}

fn parse_number<T: core::str::FromStr>(value: &str, key: &str) -> Result<T, CliError> {
    value
        .parse::<T>()
        .map_err(|_| CliError::Validation(format!("{key}: cannot parse `{value}`")))
}

/// Parses the plan-file dialect: `trainable = 3,7,11`, `drops = 3,6,9`,
/// `rate = 0.5`, `strict = true`. Only `trainable` is required.
pub fn parse_plan_text(text: &str) -> Result<BsrPlan, CliError> {
    let pairs = parse_pairs(text, "plan file")?;
    plan_from_pairs(&pairs, "plan file")
}

/// Builds a plan from already-split `key = value` pairs (shared with the
/// grid-file dialect of `plan-search`).
pub fn plan_from_pairs(
    pairs: &BTreeMap<String, String>,
    what: &str,
) -> Result<BsrPlan, CliError> {
    let mut trainable = None;
    let mut drops = Vec::new();
    let mut rate = 0.5;
    let mut strict = true;
    for (key, value) in pairs {
        match key.as_str() {
            "trainable" => trainable = Some(parse_index_list(value, "trainable")?),
            "drops" => drops = parse_index_list(value, "drops")?,
            "rate" => rate = parse_number::<f64>(value, "rate")?,
            "strict" => strict = parse_number::<bool>(value, "strict")?,
            other => {
                return Err(CliError::Validation(format!("{what}: unknown key `{other}`")));
            }
        }
    }
    let trainable = trainable
        .ok_or_else(|| CliError::Validation(format!("{what}: missing `trainable` key")))?;
    Ok(BsrPlan::new(&trainable, &drops, rate, strict)?)
}

/// Parses a configuration file with one `key = value` line per `ViTConfig`
/// field; all eight fields are required.
pub fn parse_config_text(text: &str) -> Result<ViTConfig, CliError> {
    let pairs = parse_pairs(text, "config file")?;
    let mut fields: BTreeMap<&str, usize> = BTreeMap::new();
    for (key, value) in &pairs {
        match key.as_str() {
            "image_size" | "patch_size" | "channels" | "embed_dim" | "heads" | "ffn_mult"
            | "depth" | "num_classes" => {
                fields.insert(key.as_str(), parse_number::<usize>(value, key)?);
            }
            other => {
                return Err(CliError::Validation(format!("config file: unknown key `{other}`")));
            }
        }
    }
    let get = |key: &str| -> Result<usize, CliError> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| CliError::Validation(format!("config file: missing `{key}`")))
    };
    let config = ViTConfig {
        image_size: get("image_size")?,
        patch_size: get("patch_size")?,
        channels: get("channels")?,
        embed_dim: get("embed_dim")?,
        heads: get("heads")?,
        ffn_mult: get("ffn_mult")?,
        depth: get("depth")?,
        num_classes: get("num_classes")?,
    };
    config.validate()?;
    Ok(config)
}

/// Resolves `--config`: the presets `deit-s`, `vit-b` and `toy`, or a path
/// to a config file.
pub fn resolve_config(spec: &str) -> Result<ViTConfig, CliError> {
    match spec {
        "deit-s" => Ok(ViTConfig::deit_small(1000)),
        "vit-b" => Ok(ViTConfig::vit_base(1000)),
        "toy" => Ok(ViTConfig::toy(4)),
        path => parse_config_text(&read_text(Path::new(path))?),
    }
}

/// The preset block positions used by `default` and `residual` plans; only
/// defined for the 12-block presets and the 4-block toy shape.
fn preset_blocks(depth: usize, what: &str) -> Result<(Vec<usize>, Vec<usize>, bool), CliError> {
    match depth {
        12 => Ok((vec![3, 7, 11], vec![3, 6, 9], true)),
        4 => Ok((vec![2, 3], vec![1], false)),
        other => Err(CliError::Validation(format!(
            "no {what} preset for a {other}-block encoder; pass a plan file"
        ))),
    }
}

/// Resolves `--plan`: the presets `default`, `full`, `head-only` and
/// `residual`, or a path to a plan file. Validates the result against the
/// configuration and returns any non-fatal warnings as strings.
pub fn resolve_scheme(
    spec: &str,
    config: &ViTConfig,
) -> Result<(TrainScheme, Vec<String>), CliError> {
    let scheme = match spec {
        "default" => {
            let (trainable, drops, strict) = preset_blocks(config.depth, "default plan")?;
            TrainScheme::Bsr(BsrPlan::new(&trainable, &drops, 0.5, strict)?)
        }
        "full" => TrainScheme::Full,
        "head-only" => TrainScheme::HeadOnly,
        "residual" => {
            let (side, _, _) = preset_blocks(config.depth, "residual plan")?;
            TrainScheme::Residual(ResidualPlan::new(&side)?)
        }
        path => TrainScheme::Bsr(parse_plan_text(&read_text(Path::new(path))?)?),
    };
    let warnings = scheme
        .validate(config.depth, config.seq_len())?
        .into_iter()
        .map(|w| w.to_string())
        .collect();
    Ok((scheme, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_file_round_trips_the_documented_dialect() {
        let plan = parse_plan_text(
            "# fine-tune the late blocks\ntrainable = 3, 7, 11\ndrops = 3,6,9\nrate = 0.5\nstrict = true\n",
        )
        .unwrap();
        assert_eq!(plan, BsrPlan::default_plan());
    }

    #[test]
    fn plan_file_defaults_drops_rate_and_strict() {
        let plan = parse_plan_text("trainable = 0,1\n").unwrap();
        assert_eq!(plan.trainable_blocks, vec![0, 1]);
        assert!(plan.drop_locations.is_empty());
        assert_eq!(plan.drop_rate, 0.5);
        assert!(plan.strict);
    }

    #[test]
    fn plan_file_rejects_unknown_and_duplicate_keys() {
        let unknown = parse_plan_text("trainable = 1\nwarmup = 5\n").unwrap_err();
        assert!(unknown.message().contains("unknown key `warmup`"));
        let duplicate = parse_plan_text("trainable = 1\ntrainable = 2\n").unwrap_err();
        assert!(duplicate.message().contains("duplicate key"));
        assert!(parse_plan_text("rate = 0.5\n").unwrap_err().message().contains("trainable"));
        assert!(parse_plan_text("trainable = x\n").is_err());
        assert!(parse_plan_text("trainable 1\n").is_err());
    }

    #[test]
    fn config_file_requires_every_field() {
        let text = "image_size = 16\npatch_size = 4\nchannels = 3\nembed_dim = 32\n\
                    heads = 2\nffn_mult = 2\ndepth = 4\nnum_classes = 4\n";
        assert_eq!(parse_config_text(text).unwrap(), ViTConfig::toy(4));
        let missing = parse_config_text("image_size = 16\n").unwrap_err();
        assert!(missing.message().contains("missing"));
        assert!(parse_config_text("lr = 0.1\n").unwrap_err().message().contains("unknown key"));
    }

    #[test]
    fn presets_resolve_to_their_configurations() {
        assert_eq!(resolve_config("deit-s").unwrap(), ViTConfig::deit_small(1000));
        assert_eq!(resolve_config("vit-b").unwrap(), ViTConfig::vit_base(1000));
        assert_eq!(resolve_config("toy").unwrap(), ViTConfig::toy(4));
        assert!(resolve_config("/no/such/file").is_err());
    }

    #[test]
    fn plan_presets_depend_on_depth() {
        let deit = ViTConfig::deit_small(1000);
        let toy = ViTConfig::toy(4);
        let (scheme, warnings) = resolve_scheme("default", &deit).unwrap();
        assert_eq!(scheme, TrainScheme::Bsr(BsrPlan::default_plan()));
        assert!(warnings.is_empty());
        let (scheme, _) = resolve_scheme("default", &toy).unwrap();
        match scheme {
            TrainScheme::Bsr(plan) => {
                assert_eq!(plan.trainable_blocks, vec![2, 3]);
                assert_eq!(plan.drop_locations, vec![1]);
            }
            other => panic!("expected a block plan, got {other:?}"),
        }
        let odd = ViTConfig { depth: 6, ..ViTConfig::toy(4) };
        assert!(resolve_scheme("default", &odd).is_err());
        assert_eq!(resolve_scheme("full", &deit).unwrap().0, TrainScheme::Full);
        assert_eq!(resolve_scheme("head-only", &deit).unwrap().0, TrainScheme::HeadOnly);
        match resolve_scheme("residual", &toy).unwrap().0 {
            TrainScheme::Residual(plan) => assert_eq!(plan.side_blocks, vec![2, 3]),
            other => panic!("expected the residual baseline, got {other:?}"),
        }
    }

    #[test]
    fn terminal_trainable_plans_warn_but_resolve() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("late.plan");
        std::fs::write(&path, "trainable = 10,11\ndrops = 3,6,9\nrate = 0.5\n").unwrap();
        let deit = ViTConfig::deit_small(1000);
        let (scheme, warnings) = resolve_scheme(path.to_str().unwrap(), &deit).unwrap();
        assert!(matches!(scheme, TrainScheme::Bsr(_)));
        assert!(!warnings.is_empty());
    }
}
