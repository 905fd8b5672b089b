use std::fs;

use anyhow::Result;
use serde_json::{json, Map, Value};
use spreadflow::{Error, ExperimentConfig};

use crate::RunArgs;

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, o) => *b = o,
    }
}

/// Preset, then flags, then the config file, each layer overriding the last.
pub fn resolve(args: &RunArgs) -> Result<ExperimentConfig> {
    if args.preset.is_none() && args.config.is_none() {
        return Err(Error::Config {
            field: "preset".into(),
            message: "give --preset, --config or both".into(),
        }
        .into());
    }
    let mut value = match &args.preset {
        Some(name) => serde_json::to_value(ExperimentConfig::preset(name, args.seed.unwrap_or(0))?)?,
        None => Value::Object(Map::new()),
    };
    let mut flags = Map::new();
    if let Some(s) = args.seed {
        flags.insert("seed".into(), json!(s));
        flags.insert("dataset".into(), json!({ "seed": s }));
    }
    if let Some(i) = args.iters {
        flags.insert("iterations".into(), json!(i));
    }
    if let Some(m) = args.mode {
        flags.insert("mode".into(), serde_json::to_value(m)?);
    }
    if let Some(o) = &args.out {
        flags.insert("out_dir".into(), json!(o));
    }
    merge(&mut value, Value::Object(flags));
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path)?;
        let file: Value = serde_json::from_str(&text).map_err(|e| Error::Config {
            field: "config".into(),
            message: format!("{}: {e}", path.display()),
        })?;
        merge(&mut value, file);
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config {
        field: "config".into(),
        message: e.to_string(),
    })?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(format!("runs/{}", cfg.name).into());
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_preset() {
        let args = RunArgs {
            preset: Some("toy-sin".into()),
            seed: Some(9),
            iters: Some(5),
            ..Default::default()
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!((cfg.seed, cfg.dataset.seed, cfg.iterations), (9, 9, 5));
        assert_eq!(cfg.out_dir.unwrap().to_str(), Some("runs/toy-sin"));
    }

    #[test]
    fn file_overrides_flags() {
        let dir = std::env::temp_dir().join(format!("spreadflow-cfg-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        fs::write(&path, r#"{"iterations": 7, "dataset": {"n": 50}}"#).unwrap();
        let args = RunArgs {
            preset: Some("toy-line".into()),
            config: Some(path),
            iters: Some(5),
            seed: Some(3),
            ..Default::default()
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!((cfg.iterations, cfg.dataset.n, cfg.dataset.seed), (7, 50, 3));
        fs::remove_dir_all(dir).unwrap();
    }

    #[test]
    fn missing_source_is_a_config_error() {
        let e = resolve(&RunArgs::default()).unwrap_err();
        assert!(matches!(e.downcast_ref::<Error>(), Some(Error::Config { .. })));
    }
}
