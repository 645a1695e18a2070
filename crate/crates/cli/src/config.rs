//! Layered configuration: preset, then a JSON file, then command-line flags.

use std::path::{Path, PathBuf};

use dehaze::data::{DatasetSpec, Split, SplitRule};
use dehaze::train::{DataSource, Preset, TrainConfig};
use dehaze::{Error, Result};
use serde_json::Value;

use crate::args::DataArgs;

/// Fields whose value is an externally tagged enum; a file that sets them
/// replaces the preset's value instead of merging into it.
const REPLACED_FIELDS: [&str; 4] = ["data", "val_data", "extra_data", "lr_schedule"];

/// Recursively overlays `top` onto `base`. Objects merge key by key; any
/// other value (including arrays) replaces.
pub fn deep_merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => deep_merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

pub fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Preset (or defaults) overlaid with the config file.
pub fn layered(preset: Option<Preset>, file: Option<&Path>) -> Result<TrainConfig> {
    let base = preset.map(Preset::config).unwrap_or_default();
    let Some(file) = file else {
        return Ok(base);
    };
    let mut merged = serde_json::to_value(&base)?;
    let mut overlay = read_json(file)?;
    if let (Value::Object(m), Value::Object(o)) = (&mut merged, &mut overlay) {
        for key in REPLACED_FIELDS {
            if let Some(v) = o.remove(key) {
                m.insert(key.to_string(), v);
            }
        }
    } else {
        return Err(Error::Config(format!("{}: expected a JSON object", file.display())));
    }
    deep_merge(&mut merged, overlay);
    serde_json::from_value(merged).map_err(|e| Error::Config(format!("{}: {e}", file.display())))
}

/// Directory dataset described by the `--data` family of flags. Without an
/// explicit rule, a root with a `<split>/` subdirectory uses the official
/// layout and any other root is taken whole.
pub fn dataset_from_flags(args: &DataArgs, split: Split) -> Result<Option<DatasetSpec>> {
    let Some(root) = &args.data else {
        if args.split_rule.is_some() || args.manifest.is_some() {
            return Err(Error::Config("--split-rule and --manifest need --data".into()));
        }
        return Ok(None);
    };
    let rule = match &args.split_rule {
        Some(r) => r.parse()?,
        None if root.join(split.to_string()).is_dir() => SplitRule::Official,
        None => SplitRule::All,
    };
    let mut spec = DatasetSpec::new(root.clone(), split, rule).with_suffixes(
        args.hazy_suffix.as_deref().unwrap_or(""),
        args.clean_suffix.as_deref().unwrap_or(""),
    );
    spec.manifest = args.manifest.clone();
    Ok(Some(spec))
}

/// Replaces the training source (and, for split-aware rules, the held-out
/// source) with the directory given on the command line.
pub fn apply_data_flags(cfg: &mut TrainConfig, args: &DataArgs) -> Result<()> {
    let Some(train) = dataset_from_flags(args, Split::Train)? else {
        return Ok(());
    };
    cfg.val_data = match (train.split_rule, &train.manifest) {
        (SplitRule::First20Last5, None) => Some(DataSource::Directory(DatasetSpec {
            split: Split::Test,
            ..train.clone()
        })),
        (SplitRule::Official, None) if train.root.join("val").is_dir() => Some(DataSource::Directory(DatasetSpec {
            split: Split::Val,
            ..train.clone()
        })),
        _ => None,
    };
    cfg.data = Some(DataSource::Directory(train));
    Ok(())
}

/// Directory source for supplementary data: the whole directory.
pub fn extra_source(root: PathBuf) -> DataSource {
    DataSource::Directory(DatasetSpec::new(root, Split::Train, SplitRule::All))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn merge_overlays_nested_objects() {
        let mut a = json!({"lr": 1.0, "augmentation": {"crop_size": 64, "hflip": true}, "list": [1, 2]});
        deep_merge(&mut a, json!({"augmentation": {"crop_size": 32}, "list": [3]}));
        assert_eq!(
            a,
            json!({"lr": 1.0, "augmentation": {"crop_size": 32, "hflip": true}, "list": [3]})
        );
    }

    #[test]
    fn file_overrides_preset_and_replaces_data() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"max_steps": 5, "augmentation": {"crop_size": 32},
                "data": {"directory": {"root": "x", "split": "train", "split_rule": "all"}}}"#,
        )
        .unwrap();
        let cfg = layered(Some(Preset::OverfitSanity), Some(&path)).unwrap();
        assert_eq!(cfg.max_steps, 5);
        assert_eq!(cfg.augmentation.crop_size, 32);
        assert!(cfg.augmentation.hflip);
        assert_eq!(cfg.seed, 7);
        assert!(matches!(cfg.data, Some(DataSource::Directory(_))));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"max_stpes": 5}"#).unwrap();
        assert!(matches!(layered(None, Some(&path)), Err(Error::Config(_))));
    }
}
