//! Flat `key = value` config files mirroring [`TrainConfig`] field paths.
//!
//! ```text
//! # comment
//! method = ours
//! weights.lambda1 = 0.01
//! data.num_images = 200
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::trainer::{Method, TrainConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected 'key = value', got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key '{key}' given twice (first on line {first})")]
    Duplicate { line: usize, key: String, first: usize },
    #[error("line {line}: bad value for '{key}': {detail}")]
    Value { line: usize, key: String, detail: String },
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

/// Every recognised key, in dump order.
pub const KEYS: &[&str] = &[
    "method",
    "epochs",
    "labeled_batch",
    "unlabeled_batch",
    "lr",
    "momentum",
    "num_labeled",
    "seed",
    "val_images",
    "test_images",
    "weights.lambda1",
    "weights.lambda2",
    "weights.ramp_fraction",
    "weights.baseline_weight",
    "weights.pseudo_label_threshold",
    "weights.ema_decay",
    "weights.mi_includes_labeled",
    "net.base_channels",
    "net.num_classes",
    "net.prototypes_per_class",
    "data.image_size",
    "data.num_images",
    "data.num_classes",
    "data.modes_per_class",
    "data.noise_sigma",
    "data.seed",
];

/// One `key = value` entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits text into entries, skipping blank lines and `#` comments.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .filter(|(k, v)| !k.is_empty() && !v.is_empty())
            .ok_or_else(|| ConfigError::Syntax {
                line,
                text: raw.to_string(),
            })?;
        if !KEYS.contains(&key) {
            return Err(ConfigError::UnknownKey {
                line,
                key: key.to_string(),
            });
        }
        if let Some(&first) = seen.get(key) {
            return Err(ConfigError::Duplicate {
                line,
                key: key.to_string(),
                first,
            });
        }
        seen.insert(key.to_string(), line);
        out.push(Entry {
            line,
            key: key.to_string(),
            value: value.to_string(),
        });
    }
    Ok(out)
}

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("{value:?}: {e}"))
}

/// Sets one field of `config` from its textual value.
pub fn apply(config: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let c = config;
    match key {
        "method" => c.method = value.parse::<Method>().map_err(|e| e.to_string())?,
        "epochs" => c.epochs = parse(value)?,
        "labeled_batch" => c.labeled_batch = parse(value)?,
        "unlabeled_batch" => c.unlabeled_batch = parse(value)?,
        "lr" => c.lr = parse(value)?,
        "momentum" => c.momentum = parse(value)?,
        "num_labeled" => c.num_labeled = parse(value)?,
        "seed" => c.seed = parse(value)?,
        "val_images" => c.val_images = parse(value)?,
        "test_images" => c.test_images = parse(value)?,
        "weights.lambda1" => c.weights.lambda1 = parse(value)?,
        "weights.lambda2" => c.weights.lambda2 = parse(value)?,
        "weights.ramp_fraction" => c.weights.ramp_fraction = parse(value)?,
        "weights.baseline_weight" => c.weights.baseline_weight = parse(value)?,
        "weights.pseudo_label_threshold" => c.weights.pseudo_label_threshold = parse(value)?,
        "weights.ema_decay" => c.weights.ema_decay = parse(value)?,
        "weights.mi_includes_labeled" => c.weights.mi_includes_labeled = parse(value)?,
        "net.base_channels" => c.net.base_channels = parse(value)?,
        "net.num_classes" => c.net.num_classes = parse(value)?,
        "net.prototypes_per_class" => c.net.prototypes_per_class = parse(value)?,
        "data.image_size" => c.data.image_size = parse(value)?,
        "data.num_images" => c.data.num_images = parse(value)?,
        "data.num_classes" => c.data.num_classes = parse(value)?,
        "data.modes_per_class" => c.data.modes_per_class = parse(value)?,
        "data.noise_sigma" => c.data.noise_sigma = parse(value)?,
        "data.seed" => c.data.seed = parse(value)?,
        other => return Err(format!("unknown key '{other}'")),
    }
    Ok(())
}

/// Applies every entry of `text` on top of `base`.
pub fn parse_config(text: &str, base: TrainConfig) -> Result<TrainConfig> {
    let mut config = base;
    for e in parse_entries(text)? {
        apply(&mut config, &e.key, &e.value).map_err(|detail| ConfigError::Value {
            line: e.line,
            key: e.key.clone(),
            detail,
        })?;
    }
    Ok(config)
}

/// Full dump of every key. Floats use the shortest representation that
/// parses back to the same value, so `parse_config(dump_config(c)) == c`.
pub fn dump_config(c: &TrainConfig) -> String {
    let w = &c.weights;
    let values: [String; 26] = [
        c.method.to_string(),
        c.epochs.to_string(),
        c.labeled_batch.to_string(),
        c.unlabeled_batch.to_string(),
        c.lr.to_string(),
        c.momentum.to_string(),
        c.num_labeled.to_string(),
        c.seed.to_string(),
        c.val_images.to_string(),
        c.test_images.to_string(),
        w.lambda1.to_string(),
        w.lambda2.to_string(),
        w.ramp_fraction.to_string(),
        w.baseline_weight.to_string(),
        w.pseudo_label_threshold.to_string(),
        w.ema_decay.to_string(),
        w.mi_includes_labeled.to_string(),
        c.net.base_channels.to_string(),
        c.net.num_classes.to_string(),
        c.net.prototypes_per_class.to_string(),
        c.data.image_size.to_string(),
        c.data.num_images.to_string(),
        c.data.num_classes.to_string(),
        c.data.modes_per_class.to_string(),
        c.data.noise_sigma.to_string(),
        c.data.seed.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in KEYS.iter().zip(values) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dump_round_trips() {
        let mut c = TrainConfig {
            method: Method::MtOurs,
            lr: 0.1 + 0.2,
            seed: u64::MAX,
            ..TrainConfig::default()
        };
        c.weights.lambda1 = 1e-7;
        c.data.noise_sigma = 0.123456789012345;
        let text = dump_config(&c);
        assert_eq!(parse_config(&text, TrainConfig::default()).unwrap(), c);
        assert_eq!(text.lines().count(), KEYS.len());
    }

    #[test]
    fn comments_and_blanks() {
        let c = parse_config("# header\n\nepochs = 7  # trailing\n  lr=0.5\n", TrainConfig::default()).unwrap();
        assert_eq!((c.epochs, c.lr), (7, 0.5));
    }

    #[test]
    fn errors_name_line_and_key() {
        let base = TrainConfig::default;
        assert_eq!(
            parse_config("epochs = 3\nbogus = 1\n", base()).unwrap_err(),
            ConfigError::UnknownKey {
                line: 2,
                key: "bogus".into()
            }
        );
        let e = parse_config("\nweights.lambda1 = abc\n", base()).unwrap_err();
        assert!(matches!(&e, ConfigError::Value { line: 2, key, .. } if key == "weights.lambda1"));
        assert!(e.to_string().contains("line 2") && e.to_string().contains("weights.lambda1"));
        assert!(matches!(
            parse_config("epochs 3\n", base()),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            parse_config("seed = 1\nseed = 2\n", base()),
            Err(ConfigError::Duplicate { line: 2, first: 1, .. })
        ));
        assert!(matches!(
            parse_config("method = ourz\n", base()),
            Err(ConfigError::Value { line: 1, .. })
        ));
    }
}
