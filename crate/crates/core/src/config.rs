//! Run configuration: presets, JSON files layered over a preset, and
//! validation.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{InferConfig, TrainConfig};
use crate::search::SearchConfig;
use crate::transformer::TransformerConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Easy scenes: 24×24 search patches, batch 6, 15 warm-up epochs.
    Pavia,
    /// Hard scenes: 14×14 search patches, batch 5, 30 warm-up epochs.
    Houston,
    /// Small synthetic runs that finish in minutes on one core.
    Desk,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "pavia" => Ok(Preset::Pavia),
            "houston" => Ok(Preset::Houston),
            "desk" => Ok(Preset::Desk),
            _ => Err(format!("unknown preset {s:?} (pavia, houston, desk)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train: 20,
            n_val: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Cube directory (see [`crate::data`]).
    pub cube: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub supernet: SearchConfig,
    pub train: TrainConfig,
    pub transformer: TransformerConfig,
    pub infer: InferConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        let base = RunConfig {
            preset,
            data: DataConfig::default(),
            split: SplitConfig::default(),
            supernet: SearchConfig::default(),
            train: TrainConfig::default(),
            transformer: TransformerConfig::default(),
            infer: InferConfig::default(),
        };
        match preset {
            Preset::Pavia => base,
            Preset::Houston => RunConfig {
                split: SplitConfig {
                    n_train: 30,
                    ..base.split
                },
                supernet: SearchConfig {
                    patch: 14,
                    batch: 5,
                    warmup_epochs: 30,
                    ..base.supernet
                },
                train: TrainConfig {
                    batch: 16,
                    ..base.train
                },
                ..base
            },
            Preset::Desk => RunConfig {
                supernet: SearchConfig {
                    layers: 2,
                    warmup_epochs: 5,
                    search_epochs: 10,
                    iters_per_epoch: 6,
                    patch: 16,
                    batch: 4,
                    ..base.supernet
                },
                train: TrainConfig {
                    patch: 16,
                    batch: 4,
                    iters: 2000,
                    ..base.train
                },
                infer: InferConfig {
                    window: 16,
                    ..base.infer
                },
                ..base
            },
        }
    }

    /// Reads a JSON file whose fields override the preset it names
    /// (`"preset"`, default `pavia`).
    pub fn from_json(path: &Path, text: &str) -> Result<RunConfig> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_value(value)
    }

    /// Layers a partial configuration over the preset it names.
    pub fn from_value(value: serde_json::Value) -> Result<RunConfig> {
        if !value.is_object() {
            return Err(Error::config("(root)", "configuration must be a JSON object"));
        }
        let preset = match value.get("preset") {
            None => Preset::Pavia,
            Some(p) => serde_json::from_value(p.clone()).map_err(|_| Error::config("preset", format!("unknown preset {p}")))?,
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        merge(&mut merged, value);
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::config("(file)", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(path, &text)
    }

    /// Sets every seed in the configuration.
    pub fn set_seed(&mut self, seed: u64) {
        self.split.seed = seed;
        self.supernet.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.train.validate()?;
        if self.infer.window == 0 || self.infer.batch == 0 {
            return Err(Error::config("infer.window", "window and batch must be positive"));
        }
        let t = &self.transformer;
        if t.blocks > 0 {
            let channels = self.supernet.nodes * self.supernet.width;
            if t.heads == 0 || channels % t.heads != 0 {
                return Err(Error::config(
                    "transformer.heads",
                    format!("{channels} feature channels are not divisible by {} heads", t.heads),
                ));
            }
            if t.mlp_ratio == 0 {
                return Err(Error::config("transformer.mlp_ratio", "must be positive"));
            }
            if self.infer.window != self.train.patch {
                return Err(Error::config(
                    "infer.window",
                    format!(
                        "{} must equal train.patch ({}) because attention runs on a fixed token grid",
                        self.infer.window, self.train.patch
                    ),
                ));
            }
        }
        if self.split.n_train == 0 || self.split.n_val == 0 {
            return Err(Error::config("split.n_train", "train and val counts must be positive"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}

/// Sets `value` at a dotted path such as `train.iters`, creating objects
/// along the way.
pub fn set_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut parts = path.split('.').peekable();
    let mut at = root;
    while let Some(key) = parts.next() {
        if key.is_empty() {
            return Err(Error::config(path, "empty path segment"));
        }
        let obj = at
            .as_object_mut()
            .ok_or_else(|| Error::config(path, format!("{key:?} is below a non-object value")))?;
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        at = obj.entry(key.to_string()).or_insert_with(|| serde_json::json!({}));
    }
    Ok(())
}

fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_carry_their_search_settings() {
        let p = RunConfig::preset(Preset::Pavia);
        assert_eq!((p.supernet.patch, p.supernet.batch, p.supernet.warmup_epochs), (24, 6, 15));
        assert_eq!((p.train.patch, p.train.batch), (32, 12));
        let h = RunConfig::preset(Preset::Houston);
        assert_eq!((h.supernet.patch, h.supernet.batch, h.supernet.warmup_epochs), (14, 5, 30));
        assert_eq!(h.train.batch, 16);
        assert_eq!((h.split.n_train, h.split.n_val), (30, 10));
        for preset in [Preset::Pavia, Preset::Houston, Preset::Desk] {
            RunConfig::preset(preset).validate().unwrap();
        }
    }

    #[test]
    fn optimizer_defaults() {
        let c = RunConfig::preset(Preset::Pavia);
        let s = c.supernet.sgd;
        assert_eq!((s.lr_max, s.lr_min, s.momentum, s.weight_decay), (0.025, 0.001, 0.9, 0.0003));
        assert_eq!((c.supernet.adam.lr, c.supernet.adam.weight_decay), (0.001, 0.001));
        assert_eq!((c.train.init_lr, c.train.power, c.train.val_iters), (0.1, 0.9, 100));
    }

    #[test]
    fn file_overrides_its_preset() {
        let c = RunConfig::from_json(Path::new("c.json"), r#"{"preset": "desk", "train": {"iters": 50}}"#).unwrap();
        assert_eq!(c.train.iters, 50);
        assert_eq!(c.train.patch, 16);
        assert_eq!(c.supernet.layers, 2);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(RunConfig::from_json(Path::new("c.json"), r#"{"train": {"itres": 5}}"#).is_err());
        let e = RunConfig::from_json(Path::new("c.json"), r#"{"infer": {"window": 20}}"#).unwrap_err();
        assert!(e.is_usage());
        assert!(e.to_string().contains("infer.window"));
    }

    #[test]
    fn dotted_overrides() {
        let mut v = serde_json::json!({"preset": "desk"});
        set_path(&mut v, "train.iters", serde_json::json!(7)).unwrap();
        set_path(&mut v, "transformer.blocks", serde_json::json!(0)).unwrap();
        let c = RunConfig::from_value(v).unwrap();
        assert_eq!((c.train.iters, c.transformer.blocks), (7, 0));
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::preset(Preset::Desk);
        assert_eq!(RunConfig::from_json(Path::new("c.json"), &c.to_json()).unwrap(), c);
    }
}
