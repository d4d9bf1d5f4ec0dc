//! Layered run configuration: built-in defaults, then the `--config` file,
//! then command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::nets::{Capacity, ModelConfig};
use crate::train::TrainConfig;

/// Named model configurations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 16×16 networks for smoke tests.
    Tiny,
    /// Narrow 64×64 networks that train on a CPU.
    Toy,
    /// Full-width 64×64 networks.
    Desk,
    /// Full-scale 256×256 models with the three inference capacities.
    Small,
    Medium,
    Large,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Tiny => ModelConfig::tiny(),
            Preset::Toy => ModelConfig::toy(),
            Preset::Desk => ModelConfig::desk(),
            Preset::Small => ModelConfig::paper(Capacity::Small),
            Preset::Medium => ModelConfig::paper(Capacity::Medium),
            Preset::Large => ModelConfig::paper(Capacity::Large),
        }
    }
}

/// Scoring settings of the `eval` command.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Frames between targets; unset means one second of video.
    pub stride: Option<usize>,
}

/// Fully resolved configuration of one command, stored with its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: PathBuf,
    pub preset: Preset,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub eval: EvalSettings,
    /// Command-specific flags as given.
    #[serde(default)]
    pub args: Value,
}

/// Values given on the command line; `None` leaves lower layers in place.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub preset: Option<Preset>,
    /// Partial `{"train": {...}, "synth": {...}, ...}` tree.
    pub tree: Value,
}

fn merge(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        // an absent layer leaves the lower ones in place
        (_, Value::Null) => {}
        (b, t) => *b = t.clone(),
    }
}

fn read_file(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let table: toml::Table = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1)).unwrap_or(0);
        Error::Config(format!("{}:{line}: {}", path.display(), e.message()))
    })?;
    Ok(serde_json::to_value(table)?)
}

impl RunConfig {
    pub fn resolve(command: &str, file: Option<&Path>, flags: &Overrides, args: Value) -> Result<Self> {
        let file = match file {
            Some(p) => read_file(p)?,
            None => json!({}),
        };
        let preset = match (flags.preset, file.get("preset")) {
            (Some(p), _) => p,
            (None, Some(v)) => serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            (None, None) => Preset::Toy,
        };
        let mut tree = json!({
            "command": command,
            "seed": 0,
            "out": "out",
            "preset": preset,
            "model": preset.model(),
            "train": TrainConfig::default(),
            "synth": SynthConfig::default(),
            "eval": EvalSettings::default(),
        });
        merge(&mut tree, &file);
        merge(&mut tree, &flags.tree);
        if let Some(s) = flags.seed {
            tree["seed"] = json!(s);
        }
        if let Some(o) = &flags.out {
            tree["out"] = json!(o);
        }
        tree["command"] = json!(command);
        tree["preset"] = json!(preset);
        tree["args"] = args;
        // the top-level seed drives every generator of the run
        tree["train"]["seed"] = tree["seed"].clone();
        let cfg: RunConfig = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("run configuration serializes")
    }

    /// Write `run.json` into the output directory.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("run.json");
        let text = serde_json::to_string_pretty(self)? + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layers_apply_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(
            &p,
            "seed = 5\npreset = \"tiny\"\n[train]\nlr = 0.001\niterations = 7\n[model]\nmlp_width = 24\n",
        )
        .unwrap();
        let base = RunConfig::resolve("train", None, &Overrides::default(), Value::Null).unwrap();
        assert_eq!(base.seed, 0);
        assert_eq!(base.model, ModelConfig::toy());
        assert_eq!(base.train, TrainConfig::default());

        let from_file = RunConfig::resolve("train", Some(&p), &Overrides::default(), Value::Null).unwrap();
        assert_eq!(from_file.seed, 5);
        assert_eq!(from_file.train.seed, 5);
        assert_eq!(from_file.preset, Preset::Tiny);
        assert_eq!(from_file.model.mlp_width, 24);
        assert_eq!(from_file.model.image_size, 16);
        assert_eq!(from_file.train.lr, 0.001);

        let flags = Overrides {
            seed: Some(9),
            preset: Some(Preset::Toy),
            tree: json!({"train": {"iterations": 3}}),
            ..Overrides::default()
        };
        let top = RunConfig::resolve("train", Some(&p), &flags, Value::Null).unwrap();
        assert_eq!((top.seed, top.train.seed, top.train.iterations), (9, 9, 3));
        assert_eq!(top.train.lr, 0.001);
        assert_eq!(top.model.image_size, 64);

        let back: RunConfig = serde_json::from_value(top.to_json()).unwrap();
        assert_eq!(back, top);
    }

    #[test]
    fn bad_files_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        for text in ["[train]\nlearning_rate = 1.0\n", "seed = \n", "[train]\nlr = -1.0\n", "preset = \"huge\"\n"] {
            std::fs::write(&p, text).unwrap();
            let e = RunConfig::resolve("train", Some(&p), &Overrides::default(), Value::Null).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{text}: {e}");
        }
        let missing = RunConfig::resolve("train", Some(&dir.path().join("no.toml")), &Overrides::default(), Value::Null);
        assert_eq!(missing.unwrap_err().exit_code(), 4);
    }
}
