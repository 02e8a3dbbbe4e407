//! Run configuration: built-in defaults, then the JSON file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tempco::datapipe::{SynthConfig, STATIC_FRAME_THRESHOLD};
use tempco::evaluator::Variant;
use tempco::netarch::ArchConfig;
use tempco::trainer::{Task, TrainConfig};
use tempco::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub videos: usize,
    pub n_frames: usize,
    pub n_phases: usize,
    pub height: usize,
    pub width: usize,
    pub ambiguity: f64,
}

impl SynthSection {
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n_frames: self.n_frames,
            n_phases: self.n_phases,
            height: self.height,
            width: self.width,
            ambiguity: self.ambiguity,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        let c = SynthConfig::default();
        SynthSection {
            videos: 20,
            n_frames: c.n_frames,
            n_phases: c.n_phases,
            height: c.height,
            width: c.width,
            ambiguity: c.ambiguity,
        }
    }
}

/// Everything a command needs. `train.seed` is the root seed of every run,
/// including dataset synthesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub synth: SynthSection,
    pub net: Variant,
    pub pretrained: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    /// Pretraining drops frames closer than this to the last kept frame.
    pub static_threshold: f64,
    /// Pretraining writes a checkpoint every this many epochs.
    pub checkpoint_every: usize,
}

impl RunConfig {
    pub fn defaults(task: Task) -> Self {
        RunConfig {
            data: None,
            out: None,
            arch: ArchConfig::default(),
            train: TrainConfig::for_task(task),
            synth: SynthSection::default(),
            net: Variant::TempCoNet,
            pretrained: None,
            resume: None,
            static_threshold: STATIC_FRAME_THRESHOLD,
            checkpoint_every: 10,
        }
    }

    /// Defaults for `task` overlaid with the keys present in `file`.
    pub fn load(task: Task, file: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(Self::defaults(task)).expect("config serializes");
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
            let overlay: Value = serde_json::from_str(&text)
                .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
            if !overlay.is_object() {
                return Err(Error::InvalidConfig(format!("{}: expected a JSON object", path.display())));
            }
            merge(&mut value, overlay);
        }
        let label = file.map_or_else(|| "defaults".to_string(), |p| p.display().to_string());
        serde_json::from_value(value).map_err(|e| Error::InvalidConfig(format!("{label}: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.arch.resolve()?;
        if self.checkpoint_every == 0 {
            return Err(Error::InvalidConfig("checkpoint_every must be at least 1".into()));
        }
        if !(self.static_threshold >= 0.0) {
            return Err(Error::InvalidConfig(format!("static_threshold {} must be >= 0", self.static_threshold)));
        }
        Ok(())
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| Error::InvalidConfig("no output directory (--out)".into()))
    }

    pub fn data_path(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| Error::InvalidConfig("no dataset (--data)".into()))
    }

    /// Writes the resolved configuration into the output directory.
    pub fn write_snapshot(&self) -> Result<PathBuf> {
        let dir = self.out_dir()?;
        fs::create_dir_all(dir)?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, serde_json::to_string_pretty(self).expect("config serializes") + "\n")?;
        Ok(path)
    }
}

/// Recursive object merge; non-object values in `overlay` replace `base`.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
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
