//! Run configuration: a JSON file merged with command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gdnet_core::imaging::{Attribute, DegradationMode};
use gdnet_core::model::{GDNetConfig, Preset, StageMode};
use gdnet_core::train::{StageId, TrainConfig};
use serde::{Deserialize, Serialize};

/// Every key any command accepts. Unset keys fall back to command defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<DegradationMode>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    /// `1`, `2nc`, `2li`, `2fo`, `3` or `all`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub patch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_lr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub halve_every: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage3_train_head: Option<bool>,
    /// Inference guidance: `full`, `stage1` or an attribute branch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub guidance: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sr: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_log: Option<PathBuf>,
}

/// Stages selected by the `stage` key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageSelection {
    One(StageId),
    All,
}

impl StageSelection {
    pub fn stages(self) -> Vec<StageId> {
        match self {
            StageSelection::One(s) => vec![s],
            StageSelection::All => StageId::SCHEDULE.to_vec(),
        }
    }
}

macro_rules! overlay {
    ($dst:expr, $src:expr, $($field:ident),+) => {
        $( if $src.$field.is_some() { $dst.$field = $src.$field.clone(); } )+
    };
}

impl RunConfig {
    /// Parse JSON text. Unknown keys and type mismatches are reported with
    /// the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).context("config is not valid JSON")?;
        let map = value.as_object().ok_or_else(|| anyhow!("config must be a JSON object"))?;
        for (key, v) in map {
            let single = serde_json::Value::Object([(key.clone(), v.clone())].into_iter().collect());
            serde_json::from_value::<RunConfig>(single).map_err(|e| anyhow!("config key {key:?}: {e}"))?;
        }
        Ok(serde_json::from_value(value)?)
    }

    /// Load a config file; relative paths in it resolve against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg = Self::from_json(&text).with_context(|| format!("in config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.manifest,
            &mut cfg.checkpoint,
            &mut cfg.out,
            &mut cfg.sr,
            &mut cfg.report,
            &mut cfg.loss_log,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Values set in `flags` win.
    pub fn merged(mut self, flags: &RunConfig) -> Self {
        overlay!(
            self, flags, scale, mode, seed, preset, stage, steps, batch_size, patch, base_lr, halve_every,
            stage3_train_head, guidance, n, size, manifest, checkpoint, out, sr, report, loss_log
        );
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.scale {
            if s != 4 && s != 8 {
                bail!("config key \"scale\": {s} is not one of 4, 8");
            }
        }
        if self.stage.is_some() {
            self.stage_selection()?;
        }
        if self.guidance.is_some() {
            self.stage_mode()?;
        }
        if let Some(lr) = self.base_lr {
            if !(lr > 0.0) {
                bail!("config key \"base_lr\": {lr} must be positive");
            }
        }
        for (key, v) in [("steps", self.steps), ("batch_size", self.batch_size), ("patch", self.patch)] {
            if v == Some(0) && key != "steps" {
                bail!("config key {key:?} must be positive");
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> usize {
        self.scale.unwrap_or(4)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn preset(&self) -> Preset {
        self.preset.unwrap_or(Preset::Tiny)
    }

    pub fn model(&self) -> GDNetConfig {
        GDNetConfig::preset(self.preset(), self.scale())
    }

    pub fn train(&self) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            seed: self.seed(),
            steps: self.steps.unwrap_or(d.steps),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            patch: self.patch.unwrap_or(d.patch),
            base_lr: self.base_lr.unwrap_or(d.base_lr),
            halve_every: self.halve_every.unwrap_or(d.halve_every),
            stage3_train_head: self.stage3_train_head.unwrap_or(d.stage3_train_head),
        }
    }

    pub fn stage_selection(&self) -> Result<StageSelection> {
        match self.stage.as_deref() {
            None | Some("all") => Ok(StageSelection::All),
            Some(s) => s
                .parse()
                .map(StageSelection::One)
                .map_err(|e| anyhow!("config key \"stage\": {e}")),
        }
    }

    pub fn stage_mode(&self) -> Result<StageMode> {
        match self.guidance.as_deref() {
            None | Some("full") => Ok(StageMode::Full),
            Some("stage1") => Ok(StageMode::Stage1),
            Some(a) => a
                .parse::<Attribute>()
                .map(StageMode::Branch)
                .map_err(|_| anyhow!("config key \"guidance\": {a:?} is not full, stage1, normal, fog or lowlight")),
        }
    }

    /// A required path, with an error naming the key when unset.
    pub fn require<'a>(&self, key: &str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value
            .as_deref()
            .ok_or_else(|| anyhow!("missing required key {key:?} (set it in the config or with --{key})"))
    }
}
