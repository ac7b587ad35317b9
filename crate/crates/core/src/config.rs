//! Run configuration: sectioned TOML with every key optional and
//! unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::caption::CaptionConfig;
use crate::checkpoint::write_atomic;
use crate::data::Vocab;
use crate::depth::DepthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::seg::SegConfig;
use crate::trainer::TrainConfig;

pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Root holding the `train`, `val` and `test` splits.
    pub dir: PathBuf,
    /// Training samples per task; the train split holds three times this.
    pub train_per_task: usize,
    /// Samples the probes are fitted on (val split).
    pub probe_fit: usize,
    /// Held-out samples the probes are scored on (test split).
    pub probe_eval: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("data"),
            train_per_task: 2000,
            probe_fit: 500,
            probe_eval: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub caption: CaptionConfig,
    pub depth: DepthConfig,
    pub seg: SegConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            caption: CaptionConfig::default(),
            depth: DepthConfig::default(),
            seg: SegConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            probe: ProbeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            caption: self.caption.clone(),
            depth: self.depth.clone(),
            seg: self.seg.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let words = Vocab::default().len();
        if self.caption.vocab_size < words {
            return Err(Error::config(
                "caption.vocab_size",
                format!("must cover the {words}-word vocabulary"),
            ));
        }
        let longest = 2 + 4 * crate::data::MAX_OBJECTS - 1;
        if self.caption.max_text_len < longest {
            return Err(Error::config(
                "caption.max_text_len",
                format!("captions can be {longest} tokens long"),
            ));
        }
        self.train.validate()?;
        self.loss.validate()?;
        if (1usize << (self.loss.gm_scales - 1)) > self.backbone.image_side {
            return Err(Error::config("loss.gm_scales", "too many scales for the image side"));
        }
        self.probe.validate()?;
        for (k, v) in [
            ("data.train_per_task", self.data.train_per_task),
            ("data.probe_fit", self.data.probe_fit),
            ("data.probe_eval", self.data.probe_eval),
        ] {
            if v == 0 {
                return Err(Error::config(k, "must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::config("<file>", e.message().to_string()))?;
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let msg = e.into_inner().message().to_string();
            Error::config(if key == "." { "<root>".to_string() } else { key }, msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// SHA-256 of the effective configuration text.
    pub fn fingerprint(&self) -> String {
        Sha256::digest(self.to_toml().as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Writes the post-default configuration into the output directory.
    pub fn echo(&self) -> Result<PathBuf> {
        let path = self.output_dir.join(EFFECTIVE_CONFIG);
        write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn split_dir(&self, split: crate::data::Split) -> PathBuf {
        self.data.dir.join(split.to_string())
    }
}
