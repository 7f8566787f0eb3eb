//! Run configuration: one TOML (or JSON) file with a section per module.

use std::fs;
use std::path::{Path, PathBuf};

use segkit::backbone::BackboneConfig;
use segkit::bench::BenchSettings;
use segkit::data::DataConfig;
use segkit::decoder::DecoderConfig;
use segkit::metrics::{MsConfig, DEFAULT_SCALES};
use segkit::trainer::TrainConfig;
use segkit::{Result, SegError};
use segkit_tensor::DType;
use serde::{Deserialize, Serialize};

pub const RESOLVED_NAME: &str = "resolved.toml";

/// `[eval]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Also run multi-scale inference.
    pub ms: bool,
    pub scales: Vec<f64>,
    pub flip: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ms: false,
            scales: DEFAULT_SCALES.to_vec(),
            flip: true,
        }
    }
}

impl EvalConfig {
    pub fn ms_config(&self) -> Option<MsConfig> {
        self.ms.then(|| MsConfig {
            scales: self.scales.clone(),
            flip: self.flip,
        })
    }
}

/// `[bench]` section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Square attention sizes `H = W`.
    pub sizes: Vec<usize>,
    /// Sequence lengths of the paradigm sweep.
    pub lengths: Vec<usize>,
    pub settings: BenchSettings,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            sizes: vec![16, 32, 64],
            lengths: vec![64, 256, 1024],
            settings: BenchSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Not written to `resolved.toml`, so outputs can move without changing it.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    /// Element type for training and evaluation.
    pub dtype: DType,
    pub backbone: BackboneConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("segkit-out"),
            dtype: DType::F32,
            backbone: BackboneConfig::default(),
            decoder: DecoderConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when the file ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| SegError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg = if is_json {
            Self::from_json(&text)
        } else {
            Self::from_toml(&text)
        };
        cfg.map_err(|e| SegError::Config(format!("{}: {e}", path.display())))
    }

    pub fn from_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes to TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.decoder.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.bench.settings.validate()?;
        if self.eval.ms && self.eval.scales.is_empty() {
            return Err(SegError::Config("eval.scales must not be empty".into()));
        }
        Ok(())
    }

    /// Writes `resolved.toml` into the output directory, creating it.
    pub fn write_resolved(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)
            .map_err(|e| SegError::Config(format!("cannot create {}: {e}", self.output_dir.display())))?;
        let path = self.output_dir.join(RESOLVED_NAME);
        fs::write(&path, self.to_toml())
            .map_err(|e| SegError::Config(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml("seed = 1\n\n[decoder]\nhiden = 4\n").unwrap_err();
        assert!(err.contains("hiden"), "{err}");
        assert!(err.contains("line 4"), "{err}");
        assert!(RunConfig::from_toml("colour = 1").is_err());
        assert!(RunConfig::from_json(r#"{"train": {"iters": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg = RunConfig::from_toml("[train]\niterations = 7\n[train.optimizer]\nlr = 0.5\n").unwrap();
        assert_eq!(cfg.train.iterations, 7);
        assert_eq!(cfg.train.optimizer.lr, 0.5);
        assert_eq!(cfg.train.optimizer.weight_decay, 0.01);
        let json = RunConfig::from_json(r#"{"decoder": {"n_cls": 3}}"#).unwrap();
        assert_eq!(json.decoder.n_cls, 3);
    }

    #[test]
    fn ms_section() {
        let mut e = EvalConfig::default();
        assert!(e.ms_config().is_none());
        e.ms = true;
        assert_eq!(e.ms_config().unwrap().scales, DEFAULT_SCALES.to_vec());
    }
}
