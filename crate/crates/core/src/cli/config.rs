//! Run configuration: one TOML file plus dotted-path command-line
//! overrides, rejected on any unknown key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BaselineConfig, BaselineKind};
use crate::perception::CorruptionConfig;
use crate::scenegen::GeneratorConfig;
use crate::training::{BaselineTrainConfig, ModelConfig, Stage1Config, Stage2Config, RECALL_K};

/// Environment variable naming the directory all outputs go under.
pub const ROOT_ENV: &str = "LGCVS_OUTPUT_ROOT";

/// Output root used when neither a flag nor [`ROOT_ENV`] is given.
pub const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory, relative to the output root.
    pub dir: String,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: "data".into(),
            train: 2000,
            val: 500,
            test: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub width: usize,
    pub channels: [usize; 3],
    /// Reconstruction branch of the image-and-layout baseline.
    pub reconstruction: bool,
    pub recon_bottleneck: usize,
    pub train: BaselineTrainConfig,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self {
            width: 64,
            channels: [32, 64, 64],
            reconstruction: false,
            // Node count times node feature size of the default latent graph.
            recon_bottleneck: 16 * 64,
            train: BaselineTrainConfig::default(),
        }
    }
}

impl BaselineSection {
    pub fn model(&self, kind: BaselineKind) -> BaselineConfig {
        BaselineConfig {
            kind,
            width: self.width,
            channels: self.channels,
            recon_bottleneck: (self.reconstruction && kind == BaselineKind::Deep).then_some(self.recon_bottleneck),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub batch_size: usize,
    /// Cut-off of the triplet recall.
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            k: RECALL_K,
        }
    }
}

/// Grids of the one-dimensional sweeps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub lambda_perturb: Vec<f64>,
    pub recon_bottleneck: Vec<usize>,
    pub gnn_layers: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambda_perturb: vec![0.0, 0.0625, 0.125, 0.25],
            recon_bottleneck: vec![16, 32, 64, 128],
            gnn_layers: vec![1, 2, 3, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it by name.
    pub seed: u64,
    /// Run directory, relative to the output root.
    pub name: String,
    pub data: DataConfig,
    pub generator: GeneratorConfig,
    pub corruption: CorruptionConfig,
    pub model: ModelConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub baseline: BaselineSection,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            name: "run".into(),
            data: DataConfig::default(),
            generator: GeneratorConfig {
                width: 64,
                height: 64,
                ..Default::default()
            },
            corruption: CorruptionConfig {
                p_drop: 0.15,
                jitter: 0.1,
                p_confuse: 0.1,
                p_spurious: 0.0,
            },
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            baseline: BaselineSection::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parses an override value as a TOML literal, falling back to a bare
/// string so `name=abc` works without quotes.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value` overrides to a TOML document.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (path, raw) = o
            .split_once('=')
            .ok_or_else(|| config_error(format!("override {o:?} is not of the form key=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(config_error(format!("override key {path:?} is malformed")));
        }
        let mut table = &mut *doc;
        for k in &keys[..keys.len() - 1] {
            let entry = table
                .entry(k.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry
                .as_table_mut()
                .ok_or_else(|| config_error(format!("override {path:?}: {k} is not a table")))?;
        }
        table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_error)?;
        apply_overrides(&mut doc, overrides)?;
        let cfg: RunConfig = toml::Value::Table(doc).try_into().map_err(config_error)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`) and applies `overrides`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| config_error(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(config_error)
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.corruption.validate()?;
        self.model.validate()?;
        self.stage1.validate()?;
        self.stage2.validate()?;
        self.baseline.train.validate()?;
        if self.data.train == 0 || self.data.val == 0 || self.data.test == 0 {
            return Err(config_error("every data split needs at least one scene"));
        }
        if (self.generator.width, self.generator.height) != self.model.image_size() {
            return Err(config_error(format!(
                "generator renders {}x{} images but the model expects {:?}",
                self.generator.width,
                self.generator.height,
                self.model.image_size()
            )));
        }
        if self.eval.batch_size == 0 {
            return Err(config_error("eval batch size must be positive"));
        }
        if self.name.is_empty() || self.data.dir.is_empty() {
            return Err(config_error("run name and data directory must be non-empty"));
        }
        Ok(())
    }

    pub fn data_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.data.dir)
    }

    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.name)
    }

    /// JSON snapshot stored in checkpoints.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serialises")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_a_fixed_point() {
        let cfg = RunConfig::from_toml("seed = 3\n[stage2]\nlr = 0.001\n", &[]).unwrap();
        let text = cfg.to_toml().unwrap();
        let again = RunConfig::from_toml(&text, &[]).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_toml().unwrap(), text);
    }

    #[test]
    fn overrides_use_dotted_paths() {
        let o = [
            "stage2.lambda_perturb=0.25".to_string(),
            "model.cvs.components.visual=false".to_string(),
            "name=ablation".to_string(),
            "sweep.gnn_layers=[1, 2]".to_string(),
        ];
        let cfg = RunConfig::from_toml("", &o).unwrap();
        assert_eq!(cfg.stage2.lambda_perturb, 0.25);
        assert!(!cfg.model.cvs.components.visual);
        assert_eq!(cfg.name, "ablation");
        assert_eq!(cfg.sweep.gnn_layers, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for (text, o) in [
            ("bogus = 1\n", vec![]),
            ("[stage2]\nlearning_rate = 1.0\n", vec![]),
            ("", vec!["model.encoder.depth=3".to_string()]),
            ("", vec!["seed".to_string()]),
        ] {
            let err = RunConfig::from_toml(text, &o).unwrap_err();
            assert!(err.is_config_error(), "{err}");
        }
    }

    #[test]
    fn inconsistent_sizes_are_rejected() {
        let err = RunConfig::from_toml("[generator]\nwidth = 96\n", &[]).unwrap_err();
        assert!(err.is_config_error());
        let err = RunConfig::from_toml("", &["stage2.lambda_perturb=-1".into()]).unwrap_err();
        assert!(err.is_config_error());
    }
}
